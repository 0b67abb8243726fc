//! Markdown tables for ablation results.

use s2me::eval::{aggregate, MetricsRecord, SampleMetrics};
use s2me::trainer::{Cell, Grid};

/// Outcome of one grid cell over all requested seeds.
pub struct CellResult {
    pub cell: Cell,
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<(u64, String)>,
}

fn pm(mean: f64, std: f64) -> String {
    format!("{mean:.3}±{std:.3}")
}

/// Metric columns, or a failure marker when no seed finished.
fn metrics(r: &CellResult, seeds: usize, cols: &[fn(&SampleMetrics) -> f64]) -> Vec<String> {
    let agg = aggregate(&r.records);
    let Some(a) = agg.first() else {
        let why = r
            .failures
            .first()
            .map(|(s, e)| format!("seed {s}: {e}"))
            .unwrap_or_default();
        let mut out = vec!["FAILED".to_string(); cols.len()];
        out[0] = format!("FAILED ({why})");
        return out;
    };
    let mut out: Vec<String> = cols.iter().map(|f| pm(f(&a.mean), f(&a.std))).collect();
    if a.seeds.len() < seeds {
        out[0] = format!("{} ({}/{} seeds)", out[0], a.seeds.len(), seeds);
    }
    out
}

fn row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn header(names: &[&str]) -> String {
    let mut s = row(&names.iter().map(|n| n.to_string()).collect::<Vec<_>>());
    s += &row(&vec!["---".to_string(); names.len()]);
    s
}

fn model_name(v: &str) -> String {
    match v {
        "unet" => "UNet".into(),
        "ynet" => "YNet".into(),
        other => other.into(),
    }
}

fn mark(on: bool) -> String {
    if on { "✓" } else { "✗" }.into()
}

pub fn markdown(grid: Grid, results: &[CellResult], seeds: usize) -> String {
    let dsc: fn(&SampleMetrics) -> f64 = |m| m.dsc;
    let iou: fn(&SampleMetrics) -> f64 = |m| m.iou;
    let prec: fn(&SampleMetrics) -> f64 = |m| m.precision;
    let hd: fn(&SampleMetrics) -> f64 = |m| m.hd;
    let mut out = String::new();
    match grid {
        Grid::Network => {
            out += "## Dual-branch network pairings\n\n";
            out += &header(&["Model-1", "Model-2", "Method", "DSC ↑", "IoU ↑", "Prec ↑", "HD ↓"]);
            for r in results {
                let spa = r.cell.get("model_spa").unwrap_or("?");
                let spe = r.cell.get("model_spe").unwrap_or("?");
                let method = if spa == spe { "ME" } else { "S²ME" };
                let mut cells = vec![model_name(spa), model_name(spe), method.to_string()];
                cells.extend(metrics(r, seeds, &[dsc, iou, prec, hd]));
                out += &row(&cells);
            }
        }
        Grid::Fusion => {
            out += "## Pseudo-label fusion strategies\n\n";
            out += &header(&["Strategy", "Level", "DSC ↑", "HD ↓"]);
            for r in results {
                let (name, level) = match r.cell.get("fusion").unwrap_or("?") {
                    "random" => ("Random", "Image"),
                    "equal" => ("Equal (0.5)", "Image"),
                    "entropy" => ("Entropy", "Pixel"),
                    other => (other, "?"),
                };
                let mut cells = vec![name.to_string(), level.to_string()];
                cells.extend(metrics(r, seeds, &[dsc, hd]));
                out += &row(&cells);
            }
        }
        Grid::Loss => {
            out += "## Loss components\n\n";
            out += &header(&["L_scrib", "L_mt", "L_el", "DSC ↑", "HD ↓"]);
            for r in results {
                let terms = r.cell.get("loss_terms").unwrap_or("");
                let has = |t: &str| terms.split(',').any(|x| x == t);
                let mut cells = vec![mark(has("scrib")), mark(has("mt")), mark(has("el"))];
                cells.extend(metrics(r, seeds, &[dsc, hd]));
                out += &row(&cells);
            }
        }
    }
    out.push('\n');
    out
}
