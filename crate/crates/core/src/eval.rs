//! Segmentation metrics and dataset-level aggregation across seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, DataError, Sample};
use crate::fusion::{pseudo_label, FusionError};
use crate::labels::{LabelMap, FOREGROUND};
use crate::models::{BranchModel, ModelError};
use crate::numerics::Tensor;

pub const DEFAULT_PERCENTILE: f64 = 95.0;
pub const EVAL_BATCH: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction of {pred} pixels vs ground truth of {gt}")]
    Shape { pred: usize, gt: usize },
    #[error("percentile {0} outside (0, 100]")]
    Percentile(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn count(pred: &[u8], gt: &[u8]) -> Result<Self, EvalError> {
        if pred.len() != gt.len() {
            return Err(EvalError::Shape {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p == FOREGROUND, g == FOREGROUND) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }
}

/// `(dsc, iou, precision)` with totalised empty-set conventions: both empty
/// gives ones; any empty side otherwise gives zeros.
pub fn confusion_metrics(pred: &[u8], gt: &[u8]) -> Result<(f64, f64, f64), EvalError> {
    let c = Confusion::count(pred, gt)?;
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let pred_empty = c.tp + c.fp == 0;
    let gt_empty = c.tp + c.fn_ == 0;
    if pred_empty && gt_empty {
        return Ok((1.0, 1.0, 1.0));
    }
    let precision = if pred_empty { 0.0 } else { tp / (tp + fp) };
    Ok((2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_), precision))
}

/// Foreground pixels with a 4-neighbour in the background; pixels outside
/// the image count as background.
pub fn boundary(mask: &[u8], h: usize, w: usize) -> Vec<bool> {
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] == FOREGROUND
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))
        })
        .collect()
}

/// Exact squared Euclidean distance transform to the `true` pixels
/// (lower-envelope algorithm, separable over rows and columns).
pub fn squared_edt(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    let inf = 1e20;
    let mut g = vec![0.0; h * w];
    let mut f = vec![0.0; h.max(w)];
    let mut d = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            f[y] = if set[y * w + x] { 0.0 } else { inf };
        }
        edt_1d(&f[..h], &mut d[..h]);
        for y in 0..h {
            g[y * w + x] = d[y];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        f[..w].copy_from_slice(&g[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w]);
        out[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    out
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Linear-interpolation percentile of unsorted values.
pub fn percentile(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = pct / 100.0 * (values.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Symmetric percentile Hausdorff distance between the boundaries of two
/// H×W binary maps, in pixels. Both empty gives 0; one empty gives the
/// image diagonal.
pub fn hausdorff(pred: &[u8], gt: &[u8], h: usize, w: usize, pct: f64) -> Result<f64, EvalError> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(EvalError::Percentile(pct));
    }
    if pred.len() != h * w || gt.len() != h * w {
        return Err(EvalError::Shape {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    let (np, ng) = (bp.iter().any(|&v| v), bg.iter().any(|&v| v));
    match (np, ng) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(((h * h + w * w) as f64).sqrt()),
        _ => {}
    }
    let directed = |from: &[bool], to: &[bool]| {
        let dt = squared_edt(to, h, w);
        let mut d: Vec<f64> = (0..h * w).filter(|&i| from[i]).map(|i| dt[i].sqrt()).collect();
        percentile(&mut d, pct)
    };
    Ok(directed(&bp, &bg).max(directed(&bg, &bp)))
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub hd: f64,
}

impl SampleMetrics {
    pub fn score(pred: &[u8], gt: &[u8], h: usize, w: usize, pct: f64) -> Result<Self, EvalError> {
        let (dsc, iou, precision) = confusion_metrics(pred, gt)?;
        Ok(Self {
            dsc,
            iou,
            precision,
            hd: hausdorff(pred, gt, h, w, pct)?,
        })
    }

    fn fields(&self) -> [f64; 4] {
        [self.dsc, self.iou, self.precision, self.hd]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self {
            dsc: f[0],
            iou: f[1],
            precision: f[2],
            hd: f[3],
        }
    }
}

fn mean_std(values: &[[f64; 4]]) -> (SampleMetrics, SampleMetrics) {
    let n = values.len() as f64;
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    if values.is_empty() {
        return (SampleMetrics::default(), SampleMetrics::default());
    }
    for k in 0..4 {
        mean[k] = values.iter().map(|v| v[k]).sum::<f64>() / n;
        if values.len() > 1 {
            std[k] = (values.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        }
    }
    (SampleMetrics::from_fields(mean), SampleMetrics::from_fields(std))
}

/// Anything producing binary predictions for an image batch.
pub trait Segmenter {
    fn segment(&mut self, images: &Tensor<f32>) -> Result<LabelMap, EvalError>;
}

/// Argmax of the branch softmax in eval mode, without post-processing.
impl Segmenter for BranchModel {
    fn segment(&mut self, images: &Tensor<f32>) -> Result<LabelMap, EvalError> {
        Ok(pseudo_label(&self.predict(images)?)?)
    }
}

/// Metrics of one model (one seed) on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub mean: SampleMetrics,
    /// Standard deviation across samples.
    pub std: SampleMetrics,
    pub per_sample: Vec<SampleMetrics>,
}

pub fn evaluate_samples<M: Segmenter + ?Sized>(
    model: &mut M,
    samples: &[Sample],
    pct: f64,
) -> Result<Vec<SampleMetrics>, EvalError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = Batch::from_samples(chunk)?;
        let pred = model.segment(&batch.images)?;
        let (n, h, w) = pred.dims();
        if n != chunk.len() || batch.masks.dims() != (n, h, w) {
            return Err(EvalError::Invalid(format!(
                "segmenter returned {:?} for a batch of {:?}",
                pred.dims(),
                batch.masks.dims()
            )));
        }
        for b in 0..n {
            let (p, g) = (pred.slice_batch(b), batch.masks.slice_batch(b));
            out.push(SampleMetrics::score(p.data(), g.data(), h, w, pct)?);
        }
    }
    Ok(out)
}

pub fn evaluate_dataset<M: Segmenter + ?Sized>(
    model: &mut M,
    samples: &[Sample],
    method: &str,
    dataset: &str,
    seed: u64,
    pct: f64,
) -> Result<MetricsRecord, EvalError> {
    let per_sample = evaluate_samples(model, samples, pct)?;
    let (mean, std) = mean_std(&per_sample.iter().map(|m| m.fields()).collect::<Vec<_>>());
    Ok(MetricsRecord {
        method: method.into(),
        dataset: dataset.into(),
        seed,
        mean,
        std,
        per_sample,
    })
}

/// Mean ± sample standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub mean: SampleMetrics,
    pub std: SampleMetrics,
}

/// Groups records by (method, dataset) in first-seen order.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in records {
        let k = (r.method.clone(), r.dataset.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, dataset)| {
            let group: Vec<&MetricsRecord> = records
                .iter()
                .filter(|r| r.method == method && r.dataset == dataset)
                .collect();
            let (mean, std) = mean_std(&group.iter().map(|r| r.mean.fields()).collect::<Vec<_>>());
            Aggregate {
                method,
                dataset,
                seeds: group.iter().map(|r| r.seed).collect(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "dataset", "seed", "dsc", "iou", "precision", "hd"])?;
    for r in records {
        w.write_record([
            r.method.clone(),
            r.dataset.clone(),
            r.seed.to_string(),
            format!("{:.6}", r.mean.dsc),
            format!("{:.6}", r.mean.iou),
            format!("{:.6}", r.mean.precision),
            format!("{:.6}", r.mean.hd),
        ])?;
    }
    w.flush().map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[derive(Serialize, Deserialize)]
pub struct Report {
    pub records: Vec<MetricsRecord>,
    pub aggregates: Vec<Aggregate>,
}

pub fn write_json(path: &Path, records: &[MetricsRecord]) -> Result<(), EvalError> {
    let report = Report {
        records: records.to_vec(),
        aggregates: aggregate(records),
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(path, text + "\n").map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
