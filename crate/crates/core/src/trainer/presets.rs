//! Named method configurations and the ablation grids built from them.

use super::{TrainConfig, TrainError};

/// Method presets: models, fusion rule and loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// UNet spatial branch, YNet spectral branch, entropy fusion, all terms.
    S2me,
    /// Scribble loss only, on the same two branches.
    ScribPce,
    MeUnetUnet,
    MeYnetYnet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::S2me, Method::ScribPce, Method::MeUnetUnet, Method::MeYnetYnet];

    pub fn name(self) -> &'static str {
        match self {
            Method::S2me => "s2me",
            Method::ScribPce => "scrib-pce",
            Method::MeUnetUnet => "me-unet-unet",
            Method::MeYnetYnet => "me-ynet-ynet",
        }
    }

    /// Config keys and values the preset pins.
    pub fn settings(self) -> Vec<(&'static str, &'static str)> {
        let (spa, spe, terms) = match self {
            Method::S2me => ("unet", "ynet", "scrib,mt,el"),
            Method::ScribPce => ("unet", "ynet", "scrib"),
            Method::MeUnetUnet => ("unet", "unet", "scrib,mt,el"),
            Method::MeYnetYnet => ("ynet", "ynet", "scrib,mt,el"),
        };
        vec![
            ("model_spa", spa),
            ("model_spe", spe),
            ("fusion", "entropy"),
            ("loss_terms", terms),
        ]
    }
}

impl std::str::FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            TrainError::Config(format!("unknown method `{s}` ({})", names.join("|")))
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn apply_settings<K: AsRef<str>, V: AsRef<str>>(
    config: &mut TrainConfig,
    settings: &[(K, V)],
) -> Result<(), TrainError> {
    for (k, v) in settings {
        config.set(k.as_ref(), v.as_ref())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Grid {
    /// Network pairings.
    Network,
    /// Pseudo-label fusion rules.
    Fusion,
    /// Loss-term subsets.
    Loss,
}

impl Grid {
    pub const ALL: [Grid; 3] = [Grid::Network, Grid::Fusion, Grid::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Network => "network",
            Grid::Fusion => "fusion",
            Grid::Loss => "loss",
        }
    }
}

impl std::str::FromStr for Grid {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Grid::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown grid `{s}` (network|fusion|loss)")))
    }
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub grid: Grid,
    pub label: String,
    pub settings: Vec<(&'static str, String)>,
}

impl Cell {
    fn new(grid: Grid, label: &str, spa: &str, spe: &str, fusion: &str, terms: &str) -> Self {
        Cell {
            grid,
            label: label.to_string(),
            settings: vec![
                ("model_spa", spa.into()),
                ("model_spe", spe.into()),
                ("fusion", fusion.into()),
                ("loss_terms", terms.into()),
            ],
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.settings.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    pub fn config(&self, base: &TrainConfig) -> Result<TrainConfig, TrainError> {
        let mut c = base.clone();
        apply_settings(&mut c, &self.settings)?;
        c.validate()?;
        Ok(c)
    }
}

pub fn cells(grid: Grid) -> Vec<Cell> {
    let all = "scrib,mt,el";
    match grid {
        Grid::Network => vec![
            Cell::new(grid, "me-unet-unet", "unet", "unet", "entropy", all),
            Cell::new(grid, "me-ynet-ynet", "ynet", "ynet", "entropy", all),
            Cell::new(grid, "s2me", "unet", "ynet", "entropy", all),
        ],
        Grid::Fusion => ["random", "equal", "entropy"]
            .into_iter()
            .map(|f| Cell::new(grid, f, "unet", "ynet", f, all))
            .collect(),
        Grid::Loss => ["scrib", "scrib,mt", "scrib,el", all]
            .into_iter()
            .map(|t| Cell::new(grid, &t.replace(',', "+"), "unet", "ynet", "entropy", t))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionStrategy;
    use crate::models::ModelKind;
    use crate::trainer::LossTerm;

    #[test]
    fn presets_set_expected_fields() {
        let mut c = TrainConfig::default();
        apply_settings(&mut c, &Method::ScribPce.settings()).unwrap();
        assert_eq!(c.loss_terms, vec![LossTerm::Scrib]);
        apply_settings(&mut c, &Method::S2me.settings()).unwrap();
        assert_eq!((c.model_spa, c.model_spe), (ModelKind::Unet, ModelKind::Ynet));
        assert_eq!(c.fusion, FusionStrategy::Entropy);
        assert_eq!(c.loss_terms.len(), 3);
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(cells(Grid::Loss).len(), 4);
        assert_eq!(cells(Grid::Fusion).len(), 3);
        assert_eq!(cells(Grid::Network).len(), 3);
        for g in Grid::ALL {
            for cell in cells(g) {
                cell.config(&TrainConfig::default()).unwrap();
            }
        }
    }
}
