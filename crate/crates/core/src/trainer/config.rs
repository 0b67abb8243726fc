//! Training configuration and its flat `key = value` text form.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::fusion::FusionStrategy;
use crate::models::{ModelConfig, ModelKind, NormKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Scrib,
    Mt,
    El,
}

impl std::str::FromStr for LossTerm {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "scrib" => Ok(Self::Scrib),
            "mt" => Ok(Self::Mt),
            "el" => Ok(Self::El),
            other => Err(TrainError::Config(format!("unknown loss term `{other}` (scrib|mt|el)"))),
        }
    }
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Scrib => "scrib",
            Self::Mt => "mt",
            Self::El => "el",
        })
    }
}

/// Which weights `train` hands back as the result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Best validation DSC of the spatial branch.
    Best,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub ramp_iters: u64,
    pub lambda_max: f64,
    pub seed: u64,
    pub model_spa: ModelKind,
    pub model_spe: ModelKind,
    pub fusion: FusionStrategy,
    pub loss_terms: Vec<LossTerm>,
    pub eval_every: u64,
    pub base_width: usize,
    pub depth: usize,
    pub local_ratio: f64,
    pub norm: NormKind,
    pub crop_max: usize,
    pub flip_p: f64,
    pub selection: Selection,
    pub hd_percentile: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 8,
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            ramp_iters: 2500,
            lambda_max: 5.0,
            seed: 1,
            model_spa: ModelKind::Unet,
            model_spe: ModelKind::Ynet,
            fusion: FusionStrategy::Entropy,
            loss_terms: vec![LossTerm::Scrib, LossTerm::Mt, LossTerm::El],
            eval_every: 100,
            base_width: 16,
            depth: 3,
            local_ratio: 0.5,
            norm: NormKind::Batch,
            crop_max: 2,
            flip_p: 0.5,
            selection: Selection::Best,
            hd_percentile: 95.0,
        }
    }
}

/// Keys accepted in config files and overrides, in file order.
pub const KEYS: &[&str] = &[
    "iterations",
    "batch_size",
    "lr0",
    "momentum",
    "weight_decay",
    "poly_power",
    "ramp_iters",
    "lambda_max",
    "seed",
    "model_spa",
    "model_spe",
    "fusion",
    "loss_terms",
    "eval_every",
    "base_width",
    "depth",
    "local_ratio",
    "norm",
    "crop_max",
    "flip_p",
    "selection",
    "hd_percentile",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn has(&self, term: LossTerm) -> bool {
        self.loss_terms.contains(&term)
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            base_width: self.base_width,
            depth: self.depth,
            local_ratio: self.local_ratio,
            norm: self.norm,
        }
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let value = value.trim();
        match key.trim() {
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "ramp_iters" => self.ramp_iters = parse(key, value)?,
            "lambda_max" => self.lambda_max = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "model_spa" => self.model_spa = value.parse().map_err(TrainError::Config)?,
            "model_spe" => self.model_spe = value.parse().map_err(TrainError::Config)?,
            "fusion" => self.fusion = value.parse().map_err(TrainError::Config)?,
            "loss_terms" => {
                let mut terms = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<Vec<LossTerm>, _>>()?;
                terms.sort();
                terms.dedup();
                self.loss_terms = terms;
            }
            "eval_every" => self.eval_every = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "local_ratio" => self.local_ratio = parse(key, value)?,
            "norm" => {
                self.norm = match value {
                    "batch" => NormKind::Batch,
                    "instance" => NormKind::Instance,
                    other => return Err(TrainError::Config(format!("unknown norm `{other}` (batch|instance)"))),
                }
            }
            "crop_max" => self.crop_max = parse(key, value)?,
            "flip_p" => self.flip_p = parse(key, value)?,
            "selection" => {
                self.selection = match value {
                    "best" => Selection::Best,
                    "last" => Selection::Last,
                    other => return Err(TrainError::Config(format!("unknown selection `{other}` (best|last)"))),
                }
            }
            "hd_percentile" => self.hd_percentile = parse(key, value)?,
            other => return Err(TrainError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), TrainError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parses flat `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| TrainError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let terms: Vec<String> = self.loss_terms.iter().map(|t| t.to_string()).collect();
        let norm = match self.norm {
            NormKind::Batch => "batch",
            NormKind::Instance => "instance",
        };
        let selection = match self.selection {
            Selection::Best => "best",
            Selection::Last => "last",
        };
        let values = [
            self.iterations.to_string(),
            self.batch_size.to_string(),
            self.lr0.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            self.poly_power.to_string(),
            self.ramp_iters.to_string(),
            self.lambda_max.to_string(),
            self.seed.to_string(),
            self.model_spa.to_string(),
            self.model_spe.to_string(),
            self.fusion.to_string(),
            terms.join(","),
            self.eval_every.to_string(),
            self.base_width.to_string(),
            self.depth.to_string(),
            self.local_ratio.to_string(),
            norm.to_string(),
            self.crop_max.to_string(),
            self.flip_p.to_string(),
            selection.to_string(),
            self.hd_percentile.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !self.has(LossTerm::Scrib) {
            return fail("loss_terms must include scrib".into());
        }
        if self.iterations == 0 || self.batch_size == 0 || self.ramp_iters == 0 || self.eval_every == 0 {
            return fail("iterations, batch_size, ramp_iters and eval_every must be positive".into());
        }
        if !(self.lr0 > 0.0) {
            return fail(format!("lr0 {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.poly_power > 0.0) {
            return fail(format!("poly_power {} must be positive", self.poly_power));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return fail("weight_decay must be >= 0 and lambda_max finite and > 0".into());
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return fail(format!("flip_p {} outside [0, 1]", self.flip_p));
        }
        if !(self.hd_percentile > 0.0 && self.hd_percentile <= 100.0) {
            return fail(format!("hd_percentile {} outside (0, 100]", self.hd_percentile));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::default();
        c.loss_terms = vec![LossTerm::Scrib];
        c.fusion = FusionStrategy::Random;
        c.lr0 = 0.0123;
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn rejects_missing_scrib_and_unknown_keys() {
        assert!(TrainConfig::from_kv("loss_terms = mt,el").is_err());
        let err = TrainConfig::from_kv("# c\nbogus = 1").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(TrainConfig::from_kv("momentum = 1.0").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.model_spe = ModelKind::Unet;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
