//! Dual-branch training loop: both branches are updated every iteration from
//! scribbles plus the mutual-teaching and ensemble pseudo-label terms.

mod checkpoint;
mod config;
mod optim;
mod presets;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_selected, read_meta, CheckpointMeta, SIDECAR_EXT};
pub use config::{LossTerm, Selection, TrainConfig, KEYS};
pub use optim::{poly_lr, sgd_step};
pub use presets::{apply_settings, cells, Cell, Grid, Method};

use crate::data::{augment, Batch, DataError, Dataset, Sample};
use crate::eval::{evaluate_dataset, evaluate_samples, EvalError, MetricsRecord};
use crate::fusion::FusionStrategy;
use crate::losses::{hybrid_loss, lambda_rampup, BranchOutputs, LossError, LossWeights, Mixing};
use crate::models::{BranchModel, Mode, ModelError, ParamStore};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: u64 },
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("checkpoint config hash {found} does not match {expected} (use --force to override)")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub lambda: f64,
    pub loss_total: f64,
    pub loss_scrib: f64,
    pub loss_mt: f64,
    pub loss_el: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dsc: Option<f64>,
}

/// Weights of both branches at one point of training.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub spa: ParamStore,
    pub spe: ParamStore,
}

/// Everything needed to continue a run: models, momentum buffers, progress
/// and the best snapshot seen so far.
pub struct Trainer {
    pub config: TrainConfig,
    pub spa: BranchModel,
    pub spe: BranchModel,
    velocity_spa: Vec<Tensor<f32>>,
    velocity_spe: Vec<Tensor<f32>>,
    iteration: u64,
    best_val_dsc: Option<f64>,
    best_iteration: Option<u64>,
    best: Option<Snapshot>,
    skipped_steps: u64,
}

fn zeros_like(store: &ParamStore) -> Vec<Tensor<f32>> {
    store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
}

fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let spa = BranchModel::build(config.model_config(config.model_spa), config.seed)?;
        let spe = BranchModel::build(config.model_config(config.model_spe), config.seed.wrapping_add(1))?;
        Ok(Self {
            velocity_spa: zeros_like(&spa.store),
            velocity_spe: zeros_like(&spe.store),
            config,
            spa,
            spe,
            iteration: 0,
            best_val_dsc: None,
            best_iteration: None,
            best: None,
            skipped_steps: 0,
        })
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn best_val_dsc(&self) -> Option<f64> {
        self.best_val_dsc
    }

    pub fn best_iteration(&self) -> Option<u64> {
        self.best_iteration
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            spa: self.spa.store.clone(),
            spe: self.spe.store.clone(),
        }
    }

    /// Weights chosen by `config.selection`; the current ones if no
    /// validation has run yet.
    pub fn selected(&self) -> Snapshot {
        match (&self.best, self.config.selection) {
            (Some(best), Selection::Best) => best.clone(),
            _ => self.snapshot(),
        }
    }

    /// The two branches carrying the selected weights.
    pub fn selected_models(&self) -> (BranchModel, BranchModel) {
        let s = self.selected();
        let (mut spa, mut spe) = (self.spa.clone(), self.spe.clone());
        spa.store = s.spa;
        spe.store = s.spe;
        (spa, spe)
    }

    fn draw_batch(&self, rng: &mut ChaCha8Rng, train: &[Sample]) -> Result<Batch, TrainError> {
        let mut picked = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let s = &train[rng.gen_range(0..train.len())];
            let (h, _) = s.size();
            picked.push(augment(s, rng, self.config.crop_max, h, self.config.flip_p)?);
        }
        Ok(Batch::from_samples(&picked)?)
    }

    /// Runs one optimization step, plus validation when it is due.
    pub fn step(&mut self, train: &[Sample], val: &[Sample]) -> Result<LogRecord, TrainError> {
        if train.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        let t = self.iteration;
        let cfg = self.config.clone();
        let mut rng = iteration_rng(cfg.seed, t);
        let batch = self.draw_batch(&mut rng, train)?;
        let alphas: Vec<f64> = match cfg.fusion {
            FusionStrategy::Random => (0..cfg.batch_size).map(|_| rng.gen::<f64>()).collect(),
            _ => Vec::new(),
        };
        let mixing = match cfg.fusion {
            FusionStrategy::Entropy => Mixing::Entropy,
            FusionStrategy::Equal => Mixing::Equal,
            FusionStrategy::Random => Mixing::Random(&alphas),
        };

        // Norm statistics move during the forward pass; keep them so a
        // rejected step leaves the state untouched.
        let running = (self.spa.store.running.clone(), self.spe.store.running.clone());
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(batch.images);
        let pa = self.spa.store.bind(&mut tape);
        let pe = self.spe.store.bind(&mut tape);
        let la = self.spa.forward(&mut tape, &pa, x, Mode::Train)?;
        let le = self.spe.forward(&mut tape, &pe, x, Mode::Train)?;
        let oa = BranchOutputs::from_logits(&mut tape, la)?;
        let oe = BranchOutputs::from_logits(&mut tape, le)?;
        let lambda = lambda_rampup(t, cfg.ramp_iters, cfg.lambda_max);
        let weight = |term| if cfg.has(term) { lambda } else { 0.0 };
        let weights = LossWeights::new(weight(LossTerm::Mt), weight(LossTerm::El));
        let loss = hybrid_loss(&mut tape, oa, oe, &batch.scribbles, weights, mixing);
        let loss = match loss {
            Ok(l) if l.values.total.is_finite() => l,
            Ok(_) | Err(LossError::Numerics(NumericsError::NonFinite { .. })) => {
                (self.spa.store.running, self.spe.store.running) = running;
                return Err(TrainError::NonFiniteLoss { iter: t });
            }
            Err(e) => return Err(e.into()),
        };
        let grads = tape.backward(loss.total)?;
        let collect = |vars: &[Var], store: &ParamStore| -> Vec<Tensor<f32>> {
            vars.iter()
                .zip(&store.params)
                .map(|(&v, p)| grads.get_or_zeros(v, p.value.shape()))
                .collect()
        };
        let ga = collect(&pa, &self.spa.store);
        let ge = collect(&pe, &self.spe.store);
        let lr = poly_lr(t, cfg.iterations, cfg.lr0, cfg.poly_power);

        let bad = self
            .spa
            .store
            .params
            .iter()
            .zip(&ga)
            .chain(self.spe.store.params.iter().zip(&ge))
            .find(|(_, g)| !g.is_finite());
        if let Some((p, _)) = bad {
            log::warn!("iteration {t}: non-finite gradient for `{}`; step rejected", p.name);
            (self.spa.store.running, self.spe.store.running) = running;
            self.skipped_steps += 1;
        } else {
            sgd_step(
                &mut self.spa.store.params,
                &ga,
                &mut self.velocity_spa,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            sgd_step(
                &mut self.spe.store.params,
                &ge,
                &mut self.velocity_spe,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }
        self.iteration += 1;

        let mut record = LogRecord {
            iter: t,
            lr,
            lambda,
            loss_total: loss.values.total,
            loss_scrib: loss.values.scrib,
            loss_mt: loss.values.mt,
            loss_el: loss.values.el,
            val_dsc: None,
        };
        if !val.is_empty() && (self.iteration % cfg.eval_every == 0 || self.iteration == cfg.iterations) {
            let dsc = self.validate(val)?;
            record.val_dsc = Some(dsc);
            if self.best_val_dsc.map_or(true, |b| dsc > b) {
                self.best_val_dsc = Some(dsc);
                self.best_iteration = Some(self.iteration);
                self.best = Some(self.snapshot());
            }
        }
        Ok(record)
    }

    /// Mean DSC of the spatial branch in eval mode.
    pub fn validate(&mut self, val: &[Sample]) -> Result<f64, TrainError> {
        let scores = evaluate_samples(&mut self.spa, val, self.config.hd_percentile)?;
        Ok(scores.iter().map(|s| s.dsc).sum::<f64>() / scores.len().max(1) as f64)
    }

    /// Steps until `until` iterations are complete (capped at the configured
    /// total), writing each record as a JSON line. The checkpoint, when
    /// given, is refreshed after every validation and at the end; after a
    /// non-finite loss it holds the last good state.
    pub fn run(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        until: u64,
        mut log: Option<&mut dyn Write>,
        checkpoint: Option<&Path>,
    ) -> Result<Vec<LogRecord>, TrainError> {
        let until = until.min(self.config.iterations);
        let mut records = Vec::new();
        while self.iteration < until {
            let record = match self.step(train, val) {
                Ok(r) => r,
                Err(e @ TrainError::NonFiniteLoss { .. }) => {
                    log::error!("{e}; keeping the state after iteration {}", self.iteration);
                    if let Some(path) = checkpoint {
                        self.save(path)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(w, "{line}").map_err(|source| TrainError::Io {
                    path: "training log".into(),
                    source,
                })?;
            }
            if record.iter % 50 == 0 || record.val_dsc.is_some() {
                log::info!(
                    "iter {} lr {:.5} lambda {:.4} loss {:.4} (scrib {:.4} mt {:.4} el {:.4}){}",
                    record.iter,
                    record.lr,
                    record.lambda,
                    record.loss_total,
                    record.loss_scrib,
                    record.loss_mt,
                    record.loss_el,
                    record.val_dsc.map(|d| format!(" val dsc {d:.4}")).unwrap_or_default()
                );
            }
            let validated = record.val_dsc.is_some();
            records.push(record);
            if validated {
                if let Some(path) = checkpoint {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(records)
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<LogRecord>,
}

/// Trains from scratch on the dataset's train split, validating on its val
/// split.
pub fn train(
    config: TrainConfig,
    dataset: &Dataset,
    log: Option<&mut dyn Write>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(TrainError::Config("train and val splits must be nonempty".into()));
    }
    let mut trainer = Trainer::new(config)?;
    let total = trainer.config.iterations;
    let log = trainer.run(&dataset.train, &dataset.val, total, log, checkpoint)?;
    Ok(TrainOutcome { trainer, log })
}

/// Scores the selected spatial branch of a finished run on `samples`.
pub fn evaluate_selected(
    trainer: &Trainer,
    samples: &[Sample],
    method: &str,
    dataset: &str,
    pct: f64,
) -> Result<MetricsRecord, TrainError> {
    let (mut spa, _) = trainer.selected_models();
    Ok(evaluate_dataset(
        &mut spa,
        samples,
        method,
        dataset,
        trainer.config.seed,
        pct,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameter;

    #[test]
    fn poly_lr_examples() {
        assert!((poly_lr(0, 3000, 0.03, 0.9) - 0.03).abs() < 1e-12);
        assert!((poly_lr(1500, 3000, 0.03, 0.9) - 0.016077).abs() < 1e-6);
        assert_eq!(poly_lr(3000, 3000, 0.03, 0.9), 0.0);
    }

    fn scalar(v: f32) -> Vec<Parameter<f32>> {
        vec![Parameter::new("theta", Tensor::new(vec![1], vec![v]).unwrap())]
    }

    #[test]
    fn sgd_two_hand_steps() {
        let mut p = scalar(1.0);
        let g = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0].value.item() - 0.9).abs() < 1e-7 && (v[0].item() - 1.0).abs() < 1e-7);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0].value.item() - 0.71).abs() < 1e-6 && (v[0].item() - 1.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_zero_gradient_is_identity_and_nan_is_rejected() {
        let mut p = scalar(0.25);
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut p, &[Tensor::zeros(&[1])], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p[0].value.item(), 0.25);
        let bad = [Tensor::new(vec![1], vec![f32::NAN]).unwrap()];
        assert!(matches!(
            sgd_step(&mut p, &bad, &mut v, 0.1, 0.9, 0.0),
            Err(TrainError::NonFiniteGradient(_))
        ));
        assert_eq!(p[0].value.item(), 0.25);
        assert!(sgd_step(&mut p, &bad, &mut [], 0.1, 0.9, 0.0).is_err());
    }
}
