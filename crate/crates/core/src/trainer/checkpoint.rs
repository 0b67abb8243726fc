//! Checkpoints: one tensor file with both branches, momentum buffers and the
//! best snapshot, plus a JSON sidecar with progress and the config.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError, Trainer};
use crate::data::tensor_file::{self, NamedTensors};
use crate::models::{BranchModel, ParamStore};
use crate::numerics::Tensor;

pub const SIDECAR_EXT: &str = "json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub best_val_dsc: Option<f64>,
    pub best_iteration: Option<u64>,
    pub skipped_steps: u64,
    pub config_hash: String,
    pub config: TrainConfig,
}

fn sidecar(path: &Path) -> Result<PathBuf, TrainError> {
    if path.as_os_str().is_empty() {
        return Err(TrainError::Checkpoint("empty checkpoint path".into()));
    }
    if path.extension().is_some_and(|e| e == SIDECAR_EXT) {
        return Err(TrainError::Checkpoint(format!(
            "{}: checkpoint path must not use the sidecar extension .{SIDECAR_EXT}",
            path.display()
        )));
    }
    Ok(path.with_extension(SIDECAR_EXT))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn push_store(prefix: &str, store: &ParamStore, out: &mut NamedTensors) {
    for p in &store.params {
        out.push((format!("{prefix}/param/{}", p.name), p.value.clone()));
    }
    for r in &store.running {
        out.push((format!("{prefix}/running/{}/mean", r.name), r.mean.clone()));
        out.push((format!("{prefix}/running/{}/var", r.name), r.var.clone()));
    }
}

struct Entries(HashMap<String, Tensor<f32>>);

impl Entries {
    fn take(&mut self, name: &str, like: &Tensor<f32>) -> Result<Tensor<f32>, TrainError> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing entry `{name}`")))?;
        if t.shape() != like.shape() {
            return Err(TrainError::Checkpoint(format!(
                "entry `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    }

    fn fill_store(&mut self, prefix: &str, store: &mut ParamStore) -> Result<(), TrainError> {
        for p in &mut store.params {
            p.value = self.take(&format!("{prefix}/param/{}", p.name), &p.value)?;
        }
        for r in &mut store.running {
            r.mean = self.take(&format!("{prefix}/running/{}/mean", r.name), &r.mean)?;
            r.var = self.take(&format!("{prefix}/running/{}/var", r.name), &r.var)?;
        }
        Ok(())
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.0.keys().any(|k| k.starts_with(prefix))
    }

    fn finish(self) -> Result<(), TrainError> {
        let mut left: Vec<_> = self.0.into_keys().collect();
        left.sort();
        match left.first() {
            Some(name) => Err(TrainError::Checkpoint(format!(
                "{} unexpected entries, first `{name}` (model kind or size differs)",
                left.len()
            ))),
            None => Ok(()),
        }
    }
}

fn read_entries(path: &Path) -> Result<Entries, TrainError> {
    let mut map = HashMap::new();
    for (name, t) in tensor_file::read(path)? {
        map.insert(name, t);
    }
    Ok(Entries(map))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta, TrainError> {
    let side = sidecar(path)?;
    let text = std::fs::read_to_string(&side).map_err(io(&side))?;
    Ok(serde_json::from_str(&text)?)
}

impl Trainer {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            iteration: self.iteration,
            best_val_dsc: self.best_val_dsc,
            best_iteration: self.best_iteration,
            skipped_steps: self.skipped_steps,
            config_hash: self.config.hash(),
            config: self.config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let side = sidecar(path)?;
        let mut entries = NamedTensors::new();
        push_store("spa", &self.spa.store, &mut entries);
        push_store("spe", &self.spe.store, &mut entries);
        for (branch, store, vel) in [
            ("spa", &self.spa.store, &self.velocity_spa),
            ("spe", &self.spe.store, &self.velocity_spe),
        ] {
            for (p, v) in store.params.iter().zip(vel) {
                entries.push((format!("opt/{branch}/{}", p.name), v.clone()));
            }
        }
        if let Some(best) = &self.best {
            push_store("best/spa", &best.spa, &mut entries);
            push_store("best/spe", &best.spe, &mut entries);
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        tensor_file::write(path, &entries)?;
        let mut json = serde_json::to_string_pretty(&self.meta())?;
        json.push('\n');
        std::fs::write(&side, json).map_err(io(&side))
    }

    /// Restores a saved run. The checkpoint must have been written with
    /// `config` unless `force` is set; the architecture must match either way.
    pub fn resume(path: &Path, config: &TrainConfig, force: bool) -> Result<Self, TrainError> {
        let meta = read_meta(path)?;
        let expected = config.hash();
        if meta.config_hash != expected {
            if !force {
                return Err(TrainError::ConfigMismatch {
                    expected,
                    found: meta.config_hash,
                });
            }
            log::warn!("resuming {} with a different config (forced)", path.display());
        }
        let mut trainer = Trainer::new(config.clone())?;
        let mut entries = read_entries(path)?;
        entries.fill_store("spa", &mut trainer.spa.store)?;
        entries.fill_store("spe", &mut trainer.spe.store)?;
        for (branch, store, vel) in [
            ("spa", &trainer.spa.store, &mut trainer.velocity_spa),
            ("spe", &trainer.spe.store, &mut trainer.velocity_spe),
        ] {
            for (p, v) in store.params.iter().zip(vel.iter_mut()) {
                *v = entries.take(&format!("opt/{branch}/{}", p.name), &p.value)?;
            }
        }
        if entries.has_prefix("best/") {
            let mut best = trainer.snapshot();
            entries.fill_store("best/spa", &mut best.spa)?;
            entries.fill_store("best/spe", &mut best.spe)?;
            trainer.best = Some(best);
        }
        entries.finish()?;
        trainer.iteration = meta.iteration;
        trainer.best_val_dsc = meta.best_val_dsc;
        trainer.best_iteration = meta.best_iteration;
        trainer.skipped_steps = meta.skipped_steps;
        Ok(trainer)
    }
}

/// The branches of a checkpoint carrying the weights picked by its config's
/// selection rule.
pub fn load_selected(path: &Path) -> Result<(CheckpointMeta, BranchModel, BranchModel), TrainError> {
    let meta = read_meta(path)?;
    if meta.config.hash() != meta.config_hash {
        return Err(TrainError::ConfigMismatch {
            expected: meta.config.hash(),
            found: meta.config_hash,
        });
    }
    let trainer = Trainer::resume(path, &meta.config, false)?;
    let (spa, spe) = trainer.selected_models();
    Ok((meta, spa, spe))
}
