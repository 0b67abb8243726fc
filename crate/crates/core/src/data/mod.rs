//! Synthetic scribble-annotated corpus, augmentation, corruptions and the
//! on-disk formats.
//!
//! A dataset directory holds `manifest.json` plus one `S2TF` file per sample
//! with entries `image` (3×H×W), `mask` (H×W) and `scribble` (H×W).

mod augment;
mod corrupt;
mod scribble;
mod synth;
pub mod tensor_file;

pub use augment::{apply as apply_transform, augment, AugmentConfig, Transform};
pub use corrupt::{corrupt, psnr, Corruption};
pub use scribble::{depth_map, generate_scribbles, largest_component, skeletonize, ScribbleConfig, Scribbles};
pub use synth::{render, MAX_FG_FRACTION, MIN_FG_FRACTION, MIN_SIZE};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::labels::{LabelError, LabelMap, ScribbleMask, UNLABELED};
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tensor file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Per-sample random stream derived from the corpus seed and the sample id.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    /// 3×H×W in [0, 1].
    pub image: Tensor<f32>,
    /// 1×H×W in {0, 1}.
    pub mask: LabelMap,
    /// 1×H×W in {0, 1, 2}.
    pub scribble: ScribbleMask,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    /// Scribble labels equal the mask wherever they are set.
    pub fn scribble_consistent(&self) -> bool {
        self.scribble
            .data()
            .iter()
            .zip(self.mask.data())
            .all(|(&s, &m)| s == UNLABELED || s == m)
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let (h, w) = self.size();
        let plane = |m: &LabelMap| m.to_tensor::<f32>().reshape(&[h, w]).expect("same length");
        vec![
            ("image".to_string(), self.image.clone()),
            ("mask".to_string(), plane(&self.mask)),
            ("scribble".to_string(), plane(&self.scribble)),
        ]
    }

    pub fn from_entries(id: u32, mut entries: tensor_file::NamedTensors) -> Result<Self, DataError> {
        let image = tensor_file::take(&mut entries, "image")?;
        let mask = LabelMap::from_tensor(&tensor_file::take(&mut entries, "mask")?)?;
        let scribble = LabelMap::from_tensor(&tensor_file::take(&mut entries, "scribble")?)?;
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || mask.dims() != (1, s[1], s[2]) || scribble.dims() != mask.dims() {
            return Err(DataError::Invalid(format!(
                "sample {id}: image {:?}, mask {:?}, scribble {:?} disagree",
                s,
                mask.dims(),
                scribble.dims()
            )));
        }
        mask.validate(1)?;
        scribble.validate(UNLABELED)?;
        Ok(Self {
            id,
            image,
            mask,
            scribble,
        })
    }
}

/// Stacked mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub masks: LabelMap,
    pub scribbles: ScribbleMask,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Invalid("empty batch".into()));
        }
        let images: Vec<Tensor<f32>> = samples
            .iter()
            .map(|s| {
                let (h, w) = s.size();
                s.image.clone().reshape(&[1, 3, h, w])
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            images: Tensor::stack_batch(&images)?,
            masks: LabelMap::stack(&samples.iter().map(|s| s.mask.clone()).collect::<Vec<_>>())?,
            scribbles: LabelMap::stack(&samples.iter().map(|s| s.scribble.clone()).collect::<Vec<_>>())?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(DataError::Invalid(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    /// Relative to the dataset directory.
    pub path: String,
    #[serde(default)]
    pub corruption: Option<String>,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl SplitLists {
    pub fn get(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<ManifestEntry> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub size: usize,
    pub scribble: ScribbleConfig,
    pub splits: SplitLists,
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
    pub scribble: ScribbleConfig,
}

impl GenConfig {
    pub fn new(n_train: usize, n_val: usize, n_test: usize, size: usize, seed: u64) -> Self {
        Self {
            n_train,
            n_val,
            n_test,
            size,
            seed,
            scribble: ScribbleConfig::default(),
        }
    }
}

/// A manifest together with every sample, grouped by split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Renders one sample and its scribbles from the `(seed, id)` stream.
pub fn generate_sample(
    seed: u64,
    id: u32,
    size: usize,
    scribble: &ScribbleConfig,
) -> Result<(Sample, bool), DataError> {
    let mut rng = sample_rng(seed, id as u64);
    let (image, mask) = render(&mut rng, size)?;
    let s = generate_scribbles(&mask, scribble, &mut rng);
    Ok((
        Sample {
            id,
            image,
            mask,
            scribble: s.mask,
        },
        s.fg_omitted,
    ))
}

pub fn generate_synthetic_dataset(config: &GenConfig) -> Result<Dataset, DataError> {
    if config.size < MIN_SIZE {
        return Err(DataError::Invalid(format!(
            "image size {} is below the minimum {MIN_SIZE}",
            config.size
        )));
    }
    if !(config.scribble.max_fraction > 0.0 && config.scribble.max_fraction <= 1.0) {
        return Err(DataError::Invalid(format!(
            "scribble fraction {} outside (0, 1]",
            config.scribble.max_fraction
        )));
    }
    let mut splits = SplitLists {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut groups: [Vec<Sample>; 3] = Default::default();
    let mut next = 0u32;
    for (k, (split, count)) in Split::ALL
        .into_iter()
        .zip([config.n_train, config.n_val, config.n_test])
        .enumerate()
    {
        for _ in 0..count {
            let (sample, omitted) = generate_sample(config.seed, next, config.size, &config.scribble)?;
            splits.get_mut(split).push(ManifestEntry {
                id: next,
                path: format!("{}/{:06}.s2tf", split.name(), next),
                corruption: None,
                flags: if omitted {
                    vec!["fg-scribble-omitted".into()]
                } else {
                    Vec::new()
                },
            });
            groups[k].push(sample);
            next += 1;
        }
    }
    let [train, val, test] = groups;
    Ok(Dataset {
        manifest: DatasetManifest {
            seed: config.seed,
            size: config.size,
            scribble: config.scribble,
            splits,
        },
        train,
        val,
        test,
    })
}

/// Summary statistics of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub fg_fraction_mean: f64,
    pub fg_fraction_min: f64,
    pub fg_fraction_max: f64,
    pub labeled_fraction_mean: f64,
    pub labeled_fraction_max: f64,
    pub flagged: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn stats(&self) -> CorpusStats {
        let mut fg = Vec::new();
        let mut lab = Vec::new();
        for s in self.samples() {
            fg.push(s.mask.count(1) as f64 / s.mask.data().len() as f64);
            lab.push(s.scribble.labeled_fraction());
        }
        let n = fg.len().max(1) as f64;
        let flagged = Split::ALL
            .iter()
            .flat_map(|&sp| self.manifest.splits.get(sp))
            .filter(|e| !e.flags.is_empty())
            .count();
        CorpusStats {
            samples: fg.len(),
            fg_fraction_mean: fg.iter().sum::<f64>() / n,
            fg_fraction_min: fg.iter().copied().fold(f64::INFINITY, f64::min),
            fg_fraction_max: fg.iter().copied().fold(0.0, f64::max),
            labeled_fraction_mean: lab.iter().sum::<f64>() / n,
            labeled_fraction_max: lab.iter().copied().fold(0.0, f64::max),
            flagged,
        }
    }

    /// Copy with one split's images corrupted and tagged `kind:severity`.
    pub fn corrupted(&self, split: Split, kind: Corruption, severity: u8, seed: u64) -> Result<Self, DataError> {
        let mut out = self.clone();
        let tag = format!("{kind}:{severity}");
        for s in out.split_mut(split).iter_mut() {
            let mut rng = sample_rng(seed ^ 0xC0_22_07, s.id as u64);
            *s = corrupt(s, kind, severity, &mut rng)?;
        }
        for e in out.manifest.splits.get_mut(split).iter_mut() {
            e.corruption = Some(tag.clone());
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        for split in Split::ALL {
            let sub = dir.join(split.name());
            std::fs::create_dir_all(&sub).map_err(|e| DataError::io(&sub, e))?;
            for (entry, sample) in self.manifest.splits.get(split).iter().zip(self.split(split)) {
                tensor_file::write(&dir.join(&entry.path), &sample.to_entries())?;
            }
        }
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json + "\n").map_err(|e| DataError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut seen = std::collections::HashSet::new();
        let mut groups: [Vec<Sample>; 3] = Default::default();
        for (k, split) in Split::ALL.into_iter().enumerate() {
            for entry in manifest.splits.get(split) {
                if !seen.insert(entry.id) {
                    return Err(DataError::Invalid(format!("sample id {} appears twice", entry.id)));
                }
                let sample = Sample::from_entries(entry.id, tensor_file::read(&dir.join(&entry.path))?)?;
                if sample.size() != (manifest.size, manifest.size) {
                    return Err(DataError::Invalid(format!(
                        "{}: size {:?} differs from manifest size {}",
                        entry.path,
                        sample.size(),
                        manifest.size
                    )));
                }
                groups[k].push(sample);
            }
        }
        let [train, val, test] = groups;
        Ok(Self {
            manifest,
            train,
            val,
            test,
        })
    }
}
