//! Toy-scale segmentation branches mapping N×3×H×W images to N×2×H×W logits.
//!
//! The spatial branch is a UNet; the spectral branch is a dual-encoder YNet
//! whose second encoder is built from Fourier-convolution blocks. Both keep
//! their parameters in a [`ParamStore`] and record forward passes on a
//! caller-provided tape, so the same model can be evaluated in 32-bit for
//! training and 64-bit for gradient checks.

mod blocks;
mod store;

pub use blocks::{Conv, ConvBlock, Ctx, FfcBlock, FfcBlockConfig, Norm};
pub use store::{ParamStore, RunningStats};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 2;
pub const IN_CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("input {dim} {size} is not divisible by {factor} (2^depth)")]
    Indivisible {
        dim: &'static str,
        size: usize,
        factor: usize,
    },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("expected {expected} bound parameters, got {got}")]
    Binding { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unet,
    Ynet,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unet" => Ok(Self::Unet),
            "ynet" => Ok(Self::Ynet),
            other => Err(format!("unknown model kind `{other}` (unet|ynet)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Unet => "unet",
            Self::Ynet => "ynet",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub base_width: usize,
    pub depth: usize,
    pub local_ratio: f64,
    pub norm: NormKind,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, base_width: usize, depth: usize) -> Self {
        Self {
            kind,
            base_width,
            depth,
            local_ratio: 0.5,
            norm: NormKind::Batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SpectralStage {
    stem: ConvBlockHalf,
    ffc: FfcBlock,
}

/// Single conv → norm → ReLU used as the FFC stage stem.
#[derive(Clone, Debug, PartialEq)]
struct ConvBlockHalf {
    conv: Conv,
    norm: Norm,
}

impl ConvBlockHalf {
    fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var, ModelError> {
        let y = self.conv.forward(ctx.tape, ctx.params, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoder: Vec<ConvBlock>,
    spectral: Vec<SpectralStage>,
    bottleneck: ConvBlock,
    /// Ordered from the deepest stage to the shallowest.
    decoder: Vec<ConvBlock>,
    head: Conv,
}

/// One segmentation branch: architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

pub fn build_unet(base_width: usize, depth: usize, seed: u64) -> Result<BranchModel, ModelError> {
    BranchModel::build(ModelConfig::new(ModelKind::Unet, base_width, depth), seed)
}

pub fn build_ynet(base_width: usize, depth: usize, seed: u64) -> Result<BranchModel, ModelError> {
    BranchModel::build(ModelConfig::new(ModelKind::Ynet, base_width, depth), seed)
}

impl BranchModel {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        if config.depth < 2 {
            return Err(ModelError::InvalidConfig(format!("depth {} < 2", config.depth)));
        }
        if config.base_width < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "base_width {} < 2",
                config.base_width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths: Vec<usize> = (0..config.depth).map(|i| config.base_width << i).collect();
        let dual = config.kind == ModelKind::Ynet;

        let mut encoder = Vec::new();
        let mut cin = IN_CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(ConvBlock::new(&mut store, &format!("enc{i}"), cin, w, &mut rng)?);
            cin = w;
        }
        let mut spectral = Vec::new();
        if dual {
            let mut cin = IN_CHANNELS;
            for (i, &w) in widths.iter().enumerate() {
                let name = format!("spec{i}");
                let stem = ConvBlockHalf {
                    conv: Conv::new(&mut store, &format!("{name}.stem"), cin, w, 3, false, &mut rng)?,
                    norm: Norm::new(&mut store, &format!("{name}.stem_norm"), w)?,
                };
                let cfg = FfcBlockConfig {
                    channels: w,
                    local_ratio: config.local_ratio,
                };
                let ffc = FfcBlock::new(&mut store, &format!("{name}.ffc"), cfg, &mut rng)?;
                spectral.push(SpectralStage { stem, ffc });
                cin = w;
            }
        }
        let skip_factor = if dual { 2 } else { 1 };
        let deepest = *widths.last().expect("depth >= 2");
        let bottleneck_width = deepest * 2;
        let bottleneck = ConvBlock::new(
            &mut store,
            "bottleneck",
            deepest * skip_factor,
            bottleneck_width,
            &mut rng,
        )?;
        let mut decoder = Vec::new();
        let mut below = bottleneck_width;
        for (i, &w) in widths.iter().enumerate().rev() {
            decoder.push(ConvBlock::new(
                &mut store,
                &format!("dec{i}"),
                below + w * skip_factor,
                w,
                &mut rng,
            )?);
            below = w;
        }
        let head = Conv::new(&mut store, "head", widths[0], NUM_CLASSES, 1, true, &mut rng)?;
        Ok(Self {
            config,
            store,
            layout: Layout {
                encoder,
                spectral,
                bottleneck,
                decoder,
                head,
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 4 || shape[1] != IN_CHANNELS {
            return Err(ModelError::Numerics(NumericsError::InvalidShape {
                op: "model input",
                shape: shape.to_vec(),
                reason: format!("expected N×{IN_CHANNELS}×H×W"),
            }));
        }
        let factor = 1usize << self.config.depth;
        for (dim, size) in [("height", shape[2]), ("width", shape[3])] {
            if size % factor != 0 || size / factor < 1 {
                return Err(ModelError::Indivisible { dim, size, factor });
            }
        }
        Ok(())
    }

    /// Records a forward pass and returns the logits node. `params` are the
    /// leaves from [`ParamStore::bind`] (or any same-shaped substitutes).
    pub fn forward<S: Real>(
        &mut self,
        tape: &mut Tape<S>,
        params: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        if params.len() != self.store.params.len() {
            return Err(ModelError::Binding {
                expected: self.store.params.len(),
                got: params.len(),
            });
        }
        self.check_input(tape.shape(x))?;
        let layout = &self.layout;
        let mut ctx = Ctx {
            tape,
            params,
            store: &mut self.store,
            mode,
            norm: self.config.norm,
        };
        let mut skips = Vec::with_capacity(layout.encoder.len());
        let mut a = x;
        let mut b = x;
        for (i, block) in layout.encoder.iter().enumerate() {
            let fa = block.forward(&mut ctx, a)?;
            let skip = match layout.spectral.get(i) {
                Some(stage) => {
                    let stem = stage.stem.forward(&mut ctx, b)?;
                    let fb = stage.ffc.forward(&mut ctx, stem)?;
                    b = ctx.tape.max_pool2(fb)?;
                    ctx.tape.concat(&[fa, fb])?
                }
                None => fa,
            };
            skips.push(skip);
            a = ctx.tape.max_pool2(fa)?;
        }
        let deep = if layout.spectral.is_empty() {
            a
        } else {
            ctx.tape.concat(&[a, b])?
        };
        let mut y = layout.bottleneck.forward(&mut ctx, deep)?;
        for (block, skip) in layout.decoder.iter().zip(skips.iter().rev()) {
            let up = ctx.tape.upsample2(y)?;
            let cat = ctx.tape.concat(&[up, *skip])?;
            y = block.forward(&mut ctx, cat)?;
        }
        layout.head.forward(ctx.tape, ctx.params, y)
    }

    /// Eval-mode softmax probabilities for a batch of images.
    pub fn predict(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let mut tape = Tape::<f32>::new();
        let params = self.store.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let logits = self.forward(&mut tape, &params, x, Mode::Eval)?;
        let probs = tape.softmax_channels(logits)?;
        Ok(tape.value(probs).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shallow_depth() {
        assert!(build_unet(8, 1, 0).is_err());
    }

    #[test]
    fn parameter_names_unique() {
        let m = build_ynet(4, 2, 0).unwrap();
        let mut names: Vec<_> = m.store.params.iter().map(|p| &p.name).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }

    #[test]
    fn indivisible_input_names_dimension() {
        let mut m = build_unet(4, 3, 0).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = m.store.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[1, 3, 32, 20]));
        let err = m.forward(&mut tape, &p, x, Mode::Eval).unwrap_err();
        assert_eq!(
            err,
            ModelError::Indivisible {
                dim: "width",
                size: 20,
                factor: 8
            }
        );
    }
}
