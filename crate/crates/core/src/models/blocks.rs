//! Convolution, normalization and Fourier-convolution building blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::store::{ParamStore, BN_MOMENTUM, NORM_EPS};
use super::{Mode, ModelError, NormKind};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Everything a block needs while recording a forward pass.
pub struct Ctx<'a, S: Real> {
    pub tape: &'a mut Tape<S>,
    pub params: &'a [Var],
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    pub norm: NormKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    weight: usize,
    bias: Option<usize>,
    pad: usize,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let weight = store.add_kernel(format!("{name}.weight"), cout, cin, k, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            pad: k / 2,
        })
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, params: &[Var], x: Var) -> Result<Var, ModelError> {
        let bias = self.bias.map(|b| params[b]);
        Ok(tape.conv2d(x, params[self.weight], bias, self.pad, 1)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self, ModelError> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            stats: store.add_running(format!("{name}.running"), channels)?,
        })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var, ModelError> {
        let (g, b) = (ctx.params[self.gamma], ctx.params[self.beta]);
        match (ctx.norm, ctx.mode) {
            (NormKind::Instance, _) => Ok(ctx.tape.instance_norm(x, g, b, NORM_EPS)?),
            (NormKind::Batch, Mode::Train) => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, NORM_EPS)?;
                let run = &mut ctx.store.running[self.stats];
                let unbias = if stats.count > 1 {
                    stats.count as f64 / (stats.count - 1) as f64
                } else {
                    1.0
                };
                for (c, (m, v)) in stats.mean.iter().zip(&stats.var).enumerate() {
                    let rm = &mut run.mean.data_mut()[c];
                    *rm = ((1.0 - BN_MOMENTUM) * *rm as f64 + BN_MOMENTUM * m) as f32;
                    let rv = &mut run.var.data_mut()[c];
                    *rv = ((1.0 - BN_MOMENTUM) * *rv as f64 + BN_MOMENTUM * v * unbias) as f32;
                }
                Ok(y)
            }
            (NormKind::Batch, Mode::Eval) => {
                let run = &ctx.store.running[self.stats];
                let mean: Vec<f64> = run.mean.data().iter().map(|&v| v as f64).collect();
                let var: Vec<f64> = run.var.data().iter().map(|&v| v as f64).collect();
                Ok(ctx.tape.batch_norm_eval(x, g, b, &mean, &var, NORM_EPS)?)
            }
        }
    }
}

/// conv3×3 → norm → ReLU, twice.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
}

impl ConvBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            c1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, false, rng)?,
            n1: Norm::new(store, &format!("{name}.norm1"), cout)?,
            c2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, false, rng)?,
            n2: Norm::new(store, &format!("{name}.norm2"), cout)?,
        })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var, ModelError> {
        let y = self.c1.forward(ctx.tape, ctx.params, x)?;
        let y = self.n1.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        let y = self.c2.forward(ctx.tape, ctx.params, y)?;
        let y = self.n2.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfcBlockConfig {
    pub channels: usize,
    /// Fraction of channels routed through the local (spatial) path.
    pub local_ratio: f64,
}

impl FfcBlockConfig {
    /// `(local, global)` channel counts; both must be nonzero.
    pub fn split(&self) -> Result<(usize, usize), ModelError> {
        if !(self.local_ratio > 0.0 && self.local_ratio < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "local_ratio {} outside (0, 1)",
                self.local_ratio
            )));
        }
        let local = (self.channels as f64 * self.local_ratio).round() as usize;
        let global = self.channels.saturating_sub(local);
        if local == 0 || global == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{} channels cannot be split with local_ratio {}",
                self.channels, self.local_ratio
            )));
        }
        Ok((local, global))
    }
}

/// Fast Fourier convolution with a local 3×3 path and a global spectral
/// path. The spectral unit applies a 1×1 convolution to the interleaved
/// real/imaginary channels of the half spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct FfcBlock {
    pub config: FfcBlockConfig,
    local: usize,
    global: usize,
    l2l: Conv,
    g2l: Conv,
    l2g: Conv,
    spectral: Conv,
    norm: Norm,
}

impl FfcBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: FfcBlockConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let (local, global) = config.split()?;
        Ok(Self {
            config,
            local,
            global,
            l2l: Conv::new(store, &format!("{name}.l2l"), local, local, 3, false, rng)?,
            g2l: Conv::new(store, &format!("{name}.g2l"), global, local, 3, false, rng)?,
            l2g: Conv::new(store, &format!("{name}.l2g"), local, global, 3, false, rng)?,
            spectral: Conv::new(
                store,
                &format!("{name}.spectral"),
                2 * global,
                2 * global,
                1,
                false,
                rng,
            )?,
            norm: Norm::new(store, &format!("{name}.norm"), config.channels)?,
        })
    }

    pub fn split(&self) -> (usize, usize) {
        (self.local, self.global)
    }

    /// Channels `start..start+len` of `x`, as a 1×1 selection convolution.
    fn channel_slice<S: Real>(tape: &mut Tape<S>, x: Var, start: usize, len: usize) -> Result<Var, ModelError> {
        let c = tape.shape(x)[1];
        let mut sel = vec![S::zero(); len * c];
        for i in 0..len {
            sel[i * c + start + i] = S::one();
        }
        let sel = tape.leaf(Tensor::new(vec![len, c, 1, 1], sel)?);
        Ok(tape.conv2d(x, sel, None, 0, 1)?)
    }

    /// Output before normalization and activation; linear in `x`.
    pub fn forward_linear<S: Real>(&self, tape: &mut Tape<S>, params: &[Var], x: Var) -> Result<Var, ModelError> {
        let (_, c, h, w) = tape.value(x).dims4("ffc")?;
        if c != self.config.channels {
            return Err(ModelError::InvalidConfig(format!(
                "FFC block expects {} channels, got {c}",
                self.config.channels
            )));
        }
        if h < 4 || w < 4 {
            return Err(ModelError::InvalidConfig(format!(
                "FFC block needs spatial extent >= 4, got {h}x{w}"
            )));
        }
        let xl = Self::channel_slice(tape, x, 0, self.local)?;
        let xg = Self::channel_slice(tape, x, self.local, self.global)?;
        let ll = self.l2l.forward(tape, params, xl)?;
        let gl = self.g2l.forward(tape, params, xg)?;
        let yl = tape.add(ll, gl)?;
        let lg = self.l2g.forward(tape, params, xl)?;
        let spec = tape.rfft2(xg)?;
        let spec = self.spectral.forward(tape, params, spec)?;
        let gg = tape.irfft2(spec, w)?;
        let yg = tape.add(lg, gg)?;
        Ok(tape.concat(&[yl, yg])?)
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var, ModelError> {
        let y = self.forward_linear(ctx.tape, ctx.params, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_sum_to_channels() {
        for c in 2..20 {
            for r in [0.25, 0.5, 0.75] {
                if let Ok((l, g)) = (FfcBlockConfig {
                    channels: c,
                    local_ratio: r,
                })
                .split()
                {
                    assert_eq!(l + g, c);
                }
            }
        }
        assert!(FfcBlockConfig {
            channels: 1,
            local_ratio: 0.5
        }
        .split()
        .is_err());
        assert!(FfcBlockConfig {
            channels: 8,
            local_ratio: 1.0
        }
        .split()
        .is_err());
    }
}
