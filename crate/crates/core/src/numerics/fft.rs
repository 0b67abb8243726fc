//! Real-input 2-D Fourier transforms over the last two axes.
//!
//! Forward is unnormalized, inverse carries the 1/(H·W) factor. The half
//! spectrum keeps columns `0..=W/2`.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use super::{NumericsError, Real, Result, Tensor};

/// Half spectrum of a real N×C×H×W signal, stored as two N×C×H×(W/2+1)
/// tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<S = f32> {
    pub real: Tensor<S>,
    pub imag: Tensor<S>,
}

impl<S: Real> ComplexSpectrum<S> {
    pub fn new(real: Tensor<S>, imag: Tensor<S>) -> Result<Self> {
        if real.shape() != imag.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "complex_spectrum",
                left: real.shape().to_vec(),
                right: imag.shape().to_vec(),
            });
        }
        real.dims4("complex_spectrum")?;
        Ok(Self { real, imag })
    }

    /// Energy of the full (Hermitian-completed) spectrum for a signal of
    /// width `width`.
    pub fn energy(&self, width: usize) -> f64 {
        let wf = self.real.shape()[3];
        self.real
            .data()
            .iter()
            .zip(self.imag.data())
            .enumerate()
            .map(|(i, (re, im))| {
                let l = i % wf;
                column_weight(l, width) * (re.as_f64().powi(2) + im.as_f64().powi(2))
            })
            .sum()
    }

    /// Packs into N×2C×H×Wf with channel `2c` the real part and `2c+1` the
    /// imaginary part of source channel `c`.
    pub fn to_interleaved(&self) -> Tensor<S> {
        let (n, c, h, wf) = self.real.dims4("spectrum").expect("validated rank");
        let plane = h * wf;
        let mut out = Vec::with_capacity(2 * self.real.len());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                out.extend_from_slice(&self.real.data()[off..off + plane]);
                out.extend_from_slice(&self.imag.data()[off..off + plane]);
            }
        }
        Tensor::new(vec![n, 2 * c, h, wf], out).expect("shape preserved")
    }

    pub fn from_interleaved(packed: &Tensor<S>) -> Result<Self> {
        let (n, c2, h, wf) = packed.dims4("spectrum")?;
        if c2 % 2 != 0 {
            return Err(NumericsError::InvalidShape {
                op: "spectrum",
                shape: packed.shape().to_vec(),
                reason: "interleaved spectrum needs an even channel count".into(),
            });
        }
        let c = c2 / 2;
        let plane = h * wf;
        let mut re = Vec::with_capacity(packed.len() / 2);
        let mut im = Vec::with_capacity(packed.len() / 2);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c2 + 2 * ch) * plane;
                re.extend_from_slice(&packed.data()[off..off + plane]);
                im.extend_from_slice(&packed.data()[off + plane..off + 2 * plane]);
            }
        }
        Self::new(Tensor::new(vec![n, c, h, wf], re)?, Tensor::new(vec![n, c, h, wf], im)?)
    }
}

pub fn rfft2<S: Real>(input: &Tensor<S>) -> Result<ComplexSpectrum<S>> {
    let (n, c, h, w) = input.dims4("rfft2")?;
    check_extent("rfft2", input.shape(), h, w)?;
    let packed = rfft2_interleaved(input.data(), n, c, h, w);
    ComplexSpectrum::from_interleaved(&Tensor::new(vec![n, 2 * c, h, w / 2 + 1], packed)?)
}

pub fn irfft2<S: Real>(spectrum: &ComplexSpectrum<S>, out_width: usize) -> Result<Tensor<S>> {
    let (n, c, h, wf) = spectrum.real.dims4("irfft2")?;
    if out_width / 2 + 1 != wf {
        return Err(NumericsError::InvalidShape {
            op: "irfft2",
            shape: spectrum.real.shape().to_vec(),
            reason: format!("half-spectrum width {wf} incompatible with output width {out_width}"),
        });
    }
    check_extent("irfft2", spectrum.real.shape(), h, out_width)?;
    let packed = spectrum.to_interleaved();
    let out = irfft2_interleaved(packed.data(), n, c, h, out_width);
    Tensor::new(vec![n, c, h, out_width], out)
}

pub(crate) fn check_extent(op: &'static str, shape: &[usize], h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(NumericsError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "spatial extents must be at least 2".into(),
        });
    }
    Ok(())
}

/// Multiplicity of half-spectrum column `l` in the full spectrum.
pub(crate) fn column_weight(l: usize, width: usize) -> f64 {
    if l == 0 || (width % 2 == 0 && l == width / 2) {
        1.0
    } else {
        2.0
    }
}

struct Plans<S: Real> {
    row_fwd: Arc<dyn Fft<S>>,
    col_fwd: Arc<dyn Fft<S>>,
    row_inv: Arc<dyn Fft<S>>,
    col_inv: Arc<dyn Fft<S>>,
}

impl<S: Real> Plans<S> {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            row_fwd: planner.plan_fft_forward(w),
            col_fwd: planner.plan_fft_forward(h),
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    /// In-place unnormalized 2-D transform of an H×W complex plane.
    fn transform(&self, buf: &mut [Complex<S>], h: usize, w: usize, inverse: bool) {
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        let mut column = vec![Complex::new(S::zero(), S::zero()); h];
        for l in 0..w {
            for k in 0..h {
                column[k] = buf[k * w + l];
            }
            cols.process(&mut column);
            for k in 0..h {
                buf[k * w + l] = column[k];
            }
        }
    }
}

/// Forward transform of every N×C plane, output packed N×2C×H×Wf.
pub(crate) fn rfft2_interleaved<S: Real>(x: &[S], n: usize, c: usize, h: usize, w: usize) -> Vec<S> {
    let wf = w / 2 + 1;
    let plans = Plans::<S>::new(h, w);
    let mut out = vec![S::zero(); n * c * 2 * h * wf];
    let mut buf = vec![Complex::new(S::zero(), S::zero()); h * w];
    for (p, plane) in x.chunks(h * w).enumerate() {
        for (b, &v) in buf.iter_mut().zip(plane) {
            *b = Complex::new(v, S::zero());
        }
        plans.transform(&mut buf, h, w, false);
        let base = p * 2 * h * wf;
        for k in 0..h {
            for l in 0..wf {
                let z = buf[k * w + l];
                out[base + k * wf + l] = z.re;
                out[base + h * wf + k * wf + l] = z.im;
            }
        }
    }
    out
}

/// Inverse of [`rfft2_interleaved`] (with 1/(H·W) normalization).
pub(crate) fn irfft2_interleaved<S: Real>(spec: &[S], n: usize, c: usize, h: usize, w: usize) -> Vec<S> {
    let scale = 1.0 / (h * w) as f64;
    half_to_real(spec, n * c, h, w, |l| column_weight(l, w) * scale)
}

/// Adjoint of the forward transform: `Re(Σ G[k,l] e^{+iθ})` over the half
/// spectrum, no normalization.
pub(crate) fn rfft2_adjoint<S: Real>(grad: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    half_to_real(grad, planes, h, w, |_| 1.0)
}

/// Adjoint of the inverse transform, packed like the spectrum.
pub(crate) fn irfft2_adjoint<S: Real>(grad: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let wf = w / 2 + 1;
    let mut out = rfft2_interleaved(grad, planes, 1, h, w);
    let scale = 1.0 / (h * w) as f64;
    for chunk in out.chunks_mut(h * wf) {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = *v * S::lit(column_weight(i % wf, w) * scale);
        }
    }
    out
}

fn half_to_real<S: Real>(spec: &[S], planes: usize, h: usize, w: usize, weight: impl Fn(usize) -> f64) -> Vec<S> {
    let wf = w / 2 + 1;
    let plans = Plans::<S>::new(h, w);
    let mut out = vec![S::zero(); planes * h * w];
    let mut buf = vec![Complex::new(S::zero(), S::zero()); h * w];
    let weights: Vec<S> = (0..wf).map(|l| S::lit(weight(l))).collect();
    for p in 0..planes {
        let base = p * 2 * h * wf;
        buf.iter_mut().for_each(|z| *z = Complex::new(S::zero(), S::zero()));
        for k in 0..h {
            for l in 0..wf {
                let re = spec[base + k * wf + l];
                let im = spec[base + h * wf + k * wf + l];
                buf[k * w + l] = Complex::new(re * weights[l], im * weights[l]);
            }
        }
        plans.transform(&mut buf, h, w, true);
        for (o, z) in out[p * h * w..(p + 1) * h * w].iter_mut().zip(&buf) {
            *o = z.re;
        }
    }
    out
}
