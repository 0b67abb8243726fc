//! Image-only corruptions for robustness evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Sample};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    Blur,
    Specular,
    BrightnessShift,
}

impl std::str::FromStr for Corruption {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blur" => Ok(Self::Blur),
            "specular" => Ok(Self::Specular),
            "brightness-shift" => Ok(Self::BrightnessShift),
            other => Err(DataError::Invalid(format!(
                "unknown corruption `{other}` (blur|specular|brightness-shift)"
            ))),
        }
    }
}

impl std::fmt::Display for Corruption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Blur => "blur",
            Self::Specular => "specular",
            Self::BrightnessShift => "brightness-shift",
        })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped borders, per channel.
fn blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let d = img.data();
    let mut tmp = vec![0.0f64; d.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                tmp[(ch * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| {
                        let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                        kv * d[(ch * h + y) * w + xx] as f64
                    })
                    .sum();
            }
        }
    }
    Tensor::from_fn(img.shape(), |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        k.iter()
            .enumerate()
            .map(|(j, &kv)| {
                let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                kv * tmp[(ch * h + yy) * w + x]
            })
            .sum::<f64>() as f32
    })
}

pub fn corrupt<R: Rng>(sample: &Sample, kind: Corruption, severity: u8, rng: &mut R) -> Result<Sample, DataError> {
    if !(1..=3).contains(&severity) {
        return Err(DataError::Invalid(format!("severity {severity} outside 1..=3")));
    }
    let sev = severity as f64;
    let (h, w) = sample.size();
    let image = match kind {
        Corruption::Blur => blur(&sample.image, 0.75 * sev),
        Corruption::Specular => {
            let mut d = sample.image.data().to_vec();
            for _ in 0..severity {
                let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
                let ry = rng.gen_range(0.03..0.08) * h as f64 * (0.5 + 0.5 * sev);
                let rx = rng.gen_range(0.03..0.08) * w as f64 * (0.5 + 0.5 * sev);
                for y in 0..h {
                    for x in 0..w {
                        let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                        let g = (-(dy * dy + dx * dx)).exp();
                        for c in 0..3 {
                            let v = &mut d[(c * h + y) * w + x];
                            *v = (*v as f64 + 1.5 * g).min(1.0) as f32;
                        }
                    }
                }
            }
            Tensor::new(sample.image.shape().to_vec(), d)?
        }
        Corruption::BrightnessShift => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let scale = 1.0 + sign * 0.15 * sev;
            let shift = sign * 0.05 * sev;
            sample.image.map(|v| (v as f64 * scale + shift).clamp(0.0, 1.0) as f32)
        }
    };
    Ok(Sample {
        image,
        ..sample.clone()
    })
}

/// Peak signal-to-noise ratio (dB) for images in [0, 1].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_normalized() {
        for s in [0.75, 1.5, 2.25] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Tensor::full(&[3, 6, 6], 0.4f32);
        assert!(blur(&img, 1.5).max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("fog".parse::<Corruption>().is_err());
        assert_eq!(
            "brightness-shift".parse::<Corruption>().unwrap(),
            Corruption::BrightnessShift
        );
    }
}
