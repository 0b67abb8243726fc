//! Procedural polyp-like images: one or two smooth star-shaped blobs with
//! their own colour and texture over a textured background.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DataError;
use crate::labels::LabelMap;
use crate::numerics::Tensor;

pub const MIN_SIZE: usize = 32;
pub const MIN_FG_FRACTION: f64 = 0.02;
pub const MAX_FG_FRACTION: f64 = 0.40;

struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn random<R: Rng>(rng: &mut R, size: f64) -> Self {
        let harmonics = (2..=4)
            .map(|k| {
                (
                    k as f64,
                    rng.gen_range(0.0..0.25) / (k as f64 - 1.0),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Self {
            cx: rng.gen_range(0.2..0.8) * size,
            cy: rng.gen_range(0.2..0.8) * size,
            r0: rng.gen_range(0.08..0.22) * size,
            harmonics,
        }
    }

    fn radius(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .map(|&(k, a, phi)| a * (k * theta + phi).cos())
            .sum();
        self.r0 * (1.0 + wobble)
    }

    /// Signed distance proxy: positive inside, in pixels along the ray.
    fn inside(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        self.radius(dy.atan2(dx)) - (dx * dx + dy * dy).sqrt()
    }
}

struct Waves(Vec<(f64, f64, f64, f64)>);

impl Waves {
    fn random<R: Rng>(rng: &mut R, count: usize, freq: (f64, f64), amp: f64) -> Self {
        Self(
            (0..count)
                .map(|_| {
                    let f = rng.gen_range(freq.0..freq.1);
                    let angle = rng.gen_range(0.0..PI);
                    (
                        f * angle.cos(),
                        f * angle.sin(),
                        rng.gen_range(0.0..2.0 * PI),
                        amp * rng.gen_range(0.5..1.0),
                    )
                })
                .collect(),
        )
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.0
            .iter()
            .map(|&(fx, fy, phi, a)| a * (2.0 * PI * (fx * u + fy * v) + phi).sin())
            .sum()
    }
}

/// Renders one 3×S×S image in [0, 1] and its 1×S×S mask.
pub fn render<R: Rng>(rng: &mut R, size: usize) -> Result<(Tensor<f32>, LabelMap), DataError> {
    if size < MIN_SIZE {
        return Err(DataError::Invalid(format!(
            "image size {size} is below the minimum {MIN_SIZE}"
        )));
    }
    let s = size as f64;
    let blobs = loop_blobs(rng, size)?;
    let base: [f64; 3] = [
        0.55 + rng.gen_range(-0.08..0.08),
        0.32 + rng.gen_range(-0.06..0.06),
        0.28 + rng.gen_range(-0.06..0.06),
    ];
    let shift: [f64; 3] = [
        rng.gen_range(0.06..0.20),
        rng.gen_range(-0.04..0.10),
        rng.gen_range(-0.06..0.04),
    ];
    let bg_tex = Waves::random(rng, 4, (1.0, 6.0), 0.06);
    let fg_tex = Waves::random(rng, 3, (6.0, 14.0), 0.05);
    let shade = rng.gen_range(0.05..0.15);
    let noise = Normal::new(0.0, 0.03).expect("positive std");

    let mut image = vec![0.0f32; 3 * size * size];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = (px / s, py / s);
            let (mut depth, mut rel) = (f64::MIN, 0.0);
            for b in &blobs {
                let d = b.inside(px, py);
                if d > depth {
                    depth = d;
                    rel = (d / b.r0).clamp(0.0, 1.0);
                }
            }
            let alpha = (depth / 1.5 + 0.5).clamp(0.0, 1.0);
            let i = y * size + x;
            mask[i] = (depth >= 0.0) as u8;
            let bg = bg_tex.at(u, v);
            let fg = fg_tex.at(u, v) + shade * rel;
            for c in 0..3 {
                let back = base[c] + bg;
                let front = base[c] + shift[c] + 0.5 * bg + fg;
                let value = (1.0 - alpha) * back + alpha * front + noise.sample(rng);
                image[c * size * size + i] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((
        Tensor::new(vec![3, size, size], image)?,
        LabelMap::new(1, size, size, mask).expect("dims match"),
    ))
}

/// Draws blob sets until the rasterized foreground fraction is in range.
fn loop_blobs<R: Rng>(rng: &mut R, size: usize) -> Result<Vec<Blob>, DataError> {
    let s = size as f64;
    for _ in 0..1000 {
        let count = rng.gen_range(1..=2);
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(rng, s)).collect();
        let mut fg = 0usize;
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if blobs.iter().any(|b| b.inside(px, py) >= 0.0) {
                    fg += 1;
                }
            }
        }
        let frac = fg as f64 / (s * s);
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) {
            return Ok(blobs);
        }
    }
    Err(DataError::Invalid(
        "could not place blobs within the foreground range".into(),
    ))
}
