//! Border crop, resize and flips applied identically to image and labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Sample};
use crate::labels::LabelMap;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_max: usize,
    pub out_size: usize,
    pub flip_p: f64,
}

/// The spatial transform drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    /// Pixels removed from top, bottom, left, right.
    pub crop: [usize; 4],
    pub out_size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Transform {
    pub fn draw<R: Rng>(rng: &mut R, crop_max: usize, out_size: usize, flip_p: f64) -> Self {
        let crop = [0; 4].map(|_: usize| rng.gen_range(0..=crop_max));
        let flip_h = rng.gen_bool(flip_p);
        let flip_v = rng.gen_bool(flip_p);
        Self {
            crop,
            out_size,
            flip_h,
            flip_v,
        }
    }
}

/// Source coordinate of output index `o` under half-pixel alignment.
fn source(o: usize, out: usize, len: usize) -> f64 {
    (o as f64 + 0.5) * len as f64 / out as f64 - 0.5
}

fn nearest(o: usize, out: usize, len: usize) -> usize {
    (((o as f64 + 0.5) * len as f64 / out as f64).floor() as usize).min(len - 1)
}

fn flip_index(i: usize, len: usize, flip: bool) -> usize {
    if flip {
        len - 1 - i
    } else {
        i
    }
}

pub fn apply(sample: &Sample, t: &Transform) -> Result<Sample, DataError> {
    let (h, w) = sample.size();
    let [top, bottom, left, right] = t.crop;
    if top + bottom >= h || left + right >= w || t.out_size == 0 {
        return Err(DataError::Invalid(format!(
            "crop {:?} leaves nothing of {h}x{w}",
            t.crop
        )));
    }
    let (ch, cw) = (h - top - bottom, w - left - right);
    let s = t.out_size;
    let img = sample.image.data();
    let mut out = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        let sy = source(y, s, ch).clamp(0.0, (ch - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(ch - 1);
        for x in 0..s {
            let sx = source(x, s, cw).clamp(0.0, (cw - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(cw - 1);
            let oy = flip_index(y, s, t.flip_v);
            let ox = flip_index(x, s, t.flip_h);
            for c in 0..3 {
                let px = |yy: usize, xx: usize| img[(c * h + top + yy) * w + left + xx] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x1))
                    + fy * ((1.0 - fx) * px(y1, x0) + fx * px(y1, x1));
                out[(c * s + oy) * s + ox] = v as f32;
            }
        }
    }
    let labels = |m: &LabelMap| {
        let mut d = vec![0u8; s * s];
        for y in 0..s {
            let sy = top + nearest(y, s, ch);
            for x in 0..s {
                let sx = left + nearest(x, s, cw);
                d[flip_index(y, s, t.flip_v) * s + flip_index(x, s, t.flip_h)] = m.data()[sy * w + sx];
            }
        }
        LabelMap::new(1, s, s, d).expect("dims match")
    };
    Ok(Sample {
        id: sample.id,
        image: Tensor::new(vec![3, s, s], out)?,
        mask: labels(&sample.mask),
        scribble: labels(&sample.scribble),
    })
}

/// Random border crop of up to `crop_max` px per side, resize to `out_size`
/// and independent horizontal/vertical flips with probability `flip_p`.
pub fn augment<R: Rng>(
    sample: &Sample,
    rng: &mut R,
    crop_max: usize,
    out_size: usize,
    flip_p: f64,
) -> Result<Sample, DataError> {
    let (h, w) = sample.size();
    if 4 * crop_max >= h.min(w) {
        return Err(DataError::Invalid(format!(
            "crop_max {crop_max} must be below a quarter of {}",
            h.min(w)
        )));
    }
    if !(0.0..=1.0).contains(&flip_p) {
        return Err(DataError::Invalid(format!("flip probability {flip_p} outside [0, 1]")));
    }
    apply(sample, &Transform::draw(rng, crop_max, out_size, flip_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = Tensor::from_fn(&[3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let mask = LabelMap::new(1, 8, 8, (0..64).map(|i| (i % 5 == 0) as u8).collect()).unwrap();
        let scribble = LabelMap::new(
            1,
            8,
            8,
            (0..64)
                .map(|i| if i % 7 == 0 { (i % 5 == 0) as u8 } else { 2 })
                .collect(),
        )
        .unwrap();
        Sample {
            id: 0,
            image,
            mask,
            scribble,
        }
    }

    #[test]
    fn identity_when_nothing_to_do() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&s, &mut rng, 0, 8, 0.0).unwrap(), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let t = Transform {
            crop: [0; 4],
            out_size: 8,
            flip_h: true,
            flip_v: true,
        };
        assert_eq!(apply(&apply(&s, &t).unwrap(), &t).unwrap(), s);
    }

    #[test]
    fn rejects_large_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(&sample(), &mut rng, 2, 8, 0.5).is_err());
    }
}
