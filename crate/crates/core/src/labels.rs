//! Integer label maps: dense masks, pseudo labels and scribbles.

use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};

pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 1;
/// Sentinel for pixels without a scribble annotation.
pub const UNLABELED: u8 = 2;

/// N×H×W map of small integer labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

/// Argmax class per pixel; values in {0, 1}.
pub type PseudoLabel = LabelMap;
/// Scribble annotation; values in {0, 1, 2} with 2 = unlabeled.
pub type ScribbleMask = LabelMap;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LabelError {
    #[error("label map of {n}x{h}x{w} needs {} values, got {len}", n * h * w)]
    Length { n: usize, h: usize, w: usize, len: usize },
    #[error("label value {value} at index {index} exceeds {max}")]
    Value { value: u8, index: usize, max: u8 },
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self, LabelError> {
        if data.len() != n * h * w {
            return Err(LabelError::Length {
                n,
                h,
                w,
                len: data.len(),
            });
        }
        Ok(Self { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> u8 {
        self.data[(b * self.h + i) * self.w + j]
    }

    pub fn set(&mut self, b: usize, i: usize, j: usize, v: u8) {
        self.data[(b * self.h + i) * self.w + j] = v;
    }

    /// Fails on the first value above `max`.
    pub fn validate(&self, max: u8) -> Result<(), LabelError> {
        match self.data.iter().position(|&v| v > max) {
            Some(index) => Err(LabelError::Value {
                value: self.data[index],
                index,
                max,
            }),
            None => Ok(()),
        }
    }

    pub fn slice_batch(&self, b: usize) -> Self {
        let per = self.h * self.w;
        Self {
            n: 1,
            h: self.h,
            w: self.w,
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    pub fn stack(items: &[Self]) -> Result<Self, LabelError> {
        let first = &items[0];
        let mut data = Vec::with_capacity(first.data.len() * items.len());
        for it in items {
            if (it.h, it.w) != (first.h, first.w) {
                return Err(LabelError::Length {
                    n: it.n,
                    h: first.h,
                    w: first.w,
                    len: it.data.len(),
                });
            }
            data.extend_from_slice(&it.data);
        }
        Ok(Self {
            n: items.iter().map(|i| i.n).sum(),
            h: first.h,
            w: first.w,
            data,
        })
    }

    /// Fraction of pixels carrying a label other than [`UNLABELED`].
    pub fn labeled_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v != UNLABELED).count() as f64 / self.data.len() as f64
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }

    /// 1×H×W tensor of the label values, for serialization.
    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        Tensor::new(
            vec![self.n, self.h, self.w],
            self.data.iter().map(|&v| S::lit(v as f64)).collect(),
        )
        .expect("dims match")
    }

    pub fn from_tensor<S: Real>(t: &Tensor<S>) -> Result<Self, LabelError> {
        let (n, h, w) = match t.shape() {
            [n, h, w] => (*n, *h, *w),
            [h, w] => (1, *h, *w),
            _ => {
                return Err(LabelError::Length {
                    n: 0,
                    h: 0,
                    w: 0,
                    len: t.len(),
                })
            }
        };
        let mut data = Vec::with_capacity(t.len());
        for (index, &v) in t.data().iter().enumerate() {
            let f = v.as_f64();
            if !(0.0..=255.0).contains(&f) || f.fract() != 0.0 {
                return Err(LabelError::Value {
                    value: u8::MAX,
                    index,
                    max: u8::MAX,
                });
            }
            data.push(f as u8);
        }
        Self::new(n, h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_reports_first_bad_value() {
        let m = LabelMap::new(1, 1, 4, vec![0, 2, 3, 1]).unwrap();
        assert_eq!(
            m.validate(2),
            Err(LabelError::Value {
                value: 3,
                index: 2,
                max: 2
            })
        );
        assert!(m.validate(3).is_ok());
    }

    #[test]
    fn tensor_roundtrip() {
        let m = LabelMap::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap();
        assert_eq!(LabelMap::from_tensor(&m.to_tensor::<f32>()).unwrap(), m);
        assert_eq!(m.labeled_fraction(), 0.75);
    }
}
