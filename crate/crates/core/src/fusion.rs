//! Entropy maps, pseudo-label mixing strategies and argmax pseudo labels.
//!
//! All functions act on plain tensors: pseudo labels and mixing weights are
//! detached targets and never carry gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::labels::LabelMap;
use crate::numerics::{NumericsError, Real, Tensor};

/// Clamp applied inside `p·ln p` so one-hot pixels give exactly zero.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FusionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("pixel {pixel}: channel sum {sum} is not a probability distribution")]
    NotProbability { pixel: usize, sum: f64 },
    #[error("expected {expected} mixing ratios, got {got}")]
    AlphaCount { expected: usize, got: usize },
}

/// Per-pixel Shannon entropy (nats), N×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap<S = f32> {
    pub values: Tensor<S>,
}

/// Pseudo-label mixing rule used to form the ensemble target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    /// Pixel-wise weights from the two entropy maps.
    Entropy,
    /// Fixed 0.5/0.5 image-level mixing.
    Equal,
    /// Image-level mixing with a uniform random ratio per batch item.
    Random,
}

impl std::str::FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entropy" => Ok(Self::Entropy),
            "equal" => Ok(Self::Equal),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown fusion strategy `{other}` (entropy|equal|random)")),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Entropy => "entropy",
            Self::Equal => "equal",
            Self::Random => "random",
        })
    }
}

fn same_shape<S: Real>(a: &Tensor<S>, b: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize), FusionError> {
    let (n, c, h, w) = a.dims4(op)?;
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }
        .into());
    }
    Ok((n, c, h * w))
}

pub fn entropy_map<S: Real>(p: &Tensor<S>) -> Result<EntropyMap<S>, FusionError> {
    let (n, c, h, w) = p.dims4("entropy_map")?;
    let hw = h * w;
    let d = p.data();
    let eps = S::lit(LOG_EPS);
    let mut out = vec![S::zero(); n * hw];
    for b in 0..n {
        for i in 0..hw {
            let mut sum = 0.0;
            let mut ent = S::zero();
            for ch in 0..c {
                let v = d[(b * c + ch) * hw + i];
                sum += v.as_f64();
                if v < S::zero() {
                    return Err(FusionError::NotProbability { pixel: b * hw + i, sum });
                }
                ent -= v * v.max(eps).min(S::one()).ln();
            }
            if (sum - 1.0).abs() > 1e-4 {
                return Err(FusionError::NotProbability { pixel: b * hw + i, sum });
            }
            out[b * hw + i] = ent;
        }
    }
    Ok(EntropyMap {
        values: Tensor::new(vec![n, h, w], out)?,
    })
}

/// Mixing weights `(w_spa, w_spe)` for one pixel given its two entropies.
pub fn entropy_weights<S: Real>(h_spa: S, h_spe: S) -> (S, S) {
    let total = h_spa + h_spe;
    if total > S::zero() {
        (h_spe / total, h_spa / total)
    } else {
        let half = S::lit(0.5);
        (half, half)
    }
}

/// Pixel-wise convex combination with weight `H_spe / (H_spa + H_spe)` on
/// `p_spa`, so the lower-entropy branch dominates. Pixels where both
/// entropies vanish are mixed 0.5/0.5.
pub fn fuse_entropy<S: Real>(
    p_spa: &Tensor<S>,
    p_spe: &Tensor<S>,
    h_spa: &EntropyMap<S>,
    h_spe: &EntropyMap<S>,
) -> Result<Tensor<S>, FusionError> {
    let (n, c, hw) = same_shape(p_spa, p_spe, "fuse_entropy")?;
    for h in [h_spa, h_spe] {
        if h.values.len() != n * hw {
            return Err(NumericsError::ShapeMismatch {
                op: "fuse_entropy",
                left: p_spa.shape().to_vec(),
                right: h.values.shape().to_vec(),
            }
            .into());
        }
    }
    let (a, b) = (p_spa.data(), p_spe.data());
    let mut out = vec![S::zero(); a.len()];
    for bi in 0..n {
        for i in 0..hw {
            let ha = h_spa.values.data()[bi * hw + i];
            let hb = h_spe.values.data()[bi * hw + i];
            let (wa, wb) = entropy_weights(ha, hb);
            for ch in 0..c {
                let j = (bi * c + ch) * hw + i;
                out[j] = wa * a[j] + wb * b[j];
            }
        }
    }
    Ok(Tensor::new(p_spa.shape().to_vec(), out)?)
}

/// Image-level mixing `α·p1 + (1-α)·p2` with one ratio per batch item.
pub fn fuse_with_alphas<S: Real>(p1: &Tensor<S>, p2: &Tensor<S>, alphas: &[f64]) -> Result<Tensor<S>, FusionError> {
    let (n, c, hw) = same_shape(p1, p2, "fuse_random")?;
    if alphas.len() != n {
        return Err(FusionError::AlphaCount {
            expected: n,
            got: alphas.len(),
        });
    }
    let per = c * hw;
    let out = (0..p1.len())
        .map(|j| {
            let alpha = S::lit(alphas[j / per]);
            alpha * p1.data()[j] + (S::one() - alpha) * p2.data()[j]
        })
        .collect();
    Ok(Tensor::new(p1.shape().to_vec(), out)?)
}

/// Random image-level mixing; returns the fused map and the drawn ratios.
pub fn fuse_random<S: Real, R: Rng + ?Sized>(
    p1: &Tensor<S>,
    p2: &Tensor<S>,
    rng: &mut R,
) -> Result<(Tensor<S>, Vec<f64>), FusionError> {
    let (n, _, _) = same_shape(p1, p2, "fuse_random")?;
    let alphas: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    Ok((fuse_with_alphas(p1, p2, &alphas)?, alphas))
}

pub fn fuse_equal<S: Real>(p1: &Tensor<S>, p2: &Tensor<S>) -> Result<Tensor<S>, FusionError> {
    same_shape(p1, p2, "fuse_equal")?;
    let half = S::lit(0.5);
    let out = p1.data().iter().zip(p2.data()).map(|(&a, &b)| (a + b) * half).collect();
    Ok(Tensor::new(p1.shape().to_vec(), out)?)
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn pseudo_label<S: Real>(p: &Tensor<S>) -> Result<LabelMap, FusionError> {
    let (n, c, h, w) = p.dims4("pseudo_label")?;
    let hw = h * w;
    let d = p.data();
    let mut out = vec![0u8; n * hw];
    for b in 0..n {
        for i in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if d[(b * c + ch) * hw + i] > d[(b * c + best) * hw + i] {
                    best = ch;
                }
            }
            out[b * hw + i] = best as u8;
        }
    }
    Ok(LabelMap::new(n, h, w, out).expect("dims match"))
}

/// Constructed pixel cases where one branch is confident and correct while
/// the other is closer to uniform and wrong, used to compare mixing rules.
pub mod oracle {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    pub struct OracleCase {
        pub p_spa: Vec<f64>,
        pub p_spe: Vec<f64>,
        pub truth: u8,
    }

    /// Pseudo-label pixel accuracy of each rule; `random` is the expectation
    /// over the mixing ratio.
    #[derive(Clone, Copy, Debug, PartialEq)]
    pub struct OracleScores {
        pub cases: usize,
        pub entropy: f64,
        pub equal: f64,
        pub random: f64,
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().map(|&x| x * x.max(LOG_EPS).ln()).sum::<f64>()
    }

    fn argmax(p: &[f64]) -> usize {
        (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b })
    }

    /// Grid over `classes` ∈ {2, 3}; the truth is always class 0 and each
    /// pair appears in both branch orders.
    pub fn cases(classes: usize) -> Vec<OracleCase> {
        let mut confident = Vec::new();
        let mut vague = Vec::new();
        match classes {
            2 => {
                for i in 1..=24 {
                    let a0 = 0.5 + 0.02 * i as f64;
                    confident.push(vec![a0, 1.0 - a0]);
                }
                for i in 1..=10 {
                    let b0 = 0.5 - 0.01 * i as f64;
                    vague.push(vec![b0, 1.0 - b0]);
                }
            }
            3 => {
                for i in 1..=20 {
                    let a0 = 0.5 + 0.02 * i as f64;
                    for a2 in [0.0, 0.02, 0.05] {
                        let a1 = 1.0 - a0 - a2;
                        if a1 >= 0.0 && a1 < a0 {
                            confident.push(vec![a0, a1, a2]);
                        }
                    }
                }
                let third = 1.0 / 3.0;
                for e1 in -10..=10 {
                    for e2 in -10..=10 {
                        let (e1, e2) = (0.01 * e1 as f64, 0.01 * e2 as f64);
                        vague.push(vec![third - e1 - e2, third + e1, third + e2]);
                    }
                }
            }
            _ => panic!("oracle grid defined for 2 or 3 classes"),
        }
        let mut out = Vec::new();
        for a in &confident {
            for b in &vague {
                if argmax(b) == 0 || entropy(b) <= entropy(a) {
                    continue;
                }
                out.push(OracleCase {
                    p_spa: a.clone(),
                    p_spe: b.clone(),
                    truth: 0,
                });
                out.push(OracleCase {
                    p_spa: b.clone(),
                    p_spe: a.clone(),
                    truth: 0,
                });
            }
        }
        out
    }

    fn stack(cases: &[OracleCase], pick: impl Fn(&OracleCase) -> &[f64]) -> Result<Tensor<f64>, FusionError> {
        let c = pick(&cases[0]).len();
        let data = cases.iter().flat_map(|k| pick(k).iter().copied()).collect();
        Ok(Tensor::new(vec![cases.len(), c, 1, 1], data)?)
    }

    fn accuracy(fused: &Tensor<f64>, cases: &[OracleCase]) -> Result<f64, FusionError> {
        let labels = pseudo_label(fused)?;
        let hits = labels.data().iter().zip(cases).filter(|(&l, k)| l == k.truth).count();
        Ok(hits as f64 / cases.len() as f64)
    }

    /// Scores every rule with the library fusion functions.
    pub fn score(cases: &[OracleCase], alpha_steps: usize) -> Result<OracleScores, FusionError> {
        let p1 = stack(cases, |k| &k.p_spa)?;
        let p2 = stack(cases, |k| &k.p_spe)?;
        let (h1, h2) = (entropy_map(&p1)?, entropy_map(&p2)?);
        let entropy = accuracy(&fuse_entropy(&p1, &p2, &h1, &h2)?, cases)?;
        let equal = accuracy(&fuse_equal(&p1, &p2)?, cases)?;
        let mut random = 0.0;
        for k in 0..alpha_steps {
            let alpha = (k as f64 + 0.5) / alpha_steps as f64;
            let alphas = vec![alpha; cases.len()];
            random += accuracy(&fuse_with_alphas(&p1, &p2, &alphas)?, cases)?;
        }
        Ok(OracleScores {
            cases: cases.len(),
            entropy,
            equal,
            random: random / alpha_steps as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn px(a: f64, b: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 2, 1, 1], vec![a, b]).unwrap()
    }

    fn ent(v: f64) -> EntropyMap<f64> {
        EntropyMap {
            values: Tensor::new(vec![1, 1, 1], vec![v]).unwrap(),
        }
    }

    #[test]
    fn entropy_examples() {
        let h = |a, b| entropy_map(&px(a, b)).unwrap().values.data()[0];
        assert!((h(0.5, 0.5) - 0.693147).abs() < 1e-6);
        assert_eq!(h(1.0, 0.0), 0.0);
        let want = -0.9f64 * 0.9f64.ln() - 0.1 * 0.1f64.ln();
        assert!((want - 0.325083).abs() < 1e-6);
        assert!((h(0.9, 0.1) - want).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_non_probability() {
        assert!(matches!(
            entropy_map(&px(0.7, 0.7)),
            Err(FusionError::NotProbability { .. })
        ));
    }

    #[test]
    fn entropy_fusion_worked_example() {
        let fused = fuse_entropy(&px(0.9, 0.1), &px(0.6, 0.4), &ent(0.2), &ent(0.6)).unwrap();
        assert!((fused.data()[0] - 0.825).abs() < 1e-12);
        assert!((fused.data()[1] - 0.175).abs() < 1e-12);
        assert_eq!(pseudo_label(&fused).unwrap().data(), &[0]);
    }

    #[test]
    fn entropy_fusion_limits() {
        let (a, b) = (px(0.9, 0.1), px(0.3, 0.7));
        let eq = fuse_entropy(&a, &b, &ent(0.4), &ent(0.4)).unwrap();
        assert_eq!(eq, fuse_equal(&a, &b).unwrap());
        let dom = fuse_entropy(&a, &b, &ent(0.0), &ent(0.5)).unwrap();
        assert_eq!(dom, a);
        let both = fuse_entropy(&a, &b, &ent(0.0), &ent(0.0)).unwrap();
        assert_eq!(both, fuse_equal(&a, &b).unwrap());
    }

    #[test]
    fn random_fusion_endpoints_and_example() {
        let (a, b) = (px(0.8, 0.2), px(0.4, 0.6));
        assert_eq!(fuse_with_alphas(&a, &b, &[1.0]).unwrap(), a);
        assert_eq!(fuse_with_alphas(&a, &b, &[0.0]).unwrap(), b);
        let m = fuse_with_alphas(&a, &b, &[0.25]).unwrap();
        assert!((m.data()[0] - 0.5).abs() < 1e-12 && (m.data()[1] - 0.5).abs() < 1e-12);
        assert!(matches!(
            fuse_with_alphas(&a, &b, &[0.1, 0.2]),
            Err(FusionError::AlphaCount { expected: 1, got: 2 })
        ));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (f, alphas) = fuse_random(&a, &b, &mut rng).unwrap();
        assert_eq!(alphas.len(), 1);
        assert!((f.data()[0] + f.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_fusion_examples() {
        let a = px(0.9, 0.1);
        assert_eq!(fuse_equal(&a, &a).unwrap(), a);
        assert_eq!(fuse_equal(&px(1.0, 0.0), &px(0.0, 1.0)).unwrap(), px(0.5, 0.5));
        let m = fuse_equal(&a, &px(0.5, 0.5)).unwrap();
        assert!((m.data()[0] - 0.7).abs() < 1e-12 && (m.data()[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(pseudo_label(&px(0.3, 0.7)).unwrap().data(), &[1]);
        assert_eq!(pseudo_label(&px(0.5, 0.5)).unwrap().data(), &[0]);
    }

    #[test]
    fn strategy_parse() {
        assert_eq!("random".parse::<FusionStrategy>().unwrap(), FusionStrategy::Random);
        assert!("mean".parse::<FusionStrategy>().is_err());
    }
}
