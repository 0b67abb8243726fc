//! Scribble, mutual-teaching and ensemble supervision terms.

use serde::{Deserialize, Serialize};

use crate::fusion::{self, EntropyMap, FusionError};
use crate::labels::{LabelError, PseudoLabel, ScribbleMask, UNLABELED};
use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};

/// Smoothing added to both numerator and denominator of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("label map {labels:?} does not match logits {logits:?}")]
    Shape {
        logits: Vec<usize>,
        labels: (usize, usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mt: f64,
    pub lambda_el: f64,
}

impl LossWeights {
    pub fn new(lambda_mt: f64, lambda_el: f64) -> Self {
        Self { lambda_mt, lambda_el }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0)
    }
}

/// Logits and softmax probabilities of one branch, both on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutputs {
    pub logits: Var,
    pub probs: Var,
}

impl BranchOutputs {
    pub fn from_logits<S: Real>(tape: &mut Tape<S>, logits: Var) -> Result<Self> {
        let probs = tape.softmax_channels(logits)?;
        Ok(Self { logits, probs })
    }
}

fn check_labels<S: Real>(tape: &Tape<S>, v: Var, labels: &PseudoLabel) -> Result<()> {
    let s = tape.shape(v);
    let (n, h, w) = labels.dims();
    if s.len() != 4 || (s[0], s[2], s[3]) != (n, h, w) {
        return Err(LossError::Shape {
            logits: s.to_vec(),
            labels: labels.dims(),
        });
    }
    Ok(())
}

/// Mean cross-entropy over scribble-labeled pixels only. Unlabeled pixels
/// contribute neither value nor gradient; an empty scribble gives 0.
pub fn partial_cross_entropy<S: Real>(tape: &mut Tape<S>, logits: Var, scribbles: &ScribbleMask) -> Result<Var> {
    scribbles.validate(UNLABELED)?;
    check_labels(tape, logits, scribbles)?;
    Ok(tape.cross_entropy(logits, scribbles.data(), Some(UNLABELED))?)
}

/// Dense cross-entropy against a pseudo label, averaged over all pixels.
pub fn cross_entropy<S: Real>(tape: &mut Tape<S>, logits: Var, target: &PseudoLabel) -> Result<Var> {
    target.validate(1)?;
    check_labels(tape, logits, target)?;
    Ok(tape.cross_entropy(logits, target.data(), None)?)
}

/// Soft Dice loss averaged over both classes and the batch.
pub fn dice_loss<S: Real>(tape: &mut Tape<S>, probs: Var, target: &PseudoLabel) -> Result<Var> {
    target.validate(1)?;
    check_labels(tape, probs, target)?;
    Ok(tape.soft_dice(probs, target.data(), DICE_EPS)?)
}

/// `CE(l, y) + Dice(p, y)`: supervision of one branch by one pseudo label.
fn supervise<S: Real>(tape: &mut Tape<S>, branch: BranchOutputs, target: &PseudoLabel) -> Result<Var> {
    let ce = cross_entropy(tape, branch.logits, target)?;
    let dice = dice_loss(tape, branch.probs, target)?;
    Ok(tape.add(ce, dice)?)
}

/// Each branch is supervised by the other branch's pseudo label.
pub fn mutual_teaching_loss<S: Real>(
    tape: &mut Tape<S>,
    spa: BranchOutputs,
    spe: BranchOutputs,
    y_spa: &PseudoLabel,
    y_spe: &PseudoLabel,
) -> Result<Var> {
    let to_spa = supervise(tape, spa, y_spe)?;
    let to_spe = supervise(tape, spe, y_spa)?;
    Ok(tape.add(to_spa, to_spe)?)
}

/// Both branches are supervised by the fused pseudo label.
pub fn ensemble_loss<S: Real>(
    tape: &mut Tape<S>,
    spa: BranchOutputs,
    spe: BranchOutputs,
    y_fused: &PseudoLabel,
) -> Result<Var> {
    let to_spa = supervise(tape, spa, y_fused)?;
    let to_spe = supervise(tape, spe, y_fused)?;
    Ok(tape.add(to_spa, to_spe)?)
}

/// How the two probability maps are merged into the ensemble target.
#[derive(Clone, Copy, Debug)]
pub enum Mixing<'a> {
    Entropy,
    Equal,
    /// Image-level ratios, one per batch item.
    Random(&'a [f64]),
}

/// Detached quantities derived from the two branch predictions.
#[derive(Clone, Debug)]
pub struct DualPrediction<S = f32> {
    pub logits_spa: Tensor<S>,
    pub logits_spe: Tensor<S>,
    pub p_spa: Tensor<S>,
    pub p_spe: Tensor<S>,
    pub h_spa: EntropyMap<S>,
    pub h_spe: EntropyMap<S>,
    pub fused: Tensor<S>,
    pub y_spa: PseudoLabel,
    pub y_spe: PseudoLabel,
    pub y_fused: PseudoLabel,
}

impl<S: Real> DualPrediction<S> {
    pub fn from_tape(tape: &Tape<S>, spa: BranchOutputs, spe: BranchOutputs, mixing: Mixing<'_>) -> Result<Self> {
        let p_spa = tape.value(spa.probs).clone();
        let p_spe = tape.value(spe.probs).clone();
        let h_spa = fusion::entropy_map(&p_spa)?;
        let h_spe = fusion::entropy_map(&p_spe)?;
        let fused = match mixing {
            Mixing::Entropy => fusion::fuse_entropy(&p_spa, &p_spe, &h_spa, &h_spe)?,
            Mixing::Equal => fusion::fuse_equal(&p_spa, &p_spe)?,
            Mixing::Random(alphas) => fusion::fuse_with_alphas(&p_spa, &p_spe, alphas)?,
        };
        Ok(Self {
            logits_spa: tape.value(spa.logits).clone(),
            logits_spe: tape.value(spe.logits).clone(),
            y_spa: fusion::pseudo_label(&p_spa)?,
            y_spe: fusion::pseudo_label(&p_spe)?,
            y_fused: fusion::pseudo_label(&fused)?,
            p_spa,
            p_spe,
            h_spa,
            h_spe,
            fused,
        })
    }
}

/// Scalar values of the hybrid objective and its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub scrib: f64,
    pub mt: f64,
    pub el: f64,
}

pub struct HybridLoss<S = f32> {
    pub total: Var,
    pub scrib: Var,
    pub mt: Var,
    pub el: Var,
    pub values: LossBreakdown,
    pub prediction: DualPrediction<S>,
}

/// `L_scrib + λ_mt·L_mt + λ_el·L_el`, deriving all pseudo labels internally.
pub fn hybrid_loss<S: Real>(
    tape: &mut Tape<S>,
    spa: BranchOutputs,
    spe: BranchOutputs,
    scribbles: &ScribbleMask,
    weights: LossWeights,
    mixing: Mixing<'_>,
) -> Result<HybridLoss<S>> {
    let prediction = DualPrediction::from_tape(tape, spa, spe, mixing)?;
    let pce_spa = partial_cross_entropy(tape, spa.logits, scribbles)?;
    let pce_spe = partial_cross_entropy(tape, spe.logits, scribbles)?;
    let scrib = tape.add(pce_spa, pce_spe)?;
    let mt = mutual_teaching_loss(tape, spa, spe, &prediction.y_spa, &prediction.y_spe)?;
    let el = ensemble_loss(tape, spa, spe, &prediction.y_fused)?;
    let mt_w = tape.scale(mt, S::lit(weights.lambda_mt));
    let el_w = tape.scale(el, S::lit(weights.lambda_el));
    let partial = tape.add(scrib, mt_w)?;
    let total = tape.add(partial, el_w)?;
    let item = |v: Var| tape.value(v).item().as_f64();
    let values = LossBreakdown {
        total: item(total),
        scrib: item(scrib),
        mt: item(mt),
        el: item(el),
    };
    Ok(HybridLoss {
        total,
        scrib,
        mt,
        el,
        values,
        prediction,
    })
}

/// Gaussian ramp `λ_max · exp(-5 (1 - min(t/T, 1))²)`.
pub fn lambda_rampup(iter: u64, ramp_iters: u64, lambda_max: f64) -> f64 {
    let t = (iter as f64 / ramp_iters.max(1) as f64).min(1.0);
    lambda_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(tape: &mut Tape<f64>, vals: &[f64], h: usize, w: usize) -> BranchOutputs {
        let v = tape.leaf(Tensor::new(vec![1, 2, h, w], vals.to_vec()).unwrap());
        BranchOutputs::from_logits(tape, v).unwrap()
    }

    #[test]
    fn pce_examples() {
        let mut tape = Tape::<f64>::new();
        let b = logits(&mut tape, &[0.0, 0.0], 1, 1);
        let none = ScribbleMask::filled(1, 1, 1, UNLABELED);
        let v = partial_cross_entropy(&mut tape, b.logits, &none).unwrap();
        assert_eq!(tape.value(v).item(), 0.0);
        let fg = ScribbleMask::filled(1, 1, 1, 1);
        let v = partial_cross_entropy(&mut tape, b.logits, &fg).unwrap();
        assert!((tape.value(v).item() - 0.693147).abs() < 1e-6);
        let c = logits(&mut tape, &[-20.0, 20.0], 1, 1);
        let v = partial_cross_entropy(&mut tape, c.logits, &fg).unwrap();
        assert!(tape.value(v).item() < 1e-12);
    }

    #[test]
    fn pce_rejects_bad_label_values() {
        let mut tape = Tape::<f64>::new();
        let b = logits(&mut tape, &[0.0, 0.0], 1, 1);
        let bad = ScribbleMask::filled(1, 1, 1, 3);
        assert!(matches!(
            partial_cross_entropy(&mut tape, b.logits, &bad),
            Err(LossError::Labels(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let b = logits(&mut tape, &[0.0; 4], 1, 2);
        let y = PseudoLabel::filled(1, 2, 1, 0);
        assert!(matches!(
            cross_entropy(&mut tape, b.logits, &y),
            Err(LossError::Shape { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let b = logits(&mut tape, &[20.0, -20.0, -20.0, 20.0], 1, 2);
        let y = PseudoLabel::new(1, 1, 2, vec![0, 1]).unwrap();
        let v = cross_entropy(&mut tape, b.logits, &y).unwrap();
        assert!(tape.value(v).item() < 1e-12);
        let u = logits(&mut tape, &[0.3, 0.3, 0.3, 0.3], 1, 2);
        let v = cross_entropy(&mut tape, u.logits, &y).unwrap();
        assert!((tape.value(v).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dice_limits() {
        let mut tape = Tape::<f64>::new();
        let target: Vec<u8> = (0..64).map(|i| (i % 3 == 0) as u8).collect();
        let y = PseudoLabel::new(1, 8, 8, target.clone()).unwrap();
        let mut p = vec![0.0; 128];
        for (i, &t) in target.iter().enumerate() {
            p[t as usize * 64 + i] = 1.0;
        }
        let pv = tape.leaf(Tensor::new(vec![1, 2, 8, 8], p.clone()).unwrap());
        let d = dice_loss(&mut tape, pv, &y).unwrap();
        assert!(tape.value(d).item().abs() < 1e-5);
        let flipped: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let pv = tape.leaf(Tensor::new(vec![1, 2, 8, 8], flipped).unwrap());
        let d = dice_loss(&mut tape, pv, &y).unwrap();
        assert!((tape.value(d).item() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mutual_teaching_is_swap_symmetric() {
        let mut tape = Tape::<f64>::new();
        let a = logits(&mut tape, &[0.3, -1.2, 0.8, 0.1, 0.5, 0.9, -0.4, 0.2], 2, 2);
        let b = logits(&mut tape, &[1.3, 0.2, -0.8, 0.4, 0.5, -0.9, 0.4, 1.2], 2, 2);
        let ya = fusion::pseudo_label(tape.value(a.probs)).unwrap();
        let yb = fusion::pseudo_label(tape.value(b.probs)).unwrap();
        let ab = mutual_teaching_loss(&mut tape, a, b, &ya, &yb).unwrap();
        let ba = mutual_teaching_loss(&mut tape, b, a, &yb, &ya).unwrap();
        assert!((tape.value(ab).item() - tape.value(ba).item()).abs() < 1e-12);
    }

    #[test]
    fn hybrid_with_zero_weights_is_scribble_loss() {
        let mut tape = Tape::<f64>::new();
        let a = logits(&mut tape, &[0.3, -1.2, 0.8, 0.1, 0.5, 0.9, -0.4, 0.2], 2, 2);
        let b = logits(&mut tape, &[1.3, 0.2, -0.8, 0.4, 0.5, -0.9, 0.4, 1.2], 2, 2);
        let scr = ScribbleMask::new(1, 2, 2, vec![0, 2, 1, 2]).unwrap();
        let h = hybrid_loss(&mut tape, a, b, &scr, LossWeights::zero(), Mixing::Entropy).unwrap();
        assert_eq!(h.values.total, h.values.scrib);
        let none = ScribbleMask::filled(1, 2, 2, UNLABELED);
        let h = hybrid_loss(&mut tape, a, b, &none, LossWeights::zero(), Mixing::Equal).unwrap();
        assert_eq!(h.values.total, 0.0);
    }

    #[test]
    fn rampup_examples() {
        assert_eq!(lambda_rampup(2500, 2500, 5.0), 5.0);
        assert!((lambda_rampup(0, 2500, 5.0) - 0.033690).abs() < 1e-6);
        assert_eq!(lambda_rampup(5000, 2500, 5.0), 5.0);
    }
}
