//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Parameter, Real, Result, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Coordinates checked per parameter; parameters with more elements are
    /// subsampled. Must be at least 32.
    pub coords_per_param: usize,
    /// Lower bound on the denominator of the relative error, so that
    /// near-zero gradients are compared in absolute terms.
    pub scale_floor: f64,
    pub seed: u64,
}

impl GradCheckOptions {
    /// Defaults for the 64-bit shadow mode.
    pub fn f64() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-3,
            coords_per_param: 32,
            scale_floor: 1e-4,
            seed: 0,
        }
    }

    /// Defaults for a 32-bit check.
    pub fn f32() -> Self {
        Self {
            eps: 1e-2,
            tol: 1e-3,
            coords_per_param: 32,
            scale_floor: 1e-1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Option<Offender>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.as_ref().map_or(true, |w| w.rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per parameter (in order) and must
/// return a scalar node. It is re-evaluated twice per checked coordinate.
pub fn grad_check<S, F>(mut f: F, params: &[Parameter<S>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Real,
    F: FnMut(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if opts.coords_per_param < 32 {
        return Err(NumericsError::Invalid(
            "grad_check needs at least 32 coordinates per parameter".into(),
        ));
    }
    let mut values: Vec<_> = params.iter().map(|p| p.value.clone()).collect();
    let mut eval = |values: &[super::Tensor<S>], want_grad: bool| -> Result<(f64, Vec<Vec<S>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(NumericsError::Invalid("grad_check: f must return a scalar".into()));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" });
        }
        let grads = if want_grad {
            let g = tape.backward(out)?;
            vars.iter()
                .zip(values)
                .map(|(&var, val)| g.get_or_zeros(var, val.shape()).into_data())
                .collect()
        } else {
            Vec::new()
        };
        Ok((y.as_f64(), grads))
    };

    let (_, analytic) = eval(&values, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: Option<Offender> = None;
    let mut checked = 0;
    for pi in 0..params.len() {
        let len = values[pi].len();
        let coords: Vec<usize> = if len <= opts.coords_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let orig = values[pi].data()[idx];
            values[pi].data_mut()[idx] = orig + S::lit(opts.eps);
            let (plus, _) = eval(&values, false)?;
            values[pi].data_mut()[idx] = orig - S::lit(opts.eps);
            let (minus, _) = eval(&values, false)?;
            values[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi][idx].as_f64();
            let denom = a.abs().max(numeric.abs()).max(opts.scale_floor);
            let rel_err = (a - numeric).abs() / denom;
            checked += 1;
            if worst.as_ref().map_or(true, |w| rel_err > w.rel_err) {
                worst = Some(Offender {
                    param: params[pi].name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(GradCheckReport {
        checked,
        worst,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let p = Parameter::new("theta", Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.leaf(p.value.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);

        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[p],
            &GradCheckOptions::f64(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Parameter::new("theta", Tensor::<f64>::full(&[4], 0.5));
        let report = grad_check(
            |t, v| {
                let z = t.scale(v[0], 0.0);
                let s = t.sum(z);
                Ok(t.add_scalar(s, 7.0))
            },
            &[p],
            &GradCheckOptions::f64(),
        )
        .unwrap();
        let w = report.worst.unwrap();
        assert_eq!(w.analytic, 0.0);
        assert_eq!(w.numeric, 0.0);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let p = Parameter::new("theta", Tensor::<f64>::full(&[2], f64::INFINITY));
        let err = grad_check(|t, v| Ok(t.sum(v[0])), &[p], &GradCheckOptions::f64()).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }

    #[test]
    fn detects_injected_fault() {
        let p = Parameter::new("theta", Tensor::<f64>::from_fn(&[5], |i| i as f64 + 0.5));
        let report = grad_check(
            |t, v| {
                t.inject_fault(crate::numerics::OpKind::Log);
                let l = t.log(v[0])?;
                Ok(t.sum(l))
            },
            &[p],
            &GradCheckOptions::f64(),
        )
        .unwrap();
        assert!(!report.passed());
    }
}
