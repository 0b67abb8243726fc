use super::TrainError;
use crate::numerics::{Parameter, Tensor};

/// `lr0 · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: u64, max_iter: u64, lr0: f64, power: f64) -> f64 {
    let frac = (iter.min(max_iter) as f64 / max_iter as f64).min(1.0);
    lr0 * (1.0 - frac).powf(power)
}

/// SGD with momentum; weight decay is added to the gradient before the
/// momentum update. The whole step is rejected if any gradient is not
/// finite, leaving parameters and buffers untouched.
pub fn sgd_step(
    params: &mut [Parameter<f32>],
    grads: &[Tensor<f32>],
    velocity: &mut [Tensor<f32>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Config(format!(
            "{} parameters, {} gradients, {} buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.value.shape() != g.shape() || p.value.shape() != v.shape() {
            return Err(TrainError::Config(format!("buffer shape mismatch for `{}`", p.name)));
        }
        if !g.is_finite() {
            log::warn!("non-finite gradient for `{}`; step skipped", p.name);
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
    }
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((theta, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = m * *vi + (gi + wd * *theta);
            *theta -= lr * *vi;
        }
    }
    Ok(())
}
