use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};

/// Plain gradient descent, `θ ← θ − lr·g`, over every tensor of θ
/// including the prior mean and log-precision.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be ≥ 0, got {lr}")));
    }
    if grads.0.len() != params.tensors().len() {
        return Err(Error::dim(
            "sgd_step",
            format!("{} gradients for {} tensors", grads.0.len(), params.tensors().len()),
        ));
    }
    for (idx, g) in grads.0.iter().enumerate() {
        if g.len() != params.tensor(idx).len() {
            return Err(Error::dim("sgd_step", format!("gradient {idx} has wrong length")));
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (idx, g) in grads.0.iter().enumerate() {
        descend(params.tensor_mut(idx).data_mut(), g, lr);
    }
    Ok(())
}

pub(crate) fn descend(theta: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in theta.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}
