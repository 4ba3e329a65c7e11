//! Stochastic gradient descent with classical momentum and decoupled-from-
//! nothing weight decay folded into the gradient (the common SGD variant):
//!
//! ```text
//! v <- momentum * v + (grad + weight_decay * theta)
//! theta <- theta - lr * v
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter velocity buffers, zero-initialized.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(shapes: &[usize]) -> Self {
        SgdState {
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Builds state matching a parameter list.
    pub fn for_params(params: &[&mut Tensor]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One update step over a full parameter list. `params` and `grads` must
/// align with the state's buffers in length and order.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Contract(format!(
            "optimizer saw {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.numel() != v.len() {
            return Err(Error::Contract(format!(
                "optimizer shape mismatch: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let gd = g.data();
        for (i, t) in p.data_mut().iter_mut().enumerate() {
            v[i] = momentum * v[i] + (gd[i] + weight_decay * *t);
            *t -= lr * v[i];
        }
    }
    Ok(())
}
