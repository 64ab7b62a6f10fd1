//! Stochastic gradient descent with Nesterov momentum.
//!
//! With velocity `v` and the gradient `g` taken at the look-ahead point
//! `θ + μ·v`:
//!
//! ```text
//! v' = μ·v − lr·g(θ + μ·v)
//! θ' = θ + v'
//! ```

use super::params::{Gradients, LayerStack, NetworkParams, Velocity};
use super::MlpError;

/// In-place update over flat slices.
pub fn nesterov_update(
    theta: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
) -> Result<(), MlpError> {
    if theta.len() != velocity.len() || theta.len() != grad.len() {
        return Err(MlpError::Shape("optimizer operands differ in length".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(MlpError::NonFinite("gradient".into()));
    }
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        *t += *v;
    }
    Ok(())
}

/// Look-ahead point `θ + μ·v` at which the next gradient is evaluated.
pub fn lookahead(params: &NetworkParams, velocity: &Velocity, momentum: f64) -> NetworkParams {
    params.with_stack(super::network::axpy(&params.stack, momentum, velocity))
}

/// Pure form of one optimizer step; `gradients` must have been evaluated at
/// [`lookahead`]`(params, velocity, momentum)`.
pub fn sgd_nesterov_step(
    params: &NetworkParams,
    velocity: &Velocity,
    gradients: &Gradients,
    lr: f64,
    momentum: f64,
) -> Result<(NetworkParams, Velocity), MlpError> {
    if !(lr > 0.0) {
        return Err(MlpError::Config(format!("learning rate must be positive, got {lr}")));
    }
    let mut theta = params.clone();
    let mut vel = velocity.clone();
    step_in_place(&mut theta.stack, &mut vel, gradients, lr, momentum)?;
    Ok((theta, vel))
}

pub(crate) fn step_in_place(
    theta: &mut LayerStack,
    velocity: &mut LayerStack,
    gradients: &LayerStack,
    lr: f64,
    momentum: f64,
) -> Result<(), MlpError> {
    if !theta.same_shape(velocity) || !theta.same_shape(gradients) {
        return Err(MlpError::Shape("optimizer operands differ in shape".into()));
    }
    if !gradients.all_finite() {
        return Err(MlpError::NonFinite("gradient".into()));
    }
    for ((t, v), g) in theta.layers.iter_mut().zip(velocity.layers.iter_mut()).zip(&gradients.layers) {
        nesterov_update(&mut t.weights, &mut v.weights, &g.weights, lr, momentum)?;
        nesterov_update(&mut t.biases, &mut v.biases, &g.biases, lr, momentum)?;
    }
    Ok(())
}
