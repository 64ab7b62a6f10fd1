//! Forward pass, dropout masks and backpropagation.

use rand::Rng;

use super::params::{Gradients, LayerStack, NetworkParams};
use super::MlpError;
use crate::seed;

/// Per-unit multipliers applied to each hidden layer's activations: `0` for
/// a dropped unit, `1/(1-rate)` for a kept one (inverted dropout).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub layers: Vec<Vec<f64>>,
}

impl DropoutMasks {
    /// All-ones masks, i.e. inference behaviour.
    pub fn identity(params: &NetworkParams) -> Self {
        Self { layers: hidden_widths(params).map(|w| vec![1.0; w]).collect() }
    }

    pub fn sample<R: Rng>(params: &NetworkParams, rate: f64, rng: &mut R) -> Self {
        if rate == 0.0 {
            return Self::identity(params);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let layers = hidden_widths(params)
            .map(|w| {
                (0..w)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
                    .collect()
            })
            .collect();
        Self { layers }
    }

    fn matches(&self, params: &NetworkParams) -> bool {
        self.layers.len() == params.layers().len() - 1
            && self.layers.iter().zip(hidden_widths(params)).all(|(m, w)| m.len() == w)
    }
}

fn hidden_widths(params: &NetworkParams) -> impl Iterator<Item = usize> + '_ {
    let layers = params.layers();
    layers[..layers.len() - 1].iter().map(|l| l.n_out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Infer,
    Train { dropout_rate: f64, mask_seed: u64 },
}

/// Scalar prediction for one input row.
pub fn forward(params: &NetworkParams, x: &[f64], mode: ForwardMode) -> Result<f64, MlpError> {
    check_width(params, x)?;
    match mode {
        ForwardMode::Infer => Ok(forward_unchecked(params, x, None)),
        ForwardMode::Train { dropout_rate, mask_seed } => {
            if !(0.0..1.0).contains(&dropout_rate) {
                return Err(MlpError::Config(format!("dropout rate {dropout_rate}")));
            }
            let masks = DropoutMasks::sample(params, dropout_rate, &mut seed::rng(mask_seed));
            Ok(forward_unchecked(params, x, Some(&masks)))
        }
    }
}

pub fn forward_masked(
    params: &NetworkParams,
    x: &[f64],
    masks: &DropoutMasks,
) -> Result<f64, MlpError> {
    check_width(params, x)?;
    if !masks.matches(params) {
        return Err(MlpError::Shape("dropout masks do not match hidden layers".into()));
    }
    Ok(forward_unchecked(params, x, Some(masks)))
}

/// Activations of the first hidden layer (after ReLU, before dropout).
pub fn first_hidden(params: &NetworkParams, x: &[f64]) -> Result<Vec<f64>, MlpError> {
    check_width(params, x)?;
    let l = &params.layers()[0];
    Ok((0..l.n_out).map(|o| relu(dot(&l.weights[o * l.n_in..(o + 1) * l.n_in], x) + l.biases[o])).collect())
}

/// Inference-mode predictions for many rows.
pub fn predict(params: &NetworkParams, rows: &[&[f64]]) -> Result<Vec<f64>, MlpError> {
    rows.iter().map(|x| forward(params, x, ForwardMode::Infer)).collect()
}

fn check_width(params: &NetworkParams, x: &[f64]) -> Result<(), MlpError> {
    if x.len() != params.input_dim() {
        return Err(MlpError::Shape(format!(
            "input has {} features, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    Ok(())
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense layer `out = W·input + b`.
fn affine(layer: &super::Layer, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for o in 0..layer.n_out {
        let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
        out.push(dot(row, input) + layer.biases[o]);
    }
}

pub(crate) fn forward_unchecked(params: &NetworkParams, x: &[f64], masks: Option<&DropoutMasks>) -> f64 {
    let layers = params.layers();
    let last = layers.len() - 1;
    let mut a = x.to_vec();
    let mut z = Vec::new();
    for (i, layer) in layers[..last].iter().enumerate() {
        affine(layer, &a, &mut z);
        a.clear();
        a.extend(z.iter().map(|&v| relu(v)));
        if let Some(m) = masks {
            for (v, s) in a.iter_mut().zip(&m.layers[i]) {
                *v *= s;
            }
        }
    }
    affine(&layers[last], &a, &mut z);
    z[0]
}

/// Gradient of the batch mean squared error `mean((f(x) - y)²)` with respect
/// to every parameter, using the supplied per-example dropout masks.
/// Returns the gradients and the batch loss.
pub fn backward(
    params: &NetworkParams,
    batch_x: &[&[f64]],
    batch_y: &[f64],
    masks: &[DropoutMasks],
) -> Result<(Gradients, f64), MlpError> {
    if batch_x.is_empty() || batch_x.len() != batch_y.len() || masks.len() != batch_x.len() {
        return Err(MlpError::Shape(format!(
            "batch of {} rows, {} targets, {} masks",
            batch_x.len(),
            batch_y.len(),
            masks.len()
        )));
    }
    for (x, m) in batch_x.iter().zip(masks) {
        check_width(params, x)?;
        if !m.matches(params) {
            return Err(MlpError::Shape("dropout masks do not match hidden layers".into()));
        }
    }

    let layers = params.layers();
    let n_layers = layers.len();
    let scale = 2.0 / batch_x.len() as f64;
    let mut grads: Gradients = params.stack.zeros_like();
    let mut loss = 0.0;

    // inputs[l] is the (masked) input of layer l; pre[l] its pre-activation.
    let mut inputs: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut pre: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut delta = Vec::new();
    let mut next_delta = Vec::new();

    for ((x, &y), mask) in batch_x.iter().zip(batch_y).zip(masks) {
        inputs[0].clear();
        inputs[0].extend_from_slice(x);
        for l in 0..n_layers {
            let (head, tail) = inputs.split_at_mut(l + 1);
            affine(&layers[l], &head[l], &mut pre[l]);
            if l + 1 < n_layers {
                let next = &mut tail[0];
                next.clear();
                next.extend(pre[l].iter().zip(&mask.layers[l]).map(|(&z, &s)| relu(z) * s));
            }
        }
        let err = pre[n_layers - 1][0] - y;
        loss += err * err;

        delta.clear();
        delta.push(scale * err);
        for l in (0..n_layers).rev() {
            let layer = &layers[l];
            let g = &mut grads.layers[l];
            let input = &inputs[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (w, &a) in row.iter_mut().zip(input) {
                    *w += d * a;
                }
            }
            if l == 0 {
                break;
            }
            // Back through the previous hidden layer's mask and ReLU.
            next_delta.clear();
            next_delta.resize(layer.n_in, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (nd, &w) in next_delta.iter_mut().zip(row) {
                    *nd += d * w;
                }
            }
            let mask_prev = &mask.layers[l - 1];
            for (i, nd) in next_delta.iter_mut().enumerate() {
                *nd *= if pre[l - 1][i] > 0.0 { mask_prev[i] } else { 0.0 };
            }
            std::mem::swap(&mut delta, &mut next_delta);
        }
    }
    Ok((grads, loss / batch_x.len() as f64))
}

/// Batch MSE under fixed masks; the quantity `backward` differentiates.
pub fn batch_loss(
    params: &NetworkParams,
    batch_x: &[&[f64]],
    batch_y: &[f64],
    masks: &[DropoutMasks],
) -> f64 {
    let total: f64 = batch_x
        .iter()
        .zip(batch_y)
        .zip(masks)
        .map(|((x, y), m)| {
            let e = forward_unchecked(params, x, Some(m)) - y;
            e * e
        })
        .sum();
    total / batch_x.len() as f64
}

/// Elementwise `a + s·b` over two stacks of the same shape.
pub(crate) fn axpy(a: &LayerStack, s: f64, b: &LayerStack) -> LayerStack {
    let mut out = a.clone();
    for (o, v) in out.values_mut().zip(b.values()) {
        *o += s * v;
    }
    out
}
