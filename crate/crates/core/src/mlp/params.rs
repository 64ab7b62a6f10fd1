use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use super::MlpError;
use crate::seed;

/// Hidden layer widths of the regressor.
pub const HIDDEN_LAYERS: [usize; 3] = [60, 20, 10];

/// One dense layer: `weights` is `n_out × n_in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, weights: vec![0.0; n_in * n_out], biases: vec![0.0; n_out] }
    }

    #[inline]
    pub fn w(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.n_in + inp]
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.n_in == other.n_in && self.n_out == other.n_out
    }
}

/// Layer stack shared by parameters, gradients and optimizer velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
}

impl LayerStack {
    pub fn zeros_for(sizes: &[usize]) -> Self {
        Self { layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect() }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].n_in];
        sizes.extend(self.layers.iter().map(|l| l.n_out));
        sizes
    }

    pub fn same_shape(&self, other: &LayerStack) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn n_values(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Every value, weights before biases, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

pub type Gradients = LayerStack;
pub type Velocity = LayerStack;

/// Weights and biases of the `[d, 60, 20, 10, 1]` regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    #[serde(flatten)]
    pub stack: LayerStack,
}

impl NetworkParams {
    pub fn architecture(d: usize) -> Vec<usize> {
        let mut sizes = vec![d];
        sizes.extend(HIDDEN_LAYERS);
        sizes.push(1);
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.stack.layers
    }

    /// Copy with the same seed and architecture but new values.
    pub fn with_stack(&self, stack: LayerStack) -> Self {
        debug_assert!(stack.same_shape(&self.stack));
        Self { layer_sizes: self.layer_sizes.clone(), seed: self.seed, stack }
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        let d = *self.layer_sizes.first().unwrap_or(&0);
        if d == 0 || self.layer_sizes != Self::architecture(d) {
            return Err(MlpError::Architecture(format!("layer sizes {:?}", self.layer_sizes)));
        }
        if self.stack.layer_sizes() != self.layer_sizes {
            return Err(MlpError::Architecture("layer arrays disagree with layer_sizes".into()));
        }
        for l in &self.stack.layers {
            if l.weights.len() != l.n_in * l.n_out || l.biases.len() != l.n_out {
                return Err(MlpError::Architecture("parameter array length mismatch".into()));
            }
        }
        if !self.stack.all_finite() {
            return Err(MlpError::NonFinite("parameter".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("finite parameters serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, MlpError> {
        let p: Self = serde_json::from_str(s).map_err(|e| MlpError::Format(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// Fan-in scaled uniform weights in `±√(6/fan_in)`, zero biases.
pub fn init_params(d: usize, seed: u64) -> Result<NetworkParams, MlpError> {
    if d == 0 {
        return Err(MlpError::Architecture("input width must be at least 1".into()));
    }
    let sizes = NetworkParams::architecture(d);
    let mut rng = seed::rng(seed::derive(seed, seed::stream::INIT));
    let mut stack = LayerStack::zeros_for(&sizes);
    for layer in &mut stack.layers {
        let bound = init_bound(layer.n_in);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in &mut layer.weights {
            *w = rng.sample(dist);
        }
    }
    Ok(NetworkParams { layer_sizes: sizes, seed, stack })
}

pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
