//! Planted-signal binary datasets for tests, fixtures and smoke runs.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError};
use crate::seed;

/// `y = intercept + Σ w_j·b_j + ε` with `b_j ~ Bernoulli(density)`,
/// `w_j ~ U(−weight_scale, weight_scale)` and `ε ~ N(0, noise_sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedLinear {
    pub n: usize,
    pub d: usize,
    pub intercept: f64,
    pub weight_scale: f64,
    pub density: f64,
    pub noise_sd: f64,
}

impl Default for PlantedLinear {
    fn default() -> Self {
        Self { n: 300, d: 10, intercept: 6.0, weight_scale: 1.0, density: 0.5, noise_sd: 0.3 }
    }
}

impl PlantedLinear {
    /// The dataset and the planted weights.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Vec<f64>), DatasetError> {
        if !(self.noise_sd >= 0.0 && (0.0..=1.0).contains(&self.density)) {
            return Err(DatasetError::Invalid(format!("bad generator settings {self:?}")));
        }
        let mut rng = seed::rng(seed);
        let weights: Vec<f64> = (0..self.d).map(|_| rng.random_range(-1.0..=1.0) * self.weight_scale).collect();
        let noise = Normal::new(0.0, self.noise_sd).expect("finite non-negative sd");
        let mut features = Vec::with_capacity(self.n * self.d);
        let mut targets = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let row: Vec<f64> = (0..self.d).map(|_| f64::from(u8::from(rng.random_bool(self.density)))).collect();
            let signal: f64 = row.iter().zip(&weights).map(|(b, w)| b * w).sum();
            targets.push(self.intercept + signal + noise.sample(&mut rng));
            features.extend(row);
        }
        let ids = (0..self.n).map(|i| format!("syn{i:05}")).collect();
        Ok((Dataset::new(ids, self.d, features, targets)?, weights))
    }

    /// Noise-free target for a feature row.
    pub fn signal(&self, weights: &[f64], row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(weights).map(|(b, w)| b * w).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residuals_match_noise_level() {
        let g = PlantedLinear { n: 4000, ..Default::default() };
        let (ds, w) = g.generate(17).unwrap();
        assert_eq!((ds.len(), ds.n_features(), w.len()), (4000, 10, 10));
        let resid: Vec<f64> = (0..ds.len()).map(|i| ds.targets()[i] - g.signal(&w, ds.row(i))).collect();
        let sd = crate::stats::population_std(&resid);
        assert!((sd - 0.3).abs() < 0.02, "{sd}");
        assert_eq!(g.generate(17).unwrap().0, ds);
    }
}
