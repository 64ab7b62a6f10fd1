//! Snapshot ensembles of small feed-forward regressors, a bagged regression
//! forest baseline, and normalized conformal prediction intervals built from
//! ensemble spread and calibration residuals.

pub mod dataset;
pub mod mlp;
pub mod seed;
pub mod stats;
pub mod conformal;
pub mod forest;
pub mod ensembles;
pub mod eval;
pub mod synthetic;
pub mod experiment;
