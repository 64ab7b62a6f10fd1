//! Normalized inductive conformal regression.
//!
//! A calibration example with observation `y`, ensemble mean `ŷ` and ensemble
//! spread `σ` scores `α = |y − ŷ| / e^σ`. For a confidence level `cl` the
//! calibration scores are sorted and the `⌈(n+1)·cl⌉`-th smallest (clamped
//! to `n`) is selected; a new instance then gets the region
//! `ŷ ± e^σ · α_cl`.
//!
//! Because `e^σ ≥ 1`, no score exceeds the largest absolute residual it was
//! computed from.

use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::forest::{self, fit_forest, predict_forest, ForestConfig, ForestError};
use crate::seed;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("ensemble spread must be non-negative, got {0}")]
    NegativeSpread(f64),
    #[error("non-conformity threshold must be non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error("no calibration records")]
    Empty,
    #[error("confidence level must lie strictly between 0 and 1, got {0}")]
    BadLevel(f64),
    #[error("{what}: {left} vs {right} entries")]
    Length { what: &'static str, left: usize, right: usize },
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed calibration file: {0}")]
    Format(String),
}

/// `|y − ŷ| / e^σ`.
pub fn nonconformity(y: f64, y_hat: f64, sigma: f64) -> Result<f64, ConformalError> {
    if !(y.is_finite() && y_hat.is_finite() && sigma.is_finite()) {
        return Err(ConformalError::NonFinite("nonconformity"));
    }
    if sigma < 0.0 {
        return Err(ConformalError::NegativeSpread(sigma));
    }
    Ok((y - y_hat).abs() / sigma.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub y: f64,
    pub y_hat: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl CalibrationRecord {
    pub fn new(y: f64, y_hat: f64, sigma: f64) -> Result<Self, ConformalError> {
        Ok(Self { y, y_hat, sigma, alpha: nonconformity(y, y_hat, sigma)? })
    }

    pub fn residual(&self) -> f64 {
        (self.y - self.y_hat).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationSource {
    PerRun,
    PooledAcrossRuns,
    CrossValidation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: CalibrationSource,
    pub strategy: String,
    pub run_ids: Vec<usize>,
}

/// Sorted non-conformity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    alphas: Vec<f64>,
    pub provenance: Provenance,
}

impl Calibration {
    /// Build from raw scores (any order).
    pub fn from_alphas(mut alphas: Vec<f64>, provenance: Provenance) -> Result<Self, ConformalError> {
        if alphas.is_empty() {
            return Err(ConformalError::Empty);
        }
        if alphas.iter().any(|a| !a.is_finite()) {
            return Err(ConformalError::NonFinite("calibration"));
        }
        if let Some(&a) = alphas.iter().find(|&&a| a < 0.0) {
            return Err(ConformalError::NegativeAlpha(a));
        }
        alphas.sort_by(f64::total_cmp);
        Ok(Self { alphas, provenance })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// One `alpha` column, ascending.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "alpha")?;
        for a in &self.alphas {
            writeln!(out, "{a}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, provenance: Provenance) -> Result<Self, ConformalError> {
        let mut lines = input.lines();
        match lines.next().transpose()? {
            Some(h) if h.trim() == "alpha" => {}
            other => return Err(ConformalError::Format(format!("expected `alpha` header, found {other:?}"))),
        }
        let mut alphas = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|_| ConformalError::Format(format!("line {}: `{line}`", i + 2)))?;
            alphas.push(v);
        }
        Self::from_alphas(alphas, provenance)
    }
}

/// Sort the scores of `records` into a calibration.
pub fn calibrate(records: &[CalibrationRecord], provenance: Provenance) -> Result<Calibration, ConformalError> {
    Calibration::from_alphas(records.iter().map(|r| r.alpha).collect(), provenance)
}

/// 1-based rank `⌈(n+1)·cl⌉` clamped to `[1, n]`.
pub fn calibration_rank(n: usize, cl: f64) -> usize {
    // The epsilon keeps exact products like 10 · 0.7 from rounding up a rank.
    let k = ((n as f64 + 1.0) * cl - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Score threshold for confidence level `cl`.
pub fn alpha_at(calibration: &Calibration, cl: f64) -> Result<f64, ConformalError> {
    check_level(cl)?;
    Ok(calibration.alphas[calibration_rank(calibration.len(), cl) - 1])
}

fn check_level(cl: f64) -> Result<(), ConformalError> {
    if cl > 0.0 && cl < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::BadLevel(cl))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub center: f64,
    pub half_width: f64,
    pub cl: f64,
}

/// Relative slack, in units of machine epsilon, allowed by [`ConfidenceRegion::contains`].
pub const CONTAINMENT_ULPS: f64 = 8.0;

impl ConfidenceRegion {
    pub fn lo(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn hi(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }

    /// Closed interval membership. The half-width gets a few ulps of slack
    /// because `α · e^σ` with `α = r / e^σ` need not round back to `r`,
    /// which would otherwise drop a calibration point from its own region.
    pub fn contains(&self, y: f64) -> bool {
        (y - self.center).abs() <= self.half_width * (1.0 + CONTAINMENT_ULPS * f64::EPSILON)
    }
}

/// `ŷ ± e^σ · α_cl`.
pub fn predict_region(y_hat: f64, sigma: f64, alpha_cl: f64, cl: f64) -> Result<ConfidenceRegion, ConformalError> {
    if !(y_hat.is_finite() && sigma.is_finite() && alpha_cl.is_finite()) {
        return Err(ConformalError::NonFinite("predict_region"));
    }
    if sigma < 0.0 {
        return Err(ConformalError::NegativeSpread(sigma));
    }
    if alpha_cl < 0.0 {
        return Err(ConformalError::NegativeAlpha(alpha_cl));
    }
    Ok(ConfidenceRegion { center: y_hat, half_width: sigma.exp() * alpha_cl, cl })
}

/// Regions for every instance at one confidence level.
pub fn regions_at(
    calibration: &Calibration,
    means: &[f64],
    sigmas: &[f64],
    cl: f64,
) -> Result<Vec<ConfidenceRegion>, ConformalError> {
    if means.len() != sigmas.len() {
        return Err(ConformalError::Length { what: "means and spreads", left: means.len(), right: sigmas.len() });
    }
    let alpha = alpha_at(calibration, cl)?;
    means.iter().zip(sigmas).map(|(&m, &s)| predict_region(m, s, alpha, cl)).collect()
}

/// Records for `targets` given per-instance ensemble means and spreads.
pub fn records_from(targets: &[f64], means: &[f64], sigmas: &[f64]) -> Result<Vec<CalibrationRecord>, ConformalError> {
    if targets.len() != means.len() || means.len() != sigmas.len() {
        return Err(ConformalError::Length { what: "targets and predictions", left: targets.len(), right: means.len() });
    }
    targets
        .iter()
        .zip(means)
        .zip(sigmas)
        .map(|((&y, &m), &s)| CalibrationRecord::new(y, m, s))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    PerRun,
    Pooled,
}

/// Validation-set outputs of one repeat: observed targets plus the ensemble
/// mean and spread for each validation instance.
#[derive(Debug, Clone, Copy)]
pub struct ValidationRun<'a> {
    pub run_id: usize,
    pub targets: &'a [f64],
    pub means: &'a [f64],
    pub sigmas: &'a [f64],
}

/// Calibrations from ensemble validation predictions: one per run, or a
/// single calibration over the concatenated records of all runs.
pub fn build_ensemble_conformal(
    runs: &[ValidationRun<'_>],
    pooling: Pooling,
    strategy: &str,
) -> Result<Vec<Calibration>, ConformalError> {
    if runs.is_empty() || runs.iter().any(|r| r.targets.is_empty()) {
        return Err(ConformalError::Empty);
    }
    let per_run: Vec<Vec<CalibrationRecord>> = runs
        .iter()
        .map(|r| records_from(r.targets, r.means, r.sigmas))
        .collect::<Result<_, _>>()?;
    match pooling {
        Pooling::PerRun => runs
            .iter()
            .zip(&per_run)
            .map(|(r, recs)| {
                calibrate(
                    recs,
                    Provenance { source: CalibrationSource::PerRun, strategy: strategy.into(), run_ids: vec![r.run_id] },
                )
            })
            .collect(),
        Pooling::Pooled => {
            let all: Vec<CalibrationRecord> = per_run.concat();
            let prov = Provenance {
                source: CalibrationSource::PooledAcrossRuns,
                strategy: strategy.into(),
                run_ids: runs.iter().map(|r| r.run_id).collect(),
            };
            Ok(vec![calibrate(&all, prov)?])
        }
    }
}

/// A region tagged with the instance it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub id: String,
    pub region: ConfidenceRegion,
}

pub const REGION_HEADER: &str = "id,cl,center,half_width,lo,hi";

/// CSV with header `id,cl,center,half_width,lo,hi`.
pub fn write_regions<W: Write>(mut out: W, rows: &[RegionRow]) -> io::Result<()> {
    writeln!(out, "{REGION_HEADER}")?;
    for r in rows {
        let g = &r.region;
        writeln!(out, "{},{},{},{},{},{}", r.id, g.cl, g.center, g.half_width, g.lo(), g.hi())?;
    }
    Ok(())
}

/// Inverse of [`write_regions`]; `lo` and `hi` are checked against
/// `center ± half_width` rather than trusted.
pub fn read_regions<R: BufRead>(input: R) -> Result<Vec<RegionRow>, ConformalError> {
    let mut lines = input.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == REGION_HEADER => {}
        other => return Err(ConformalError::Format(format!("expected `{REGION_HEADER}` header, found {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| ConformalError::Format(format!("line {}: {what}", i + 2));
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let nums = cells[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| bad(&format!("`{c}` is not a number"))))
            .collect::<Result<Vec<_>, _>>()?;
        let region = ConfidenceRegion { center: nums[1], half_width: nums[2], cl: nums[0] };
        if !(region.half_width >= 0.0) {
            return Err(bad("negative half width"));
        }
        let tol = 1e-9 * (1.0 + region.center.abs() + region.half_width);
        if (region.lo() - nums[3]).abs() > tol || (region.hi() - nums[4]).abs() > tol {
            return Err(bad("lo/hi disagree with center and half width"));
        }
        rows.push(RegionRow { id: cells[0].to_string(), region });
    }
    Ok(rows)
}

/// Out-of-fold record for one training instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexedRecord {
    pub index: usize,
    pub record: CalibrationRecord,
}

/// k-fold out-of-fold records: every training instance is predicted (mean
/// and spread over trees) by a forest fit on the other folds.
pub fn cross_conformal_records(
    dataset: &Dataset,
    train_idx: &[usize],
    k: usize,
    config: &ForestConfig,
    seed: u64,
) -> Result<Vec<IndexedRecord>, ConformalError> {
    let folds = forest::kfold_partition(train_idx, k, seed::derive(seed, seed::stream::KFOLD))?;
    if folds.iter().any(Vec::is_empty) {
        return Err(ForestError::TooFewForFolds { n: train_idx.len(), k }.into());
    }
    let per_fold: Vec<Vec<IndexedRecord>> = folds
        .par_iter()
        .enumerate()
        .map(|(f, held_out)| {
            let fit_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, fold)| fold.iter().copied())
                .collect();
            let forest = fit_forest(
                &dataset.rows(&fit_idx),
                &dataset.targets_at(&fit_idx),
                config,
                seed::derive_path(seed, &[seed::stream::FOREST, f as u64]),
            )?;
            held_out
                .iter()
                .map(|&i| {
                    let p = predict_forest(&forest, dataset.row(i))?;
                    Ok(IndexedRecord { index: i, record: CalibrationRecord::new(dataset.targets()[i], p.mean, p.std)? })
                })
                .collect::<Result<Vec<_>, ConformalError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(per_fold.concat())
}

/// Cross-conformal calibration for the forest baseline.
pub fn build_rf_cross_conformal(
    dataset: &Dataset,
    train_idx: &[usize],
    k: usize,
    config: &ForestConfig,
    seed: u64,
    run_id: usize,
) -> Result<Calibration, ConformalError> {
    let recs: Vec<CalibrationRecord> = cross_conformal_records(dataset, train_idx, k, config, seed)?
        .into_iter()
        .map(|r| r.record)
        .collect();
    calibrate(
        &recs,
        Provenance { source: CalibrationSource::CrossValidation, strategy: "rf".into(), run_ids: vec![run_id] },
    )
}
