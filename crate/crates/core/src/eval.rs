//! Test-set analyses: RMSE across repeats, validity curves, interval widths,
//! ensemble spreads and error rates per target bin.
//!
//! Everything here is a pure function of predictions, regions and truths, so
//! a report can be rebuilt from the persisted CSVs alone.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::ConfidenceRegion;
use crate::mlp::{self, MlpError};
use crate::stats::{self, Summary};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("{what}: {left} vs {right} entries")]
    Length { what: &'static str, left: usize, right: usize },
    #[error("confidence level {0} was not evaluated")]
    MissingLevel(f64),
    #[error("regions for one curve point mix confidence levels")]
    MixedLevels,
    #[error("runs disagree on the confidence-level grid")]
    GridMismatch,
    #[error("bin width must be positive, got {0}")]
    BadBinWidth(f64),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Confidence levels 0.05, 0.10, ..., 0.95.
pub fn default_cl_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

pub const WIDTH_CL: f64 = 0.8;
pub const BIN_WIDTH: f64 = 1.0;
/// Published test-RMSE range on the benchmark bioactivity sets.
pub const RMSE_BAND: (f64, f64) = (0.6, 0.9);
/// Published mean interval width at 0.8 confidence on the same sets.
pub const WIDTH_BAND: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    pub per_run: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across runs.
    pub std: f64,
}

/// Per-run RMSE with its mean and spread across runs.
pub fn rmse_summary(runs: &[(&[f64], &[f64])]) -> Result<RmseSummary, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_run = runs.iter().map(|(p, t)| mlp::rmse(p, t)).collect::<Result<Vec<_>, _>>()?;
    Ok(RmseSummary { mean: stats::mean(&per_run), std: stats::population_std(&per_run), per_run })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub cl: f64,
    pub n: usize,
    pub covered: usize,
    pub coverage: f64,
}

/// Ordinary least-squares line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `y` on `x`; `None` when `x` has no spread. A
/// constant `y` is fitted exactly and reports `r_squared = 1`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (stats::mean(x), stats::mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r_squared })
}

/// Fraction of `truths` inside their region.
pub fn coverage(regions: &[ConfidenceRegion], truths: &[f64]) -> Result<CoveragePoint, EvalError> {
    if regions.is_empty() {
        return Err(EvalError::Empty);
    }
    if regions.len() != truths.len() {
        return Err(EvalError::Length { what: "regions and truths", left: regions.len(), right: truths.len() });
    }
    let cl = regions[0].cl;
    if regions.iter().any(|r| r.cl != cl) {
        return Err(EvalError::MixedLevels);
    }
    let covered = regions.iter().zip(truths).filter(|(r, &y)| r.contains(y)).count();
    Ok(CoveragePoint { cl, n: regions.len(), covered, coverage: covered as f64 / regions.len() as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityCurve {
    pub points: Vec<CoveragePoint>,
    /// Coverage regressed on confidence level; absent with fewer than two levels.
    pub fit: Option<LinearFit>,
}

impl ValidityCurve {
    pub fn at(&self, cl: f64) -> Option<&CoveragePoint> {
        self.points.iter().find(|p| same_level(p.cl, cl))
    }
}

fn same_level(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

/// Coverage at each level (one region list per level, aligned with `truths`)
/// and its least-squares fit against the level.
pub fn validity_curve(regions_by_cl: &[Vec<ConfidenceRegion>], truths: &[f64]) -> Result<ValidityCurve, EvalError> {
    if regions_by_cl.is_empty() || truths.is_empty() {
        return Err(EvalError::Empty);
    }
    let points = regions_by_cl.iter().map(|r| coverage(r, truths)).collect::<Result<Vec<_>, _>>()?;
    let cls: Vec<f64> = points.iter().map(|p| p.cl).collect();
    let cov: Vec<f64> = points.iter().map(|p| p.coverage).collect();
    Ok(ValidityCurve { fit: linear_fit(&cls, &cov), points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub samples: Vec<f64>,
    pub summary: Summary,
}

/// Full widths `2 · half_width` of the given regions.
pub fn interval_width_distribution(regions: &[ConfidenceRegion]) -> Result<Distribution, EvalError> {
    let samples: Vec<f64> = regions.iter().map(ConfidenceRegion::width).collect();
    let summary = Summary::of(&samples).ok_or(EvalError::Empty)?;
    Ok(Distribution { samples, summary })
}

/// Summary of pooled ensemble spreads.
pub fn spread_distribution(sigmas: &[f64]) -> Result<Distribution, EvalError> {
    let summary = Summary::of(sigmas).ok_or(EvalError::Empty)?;
    Ok(Distribution { samples: sigmas.to_vec(), summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningKey {
    Observed,
    Predicted,
}

impl BinningKey {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Observed => "observed",
            Self::Predicted => "predicted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub errors: usize,
    pub error_rate: f64,
}

/// Error rate within half-open bins `[k·w, (k+1)·w)` of the observed value or
/// of the region centre. Only non-empty bins are returned, in ascending order.
pub fn binned_error_rate(
    regions: &[ConfidenceRegion],
    truths: &[f64],
    bin_width: f64,
    key: BinningKey,
) -> Result<Vec<ErrorBin>, EvalError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(EvalError::BadBinWidth(bin_width));
    }
    if regions.is_empty() {
        return Err(EvalError::Empty);
    }
    if regions.len() != truths.len() {
        return Err(EvalError::Length { what: "regions and truths", left: regions.len(), right: truths.len() });
    }
    let mut tally: std::collections::BTreeMap<i64, (usize, usize)> = Default::default();
    for (r, &y) in regions.iter().zip(truths) {
        let v = match key {
            BinningKey::Observed => y,
            BinningKey::Predicted => r.center,
        };
        let entry = tally.entry((v / bin_width).floor() as i64).or_default();
        entry.0 += 1;
        entry.1 += usize::from(!r.contains(y));
    }
    Ok(tally
        .into_iter()
        .map(|(k, (count, errors))| ErrorBin {
            bin_lo: k as f64 * bin_width,
            bin_hi: (k + 1) as f64 * bin_width,
            count,
            errors,
            error_rate: errors as f64 / count as f64,
        })
        .collect())
}

/// Count-weighted mean of per-bin error rates.
pub fn global_error_rate(bins: &[ErrorBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    bins.iter().map(|b| b.count as f64 * b.error_rate).sum::<f64>() / n as f64
}

/// Test-set outputs of one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEval {
    pub run_id: usize,
    pub ids: Vec<String>,
    pub truths: Vec<f64>,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// One region list per confidence level, each aligned with `ids`.
    pub regions: Vec<Vec<ConfidenceRegion>>,
}

impl RunEval {
    fn check(&self) -> Result<(), EvalError> {
        let n = self.ids.len();
        if n == 0 {
            return Err(EvalError::Empty);
        }
        for len in [self.truths.len(), self.means.len(), self.sigmas.len()]
            .into_iter()
            .chain(self.regions.iter().map(Vec::len))
        {
            if len != n {
                return Err(EvalError::Length { what: "run outputs", left: n, right: len });
            }
        }
        Ok(())
    }

    fn levels(&self) -> Vec<f64> {
        self.regions.iter().map(|r| r.first().map_or(f64::NAN, |g| g.cl)).collect()
    }

    fn regions_at(&self, cl: f64) -> Option<&[ConfidenceRegion]> {
        self.regions.iter().find(|r| r.first().is_some_and(|g| same_level(g.cl, cl))).map(Vec::as_slice)
    }
}

/// Where a headline number sits relative to the published range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandAnnotation {
    pub metric: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub inside: bool,
}

impl BandAnnotation {
    fn new(metric: &str, value: f64, (lo, hi): (f64, f64)) -> Self {
        Self { metric: metric.into(), value, lo, hi, inside: (lo..=hi).contains(&value) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunValidity {
    pub run_id: usize,
    pub curve: ValidityCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub strategy: String,
    pub run_ids: Vec<usize>,
    pub rmse: RmseSummary,
    /// Coverage over all runs' test instances pooled.
    pub validity: ValidityCurve,
    pub per_run_validity: Vec<RunValidity>,
    pub width_cl: f64,
    pub widths: Distribution,
    pub spreads: Distribution,
    pub bin_width: f64,
    pub binned_error_observed: Vec<ErrorBin>,
    pub binned_error_predicted: Vec<ErrorBin>,
    pub annotations: Vec<BandAnnotation>,
}

/// Assemble the full report over repeats. Widths and binned errors use the
/// regions at `width_cl`, pooled over runs.
pub fn build_report(dataset: &str, strategy: &str, runs: &[RunEval], width_cl: f64, bin_width: f64) -> Result<EvalReport, EvalError> {
    let first = runs.first().ok_or(EvalError::Empty)?;
    for r in runs {
        r.check()?;
    }
    let grid = first.levels();
    if runs.iter().any(|r| {
        let l = r.levels();
        l.len() != grid.len() || l.iter().zip(&grid).any(|(a, b)| !same_level(*a, *b))
    }) {
        return Err(EvalError::GridMismatch);
    }

    let pairs: Vec<(&[f64], &[f64])> = runs.iter().map(|r| (r.means.as_slice(), r.truths.as_slice())).collect();
    let rmse = rmse_summary(&pairs)?;

    let truths: Vec<f64> = runs.iter().flat_map(|r| r.truths.iter().copied()).collect();
    let pooled_regions: Vec<Vec<ConfidenceRegion>> = (0..grid.len())
        .map(|c| runs.iter().flat_map(|r| r.regions[c].iter().copied()).collect())
        .collect();
    let validity = validity_curve(&pooled_regions, &truths)?;
    let per_run_validity = runs
        .iter()
        .map(|r| Ok(RunValidity { run_id: r.run_id, curve: validity_curve(&r.regions, &r.truths)? }))
        .collect::<Result<Vec<_>, EvalError>>()?;

    let at_width: Vec<ConfidenceRegion> = runs
        .iter()
        .map(|r| r.regions_at(width_cl).ok_or(EvalError::MissingLevel(width_cl)))
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    let widths = interval_width_distribution(&at_width)?;
    let sigmas: Vec<f64> = runs.iter().flat_map(|r| r.sigmas.iter().copied()).collect();
    let spreads = spread_distribution(&sigmas)?;
    let binned_error_observed = binned_error_rate(&at_width, &truths, bin_width, BinningKey::Observed)?;
    let binned_error_predicted = binned_error_rate(&at_width, &truths, bin_width, BinningKey::Predicted)?;

    let annotations = vec![
        BandAnnotation::new("mean_test_rmse", rmse.mean, RMSE_BAND),
        BandAnnotation::new("mean_interval_width", widths.summary.mean, WIDTH_BAND),
    ];
    Ok(EvalReport {
        dataset: dataset.into(),
        strategy: strategy.into(),
        run_ids: runs.iter().map(|r| r.run_id).collect(),
        rmse,
        validity,
        per_run_validity,
        width_cl,
        widths,
        spreads,
        bin_width,
        binned_error_observed,
        binned_error_predicted,
        annotations,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `rmse_summary.csv`: `run,test_rmse`.
    pub fn rmse_csv(&self) -> String {
        let mut s = String::from("run,test_rmse\n");
        for (id, v) in self.run_ids.iter().zip(&self.rmse.per_run) {
            let _ = writeln!(s, "{id},{v}");
        }
        s
    }

    /// `validity.csv`: `run,cl,n,covered,coverage`; pooled rows carry
    /// `run = pooled`.
    pub fn validity_csv(&self) -> String {
        let mut s = String::from("run,cl,n,covered,coverage\n");
        let mut emit = |run: &str, curve: &ValidityCurve| {
            for p in &curve.points {
                let _ = writeln!(s, "{run},{},{},{},{}", p.cl, p.n, p.covered, p.coverage);
            }
        };
        emit("pooled", &self.validity);
        for r in &self.per_run_validity {
            emit(&r.run_id.to_string(), &r.curve);
        }
        s
    }

    /// `binned_error.csv`: `key,bin_lo,bin_hi,count,errors,error_rate`.
    pub fn binned_csv(&self) -> String {
        let mut s = String::from("key,bin_lo,bin_hi,count,errors,error_rate\n");
        for (key, bins) in [
            (BinningKey::Observed, &self.binned_error_observed),
            (BinningKey::Predicted, &self.binned_error_predicted),
        ] {
            for b in bins {
                let _ = writeln!(s, "{},{},{},{},{},{}", key.as_str(), b.bin_lo, b.bin_hi, b.count, b.errors, b.error_rate);
            }
        }
        s
    }

    /// Write `report.json` and the flat CSVs into `dir`. Per-instance tables
    /// (`widths.csv`: `run,id,width`; `spreads.csv`: `run,id,sigma`) need the
    /// instance ids, so they come from `runs`.
    pub fn write_dir(&self, dir: &Path, runs: &[RunEval]) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json())?;
        fs::write(dir.join("rmse_summary.csv"), self.rmse_csv())?;
        fs::write(dir.join("validity.csv"), self.validity_csv())?;
        fs::write(dir.join("binned_error.csv"), self.binned_csv())?;
        let mut widths = String::from("run,id,width\n");
        let mut spreads = String::from("run,id,sigma\n");
        for r in runs {
            let regions = r.regions_at(self.width_cl).ok_or(EvalError::MissingLevel(self.width_cl))?;
            for ((id, g), s) in r.ids.iter().zip(regions).zip(&r.sigmas) {
                let _ = writeln!(widths, "{},{id},{}", r.run_id, g.width());
                let _ = writeln!(spreads, "{},{id},{s}", r.run_id);
            }
        }
        fs::write(dir.join("widths.csv"), widths)?;
        fs::write(dir.join("spreads.csv"), spreads)?;
        Ok(())
    }
}
