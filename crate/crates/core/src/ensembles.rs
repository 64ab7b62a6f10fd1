//! Network ensembles: independently trained members and snapshot ensembles
//! harvested along one cyclically annealed trajectory.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, SplitPlan};
use crate::mlp::{self, predict, train_single, MlpError, NetworkParams, StepDecaySchedule, StopReason, TrainConfig, TrainHistory, Trainer};
use crate::seed;
use crate::stats;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("invalid ensemble configuration: {0}")]
    Config(String),
    #[error("epoch budget of {epochs} exhausted with {accepted} of {target} snapshots accepted")]
    BudgetExhausted { accepted: usize, target: usize, epochs: usize },
    #[error("no snapshot passed acceptance in {epochs} epochs; the network never converged")]
    NoConvergence { epochs: usize },
    #[error("{attempts} training attempts yielded only {accepted} of {target} acceptable members")]
    RetryBudgetExhausted { accepted: usize, target: usize, attempts: usize },
    #[error("ensemble has no members")]
    Empty,
    #[error("member {0} has zero prediction variance")]
    ZeroVarianceMember(usize),
    #[error("correlation needs at least 2 instances, got {0}")]
    TooFewInstances(usize),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed ensemble artifact: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleKind {
    IndependentDnn,
    SnapshotV1,
    SnapshotV2,
    SnapshotV3,
}

/// Snapshot grid and cyclic step-decay schedule of a snapshot ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleVariant {
    pub snapshot_every: usize,
    pub cycle_epochs: usize,
    pub decay_step: usize,
}

impl ScheduleVariant {
    pub const V1: Self = Self { snapshot_every: 50, cycle_epochs: 50, decay_step: 10 };
    pub const V2: Self = Self { snapshot_every: 25, cycle_epochs: 250, decay_step: 10 };
    pub const V3: Self = Self { snapshot_every: 50, cycle_epochs: 250, decay_step: 50 };

    pub fn for_kind(kind: EnsembleKind) -> Option<Self> {
        match kind {
            EnsembleKind::IndependentDnn => None,
            EnsembleKind::SnapshotV1 => Some(Self::V1),
            EnsembleKind::SnapshotV2 => Some(Self::V2),
            EnsembleKind::SnapshotV3 => Some(Self::V3),
        }
    }

    pub fn schedule(&self) -> StepDecaySchedule {
        StepDecaySchedule::cyclic(self.cycle_epochs, self.decay_step)
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let ok = self.snapshot_every > 0
            && self.decay_step > 0
            && self.cycle_epochs.is_multiple_of(self.snapshot_every)
            && self.decay_step <= self.cycle_epochs;
        if ok {
            Ok(())
        } else {
            Err(EnsembleError::Config(format!("inconsistent schedule variant {self:?}")))
        }
    }

    /// Candidate snapshot epochs (completed-epoch counts) up to `epochs`.
    pub fn grid(&self, epochs: usize) -> Vec<usize> {
        (1..=epochs / self.snapshot_every).map(|k| k * self.snapshot_every).collect()
    }

    pub fn candidates_per_cycle(&self) -> usize {
        self.cycle_epochs / self.snapshot_every
    }
}

/// Snapshot acceptance thresholds, in target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRule {
    /// Members need a validation RMSE strictly below this.
    pub rmse_cutoff: f64,
    /// Mean-predictor detection: spread of validation predictions below this...
    pub degenerate_std: f64,
    /// ...and their mean within this of the training-target mean.
    pub degenerate_mean_gap: f64,
}

impl Default for AcceptanceRule {
    fn default() -> Self {
        Self { rmse_cutoff: 1.2, degenerate_std: 0.05, degenerate_mean_gap: 0.1 }
    }
}

/// True when validation predictions are (nearly) the constant training mean.
pub fn detect_degenerate(valid_preds: &[f64], train_target_mean: f64, rule: &AcceptanceRule) -> bool {
    if valid_preds.is_empty() {
        return false;
    }
    stats::population_std(valid_preds) < rule.degenerate_std
        && (stats::mean(valid_preds) - train_target_mean).abs() < rule.degenerate_mean_gap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub params: NetworkParams,
    /// Completed epochs when the parameters were taken.
    pub epoch_taken: usize,
    pub cycle_index: usize,
    pub valid_rmse: f64,
    /// Learning rate of the last epoch before the snapshot.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub kind: EnsembleKind,
    pub members: Vec<Snapshot>,
    pub split: SplitPlan,
    /// Run seed plus, for independent ensembles, each accepted member's seed.
    pub seed: u64,
    pub member_seeds: Vec<u64>,
    pub target_members: usize,
    /// Validation trajectory of a snapshot run.
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    /// Optimizer settings; `schedule`, `max_epochs` and `patience` are
    /// replaced by the variant's cyclic schedule and the epoch budget.
    pub train: TrainConfig,
    pub target_snapshots: usize,
    /// `None` resolves to [`SnapshotConfig::default_budget`].
    pub epoch_budget: Option<usize>,
    pub acceptance: AcceptanceRule,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), target_snapshots: 100, epoch_budget: None, acceptance: AcceptanceRule::default() }
    }
}

pub const BASE_EPOCH_BUDGET: usize = 3000;

impl SnapshotConfig {
    /// Twice the epochs needed to fill the grid with accepted snapshots,
    /// never below the base 3000-epoch budget.
    pub fn default_budget(&self, variant: &ScheduleVariant) -> usize {
        (2 * self.target_snapshots * variant.snapshot_every).max(BASE_EPOCH_BUDGET)
    }

    pub fn budget(&self, variant: &ScheduleVariant) -> usize {
        self.epoch_budget.unwrap_or_else(|| self.default_budget(variant))
    }
}

/// Train one network on a cyclic schedule, harvesting accepted snapshots on
/// the variant's grid until `target_snapshots` are collected.
pub fn train_snapshot_ensemble(
    dataset: &Dataset,
    split: &SplitPlan,
    config: &SnapshotConfig,
    variant: ScheduleVariant,
    seed: u64,
) -> Result<EnsembleModel, EnsembleError> {
    variant.validate()?;
    let kind = match variant {
        v if v == ScheduleVariant::V1 => EnsembleKind::SnapshotV1,
        v if v == ScheduleVariant::V2 => EnsembleKind::SnapshotV2,
        v if v == ScheduleVariant::V3 => EnsembleKind::SnapshotV3,
        other => return Err(EnsembleError::Config(format!("unpublished schedule variant {other:?}"))),
    };
    if config.target_snapshots == 0 {
        return Err(EnsembleError::Config("target_snapshots must be at least 1".into()));
    }
    let budget = config.budget(&variant);
    let train_cfg = TrainConfig { schedule: variant.schedule(), max_epochs: budget, patience: 0, ..config.train };
    let run_seed = seed::derive(seed, seed::stream::SNAPSHOT);
    let mut trainer = Trainer::new(dataset, split, train_cfg, run_seed)?;
    let train_mean = stats::mean(&dataset.targets_at(&split.train));
    let valid_y = dataset.targets_at(&split.valid);

    let mut members = Vec::new();
    let mut valid_rmse = Vec::new();
    let mut lrs = Vec::new();
    while trainer.epochs_done() < budget && members.len() < config.target_snapshots {
        let lr = trainer.run_epoch()?;
        let epoch = trainer.epochs_done();
        let preds = trainer.validation_predictions();
        let rmse = mlp::rmse(&preds, &valid_y)?;
        if !rmse.is_finite() {
            return Err(MlpError::Diverged { epoch: epoch - 1 }.into());
        }
        valid_rmse.push(rmse);
        lrs.push(lr);
        if epoch % variant.snapshot_every != 0 {
            continue;
        }
        let degenerate = detect_degenerate(&preds, train_mean, &config.acceptance);
        if rmse < config.acceptance.rmse_cutoff && !degenerate {
            members.push(Snapshot {
                params: trainer.params().clone(),
                epoch_taken: epoch,
                cycle_index: (epoch - 1) / variant.cycle_epochs,
                valid_rmse: rmse,
                lr,
            });
        } else {
            debug!("epoch {epoch}: snapshot rejected (rmse {rmse:.4}, degenerate {degenerate})");
        }
    }
    let epochs = trainer.epochs_done();
    if members.is_empty() {
        return Err(EnsembleError::NoConvergence { epochs });
    }
    if members.len() < config.target_snapshots {
        return Err(EnsembleError::BudgetExhausted { accepted: members.len(), target: config.target_snapshots, epochs });
    }
    info!("{kind:?}: {} snapshots in {epochs} epochs", members.len());
    let best_epoch = valid_rmse
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc })
        .0;
    Ok(EnsembleModel {
        kind,
        members,
        split: split.clone(),
        seed,
        member_seeds: vec![run_seed],
        target_members: config.target_snapshots,
        history: Some(TrainHistory { valid_rmse, lr: lrs, best_epoch, stop_reason: StopReason::External }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndependentConfig {
    pub train: TrainConfig,
    pub members: usize,
    pub rmse_cutoff: f64,
    /// Total attempts allowed are `retry_factor × members`.
    pub retry_factor: usize,
}

impl Default for IndependentConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), members: 100, rmse_cutoff: 1.2, retry_factor: 3 }
    }
}

/// Seed of independent-ensemble attempt `attempt`.
pub fn member_seed(seed: u64, attempt: usize) -> u64 {
    seed::derive_path(seed, &[seed::stream::MEMBER, attempt as u64])
}

/// Train `config.members` networks from distinct seeds with early stopping.
/// Members whose best validation RMSE misses the cutoff, or whose training
/// diverges, are replaced by fresh attempts.
pub fn train_independent_ensemble(
    dataset: &Dataset,
    split: &SplitPlan,
    config: &IndependentConfig,
    seed: u64,
) -> Result<EnsembleModel, EnsembleError> {
    config.train.validate()?;
    let members = harvest_members(config, seed, |s| train_single(dataset, split, &config.train, s))?;
    let (member_seeds, members) = members.into_iter().unzip();
    Ok(EnsembleModel {
        kind: EnsembleKind::IndependentDnn,
        members,
        split: split.clone(),
        seed,
        member_seeds,
        target_members: config.members,
        history: None,
    })
}

/// Attempt loop behind [`train_independent_ensemble`]; attempts run in
/// parallel waves and are accepted in attempt order.
pub fn harvest_members<F>(config: &IndependentConfig, seed: u64, train: F) -> Result<Vec<(u64, Snapshot)>, EnsembleError>
where
    F: Fn(u64) -> Result<(NetworkParams, TrainHistory), MlpError> + Sync,
{
    if config.members == 0 {
        return Err(EnsembleError::Config("ensemble needs at least one member".into()));
    }
    let max_attempts = config.retry_factor.max(1) * config.members;
    let mut accepted = Vec::with_capacity(config.members);
    let mut attempts = 0;
    while accepted.len() < config.members {
        if attempts >= max_attempts {
            return Err(EnsembleError::RetryBudgetExhausted {
                accepted: accepted.len(),
                target: config.members,
                attempts,
            });
        }
        let wave: Vec<usize> = (attempts..(attempts + config.members - accepted.len()).min(max_attempts)).collect();
        let results: Vec<(u64, Result<_, MlpError>)> = wave
            .par_iter()
            .map(|&a| {
                let s = member_seed(seed, a);
                (s, train(s))
            })
            .collect();
        attempts += wave.len();
        for (s, r) in results {
            match r {
                Ok((params, hist)) if hist.best_rmse() < config.rmse_cutoff => {
                    let lr = hist.lr[hist.best_epoch];
                    accepted.push((
                        s,
                        Snapshot { params, epoch_taken: hist.best_epoch + 1, cycle_index: 0, valid_rmse: hist.best_rmse(), lr },
                    ));
                }
                Ok((_, hist)) => debug!("member seed {s}: rejected with rmse {:.4}", hist.best_rmse()),
                Err(MlpError::Diverged { epoch }) => debug!("member seed {s}: diverged at epoch {epoch}"),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(accepted)
}

/// Per-instance ensemble outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub mean: Vec<f64>,
    /// Population standard deviation across members.
    pub sigma: Vec<f64>,
    /// `members[k][j]`: member `k` on instance `j`.
    pub members: Vec<Vec<f64>>,
}

impl EnsemblePrediction {
    /// Aggregate a member-by-instance matrix.
    pub fn from_members(members: Vec<Vec<f64>>) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::Empty);
        }
        let m = members[0].len();
        if members.iter().any(|r| r.len() != m) {
            return Err(EnsembleError::Format("ragged member matrix".into()));
        }
        let mut mean = Vec::with_capacity(m);
        let mut sigma = Vec::with_capacity(m);
        let mut column = Vec::with_capacity(members.len());
        for j in 0..m {
            column.clear();
            column.extend(members.iter().map(|r| r[j]));
            mean.push(stats::mean(&column));
            sigma.push(stats::population_std(&column));
        }
        Ok(Self { mean, sigma, members })
    }
}

/// Inference-mode predictions of every member on `rows`.
pub fn predict_ensemble(model: &EnsembleModel, rows: &[&[f64]]) -> Result<EnsemblePrediction, EnsembleError> {
    if model.members.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let members = model
        .members
        .par_iter()
        .map(|s| predict(&s.params, rows))
        .collect::<Result<Vec<_>, _>>()?;
    EnsemblePrediction::from_members(members)
}

/// Pearson correlation between every pair of members' prediction vectors.
pub fn pairwise_member_correlation(members: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EnsembleError> {
    let n_inst = members.first().map_or(0, Vec::len);
    if n_inst < 2 {
        return Err(EnsembleError::TooFewInstances(n_inst));
    }
    if let Some(k) = members.iter().position(|m| stats::population_std(m) == 0.0) {
        return Err(EnsembleError::ZeroVarianceMember(k));
    }
    let k = members.len();
    let mut out = vec![vec![1.0; k]; k];
    for a in 0..k {
        for b in a + 1..k {
            let r = stats::pearson(&members[a], &members[b]).ok_or(EnsembleError::ZeroVarianceMember(a))?;
            out[a][b] = r;
            out[b][a] = r;
        }
    }
    Ok(out)
}

/// CSV with header `id,m0,...,m{k-1}`, one row per instance.
pub fn write_member_matrix<W: Write>(mut out: W, ids: &[String], members: &[Vec<f64>]) -> io::Result<()> {
    let mut header = String::from("id");
    for k in 0..members.len() {
        header.push_str(&format!(",m{k}"));
    }
    writeln!(out, "{header}")?;
    for (j, id) in ids.iter().enumerate() {
        let mut line = id.clone();
        for m in members {
            line.push_str(&format!(",{}", m[j]));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Inverse of [`write_member_matrix`]: `(ids, members)`.
pub fn read_member_matrix<R: BufRead>(input: R) -> Result<(Vec<String>, Vec<Vec<f64>>), EnsembleError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.ok_or_else(|| EnsembleError::Format("empty member matrix".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"id") || cols.iter().skip(1).enumerate().any(|(k, c)| *c != format!("m{k}")) {
        return Err(EnsembleError::Format(format!("bad member matrix header `{header}`")));
    }
    let k = cols.len() - 1;
    let mut ids = Vec::new();
    let mut members = vec![Vec::new(); k];
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != k + 1 {
            return Err(EnsembleError::Format(format!("line {}: expected {} fields", i + 2, k + 1)));
        }
        ids.push(cells[0].to_string());
        for (m, c) in members.iter_mut().zip(&cells[1..]) {
            m.push(c.parse().map_err(|_| EnsembleError::Format(format!("line {}: `{c}`", i + 2)))?);
        }
    }
    Ok((ids, members))
}

#[derive(Debug, Serialize, Deserialize)]
struct MemberEntry {
    file: String,
    epoch_taken: usize,
    cycle_index: usize,
    valid_rmse: f64,
    lr: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: EnsembleKind,
    seed: u64,
    member_seeds: Vec<u64>,
    target_members: usize,
    split: SplitPlan,
    members: Vec<MemberEntry>,
    history: Option<TrainHistory>,
}

impl EnsembleModel {
    /// Write `manifest.json` plus one parameter file per member into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EnsembleError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.members.len());
        for (k, m) in self.members.iter().enumerate() {
            let file = format!("member_{k:03}.json");
            fs::write(dir.join(&file), m.params.to_json())?;
            entries.push(MemberEntry {
                file,
                epoch_taken: m.epoch_taken,
                cycle_index: m.cycle_index,
                valid_rmse: m.valid_rmse,
                lr: m.lr,
            });
        }
        let manifest = Manifest {
            kind: self.kind,
            seed: self.seed,
            member_seeds: self.member_seeds.clone(),
            target_members: self.target_members,
            split: self.split.clone(),
            members: entries,
            history: self.history.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| EnsembleError::Format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EnsembleError> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| EnsembleError::Format(e.to_string()))?;
        let members = manifest
            .members
            .into_iter()
            .map(|e| {
                let params = NetworkParams::from_json(&fs::read_to_string(dir.join(&e.file))?)?;
                Ok(Snapshot { params, epoch_taken: e.epoch_taken, cycle_index: e.cycle_index, valid_rmse: e.valid_rmse, lr: e.lr })
            })
            .collect::<Result<Vec<_>, EnsembleError>>()?;
        Ok(Self {
            kind: manifest.kind,
            members,
            split: manifest.split,
            seed: manifest.seed,
            member_seeds: manifest.member_seeds,
            target_members: manifest.target_members,
            history: manifest.history,
        })
    }
}
