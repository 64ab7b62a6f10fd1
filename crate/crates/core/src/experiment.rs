//! Experiment pipeline: split, train, calibrate, predict, evaluate, report.
//!
//! Each stage reads the previous stage's files back from disk, so any stage
//! can be re-run on its own. Layout under the output root:
//!
//! ```text
//! <root>/<dataset>/splits/seed-<base_seed>/repeat_XX.json
//! <root>/<dataset>/<strategy>/config.toml
//! <root>/<dataset>/<strategy>/manifest.json
//! <root>/<dataset>/<strategy>/calibration/pooled.{csv,json}
//! <root>/<dataset>/<strategy>/repeat_XX/{model/,forest.json,calibration_inputs.csv,
//!     test_predictions.csv,test_members.csv,calibration.{csv,json},regions.csv}
//! <root>/<dataset>/<strategy>/report/
//! ```

use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{
    self, alpha_at, calibrate, cross_conformal_records, read_regions, regions_at, write_regions, Calibration,
    CalibrationRecord, CalibrationSource, ConformalError, Pooling, Provenance, RegionRow,
};
use crate::dataset::{load_dataset, split_indices, Dataset, DatasetError, RepeatSpec, SplitFractions, SplitPlan};
use crate::ensembles::{
    self, predict_ensemble, train_independent_ensemble, train_snapshot_ensemble, write_member_matrix, AcceptanceRule,
    EnsembleModel, IndependentConfig, ScheduleVariant, SnapshotConfig,
};
use crate::eval::{self, build_report, EvalReport, RunEval};
use crate::forest::{fit_forest, predict_forest, Forest, ForestConfig};
use crate::mlp::TrainConfig;
use crate::seed;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SNAPCONF_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "snapconf-out";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` needs {} (run the earlier stage first)", path.display())]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("dataset {}: {source}", path.display())]
    Data { path: PathBuf, source: DatasetError },
    #[error("repeat {repeat}: training failed: {source}")]
    Training { repeat: usize, source: Box<dyn std::error::Error + Send + Sync> },
    #[error("{}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl ExperimentError {
    /// Process exit status: 1 configuration or missing upstream stage, 2 data
    /// or artifact problems, 3 training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::MissingArtifact { .. } => 1,
            Self::Training { .. } => 3,
            _ => 2,
        }
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Read an upstream artifact, reporting absence as a stage dependency error.
fn read_upstream(stage: &'static str, path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(ExperimentError::MissingArtifact { stage, path: path.to_path_buf() });
    }
    fs::read_to_string(path).map_err(io_err(path))
}

fn artifact_err(path: &Path, message: impl fmt::Display) -> ExperimentError {
    ExperimentError::Artifact { path: path.to_path_buf(), message: message.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Rf,
    DnnEnsemble,
    SnapshotV1,
    SnapshotV2,
    SnapshotV3,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Self::Rf, Self::DnnEnsemble, Self::SnapshotV1, Self::SnapshotV2, Self::SnapshotV3];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rf => "rf",
            Self::DnnEnsemble => "dnn-ensemble",
            Self::SnapshotV1 => "snapshot-v1",
            Self::SnapshotV2 => "snapshot-v2",
            Self::SnapshotV3 => "snapshot-v3",
        }
    }

    fn variant(self) -> Option<ScheduleVariant> {
        match self {
            Self::SnapshotV1 => Some(ScheduleVariant::V1),
            Self::SnapshotV2 => Some(ScheduleVariant::V2),
            Self::SnapshotV3 => Some(ScheduleVariant::V3),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
            ExperimentError::Config(format!("unknown strategy `{s}` (expected one of {})", known.join(", ")))
        })
    }
}

/// Optional replacements for the network training defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub lr0: Option<f64>,
    pub momentum: Option<f64>,
    pub dropout_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_fraction: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0.unwrap_or(base.lr0),
            momentum: self.momentum.unwrap_or(base.momentum),
            dropout_rate: self.dropout_rate.unwrap_or(base.dropout_rate),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            patience: self.patience.unwrap_or(base.patience),
            batch_fraction: self.batch_fraction.unwrap_or(base.batch_fraction),
            schedule: base.schedule,
        }
    }
}

/// Declarative experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub strategy: Option<Strategy>,
    pub n_repeats: usize,
    pub base_seed: u64,
    /// Confidence levels; must include the 0.8 level used for widths and bins.
    pub cls: Vec<f64>,
    pub rmse_cutoff: f64,
    /// Snapshot epoch budget; unset means twice the epochs of a full grid.
    pub epoch_budget: Option<usize>,
    /// Independent networks, or snapshots to collect.
    pub members: usize,
    pub pooling: Pooling,
    pub n_trees: usize,
    pub cv_folds: usize,
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub train: TrainOverrides,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            strategy: None,
            n_repeats: 20,
            base_seed: 0,
            cls: eval::default_cl_grid(),
            rmse_cutoff: 1.2,
            epoch_budget: None,
            members: 100,
            pooling: Pooling::Pooled,
            n_trees: 100,
            cv_folds: 10,
            output_dir: None,
            workers: 0,
            train: TrainOverrides::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.dataset.as_os_str().is_empty() {
            return bad("no dataset given".into());
        }
        if self.n_repeats == 0 {
            return bad("n_repeats must be at least 1".into());
        }
        if !(self.rmse_cutoff > 0.0) {
            return bad(format!("rmse_cutoff must be positive, got {}", self.rmse_cutoff));
        }
        if self.members == 0 || self.n_trees == 0 {
            return bad("members and n_trees must be at least 1".into());
        }
        if self.cv_folds < 2 {
            return bad(format!("cv_folds must be at least 2, got {}", self.cv_folds));
        }
        if self.epoch_budget == Some(0) {
            return bad("epoch_budget must be positive".into());
        }
        if self.cls.is_empty() || self.cls.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return bad(format!("confidence levels must lie in (0, 1): {:?}", self.cls));
        }
        if self.cls.windows(2).any(|w| w[0] >= w[1]) {
            return bad("confidence levels must be strictly increasing".into());
        }
        if !self.cls.iter().any(|&c| (c - eval::WIDTH_CL).abs() < 1e-9) {
            return bad(format!("confidence levels must include {}", eval::WIDTH_CL));
        }
        self.train.apply(TrainConfig::default()).validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }

    pub fn repeats(&self) -> RepeatSpec {
        RepeatSpec::new(self.n_repeats, self.base_seed)
    }
}

/// Per-instance point predictions and spreads, with observed values.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub ids: Vec<String>,
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PredictionTable {
    pub const HEADER: &'static str = "id,y,y_hat,sigma";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for i in 0..self.ids.len() {
            let _ = writeln!(s, "{},{},{},{}", self.ids[i], self.y[i], self.y_hat[i], self.sigma[i]);
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::HEADER) {
            return Err(artifact_err(path, format!("expected header `{}`", Self::HEADER)));
        }
        let mut t = Self { ids: vec![], y: vec![], y_hat: vec![], sigma: vec![] };
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.trim().split(',').collect();
            if cells.len() != 4 {
                return Err(artifact_err(path, format!("line {}: expected 4 fields", i + 2)));
            }
            let num = |c: &str| c.parse::<f64>().map_err(|_| artifact_err(path, format!("line {}: `{c}`", i + 2)));
            t.ids.push(cells[0].to_string());
            t.y.push(num(cells[1])?);
            t.y_hat.push(num(cells[2])?);
            t.sigma.push(num(cells[3])?);
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
    Failed,
}

/// `manifest.json` of a strategy directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub dataset: String,
    pub strategy: Strategy,
    pub base_seed: u64,
    pub n_repeats: usize,
    pub repeat_seeds: Vec<u64>,
    pub stages_completed: Vec<String>,
    pub error: Option<String>,
}

/// Calibration sidecar: provenance plus the thresholds at each level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSidecar {
    pub provenance: Provenance,
    pub n_records: usize,
    pub thresholds: Vec<LevelThreshold>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelThreshold {
    pub cl: f64,
    pub alpha: f64,
}

pub const STAGES: [&str; 6] = ["split", "train", "calibrate", "predict", "evaluate", "report"];

/// A configured experiment over a loaded dataset.
pub struct Experiment {
    config: ExperimentConfig,
    dataset: Dataset,
    name: String,
    root: PathBuf,
    pool: rayon::ThreadPool,
}

impl Experiment {
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = load_dataset(&config.dataset)
            .map_err(|source| ExperimentError::Data { path: config.dataset.clone(), source })?;
        let name = config
            .dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let root = config.output_root().join(&name);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))?;
        Ok(Self { config, dataset, name, root, pool })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn dataset_dir(&self) -> &Path {
        &self.root
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.config.strategy.ok_or_else(|| ExperimentError::Config("no strategy given".into()))
    }

    pub fn split_path(&self, repeat: usize) -> PathBuf {
        self.root.join("splits").join(format!("seed-{}", self.config.base_seed)).join(format!("repeat_{repeat:02}.json"))
    }

    pub fn strategy_dir(&self) -> Result<PathBuf> {
        Ok(self.root.join(self.strategy()?.as_str()))
    }

    pub fn repeat_dir(&self, repeat: usize) -> Result<PathBuf> {
        Ok(self.strategy_dir()?.join(format!("repeat_{repeat:02}")))
    }

    pub fn report_dir(&self) -> Result<PathBuf> {
        Ok(self.strategy_dir()?.join("report"))
    }

    fn pooled_calibration_path(&self) -> Result<PathBuf> {
        Ok(self.strategy_dir()?.join("calibration").join("pooled.csv"))
    }

    /// Calibration file used for `repeat` under the configured pooling.
    pub fn calibration_path(&self, repeat: usize) -> Result<PathBuf> {
        match self.config.pooling {
            Pooling::Pooled => self.pooled_calibration_path(),
            Pooling::PerRun => Ok(self.repeat_dir(repeat)?.join("calibration.csv")),
        }
    }

    fn repeat_ids(&self) -> std::ops::Range<usize> {
        0..self.config.n_repeats
    }

    /// Run `f` for every repeat on the worker pool; the first failing repeat
    /// (in repeat order) determines the error.
    fn for_each_repeat<T: Send>(&self, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        let results: Vec<Result<T>> = self.pool.install(|| self.repeat_ids().into_par_iter().map(&f).collect());
        results.into_iter().collect()
    }

    fn manifest_path(&self) -> Result<PathBuf> {
        Ok(self.strategy_dir()?.join("manifest.json"))
    }

    pub fn manifest(&self) -> Result<Option<RunManifest>> {
        let path = self.manifest_path()?;
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map(Some).map_err(|e| artifact_err(&path, e))
    }

    fn update_manifest(&self, f: impl FnOnce(&mut RunManifest)) -> Result<()> {
        let strategy = self.strategy()?;
        let mut m = self.manifest()?.unwrap_or_else(|| RunManifest {
            status: RunStatus::Incomplete,
            dataset: self.name.clone(),
            strategy,
            base_seed: self.config.base_seed,
            n_repeats: self.config.n_repeats,
            repeat_seeds: self.config.repeats().seeds(),
            stages_completed: vec![],
            error: None,
        });
        f(&mut m);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        write_file(&self.manifest_path()?, text)?;
        write_file(&self.strategy_dir()?.join("config.toml"), self.config.to_toml())
    }

    fn stage_done(&self, stage: &str) -> Result<()> {
        if self.config.strategy.is_none() {
            return Ok(());
        }
        self.update_manifest(|m| {
            if !m.stages_completed.iter().any(|s| s == stage) {
                m.stages_completed.push(stage.to_string());
            }
            m.error = None;
            m.status = if STAGES.iter().all(|s| m.stages_completed.iter().any(|c| c == s)) {
                RunStatus::Complete
            } else {
                RunStatus::Incomplete
            };
        })
    }

    /// Write one split per repeat. Splits depend only on the dataset and the
    /// base seed, so every strategy evaluated with that seed shares them.
    pub fn split(&self) -> Result<Vec<SplitPlan>> {
        let repeats = self.config.repeats();
        let plans = self
            .repeat_ids()
            .map(|r| {
                let plan = split_indices(self.dataset.len(), repeats.split_seed(r), SplitFractions::default())
                    .map_err(|source| ExperimentError::Data { path: self.config.dataset.clone(), source })?;
                write_file(&self.split_path(r), plan.to_json())?;
                Ok(plan)
            })
            .collect::<Result<Vec<_>>>()?;
        info!("{}: wrote {} splits", self.name, plans.len());
        self.stage_done("split")?;
        Ok(plans)
    }

    fn load_split(&self, stage: &'static str, repeat: usize) -> Result<SplitPlan> {
        let path = self.split_path(repeat);
        let plan = SplitPlan::from_json(&read_upstream(stage, &path)?).map_err(|e| artifact_err(&path, e))?;
        let n = self.dataset.len();
        if plan.n() != n || plan.train.iter().chain(&plan.valid).chain(&plan.test).any(|&i| i >= n) {
            return Err(artifact_err(&path, format!("split does not partition the {n} dataset rows")));
        }
        Ok(plan)
    }

    /// Train the configured strategy on every repeat and persist the model,
    /// calibration inputs and test-set predictions.
    pub fn train(&self) -> Result<()> {
        let strategy = self.strategy()?;
        let splits = self.repeat_ids().map(|r| self.load_split("train", r)).collect::<Result<Vec<_>>>()?;
        self.for_each_repeat(|r| {
            info!("{}/{strategy}: training repeat {r}", self.name);
            self.train_repeat(strategy, r, &splits[r])
        })?;
        self.stage_done("train")
    }

    fn train_repeat(&self, strategy: Strategy, repeat: usize, split: &SplitPlan) -> Result<()> {
        let dir = self.repeat_dir(repeat)?;
        let seed = self.config.repeats().seed(repeat);
        let ds = &self.dataset;
        let training = |source: Box<dyn std::error::Error + Send + Sync>| ExperimentError::Training { repeat, source };

        let (calib, test, members) = match strategy {
            Strategy::Rf => {
                let fc = ForestConfig { n_trees: self.config.n_trees, ..ForestConfig::default() };
                let mut recs = cross_conformal_records(ds, &split.train, self.config.cv_folds, &fc, seed)
                    .map_err(|e| training(e.into()))?;
                recs.sort_by_key(|r| r.index);
                let calib = PredictionTable {
                    ids: recs.iter().map(|r| ds.ids()[r.index].clone()).collect(),
                    y: recs.iter().map(|r| r.record.y).collect(),
                    y_hat: recs.iter().map(|r| r.record.y_hat).collect(),
                    sigma: recs.iter().map(|r| r.record.sigma).collect(),
                };
                let forest = fit_forest(
                    &ds.rows(&split.train),
                    &ds.targets_at(&split.train),
                    &fc,
                    seed::derive(seed, seed::stream::FOREST),
                )
                .map_err(|e| training(e.into()))?;
                write_file(&dir.join("forest.json"), forest.to_json())?;
                let (test, members) = forest_predictions(&forest, ds, &split.test)?;
                (calib, test, members)
            }
            _ => {
                let model = self.train_ensemble(strategy, split, seed).map_err(|e| training(e.into()))?;
                let model_dir = dir.join("model");
                model.save(&model_dir).map_err(|e| training(e.into()))?;
                let (calib, _) = ensemble_predictions(&model, ds, &split.valid).map_err(|e| training(e.into()))?;
                let (test, members) = ensemble_predictions(&model, ds, &split.test).map_err(|e| training(e.into()))?;
                (calib, test, members)
            }
        };
        write_file(&dir.join("calibration_inputs.csv"), calib.to_csv())?;
        write_file(&dir.join("test_predictions.csv"), test.to_csv())?;
        let mut buf = Vec::new();
        write_member_matrix(&mut buf, &test.ids, &members).expect("in-memory write");
        write_file(&dir.join("test_members.csv"), buf)
    }

    fn train_ensemble(&self, strategy: Strategy, split: &SplitPlan, seed: u64) -> Result<EnsembleModel, ensembles::EnsembleError> {
        let train = self.config.train.apply(TrainConfig::default());
        match strategy.variant() {
            Some(variant) => {
                let cfg = SnapshotConfig {
                    train,
                    target_snapshots: self.config.members,
                    epoch_budget: self.config.epoch_budget,
                    acceptance: AcceptanceRule { rmse_cutoff: self.config.rmse_cutoff, ..AcceptanceRule::default() },
                };
                train_snapshot_ensemble(&self.dataset, split, &cfg, variant, seed)
            }
            None => {
                let cfg = IndependentConfig {
                    train,
                    members: self.config.members,
                    rmse_cutoff: self.config.rmse_cutoff,
                    ..IndependentConfig::default()
                };
                train_independent_ensemble(&self.dataset, split, &cfg, seed)
            }
        }
    }

    fn load_calibration_inputs(&self, repeat: usize) -> Result<Vec<CalibrationRecord>> {
        let path = self.repeat_dir(repeat)?.join("calibration_inputs.csv");
        let t = PredictionTable::parse(&read_upstream("calibrate", &path)?, &path)?;
        Ok(conformal::records_from(&t.y, &t.y_hat, &t.sigma)?)
    }

    /// Sort non-conformity scores into one pooled calibration or one per
    /// repeat, each with a JSON provenance sidecar.
    pub fn calibrate(&self) -> Result<()> {
        let strategy = self.strategy()?;
        let per_run = self.repeat_ids().map(|r| self.load_calibration_inputs(r)).collect::<Result<Vec<_>>>()?;
        let pooled_source = if strategy == Strategy::Rf {
            CalibrationSource::CrossValidation
        } else {
            CalibrationSource::PooledAcrossRuns
        };
        let per_run_source = if strategy == Strategy::Rf {
            CalibrationSource::CrossValidation
        } else {
            CalibrationSource::PerRun
        };
        match self.config.pooling {
            Pooling::Pooled => {
                let prov =
                    Provenance { source: pooled_source, strategy: strategy.to_string(), run_ids: self.repeat_ids().collect() };
                let cal = calibrate(&per_run.concat(), prov)?;
                self.write_calibration(&self.pooled_calibration_path()?, &cal)?;
            }
            Pooling::PerRun => {
                for (r, recs) in per_run.iter().enumerate() {
                    let prov = Provenance { source: per_run_source, strategy: strategy.to_string(), run_ids: vec![r] };
                    let cal = calibrate(recs, prov)?;
                    self.write_calibration(&self.calibration_path(r)?, &cal)?;
                }
            }
        }
        self.stage_done("calibrate")
    }

    fn write_calibration(&self, csv_path: &Path, cal: &Calibration) -> Result<()> {
        let mut buf = Vec::new();
        cal.write_csv(&mut buf).expect("in-memory write");
        write_file(csv_path, buf)?;
        let thresholds = self
            .config
            .cls
            .iter()
            .map(|&cl| Ok(LevelThreshold { cl, alpha: alpha_at(cal, cl)? }))
            .collect::<Result<Vec<_>>>()?;
        let sidecar = CalibrationSidecar { provenance: cal.provenance.clone(), n_records: cal.len(), thresholds };
        write_file(&csv_path.with_extension("json"), serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"))
    }

    pub fn load_calibration(&self, stage: &'static str, repeat: usize) -> Result<Calibration> {
        let csv_path = self.calibration_path(repeat)?;
        let json_path = csv_path.with_extension("json");
        let sidecar: CalibrationSidecar =
            serde_json::from_str(&read_upstream(stage, &json_path)?).map_err(|e| artifact_err(&json_path, e))?;
        let text = read_upstream(stage, &csv_path)?;
        Calibration::read_csv(text.as_bytes(), sidecar.provenance).map_err(|e| artifact_err(&csv_path, e))
    }

    fn load_test_predictions(&self, stage: &'static str, repeat: usize) -> Result<PredictionTable> {
        let path = self.repeat_dir(repeat)?.join("test_predictions.csv");
        PredictionTable::parse(&read_upstream(stage, &path)?, &path)
    }

    /// Conformal regions for every test instance at every configured level.
    pub fn predict(&self) -> Result<()> {
        for r in self.repeat_ids() {
            let cal = self.load_calibration("predict", r)?;
            let test = self.load_test_predictions("predict", r)?;
            let mut rows = Vec::with_capacity(test.ids.len() * self.config.cls.len());
            for &cl in &self.config.cls {
                let regions = regions_at(&cal, &test.y_hat, &test.sigma, cl)?;
                rows.extend(test.ids.iter().zip(regions).map(|(id, region)| RegionRow { id: id.clone(), region }));
            }
            let mut buf = Vec::new();
            write_regions(&mut buf, &rows).expect("in-memory write");
            write_file(&self.repeat_dir(r)?.join("regions.csv"), buf)?;
        }
        self.stage_done("predict")
    }

    fn run_eval(&self, repeat: usize) -> Result<RunEval> {
        let test = self.load_test_predictions("evaluate", repeat)?;
        let path = self.repeat_dir(repeat)?.join("regions.csv");
        let rows = read_regions(read_upstream("evaluate", &path)?.as_bytes()).map_err(|e| artifact_err(&path, e))?;
        let truths = test
            .ids
            .iter()
            .map(|id| {
                self.dataset
                    .index_of(id)
                    .map(|i| self.dataset.targets()[i])
                    .ok_or_else(|| artifact_err(&path, format!("id `{id}` is not in the dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut regions = Vec::with_capacity(self.config.cls.len());
        for &cl in &self.config.cls {
            let at: Vec<&RegionRow> = rows.iter().filter(|row| (row.region.cl - cl).abs() < 1e-9).collect();
            if at.len() != test.ids.len() || at.iter().zip(&test.ids).any(|(row, id)| &row.id != id) {
                return Err(artifact_err(&path, format!("regions at cl {cl} do not match the test predictions")));
            }
            regions.push(at.iter().map(|row| row.region).collect());
        }
        Ok(RunEval { run_id: repeat, ids: test.ids, truths, means: test.y_hat, sigmas: test.sigma, regions })
    }

    /// Build the report from persisted regions and predictions.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let strategy = self.strategy()?;
        let runs = self.repeat_ids().map(|r| self.run_eval(r)).collect::<Result<Vec<_>>>()?;
        let report = build_report(&self.name, strategy.as_str(), &runs, eval::WIDTH_CL, eval::BIN_WIDTH)?;
        let dir = self.report_dir()?;
        report.write_dir(&dir, &runs).map_err(|e| match e {
            eval::EvalError::Io(source) => ExperimentError::Io { path: dir.clone(), source },
            other => other.into(),
        })?;
        self.stage_done("evaluate")?;
        Ok(report)
    }

    /// Plain-text summary of `report/report.json`, also written beside it.
    pub fn report(&self) -> Result<String> {
        let path = self.report_dir()?.join("report.json");
        let report: EvalReport =
            serde_json::from_str(&read_upstream("report", &path)?).map_err(|e| artifact_err(&path, e))?;
        let text = render_summary(&report);
        write_file(&self.report_dir()?.join("summary.txt"), &text)?;
        self.stage_done("report")?;
        Ok(text)
    }

    /// Every stage in order; the manifest ends `complete` or `failed`.
    pub fn run(&self) -> Result<EvalReport> {
        self.strategy()?;
        self.update_manifest(|m| {
            m.status = RunStatus::Incomplete;
            m.stages_completed.clear();
            m.error = None;
        })?;
        let outcome: Result<EvalReport> = (|| {
            self.split()?;
            self.train()?;
            self.calibrate()?;
            self.predict()?;
            let report = self.evaluate()?;
            self.report()?;
            Ok(report)
        })();
        if let Err(e) = &outcome {
            let message = e.to_string();
            self.update_manifest(|m| {
                m.status = RunStatus::Failed;
                m.error = Some(message);
            })?;
        }
        outcome
    }
}

/// Open the dataset and run every stage.
pub fn run_experiment(config: ExperimentConfig) -> Result<EvalReport> {
    Experiment::open(config)?.run()
}

fn ensemble_predictions(
    model: &EnsembleModel,
    ds: &Dataset,
    idx: &[usize],
) -> Result<(PredictionTable, Vec<Vec<f64>>), ensembles::EnsembleError> {
    let p = predict_ensemble(model, &ds.rows(idx))?;
    let table = PredictionTable { ids: ds.ids_at(idx), y: ds.targets_at(idx), y_hat: p.mean, sigma: p.sigma };
    Ok((table, p.members))
}

fn forest_predictions(forest: &Forest, ds: &Dataset, idx: &[usize]) -> Result<(PredictionTable, Vec<Vec<f64>>)> {
    let mut members = vec![Vec::with_capacity(idx.len()); forest.trees.len()];
    let (mut y_hat, mut sigma) = (Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
    for &i in idx {
        let p = predict_forest(forest, ds.row(i)).map_err(|e| ExperimentError::Conformal(e.into()))?;
        for (m, v) in members.iter_mut().zip(&p.per_tree) {
            m.push(*v);
        }
        y_hat.push(p.mean);
        sigma.push(p.std);
    }
    Ok((PredictionTable { ids: ds.ids_at(idx), y: ds.targets_at(idx), y_hat, sigma }, members))
}

pub fn render_summary(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "dataset {}, strategy {}, {} repeats", r.dataset, r.strategy, r.run_ids.len());
    let _ = writeln!(s, "test RMSE {:.4} ± {:.4}", r.rmse.mean, r.rmse.std);
    match &r.validity.fit {
        Some(f) => {
            let _ = writeln!(
                s,
                "coverage vs confidence: slope {:.4}, intercept {:.4}, R² {:.4}",
                f.slope, f.intercept, f.r_squared
            );
        }
        None => s.push_str("coverage vs confidence: single level, no fit\n"),
    }
    for p in &r.validity.points {
        let _ = writeln!(s, "  cl {:.2}: coverage {:.4} ({}/{})", p.cl, p.coverage, p.covered, p.n);
    }
    let w = &r.widths.summary;
    let _ = writeln!(
        s,
        "interval width at cl {}: mean {:.4}, median {:.4}, q1 {:.4}, q3 {:.4}, max {:.4}",
        r.width_cl, w.mean, w.median, w.q1, w.q3, w.max
    );
    let _ = writeln!(s, "ensemble spread: mean {:.4}, median {:.4}", r.spreads.summary.mean, r.spreads.summary.median);
    for a in &r.annotations {
        let _ = writeln!(
            s,
            "note: {} = {:.4} is {} the {}-{} range published for the benchmark bioactivity sets",
            a.metric,
            a.value,
            if a.inside { "inside" } else { "outside" },
            a.lo,
            a.hi
        );
    }
    s
}
