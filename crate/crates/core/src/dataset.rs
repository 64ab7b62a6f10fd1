//! Featurized datasets, seeded train/validation/test splits, mini-batches and
//! repeat seed bookkeeping.
//!
//! The on-disk format is a CSV with header `id,y,b0,b1,...,b{d-1}` where `y`
//! is the decimal activity value and every `b*` cell is `0` or `1`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed csv: {message}")]
    Csv { line: u64, message: String },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow { line: u64, expected: usize, found: usize },
    #[error("line {line}: feature column `{column}` holds `{value}`, expected 0 or 1")]
    NonBinaryFeature { line: u64, column: String, value: String },
    #[error("line {line}: target `{value}` is not a finite number")]
    BadTarget { line: u64, value: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: u64, id: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("dataset has {n} instances; at least 3 are needed to split")]
    TooSmall { n: usize },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("cannot batch an empty training set")]
    EmptyTrain,
    #[error("batch fraction must lie in (0, 1], got {0}")]
    BadBatchFraction(f64),
}

/// Binary descriptor matrix plus activity targets, rows keyed by unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    n_features: usize,
    /// Row-major `n × d`, every entry 0.0 or 1.0.
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        n_features: usize,
        features: Vec<f64>,
        targets: Vec<f64>,
    ) -> Result<Self, DatasetError> {
        let n = ids.len();
        if n_features == 0 {
            return Err(DatasetError::Invalid("no feature columns".into()));
        }
        if targets.len() != n || features.len() != n * n_features {
            return Err(DatasetError::Invalid(format!(
                "{} ids, {} targets and {} feature cells for width {}",
                n,
                targets.len(),
                features.len(),
                n_features
            )));
        }
        if let Some(i) = features.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(DatasetError::Invalid(format!(
                "row {} holds non-binary feature {}",
                i / n_features,
                features[i]
            )));
        }
        if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
            return Err(DatasetError::Invalid(format!("row {i} has a non-finite target")));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(DatasetError::Invalid(format!("duplicate id `{id}`")));
            }
        }
        Ok(Self { ids, n_features, features, targets })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self, idx: &[usize]) -> Vec<&[f64]> {
        idx.iter().map(|&i| self.row(i)).collect()
    }

    pub fn targets_at(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.targets[i]).collect()
    }

    pub fn ids_at(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.ids[i].clone()).collect()
    }

    /// Position of every id, for joining persisted artifacts back to rows.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        load_dataset(path)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut header = String::from("id,y");
        for j in 0..self.n_features {
            header.push_str(&format!(",b{j}"));
        }
        writeln!(out, "{header}")?;
        for i in 0..self.len() {
            let mut line = format!("{},{}", self.ids[i], self.targets[i]);
            for &v in self.row(i) {
                line.push_str(if v == 1.0 { ",1" } else { ",0" });
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Read a dataset CSV from disk, preserving row order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    parse_dataset(File::open(path)?)
}

pub fn parse_dataset<R: Read>(reader: R) -> Result<Dataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| DatasetError::MalformedHeader(e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "y" {
        return Err(DatasetError::MalformedHeader(format!(
            "expected `id,y,b0,...`, found `{}`",
            cols.join(",")
        )));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("b{j}") {
            return Err(DatasetError::MalformedHeader(format!(
                "column {} should be `b{j}`, found `{c}`",
                j + 3
            )));
        }
    }
    let d = cols.len() - 2;

    let mut ids = Vec::new();
    let mut targets = Vec::new();
    let mut features = Vec::new();
    let mut seen = HashSet::new();
    for (k, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| DatasetError::Csv { line, message: e.to_string() })?;
        if rec.len() != cols.len() {
            return Err(DatasetError::RaggedRow { line, expected: cols.len(), found: rec.len() });
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { line, id });
        }
        let y: f64 = rec[1]
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| DatasetError::BadTarget { line, value: rec[1].to_string() })?;
        for (j, cell) in rec.iter().skip(2).enumerate() {
            let v = match cell.trim() {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(DatasetError::NonBinaryFeature {
                        line,
                        column: cols[j + 2].to_string(),
                        value: other.to_string(),
                    })
                }
            };
            features.push(v);
        }
        ids.push(id);
        targets.push(y);
    }
    Dataset::new(ids, d, features, targets)
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.70, valid: 0.15, test: 0.15 }
    }
}

impl SplitFractions {
    /// Sizes for `n` instances: floor for train and validation, remainder to
    /// test, each part holding at least one instance.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize), DatasetError> {
        let (a, b, c) = (self.train, self.valid, self.test);
        if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadFractions((a, b, c)));
        }
        if n < 3 {
            return Err(DatasetError::TooSmall { n });
        }
        // The epsilon absorbs products such as 0.7 * 10 = 7.000000000000001.
        let floor = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
        let mut train = floor(a).max(1);
        let mut valid = floor(b).max(1);
        while train + valid > n - 1 {
            if train > 1 {
                train -= 1;
            } else {
                valid -= 1;
            }
        }
        Ok((train, valid, n - train - valid))
    }
}

/// Disjoint train/validation/test index lists covering `[0, n)`, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn n(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("split plan serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Seeded uniformly random split of `dataset`.
pub fn make_split(
    dataset: &Dataset,
    seed: u64,
    fractions: SplitFractions,
) -> Result<SplitPlan, DatasetError> {
    split_indices(dataset.len(), seed, fractions)
}

pub fn split_indices(n: usize, seed: u64, fractions: SplitFractions) -> Result<SplitPlan, DatasetError> {
    let (n_train, n_valid, _) = fractions.sizes(n)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed));
    let mut train = perm[..n_train].to_vec();
    let mut valid = perm[n_train..n_train + n_valid].to_vec();
    let mut test = perm[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan { seed, train, valid, test })
}

/// Batch size for a training set: nearest integer to `fraction · n`, at least 1.
pub fn batch_size(n_train: usize, batch_fraction: f64) -> usize {
    ((batch_fraction * n_train as f64).round() as usize).max(1)
}

/// Shuffle `train_idx` with `rng_seed` and cut it into consecutive batches;
/// the last batch may be short.
pub fn make_batches(
    train_idx: &[usize],
    batch_fraction: f64,
    rng_seed: u64,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    if !(batch_fraction > 0.0 && batch_fraction <= 1.0) {
        return Err(DatasetError::BadBatchFraction(batch_fraction));
    }
    if train_idx.is_empty() {
        return Err(DatasetError::EmptyTrain);
    }
    let b = batch_size(train_idx.len(), batch_fraction);
    let mut order = train_idx.to_vec();
    order.shuffle(&mut seed::rng(rng_seed));
    Ok(order.chunks(b).map(<[usize]>::to_vec).collect())
}

/// Seeds for a series of independent repeats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSpec {
    pub n_repeats: usize,
    pub base_seed: u64,
}

impl RepeatSpec {
    pub fn new(n_repeats: usize, base_seed: u64) -> Self {
        Self { n_repeats, base_seed }
    }

    pub fn seed(&self, repeat: usize) -> u64 {
        seed::derive(self.base_seed, repeat as u64)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_repeats).map(|r| self.seed(r)).collect()
    }

    /// Split seed of a repeat; shared by every strategy run on that repeat.
    pub fn split_seed(&self, repeat: usize) -> u64 {
        seed::derive(self.seed(repeat), seed::stream::SPLIT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, d: usize) -> Dataset {
        let ids = (0..n).map(|i| format!("m{i}")).collect();
        let features = (0..n * d).map(|k| (k % 3 == 0) as u8 as f64).collect();
        let targets = (0..n).map(|i| 5.0 + i as f64 * 0.1).collect();
        Dataset::new(ids, d, features, targets).unwrap()
    }

    #[test]
    fn parses_small_file() {
        let text = "id,y,b0,b1,b2,b3\na,5.0,0,1,0,1\nb,6.0,1,1,0,0\nc,7.0,0,0,0,1\n";
        let ds = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 4);
        assert_eq!(ds.targets(), &[5.0, 6.0, 7.0]);
        assert_eq!(ds.row(1), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.ids()[2], "c");
    }

    #[test]
    fn rejects_non_binary_cell_with_line() {
        let text = "id,y,b0,b1\na,5.0,0,1\nb,6.0,2,1\n";
        match parse_dataset(text.as_bytes()) {
            Err(DatasetError::NonBinaryFeature { line, column, value }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "b0");
                assert_eq!(value, "2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_header_target_and_duplicates() {
        assert!(matches!(
            parse_dataset("id,target,b0\na,1,0\n".as_bytes()),
            Err(DatasetError::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_dataset("id,y,b0,b2\na,1,0,1\n".as_bytes()),
            Err(DatasetError::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_dataset("id,y,b0\na,high,0\n".as_bytes()),
            Err(DatasetError::BadTarget { line: 2, .. })
        ));
        assert!(matches!(
            parse_dataset("id,y,b0\na,1,0\nb,2,1\na,3,1\n".as_bytes()),
            Err(DatasetError::DuplicateId { line: 4, .. })
        ));
        assert!(matches!(
            parse_dataset("id,y,b0,b1\na,1,0\n".as_bytes()),
            Err(DatasetError::RaggedRow { line: 2, expected: 4, found: 3 })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = toy(7, 5);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(parse_dataset(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let f = SplitFractions::default();
        assert_eq!(f.sizes(100).unwrap(), (70, 15, 15));
        assert_eq!(f.sizes(203).unwrap(), (142, 30, 31));
        assert_eq!(f.sizes(10).unwrap(), (7, 1, 2));
        assert_eq!(f.sizes(3).unwrap(), (1, 1, 1));
        assert!(matches!(f.sizes(2), Err(DatasetError::TooSmall { n: 2 })));
    }

    #[test]
    fn split_sizes_exhaustive() {
        // Independent restatement of the rule for every n up to 1000.
        let f = SplitFractions::default();
        for n in 3..=1000usize {
            let (tr, va, te) = f.sizes(n).unwrap();
            assert_eq!(tr + va + te, n);
            assert!(tr >= 1 && va >= 1 && te >= 1, "n={n}");
            if n >= 20 {
                assert_eq!(tr, n * 70 / 100, "n={n}");
                assert_eq!(va, n * 15 / 100, "n={n}");
            }
        }
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy(100, 3);
        let a = make_split(&ds, 1, SplitFractions::default()).unwrap();
        let b = make_split(&ds, 1, SplitFractions::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (70, 15, 15));
        let c = make_split(&ds, 2, SplitFractions::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_json_shape() {
        let plan = SplitPlan { seed: 3, train: vec![0, 2], valid: vec![1], test: vec![3] };
        assert_eq!(plan.to_json(), r#"{"seed":3,"train":[0,2],"valid":[1],"test":[3]}"#);
        assert_eq!(SplitPlan::from_json(&plan.to_json()).unwrap(), plan);
    }

    #[test]
    fn batches_follow_fraction() {
        let idx: Vec<usize> = (0..100).collect();
        let batches = make_batches(&idx, 0.15, 9).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![15, 15, 15, 15, 15, 15, 10]);

        let small = make_batches(&[4, 5, 6, 7], 0.15, 1).unwrap();
        assert!(small.iter().all(|b| b.len() == 1));
        assert_eq!(small.len(), 4);
    }

    #[test]
    fn batches_permute_per_seed() {
        let idx: Vec<usize> = (10..60).collect();
        let a: Vec<usize> = make_batches(&idx, 0.15, 1).unwrap().concat();
        let b: Vec<usize> = make_batches(&idx, 0.15, 2).unwrap().concat();
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, idx);
        assert_eq!(sb, idx);
    }

    #[test]
    fn batch_errors() {
        assert!(matches!(make_batches(&[], 0.15, 0), Err(DatasetError::EmptyTrain)));
        assert!(matches!(make_batches(&[1], 0.0, 0), Err(DatasetError::BadBatchFraction(_))));
        assert!(matches!(make_batches(&[1], 1.5, 0), Err(DatasetError::BadBatchFraction(_))));
    }

    #[test]
    fn repeat_seeds_distinct_and_pure() {
        let spec = RepeatSpec::new(20, 11);
        let seeds = spec.seeds();
        let unique: HashSet<u64> = seeds.iter().copied().collect();
        assert_eq!(unique.len(), 20);
        assert_eq!(seeds, RepeatSpec::new(20, 11).seeds());
        assert_eq!(spec.seed(4), seeds[4]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_partitions(n in 3usize..500, seed in any::<u64>()) {
                let plan = split_indices(n, seed, SplitFractions::default()).unwrap();
                let mut all: Vec<usize> = plan.train.iter().chain(&plan.valid).chain(&plan.test).copied().collect();
                prop_assert!(!plan.train.is_empty() && !plan.valid.is_empty() && !plan.test.is_empty());
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }

            #[test]
            fn batches_cover_once(n in 1usize..300, frac in 0.01f64..1.0, seed in any::<u64>()) {
                let idx: Vec<usize> = (0..n).map(|i| i * 3).collect();
                let batches = make_batches(&idx, frac, seed).unwrap();
                let b = batch_size(n, frac);
                prop_assert!(batches.iter().all(|x| x.len() <= b && !x.is_empty()));
                let mut flat = batches.concat();
                flat.sort_unstable();
                prop_assert_eq!(flat, idx);
            }
        }
    }
}
