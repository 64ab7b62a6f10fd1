//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the per-criterion report is always
//! printed, also under `cargo test`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use snapconf::conformal::{
    calibrate, cross_conformal_records, nonconformity, predict_region, records_from, regions_at,
    CalibrationRecord, CalibrationSource, ConfidenceRegion, Pooling, Provenance,
};
use snapconf::dataset::Dataset;
use snapconf::eval::{self, binned_error_rate, global_error_rate, validity_curve, BinningKey};
use snapconf::experiment::{run_experiment, ExperimentConfig, Strategy, TrainOverrides};
use snapconf::forest::{fit_forest, fit_tree, kfold_partition, predict_forest, ForestConfig, TreeParams};
use snapconf::mlp::{backward, init_params, lr_at, nesterov_update, DropoutMasks, Layer, StepDecaySchedule};
use snapconf::seed;
use snapconf::stats;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("{what} took {:.1} s, limit {} s", t.as_secs_f64(), limit.as_secs()))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// ---------------------------------------------------------------- gradients

/// Plain re-implementation of the forward pass. Returns the batch MSE and
/// the sign pattern of every kept hidden pre-activation, so a finite
/// difference can tell whether it stepped across a ReLU kink.
fn reference_loss(layers: &[Layer], xs: &[Vec<f64>], ys: &[f64], masks: &[Vec<Vec<f64>>]) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for ((x, y), mask) in xs.iter().zip(ys).zip(masks) {
        let mut a = x.clone();
        for (l, layer) in layers.iter().enumerate() {
            let mut z = vec![0.0; layer.n_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut s = layer.biases[o];
                for (i, ai) in a.iter().enumerate() {
                    s += layer.weights[o * layer.n_in + i] * ai;
                }
                *zo = s;
            }
            if l + 1 == layers.len() {
                let e = z[0] - y;
                total += e * e;
            } else {
                for (zo, &m) in z.iter_mut().zip(&mask[l]) {
                    if m != 0.0 {
                        pattern.push(*zo > 0.0);
                    }
                    *zo = zo.max(0.0) * m;
                }
                a = z;
            }
        }
    }
    (total / xs.len() as f64, pattern)
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(0x6EAD);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    const FLOOR: f64 = 1e-5;
    for case in 0..100 {
        let d = rng.random_range(1..=8);
        let mut params = init_params(d, rng.random()).map_err(|e| e.to_string())?;
        for layer in &mut params.stack.layers {
            for b in &mut layer.biases {
                *b = rng.random_range(-0.2..0.2);
            }
        }
        let batch = rng.random_range(1..=4);
        let xs: Vec<Vec<f64>> =
            (0..batch).map(|_| (0..d).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect()).collect();
        let ys: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rate = if rng.random_bool(0.5) { rng.random_range(0.1..0.5) } else { 0.0 };
        let masks: Vec<DropoutMasks> = (0..batch).map(|_| DropoutMasks::sample(&params, rate, &mut rng)).collect();
        let raw_masks: Vec<Vec<Vec<f64>>> = masks.iter().map(|m| m.layers.clone()).collect();

        let xrefs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (grads, loss) = backward(&params, &xrefs, &ys, &masks).map_err(|e| e.to_string())?;
        let mut layers = params.stack.layers.clone();
        let (ref_loss, base_pattern) = reference_loss(&layers, &xs, &ys, &raw_masks);
        ensure((loss - ref_loss).abs() <= 1e-12 * ref_loss.max(1.0), || {
            format!("case {case}: loss {loss} vs reference {ref_loss}")
        })?;

        for l in 0..layers.len() {
            let n_w = layers[l].weights.len();
            for k in 0..n_w + layers[l].biases.len() {
                let analytic = if k < n_w { grads.layers[l].weights[k] } else { grads.layers[l].biases[k - n_w] };
                let mut h = 1e-5;
                let mut numeric = None;
                let orig = if k < n_w { layers[l].weights[k] } else { layers[l].biases[k - n_w] };
                let set = |ls: &mut [Layer], v: f64| {
                    if k < n_w {
                        ls[l].weights[k] = v;
                    } else {
                        ls[l].biases[k - n_w] = v;
                    }
                };
                for _ in 0..4 {
                    set(&mut layers, orig + h);
                    let (lp, pat_p) = reference_loss(&layers, &xs, &ys, &raw_masks);
                    set(&mut layers, orig - h);
                    let (lm, pat_m) = reference_loss(&layers, &xs, &ys, &raw_masks);
                    set(&mut layers, orig);
                    if pat_p == base_pattern && pat_m == base_pattern {
                        numeric = Some((lp - lm) / (2.0 * h));
                        break;
                    }
                    h /= 10.0;
                }
                let Some(numeric) = numeric else {
                    skipped += 1;
                    continue;
                };
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    within(start, Duration::from_secs(10), "gradient check")?;
    let detail = format!(
        "100 networks, {checked} parameters, max relative error {worst:.2e} (floor {FLOOR:e}), {skipped} kink-adjacent skipped, {:.1} s",
        start.elapsed().as_secs_f64()
    );
    ensure(worst < 1e-5, || detail.clone())?;
    ensure(skipped * 100 <= checked, || format!("too many kink skips: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- optimizer

fn optimizer_oracle() -> Outcome {
    // Loss θ² has gradient 2θ. With g taken at θ + μv:
    //   θ' = (1 − 2·lr)(θ + μv),   v' = θ' − θ.
    let mut worst = 0.0f64;
    for &(lr, mu, theta0) in &[(0.1, 0.9, 1.0), (0.05, 0.5, -2.0), (0.3, 0.99, 0.25), (0.001, 0.0, 3.0)] {
        let (mut t, mut v) = ([theta0], [0.0]);
        let (mut rt, mut rv) = (theta0, 0.0f64);
        for step in 0..10 {
            let g = [2.0 * (t[0] + mu * v[0])];
            nesterov_update(&mut t, &mut v, &g, lr, mu).map_err(|e| e.to_string())?;
            let next = (1.0 - 2.0 * lr) * (rt + mu * rv);
            rv = next - rt;
            rt = next;
            let err = (t[0] - rt).abs().max((v[0] - rv).abs());
            ensure(err <= 1e-12, || format!("lr {lr}, μ {mu}: step {step} differs by {err:e}"))?;
            worst = worst.max(err);
        }
    }
    // Two steps by hand from θ = 1, v = 0, lr = 0.1, μ = 0.9:
    // v₁ = −0.2, θ₁ = 0.8; v₂ = 0.9·(−0.2) − 0.2·(0.8 − 0.18) = −0.304, θ₂ = 0.496.
    let (mut t, mut v) = ([1.0], [0.0]);
    for _ in 0..2 {
        let g = [2.0 * (t[0] + 0.9 * v[0])];
        nesterov_update(&mut t, &mut v, &g, 0.1, 0.9).map_err(|e| e.to_string())?;
    }
    ensure((t[0] - 0.496).abs() <= 1e-12 && (v[0] + 0.304).abs() <= 1e-12, || format!("hand steps gave θ {} v {}", t[0], v[0]))?;
    Ok(format!("4 trajectories × 10 steps, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- schedule

fn schedule_table() -> Outcome {
    let lr0 = 0.005;
    let cases = [
        ("snapshot-v1", StepDecaySchedule::cyclic(50, 10)),
        ("snapshot-v2", StepDecaySchedule::cyclic(250, 10)),
        ("snapshot-v3", StepDecaySchedule::cyclic(250, 50)),
        ("single network", StepDecaySchedule::non_cyclic(200)),
    ];
    for (name, sched) in cases {
        // Stateful simulation: restart at every cycle boundary, otherwise
        // remove 40% at every step boundary.
        let mut lr = lr0;
        for epoch in 0..=5000usize {
            if epoch > 0 {
                let in_cycle = sched.cycle_epochs.map_or(epoch, |c| epoch % c);
                if in_cycle == 0 {
                    lr = lr0;
                } else if in_cycle % sched.step_epochs == 0 {
                    lr *= 0.6;
                }
            }
            let got = lr_at(&sched, epoch, lr0);
            ensure(got == lr, || format!("{name}: epoch {epoch} gives {got}, table {lr}"))?;
        }
    }
    // Spot values: 0.005·0.6⁴ at the last step of a 50-epoch cycle.
    let v1 = StepDecaySchedule::cyclic(50, 10);
    ensure(lr_at(&v1, 49, lr0) == lr0 * 0.6 * 0.6 * 0.6 * 0.6 && lr_at(&v1, 50, lr0) == lr0, || "V1 spot values".into())?;
    Ok("4 schedules, epochs 0-5000, bit-exact".into())
}

// ---------------------------------------------------------------- conformal

struct SyntheticSplit {
    records: Vec<CalibrationRecord>,
    test_y: Vec<f64>,
    test_mean: Vec<f64>,
    test_sigma: Vec<f64>,
}

/// Linear signal with Gaussian noise; a 5-member ensemble of perturbed
/// linear models supplies means and spreads.
fn synthetic_conformal(s: u64, n_calib: usize, n_test: usize) -> SyntheticSplit {
    let mut rng = seed::rng(seed::derive(0xC0FF, s));
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let p = 5;
    let w: Vec<f64> = (0..p).map(|_| std_normal.sample(&mut rng)).collect();
    let members: Vec<Vec<f64>> =
        (0..5).map(|_| w.iter().map(|wi| wi + 0.15 * std_normal.sample(&mut rng)).collect()).collect();
    let mut draw = |n: usize| {
        let (mut y, mut mean, mut sigma) = (vec![], vec![], vec![]);
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| std_normal.sample(&mut rng)).collect();
            let truth: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let noise_sd = 0.3 + 0.2 * x[0].abs();
            y.push(6.0 + truth + noise_sd * std_normal.sample(&mut rng));
            let preds: Vec<f64> = members.iter().map(|m| 6.0 + x.iter().zip(m).map(|(a, b)| a * b).sum::<f64>()).collect();
            mean.push(stats::mean(&preds));
            sigma.push(stats::population_std(&preds));
        }
        (y, mean, sigma)
    };
    let (cy, cm, cs) = draw(n_calib);
    let (test_y, test_mean, test_sigma) = draw(n_test);
    SyntheticSplit { records: records_from(&cy, &cm, &cs).unwrap(), test_y, test_mean, test_sigma }
}

fn prov() -> Provenance {
    Provenance { source: CalibrationSource::PerRun, strategy: "synthetic".into(), run_ids: vec![0] }
}

/// Coverage is judged against a binomial standard error that counts both
/// samples: the calibration set fixes the threshold (its empirical quantile
/// has binomial variance over `n_calib`) and the test set measures it
/// (binomial over `n_test`). With the test term alone, roughly a fifth of
/// seeds fall short by chance under exact exchangeability, so that count
/// is printed alongside but not used to decide.
fn conformal_validity() -> Outcome {
    let start = Instant::now();
    let grid = eval::default_cl_grid();
    let (n_calib, n_test) = (500, 2000);
    let checked = [0.7, 0.8, 0.9];
    let (mut seeds_valid, mut seeds_valid_test_only) = (0, 0);
    let mut mean_cov = [0.0; 3];
    let mut min_r2 = f64::INFINITY;
    let mut shortfalls = Vec::new();
    for s in 0..20 {
        let data = synthetic_conformal(s, n_calib, n_test);
        let cal = calibrate(&data.records, prov()).map_err(|e| e.to_string())?;
        let regions: Vec<Vec<ConfidenceRegion>> = grid
            .iter()
            .map(|&cl| regions_at(&cal, &data.test_mean, &data.test_sigma, cl))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let curve = validity_curve(&regions, &data.test_y).map_err(|e| e.to_string())?;
        let (mut ok, mut ok_test_only) = (true, true);
        for (j, &cl) in checked.iter().enumerate() {
            let cov = curve.at(cl).ok_or("missing level")?.coverage;
            mean_cov[j] += cov / 20.0;
            let var = cl * (1.0 - cl);
            let bound = cl - 3.0 * (var * (1.0 / n_calib as f64 + 1.0 / n_test as f64)).sqrt();
            ok_test_only &= cov >= cl - 3.0 * (var / n_test as f64).sqrt();
            if cov < bound {
                ok = false;
                shortfalls.push(format!("seed {s} cl {cl}: {cov:.4} < {bound:.4}"));
            }
        }
        seeds_valid += usize::from(ok);
        seeds_valid_test_only += usize::from(ok_test_only);
        min_r2 = min_r2.min(curve.fit.ok_or("no fit")?.r_squared);
    }
    within(start, Duration::from_secs(60), "validity simulation")?;
    let detail = format!(
        "{seeds_valid}/20 seeds within 3 SE at 0.7/0.8/0.9 ({seeds_valid_test_only}/20 with test-only SE), mean coverage {:.3}/{:.3}/{:.3}, min R² {min_r2:.5}, {:.1} s{}",
        mean_cov[0],
        mean_cov[1],
        mean_cov[2],
        start.elapsed().as_secs_f64(),
        if shortfalls.is_empty() { String::new() } else { format!(" [{}]", shortfalls.join("; ")) }
    );
    ensure(seeds_valid >= 19 && min_r2 > 0.99, || detail.clone())?;
    Ok(detail)
}

fn region_round_trip() -> Outcome {
    let mut rng = seed::rng(0xB0B);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let y = rng.random_range(0.0..12.0);
        let y_hat = rng.random_range(0.0..12.0);
        let sigma = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..3.0) };
        let alpha = nonconformity(y, y_hat, sigma).map_err(|e| e.to_string())?;
        let r = predict_region(y_hat, sigma, alpha, 0.8).map_err(|e| e.to_string())?;
        let edge = if y >= y_hat { r.hi() } else { r.lo() };
        worst = worst.max((edge - y).abs());
    }
    ensure(worst <= 1e-12, || format!("boundary error {worst:e}"))?;
    Ok(format!("10^4 records, max |boundary − truth| {worst:.1e}"))
}

fn normalization_bound() -> Outcome {
    let mut n_cal = 0;
    let mut check = |records: &[CalibrationRecord]| -> Result<(), String> {
        let cal = calibrate(records, prov()).map_err(|e| e.to_string())?;
        let max_alpha = cal.alphas().last().copied().unwrap();
        let max_resid = records.iter().map(CalibrationRecord::residual).fold(0.0, f64::max);
        n_cal += 1;
        ensure(max_alpha <= max_resid, || format!("max alpha {max_alpha} exceeds max residual {max_resid}"))
    };
    for s in 0..20 {
        check(&synthetic_conformal(s, 500, 1).records)?;
    }
    let mut rng = seed::rng(0xA1FA);
    for _ in 0..2000 {
        let n = rng.random_range(1..=50);
        let zero_spread = rng.random_bool(0.2);
        let recs: Vec<CalibrationRecord> = (0..n)
            .map(|_| {
                let sigma = if zero_spread { 0.0 } else { rng.random_range(0.0..2.0) };
                CalibrationRecord::new(rng.random_range(3.0..10.0), rng.random_range(3.0..10.0), sigma).unwrap()
            })
            .collect();
        check(&recs)?;
    }
    Ok(format!("{n_cal} calibrations, max alpha never above max |residual|"))
}

// ---------------------------------------------------------------- forest

enum RefNode {
    Leaf(f64),
    Split(usize, Box<RefNode>, Box<RefNode>),
}

impl RefNode {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            RefNode::Leaf(v) => *v,
            RefNode::Split(f, l, r) => if x[*f] < 0.5 { l.predict(x) } else { r.predict(x) },
        }
    }
}

fn sse(ys: &[f64]) -> f64 {
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    ys.iter().map(|y| (y - m) * (y - m)).sum()
}

/// Exhaustive CART: try every feature, keep the largest SSE reduction
/// (lowest feature index on ties, gains within 1e-12 of the parent SSE
/// counting as tied), stop when no split reduces SSE by more than 1e-10 of
/// the parent's.
fn reference_tree(rows: &[(Vec<f64>, f64)]) -> RefNode {
    let ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    if rows.len() < 2 {
        return RefNode::Leaf(mean);
    }
    let parent = sse(&ys);
    let mut best: Option<(f64, usize)> = None;
    for f in 0..rows[0].0.len() {
        let (l, r): (Vec<_>, Vec<_>) = rows.iter().partition(|row| row.0[f] < 0.5);
        if l.is_empty() || r.is_empty() {
            continue;
        }
        let ly: Vec<f64> = l.iter().map(|row| row.1).collect();
        let ry: Vec<f64> = r.iter().map(|row| row.1).collect();
        let gain = parent - sse(&ly) - sse(&ry);
        if gain > 1e-10 * parent && best.is_none_or(|(g, _)| gain > g + 1e-12 * parent) {
            best = Some((gain, f));
        }
    }
    match best {
        None => RefNode::Leaf(mean),
        Some((_, f)) => {
            let (l, r): (Vec<_>, Vec<_>) = rows.iter().cloned().partition(|row| row.0[f] < 0.5);
            RefNode::Split(f, Box::new(reference_tree(&l)), Box::new(reference_tree(&r)))
        }
    }
}

fn forest_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(0xF0E5);
    let mut worst = 0.0f64;
    let cases = 300;
    for case in 0..cases {
        let n = rng.random_range(1..=12);
        let d = rng.random_range(1..=4);
        let rows: Vec<(Vec<f64>, f64)> = (0..n)
            .map(|_| ((0..d).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect(), rng.random_range(0.0..10.0)))
            .collect();
        let xs: Vec<&[f64]> = rows.iter().map(|r| r.0.as_slice()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let tree = fit_tree(&xs, &ys, &TreeParams::default()).map_err(|e| e.to_string())?;
        let reference = reference_tree(&rows);
        for code in 0..(1u32 << d) {
            let x: Vec<f64> = (0..d).map(|b| f64::from((code >> b) & 1)).collect();
            let err = (tree.predict(&x) - reference.predict(&x)).abs();
            ensure(err <= 1e-12, || format!("case {case} (n {n}, d {d}), input {x:?}: tree and oracle differ by {err:e}; rows {rows:?}; tree {tree:?}"))?;
            worst = worst.max(err);
        }
    }
    within(start, Duration::from_secs(30), "forest oracle")?;
    Ok(format!("{cases} datasets, every binary input, max difference {worst:.1e}, {:.2} s", start.elapsed().as_secs_f64()))
}

fn cross_conformal_accounting() -> Outcome {
    let mut rng = seed::rng(0xCC);
    let n = 130;
    let d = 6;
    let features: Vec<f64> = (0..n * d).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(4.0..9.0)).collect();
    let ds = Dataset::new((0..n).map(|i| format!("m{i}")).collect(), d, features, targets).map_err(|e| e.to_string())?;
    let mut train: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(train.as_mut_slice(), &mut rng);
    train.truncate(100);
    let config = ForestConfig { n_trees: 25, ..ForestConfig::default() };
    let run_seed = 77;
    let records = cross_conformal_records(&ds, &train, 10, &config, run_seed).map_err(|e| e.to_string())?;
    ensure(records.len() == 100, || format!("{} records", records.len()))?;
    let mut seen: Vec<usize> = records.iter().map(|r| r.index).collect();
    seen.sort_unstable();
    let mut expected = train.clone();
    expected.sort_unstable();
    ensure(seen == expected, || "records do not cover each training point exactly once".into())?;
    ensure(records.iter().all(|r| r.record.y == ds.targets()[r.index]), || "record targets mismatch".into())?;

    // Each record must come from a forest that never saw its instance:
    // refit every fold's forest and compare predictions.
    let folds = kfold_partition(&train, 10, seed::derive(run_seed, seed::stream::KFOLD)).map_err(|e| e.to_string())?;
    for (f, held) in folds.iter().enumerate() {
        let fit: Vec<usize> = folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.clone()).collect();
        ensure(held.iter().all(|i| !fit.contains(i)), || format!("fold {f} overlaps its training part"))?;
        let forest = fit_forest(&ds.rows(&fit), &ds.targets_at(&fit), &config, seed::derive_path(run_seed, &[seed::stream::FOREST, f as u64]))
            .map_err(|e| e.to_string())?;
        for &i in held {
            let p = predict_forest(&forest, ds.row(i)).map_err(|e| e.to_string())?;
            let rec = records.iter().find(|r| r.index == i).unwrap();
            ensure(rec.record.y_hat == p.mean && rec.record.sigma == p.std, || format!("instance {i}: not an out-of-fold prediction"))?;
        }
    }
    Ok("10 folds on 100 training points: 100 records, each point once, all out-of-fold".into())
}

// ---------------------------------------------------------------- pipeline

fn toy_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: fixture("planted_300.csv"),
        strategy: Some(Strategy::SnapshotV1),
        n_repeats: 5,
        base_seed: 2024,
        members: 20,
        output_dir: Some(out.to_path_buf()),
        ..ExperimentConfig::default()
    }
}

fn toy_end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = run_experiment(toy_config(tmp.path())).map_err(|e| e.to_string())?;
    within(start, Duration::from_secs(300), "toy pipeline")?;
    let worst_rmse = report.rmse.per_run.iter().copied().fold(0.0, f64::max);
    let cov = report.validity.at(0.8).ok_or("no 0.8 level")?.coverage;
    let detail = format!(
        "planted_300, snapshot-v1 × 20 snapshots, 5 repeats: test RMSE mean {:.3} (worst {worst_rmse:.3}), pooled coverage at 0.8 {cov:.3}, {:.1} s",
        report.rmse.mean,
        start.elapsed().as_secs_f64()
    );
    ensure(worst_rmse < 0.45 && cov >= 0.77, || detail.clone())?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let configs = |root: &Path| {
        vec![
            toy_config(root),
            ExperimentConfig {
                dataset: fixture("toy_30.csv"),
                strategy: Some(Strategy::Rf),
                n_repeats: 3,
                base_seed: 5,
                n_trees: 30,
                output_dir: Some(root.to_path_buf()),
                ..ExperimentConfig::default()
            },
            ExperimentConfig {
                dataset: fixture("planted_300.csv"),
                strategy: Some(Strategy::DnnEnsemble),
                n_repeats: 2,
                members: 3,
                pooling: Pooling::PerRun,
                train: TrainOverrides { max_epochs: Some(200), patience: Some(50), ..TrainOverrides::default() },
                output_dir: Some(root.to_path_buf()),
                ..ExperimentConfig::default()
            },
        ]
    };
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let mut compared = 0;
    for (ca, cb) in configs(a.path()).into_iter().zip(configs(b.path())) {
        let strategy = ca.strategy.unwrap();
        let stem = ca.dataset.file_stem().unwrap().to_owned();
        run_experiment(ca).map_err(|e| e.to_string())?;
        run_experiment(cb).map_err(|e| e.to_string())?;
        for file in ["validity.csv", "widths.csv"] {
            let rel = Path::new(&stem).join(strategy.as_str()).join("report").join(file);
            let (x, y) = (fs::read(a.path().join(&rel)), fs::read(b.path().join(&rel)));
            let (x, y) = (x.map_err(|e| e.to_string())?, y.map_err(|e| e.to_string())?);
            ensure(x == y, || format!("{} differs between runs", rel.display()))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} report files bit-identical across re-runs (snapshot-v1, rf, dnn-ensemble)"))
}

fn binned_identity() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = seed::rng(0xB1);
    let mut cases = 0;
    // Real pipeline output first.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        dataset: fixture("planted_300.csv"),
        strategy: Some(Strategy::Rf),
        n_repeats: 3,
        n_trees: 40,
        output_dir: Some(tmp.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let report = run_experiment(cfg).map_err(|e| e.to_string())?;
    let global = 1.0 - report.validity.at(0.8).unwrap().coverage;
    for bins in [&report.binned_error_observed, &report.binned_error_predicted] {
        worst = worst.max((global_error_rate(bins) - global).abs());
        let n: usize = bins.iter().map(|b| b.count).sum();
        ensure(n == report.validity.at(0.8).unwrap().n, || "bin counts do not sum to the test size".into())?;
        cases += 1;
    }
    // Random regions, widths and bin widths.
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let regions: Vec<ConfidenceRegion> = (0..n)
            .map(|_| ConfidenceRegion { center: rng.random_range(2.0..11.0), half_width: rng.random_range(0.0..1.5), cl: 0.8 })
            .collect();
        let truths: Vec<f64> = (0..n).map(|_| rng.random_range(2.0..11.0)).collect();
        let covered = regions.iter().zip(&truths).filter(|(r, &y)| r.contains(y)).count();
        let global = 1.0 - covered as f64 / n as f64;
        let width = [0.25, 0.5, 1.0, 2.0][rng.random_range(0..4)];
        for key in [BinningKey::Observed, BinningKey::Predicted] {
            let bins = binned_error_rate(&regions, &truths, width, key).map_err(|e| e.to_string())?;
            worst = worst.max((global_error_rate(&bins) - global).abs());
            cases += 1;
        }
    }
    ensure(worst <= 1e-12, || format!("identity off by {worst:e}"))?;
    Ok(format!("{cases} binnings, max |weighted bin rate − global rate| {worst:.1e}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("gradient-oracle", gradient_oracle),
        ("optimizer-oracle", optimizer_oracle),
        ("schedule-table", schedule_table),
        ("conformal-validity", conformal_validity),
        ("region-round-trip", region_round_trip),
        ("normalization-bound", normalization_bound),
        ("forest-oracle", forest_oracle),
        ("cross-conformal-accounting", cross_conformal_accounting),
        ("toy-end-to-end", toy_end_to_end),
        ("determinism", determinism),
        ("binned-error-identity", binned_identity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    println!("acceptance criteria");
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<28} {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
