//! Property tests over the public API: conformal regions, ensemble
//! aggregation, evaluation bookkeeping and fold assignment.

use proptest::prelude::*;
use snapconf::conformal::{calibrate, predict_region, records_from, regions_at, CalibrationSource, ConfidenceRegion, Provenance};
use snapconf::dataset::load_dataset;
use snapconf::ensembles::EnsemblePrediction;
use snapconf::eval::{binned_error_rate, coverage, global_error_rate, BinningKey};
use snapconf::forest::kfold_partition;
use snapconf::conformal::nonconformity;

fn prov() -> Provenance {
    Provenance { source: CalibrationSource::PerRun, strategy: "prop".into(), run_ids: vec![0] }
}

fn records_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..12.0, n),
            prop::collection::vec(0.0f64..12.0, n),
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..2.5], n),
        )
    })
}

proptest! {
    #[test]
    fn truth_sits_on_the_boundary_of_its_own_region(y in -20.0f64..20.0, y_hat in -20.0f64..20.0, sigma in 0.0f64..4.0) {
        let alpha = nonconformity(y, y_hat, sigma).unwrap();
        let r = predict_region(y_hat, sigma, alpha, 0.5).unwrap();
        prop_assert!(r.contains(y));
        let edge = if y >= y_hat { r.hi() } else { r.lo() };
        prop_assert!((edge - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }

    #[test]
    fn alphas_never_exceed_the_largest_residual((y, y_hat, sigma) in records_strategy()) {
        let recs = records_from(&y, &y_hat, &sigma).unwrap();
        let cal = calibrate(&recs, prov()).unwrap();
        let max_resid = y.iter().zip(&y_hat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(cal.alphas().iter().all(|&a| a <= max_resid));
    }

    #[test]
    fn regions_are_nested_in_the_level((y, y_hat, sigma) in records_strategy(), a in 0.05f64..0.95, b in 0.05f64..0.95) {
        let cal = calibrate(&records_from(&y, &y_hat, &sigma).unwrap(), prov()).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let narrow = regions_at(&cal, &y_hat, &sigma, lo).unwrap();
        let wide = regions_at(&cal, &y_hat, &sigma, hi).unwrap();
        for (n, w) in narrow.iter().zip(&wide) {
            prop_assert!(w.lo() <= n.lo() && n.hi() <= w.hi());
        }
        let cn = coverage(&narrow, &y).unwrap().coverage;
        let cw = coverage(&wide, &y).unwrap().coverage;
        prop_assert!(cn <= cw);
    }

    /// In-sample, the calibration records themselves are covered at least
    /// at the calibrated rank.
    #[test]
    fn calibration_set_is_covered_at_its_rank((y, y_hat, sigma) in records_strategy(), cl in 0.05f64..0.95) {
        let cal = calibrate(&records_from(&y, &y_hat, &sigma).unwrap(), prov()).unwrap();
        let regions = regions_at(&cal, &y_hat, &sigma, cl).unwrap();
        let n = y.len();
        let rank = snapconf::conformal::calibration_rank(n, cl);
        let covered = coverage(&regions, &y).unwrap().covered;
        prop_assert!(covered >= rank, "{covered} < {rank}");
    }

    #[test]
    fn binned_rates_recombine_to_the_global_rate(
        cells in prop::collection::vec((0.0f64..12.0, 0.0f64..1.5, 0.0f64..12.0), 1..150),
        width in prop_oneof![Just(0.25), Just(1.0), Just(3.0)],
    ) {
        let regions: Vec<ConfidenceRegion> =
            cells.iter().map(|&(c, h, _)| ConfidenceRegion { center: c, half_width: h, cl: 0.8 }).collect();
        let truths: Vec<f64> = cells.iter().map(|c| c.2).collect();
        let global = 1.0 - coverage(&regions, &truths).unwrap().coverage;
        for key in [BinningKey::Observed, BinningKey::Predicted] {
            let bins = binned_error_rate(&regions, &truths, width, key).unwrap();
            prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), truths.len());
            prop_assert!((global_error_rate(&bins) - global).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregation_is_shift_equivariant_and_order_free(
        members in (1usize..8, 1usize..20).prop_flat_map(|(k, m)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, m), k)),
        shift in -3.0f64..3.0,
    ) {
        let base = EnsemblePrediction::from_members(members.clone()).unwrap();
        let shifted = EnsemblePrediction::from_members(
            members.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect(),
        ).unwrap();
        let mut reversed = members.clone();
        reversed.reverse();
        let reversed = EnsemblePrediction::from_members(reversed).unwrap();
        for j in 0..base.mean.len() {
            prop_assert!((shifted.mean[j] - base.mean[j] - shift).abs() < 1e-9);
            prop_assert!((shifted.sigma[j] - base.sigma[j]).abs() < 1e-9);
            prop_assert!((reversed.mean[j] - base.mean[j]).abs() < 1e-12);
            prop_assert!(base.sigma[j] >= 0.0);
        }
    }

    #[test]
    fn folds_partition_the_training_indices(n in 10usize..300, k in 2usize..=10, seed in any::<u64>()) {
        let train: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let folds = kfold_partition(&train, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let (min, max) = folds.iter().fold((usize::MAX, 0), |(a, b), f| (a.min(f.len()), b.max(f.len())));
        prop_assert!(max - min <= 1);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, train);
    }
}

#[test]
fn fixtures_load_with_binary_features() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    for (name, n, d) in [("toy_30.csv", 30, 6), ("planted_300.csv", 300, 10)] {
        let ds = load_dataset(dir.join(name)).unwrap();
        assert_eq!((ds.len(), ds.n_features()), (n, d), "{name}");
        for i in 0..ds.len() {
            assert!(ds.row(i).iter().all(|&b| b == 0.0 || b == 1.0));
            assert!(ds.targets()[i].is_finite());
        }
    }
}
