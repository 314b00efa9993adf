use nestwave::counts::{aggregate_branch, HaulDataset, HaulRecord, TreeNode};
use nestwave::dist::sample_binomial;
use nestwave::eval::{
    kernel_smooth, make_holdout, predict_holdout, waic, waic_archive, HoldoutRecord,
    PredictionRow,
};
use nestwave::hmc::SampleArchive;
use nestwave::model::{Block, BranchPosterior, Variant};
use nestwave::wavelet::{build_basis, InterpolationMatrix, Placement};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[test]
fn waic_matches_frozen_values() {
    let loglik = [-1.0, -2.0, -3.0, -2.2, -1.7, -1.9];
    let r = waic(&loglik, 3, 2).unwrap();
    assert!((r.lpd_hat - -3.6345480687618776).abs() < 1e-12, "{}", r.lpd_hat);
    assert!((r.p_waic - 1.0533333333333335).abs() < 1e-12, "{}", r.p_waic);
    assert!((r.waic - 9.375762804190423).abs() < 1e-12, "{}", r.waic);
    assert_eq!(r.pointwise_lpd.len(), 2);
    assert_eq!(r.pointwise_p.len(), 2);
}

#[test]
fn waic_of_a_constant_column_has_no_effective_parameters() {
    let c = -1.37;
    let loglik = [c; 5];
    let r = waic(&loglik, 5, 1).unwrap();
    assert!((r.lpd_hat - c).abs() < 1e-12);
    assert!(r.p_waic.abs() < 1e-12);
    assert!((r.waic - -2.0 * c).abs() < 1e-12);
}

#[test]
fn waic_penalty_is_the_sample_variance() {
    let r = waic(&[-1.0, -3.0], 2, 1).unwrap();
    assert!((r.p_waic - 2.0).abs() < 1e-13);
    let lpd = (0.5 * ((-1.0f64).exp() + (-3.0f64).exp())).ln();
    assert!((r.lpd_hat - lpd).abs() < 1e-13);
    assert!((r.waic - (-2.0 * lpd + 4.0)).abs() < 1e-12);
}

#[test]
fn waic_is_additive_over_observations() {
    let loglik = [-1.0, -2.0, -3.0, -2.2, -1.7, -1.9];
    let both = waic(&loglik, 3, 2).unwrap();
    let col0 = waic(&[-1.0, -3.0, -1.7], 3, 1).unwrap();
    let col1 = waic(&[-2.0, -2.2, -1.9], 3, 1).unwrap();
    assert!((both.waic - (col0.waic + col1.waic)).abs() < 1e-12);
    assert!((both.p_waic - (col0.p_waic + col1.p_waic)).abs() < 1e-12);
}

#[test]
fn waic_is_stable_under_extreme_log_likelihoods() {
    let r = waic(&[-1000.0, -1001.0], 2, 1).unwrap();
    assert!(r.waic.is_finite());
    assert!((r.p_waic - 0.5).abs() < 1e-10);
}

#[test]
fn waic_rejects_bad_input() {
    assert!(waic(&[-1.0], 1, 1).is_err(), "single draw");
    assert!(waic(&[-1.0, -2.0, -3.0], 2, 1).is_err(), "shape mismatch");
    assert!(waic(&[-1.0, f64::NAN], 2, 1).is_err(), "NaN entry");
    assert!(waic(&[-1.0, f64::NEG_INFINITY], 2, 1).is_err(), "-inf entry");
}

#[test]
fn waic_archive_uses_the_stored_matrix() {
    let arch = SampleArchive {
        label: "toy".into(),
        dim: 1,
        chains: 1,
        kept_per_chain: 3,
        m_records: 2,
        param_names: vec!["x".into()],
        blocks: Vec::new(),
        accept_rate: vec![0.9],
        divergences: vec![0],
        depth_hits: vec![0],
        step_sizes: vec![0.5],
        mean_energy_error: vec![0.0],
        rhat: vec![f64::NAN],
        converged: false,
        seed: 1,
        grid: None,
        draws: vec![0.0; 3],
        loglik: vec![-1.0, -2.0, -3.0, -2.2, -1.7, -1.9],
    };
    let r = waic_archive(&arch).unwrap();
    assert!((r.waic - 9.375762804190423).abs() < 1e-12);
}

fn grid_dataset(quarters: usize, per_quarter: usize) -> HaulDataset {
    let mut records = Vec::new();
    for q in 1..=quarters {
        for k in 0..per_quarter {
            records.push(HaulRecord {
                trip_id: q,
                obs_index: k + 1,
                quarter: q,
                counts: vec![2, 3],
                total: 5,
            });
        }
    }
    HaulDataset::new(records, vec!["a".into(), "b".into()]).unwrap()
}

#[test]
fn holdout_size_follows_the_fraction() {
    let data = grid_dataset(25, 4);
    let split = make_holdout(&data, 0.10, 7).unwrap();
    assert_eq!(split.test.len(), 10);
    assert_eq!(split.train.len(), 90);
    assert!(split.eligible.iter().all(|&e| e));
    let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
}

#[test]
fn holdout_is_reproducible_by_seed() {
    let data = grid_dataset(25, 4);
    let a = make_holdout(&data, 0.10, 7).unwrap();
    let b = make_holdout(&data, 0.10, 7).unwrap();
    assert_eq!(a.test, b.test);
    let c = make_holdout(&data, 0.10, 8).unwrap();
    assert_ne!(a.test, c.test);
}

#[test]
fn singleton_quarters_are_never_held_out() {
    let mut records = vec![HaulRecord {
        trip_id: 9,
        obs_index: 1,
        quarter: 3,
        counts: vec![1, 1],
        total: 2,
    }];
    for q in [1usize, 2, 4] {
        for k in 0..3 {
            records.push(HaulRecord {
                trip_id: q,
                obs_index: k + 1,
                quarter: q,
                counts: vec![2, 2],
                total: 4,
            });
        }
    }
    let data = HaulDataset::new(records, vec!["a".into(), "b".into()]).unwrap();
    let split = make_holdout(&data, 0.3, 4).unwrap();
    assert!(!split.eligible[0], "singleton record must be ineligible");
    assert!(!split.test.contains(&0));
}

#[test]
fn every_quarter_keeps_a_training_record() {
    let data = grid_dataset(6, 2);
    let split = make_holdout(&data, 0.45, 3).unwrap();
    let mut remaining = vec![0usize; 7];
    for &i in &split.train {
        remaining[data.records[i].quarter] += 1;
    }
    for q in 1..=6 {
        assert!(remaining[q] >= 1, "quarter {q} emptied by the holdout");
    }
}

#[test]
fn holdout_without_multi_record_quarters_is_an_error() {
    let data = grid_dataset(5, 1);
    assert!(make_holdout(&data, 0.2, 1).is_err());
}

#[test]
fn holdout_fraction_bounds() {
    let data = grid_dataset(4, 3);
    assert!(make_holdout(&data, 1.0, 1).is_err());
    assert!(make_holdout(&data, -0.1, 1).is_err());
    let zero = make_holdout(&data, 0.0, 1).unwrap();
    assert!(zero.test.is_empty());
    assert_eq!(zero.train.len(), 12);
}

#[test]
fn train_dataset_preserves_structure() {
    let data = grid_dataset(4, 3);
    let split = make_holdout(&data, 0.25, 2).unwrap();
    let train = split.train_dataset(&data).unwrap();
    assert_eq!(train.records.len(), 9);
    assert_eq!(train.category_names, data.category_names);
}

fn mini_branch() -> (HaulDataset, TreeNode) {
    let records = vec![
        HaulRecord { trip_id: 1, obs_index: 1, quarter: 1, counts: vec![1, 3], total: 4 },
        HaulRecord { trip_id: 1, obs_index: 2, quarter: 2, counts: vec![0, 3], total: 3 },
        HaulRecord { trip_id: 2, obs_index: 1, quarter: 2, counts: vec![5, 0], total: 5 },
    ];
    let data = HaulDataset::new(records, vec!["a".into(), "b".into()]).unwrap();
    let node = TreeNode { label: "top".into(), left_set: vec![0], right_set: vec![1] };
    (data, node)
}

fn fixture_h() -> InterpolationMatrix {
    InterpolationMatrix {
        rows: vec![vec![(0, 0.25), (1, 0.75)], vec![(1, 0.5), (2, 0.5)]],
        l: 4,
        placement: Placement::UnitInterval,
        times: vec![0.0625, 0.375],
    }
}

fn constant_model() -> BranchPosterior {
    let (data, node) = mini_branch();
    let branch = aggregate_branch(&data, &node);
    BranchPosterior::for_branch(&branch, Variant::ConstantMean, None, None).unwrap()
}

fn wavelet_model() -> BranchPosterior {
    let (data, node) = mini_branch();
    let branch = aggregate_branch(&data, &node);
    let basis = Arc::new(build_basis(2).unwrap());
    BranchPosterior::for_branch(&branch, Variant::Wavelet, Some(basis), Some(Arc::new(fixture_h())))
        .unwrap()
}

fn archive_for(model: &BranchPosterior, draws: Vec<f64>, kept: usize) -> SampleArchive {
    SampleArchive {
        label: "toy".into(),
        dim: model.layout.dim,
        chains: 1,
        kept_per_chain: kept,
        m_records: 0,
        param_names: (0..model.layout.dim).map(|i| model.layout.coord_name(i)).collect(),
        blocks: model.layout.spans.clone(),
        accept_rate: vec![0.9],
        divergences: vec![0],
        depth_hits: vec![0],
        step_sizes: vec![0.5],
        mean_energy_error: vec![0.0],
        rhat: vec![f64::NAN],
        converged: false,
        seed: 1,
        grid: None,
        draws,
        loglik: Vec::new(),
    }
}

#[test]
fn empty_totals_predict_exactly_zero() {
    let model = constant_model();
    let arch = archive_for(&model, vec![0.0; model.layout.dim], 1);
    let tests = [HoldoutRecord { record_id: 0, y: 0, n: 0, quarter: 1 }];
    let rows = predict_holdout(&arch, &model, &tests, 42).unwrap();
    assert_eq!(rows[0].median, 0.0);
    assert_eq!(rows[0].lo95, 0.0);
    assert_eq!(rows[0].hi95, 0.0);
    assert!(rows[0].covers());
}

#[test]
fn constant_model_predicts_an_even_split() {
    let model = constant_model();
    let arch = archive_for(&model, vec![0.0; model.layout.dim * 50], 50);
    let n = 1_000_000u64;
    let tests = [HoldoutRecord { record_id: 3, y: n / 2, n, quarter: 2 }];
    let rows = predict_holdout(&arch, &model, &tests, 9).unwrap();
    let sd = (n as f64 * 0.25).sqrt();
    assert!(
        (rows[0].median - n as f64 / 2.0).abs() < 3.0 * sd,
        "median {} too far from {}",
        rows[0].median,
        n / 2
    );
    assert!(rows[0].lo95 < rows[0].median && rows[0].median < rows[0].hi95);
}

#[test]
fn wavelet_model_predictions_track_the_mean_curve() {
    let model = wavelet_model();
    let mut draw = vec![0.0; model.layout.dim];
    let span = model.layout.span(Block::Theta, 0).unwrap();
    draw[span].copy_from_slice(&[0.7, -0.3, 0.4, -0.1]);
    let arch = archive_for(&model, draw, 1);
    let n = 1_000_000u64;
    let tests = [HoldoutRecord { record_id: 0, y: 0, n, quarter: 1 }];
    let rows = predict_holdout(&arch, &model, &tests, 31).unwrap();
    let p = 1.0 / (1.0 + (-0.4754150681066197f64).exp());
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!(
        (rows[0].median - n as f64 * p).abs() < 4.0 * sd,
        "median {} vs expectation {}",
        rows[0].median,
        n as f64 * p
    );
}

#[test]
fn interval_coverage_is_calibrated() {
    let model = constant_model();
    let arch = archive_for(&model, vec![0.0; model.layout.dim * 400], 400);
    let n = 400u64;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let tests: Vec<HoldoutRecord> = (0..300)
        .map(|k| HoldoutRecord {
            record_id: k,
            y: sample_binomial(n, 0.5, &mut rng),
            n,
            quarter: 1 + (k % 2),
        })
        .collect();
    let rows = predict_holdout(&arch, &model, &tests, 555).unwrap();
    let covered = rows.iter().filter(|r| r.covers()).count();
    assert!(
        (273..=297).contains(&covered),
        "{covered}/300 covered; incompatible with 95% intervals at the 1% level"
    );
}

#[test]
fn prediction_rejects_incompatible_inputs() {
    let cm = constant_model();
    let wv = wavelet_model();
    let arch_wv = archive_for(&wv, vec![0.0; wv.layout.dim], 1);
    let tests = [HoldoutRecord { record_id: 0, y: 1, n: 2, quarter: 1 }];
    assert!(predict_holdout(&arch_wv, &cm, &tests, 1).is_err(), "dimension mismatch");

    let arch_cm = archive_for(&cm, vec![0.0; cm.layout.dim], 1);
    let bad_q = [HoldoutRecord { record_id: 0, y: 1, n: 2, quarter: 5 }];
    assert!(predict_holdout(&arch_cm, &cm, &bad_q, 1).is_err(), "quarter off the grid");
    let zero_q = [HoldoutRecord { record_id: 0, y: 1, n: 2, quarter: 0 }];
    assert!(predict_holdout(&arch_cm, &cm, &zero_q, 1).is_err(), "quarter zero");
}

#[test]
fn coverage_flag_is_inclusive() {
    let row = PredictionRow { record_id: 0, observed: 4, median: 5.0, lo95: 4.0, hi95: 9.0 };
    assert!(row.covers());
    let miss = PredictionRow { record_id: 0, observed: 3, median: 5.0, lo95: 4.0, hi95: 9.0 };
    assert!(!miss.covers());
}

#[test]
fn kernel_smoother_matches_frozen_value() {
    let out = kernel_smooth(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0], 5.0, &[2.0]);
    assert!((out[0] - 2.331103753497156).abs() < 1e-12, "{}", out[0]);
}

#[test]
fn kernel_smoother_limits() {
    let single = kernel_smooth(&[3.0], &[7.5], 2.0, &[0.0, 3.0, 10.0]);
    for v in single {
        assert!((v - 7.5).abs() < 1e-12);
    }
    let sym = kernel_smooth(&[-1.0, 1.0], &[2.0, 6.0], 1.0, &[0.0]);
    assert!((sym[0] - 4.0).abs() < 1e-12);
}
