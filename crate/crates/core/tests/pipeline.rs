use nestwave::counts::parse_nesting_path;
use nestwave::eval::PredictionRow;
use nestwave::hmc::{SampleArchive, SamplerConfig};
use nestwave::model::Variant;
use nestwave::pipeline::{
    default_depth, fit_all, fit_series, ingest, read_bands_csv, read_empirical_csv,
    read_holdout_csv, read_series_csv, read_smoother_csv, simulate_counts,
    simulate_regime_switch, transform_from_archive, write_bands_csv, write_empirical_csv,
    write_holdout_csv, write_series_csv, write_smoother_csv, BranchGen, GenConfig, GenNode,
    RunConfig, WaicTable,
};
use std::path::Path;

#[test]
fn regime_switch_series_has_the_advertised_tones() {
    let series = simulate_regime_switch(128, 0.0, 1).unwrap();
    assert_eq!(series.len(), 128);
    for (i, &(t, _)) in series.iter().enumerate() {
        assert!((t - i as f64 / 128.0).abs() < 1e-15);
    }
    // Before the switch only the 4-cycle tone: zero at a full period.
    let (t_a, y_a) = series[32];
    assert!((t_a - 0.25).abs() < 1e-15);
    assert!(y_a.abs() < 1e-12, "{y_a}");
    // After the switch the 10-cycle tone peaks where the 4-cycle one is zero.
    let (t_b, y_b) = series[80];
    assert!((t_b - 0.625).abs() < 1e-15);
    assert!((y_b - 2.0).abs() < 1e-12, "{y_b}");
}

#[test]
fn regime_switch_needs_a_minimum_grid_and_honors_the_seed() {
    assert!(simulate_regime_switch(15, 0.1, 1).is_err());
    let a = simulate_regime_switch(32, 0.5, 9).unwrap();
    let b = simulate_regime_switch(32, 0.5, 9).unwrap();
    let c = simulate_regime_switch(32, 0.5, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn series_csv_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    let series = simulate_regime_switch(32, 0.3, 4).unwrap();
    write_series_csv(&series, &path).unwrap();
    let back = read_series_csv(&path).unwrap();
    assert_eq!(series, back);
}

fn two_category_gen(seed: u64) -> GenConfig {
    GenConfig {
        categories: vec!["left".into(), "right".into()],
        nodes: vec![GenNode {
            label: "top".into(),
            left: vec!["left".into()],
            right: vec!["right".into()],
        }],
        t_max: 8,
        trips: 3,
        records_per_quarter: 4,
        depth: 3,
        n_range: (5, 15),
        seed,
        branches: vec![BranchGen {
            label: "top".into(),
            theta: Vec::new(),
            sigma: 0.3,
            sigma_u: 0.2,
            lambda0: None,
            lambda_n: None,
        }],
    }
}

#[test]
fn simulated_counts_respect_the_configured_shape() {
    let cfg = two_category_gen(9);
    let (data, truth) = simulate_counts(&cfg).unwrap();
    assert_eq!(data.records.len(), 32);
    assert_eq!(data.t_max, 8);
    assert_eq!(data.category_names, cfg.categories);
    for r in &data.records {
        assert!(r.trip_id >= 1 && r.trip_id <= 3);
        assert!((5..=15).contains(&r.total));
        assert_eq!(r.counts.iter().sum::<u64>(), r.total);
    }
    assert_eq!(truth.mu.len(), 1);
    assert_eq!(truth.mu[0].0, "top");
    assert_eq!(truth.mu[0].1, vec![0.0; 8], "empty theta means a flat logit curve");
}

#[test]
fn simulated_counts_are_reproducible() {
    let cfg = two_category_gen(12);
    let (a, _) = simulate_counts(&cfg).unwrap();
    let (b, _) = simulate_counts(&cfg).unwrap();
    assert_eq!(a.records, b.records);
    let (c, _) = simulate_counts(&two_category_gen(13)).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn zero_inflation_in_the_generator_shows_up_in_the_counts() {
    let mut cfg = two_category_gen(31);
    cfg.t_max = 10;
    cfg.depth = 4;
    cfg.records_per_quarter = 100;
    cfg.n_range = (3, 8);
    cfg.branches[0].sigma = 0.0;
    cfg.branches[0].sigma_u = 0.0;
    cfg.branches[0].lambda0 = Some(5.0);
    let (data, _) = simulate_counts(&cfg).unwrap();
    let zeros = data.records.iter().filter(|r| r.counts[0] == 0).count();
    let frac = zeros as f64 / data.records.len() as f64;
    assert!(frac >= 0.3, "zero fraction {frac} too small for a strong inflation weight");
}

#[test]
fn generator_mean_curves_follow_the_supplied_coefficients() {
    let mut cfg = two_category_gen(2);
    let mut theta = vec![0.0; 8];
    theta[0] = 1.2;
    theta[2] = -0.8;
    cfg.branches[0].theta = theta.clone();
    let (_, truth) = simulate_counts(&cfg).unwrap();
    let basis = nestwave::wavelet::build_basis(3).unwrap();
    let curve = basis.synthesize(&theta);
    let mu = &truth.mu[0].1;
    assert_eq!(mu.len(), 8);
    assert!(mu.iter().any(|&v| v.abs() > 0.1), "curve should be non-flat");
    let spread =
        mu.iter().cloned().fold(f64::MIN, f64::max) - mu.iter().cloned().fold(f64::MAX, f64::min);
    let raw_spread = curve.iter().cloned().fold(f64::MIN, f64::max)
        - curve.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread > 0.0 && spread <= raw_spread + 1e-12);
}

#[test]
fn generator_rejects_inconsistent_configs() {
    let mut bad_range = two_category_gen(1);
    bad_range.n_range = (8, 3);
    assert!(simulate_counts(&bad_range).is_err());

    let mut shallow = two_category_gen(1);
    shallow.depth = 2;
    shallow.t_max = 10;
    assert!(simulate_counts(&shallow).is_err());

    let mut orphan = two_category_gen(1);
    orphan.branches[0].label = "elsewhere".into();
    assert!(simulate_counts(&orphan).is_err());

    let mut short_theta = two_category_gen(1);
    short_theta.branches[0].theta = vec![0.5; 3];
    assert!(simulate_counts(&short_theta).is_err());

    let mut no_trips = two_category_gen(1);
    no_trips.trips = 0;
    assert!(simulate_counts(&no_trips).is_err());
}

#[test]
fn gen_config_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gen.json");
    let cfg = two_category_gen(5);
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let back = GenConfig::read_json(&path).unwrap();
    assert_eq!(back.categories, cfg.categories);
    assert_eq!(back.n_range, cfg.n_range);
    assert_eq!(back.branches[0].sigma, cfg.branches[0].sigma);
    let tree = back.nesting_tree().unwrap();
    assert_eq!(tree.nodes.len(), 1);
}

#[test]
fn waic_table_round_trip_and_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("waic_table.csv");
    let table = WaicTable {
        columns: vec!["CM-B".into(), "W-B".into(), "MULTINOMIAL".into()],
        branch_rows: vec![
            ("gadoids".into(), vec![Some(10.5), Some(20.25), None]),
            ("flatfish".into(), vec![Some(1.5), Some(2.75), None]),
        ],
        total: vec![Some(12.0), Some(23.0), Some(99.5)],
    };
    table.write_csv(&path).unwrap();
    let back = WaicTable::read_csv(&path).unwrap();
    assert_eq!(back, table);
    assert!(back.totals_consistent(1e-9));

    let mut off = table.clone();
    off.total[0] = Some(12.5);
    assert!(!off.totals_consistent(1e-9));

    let mut missing = table.clone();
    missing.total[1] = None;
    assert!(!missing.totals_consistent(1e-9));

    let mut multi_only = table;
    multi_only.total[2] = Some(-3.25);
    assert!(multi_only.totals_consistent(1e-9), "multinomial column has no branch cells");
}

#[test]
fn plot_data_csvs_round_trip() {
    let dir = tempfile::tempdir().unwrap();

    let bands = vec![(1usize, 0.5, 0.25, 0.75), (2, 0.625, 0.5, 0.875)];
    let bp = dir.path().join("bands.csv");
    write_bands_csv(&bp, &bands).unwrap();
    assert_eq!(read_bands_csv(&bp).unwrap(), bands);

    let emp = vec![(0usize, 1usize, 0.25, -0.12), (3, 2, 0.8, 0.29)];
    let ep = dir.path().join("empirical.csv");
    write_empirical_csv(&ep, &emp).unwrap();
    assert_eq!(read_empirical_csv(&ep).unwrap(), emp);

    let smooth = vec![(1usize, 0.31), (2, 0.42), (3, 0.40)];
    let sp = dir.path().join("smoother.csv");
    write_smoother_csv(&sp, &smooth).unwrap();
    assert_eq!(read_smoother_csv(&sp).unwrap(), smooth);
}

#[test]
fn holdout_csv_supports_both_scales() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        PredictionRow { record_id: 2, observed: 9, median: 16.0, lo95: 4.0, hi95: 25.0 },
        PredictionRow { record_id: 5, observed: 0, median: 1.0, lo95: 0.0, hi95: 4.0 },
    ];
    let raw = dir.path().join("holdout.csv");
    write_holdout_csv(&raw, &rows, false).unwrap();
    let back = read_holdout_csv(&raw).unwrap();
    assert_eq!(back[0], (2, 9.0, 16.0, 4.0, 25.0));

    let sqrt = dir.path().join("holdout_sqrt.csv");
    write_holdout_csv(&sqrt, &rows, true).unwrap();
    let back = read_holdout_csv(&sqrt).unwrap();
    assert_eq!(back[0], (2, 3.0, 4.0, 2.0, 5.0));
    assert_eq!(back[1], (5, 0.0, 1.0, 0.0, 2.0));
}

#[test]
fn ingest_summarizes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hauls.csv");
    std::fs::write(
        &path,
        "trip,obs,quarter,cod,haddock,whiting\n\
         1,1,1,10,4,2\n\
         1,2,1,8,0,1\n\
         2,1,2,0,3,3\n\
         3,1,3,5,1,0\n",
    )
    .unwrap();
    let (data, summary) = ingest(&path).unwrap();
    assert_eq!(data.len(), 4);
    assert_eq!(summary.records, 4);
    assert_eq!(summary.trips, 3);
    assert_eq!(summary.quarters, 3);
    assert_eq!(summary.categories, 3);
    assert_eq!(summary.top_category, "cod");
    assert!((summary.top_share - 23.0 / 37.0).abs() < 1e-12);
    assert_eq!(summary.category_totals[1], ("haddock".to_string(), 8));
    let text = summary.to_string();
    assert!(text.contains("4 hauls"));
    assert!(text.contains("cod"));
}

#[test]
fn default_depth_is_the_smallest_covering_dyadic_grid() {
    assert_eq!(default_depth(1), 2);
    assert_eq!(default_depth(4), 2);
    assert_eq!(default_depth(5), 3);
    assert_eq!(default_depth(16), 4);
    assert_eq!(default_depth(17), 5);
}

fn write_fit_inputs(dir: &Path, seed: u64) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = two_category_gen(seed);
    let (data, _) = simulate_counts(&cfg).unwrap();
    let data_path = dir.join("hauls.csv");
    data.write_csv(std::fs::File::create(&data_path).unwrap()).unwrap();
    let nesting_path = dir.join("nesting.json");
    let tree = cfg.nesting_tree().unwrap();
    std::fs::write(&nesting_path, tree.to_config_json()).unwrap();
    (data_path, nesting_path)
}

fn smoke_sampler() -> SamplerConfig {
    SamplerConfig {
        iterations: 300,
        warmup: 150,
        chains: 2,
        seed: 1,
        ..SamplerConfig::default()
    }
}

#[test]
fn run_config_validation_catches_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data_path, nesting_path) = write_fit_inputs(dir.path(), 3);
    let good = RunConfig {
        data_path: data_path.clone(),
        nesting_path: nesting_path.clone(),
        variants: vec![Variant::ConstantMean],
        sampler: smoke_sampler(),
        holdout_fraction: None,
        warm_start: true,
        parallel_branches: false,
        out_dir: dir.path().join("out"),
        seed: 1,
        depth: None,
        transform_draws: 5,
    };
    assert!(good.validate().is_ok());

    let mut missing = good.clone();
    missing.data_path = dir.path().join("nowhere.csv");
    assert!(missing.validate().is_err());

    let mut empty = good.clone();
    empty.variants.clear();
    assert!(empty.validate().is_err());

    let mut bad_fraction = good.clone();
    bad_fraction.holdout_fraction = Some(1.0);
    assert!(bad_fraction.validate().is_err());

    let mut bad_sampler = good;
    bad_sampler.sampler.warmup = 900;
    assert!(bad_sampler.validate().is_err());
}

#[test]
fn fit_all_produces_the_documented_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data_path, nesting_path) = write_fit_inputs(dir.path(), 17);
    let out_dir = dir.path().join("out");
    let config = RunConfig {
        data_path,
        nesting_path,
        variants: vec![Variant::ConstantMean, Variant::Wavelet],
        sampler: smoke_sampler(),
        holdout_fraction: Some(0.15),
        warm_start: true,
        parallel_branches: false,
        out_dir: out_dir.clone(),
        seed: 5,
        depth: None,
        transform_draws: 5,
    };
    let bundle = fit_all(&config).unwrap();

    assert_eq!(bundle.attempted, 2);
    assert_eq!(bundle.succeeded, 2, "failures: {:?}", bundle.failures);
    assert!(bundle.failures.is_empty(), "{:?}", bundle.failures);

    for name in [
        "empirical_top.csv",
        "smoother_top.csv",
        "archive_top_cmb.dat",
        "archive_top_wb.dat",
        "bands_top_cmb.csv",
        "bands_top_wb.csv",
        "transform_top_wb.csv",
        "holdout_top_cmb.csv",
        "holdout_top_cmb_sqrt.csv",
        "holdout_top_wb.csv",
        "holdout_top_wb_sqrt.csv",
        "waic_table.csv",
        "holdout_split.json",
    ] {
        assert!(out_dir.join(name).exists(), "missing output {name}");
    }

    let table = WaicTable::read_csv(&out_dir.join("waic_table.csv")).unwrap();
    assert_eq!(table.columns, vec!["CM-B".to_string(), "W-B".to_string()]);
    assert_eq!(table.branch_rows.len(), 1);
    assert!(table.totals_consistent(1e-9));
    assert!(table.total.iter().all(|c| c.map(|v| v.is_finite()).unwrap_or(false)));

    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("holdout_split.json")).unwrap())
            .unwrap();
    let n_test = split["test"].as_array().unwrap().len();
    assert_eq!(n_test, 5, "15% of 32 records");

    let holdout = read_holdout_csv(&out_dir.join("holdout_top_wb.csv")).unwrap();
    assert_eq!(holdout.len(), n_test);

    let archive = SampleArchive::load(&out_dir.join("archive_top_wb.dat")).unwrap();
    assert_eq!(archive.label, "top:W-B");
    assert_eq!(archive.chains, 2);
    assert_eq!(archive.kept_per_chain, 150);
    let grid = archive.grid.expect("fitted archives carry grid metadata");
    assert_eq!(grid.d, 3);
    assert_eq!(grid.t_max, 8);
    assert!(!grid.unit_interval);

    let bands = read_bands_csv(&out_dir.join("bands_top_cmb.csv")).unwrap();
    assert_eq!(bands.len(), 8);
    for &(_, med, lo, hi) in &bands {
        assert_eq!(med, 0.5, "the constant model plots a flat reference band");
        assert_eq!(lo, 0.5);
        assert_eq!(hi, 0.5);
    }
    let wb_bands = read_bands_csv(&out_dir.join("bands_top_wb.csv")).unwrap();
    for &(_, med, lo, hi) in &wb_bands {
        assert!(lo <= med && med <= hi);
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    let empirical = read_empirical_csv(&out_dir.join("empirical_top.csv")).unwrap();
    assert_eq!(empirical.len(), 32, "empirical points come from the full dataset");
    for &(_, q, prop, jit) in &empirical {
        assert!((1..=8).contains(&q));
        assert!((0.0..=1.0).contains(&prop));
        assert!(jit.abs() <= 0.3);
    }
}

#[test]
fn fit_all_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (data_path, nesting_path) = write_fit_inputs(dir.path(), 23);
    let mk = |out: &Path| RunConfig {
        data_path: data_path.clone(),
        nesting_path: nesting_path.clone(),
        variants: vec![Variant::ConstantMean],
        sampler: SamplerConfig {
            iterations: 200,
            warmup: 100,
            chains: 2,
            seed: 1,
            ..SamplerConfig::default()
        },
        holdout_fraction: Some(0.10),
        warm_start: true,
        parallel_branches: false,
        out_dir: out.to_path_buf(),
        seed: 77,
        depth: None,
        transform_draws: 5,
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    fit_all(&mk(&out_a)).unwrap();
    fit_all(&mk(&out_b)).unwrap();
    for name in ["waic_table.csv", "archive_top_cmb.dat", "holdout_top_cmb.csv"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn fit_all_rejects_mismatched_nesting() {
    let dir = tempfile::tempdir().unwrap();
    let (data_path, _) = write_fit_inputs(dir.path(), 3);
    let other = dir.path().join("other.json");
    std::fs::write(
        &other,
        r#"{"categories":["x","y"],"nodes":[{"label":"top","left":["x"],"right":["y"]}]}"#,
    )
    .unwrap();
    let config = RunConfig {
        data_path,
        nesting_path: other,
        variants: vec![Variant::ConstantMean],
        sampler: smoke_sampler(),
        holdout_fraction: None,
        warm_start: true,
        parallel_branches: false,
        out_dir: dir.path().join("out"),
        seed: 1,
        depth: None,
        transform_draws: 5,
    };
    assert!(fit_all(&config).is_err());
}

#[test]
fn series_fit_writes_a_recomputable_transform() {
    let dir = tempfile::tempdir().unwrap();
    let series = simulate_regime_switch(64, 0.1, 7).unwrap();
    let sampler = SamplerConfig {
        iterations: 300,
        warmup: 150,
        chains: 2,
        seed: 2,
        ..SamplerConfig::default()
    };
    let fit = fit_series(&series, 5, &sampler, dir.path(), 5).unwrap();
    assert!(fit.archive_path.exists());
    assert!(fit.transform_path.exists());
    assert_eq!(fit.summary.d, 5);
    assert_eq!(fit.archive.label, "series");
    let grid = fit.archive.grid.unwrap();
    assert!(grid.unit_interval);
    assert_eq!(grid.n_obs, 64);

    let loaded = SampleArchive::load(&fit.archive_path).unwrap();
    let again = transform_from_archive(&loaded, 5).unwrap();
    for level in 0..=5 {
        let a = fit.summary.median_level_energy(level, 0, 32);
        let b = again.median_level_energy(level, 0, 32);
        assert!((a - b).abs() < 1e-12, "level {level}: {a} vs {b}");
    }
}

#[test]
fn transform_requires_grid_metadata_and_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let series = simulate_regime_switch(32, 0.1, 3).unwrap();
    let sampler = SamplerConfig {
        iterations: 120,
        warmup: 60,
        chains: 1,
        seed: 4,
        ..SamplerConfig::default()
    };
    let fit = fit_series(&series, 4, &sampler, dir.path(), 3).unwrap();

    let mut no_grid = SampleArchive::load(&fit.archive_path).unwrap();
    no_grid.grid = None;
    assert!(transform_from_archive(&no_grid, 3).is_err());

    let mut no_theta = SampleArchive::load(&fit.archive_path).unwrap();
    no_theta.blocks.retain(|b| b.block != nestwave::model::Block::Theta);
    assert!(transform_from_archive(&no_theta, 3).is_err());
}

#[test]
fn nesting_file_round_trips_through_the_generator_config() {
    let dir = tempfile::tempdir().unwrap();
    let (_, nesting_path) = write_fit_inputs(dir.path(), 3);
    let tree = parse_nesting_path(&nesting_path).unwrap();
    assert_eq!(tree.nodes.len(), 1);
    assert_eq!(tree.category_names, vec!["left".to_string(), "right".to_string()]);
}
