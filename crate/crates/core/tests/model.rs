use nestwave::counts::{aggregate_branch, HaulDataset, HaulRecord, TreeNode};
use nestwave::model::{Block, BranchPosterior, ParamLayout, SeriesPosterior, Variant};
use nestwave::wavelet::{build_basis, InterpolationMatrix, Placement};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn branch_fixture() -> (BranchPosterior, BranchPosterior, BranchPosterior, BranchPosterior) {
    let records = vec![
        HaulRecord { trip_id: 1, obs_index: 1, quarter: 1, counts: vec![1, 3], total: 4 },
        HaulRecord { trip_id: 1, obs_index: 2, quarter: 2, counts: vec![0, 3], total: 3 },
        HaulRecord { trip_id: 2, obs_index: 1, quarter: 2, counts: vec![5, 0], total: 5 },
    ];
    let data = HaulDataset::new(records, vec!["a".into(), "b".into()]).unwrap();
    let node = TreeNode { label: "top".into(), left_set: vec![0], right_set: vec![1] };
    let branch = aggregate_branch(&data, &node);
    let basis = Arc::new(build_basis(2).unwrap());
    let h = Arc::new(fixture_h());
    let mk = |v: Variant| {
        let (b, hh) = if v == Variant::ConstantMean {
            (None, None)
        } else {
            (Some(basis.clone()), Some(h.clone()))
        };
        BranchPosterior::for_branch(&branch, v, b, hh).unwrap()
    };
    (
        mk(Variant::ConstantMean),
        mk(Variant::Wavelet),
        mk(Variant::WaveletZi),
        mk(Variant::WaveletZani),
    )
}

fn fixture_h() -> InterpolationMatrix {
    InterpolationMatrix {
        rows: vec![vec![(0, 0.25), (1, 0.75)], vec![(1, 0.5), (2, 0.5)]],
        l: 4,
        placement: Placement::UnitInterval,
        times: vec![0.0625, 0.375],
    }
}

fn set(params: &mut [f64], layout: &ParamLayout, block: Block, cat: usize, vals: &[f64]) {
    let r = layout.span(block, cat).unwrap_or_else(|| panic!("missing block {block:?}"));
    assert_eq!(r.len(), vals.len(), "{block:?} length");
    params[r].copy_from_slice(vals);
}

fn frozen_branch_params(layout: &ParamLayout, variant: Variant) -> Vec<f64> {
    let mut q = vec![0.0; layout.dim];
    set(&mut q, layout, Block::Eta, 0, &[0.3, -0.9, 1.4]);
    set(&mut q, layout, Block::RanEf, 0, &[0.2, -0.5]);
    set(&mut q, layout, Block::LogSigma, 0, &[-0.4]);
    set(&mut q, layout, Block::LogSigmaU, 0, &[-0.7]);
    if variant != Variant::ConstantMean {
        set(&mut q, layout, Block::Theta, 0, &[0.7, -0.3, 0.4, -0.1]);
        set(&mut q, layout, Block::LogDelta, 0, &[0.1, -0.2, 0.3]);
        set(&mut q, layout, Block::LogPhi, 0, &[0.25]);
        set(&mut q, layout, Block::Alpha1, 0, &[0.6]);
        set(&mut q, layout, Block::Alpha2, 0, &[-0.3]);
    }
    if matches!(variant, Variant::WaveletZi | Variant::WaveletZani) {
        set(&mut q, layout, Block::Lambda0, 0, &[0.8]);
    }
    if variant == Variant::WaveletZani {
        set(&mut q, layout, Block::LambdaN, 0, &[-1.1]);
    }
    q
}

#[test]
fn frozen_log_posterior_values() {
    let (cmb, wb, wzib, wzanib) = branch_fixture();
    let cases = [
        (&cmb, -23.027628667902288),
        (&wb, -196.85357559397224),
        (&wzib, -199.56596771955236),
        (&wzanib, -202.64869351508068),
    ];
    for (model, want) in cases {
        let q = frozen_branch_params(&model.layout, model.variant);
        let (lp, _) = model.log_posterior(&q);
        assert!(
            (lp - want).abs() < 1e-9,
            "{}: {lp} vs {want}",
            model.variant
        );
    }
}

#[test]
fn frozen_pointwise_values() {
    let (_, _, _, wzanib) = branch_fixture();
    let q = frozen_branch_params(&wzanib.layout, Variant::WaveletZani);
    let pw = wzanib.pointwise_loglik(&q);
    let want = [-1.8347990591703793, -0.4444630169788477, -0.9202338831045253];
    assert_eq!(pw.len(), 3);
    for (g, w) in pw.iter().zip(&want) {
        assert!((g - w).abs() < 1e-10, "{pw:?}");
    }
}

fn multinomial_fixture() -> BranchPosterior {
    let rows = [[1u64, 2, 1], [0, 1, 2], [3, 0, 2]];
    let quarters = [1usize, 2, 2];
    let trips = [1usize, 1, 2];
    let records: Vec<HaulRecord> = rows
        .iter()
        .zip(quarters.iter().zip(&trips))
        .enumerate()
        .map(|(i, (c, (&q, &j)))| HaulRecord {
            trip_id: j,
            obs_index: i + 1,
            quarter: q,
            counts: c.to_vec(),
            total: c.iter().sum(),
        })
        .collect();
    let data =
        HaulDataset::new(records, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let basis = Arc::new(build_basis(2).unwrap());
    BranchPosterior::for_multinomial(&data, basis, Arc::new(fixture_h())).unwrap()
}

#[test]
fn frozen_multinomial_log_posterior() {
    let model = multinomial_fixture();
    let mut q = vec![0.0; model.layout.dim];
    let layout = &model.layout;
    set(&mut q, layout, Block::Eta, 0, &[0.3, -0.9, 1.4]);
    set(&mut q, layout, Block::Eta, 1, &[-0.2, 0.5, 0.1]);
    set(&mut q, layout, Block::Theta, 0, &[0.7, -0.3, 0.4, -0.1]);
    set(&mut q, layout, Block::Theta, 1, &[0.2, 0.6, -0.5, 0.3]);
    set(&mut q, layout, Block::RanEf, 0, &[0.2, -0.5]);
    set(&mut q, layout, Block::RanEf, 1, &[-0.1, 0.4]);
    set(&mut q, layout, Block::LogSigma, 0, &[-0.4]);
    set(&mut q, layout, Block::LogSigma, 1, &[-0.2]);
    set(&mut q, layout, Block::LogSigmaU, 0, &[-0.7]);
    set(&mut q, layout, Block::LogSigmaU, 1, &[-0.9]);
    set(&mut q, layout, Block::LogDelta, 0, &[0.1, -0.2, 0.3]);
    set(&mut q, layout, Block::LogDelta, 1, &[0.0, 0.15, -0.1]);
    set(&mut q, layout, Block::LogPhi, 0, &[0.25]);
    set(&mut q, layout, Block::LogPhi, 1, &[-0.35]);
    set(&mut q, layout, Block::Alpha1, 0, &[0.6]);
    set(&mut q, layout, Block::Alpha1, 1, &[-0.2]);
    set(&mut q, layout, Block::Alpha2, 0, &[-0.3]);
    set(&mut q, layout, Block::Alpha2, 1, &[0.5]);
    let (lp, _) = model.log_posterior(&q);
    assert!((lp - -423.22213597285213).abs() < 1e-9, "{lp}");
}

fn fd_check(
    label: &str,
    dim: usize,
    f: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    points: usize,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for point in 0..points {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grad) = f(&q);
        for i in 0..dim {
            let h = 1e-5 * (1.0 + q[i].abs());
            let mut qp = q.clone();
            qp[i] += h;
            let mut qm = q.clone();
            qm[i] -= h;
            let fd = (f(&qp).0 - f(&qm).0) / (2.0 * h);
            let denom = 1.0 + grad[i].abs().max(fd.abs());
            assert!(
                (grad[i] - fd).abs() / denom < 1e-4,
                "{label} point {point} coord {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_for_all_variants() {
    let (cmb, wb, wzib, wzanib) = branch_fixture();
    let multi = multinomial_fixture();
    for model in [&cmb, &wb, &wzib, &wzanib, &multi] {
        let label = model.variant.to_string();
        fd_check(
            &label,
            model.layout.dim,
            &|q: &[f64]| model.log_posterior(q),
            20,
            0xA11CE ^ model.layout.dim as u64,
        );
    }
}

#[test]
fn series_gradient_matches_finite_differences() {
    let basis = Arc::new(build_basis(3).unwrap());
    let times: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
    let h = Arc::new(
        nestwave::wavelet::build_interpolation(&times, &basis, Placement::UnitInterval).unwrap(),
    );
    let values: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
    let model = SeriesPosterior::new(&values, basis, h).unwrap();
    fd_check("series", model.layout.dim, &|q: &[f64]| model.log_posterior(q), 10, 99);
}

#[test]
fn layout_spans_partition_the_vector() {
    let (cmb, wb, _, wzanib) = branch_fixture();
    let multi = multinomial_fixture();
    for model in [&cmb, &wb, &wzanib, &multi] {
        let mut cover = vec![false; model.layout.dim];
        for span in &model.layout.spans {
            for i in span.offset..span.offset + span.len {
                assert!(!cover[i], "offset {i} covered twice");
                cover[i] = true;
            }
        }
        assert!(cover.iter().all(|&c| c), "{:?}", model.variant);
    }
    assert_eq!(cmb.layout.dim, 7);
    assert_eq!(wb.layout.dim, 17);
    assert_eq!(wzanib.layout.dim, 19);
    assert_eq!(multi.layout.dim, 34);
}

#[test]
fn coord_names_are_unique_and_labelled() {
    let multi = multinomial_fixture();
    let names: Vec<String> =
        (0..multi.layout.dim).map(|i| multi.layout.coord_name(i)).collect();
    let unique: std::collections::HashSet<&String> = names.iter().collect();
    assert_eq!(unique.len(), names.len(), "{names:?}");
}

#[test]
fn empty_pairs_are_excluded_from_eta_but_kept_pointwise() {
    let records = vec![
        HaulRecord { trip_id: 1, obs_index: 1, quarter: 1, counts: vec![2, 1], total: 3 },
        HaulRecord { trip_id: 1, obs_index: 2, quarter: 1, counts: vec![0, 0], total: 0 },
        HaulRecord { trip_id: 2, obs_index: 1, quarter: 2, counts: vec![1, 4], total: 5 },
    ];
    let data = HaulDataset::new(records, vec!["a".into(), "b".into()]).unwrap();
    let node = TreeNode { label: "top".into(), left_set: vec![0], right_set: vec![1] };
    let branch = aggregate_branch(&data, &node);
    let model = BranchPosterior::for_branch(&branch, Variant::ConstantMean, None, None).unwrap();
    assert_eq!(model.record_count(), 3);
    assert_eq!(model.live_count(), 2);
    assert_eq!(model.layout.span(Block::Eta, 0).unwrap().len(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = model.default_init(&mut rng);
    let pw = model.pointwise_loglik(&q);
    assert_eq!(pw.len(), 3);
    assert_eq!(pw[1], 0.0, "empty record contributes exactly zero");
}

#[test]
fn all_empty_branch_is_rejected() {
    let records = vec![
        HaulRecord { trip_id: 1, obs_index: 1, quarter: 1, counts: vec![0, 0], total: 0 },
        HaulRecord { trip_id: 1, obs_index: 2, quarter: 1, counts: vec![0, 0], total: 0 },
    ];
    let data = HaulDataset::new(records, vec!["a".into(), "b".into()]).unwrap();
    let node = TreeNode { label: "top".into(), left_set: vec![0], right_set: vec![1] };
    let branch = aggregate_branch(&data, &node);
    assert!(BranchPosterior::for_branch(&branch, Variant::ConstantMean, None, None).is_err());
}

#[test]
fn wavelet_variants_demand_a_basis() {
    let (cmb, ..) = branch_fixture();
    let _ = cmb;
    let records = vec![HaulRecord {
        trip_id: 1,
        obs_index: 1,
        quarter: 1,
        counts: vec![1, 1],
        total: 2,
    }];
    let data = HaulDataset::new(records, vec!["a".into(), "b".into()]).unwrap();
    let node = TreeNode { label: "top".into(), left_set: vec![0], right_set: vec![1] };
    let branch = aggregate_branch(&data, &node);
    assert!(BranchPosterior::for_branch(&branch, Variant::Wavelet, None, None).is_err());
}

#[test]
fn warm_start_embedding_copies_shared_blocks() {
    let (cmb, wb, wzib, wzanib) = branch_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let q0 = cmb.default_init(&mut rng);
    let q1 = wb.embed_from(&cmb, &q0).unwrap();
    for block in [Block::Eta, Block::RanEf, Block::LogSigma, Block::LogSigmaU] {
        let a = cmb.layout.span(block, 0).unwrap();
        let b = wb.layout.span(block, 0).unwrap();
        assert_eq!(&q0[a], &q1[b], "{block:?} copied");
    }
    let theta = wb.layout.span(Block::Theta, 0).unwrap();
    assert!(q1[theta].iter().all(|&v| v == 0.0));

    let q2 = wzib.embed_from(&wb, &q1).unwrap();
    let l0 = wzib.layout.span(Block::Lambda0, 0).unwrap();
    assert_eq!(q2[l0.start], -3.0);

    let q3 = wzanib.embed_from(&wzib, &q2).unwrap();
    let ln = wzanib.layout.span(Block::LambdaN, 0).unwrap();
    assert_eq!(q3[ln.start], -3.0);
    assert_eq!(q3[wzanib.layout.span(Block::Lambda0, 0).unwrap().start], q2[l0.start]);

    // The reverse direction is refused.
    assert!(wb.embed_from(&wzanib, &q3).is_err());
}

#[test]
fn non_finite_parameters_reject_rather_than_poison() {
    let (_, wb, _, _) = branch_fixture();
    let mut q = frozen_branch_params(&wb.layout, Variant::Wavelet);
    q[0] = f64::NAN;
    let (lp, grad) = wb.log_posterior(&q);
    assert_eq!(lp, f64::NEG_INFINITY);
    assert!(grad.iter().all(|&g| g == 0.0));
    assert!(wb.diagnose(&q).is_err());
}

#[test]
fn diagnose_reports_finite_terms_at_reasonable_points() {
    let (_, _, _, wzanib) = branch_fixture();
    let q = frozen_branch_params(&wzanib.layout, Variant::WaveletZani);
    let terms = wzanib.diagnose(&q).unwrap();
    let total = terms.total();
    assert!((total - -202.64869351508068).abs() < 1e-9);
    assert!(terms.likelihood < 0.0);
}
