//! Model evaluation: WAIC from pointwise log-likelihood matrices, holdout
//! construction restricted to multi-observation time points, and posterior
//! predictive intervals for held-out counts.

use crate::counts::HaulDataset;
use crate::dist::{self, sigmoid};
use crate::hmc::SampleArchive;
use crate::model::{Block, BranchPosterior, Variant};
use crate::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// WAIC decomposition; `waic = -2·lpd_hat + 2·p_waic` holds exactly.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WaicResult {
    pub waic: f64,
    pub lpd_hat: f64,
    /// Effective number of parameters.
    pub p_waic: f64,
    /// Per-observation log pointwise predictive densities.
    pub pointwise_lpd: Vec<f64>,
    /// Per-observation variance contributions to `p_waic`.
    pub pointwise_p: Vec<f64>,
}

/// WAIC over a flat H×M log-likelihood matrix (draw-major). lpd̂ sums
/// per-observation log-mean-exp over draws; p_WAIC sums per-observation
/// sample variances with the (H−1) denominator.
pub fn waic(loglik: &[f64], h_draws: usize, m: usize) -> Result<WaicResult> {
    if h_draws < 2 {
        return Err(Error::Data(format!(
            "WAIC needs at least 2 draws, got {h_draws}"
        )));
    }
    if loglik.len() != h_draws * m {
        return Err(Error::Data(format!(
            "log-likelihood matrix has {} entries, expected {h_draws}×{m}",
            loglik.len()
        )));
    }
    if let Some(bad) = loglik.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: "pointwise log-likelihood",
            detail: format!(" (value {bad})"),
        });
    }
    let mut pointwise_lpd = Vec::with_capacity(m);
    let mut pointwise_p = Vec::with_capacity(m);
    for i in 0..m {
        let col = (0..h_draws).map(|h| loglik[h * m + i]);
        let max = col.clone().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = col.clone().map(|v| (v - max).exp()).sum();
        pointwise_lpd.push(max + (sum_exp / h_draws as f64).ln());
        // Welford's running variance over the column.
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (k, v) in col.enumerate() {
            let d = v - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (v - mean);
        }
        pointwise_p.push(m2 / (h_draws - 1) as f64);
    }
    let lpd_hat: f64 = pointwise_lpd.iter().sum();
    let p_waic: f64 = pointwise_p.iter().sum();
    Ok(WaicResult {
        waic: -2.0 * lpd_hat + 2.0 * p_waic,
        lpd_hat,
        p_waic,
        pointwise_lpd,
        pointwise_p,
    })
}

/// WAIC of a fitted archive's stored log-likelihood matrix.
pub fn waic_archive(archive: &SampleArchive) -> Result<WaicResult> {
    waic(&archive.loglik, archive.kept_total(), archive.m_records)
}

/// A seed-reproducible train/test split over haul records. Test records are
/// drawn only from time points carrying at least two records, and every time
/// point keeps at least one training record.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HoldoutSplit {
    /// Indices into the dataset's record vector.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub fraction: f64,
    /// Per-record eligibility under the multi-observation rule.
    pub eligible: Vec<bool>,
}

pub fn make_holdout(data: &HaulDataset, fraction: f64, seed: u64) -> Result<HoldoutSplit> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let multi = data.quarters_with_at_least(2);
    let mut quarter_count = vec![0usize; data.t_max + 1];
    for r in &data.records {
        quarter_count[r.quarter] += 1;
    }
    let eligible: Vec<bool> =
        data.records.iter().map(|r| multi.binary_search(&r.quarter).is_ok()).collect();
    let mut candidates: Vec<usize> =
        (0..data.records.len()).filter(|&i| eligible[i]).collect();
    if candidates.is_empty() {
        return Err(Error::Data(
            "no time point has multiple observations; holdout is impossible".into(),
        ));
    }
    let n_test = (fraction * data.records.len() as f64).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates shuffle of the candidate order.
    for i in (1..candidates.len()).rev() {
        let j = rng.random_range(0..=i);
        candidates.swap(i, j);
    }
    let mut remaining = quarter_count;
    let mut test = Vec::with_capacity(n_test);
    for &idx in &candidates {
        if test.len() >= n_test {
            break;
        }
        let q = data.records[idx].quarter;
        if remaining[q] >= 2 {
            remaining[q] -= 1;
            test.push(idx);
        }
    }
    test.sort_unstable();
    let test_set: std::collections::HashSet<usize> = test.iter().copied().collect();
    let train: Vec<usize> =
        (0..data.records.len()).filter(|i| !test_set.contains(i)).collect();
    Ok(HoldoutSplit { train, test, fraction, eligible })
}

impl HoldoutSplit {
    /// The training records as a standalone dataset; original record ids are
    /// preserved in `obs_index`.
    pub fn train_dataset(&self, data: &HaulDataset) -> Result<HaulDataset> {
        let records = self.train.iter().map(|&i| data.records[i].clone()).collect();
        HaulDataset::new(records, data.category_names.clone())
    }
}

/// One held-out branch observation to score.
#[derive(Debug, Clone, Copy)]
pub struct HoldoutRecord {
    pub record_id: usize,
    pub y: u64,
    pub n: u64,
    pub quarter: usize,
}

/// Predictive summary for one held-out record.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PredictionRow {
    pub record_id: usize,
    pub observed: u64,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl PredictionRow {
    pub fn covers(&self) -> bool {
        let y = self.observed as f64;
        y >= self.lo95 && y <= self.hi95
    }
}

/// Posterior predictive draws for held-out records. For every retained draw
/// the success probability comes from the fitted mean alone, p = logit⁻¹(μ_t)
/// — random effects and the over-dispersion noise are not used — and ỹ is
/// sampled from the variant's count distribution given the observed total Ñ.
/// Reported intervals are equal-tailed 2.5/50/97.5 percentiles.
pub fn predict_holdout(
    archive: &SampleArchive,
    model: &BranchPosterior,
    tests: &[HoldoutRecord],
    seed: u64,
) -> Result<Vec<PredictionRow>> {
    if archive.dim != model.layout.dim {
        return Err(Error::Config(format!(
            "archive dimension {} does not match the model's {}",
            archive.dim, model.layout.dim
        )));
    }
    let t_count = model.quarter_count();
    for t in tests {
        if t.quarter == 0 || t.quarter > t_count {
            return Err(Error::Data(format!(
                "held-out record {} sits at time point {} outside the fitted grid 1..={t_count}",
                t.record_id, t.quarter
            )));
        }
    }
    let theta_span = model.layout.span(Block::Theta, 0);
    let l0_span = model.layout.span(Block::Lambda0, 0);
    let ln_span = model.layout.span(Block::LambdaN, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h_total = archive.kept_total();
    let mut sampled: Vec<Vec<u64>> = vec![Vec::with_capacity(h_total); tests.len()];
    for h in 0..h_total {
        let draw = archive.draw(h);
        let mu: Option<Vec<f64>> = theta_span.clone().map(|r| {
            let basis = model.basis().expect("wavelet variant carries a basis");
            let hmat = model.interpolation().expect("wavelet variant carries H");
            hmat.apply(&basis.synthesize(&draw[r]))
        });
        let l0 = l0_span.clone().map(|r| draw[r.start]).unwrap_or(f64::NEG_INFINITY);
        let ln = ln_span.clone().map(|r| draw[r.start]).unwrap_or(f64::NEG_INFINITY);
        for (k, t) in tests.iter().enumerate() {
            let m_t = mu.as_ref().map(|v| v[t.quarter - 1]).unwrap_or(0.0);
            let p = sigmoid(m_t);
            let y = match model.variant {
                Variant::ConstantMean | Variant::Wavelet => dist::sample_binomial(t.n, p, &mut rng),
                Variant::WaveletZi | Variant::WaveletZani => {
                    dist::sample_zani(t.n, p, l0, ln, &mut rng)?
                }
                Variant::Multinomial => {
                    return Err(Error::Config(
                        "holdout prediction applies to the nested branch models".into(),
                    ))
                }
            };
            sampled[k].push(y);
        }
    }
    Ok(tests
        .iter()
        .zip(sampled.iter_mut())
        .map(|(t, s)| {
            s.sort_unstable();
            PredictionRow {
                record_id: t.record_id,
                observed: t.y,
                median: nearest_rank(s, 0.5),
                lo95: nearest_rank(s, 0.025),
                hi95: nearest_rank(s, 0.975),
            }
        })
        .collect())
}

fn nearest_rank(sorted: &[u64], prob: f64) -> f64 {
    let rank = (prob * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1] as f64
}

/// Gaussian kernel smoother: at each evaluation point, the weighted mean of
/// the values with weights exp(−(t−x)²/(2·bandwidth²)).
pub fn kernel_smooth(times: &[f64], values: &[f64], bandwidth: f64, eval_at: &[f64]) -> Vec<f64> {
    assert_eq!(times.len(), values.len(), "times and values must pair up");
    eval_at
        .iter()
        .map(|&x| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (&t, &v) in times.iter().zip(values) {
                let z = (t - x) / bandwidth;
                let w = (-0.5 * z * z).exp();
                num += w * v;
                den += w;
            }
            if den > 0.0 {
                num / den
            } else {
                f64::NAN
            }
        })
        .collect()
}
