//! Gradient-based MCMC: leapfrog integration, No-U-Turn tree building with
//! multinomial sampling within trees, dual-averaging step-size adaptation,
//! diagonal mass-matrix estimation, multi-chain orchestration, and split-chain
//! R-hat diagnostics. A fixed-path-length Hamiltonian transition is available
//! behind a config switch as a debugging baseline.

use crate::model::{BlockSpan, BranchPosterior, SeriesPosterior};
use crate::{Error, Result};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{BufRead, BufReader, BufWriter, Write};

/// Energy error beyond which a trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Algorithm {
    /// No-U-Turn sampler (default).
    Nuts,
    /// Plain HMC with a fixed number of leapfrog steps per transition.
    Hmc { steps: usize },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// Total iterations per chain, including warmup.
    pub iterations: usize,
    pub warmup: usize,
    pub chains: usize,
    /// Keep every `thinning`-th post-warmup draw (1 = keep all).
    pub thinning: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Fixed initial step size; `None` triggers the search heuristic.
    pub init_step: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 2000,
            warmup: 1000,
            chains: 3,
            thinning: 1,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 1,
            algorithm: Algorithm::Nuts,
            init_step: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup >= self.iterations {
            return Err(Error::Config(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if self.chains == 0 {
            return Err(Error::Config("at least one chain is required".into()));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be ≥ 1".into()));
        }
        if (self.iterations - self.warmup) / self.thinning == 0 {
            return Err(Error::Config(format!(
                "thinning {} leaves no retained draws from {} post-warmup iterations",
                self.thinning,
                self.iterations - self.warmup
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if let Algorithm::Hmc { steps } = self.algorithm {
            if steps == 0 {
                return Err(Error::Config("plain HMC needs ≥ 1 leapfrog step".into()));
            }
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.iterations - self.warmup) / self.thinning
    }
}

/// Anything the sampler can draw from: a pure, reentrant unnormalized
/// log-density with gradient over a fixed-dimension real vector.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn log_posterior(&self, q: &[f64]) -> (f64, Vec<f64>);
    /// Per-record log-likelihood at a draw, when the target carries data.
    fn pointwise(&self, _q: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("coord[{i}]")).collect()
    }
    fn blocks(&self) -> Vec<BlockSpan> {
        Vec::new()
    }
    fn label(&self) -> String {
        "target".into()
    }
}

impl Target for BranchPosterior {
    fn dim(&self) -> usize {
        self.layout.dim
    }
    fn log_posterior(&self, q: &[f64]) -> (f64, Vec<f64>) {
        BranchPosterior::log_posterior(self, q)
    }
    fn pointwise(&self, q: &[f64]) -> Option<Vec<f64>> {
        Some(self.pointwise_loglik(q))
    }
    fn param_names(&self) -> Vec<String> {
        (0..self.layout.dim).map(|i| self.layout.coord_name(i)).collect()
    }
    fn blocks(&self) -> Vec<BlockSpan> {
        self.layout.spans.clone()
    }
    fn label(&self) -> String {
        format!("{} [{}]", self.node_label, self.variant)
    }
}

impl Target for SeriesPosterior {
    fn dim(&self) -> usize {
        self.layout.dim
    }
    fn log_posterior(&self, q: &[f64]) -> (f64, Vec<f64>) {
        SeriesPosterior::log_posterior(self, q)
    }
    fn param_names(&self) -> Vec<String> {
        (0..self.layout.dim).map(|i| self.layout.coord_name(i)).collect()
    }
    fn blocks(&self) -> Vec<BlockSpan> {
        self.layout.spans.clone()
    }
    fn label(&self) -> String {
        "series".into()
    }
}

/// A closure-backed target for analytic calibration checks.
pub struct FnTarget<F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync> Target for FnTarget<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_posterior(&self, q: &[f64]) -> (f64, Vec<f64>) {
        (self.f)(q)
    }
}

/// Position/momentum state after one leapfrog step, with the cached density
/// and gradient at the new position.
#[derive(Debug, Clone)]
pub struct LeapfrogStep {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

/// One position-momentum leapfrog update with a diagonal (inverse) mass
/// matrix: half momentum kick, full position drift, half momentum kick.
/// Reversible and volume-preserving; `grad_q` must be ∇ log p at `q`.
pub fn leapfrog<T: Target + ?Sized>(
    target: &T,
    q: &[f64],
    p: &[f64],
    grad_q: &[f64],
    step: f64,
    inv_mass: &[f64],
) -> LeapfrogStep {
    let dim = q.len();
    let mut p_half = vec![0.0; dim];
    for i in 0..dim {
        p_half[i] = p[i] + 0.5 * step * grad_q[i];
    }
    let mut q_new = vec![0.0; dim];
    for i in 0..dim {
        q_new[i] = q[i] + step * inv_mass[i] * p_half[i];
    }
    let (logp, grad) = target.log_posterior(&q_new);
    let mut p_new = p_half;
    for i in 0..dim {
        p_new[i] += 0.5 * step * grad[i];
    }
    LeapfrogStep { q: q_new, p: p_new, logp, grad }
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    p.iter().zip(inv_mass).map(|(&pi, &im)| 0.5 * pi * pi * im).sum()
}

/// Nesterov dual averaging of the log step size toward a target acceptance
/// statistic, per the usual (γ = 0.05, t₀ = 10, κ = 0.75) schedule.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    pub mu: f64,
    pub log_step: f64,
    pub log_step_avg: f64,
    h_avg: f64,
    m: usize,
    pub target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * initial_step).ln(),
            log_step: initial_step.ln(),
            log_step_avg: initial_step.ln(),
            h_avg: 0.0,
            m: 0,
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    /// One adaptation update; returns the step size to use next.
    pub fn adapt(&mut self, accept_stat: f64) -> f64 {
        self.m += 1;
        let m = self.m as f64;
        let eta = 1.0 / (m + self.t0);
        self.h_avg = (1.0 - eta) * self.h_avg + eta * (self.target - accept_stat);
        self.log_step = self.mu - m.sqrt() / self.gamma * self.h_avg;
        let w = m.powf(-self.kappa);
        self.log_step_avg = w * self.log_step + (1.0 - w) * self.log_step_avg;
        self.log_step.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// The smoothed step size, frozen at the end of warmup.
    pub fn averaged(&self) -> f64 {
        self.log_step_avg.exp()
    }
}

/// Outcome of one Markov transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub q: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
    pub accept_stat: f64,
    pub divergent: bool,
    pub depth_hit: bool,
    pub energy_error: f64,
    pub n_leapfrog: usize,
}

struct TreeState {
    q_minus: Vec<f64>,
    p_minus: Vec<f64>,
    grad_minus: Vec<f64>,
    q_plus: Vec<f64>,
    p_plus: Vec<f64>,
    grad_plus: Vec<f64>,
    // Proposal drawn from the tree by multinomial weighting.
    q_prop: Vec<f64>,
    logp_prop: f64,
    grad_prop: Vec<f64>,
    energy_prop: f64,
    log_sum_weight: f64,
    sum_accept: f64,
    n_leapfrog: usize,
    divergent: bool,
    turning: bool,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn uturn(q_plus: &[f64], q_minus: &[f64], p_plus: &[f64], p_minus: &[f64], inv_mass: &[f64]) -> bool {
    let mut fwd = 0.0;
    let mut bwd = 0.0;
    for i in 0..q_plus.len() {
        let dq = q_plus[i] - q_minus[i];
        fwd += dq * inv_mass[i] * p_plus[i];
        bwd += dq * inv_mass[i] * p_minus[i];
    }
    fwd < 0.0 || bwd < 0.0
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    depth: usize,
    q: &[f64],
    p: &[f64],
    grad: &[f64],
    dir: f64,
    step: f64,
    inv_mass: &[f64],
    energy0: f64,
    rng: &mut R,
) -> TreeState {
    if depth == 0 {
        let leap = leapfrog(target, q, p, grad, dir * step, inv_mass);
        let energy = -leap.logp + kinetic(&leap.p, inv_mass);
        let energy_err = energy - energy0;
        let divergent = !energy_err.is_finite() || energy_err > DIVERGENCE_THRESHOLD;
        let log_weight = if divergent { f64::NEG_INFINITY } else { -energy_err };
        let accept = if energy_err.is_finite() { (-energy_err).exp().min(1.0) } else { 0.0 };
        return TreeState {
            q_minus: leap.q.clone(),
            p_minus: leap.p.clone(),
            grad_minus: leap.grad.clone(),
            q_plus: leap.q.clone(),
            p_plus: leap.p.clone(),
            grad_plus: leap.grad.clone(),
            q_prop: leap.q,
            logp_prop: leap.logp,
            grad_prop: leap.grad,
            energy_prop: energy,
            log_sum_weight: log_weight,
            sum_accept: accept,
            n_leapfrog: 1,
            divergent,
            turning: false,
        };
    }

    let mut first = build_tree(target, depth - 1, q, p, grad, dir, step, inv_mass, energy0, rng);
    if first.divergent || first.turning {
        return first;
    }
    let (q_edge, p_edge, grad_edge) = if dir > 0.0 {
        (first.q_plus.clone(), first.p_plus.clone(), first.grad_plus.clone())
    } else {
        (first.q_minus.clone(), first.p_minus.clone(), first.grad_minus.clone())
    };
    let second = build_tree(
        target, depth - 1, &q_edge, &p_edge, &grad_edge, dir, step, inv_mass, energy0, rng,
    );

    first.n_leapfrog += second.n_leapfrog;
    first.sum_accept += second.sum_accept;
    if second.divergent || second.turning {
        first.divergent = second.divergent;
        first.turning = second.turning;
        return first;
    }

    let total = log_add_exp(first.log_sum_weight, second.log_sum_weight);
    if (second.log_sum_weight - total).exp() > rng.random::<f64>() {
        first.q_prop = second.q_prop;
        first.logp_prop = second.logp_prop;
        first.grad_prop = second.grad_prop;
        first.energy_prop = second.energy_prop;
    }
    first.log_sum_weight = total;
    if dir > 0.0 {
        first.q_plus = second.q_plus;
        first.p_plus = second.p_plus;
        first.grad_plus = second.grad_plus;
    } else {
        first.q_minus = second.q_minus;
        first.p_minus = second.p_minus;
        first.grad_minus = second.grad_minus;
    }
    first.turning =
        uturn(&first.q_plus, &first.q_minus, &first.p_plus, &first.p_minus, inv_mass);
    first
}

/// One No-U-Turn transition: doubling trajectory with the U-turn stopping
/// rule and multinomial sampling of the proposal within the tree.
pub fn nuts_draw<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    q: &[f64],
    logp: f64,
    grad: &[f64],
    step: f64,
    max_depth: usize,
    inv_mass: &[f64],
    rng: &mut R,
) -> Transition {
    let dim = q.len();
    let mut p0 = vec![0.0; dim];
    for i in 0..dim {
        let z: f64 = StandardNormal.sample(rng);
        p0[i] = z / inv_mass[i].sqrt();
    }
    let energy0 = -logp + kinetic(&p0, inv_mass);

    let mut q_minus = q.to_vec();
    let mut p_minus = p0.clone();
    let mut grad_minus = grad.to_vec();
    let mut q_plus = q.to_vec();
    let mut p_plus = p0.clone();
    let mut grad_plus = grad.to_vec();
    let mut q_sel = q.to_vec();
    let mut logp_sel = logp;
    let mut grad_sel = grad.to_vec();
    let mut energy_sel = energy0;
    let mut log_sum_weight = 0.0; // weight of the initial leaf: exp(−0) = 1
    let mut sum_accept = 0.0;
    let mut n_leapfrog = 0usize;
    let mut divergent = false;
    let mut depth = 0usize;

    while depth < max_depth {
        let dir: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let subtree = if dir > 0.0 {
            build_tree(target, depth, &q_plus, &p_plus, &grad_plus, dir, step, inv_mass, energy0, rng)
        } else {
            build_tree(target, depth, &q_minus, &p_minus, &grad_minus, dir, step, inv_mass, energy0, rng)
        };
        sum_accept += subtree.sum_accept;
        n_leapfrog += subtree.n_leapfrog;
        if subtree.divergent {
            divergent = true;
            break;
        }
        if subtree.turning {
            break;
        }
        // Biased progressive sampling: favor the fresh half of the trajectory.
        let take_prob = (subtree.log_sum_weight - log_sum_weight).exp().min(1.0);
        if rng.random::<f64>() < take_prob {
            q_sel = subtree.q_prop.clone();
            logp_sel = subtree.logp_prop;
            grad_sel = subtree.grad_prop.clone();
            energy_sel = subtree.energy_prop;
        }
        log_sum_weight = log_add_exp(log_sum_weight, subtree.log_sum_weight);
        if dir > 0.0 {
            q_plus = subtree.q_plus;
            p_plus = subtree.p_plus;
            grad_plus = subtree.grad_plus;
        } else {
            q_minus = subtree.q_minus;
            p_minus = subtree.p_minus;
            grad_minus = subtree.grad_minus;
        }
        depth += 1;
        if uturn(&q_plus, &q_minus, &p_plus, &p_minus, inv_mass) {
            break;
        }
    }

    Transition {
        q: q_sel,
        logp: logp_sel,
        grad: grad_sel,
        accept_stat: if n_leapfrog > 0 { sum_accept / n_leapfrog as f64 } else { 0.0 },
        divergent,
        depth_hit: depth >= max_depth && max_depth > 0,
        energy_error: (energy_sel - energy0).abs(),
        n_leapfrog,
    }
}

/// One fixed-path-length Hamiltonian transition with a Metropolis correction.
pub fn hmc_draw<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    q: &[f64],
    logp: f64,
    grad: &[f64],
    step: f64,
    n_steps: usize,
    inv_mass: &[f64],
    rng: &mut R,
) -> Transition {
    let dim = q.len();
    let mut p0 = vec![0.0; dim];
    for i in 0..dim {
        let z: f64 = StandardNormal.sample(rng);
        p0[i] = z / inv_mass[i].sqrt();
    }
    let energy0 = -logp + kinetic(&p0, inv_mass);
    let mut cur = LeapfrogStep { q: q.to_vec(), p: p0, logp, grad: grad.to_vec() };
    for _ in 0..n_steps {
        cur = leapfrog(target, &cur.q, &cur.p, &cur.grad, step, inv_mass);
        if !cur.logp.is_finite() {
            break;
        }
    }
    let energy1 = -cur.logp + kinetic(&cur.p, inv_mass);
    let energy_err = energy1 - energy0;
    let divergent = !energy_err.is_finite() || energy_err > DIVERGENCE_THRESHOLD;
    let accept = if energy_err.is_finite() { (-energy_err).exp().min(1.0) } else { 0.0 };
    if !divergent && rng.random::<f64>() < accept {
        Transition {
            q: cur.q,
            logp: cur.logp,
            grad: cur.grad,
            accept_stat: accept,
            divergent,
            depth_hit: false,
            energy_error: energy_err.abs(),
            n_leapfrog: n_steps,
        }
    } else {
        Transition {
            q: q.to_vec(),
            logp,
            grad: grad.to_vec(),
            accept_stat: accept,
            divergent,
            depth_hit: false,
            energy_error: if energy_err.is_finite() { energy_err.abs() } else { f64::INFINITY },
            n_leapfrog: n_steps,
        }
    }
}

/// Split-chain potential scale reduction factor for one parameter. Chains are
/// halved, and the between/within variance ratio is computed over the split
/// sequences. Zero within-chain variance yields NaN (undefined, flagged).
pub fn rhat(chains: &[Vec<f64>]) -> f64 {
    let mut seqs: Vec<&[f64]> = Vec::with_capacity(chains.len() * 2);
    let half = chains.iter().map(|c| c.len() / 2).min().unwrap_or(0);
    if chains.len() < 2 || half < 2 {
        return f64::NAN;
    }
    for c in chains {
        seqs.push(&c[..half]);
        seqs.push(&c[c.len() - half..]);
    }
    let m = seqs.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return f64::NAN;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// How a fitted mean maps onto its dyadic grid; carried in archives so the
/// wavelet transform of the posterior mean can be recomputed from the file
/// alone.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridMeta {
    /// Wavelet depth D (grid length 2^D).
    pub d: usize,
    /// Number of integer time points, for centered placement.
    pub t_max: usize,
    /// True when observation times live on the unit interval instead.
    pub unit_interval: bool,
    /// Number of observations (unit-interval placement).
    pub n_obs: usize,
}

/// JSON has no NaN/inf literals, so diagnostic vectors that may hold them
/// (single-chain rhat, divergent energy errors) are written with non-finite
/// entries as strings and read back through `f64::from_str`.
mod tagged_floats {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for &x in v {
            if x.is_finite() {
                seq.serialize_element(&x)?;
            } else {
                seq.serialize_element(&format!("{x:?}"))?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        Vec::<Raw>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Raw::Num(x) => Ok(x),
                Raw::Tag(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
            })
            .collect()
    }
}

/// Everything retained from a sampler run: post-warmup draws per chain, the
/// pointwise log-likelihood matrix, and per-chain diagnostics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SampleArchive {
    pub label: String,
    pub dim: usize,
    pub chains: usize,
    pub kept_per_chain: usize,
    pub m_records: usize,
    pub param_names: Vec<String>,
    pub blocks: Vec<BlockSpan>,
    pub accept_rate: Vec<f64>,
    pub divergences: Vec<usize>,
    pub depth_hits: Vec<usize>,
    pub step_sizes: Vec<f64>,
    #[serde(with = "tagged_floats")]
    pub mean_energy_error: Vec<f64>,
    #[serde(with = "tagged_floats")]
    pub rhat: Vec<f64>,
    pub converged: bool,
    pub seed: u64,
    #[serde(default)]
    pub grid: Option<GridMeta>,
    #[serde(skip)]
    pub draws: Vec<f64>,
    #[serde(skip)]
    pub loglik: Vec<f64>,
}

impl SampleArchive {
    pub fn kept_total(&self) -> usize {
        self.chains * self.kept_per_chain
    }

    /// Pooled draw by flat index (chain-major).
    pub fn draw(&self, h: usize) -> &[f64] {
        &self.draws[h * self.dim..(h + 1) * self.dim]
    }

    /// Pointwise log-likelihood row for pooled draw `h`.
    pub fn loglik_row(&self, h: usize) -> &[f64] {
        &self.loglik[h * self.m_records..(h + 1) * self.m_records]
    }

    /// One coordinate's series within one chain.
    pub fn coord_series(&self, chain: usize, coord: usize) -> Vec<f64> {
        (0..self.kept_per_chain)
            .map(|i| self.draws[(chain * self.kept_per_chain + i) * self.dim + coord])
            .collect()
    }

    /// One coordinate pooled across chains.
    pub fn pooled_coord(&self, coord: usize) -> Vec<f64> {
        (0..self.kept_total()).map(|h| self.draw(h)[coord]).collect()
    }

    /// Pooled mean of one coordinate.
    pub fn coord_mean(&self, coord: usize) -> f64 {
        let v = self.pooled_coord(coord);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Equal-tailed quantile of one coordinate by the nearest-rank rule.
    pub fn coord_quantile(&self, coord: usize, prob: f64) -> f64 {
        let mut v = self.pooled_coord(coord);
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        quantile_sorted(&v, prob)
    }

    /// Write the archive: a JSON header line naming parameter blocks and
    /// offsets, then the draw matrix and log-likelihood matrix in labeled
    /// sections, one row per line, full-precision decimal floats.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = serde_json::to_string(self)?;
        writeln!(w, "{header}")?;
        writeln!(w, "DRAWS {} {}", self.kept_total(), self.dim)?;
        for h in 0..self.kept_total() {
            let row: Vec<String> = self.draw(h).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        writeln!(w, "LOGLIK {} {}", self.kept_total(), self.m_records)?;
        for h in 0..self.kept_total() {
            let row: Vec<String> = self.loglik_row(h).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<SampleArchive> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Archive("empty archive file".into()))??;
        let mut arch: SampleArchive = serde_json::from_str(&header)
            .map_err(|e| Error::Archive(format!("bad archive header: {e}")))?;
        let parse_section = |lines: &mut std::io::Lines<BufReader<std::fs::File>>,
                             tag: &str,
                             rows: usize,
                             cols: usize|
         -> Result<Vec<f64>> {
            let marker = lines
                .next()
                .ok_or_else(|| Error::Archive(format!("missing {tag} section")))??;
            let mut parts = marker.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(Error::Archive(format!("expected {tag} marker, got '{marker}'")));
            }
            let r: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Archive(format!("bad {tag} dimensions")))?;
            let c: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Archive(format!("bad {tag} dimensions")))?;
            if r != rows || c != cols {
                return Err(Error::Archive(format!(
                    "{tag} section is {r}×{c}, header says {rows}×{cols}"
                )));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Archive(format!("truncated {tag} section")))??;
                for tok in line.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::Archive(format!("bad float '{tok}' in {tag}")))?;
                    data.push(v);
                }
            }
            if data.len() != rows * cols {
                return Err(Error::Archive(format!(
                    "{tag} section has {} values, expected {}",
                    data.len(),
                    rows * cols
                )));
            }
            Ok(data)
        };
        let total = arch.chains * arch.kept_per_chain;
        arch.draws = parse_section(&mut lines, "DRAWS", total, arch.dim)?;
        arch.loglik = parse_section(&mut lines, "LOGLIK", total, arch.m_records)?;
        Ok(arch)
    }
}

fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (prob * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Heuristic initial step size: double or halve until one leapfrog step's
/// acceptance probability crosses 1/2.
fn initial_step<T: Target + ?Sized, R: Rng + ?Sized>(
    target: &T,
    q: &[f64],
    logp: f64,
    grad: &[f64],
    inv_mass: &[f64],
    rng: &mut R,
) -> f64 {
    let dim = q.len();
    let mut p = vec![0.0; dim];
    for i in 0..dim {
        let z: f64 = StandardNormal.sample(rng);
        p[i] = z / inv_mass[i].sqrt();
    }
    let energy0 = -logp + kinetic(&p, inv_mass);
    let mut step = 1.0;
    let ratio = |step: f64| -> f64 {
        let leap = leapfrog(target, q, &p, grad, step, inv_mass);
        let e = -leap.logp + kinetic(&leap.p, inv_mass);
        (energy0 - e).exp()
    };
    let mut r = ratio(step);
    let mut guard = 0;
    while !r.is_finite() && guard < 60 {
        step *= 0.5;
        r = ratio(step);
        guard += 1;
    }
    let dir: f64 = if r > 0.5 { 1.0 } else { -1.0 };
    loop {
        guard += 1;
        if guard > 120 || step < 1e-10 || step > 1e7 {
            break;
        }
        let cond = if dir > 0.0 { r > 0.5 } else { r < 0.5 };
        if !cond {
            break;
        }
        step *= 2.0f64.powf(dir);
        r = ratio(step);
        if !r.is_finite() {
            step *= 0.5;
            break;
        }
    }
    step
}

struct ChainResult {
    draws: Vec<f64>,
    loglik: Vec<f64>,
    accept_rate: f64,
    divergences: usize,
    depth_hits: usize,
    step_size: f64,
    mean_energy_error: f64,
}

fn run_chain<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    chain_idx: usize,
    init: Option<&[f64]>,
    m_records: usize,
) -> Result<ChainResult> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1 + chain_idx as u64);

    let mut q = match init {
        Some(v) => v.to_vec(),
        None => (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let (mut logp, mut grad) = target.log_posterior(&q);
    let mut tries = 0;
    while !logp.is_finite() && tries < 100 {
        q = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (lp, g) = target.log_posterior(&q);
        logp = lp;
        grad = g;
        tries += 1;
    }
    if !logp.is_finite() {
        return Err(Error::Sampler(format!(
            "chain {chain_idx}: no finite starting point found for '{}'",
            target.label()
        )));
    }

    let mut inv_mass = vec![1.0; dim];
    let mut step = config
        .init_step
        .unwrap_or_else(|| initial_step(target, &q, logp, &grad, &inv_mass, &mut rng));
    let mut da = DualAveraging::new(step, config.target_accept);

    // Warmup phases: step-size adaptation throughout; the window
    // [warmup/2, 0.95·warmup) feeds the diagonal mass estimate, after which
    // the step size is re-initialized and re-adapted under the new metric.
    let adapt_mass = config.warmup >= 40;
    let mass_lo = config.warmup / 2;
    let mass_hi = (0.95 * config.warmup as f64).floor() as usize;
    let mut welford_n = 0usize;
    let mut welford_mean = vec![0.0; dim];
    let mut welford_m2 = vec![0.0; dim];

    let mut warmup_divergences = 0usize;
    for it in 0..config.warmup {
        let tr = match config.algorithm {
            Algorithm::Nuts => nuts_draw(
                target, &q, logp, &grad, step, config.max_tree_depth, &inv_mass, &mut rng,
            ),
            Algorithm::Hmc { steps } => {
                hmc_draw(target, &q, logp, &grad, step, steps, &inv_mass, &mut rng)
            }
        };
        q = tr.q;
        logp = tr.logp;
        grad = tr.grad;
        if tr.divergent {
            warmup_divergences += 1;
        }
        step = da.adapt(tr.accept_stat);

        if adapt_mass && it >= mass_lo && it < mass_hi {
            welford_n += 1;
            for i in 0..dim {
                let d = q[i] - welford_mean[i];
                welford_mean[i] += d / welford_n as f64;
                welford_m2[i] += d * (q[i] - welford_mean[i]);
            }
        }
        if adapt_mass && it + 1 == mass_hi && welford_n >= 10 {
            let n = welford_n as f64;
            for i in 0..dim {
                let var = welford_m2[i] / (n - 1.0);
                // Shrink toward a small constant for stability.
                inv_mass[i] = (n / (n + 5.0) * var + 1e-3 * 5.0 / (n + 5.0)).max(1e-10);
            }
            step = initial_step(target, &q, logp, &grad, &inv_mass, &mut rng);
            da = DualAveraging::new(step, config.target_accept);
        }
    }
    if config.warmup > 0 && warmup_divergences == config.warmup {
        return Err(Error::Sampler(format!(
            "chain {chain_idx}: every warmup transition diverged for '{}' (step {:.3e}); \
             the posterior may be improper or the gradients invalid",
            target.label(),
            step
        )));
    }
    if config.warmup > 0 {
        step = da.averaged();
    }

    let kept = config.kept_per_chain();
    let mut draws = Vec::with_capacity(kept * dim);
    let mut loglik = Vec::with_capacity(kept * m_records);
    let mut sum_accept = 0.0;
    let mut divergences = 0usize;
    let mut depth_hits = 0usize;
    let mut sum_energy_error = 0.0;
    let post = config.iterations - config.warmup;
    for it in 0..post {
        let tr = match config.algorithm {
            Algorithm::Nuts => nuts_draw(
                target, &q, logp, &grad, step, config.max_tree_depth, &inv_mass, &mut rng,
            ),
            Algorithm::Hmc { steps } => {
                hmc_draw(target, &q, logp, &grad, step, steps, &inv_mass, &mut rng)
            }
        };
        q = tr.q;
        logp = tr.logp;
        grad = tr.grad;
        sum_accept += tr.accept_stat;
        if tr.divergent {
            divergences += 1;
        }
        if tr.depth_hit {
            depth_hits += 1;
        }
        if tr.energy_error.is_finite() {
            sum_energy_error += tr.energy_error;
        }
        if (it + 1) % config.thinning == 0 && draws.len() < kept * dim {
            draws.extend_from_slice(&q);
            if let Some(pw) = target.pointwise(&q) {
                debug_assert_eq!(pw.len(), m_records);
                loglik.extend_from_slice(&pw);
            }
        }
    }

    Ok(ChainResult {
        draws,
        loglik,
        accept_rate: sum_accept / post as f64,
        divergences,
        depth_hits,
        step_size: step,
        mean_energy_error: sum_energy_error / post as f64,
    })
}

/// Run all chains of the configured sampler against a target. Chains execute
/// in parallel on independent RNG streams derived from the master seed, so
/// results are bit-for-bit reproducible regardless of scheduling. `inits`
/// supplies optional per-chain starting points (warm starts); missing entries
/// fall back to U(−1, 1) initialization.
pub fn run<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    inits: &[Vec<f64>],
) -> Result<SampleArchive> {
    config.validate()?;
    let dim = target.dim();
    for (c, init) in inits.iter().enumerate() {
        if init.len() != dim {
            return Err(Error::Config(format!(
                "init for chain {c} has length {}, target dimension is {dim}",
                init.len()
            )));
        }
    }
    let m_records = target.pointwise(&vec![0.0; dim]).map(|v| v.len()).unwrap_or(0);

    let results: Vec<Result<ChainResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| {
                let init = inits.get(c).map(|v| v.as_slice());
                scope.spawn(move || run_chain(target, config, c, init, m_records))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });

    let mut chains_out = Vec::with_capacity(config.chains);
    for r in results {
        chains_out.push(r?);
    }

    let kept = config.kept_per_chain();
    let mut draws = Vec::with_capacity(config.chains * kept * dim);
    let mut loglik = Vec::with_capacity(config.chains * kept * m_records);
    for c in &chains_out {
        draws.extend_from_slice(&c.draws);
        loglik.extend_from_slice(&c.loglik);
    }

    let mut rhats = Vec::with_capacity(dim);
    for coord in 0..dim {
        let series: Vec<Vec<f64>> = (0..config.chains)
            .map(|c| {
                (0..kept).map(|i| chains_out[c].draws[i * dim + coord]).collect::<Vec<f64>>()
            })
            .collect();
        rhats.push(rhat(&series));
    }
    let converged = config.chains >= 2 && rhats.iter().all(|r| r.is_finite() && *r < 1.1);

    let archive = SampleArchive {
        label: target.label(),
        dim,
        chains: config.chains,
        kept_per_chain: kept,
        m_records,
        param_names: target.param_names(),
        blocks: target.blocks(),
        accept_rate: chains_out.iter().map(|c| c.accept_rate).collect(),
        divergences: chains_out.iter().map(|c| c.divergences).collect(),
        depth_hits: chains_out.iter().map(|c| c.depth_hits).collect(),
        step_sizes: chains_out.iter().map(|c| c.step_size).collect(),
        mean_energy_error: chains_out.iter().map(|c| c.mean_energy_error).collect(),
        rhat: rhats,
        converged,
        seed: config.seed,
        grid: None,
        draws,
        loglik,
    };
    Ok(archive)
}
