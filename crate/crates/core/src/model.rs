//! Per-branch unnormalized log-posteriors with exact gradients, over packed
//! unconstrained parameter vectors.
//!
//! Every variant shares the same skeleton: a count likelihood whose success
//! probability is logit⁻¹(η) record by record, a Gaussian latent layer
//! η ~ N(μ_t + b_j, σ²) with μ = H·Wᵗ·θ, trip random effects b_j ~ N(0, σ_u²),
//! the multiplicative-gamma shrinkage prior on θ, and weak priors on the
//! remaining scalars. Positive parameters are sampled on the log scale and
//! the gamma shapes through scaled logits, with the Jacobian terms folded
//! into the density. Gradients are assembled by hand; a finite-difference
//! audit in the test suite keeps them honest.

use crate::counts::{BranchDataset, HaulDataset};
use crate::dist::{self, sigmoid};
use crate::shrink::{self, ln_half_cauchy};
use crate::wavelet::{InterpolationMatrix, WaveletBasis};
use crate::{Error, Result};
use rand::{Rng, RngExt};
use statrs::function::gamma::digamma;
use std::fmt;
use std::sync::Arc;

const LN_2PI: f64 = 1.8378770664093453;

/// The five competing model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    /// Constant-mean binomial: θ fixed at 0, no wavelet blocks at all.
    ConstantMean,
    /// Wavelet binomial.
    Wavelet,
    /// Wavelet zero-inflated binomial (adds λ0).
    WaveletZi,
    /// Wavelet zero-and-N-inflated binomial (adds λ0 and λN).
    WaveletZani,
    /// Wavelet multinomial-logit on the un-nested K-category data.
    Multinomial,
}

impl Variant {
    pub fn display_name(&self) -> &'static str {
        match self {
            Variant::ConstantMean => "CM-B",
            Variant::Wavelet => "W-B",
            Variant::WaveletZi => "W-ZI-B",
            Variant::WaveletZani => "W-ZaNI-B",
            Variant::Multinomial => "MULTINOMIAL",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cmb" => Ok(Variant::ConstantMean),
            "wb" => Ok(Variant::Wavelet),
            "wzib" => Ok(Variant::WaveletZi),
            "wzanib" => Ok(Variant::WaveletZani),
            "multinomial" => Ok(Variant::Multinomial),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected cmb, wb, wzib, wzanib or multinomial)"
            ))),
        }
    }

    /// Nested-variant complexity order used for warm starting.
    pub fn nested_rank(&self) -> Option<usize> {
        match self {
            Variant::ConstantMean => Some(0),
            Variant::Wavelet => Some(1),
            Variant::WaveletZi => Some(2),
            Variant::WaveletZani => Some(3),
            Variant::Multinomial => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Identity of a packed parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Block {
    Eta,
    Theta,
    RanEf,
    LogSigma,
    LogSigmaU,
    Lambda0,
    LambdaN,
    LogDelta,
    LogPhi,
    Alpha1,
    Alpha2,
}

impl Block {
    pub fn name(&self) -> &'static str {
        match self {
            Block::Eta => "eta",
            Block::Theta => "theta",
            Block::RanEf => "b",
            Block::LogSigma => "log_sigma",
            Block::LogSigmaU => "log_sigma_u",
            Block::Lambda0 => "lambda0",
            Block::LambdaN => "lambdaN",
            Block::LogDelta => "log_delta",
            Block::LogPhi => "log_phi",
            Block::Alpha1 => "alpha1_unc",
            Block::Alpha2 => "alpha2_unc",
        }
    }
}

/// One contiguous span of the packed vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockSpan {
    pub block: Block,
    /// Category index for the multinomial variant; 0 elsewhere.
    pub category: usize,
    pub offset: usize,
    pub len: usize,
}

/// Packing layout: block spans with recorded offsets; pack/unpack is the
/// identity on the underlying storage, so round-trips are exact.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamLayout {
    pub spans: Vec<BlockSpan>,
    pub dim: usize,
}

impl ParamLayout {
    fn build(blocks: &[(Block, usize, usize)]) -> ParamLayout {
        let mut spans = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for &(block, category, len) in blocks {
            spans.push(BlockSpan { block, category, offset, len });
            offset += len;
        }
        ParamLayout { spans, dim: offset }
    }

    /// Span of a block, if the variant carries it.
    pub fn span(&self, block: Block, category: usize) -> Option<std::ops::Range<usize>> {
        self.spans
            .iter()
            .find(|s| s.block == block && s.category == category)
            .map(|s| s.offset..s.offset + s.len)
    }

    /// Human-readable name of one coordinate.
    pub fn coord_name(&self, idx: usize) -> String {
        for s in &self.spans {
            if idx >= s.offset && idx < s.offset + s.len {
                let sub = idx - s.offset;
                return if s.len == 1 {
                    format!("{}[{}]", s.block.name(), s.category)
                } else {
                    format!("{}[{}][{}]", s.block.name(), s.category, sub)
                };
            }
        }
        format!("coord[{idx}]")
    }
}

/// Natural-log transform pair for positive parameters.
pub fn to_log(x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::Domain(format!("{x} is not positive")));
    }
    Ok(x.ln())
}

/// Scaled logit mapping (lo, hi) onto the real line.
pub fn scaled_logit(x: f64, lo: f64, hi: f64) -> Result<f64> {
    if x <= lo || x >= hi {
        return Err(Error::Domain(format!("{x} outside ({lo}, {hi})")));
    }
    let u = (x - lo) / (hi - lo);
    Ok((u / (1.0 - u)).ln())
}

/// Inverse of [`scaled_logit`].
pub fn scaled_logit_inv(u: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * sigmoid(u)
}

/// Named pieces of the log-posterior, for diagnostics and tests.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Terms {
    pub likelihood: f64,
    pub latent: f64,
    pub random_effects: f64,
    pub scale_priors: f64,
    pub shrinkage: f64,
    pub lambda_prior: f64,
    pub jacobian: f64,
}

impl Terms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.latent
            + self.random_effects
            + self.scale_priors
            + self.shrinkage
            + self.lambda_prior
            + self.jacobian
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            (self.likelihood, "likelihood"),
            (self.latent, "latent"),
            (self.random_effects, "random_effects"),
            (self.scale_priors, "scale_priors"),
            (self.shrinkage, "shrinkage"),
            (self.lambda_prior, "lambda_prior"),
            (self.jacobian, "jacobian"),
        ]
        .iter()
        .find(|(v, _)| !v.is_finite())
        .map(|&(_, n)| n)
    }
}

struct MultiData {
    counts: Vec<Vec<u64>>,
    totals: Vec<u64>,
    k: usize,
}

enum DataKind {
    Branch { y: Vec<u64>, n: Vec<u64> },
    Multi(MultiData),
}

/// The log-posterior of one branch model (or of the multinomial model), with
/// exact gradients over the packed unconstrained parameters. Immutable after
/// construction; evaluation is pure and reentrant.
pub struct BranchPosterior {
    pub variant: Variant,
    pub layout: ParamLayout,
    pub node_label: String,
    data: DataKind,
    /// Per live record: (0-based quarter, 0-based trip).
    idx: Vec<(usize, usize)>,
    /// Map from live-record position to original record index.
    live: Vec<usize>,
    m_total: usize,
    t_count: usize,
    j_count: usize,
    basis: Option<Arc<WaveletBasis>>,
    h: Option<Arc<InterpolationMatrix>>,
    depths: Vec<usize>,
    pub nu: f64,
    pub lambda_prior_var: f64,
    pub half_cauchy_scale: f64,
}

impl BranchPosterior {
    /// Nested branch model over aggregated (ỹ, Ñ) pairs.
    pub fn for_branch(
        data: &BranchDataset,
        variant: Variant,
        basis: Option<Arc<WaveletBasis>>,
        h: Option<Arc<InterpolationMatrix>>,
    ) -> Result<Self> {
        if variant == Variant::Multinomial {
            return Err(Error::Config(
                "the multinomial variant runs on the un-nested dataset".into(),
            ));
        }
        if variant != Variant::ConstantMean && (basis.is_none() || h.is_none()) {
            return Err(Error::Config(format!(
                "{variant} needs a wavelet basis and interpolation matrix"
            )));
        }
        let mut y = Vec::new();
        let mut n = Vec::new();
        let mut idx = Vec::new();
        let mut live = Vec::new();
        for (i, p) in data.pairs.iter().enumerate() {
            if p.n == 0 {
                continue;
            }
            y.push(p.y);
            n.push(p.n);
            idx.push((p.quarter - 1, p.trip_id - 1));
            live.push(i);
        }
        if live.is_empty() {
            return Err(Error::Data(format!(
                "branch '{}' has no records with positive totals",
                data.node_label
            )));
        }
        let depths = basis
            .as_ref()
            .map(|b| shrink::depth_map(&b.detail_map))
            .unwrap_or_default();
        let layout = Self::layout_for(variant, live.len(), data.j_max, &basis, 1);
        Ok(BranchPosterior {
            variant,
            layout,
            node_label: data.node_label.clone(),
            data: DataKind::Branch { y, n },
            idx,
            live,
            m_total: data.pairs.len(),
            t_count: data.t_max,
            j_count: data.j_max,
            basis,
            h,
            depths,
            nu: 3.0,
            lambda_prior_var: 100.0,
            half_cauchy_scale: 100.0,
        })
    }

    /// Multinomial-logit model over the raw K-category records.
    pub fn for_multinomial(
        data: &HaulDataset,
        basis: Arc<WaveletBasis>,
        h: Arc<InterpolationMatrix>,
    ) -> Result<Self> {
        let mut counts = Vec::new();
        let mut totals = Vec::new();
        let mut idx = Vec::new();
        let mut live = Vec::new();
        for (i, r) in data.records.iter().enumerate() {
            if r.total == 0 {
                continue;
            }
            counts.push(r.counts.clone());
            totals.push(r.total);
            idx.push((r.quarter - 1, r.trip_id - 1));
            live.push(i);
        }
        if live.is_empty() {
            return Err(Error::Data("no records with positive totals".into()));
        }
        let depths = shrink::depth_map(&basis.detail_map);
        let layout =
            Self::layout_for(Variant::Multinomial, live.len(), data.j_max, &Some(basis.clone()), data.k - 1);
        Ok(BranchPosterior {
            variant: Variant::Multinomial,
            layout,
            node_label: "multinomial".into(),
            data: DataKind::Multi(MultiData { counts, totals, k: data.k }),
            idx,
            live,
            m_total: data.records.len(),
            t_count: data.t_max,
            j_count: data.j_max,
            basis: Some(basis),
            h: Some(h),
            depths,
            nu: 3.0,
            lambda_prior_var: 100.0,
            half_cauchy_scale: 100.0,
        })
    }

    fn layout_for(
        variant: Variant,
        m_live: usize,
        j: usize,
        basis: &Option<Arc<WaveletBasis>>,
        free_categories: usize,
    ) -> ParamLayout {
        let mut blocks = Vec::new();
        let cats = if variant == Variant::Multinomial { free_categories } else { 1 };
        for c in 0..cats {
            blocks.push((Block::Eta, c, m_live));
            if variant != Variant::ConstantMean {
                let b = basis.as_ref().expect("wavelet variants carry a basis");
                blocks.push((Block::Theta, c, b.l));
            }
            blocks.push((Block::RanEf, c, j));
            blocks.push((Block::LogSigma, c, 1));
            blocks.push((Block::LogSigmaU, c, 1));
            if matches!(variant, Variant::WaveletZi | Variant::WaveletZani) {
                blocks.push((Block::Lambda0, c, 1));
            }
            if variant == Variant::WaveletZani {
                blocks.push((Block::LambdaN, c, 1));
            }
            if variant != Variant::ConstantMean {
                let b = basis.as_ref().expect("wavelet variants carry a basis");
                blocks.push((Block::LogDelta, c, b.d + 1));
                blocks.push((Block::LogPhi, c, 1));
                blocks.push((Block::Alpha1, c, 1));
                blocks.push((Block::Alpha2, c, 1));
            }
        }
        ParamLayout::build(&blocks)
    }

    /// Number of records in the underlying dataset (including Ñ = 0 ones).
    pub fn record_count(&self) -> usize {
        self.m_total
    }

    /// Number of likelihood-contributing records.
    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Number of time points on the fitted grid.
    pub fn quarter_count(&self) -> usize {
        self.t_count
    }

    pub fn basis(&self) -> Option<&Arc<WaveletBasis>> {
        self.basis.as_ref()
    }

    pub fn interpolation(&self) -> Option<&Arc<InterpolationMatrix>> {
        self.h.as_ref()
    }

    /// Log-posterior and gradient. Non-finite evaluations surface as -∞ with
    /// a zero gradient, which the sampler treats as a rejected/divergent
    /// proposal; [`BranchPosterior::diagnose`] names the offending term.
    pub fn log_posterior(&self, params: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(params.len(), self.layout.dim, "parameter vector length");
        let mut grad = vec![0.0; self.layout.dim];
        let terms = self.accumulate(params, Some(&mut grad));
        let total = terms.total();
        if !total.is_finite() {
            return (f64::NEG_INFINITY, vec![0.0; self.layout.dim]);
        }
        (total, grad)
    }

    /// Named term values at a point; errors if any term is non-finite.
    pub fn diagnose(&self, params: &[f64]) -> Result<Terms> {
        let terms = self.accumulate(params, None);
        if let Some(name) = terms.first_non_finite() {
            return Err(Error::NonFinite {
                term: name,
                detail: format!(" in branch '{}' ({})", self.node_label, self.variant),
            });
        }
        Ok(terms)
    }

    /// Per-record likelihood-only log densities, length equal to the full
    /// record count; Ñ = 0 records contribute 0.
    pub fn pointwise_loglik(&self, params: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m_total];
        match &self.data {
            DataKind::Branch { y, n } => {
                let eta = self.block(params, Block::Eta, 0);
                let l0 = self.scalar(params, Block::Lambda0, 0).unwrap_or(0.0);
                let ln = self.scalar(params, Block::LambdaN, 0).unwrap_or(0.0);
                for (pos, &orig) in self.live.iter().enumerate() {
                    let p = sigmoid(eta[pos]);
                    out[orig] = match self.variant {
                        Variant::ConstantMean | Variant::Wavelet => {
                            dist::binomial_logpmf(y[pos], n[pos], p)
                        }
                        Variant::WaveletZi => dist::zi_logpmf_unchecked(y[pos], n[pos], p, l0),
                        Variant::WaveletZani => {
                            dist::zani_logpmf_unchecked(y[pos], n[pos], p, l0, ln)
                        }
                        Variant::Multinomial => unreachable!(),
                    };
                }
            }
            DataKind::Multi(md) => {
                let free = md.k - 1;
                for (pos, &orig) in self.live.iter().enumerate() {
                    let eta_i: Vec<f64> = (0..free)
                        .map(|c| self.block(params, Block::Eta, c)[pos])
                        .collect();
                    let p = dist::multilogit(&eta_i);
                    let mut lp = statrs::function::gamma::ln_gamma(md.totals[pos] as f64 + 1.0);
                    for (yk, pk) in md.counts[pos].iter().zip(&p) {
                        lp += *yk as f64 * pk.ln()
                            - statrs::function::gamma::ln_gamma(*yk as f64 + 1.0);
                    }
                    out[orig] = lp;
                }
            }
        }
        out
    }

    fn block<'a>(&self, params: &'a [f64], block: Block, category: usize) -> &'a [f64] {
        let r = self
            .layout
            .span(block, category)
            .unwrap_or_else(|| panic!("{} absent from {}", block.name(), self.variant));
        &params[r]
    }

    fn scalar(&self, params: &[f64], block: Block, category: usize) -> Option<f64> {
        self.layout.span(block, category).map(|r| params[r.start])
    }

    fn accumulate(&self, params: &[f64], mut grad: Option<&mut Vec<f64>>) -> Terms {
        let mut terms = Terms::default();
        match &self.data {
            DataKind::Branch { y, n } => {
                self.accumulate_category(params, &mut grad, &mut terms, 0, Some((y, n)));
            }
            DataKind::Multi(md) => {
                self.multinomial_likelihood(params, &mut grad, &mut terms, md);
                for c in 0..md.k - 1 {
                    self.accumulate_category(params, &mut grad, &mut terms, c, None);
                }
            }
        }
        terms
    }

    /// Latent layer, random effects, priors and Jacobians for one category
    /// (and the count likelihood for nested variants).
    fn accumulate_category(
        &self,
        params: &[f64],
        grad: &mut Option<&mut Vec<f64>>,
        terms: &mut Terms,
        cat: usize,
        branch_counts: Option<(&[u64], &[u64])>,
    ) {
        let m = self.live.len();
        let eta_r = self.layout.span(Block::Eta, cat).expect("eta present");
        let ls = self.scalar(params, Block::LogSigma, cat).expect("log_sigma present");
        let lsu = self.scalar(params, Block::LogSigmaU, cat).expect("log_sigma_u present");
        let sigma = ls.exp();
        let sigma_u = lsu.exp();
        let sig2 = sigma * sigma;
        let su2 = sigma_u * sigma_u;

        // Count likelihood (nested variants only; the multinomial one is
        // handled jointly across categories).
        if let Some((y, n)) = branch_counts {
            let l0 = self.scalar(params, Block::Lambda0, cat).unwrap_or(0.0);
            let ln = self.scalar(params, Block::LambdaN, cat).unwrap_or(0.0);
            let mut d_l0 = 0.0;
            let mut d_ln = 0.0;
            for pos in 0..m {
                let p = sigmoid(params[eta_r.start + pos]);
                let (lp, g) = match self.variant {
                    Variant::ConstantMean | Variant::Wavelet => (
                        dist::binomial_logpmf(y[pos], n[pos], p),
                        dist::binomial_grad(y[pos], n[pos], p),
                    ),
                    Variant::WaveletZi => (
                        dist::zi_logpmf_unchecked(y[pos], n[pos], p, l0),
                        dist::zi_grad(y[pos], n[pos], p, l0),
                    ),
                    Variant::WaveletZani => (
                        dist::zani_logpmf_unchecked(y[pos], n[pos], p, l0, ln),
                        dist::zani_grad(y[pos], n[pos], p, l0, ln),
                    ),
                    Variant::Multinomial => unreachable!(),
                };
                terms.likelihood += lp;
                if let Some(g_out) = grad.as_deref_mut() {
                    g_out[eta_r.start + pos] += g.d_eta;
                    d_l0 += g.d_lambda0;
                    d_ln += g.d_lambda_n;
                }
            }
            if let Some(g_out) = grad.as_deref_mut() {
                if let Some(r) = self.layout.span(Block::Lambda0, cat) {
                    g_out[r.start] += d_l0;
                }
                if let Some(r) = self.layout.span(Block::LambdaN, cat) {
                    g_out[r.start] += d_ln;
                }
            }
            // λ priors.
            if let Some(r) = self.layout.span(Block::Lambda0, cat) {
                let v = params[r.start];
                terms.lambda_prior +=
                    -0.5 * (LN_2PI + self.lambda_prior_var.ln()) - 0.5 * v * v / self.lambda_prior_var;
                if let Some(g_out) = grad.as_deref_mut() {
                    g_out[r.start] += -v / self.lambda_prior_var;
                }
            }
            if let Some(r) = self.layout.span(Block::LambdaN, cat) {
                let v = params[r.start];
                terms.lambda_prior +=
                    -0.5 * (LN_2PI + self.lambda_prior_var.ln()) - 0.5 * v * v / self.lambda_prior_var;
                if let Some(g_out) = grad.as_deref_mut() {
                    g_out[r.start] += -v / self.lambda_prior_var;
                }
            }
        }

        // Mean function on the quarter grid.
        let mu: Option<Vec<f64>> = self.layout.span(Block::Theta, cat).map(|r| {
            let basis = self.basis.as_ref().expect("theta implies basis");
            let h = self.h.as_ref().expect("theta implies interpolation");
            h.apply(&basis.synthesize(&params[r]))
        });

        // Latent layer η ~ N(μ_t + b_j, σ²).
        let b_r = self.layout.span(Block::RanEf, cat).expect("random effects present");
        let mut r_mu = vec![0.0; self.t_count];
        let mut sum_r2 = 0.0;
        for pos in 0..m {
            let (t0, j0) = self.idx[pos];
            let mean = mu.as_ref().map(|v| v[t0]).unwrap_or(0.0) + params[b_r.start + j0];
            let r = params[eta_r.start + pos] - mean;
            terms.latent += -0.5 * (LN_2PI + sig2.ln()) - 0.5 * r * r / sig2;
            sum_r2 += r * r;
            if let Some(g_out) = grad.as_deref_mut() {
                g_out[eta_r.start + pos] += -r / sig2;
                g_out[b_r.start + j0] += r / sig2;
                r_mu[t0] += r / sig2;
            }
        }
        if let Some(g_out) = grad.as_deref_mut() {
            g_out[self.layout.span(Block::LogSigma, cat).unwrap().start] +=
                sum_r2 / sig2 - m as f64;
            if let Some(theta_r) = self.layout.span(Block::Theta, cat) {
                let basis = self.basis.as_ref().unwrap();
                let h = self.h.as_ref().unwrap();
                let scattered = h.apply_transpose(&r_mu);
                let d_theta = basis.dwt(&scattered).expect("grid-sized vector");
                for (g, d) in g_out[theta_r].iter_mut().zip(&d_theta) {
                    *g += d;
                }
            }
        }

        // Random effects b_j ~ N(0, σ_u²).
        let mut sum_b2 = 0.0;
        for j in 0..self.j_count {
            let b = params[b_r.start + j];
            terms.random_effects += -0.5 * (LN_2PI + su2.ln()) - 0.5 * b * b / su2;
            sum_b2 += b * b;
            if let Some(g_out) = grad.as_deref_mut() {
                g_out[b_r.start + j] += -b / su2;
            }
        }
        if let Some(g_out) = grad.as_deref_mut() {
            g_out[self.layout.span(Block::LogSigmaU, cat).unwrap().start] +=
                sum_b2 / su2 - self.j_count as f64;
        }

        // Half-Cauchy priors on σ and σ_u, with respect to log σ.
        let s = self.half_cauchy_scale;
        terms.scale_priors += ln_half_cauchy(sigma, s) + ln_half_cauchy(sigma_u, s);
        if let Some(g_out) = grad.as_deref_mut() {
            let t1 = (sigma / s) * (sigma / s);
            g_out[self.layout.span(Block::LogSigma, cat).unwrap().start] +=
                -2.0 * t1 / (1.0 + t1);
            let t2 = (sigma_u / s) * (sigma_u / s);
            g_out[self.layout.span(Block::LogSigmaU, cat).unwrap().start] +=
                -2.0 * t2 / (1.0 + t2);
        }

        // Jacobians of the log transforms.
        terms.jacobian += ls + lsu;
        if let Some(g_out) = grad.as_deref_mut() {
            g_out[self.layout.span(Block::LogSigma, cat).unwrap().start] += 1.0;
            g_out[self.layout.span(Block::LogSigmaU, cat).unwrap().start] += 1.0;
        }

        // Shrinkage prior and its transforms.
        if self.layout.span(Block::Theta, cat).is_some() {
            shrinkage_terms(params, &self.layout, cat, &self.depths, self.nu, terms, grad);
        }
    }

    fn multinomial_likelihood(
        &self,
        params: &[f64],
        grad: &mut Option<&mut Vec<f64>>,
        terms: &mut Terms,
        md: &MultiData,
    ) {
        let free = md.k - 1;
        let eta_spans: Vec<std::ops::Range<usize>> =
            (0..free).map(|c| self.layout.span(Block::Eta, c).unwrap()).collect();
        for pos in 0..self.live.len() {
            let eta_i: Vec<f64> = eta_spans.iter().map(|r| params[r.start + pos]).collect();
            let p = dist::multilogit(&eta_i);
            let n = md.totals[pos];
            let mut lp = statrs::function::gamma::ln_gamma(n as f64 + 1.0);
            for (yk, pk) in md.counts[pos].iter().zip(&p) {
                lp += *yk as f64 * pk.ln() - statrs::function::gamma::ln_gamma(*yk as f64 + 1.0);
            }
            terms.likelihood += lp;
            if let Some(g_out) = grad.as_deref_mut() {
                for c in 0..free {
                    g_out[eta_spans[c].start + pos] +=
                        md.counts[pos][c] as f64 - n as f64 * p[c];
                }
            }
        }
    }

    /// Default initialization: every unconstrained coordinate U(-1, 1).
    pub fn default_init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.layout.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Embed a simpler nested variant's parameters into this one for warm
    /// starting: shared blocks copy over exactly, new λ coordinates start at
    /// -3 and every other new coordinate at 0.
    pub fn embed_from(&self, simpler: &BranchPosterior, simpler_params: &[f64]) -> Result<Vec<f64>> {
        let (Some(a), Some(b)) = (simpler.variant.nested_rank(), self.variant.nested_rank())
        else {
            return Err(Error::Config("warm starts apply to the nested variants".into()));
        };
        if a > b {
            return Err(Error::Config(format!(
                "cannot warm start {} from the richer {}",
                self.variant, simpler.variant
            )));
        }
        let mut out = vec![0.0; self.layout.dim];
        for span in &self.layout.spans {
            let dst = span.offset..span.offset + span.len;
            match simpler.layout.span(span.block, span.category) {
                Some(src) => {
                    if src.len() != span.len {
                        return Err(Error::Config(format!(
                            "block {} length changed between variants",
                            span.block.name()
                        )));
                    }
                    out[dst].copy_from_slice(&simpler_params[src]);
                }
                None => {
                    if matches!(span.block, Block::Lambda0 | Block::LambdaN) {
                        out[dst].fill(-3.0);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Shrinkage prior value and gradient for one category's θ/δ/φ/α blocks.
fn shrinkage_terms(
    params: &[f64],
    layout: &ParamLayout,
    cat: usize,
    depths: &[usize],
    nu: f64,
    terms: &mut Terms,
    grad: &mut Option<&mut Vec<f64>>,
) {
    let theta_r = layout.span(Block::Theta, cat).expect("theta");
    let ld_r = layout.span(Block::LogDelta, cat).expect("log_delta");
    let lphi = layout.span(Block::LogPhi, cat).expect("log_phi").start;
    let a1_i = layout.span(Block::Alpha1, cat).expect("alpha1").start;
    let a2_i = layout.span(Block::Alpha2, cat).expect("alpha2").start;

    let n_depth = ld_r.len();
    let phi = params[lphi].exp();
    let delta: Vec<f64> = params[ld_r.clone()].iter().map(|v| v.exp()).collect();
    let mut tau = Vec::with_capacity(n_depth);
    let mut acc = 1.0;
    for &d in &delta {
        acc *= d;
        tau.push(acc);
    }
    let s1 = sigmoid(params[a1_i]);
    let s2 = sigmoid(params[a2_i]);
    let alpha1 = 50.0 * s1;
    let alpha2 = 1.0 + 49.0 * s2;

    // Gaussian terms for θ; collect per-depth weight sums for the δ/φ grads.
    let mut depth_weight = vec![0.0; n_depth];
    for (li, &d) in depths.iter().enumerate() {
        let th = params[theta_r.start + li];
        let prec = phi * tau[d - 1];
        terms.shrinkage += 0.5 * prec.ln() - 0.5 * LN_2PI - 0.5 * th * th * prec;
        let w = 0.5 - 0.5 * th * th * prec;
        depth_weight[d - 1] += w;
        if let Some(g_out) = grad.as_deref_mut() {
            g_out[theta_r.start + li] += -prec * th;
        }
    }
    if let Some(g_out) = grad.as_deref_mut() {
        // δ_s enters every τ_d with d ≥ s.
        let mut suffix = 0.0;
        for s in (0..n_depth).rev() {
            suffix += depth_weight[s];
            g_out[ld_r.start + s] += suffix;
        }
        g_out[lphi] += depth_weight.iter().sum::<f64>();
    }

    // δ priors: Ga(α1, 1) at depth 1, Ga(α2, 1) deeper.
    terms.shrinkage += shrink::ln_gamma_pdf(delta[0], alpha1, 1.0);
    for &d in &delta[1..] {
        terms.shrinkage += shrink::ln_gamma_pdf(d, alpha2, 1.0);
    }
    if let Some(g_out) = grad.as_deref_mut() {
        g_out[ld_r.start] += (alpha1 - 1.0) - delta[0];
        for s in 1..n_depth {
            g_out[ld_r.start + s] += (alpha2 - 1.0) - delta[s];
        }
        let d_alpha1 = delta[0].ln() - digamma(alpha1);
        let d_alpha2: f64 =
            delta[1..].iter().map(|&d| d.ln() - digamma(alpha2)).sum();
        g_out[a1_i] += d_alpha1 * 50.0 * s1 * (1.0 - s1);
        g_out[a2_i] += d_alpha2 * 49.0 * s2 * (1.0 - s2);
    }

    // φ ~ Ga(ν/2, ν/2); uniform shape priors contribute constants.
    terms.shrinkage += shrink::ln_gamma_pdf(phi, nu / 2.0, nu / 2.0);
    terms.shrinkage += -(50.0f64).ln() - (49.0f64).ln();
    if let Some(g_out) = grad.as_deref_mut() {
        g_out[lphi] += (nu / 2.0 - 1.0) - (nu / 2.0) * phi;
    }

    // Jacobians: log transforms for δ and φ, scaled logits for the shapes.
    let jac = params[ld_r.clone()].iter().sum::<f64>()
        + params[lphi]
        + (50.0f64).ln()
        + s1.ln()
        + (1.0 - s1).ln()
        + (49.0f64).ln()
        + s2.ln()
        + (1.0 - s2).ln();
    terms.jacobian += jac;
    if let Some(g_out) = grad.as_deref_mut() {
        for s in 0..n_depth {
            g_out[ld_r.start + s] += 1.0;
        }
        g_out[lphi] += 1.0;
        g_out[a1_i] += 1.0 - 2.0 * s1;
        g_out[a2_i] += 1.0 - 2.0 * s2;
    }
}

/// Gaussian wavelet regression for a raw real-valued series: the wavelet
/// mean layer of the branch models fitted directly to observations
/// y_i ~ N(μ_{t_i}, σ²), with the same shrinkage prior. Used to read the
/// frequency content of a series through the posterior transform.
pub struct SeriesPosterior {
    pub layout: ParamLayout,
    values: Vec<f64>,
    basis: Arc<WaveletBasis>,
    h: Arc<InterpolationMatrix>,
    depths: Vec<usize>,
    pub nu: f64,
    pub half_cauchy_scale: f64,
}

impl SeriesPosterior {
    pub fn new(
        values: &[f64],
        basis: Arc<WaveletBasis>,
        h: Arc<InterpolationMatrix>,
    ) -> Result<Self> {
        if values.len() != h.rows.len() {
            return Err(Error::Config(format!(
                "{} series values but {} interpolation rows",
                values.len(),
                h.rows.len()
            )));
        }
        let depths = shrink::depth_map(&basis.detail_map);
        let layout = ParamLayout::build(&[
            (Block::Theta, 0, basis.l),
            (Block::LogSigma, 0, 1),
            (Block::LogDelta, 0, basis.d + 1),
            (Block::LogPhi, 0, 1),
            (Block::Alpha1, 0, 1),
            (Block::Alpha2, 0, 1),
        ]);
        Ok(SeriesPosterior {
            layout,
            values: values.to_vec(),
            basis,
            h,
            depths,
            nu: 3.0,
            half_cauchy_scale: 100.0,
        })
    }

    pub fn log_posterior(&self, params: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(params.len(), self.layout.dim);
        let mut grad = vec![0.0; self.layout.dim];
        let mut terms = Terms::default();
        let theta_r = self.layout.span(Block::Theta, 0).unwrap();
        let ls_i = self.layout.span(Block::LogSigma, 0).unwrap().start;
        let sigma = params[ls_i].exp();
        let sig2 = sigma * sigma;
        let mu = self.h.apply(&self.basis.synthesize(&params[theta_r.clone()]));
        let mut resid = vec![0.0; self.values.len()];
        let mut sum_r2 = 0.0;
        for (i, (&y, &m)) in self.values.iter().zip(&mu).enumerate() {
            let r = y - m;
            terms.likelihood += -0.5 * (LN_2PI + sig2.ln()) - 0.5 * r * r / sig2;
            resid[i] = r / sig2;
            sum_r2 += r * r;
        }
        grad[ls_i] += sum_r2 / sig2 - self.values.len() as f64;
        let d_theta = self.basis.dwt(&self.h.apply_transpose(&resid)).expect("grid-sized");
        for (g, d) in grad[theta_r].iter_mut().zip(&d_theta) {
            *g += d;
        }
        terms.scale_priors += ln_half_cauchy(sigma, self.half_cauchy_scale);
        let t1 = (sigma / self.half_cauchy_scale) * (sigma / self.half_cauchy_scale);
        grad[ls_i] += -2.0 * t1 / (1.0 + t1);
        terms.jacobian += params[ls_i];
        grad[ls_i] += 1.0;
        let mut grad_opt = Some(&mut grad);
        shrinkage_terms(params, &self.layout, 0, &self.depths, self.nu, &mut terms, &mut grad_opt);
        let total = terms.total();
        if !total.is_finite() {
            return (f64::NEG_INFINITY, vec![0.0; self.layout.dim]);
        }
        (total, grad)
    }

    pub fn default_init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.layout.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    pub fn basis(&self) -> &Arc<WaveletBasis> {
        &self.basis
    }

    pub fn interpolation(&self) -> &Arc<InterpolationMatrix> {
        &self.h
    }
}
