//! Multiplicative-gamma shrinkage prior on wavelet coefficients, plus the
//! remaining hyperpriors shared by the wavelet model variants.
//!
//! Coefficient θ_l gets precision φ·τ_{d(l)} where τ_d = Π_{s≤d} δ_s is a
//! running product of gamma variates: δ_1 ~ Ga(α1,1) and δ_s ~ Ga(α2,1) for
//! s > 1. With α2 > 1 the δ's exceed 1 in expectation, so precision grows —
//! and prior variance falls — with depth. The scaling coefficient is assigned
//! depth d = 1 and detail level j depth d = j+1, so every coefficient is
//! shrinkable while coarser structure keeps the wider prior.

use crate::{Error, Result};
use rand::Rng;
use rand_distr::Distribution;
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.8378770664093453;

/// Shrinkage-prior state for one branch model.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageState {
    /// δ_1..δ_{D+1}, one per depth.
    pub delta: Vec<f64>,
    /// Global precision multiplier.
    pub phi: f64,
    /// Shape of the first gamma, supported on (0,50).
    pub alpha1: f64,
    /// Shape of the later gammas, supported on (1,50).
    pub alpha2: f64,
    /// Degrees of freedom of the φ prior, Ga(ν/2, ν/2).
    pub nu: f64,
}

impl ShrinkageState {
    /// Cumulative precisions τ_d = Π_{s≤d} δ_s.
    pub fn tau(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.delta.len());
        let mut acc = 1.0;
        for &d in &self.delta {
            acc *= d;
            t.push(acc);
        }
        t
    }

    fn check(&self) -> Result<()> {
        if self.delta.iter().any(|&d| d <= 0.0) || self.phi <= 0.0 {
            return Err(Error::Domain("δ and φ must be positive".into()));
        }
        Ok(())
    }

    /// Whether the shape hyperparameters sit inside their uniform supports.
    pub fn shapes_in_support(&self) -> bool {
        self.alpha1 > 0.0 && self.alpha1 < 50.0 && self.alpha2 > 1.0 && self.alpha2 < 50.0
    }
}

/// Depth d(l) of each coefficient: scaling → 1, detail level j → j+1.
pub fn depth_map(detail_map: &[usize]) -> Vec<usize> {
    detail_map.iter().map(|&lvl| lvl + 1).collect()
}

/// Gamma log-density with rate parameterization.
pub fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Half-Cauchy log-density on x > 0 with the given scale.
pub fn ln_half_cauchy(x: f64, scale: f64) -> f64 {
    std::f64::consts::LN_2
        - std::f64::consts::PI.ln()
        - scale.ln()
        - ((x / scale) * (x / scale)).ln_1p()
}

/// Full shrinkage log-prior: Gaussian terms for θ plus the δ, φ, α1, α2
/// hyperpriors. Returns -∞ when a shape lies outside its uniform support.
pub fn log_prior(theta: &[f64], state: &ShrinkageState, depths: &[usize]) -> Result<f64> {
    state.check()?;
    if theta.len() != depths.len() {
        return Err(Error::Domain(format!(
            "{} coefficients but {} depth labels",
            theta.len(),
            depths.len()
        )));
    }
    if !state.shapes_in_support() {
        return Ok(f64::NEG_INFINITY);
    }
    let tau = state.tau();
    let mut lp = 0.0;
    for (&th, &d) in theta.iter().zip(depths) {
        let prec = state.phi * tau[d - 1];
        lp += 0.5 * prec.ln() - 0.5 * LN_2PI - 0.5 * th * th * prec;
    }
    lp += ln_gamma_pdf(state.delta[0], state.alpha1, 1.0);
    for &d in &state.delta[1..] {
        lp += ln_gamma_pdf(d, state.alpha2, 1.0);
    }
    lp += ln_gamma_pdf(state.phi, state.nu / 2.0, state.nu / 2.0);
    lp += -(50.0f64).ln() - (49.0f64).ln();
    Ok(lp)
}

/// Ancestral draw of θ: δ → τ → θ_l ~ N(0, (φ τ_{d(l)})⁻¹).
pub fn sample_prior<R: Rng + ?Sized>(
    alpha1: f64,
    alpha2: f64,
    nu: f64,
    depths: &[usize],
    rng: &mut R,
) -> Result<(Vec<f64>, ShrinkageState)> {
    let max_depth = depths.iter().cloned().max().unwrap_or(1);
    let g1 = rand_distr::Gamma::new(alpha1, 1.0)
        .map_err(|e| Error::Domain(format!("alpha1: {e}")))?;
    let g2 = rand_distr::Gamma::new(alpha2, 1.0)
        .map_err(|e| Error::Domain(format!("alpha2: {e}")))?;
    let gphi = rand_distr::Gamma::new(nu / 2.0, 2.0 / nu)
        .map_err(|e| Error::Domain(format!("nu: {e}")))?;
    let mut delta = Vec::with_capacity(max_depth);
    delta.push(g1.sample(rng));
    for _ in 1..max_depth {
        delta.push(g2.sample(rng));
    }
    let phi = gphi.sample(rng);
    let state = ShrinkageState { delta, phi, alpha1, alpha2, nu };
    let tau = state.tau();
    let normal = rand_distr::StandardNormal;
    let theta = depths
        .iter()
        .map(|&d| {
            let sd = 1.0 / (state.phi * tau[d - 1]).sqrt();
            let z: f64 = normal.sample(rng);
            z * sd
        })
        .collect();
    Ok((theta, state))
}
