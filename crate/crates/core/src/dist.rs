//! Count distributions: binomial, zero-inflated binomial, zero-and-N-inflated
//! (ZaNI) binomial, and the multinomial with its logit link.
//!
//! Every density is evaluated in log space. The inflated forms mix a binomial
//! with point masses whose weights are driven by two real parameters λ0 and
//! λN through
//!
//! ```text
//! q0 = e^{λ0}(1-p)^N / (e^{λ0}(1-p)^N + e^{λN}p^N + 1)
//! qN = e^{λN}p^N     / (e^{λ0}(1-p)^N + e^{λN}p^N + 1)
//! ```
//!
//! For the hauls this model targets, N runs into the hundreds, so `(1-p)^N`
//! underflows long before the weights become negligible; all weight algebra
//! therefore runs on the exponents `λ0 + N·ln(1-p)` and `λN + N·ln(p)` with a
//! log-sum-exp against 0.

use crate::{Error, Result};
use rand::{Rng, RngExt};
use statrs::function::gamma::ln_gamma;

/// Point-mass weights of the ZaNI mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureWeights {
    pub q0: f64,
    pub q_n: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x), stable for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn log_sum_exp3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// ln C(n, y) via log-gamma.
#[inline]
pub fn ln_choose(n: u64, y: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(y as f64 + 1.0) - ln_gamma((n - y) as f64 + 1.0)
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("p = {p} outside (0,1)")));
    }
    Ok(())
}

fn check_y(y: u64, n: u64) -> Result<()> {
    if y > n {
        return Err(Error::Domain(format!("count y = {y} exceeds total N = {n}")));
    }
    Ok(())
}

/// Plain binomial log-pmf. `y ≤ n` and `p ∈ (0,1)` are the caller's problem
/// here; the checked entry points live on the inflated forms.
#[inline]
pub fn binomial_logpmf(y: u64, n: u64, p: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    ln_choose(n, y) + y as f64 * p.ln() + (n - y) as f64 * (1.0 - p).ln()
}

/// ZaNI mixture weights.
pub fn zani_weights(n: u64, p: f64, lambda0: f64, lambda_n: f64) -> Result<MixtureWeights> {
    check_p(p)?;
    let nf = n as f64;
    let a0 = lambda0 + nf * (1.0 - p).ln();
    let an = lambda_n + nf * p.ln();
    let z = log_sum_exp3(a0, an, 0.0);
    Ok(MixtureWeights { q0: (a0 - z).exp(), q_n: (an - z).exp() })
}

/// ZaNI-binomial log-pmf: point masses at 0 and N with weights q0, qN, and
/// the binomial carrying the remaining 1-q0-qN. N = 0 has a single support
/// point, so its log-pmf is 0.
pub fn zani_logpmf(y: u64, n: u64, p: f64, lambda0: f64, lambda_n: f64) -> Result<f64> {
    check_p(p)?;
    check_y(y, n)?;
    Ok(zani_logpmf_unchecked(y, n, p, lambda0, lambda_n))
}

#[inline]
pub(crate) fn zani_logpmf_unchecked(y: u64, n: u64, p: f64, lambda0: f64, lambda_n: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let ln_p = p.ln();
    let ln_1mp = (1.0 - p).ln();
    let a0 = lambda0 + nf * ln_1mp;
    let an = lambda_n + nf * ln_p;
    let z = log_sum_exp3(a0, an, 0.0);
    // At y = 0 the point mass and the binomial's own mass at zero combine:
    // q0 + (1-q0-qN)(1-p)^N = e^{N ln(1-p)} (e^{λ0}+1) / e^Z, and likewise at
    // y = N. Folding them keeps the weights and the binomial tail on one
    // log-sum-exp, which is what makes the relabelling symmetry exact.
    if y == 0 {
        -z + nf * ln_1mp + softplus(lambda0)
    } else if y == n {
        -z + nf * ln_p + softplus(lambda_n)
    } else {
        -z + ln_choose(n, y) + y as f64 * ln_p + (n - y) as f64 * ln_1mp
    }
}

/// Zero-inflated binomial log-pmf. The point mass at zero receives weight
/// 1-q0 with q0 = 1/(e^{λ0}(1-p)^N + 1); the binomial receives q0. This is
/// the ZaNI form with λN = -∞.
pub fn zi_logpmf(y: u64, n: u64, p: f64, lambda0: f64) -> Result<f64> {
    check_p(p)?;
    check_y(y, n)?;
    Ok(zi_logpmf_unchecked(y, n, p, lambda0))
}

#[inline]
pub(crate) fn zi_logpmf_unchecked(y: u64, n: u64, p: f64, lambda0: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let ln_p = p.ln();
    let ln_1mp = (1.0 - p).ln();
    let a0 = lambda0 + nf * ln_1mp;
    let z = softplus(a0);
    if y == 0 {
        -z + nf * ln_1mp + softplus(lambda0)
    } else {
        -z + ln_choose(n, y) + y as f64 * ln_p + (n - y) as f64 * ln_1mp
    }
}

/// Per-record gradient of an inflated (or plain) branch log-pmf.
#[derive(Debug, Clone, Copy, Default)]
pub struct PmfGrad {
    /// With respect to η = logit(p).
    pub d_eta: f64,
    pub d_lambda0: f64,
    pub d_lambda_n: f64,
}

/// Gradient of `zani_logpmf` with respect to (logit p, λ0, λN).
pub fn zani_grad(y: u64, n: u64, p: f64, lambda0: f64, lambda_n: f64) -> PmfGrad {
    if n == 0 {
        return PmfGrad::default();
    }
    let nf = n as f64;
    let a0 = lambda0 + nf * (1.0 - p).ln();
    let an = lambda_n + nf * p.ln();
    let z = log_sum_exp3(a0, an, 0.0);
    let q0 = (a0 - z).exp();
    let qn = (an - z).exp();
    // dZ/dη = N(q0·(-p) + qN·(1-p)) after the logit chain rule; the leading
    // -Z term contributes its negative.
    let mz_eta = nf * (q0 * p - qn * (1.0 - p));
    if y == 0 {
        PmfGrad {
            d_eta: mz_eta - nf * p,
            d_lambda0: -q0 + sigmoid(lambda0),
            d_lambda_n: -qn,
        }
    } else if y == n {
        PmfGrad {
            d_eta: mz_eta + nf * (1.0 - p),
            d_lambda0: -q0,
            d_lambda_n: -qn + sigmoid(lambda_n),
        }
    } else {
        PmfGrad { d_eta: mz_eta + y as f64 - nf * p, d_lambda0: -q0, d_lambda_n: -qn }
    }
}

/// Gradient of `zi_logpmf` with respect to (logit p, λ0).
pub fn zi_grad(y: u64, n: u64, p: f64, lambda0: f64) -> PmfGrad {
    if n == 0 {
        return PmfGrad::default();
    }
    let nf = n as f64;
    let a0 = lambda0 + nf * (1.0 - p).ln();
    let q0 = sigmoid(a0);
    let mz_eta = nf * q0 * p;
    if y == 0 {
        PmfGrad { d_eta: mz_eta - nf * p, d_lambda0: -q0 + sigmoid(lambda0), d_lambda_n: 0.0 }
    } else {
        PmfGrad { d_eta: mz_eta + y as f64 - nf * p, d_lambda0: -q0, d_lambda_n: 0.0 }
    }
}

/// Gradient of the plain binomial log-pmf with respect to logit p.
pub fn binomial_grad(y: u64, n: u64, p: f64) -> PmfGrad {
    if n == 0 {
        return PmfGrad::default();
    }
    PmfGrad { d_eta: y as f64 - n as f64 * p, d_lambda0: 0.0, d_lambda_n: 0.0 }
}

/// Multinomial log-pmf over a K-vector summing to N.
pub fn multinomial_logpmf(y: &[u64], p: &[f64]) -> Result<f64> {
    if y.len() != p.len() {
        return Err(Error::Domain(format!(
            "count vector length {} does not match simplex length {}",
            y.len(),
            p.len()
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-8 || p.iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain("p is not a strictly positive simplex".into()));
    }
    let n: u64 = y.iter().sum();
    let mut lp = ln_gamma(n as f64 + 1.0);
    for (&yk, &pk) in y.iter().zip(p) {
        lp += yk as f64 * pk.ln() - ln_gamma(yk as f64 + 1.0);
    }
    Ok(lp)
}

/// Multinomial-logit link with the last category as reference:
/// p_k = e^{η_k} / (1 + Σ e^{η_c}) for k < K, p_K = 1 / (1 + Σ e^{η_c}).
pub fn multilogit(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().cloned().fold(0.0f64, f64::max);
    let mut out: Vec<f64> = eta.iter().map(|&e| (e - m).exp()).collect();
    out.push((-m).exp());
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

/// Inverse of [`multilogit`]: η_k = ln(p_k / p_K).
pub fn multilogit_inv(p: &[f64]) -> Result<Vec<f64>> {
    if p.iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain("simplex entries must be strictly positive".into()));
    }
    let last = p[p.len() - 1];
    Ok(p[..p.len() - 1].iter().map(|&v| (v / last).ln()).collect())
}

/// Draw from the ZaNI mixture: pick the component, then the binomial if
/// neither point mass fires.
pub fn sample_zani<R: Rng + ?Sized>(
    n: u64,
    p: f64,
    lambda0: f64,
    lambda_n: f64,
    rng: &mut R,
) -> Result<u64> {
    let w = zani_weights(n, p, lambda0, lambda_n)?;
    if n == 0 {
        return Ok(0);
    }
    let u: f64 = rng.random();
    if u < w.q0 {
        Ok(0)
    } else if u < w.q0 + w.q_n {
        Ok(n)
    } else {
        Ok(sample_binomial(n, p, rng))
    }
}

/// Binomial sampling via inversion for small N and rand_distr above.
pub fn sample_binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    use rand_distr::Distribution;
    rand_distr::Binomial::new(n, p).expect("valid binomial parameters").sample(rng)
}
