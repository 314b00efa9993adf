//! Bayesian modelling of constrained multi-category count time series.
//!
//! A multinomial count series is decomposed along a binary nesting tree into
//! independent branch models, each a binomial-family likelihood whose success
//! probability follows a latent logit-normal process. The process mean is a
//! wavelet expansion over a dyadic grid, shrunk by a multiplicative-gamma
//! prior so that finer detail levels are damped more aggressively. Branch
//! likelihoods optionally carry point masses at 0 and at N ("zero-and-N
//! inflation") to absorb the all-or-nothing records common in this kind of
//! data. Models are fitted with the No-U-Turn sampler and compared by WAIC
//! and holdout prediction.
//!
//! Module layout mirrors the processing chain: [`counts`] holds data and the
//! nesting tree, [`dist`] the count distributions, [`wavelet`] the basis and
//! interpolation machinery, [`shrink`] the shrinkage prior, [`model`] the
//! per-branch posterior with exact gradients, [`hmc`] the sampler, [`eval`]
//! WAIC and holdout scoring, and [`pipeline`] the batch driver used by the
//! `nestwave` binary.

pub mod counts;
pub mod dist;
pub mod eval;
pub mod hmc;
pub mod model;
pub mod pipeline;
pub mod shrink;
pub mod wavelet;

/// Crate-wide error type. Variants map onto the CLI exit codes: validation
/// problems exit 1, sampler failures exit 2, partially completed bundles
/// exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data validation: {0}")]
    Data(String),
    #[error("nesting tree: {0}")]
    Nesting(String),
    #[error("wavelet basis: {0}")]
    Wavelet(String),
    #[error("posterior evaluation: non-finite {term} term{detail}")]
    NonFinite { term: &'static str, detail: String },
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("archive format: {0}")]
    Archive(String),
    #[error("partial completion: {done} of {total} branch fits succeeded")]
    Partial { done: usize, total: usize },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI maps this error onto.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Sampler(_) => 2,
            Error::Partial { .. } => 3,
            _ => 1,
        }
    }
}
