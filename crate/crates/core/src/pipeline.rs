//! End-to-end batch driver: ingestion, synthetic data generation, fitting
//! every branch × variant combination with warm starts, and emission of the
//! plot-ready CSV bundle (WAIC table, fitted bands, transform summaries,
//! empirical proportions with smoother overlays, holdout predictions).

use crate::counts::{aggregate_branch, parse_nesting, HaulDataset, HaulRecord, TreeNode};
use crate::dist::sigmoid;
use crate::eval::{
    kernel_smooth, make_holdout, predict_holdout, waic_archive, HoldoutRecord, PredictionRow,
};
use crate::hmc::{self, GridMeta, SampleArchive, SamplerConfig};
use crate::model::{Block, BranchPosterior, SeriesPosterior, Variant};
use crate::wavelet::{
    build_basis, build_interpolation, transform_summary, InterpolationMatrix, Placement,
    WaveletBasis, WaveletTransformSummary,
};
use crate::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "NESTWAVE_OUT_DIR";

/// Default output directory: `$NESTWAVE_OUT_DIR`, else the working directory.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Everything a full fitting run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub nesting_path: PathBuf,
    pub variants: Vec<Variant>,
    pub sampler: SamplerConfig,
    pub holdout_fraction: Option<f64>,
    /// Initialize each nested variant at the previous one's final draws.
    pub warm_start: bool,
    /// Fit branches concurrently; forces warm starts off.
    pub parallel_branches: bool,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Wavelet depth D; default ⌈log2 T⌉ (at least 2).
    pub depth: Option<usize>,
    /// Individual posterior draws carried into each transform summary.
    pub transform_draws: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.data_path.exists() {
            return Err(Error::Config(format!("data file {:?} does not exist", self.data_path)));
        }
        if !self.nesting_path.exists() {
            return Err(Error::Config(format!(
                "nesting config {:?} does not exist",
                self.nesting_path
            )));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variant list must not be empty".into()));
        }
        if let Some(f) = self.holdout_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("holdout fraction {f} outside [0, 1)")));
            }
        }
        self.sampler.validate()
    }
}

/// Smallest depth whose dyadic grid covers `t_max` cells (minimum 2).
pub fn default_depth(t_max: usize) -> usize {
    let mut d = 2;
    while (1usize << d) < t_max {
        d += 1;
    }
    d
}

fn derive_seed(master: u64, branch_idx: usize, slot: u64) -> u64 {
    master
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(((branch_idx as u64 + 1) << 16) ^ slot.wrapping_mul(0x100000001B3))
}

fn variant_slot(v: Variant) -> u64 {
    match v {
        Variant::ConstantMean => 1,
        Variant::Wavelet => 2,
        Variant::WaveletZi => 3,
        Variant::WaveletZani => 4,
        Variant::Multinomial => 5,
    }
}

fn file_tag(v: Variant) -> &'static str {
    match v {
        Variant::ConstantMean => "cmb",
        Variant::Wavelet => "wb",
        Variant::WaveletZi => "wzib",
        Variant::WaveletZani => "wzanib",
        Variant::Multinomial => "multinomial",
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

// ---------------------------------------------------------------------------
// Ingestion

/// Dataset shape and composition, in the style of a field-data abstract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records: usize,
    pub trips: usize,
    pub quarters: usize,
    pub categories: usize,
    pub category_totals: Vec<(String, u64)>,
    pub top_category: String,
    pub top_share: f64,
}

impl std::fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{} hauls over {} quarters, J={} trips, K={} categories",
            self.records, self.quarters, self.trips, self.categories
        )?;
        writeln!(
            f,
            "top category '{}' holds {:.1}% of all counts",
            self.top_category,
            100.0 * self.top_share
        )?;
        for (name, total) in &self.category_totals {
            writeln!(f, "  {name}: {total}")?;
        }
        Ok(())
    }
}

/// Read and validate a haul CSV; returns the dataset with its summary.
pub fn ingest(path: &Path) -> Result<(HaulDataset, IngestSummary)> {
    let data = HaulDataset::read_csv_path(path)?;
    let mut totals = vec![0u64; data.k];
    for r in &data.records {
        for (t, &c) in totals.iter_mut().zip(&r.counts) {
            *t += c;
        }
    }
    let grand: u64 = totals.iter().sum();
    let (top_idx, &top) =
        totals.iter().enumerate().max_by_key(|&(_, &v)| v).expect("k ≥ 2 categories");
    let summary = IngestSummary {
        records: data.len(),
        trips: data.j_max,
        quarters: data.t_max,
        categories: data.k,
        category_totals: data
            .category_names
            .iter()
            .cloned()
            .zip(totals.iter().copied())
            .collect(),
        top_category: data.category_names[top_idx].clone(),
        top_share: if grand > 0 { top as f64 / grand as f64 } else { 0.0 },
    };
    Ok((data, summary))
}

// ---------------------------------------------------------------------------
// Simulation

/// Two-regime sinusoidal test series on the unit interval: a 4-cycle tone
/// throughout, joined by a 10-cycle tone from t = 1/2, plus N(0, noise_sd²)
/// noise. Returns (t, y) pairs at t_i = i/n.
pub fn simulate_regime_switch(n_points: usize, noise_sd: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    if n_points < 16 {
        return Err(Error::Config(format!("need at least 16 points, got {n_points}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let t = i as f64 / n_points as f64;
        let mut y = 2.0 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
        if t >= 0.5 {
            y += 2.0 * (2.0 * std::f64::consts::PI * 10.0 * t).sin();
        }
        if noise_sd > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            y += noise_sd * z;
        }
        out.push((t, y));
    }
    Ok(out)
}

pub fn write_series_csv(series: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    w.write_record(["t", "y"])?;
    for &(t, y) in series {
        w.write_record(&[format!("{t:?}"), format!("{y:?}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_reader(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t: f64 = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad t field in series CSV".into()))?;
        let y: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad y field in series CSV".into()))?;
        out.push((t, y));
    }
    if out.is_empty() {
        return Err(Error::Data("series CSV has no rows".into()));
    }
    Ok(out)
}

/// One branch's generative parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchGen {
    pub label: String,
    /// Wavelet coefficients of the mean, length 2^depth (empty = flat zero).
    #[serde(default)]
    pub theta: Vec<f64>,
    pub sigma: f64,
    pub sigma_u: f64,
    #[serde(default)]
    pub lambda0: Option<f64>,
    #[serde(default)]
    pub lambda_n: Option<f64>,
}

/// Nesting node spec as written in config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenNode {
    pub label: String,
    pub left: Vec<String>,
    pub right: Vec<String>,
}

/// Generative configuration for synthetic count data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub categories: Vec<String>,
    pub nodes: Vec<GenNode>,
    pub t_max: usize,
    pub trips: usize,
    pub records_per_quarter: usize,
    pub depth: usize,
    /// Inclusive range for per-haul totals.
    pub n_range: (u64, u64),
    pub seed: u64,
    pub branches: Vec<BranchGen>,
}

impl GenConfig {
    pub fn nesting_tree(&self) -> Result<crate::counts::NestingTree> {
        let json = serde_json::json!({ "categories": self.categories, "nodes": self.nodes });
        parse_nesting(&json.to_string())
    }

    pub fn read_json(path: &Path) -> Result<GenConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad generator config: {e}")))
    }
}

/// Ground truth retained alongside a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub config: GenConfig,
    /// Per branch label, the true mean curve μ_t on the quarter grid.
    pub mu: Vec<(String, Vec<f64>)>,
}

/// Ancestral sampling through the nested model: per-haul totals split down
/// the tree with each branch's count distribution driven by its latent
/// logit-scale mean, trip effect, and over-dispersion noise.
pub fn simulate_counts(cfg: &GenConfig) -> Result<(HaulDataset, TruthSidecar)> {
    let tree = cfg.nesting_tree()?;
    if cfg.t_max == 0 || cfg.trips == 0 || cfg.records_per_quarter == 0 {
        return Err(Error::Config("t_max, trips and records_per_quarter must be positive".into()));
    }
    if cfg.n_range.0 > cfg.n_range.1 {
        return Err(Error::Config(format!(
            "empty total range {}..={}",
            cfg.n_range.0, cfg.n_range.1
        )));
    }
    let basis = build_basis(cfg.depth)?;
    if basis.l < cfg.t_max {
        return Err(Error::Config(format!(
            "depth {} gives a {}-cell grid, smaller than t_max = {}",
            cfg.depth, basis.l, cfg.t_max
        )));
    }
    let times: Vec<f64> = (1..=cfg.t_max).map(|t| t as f64).collect();
    let h = build_interpolation(&times, &basis, Placement::CenteredInteger { t_max: cfg.t_max })?;

    // Per-node parameters and true mean curves, in tree order.
    let mut params = Vec::with_capacity(tree.nodes.len());
    let mut mu_curves = Vec::with_capacity(tree.nodes.len());
    for node in &tree.nodes {
        let gen = cfg
            .branches
            .iter()
            .find(|b| b.label == node.label)
            .ok_or_else(|| {
                Error::Config(format!("no generative parameters for branch '{}'", node.label))
            })?;
        let mu = if gen.theta.is_empty() {
            vec![0.0; cfg.t_max]
        } else {
            if gen.theta.len() != basis.l {
                return Err(Error::Config(format!(
                    "branch '{}' theta has length {}, grid needs {}",
                    node.label,
                    gen.theta.len(),
                    basis.l
                )));
            }
            h.apply(&basis.synthesize(&gen.theta))
        };
        params.push(gen.clone());
        mu_curves.push((node.label.clone(), mu));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Trip random effects per branch.
    let b: Vec<Vec<f64>> = params
        .iter()
        .map(|g| {
            (0..cfg.trips)
                .map(|_| {
                    if g.sigma_u > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        g.sigma_u * z
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(cfg.t_max * cfg.records_per_quarter);
    let mut per_trip_obs = vec![0usize; cfg.trips];
    let mut global = 0usize;
    for q in 1..=cfg.t_max {
        for _ in 0..cfg.records_per_quarter {
            let trip = global % cfg.trips;
            per_trip_obs[trip] += 1;
            let total = rng.random_range(cfg.n_range.0..=cfg.n_range.1);
            let mut pool: HashMap<BTreeSet<usize>, u64> = HashMap::new();
            pool.insert((0..tree.k).collect(), total);
            for (ni, node) in tree.nodes.iter().enumerate() {
                let full: BTreeSet<usize> =
                    node.left_set.iter().chain(&node.right_set).copied().collect();
                let n_node = *pool.get(&full).ok_or_else(|| {
                    Error::Nesting(format!("node '{}' does not partition its parent", node.label))
                })?;
                let g = &params[ni];
                let z: f64 = StandardNormal.sample(&mut rng);
                let eta = mu_curves[ni].1[q - 1] + b[ni][trip] + g.sigma * z;
                let p = sigmoid(eta);
                let y = match (g.lambda0, g.lambda_n) {
                    (None, None) => crate::dist::sample_binomial(n_node, p, &mut rng),
                    (l0, ln) => crate::dist::sample_zani(
                        n_node,
                        p,
                        l0.unwrap_or(f64::NEG_INFINITY),
                        ln.unwrap_or(f64::NEG_INFINITY),
                        &mut rng,
                    )?,
                };
                pool.insert(node.left_set.iter().copied().collect(), y);
                pool.insert(node.right_set.iter().copied().collect(), n_node - y);
            }
            let mut counts = vec![0u64; tree.k];
            for (k, c) in counts.iter_mut().enumerate() {
                let singleton: BTreeSet<usize> = std::iter::once(k).collect();
                *c = *pool.get(&singleton).ok_or_else(|| {
                    Error::Nesting(format!("category {k} never reached a leaf"))
                })?;
            }
            records.push(HaulRecord {
                trip_id: trip + 1,
                obs_index: per_trip_obs[trip],
                quarter: q,
                total: counts.iter().sum(),
                counts,
            });
            global += 1;
        }
    }
    let data = HaulDataset::new(records, cfg.categories.clone())?;
    let truth = TruthSidecar { config: cfg.clone(), mu: mu_curves };
    Ok((data, truth))
}

// ---------------------------------------------------------------------------
// WAIC table

/// Table-style WAIC comparison: branch rows × variant columns plus a Total
/// row. Nested variant totals are column sums over branches; the multinomial
/// column carries only its single full-model total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicTable {
    pub columns: Vec<String>,
    pub branch_rows: Vec<(String, Vec<Option<f64>>)>,
    pub total: Vec<Option<f64>>,
}

impl WaicTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
        let mut header = vec!["branch".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for (label, cells) in &self.branch_rows {
            let mut row = vec![label.clone()];
            row.extend(cells.iter().map(fmt));
            w.write_record(&row)?;
        }
        let mut row = vec!["Total".to_string()];
        row.extend(self.total.iter().map(fmt));
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<WaicTable> {
        let mut r = csv::Reader::from_reader(std::fs::File::open(path)?);
        let columns: Vec<String> =
            r.headers()?.iter().skip(1).map(|s| s.to_string()).collect();
        let mut branch_rows = Vec::new();
        let mut total = vec![None; columns.len()];
        for rec in r.records() {
            let rec = rec?;
            let label = rec
                .get(0)
                .ok_or_else(|| Error::Data("WAIC table row without a label".into()))?
                .to_string();
            let cells: Vec<Option<f64>> = (1..=columns.len())
                .map(|i| rec.get(i).filter(|s| !s.is_empty()).and_then(|s| s.parse().ok()))
                .collect();
            if label == "Total" {
                total = cells;
            } else {
                branch_rows.push((label, cells));
            }
        }
        Ok(WaicTable { columns, branch_rows, total })
    }

    /// Column sums of branch rows match the Total row (where branch cells
    /// exist) within `tol`.
    pub fn totals_consistent(&self, tol: f64) -> bool {
        for (c, total) in self.total.iter().enumerate() {
            let cells: Vec<f64> =
                self.branch_rows.iter().filter_map(|(_, row)| row[c]).collect();
            if cells.is_empty() {
                continue;
            }
            match total {
                Some(t) => {
                    if (cells.iter().sum::<f64>() - t).abs() > tol {
                        return false;
                    }
                }
                None => return false,
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Plot-data files

/// `quarter,median,lo95,hi95` rows of the fitted proportion band.
pub fn write_bands_csv(path: &Path, rows: &[(usize, f64, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    w.write_record(["quarter", "median", "lo95", "hi95"])?;
    for &(q, med, lo, hi) in rows {
        w.write_record(&[
            q.to_string(),
            format!("{med:?}"),
            format!("{lo:?}"),
            format!("{hi:?}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bands_csv(path: &Path) -> Result<Vec<(usize, f64, f64, f64)>> {
    let mut r = csv::Reader::from_reader(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("bad numeric field {i} in bands CSV")))
        };
        let q: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad quarter in bands CSV".into()))?;
        out.push((q, parse(1)?, parse(2)?, parse(3)?));
    }
    Ok(out)
}

/// `record_id,quarter,proportion,jitter` rows of observed branch proportions.
pub fn write_empirical_csv(path: &Path, rows: &[(usize, usize, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    w.write_record(["record_id", "quarter", "proportion", "jitter"])?;
    for &(id, q, prop, jit) in rows {
        w.write_record(&[
            id.to_string(),
            q.to_string(),
            format!("{prop:?}"),
            format!("{jit:?}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_empirical_csv(path: &Path) -> Result<Vec<(usize, usize, f64, f64)>> {
    let mut r = csv::Reader::from_reader(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad record_id in empirical CSV".into()))?;
        let q: usize = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad quarter in empirical CSV".into()))?;
        let prop: f64 = rec
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad proportion in empirical CSV".into()))?;
        let jit: f64 = rec
            .get(3)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad jitter in empirical CSV".into()))?;
        out.push((id, q, prop, jit));
    }
    Ok(out)
}

/// `quarter,smoothed` rows of the kernel-smoothed proportion curve.
pub fn write_smoother_csv(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    w.write_record(["quarter", "smoothed"])?;
    for &(q, v) in rows {
        w.write_record(&[q.to_string(), format!("{v:?}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_smoother_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_reader(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let q: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad quarter in smoother CSV".into()))?;
        let v: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad value in smoother CSV".into()))?;
        out.push((q, v));
    }
    Ok(out)
}

/// `record_id,observed,median,lo95,hi95` holdout prediction rows; `sqrt`
/// rescales every value column to the square-root scale.
pub fn write_holdout_csv(path: &Path, rows: &[PredictionRow], sqrt: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    w.write_record(["record_id", "observed", "median", "lo95", "hi95"])?;
    let scale = |v: f64| if sqrt { v.sqrt() } else { v };
    for r in rows {
        let observed = if sqrt {
            format!("{:?}", (r.observed as f64).sqrt())
        } else {
            r.observed.to_string()
        };
        w.write_record(&[
            r.record_id.to_string(),
            observed,
            format!("{:?}", scale(r.median)),
            format!("{:?}", scale(r.lo95)),
            format!("{:?}", scale(r.hi95)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_holdout_csv(path: &Path) -> Result<Vec<(usize, f64, f64, f64, f64)>> {
    let mut r = csv::Reader::from_reader(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad record_id in holdout CSV".into()))?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("bad numeric field {i} in holdout CSV")))
        };
        out.push((id, parse(1)?, parse(2)?, parse(3)?, parse(4)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fitting

/// Result bundle of a full run.
#[derive(Debug)]
pub struct FitBundle {
    pub outputs: Vec<PathBuf>,
    /// (branch/variant, error message) for fits that failed in isolation.
    pub failures: Vec<(String, String)>,
    pub waic_table: WaicTable,
    pub attempted: usize,
    /// Fits whose sampling ran to completion (WAIC cell present).
    pub succeeded: usize,
    pub converged_all: bool,
}

struct BranchOutcome {
    cells: Vec<Option<f64>>,
    outputs: Vec<PathBuf>,
    failures: Vec<(String, String)>,
    converged_all: bool,
}

fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let rank = (prob * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Posterior proportion band of logit⁻¹(μ_t) per quarter.
fn bands_from_archive(
    archive: &SampleArchive,
    model: &BranchPosterior,
    t_max: usize,
) -> Vec<(usize, f64, f64, f64)> {
    let theta_span = model.layout.span(Block::Theta, 0);
    let mut per_quarter: Vec<Vec<f64>> = vec![Vec::with_capacity(archive.kept_total()); t_max];
    for hidx in 0..archive.kept_total() {
        let draw = archive.draw(hidx);
        match &theta_span {
            Some(r) => {
                let basis = model.basis().expect("wavelet variant");
                let hmat = model.interpolation().expect("wavelet variant");
                let mu = hmat.apply(&basis.synthesize(&draw[r.clone()]));
                for (t, v) in mu.iter().enumerate() {
                    per_quarter[t].push(sigmoid(*v));
                }
            }
            None => {
                for q in per_quarter.iter_mut() {
                    q.push(0.5);
                }
            }
        }
    }
    per_quarter
        .into_iter()
        .enumerate()
        .map(|(t, mut v)| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (t + 1, quantile(&v, 0.5), quantile(&v, 0.025), quantile(&v, 0.975))
        })
        .collect()
}

/// Mean draws at the observation times, for the transform summary.
fn mu_draws(archive: &SampleArchive, model: &BranchPosterior) -> Option<Vec<Vec<f64>>> {
    let span = model.layout.span(Block::Theta, 0)?;
    let basis = model.basis()?;
    let hmat = model.interpolation()?;
    Some(
        (0..archive.kept_total())
            .map(|hidx| hmat.apply(&basis.synthesize(&archive.draw(hidx)[span.clone()])))
            .collect(),
    )
}

#[allow(clippy::too_many_arguments)]
fn fit_branch(
    bi: usize,
    node: &TreeNode,
    full_data: &HaulDataset,
    fit_data: &HaulDataset,
    test_ids: Option<&(HaulDataset, Vec<usize>)>,
    basis: &Arc<WaveletBasis>,
    h: &Arc<InterpolationMatrix>,
    config: &RunConfig,
    nested_order: &[Variant],
    warm_start: bool,
) -> BranchOutcome {
    let label = sanitize(&node.label);
    let mut outcome = BranchOutcome {
        cells: vec![None; config.variants.len()],
        outputs: Vec::new(),
        failures: Vec::new(),
        converged_all: true,
    };
    let fail = |outcome: &mut BranchOutcome, what: String, err: String| {
        outcome.failures.push((what, err));
    };

    // Empirical proportions with jitter, and the kernel-smoothed overlay,
    // from the complete dataset.
    let plot_branch = aggregate_branch(full_data, node);
    let mut jit_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, bi, 100));
    let mut emp_rows = Vec::new();
    let mut times = Vec::new();
    let mut props = Vec::new();
    for (i, p) in plot_branch.pairs.iter().enumerate() {
        if p.n == 0 {
            continue;
        }
        let prop = p.y as f64 / p.n as f64;
        emp_rows.push((i, p.quarter, prop, jit_rng.random_range(-0.3..0.3)));
        times.push(p.quarter as f64);
        props.push(prop);
    }
    let emp_path = config.out_dir.join(format!("empirical_{label}.csv"));
    match write_empirical_csv(&emp_path, &emp_rows) {
        Ok(()) => outcome.outputs.push(emp_path),
        Err(e) => fail(&mut outcome, format!("{label}/empirical"), e.to_string()),
    }
    let grid: Vec<f64> = (1..=full_data.t_max).map(|t| t as f64).collect();
    let smooth = kernel_smooth(&times, &props, 5.0, &grid);
    let smooth_rows: Vec<(usize, f64)> =
        smooth.into_iter().enumerate().map(|(t, v)| (t + 1, v)).collect();
    let smooth_path = config.out_dir.join(format!("smoother_{label}.csv"));
    match write_smoother_csv(&smooth_path, &smooth_rows) {
        Ok(()) => outcome.outputs.push(smooth_path),
        Err(e) => fail(&mut outcome, format!("{label}/smoother"), e.to_string()),
    }

    // Held-out branch observations, when a split is active.
    let tests: Option<Vec<HoldoutRecord>> = test_ids.map(|(test_data, ids)| {
        aggregate_branch(test_data, node)
            .pairs
            .iter()
            .zip(ids)
            .map(|(p, &id)| HoldoutRecord { record_id: id, y: p.y, n: p.n, quarter: p.quarter })
            .collect()
    });

    let branch_data = aggregate_branch(fit_data, node);
    let mut prev: Option<(BranchPosterior, SampleArchive)> = None;
    for &variant in nested_order {
        let col = config.variants.iter().position(|&v| v == variant).expect("ordered subset");
        let what = format!("{label}/{variant}");
        let wavelet_parts = if variant == Variant::ConstantMean {
            (None, None)
        } else {
            (Some(basis.clone()), Some(h.clone()))
        };
        let model =
            match BranchPosterior::for_branch(&branch_data, variant, wavelet_parts.0, wavelet_parts.1)
            {
                Ok(m) => m,
                Err(e) => {
                    fail(&mut outcome, what, e.to_string());
                    continue;
                }
            };
        let mut sampler = config.sampler.clone();
        sampler.seed = derive_seed(config.seed, bi, variant_slot(variant));
        let inits: Vec<Vec<f64>> = match (&prev, warm_start) {
            (Some((prev_model, prev_arch)), true) => {
                let mut v = Vec::with_capacity(sampler.chains);
                let mut ok = true;
                for c in 0..sampler.chains.min(prev_arch.chains) {
                    let last = prev_arch
                        .draw(c * prev_arch.kept_per_chain + prev_arch.kept_per_chain - 1);
                    match model.embed_from(prev_model, last) {
                        Ok(init) => v.push(init),
                        Err(e) => {
                            fail(&mut outcome, format!("{what}/warm-start"), e.to_string());
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    v
                } else {
                    Vec::new()
                }
            }
            _ => Vec::new(),
        };
        let mut archive = match hmc::run(&model, &sampler, &inits) {
            Ok(a) => a,
            Err(e) => {
                fail(&mut outcome, what, e.to_string());
                continue;
            }
        };
        archive.label = format!("{}:{}", node.label, variant);
        archive.grid = Some(GridMeta {
            d: basis.d,
            t_max: fit_data.t_max,
            unit_interval: false,
            n_obs: fit_data.t_max,
        });
        outcome.converged_all &= archive.converged;

        let arch_path = config.out_dir.join(format!("archive_{label}_{}.dat", file_tag(variant)));
        match archive.save(&arch_path) {
            Ok(()) => outcome.outputs.push(arch_path),
            Err(e) => fail(&mut outcome, format!("{what}/archive"), e.to_string()),
        }
        match waic_archive(&archive) {
            Ok(w) => outcome.cells[col] = Some(w.waic),
            Err(e) => fail(&mut outcome, format!("{what}/waic"), e.to_string()),
        }
        let band_rows = bands_from_archive(&archive, &model, fit_data.t_max);
        let band_path = config.out_dir.join(format!("bands_{label}_{}.csv", file_tag(variant)));
        match write_bands_csv(&band_path, &band_rows) {
            Ok(()) => outcome.outputs.push(band_path),
            Err(e) => fail(&mut outcome, format!("{what}/bands"), e.to_string()),
        }
        if let Some(draws) = mu_draws(&archive, &model) {
            let t_path =
                config.out_dir.join(format!("transform_{label}_{}.csv", file_tag(variant)));
            let result = transform_summary(&draws, basis, h, config.transform_draws)
                .and_then(|summary| {
                    summary.write_csv(std::fs::File::create(&t_path)?)?;
                    Ok(())
                });
            match result {
                Ok(()) => outcome.outputs.push(t_path),
                Err(e) => fail(&mut outcome, format!("{what}/transform"), e.to_string()),
            }
        }
        if let Some(tests) = &tests {
            let seed = derive_seed(config.seed, bi, 200 + variant_slot(variant));
            match predict_holdout(&archive, &model, tests, seed) {
                Ok(rows) => {
                    let hp =
                        config.out_dir.join(format!("holdout_{label}_{}.csv", file_tag(variant)));
                    let hps = config
                        .out_dir
                        .join(format!("holdout_{label}_{}_sqrt.csv", file_tag(variant)));
                    match write_holdout_csv(&hp, &rows, false)
                        .and_then(|()| write_holdout_csv(&hps, &rows, true))
                    {
                        Ok(()) => {
                            outcome.outputs.push(hp);
                            outcome.outputs.push(hps);
                        }
                        Err(e) => {
                            fail(&mut outcome, format!("{what}/holdout"), e.to_string())
                        }
                    }
                }
                Err(e) => fail(&mut outcome, format!("{what}/holdout"), e.to_string()),
            }
        }
        prev = Some((model, archive));
    }
    outcome
}

/// Fit every branch × variant combination, warm-starting richer nested
/// variants from simpler ones when enabled, and write the full output
/// bundle. Per-branch failures are isolated and reported, not fatal.
pub fn fit_all(config: &RunConfig) -> Result<FitBundle> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let data = HaulDataset::read_csv_path(&config.data_path)?;
    let tree = crate::counts::parse_nesting_path(&config.nesting_path)?;
    if tree.category_names != data.category_names {
        return Err(Error::Nesting(format!(
            "nesting categories {:?} do not match the data's {:?}",
            tree.category_names, data.category_names
        )));
    }

    let split = match config.holdout_fraction {
        Some(f) => Some(make_holdout(&data, f, config.seed)?),
        None => None,
    };
    let (fit_data, test_pack) = match &split {
        Some(s) => {
            let train = s.train_dataset(&data)?;
            let test_records: Vec<HaulRecord> =
                s.test.iter().map(|&i| data.records[i].clone()).collect();
            let test_data = HaulDataset::new(test_records, data.category_names.clone())?;
            (train, Some((test_data, s.test.clone())))
        }
        None => (data.clone(), None),
    };

    let depth = config.depth.unwrap_or_else(|| default_depth(fit_data.t_max));
    let basis = Arc::new(build_basis(depth)?);
    let times: Vec<f64> = (1..=fit_data.t_max).map(|t| t as f64).collect();
    let h = Arc::new(build_interpolation(
        &times,
        &basis,
        Placement::CenteredInteger { t_max: fit_data.t_max },
    )?);

    let mut nested_order: Vec<Variant> = config
        .variants
        .iter()
        .copied()
        .filter(|v| v.nested_rank().is_some())
        .collect();
    nested_order.sort_by_key(|v| v.nested_rank());
    let want_multinomial = config.variants.contains(&Variant::Multinomial);
    let warm = config.warm_start && !config.parallel_branches;

    let outcomes: Vec<BranchOutcome> = if config.parallel_branches {
        std::thread::scope(|scope| {
            let handles: Vec<_> = tree
                .nodes
                .iter()
                .enumerate()
                .map(|(bi, node)| {
                    let basis = &basis;
                    let h = &h;
                    let fit_data = &fit_data;
                    let data = &data;
                    let test_pack = test_pack.as_ref();
                    let nested = nested_order.as_slice();
                    scope.spawn(move || {
                        fit_branch(bi, node, data, fit_data, test_pack, basis, h, config, nested, false)
                    })
                })
                .collect();
            handles.into_iter().map(|hd| hd.join().expect("branch thread panicked")).collect()
        })
    } else {
        tree.nodes
            .iter()
            .enumerate()
            .map(|(bi, node)| {
                fit_branch(
                    bi,
                    node,
                    &data,
                    &fit_data,
                    test_pack.as_ref(),
                    &basis,
                    &h,
                    config,
                    &nested_order,
                    warm,
                )
            })
            .collect()
    };

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    let mut converged_all = true;
    let mut branch_rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for (node, oc) in tree.nodes.iter().zip(outcomes) {
        branch_rows.push((node.label.clone(), oc.cells));
        outputs.extend(oc.outputs);
        failures.extend(oc.failures);
        converged_all &= oc.converged_all;
    }

    let mut multi_waic = None;
    if want_multinomial {
        let what = "multinomial".to_string();
        let mut sampler = config.sampler.clone();
        sampler.seed = derive_seed(config.seed, tree.nodes.len(), variant_slot(Variant::Multinomial));
        match BranchPosterior::for_multinomial(&fit_data, basis.clone(), h.clone())
            .and_then(|model| hmc::run(&model, &sampler, &[]).map(|a| (model, a)))
        {
            Ok((_model, mut archive)) => {
                archive.grid = Some(GridMeta {
                    d: basis.d,
                    t_max: fit_data.t_max,
                    unit_interval: false,
                    n_obs: fit_data.t_max,
                });
                converged_all &= archive.converged;
                let path = config.out_dir.join("archive_multinomial.dat");
                match archive.save(&path) {
                    Ok(()) => outputs.push(path),
                    Err(e) => failures.push((format!("{what}/archive"), e.to_string())),
                }
                match waic_archive(&archive) {
                    Ok(w) => multi_waic = Some(w.waic),
                    Err(e) => failures.push((format!("{what}/waic"), e.to_string())),
                }
            }
            Err(e) => failures.push((what, e.to_string())),
        }
    }

    let columns: Vec<String> = config.variants.iter().map(|v| v.display_name().to_string()).collect();
    let total: Vec<Option<f64>> = config
        .variants
        .iter()
        .enumerate()
        .map(|(c, v)| {
            if *v == Variant::Multinomial {
                multi_waic
            } else {
                let cells: Vec<f64> = branch_rows.iter().filter_map(|(_, row)| row[c]).collect();
                if cells.len() == branch_rows.len() {
                    Some(cells.iter().sum())
                } else {
                    None
                }
            }
        })
        .collect();
    let waic_table = WaicTable { columns, branch_rows, total };
    let table_path = config.out_dir.join("waic_table.csv");
    waic_table.write_csv(&table_path)?;
    outputs.push(table_path);

    if let Some(s) = &split {
        let split_path = config.out_dir.join("holdout_split.json");
        std::fs::write(&split_path, serde_json::to_string_pretty(s)?)?;
        outputs.push(split_path);
    }

    let attempted = tree.nodes.len() * nested_order.len() + usize::from(want_multinomial);
    let succeeded = waic_table
        .branch_rows
        .iter()
        .map(|(_, row)| row.iter().filter(|c| c.is_some()).count())
        .sum::<usize>()
        + usize::from(multi_waic.is_some());
    Ok(FitBundle { outputs, failures, waic_table, attempted, succeeded, converged_all })
}

/// A fitted raw series: Gaussian wavelet regression over unit-interval
/// observation times, with the posterior transform summary.
pub struct SeriesFit {
    pub archive: SampleArchive,
    pub summary: WaveletTransformSummary,
    pub archive_path: PathBuf,
    pub transform_path: PathBuf,
}

/// Fit the wavelet mean model directly to a real-valued series and write the
/// archive plus its transform summary.
pub fn fit_series(
    series: &[(f64, f64)],
    depth: usize,
    sampler: &SamplerConfig,
    out_dir: &Path,
    transform_draws: usize,
) -> Result<SeriesFit> {
    std::fs::create_dir_all(out_dir)?;
    let times: Vec<f64> = series.iter().map(|&(t, _)| t).collect();
    let values: Vec<f64> = series.iter().map(|&(_, y)| y).collect();
    let basis = Arc::new(build_basis(depth)?);
    let h = Arc::new(build_interpolation(&times, &basis, Placement::UnitInterval)?);
    let model = SeriesPosterior::new(&values, basis.clone(), h.clone())?;
    let mut archive = hmc::run(&model, sampler, &[])?;
    archive.grid =
        Some(GridMeta { d: depth, t_max: 0, unit_interval: true, n_obs: series.len() });

    let span = model
        .layout
        .span(Block::Theta, 0)
        .expect("series model always carries theta");
    let draws: Vec<Vec<f64>> = (0..archive.kept_total())
        .map(|hidx| h.apply(&basis.synthesize(&archive.draw(hidx)[span.clone()])))
        .collect();
    let summary = transform_summary(&draws, &basis, &h, transform_draws)?;

    let archive_path = out_dir.join("archive_series.dat");
    archive.save(&archive_path)?;
    let transform_path = out_dir.join("transform_series.csv");
    summary.write_csv(std::fs::File::create(&transform_path)?)?;
    Ok(SeriesFit { archive, summary, archive_path, transform_path })
}

/// Recompute a transform summary from a saved archive, using its stored grid
/// metadata to rebuild the basis and placement.
pub fn transform_from_archive(
    archive: &SampleArchive,
    transform_draws: usize,
) -> Result<WaveletTransformSummary> {
    let grid = archive.grid.ok_or_else(|| {
        Error::Archive("archive carries no grid metadata; refit with this version".into())
    })?;
    let span = archive
        .blocks
        .iter()
        .find(|s| s.block == Block::Theta && s.category == 0)
        .map(|s| s.offset..s.offset + s.len)
        .ok_or_else(|| {
            Error::Archive(format!(
                "archive '{}' has no wavelet coefficients to transform",
                archive.label
            ))
        })?;
    let basis = build_basis(grid.d)?;
    let (times, placement): (Vec<f64>, Placement) = if grid.unit_interval {
        (
            (0..grid.n_obs).map(|i| i as f64 / grid.n_obs as f64).collect(),
            Placement::UnitInterval,
        )
    } else {
        (
            (1..=grid.t_max).map(|t| t as f64).collect(),
            Placement::CenteredInteger { t_max: grid.t_max },
        )
    };
    let h = build_interpolation(&times, &basis, placement)?;
    let draws: Vec<Vec<f64>> = (0..archive.kept_total())
        .map(|hidx| h.apply(&basis.synthesize(&archive.draw(hidx)[span.clone()])))
        .collect();
    transform_summary(&draws, &basis, &h, transform_draws)
}
