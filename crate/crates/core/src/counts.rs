//! Haul-level count records, the binary nesting tree over categories, and the
//! branch aggregation that factorizes a multinomial series into independent
//! binomial-family sub-series.
//!
//! A record is one haul: a trip id, an observation index within the trip, a
//! quarter, and K per-category counts. An internal tree node splits its
//! member categories into a left and a right set; aggregating a record at a
//! node yields the pair (ỹ, Ñ) = (sum over left, sum over members), and the
//! collection of those pairs across records is the branch dataset fitted by
//! one branch model. Summing branch binomial log-likelihoods over the tree
//! reproduces the multinomial log-likelihood exactly when the branch
//! probabilities are the corresponding probability ratios; that identity is
//! exposed as [`nested_loglik_check`] and used as a test oracle.

use crate::{dist, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

/// One haul: the observational unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaulRecord {
    /// Trip id, 1..=J.
    pub trip_id: usize,
    /// Observation index within the trip, 1..=n_j.
    pub obs_index: usize,
    /// Quarter, 1..=T.
    pub quarter: usize,
    /// Per-category counts, length K.
    pub counts: Vec<u64>,
    /// Total N = Σ counts.
    pub total: u64,
}

/// A validated collection of haul records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaulDataset {
    pub records: Vec<HaulRecord>,
    pub k: usize,
    pub t_max: usize,
    pub j_max: usize,
    pub category_names: Vec<String>,
}

impl HaulDataset {
    /// Validate and assemble a dataset from raw records.
    pub fn new(records: Vec<HaulRecord>, category_names: Vec<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("dataset has no records".into()));
        }
        let k = category_names.len();
        let mut t_max = 0;
        let mut j_max = 0;
        for (i, r) in records.iter().enumerate() {
            if r.counts.len() != k {
                return Err(Error::Data(format!(
                    "record {} has {} counts, expected {}",
                    i + 1,
                    r.counts.len(),
                    k
                )));
            }
            let sum: u64 = r.counts.iter().sum();
            if sum != r.total {
                return Err(Error::Data(format!(
                    "record {}: total {} does not equal count sum {}",
                    i + 1,
                    r.total,
                    sum
                )));
            }
            if r.trip_id == 0 || r.quarter == 0 {
                return Err(Error::Data(format!("record {}: trip and quarter are 1-based", i + 1)));
            }
            t_max = t_max.max(r.quarter);
            j_max = j_max.max(r.trip_id);
        }
        Ok(HaulDataset { records, k, t_max, j_max, category_names })
    }

    /// Number of records M.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Read the haul CSV format: header `trip,obs,quarter,<cat1>,...,<catK>`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 4 {
            return Err(Error::Data(
                "header must be trip,obs,quarter followed by at least one category".into(),
            ));
        }
        for (i, want) in ["trip", "obs", "quarter"].iter().enumerate() {
            if headers.get(i).map(str::trim) != Some(*want) {
                return Err(Error::Data(format!(
                    "column {} must be named '{}', found '{}'",
                    i + 1,
                    want,
                    headers.get(i).unwrap_or("")
                )));
            }
        }
        let category_names: Vec<String> =
            headers.iter().skip(3).map(|s| s.trim().to_string()).collect();
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let lineno = line + 2; // header is line 1
            let parse_usize = |idx: usize, name: &str| -> Result<usize> {
                row.get(idx)
                    .and_then(|s| s.trim().parse::<usize>().ok())
                    .ok_or_else(|| Error::Data(format!("line {lineno}: bad {name} field")))
            };
            let trip_id = parse_usize(0, "trip")?;
            let obs_index = parse_usize(1, "obs")?;
            let quarter = parse_usize(2, "quarter")?;
            let mut counts = Vec::with_capacity(category_names.len());
            for (c, cell) in row.iter().skip(3).enumerate() {
                let v: i64 = cell.trim().parse().map_err(|_| {
                    Error::Data(format!("line {lineno}: bad count in column {}", c + 4))
                })?;
                if v < 0 {
                    return Err(Error::Data(format!(
                        "line {lineno}: negative count {v} in column {}",
                        c + 4
                    )));
                }
                counts.push(v as u64);
            }
            if counts.len() != category_names.len() {
                return Err(Error::Data(format!("line {lineno}: wrong number of count columns")));
            }
            let total = counts.iter().sum();
            records.push(HaulRecord { trip_id, obs_index, quarter, counts, total });
        }
        HaulDataset::new(records, category_names)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["trip".to_string(), "obs".to_string(), "quarter".to_string()];
        header.extend(self.category_names.iter().cloned());
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row =
                vec![r.trip_id.to_string(), r.obs_index.to_string(), r.quarter.to_string()];
            row.extend(r.counts.iter().map(|c| c.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Quarters that carry at least `min` records (holdout eligibility uses 2).
    pub fn quarters_with_at_least(&self, min: usize) -> Vec<usize> {
        let mut counts = vec![0usize; self.t_max + 1];
        for r in &self.records {
            counts[r.quarter] += 1;
        }
        (1..=self.t_max).filter(|&t| counts[t] >= min).collect()
    }
}

/// An internal node of the nesting tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub label: String,
    /// Category indices (0-based) on the "success" side of the branch pair.
    pub left_set: Vec<usize>,
    pub right_set: Vec<usize>,
}

impl TreeNode {
    pub fn member_set(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.left_set.iter().chain(&self.right_set).cloned().collect();
        m.sort_unstable();
        m
    }
}

/// Binary partition tree over the K categories; one branch model per node.
/// Nodes are stored in pre-order, which fixes the ordering of every output
/// table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestingTree {
    pub nodes: Vec<TreeNode>,
    pub k: usize,
    pub category_names: Vec<String>,
}

/// On-disk nesting config: category names plus one entry per internal node
/// listing the two child category-name sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NestingConfig {
    categories: Vec<String>,
    nodes: Vec<NestingConfigNode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NestingConfigNode {
    label: String,
    left: Vec<String>,
    right: Vec<String>,
}

/// Parse and validate a nesting config (JSON).
pub fn parse_nesting(config_text: &str) -> Result<NestingTree> {
    let cfg: NestingConfig = serde_json::from_str(config_text)
        .map_err(|e| Error::Nesting(format!("config parse: {e}")))?;
    let k = cfg.categories.len();
    if k < 2 {
        return Err(Error::Nesting("need at least two categories".into()));
    }
    let index_of = |name: &str| -> Result<usize> {
        cfg.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Nesting(format!("unknown category '{name}'")))
    };
    let mut raw = Vec::new();
    for node in &cfg.nodes {
        let left: Vec<usize> = node.left.iter().map(|n| index_of(n)).collect::<Result<_>>()?;
        let right: Vec<usize> = node.right.iter().map(|n| index_of(n)).collect::<Result<_>>()?;
        let l: BTreeSet<usize> = left.iter().cloned().collect();
        let r: BTreeSet<usize> = right.iter().cloned().collect();
        if l.len() != left.len() || r.len() != right.len() {
            return Err(Error::Nesting(format!("node '{}' repeats a category", node.label)));
        }
        if !l.is_disjoint(&r) {
            return Err(Error::Nesting(format!(
                "node '{}' places a category in both children",
                node.label
            )));
        }
        if l.is_empty() || r.is_empty() {
            return Err(Error::Nesting(format!("node '{}' has an empty child", node.label)));
        }
        raw.push(TreeNode {
            label: node.label.clone(),
            left_set: l.into_iter().collect(),
            right_set: r.into_iter().collect(),
        });
    }
    if raw.len() != k - 1 {
        return Err(Error::Nesting(format!(
            "{} categories need exactly {} internal nodes, found {}",
            k,
            k - 1,
            raw.len()
        )));
    }
    // Recover the hierarchy from the member sets: the root covers everything,
    // and every non-singleton child set must be the member set of exactly one
    // other node.
    let full: BTreeSet<usize> = (0..k).collect();
    let member_of = |n: &TreeNode| -> BTreeSet<usize> { n.member_set().into_iter().collect() };
    let root_pos = raw
        .iter()
        .position(|n| member_of(n) == full)
        .ok_or_else(|| Error::Nesting("no node covers all categories (missing root)".into()))?;
    let mut ordered = Vec::with_capacity(raw.len());
    let mut used = vec![false; raw.len()];
    fn descend(
        raw: &[TreeNode],
        used: &mut [bool],
        ordered: &mut Vec<TreeNode>,
        pos: usize,
    ) -> Result<()> {
        if used[pos] {
            return Err(Error::Nesting(format!(
                "node '{}' appears in two places in the hierarchy",
                raw[pos].label
            )));
        }
        used[pos] = true;
        ordered.push(raw[pos].clone());
        for child in [&raw[pos].left_set, &raw[pos].right_set] {
            if child.len() == 1 {
                continue;
            }
            let cset: BTreeSet<usize> = child.iter().cloned().collect();
            let matches: Vec<usize> = raw
                .iter()
                .enumerate()
                .filter(|(_, n)| {
                    n.member_set().iter().cloned().collect::<BTreeSet<usize>>() == cset
                })
                .map(|(i, _)| i)
                .collect();
            match matches.len() {
                1 => descend(raw, used, ordered, matches[0])?,
                0 => {
                    return Err(Error::Nesting(format!(
                        "child set {:?} of node '{}' is not split by any node",
                        child, raw[pos].label
                    )))
                }
                _ => {
                    return Err(Error::Nesting(format!(
                        "child set {:?} of node '{}' is split by multiple nodes",
                        child, raw[pos].label
                    )))
                }
            }
        }
        Ok(())
    }
    descend(&raw, &mut used, &mut ordered, root_pos)?;
    if ordered.len() != raw.len() {
        let orphan = raw
            .iter()
            .zip(&used)
            .find(|(_, &u)| !u)
            .map(|(n, _)| n.label.clone())
            .unwrap_or_default();
        return Err(Error::Nesting(format!("node '{orphan}' is not reachable from the root")));
    }
    Ok(NestingTree { nodes: ordered, k, category_names: cfg.categories })
}

pub fn parse_nesting_path(path: &Path) -> Result<NestingTree> {
    parse_nesting(&std::fs::read_to_string(path)?)
}

impl NestingTree {
    /// Serialize back to the config JSON format.
    pub fn to_config_json(&self) -> String {
        let cfg = NestingConfig {
            categories: self.category_names.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NestingConfigNode {
                    label: n.label.clone(),
                    left: n.left_set.iter().map(|&i| self.category_names[i].clone()).collect(),
                    right: n.right_set.iter().map(|&i| self.category_names[i].clone()).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&cfg).expect("nesting config serializes")
    }
}

/// One record's aggregated pair at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchPair {
    /// ỹ: sum of counts over the node's left set.
    pub y: u64,
    /// Ñ: sum over the node's member set.
    pub n: u64,
    /// Quarter, 1-based.
    pub quarter: usize,
    /// Trip id, 1-based.
    pub trip_id: usize,
}

/// All records aggregated at one internal node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchDataset {
    pub node_label: String,
    pub pairs: Vec<BranchPair>,
    pub t_max: usize,
    pub j_max: usize,
    /// Indices of pairs with Ñ = 0; they contribute no likelihood.
    pub empty_records: Vec<usize>,
}

/// Aggregate a dataset at one tree node.
pub fn aggregate_branch(dataset: &HaulDataset, node: &TreeNode) -> BranchDataset {
    let mut pairs = Vec::with_capacity(dataset.len());
    let mut empty = Vec::new();
    for (i, rec) in dataset.records.iter().enumerate() {
        let y: u64 = node.left_set.iter().map(|&k| rec.counts[k]).sum();
        let n_member: u64 = node.member_set().iter().map(|&k| rec.counts[k]).sum();
        if n_member == 0 {
            empty.push(i);
        }
        pairs.push(BranchPair { y, n: n_member, quarter: rec.quarter, trip_id: rec.trip_id });
    }
    BranchDataset {
        node_label: node.label.clone(),
        pairs,
        t_max: dataset.t_max,
        j_max: dataset.j_max,
        empty_records: empty,
    }
}

impl BranchDataset {
    /// Fraction of non-empty records sitting at ỹ = 0 or ỹ = Ñ.
    pub fn inflation_fraction(&self) -> f64 {
        let live: Vec<&BranchPair> = self.pairs.iter().filter(|p| p.n > 0).collect();
        if live.is_empty() {
            return 0.0;
        }
        let at_edge = live.iter().filter(|p| p.y == 0 || p.y == p.n).count();
        at_edge as f64 / live.len() as f64
    }
}

/// Sum of branch binomial log-pmfs over the tree with branch probabilities
/// p_branch = Σ_left p / Σ_member p. Equals the multinomial log-pmf of `y`
/// under `p`; exists as a test oracle for that identity.
pub fn nested_loglik_check(y: &[u64], p: &[f64], tree: &NestingTree) -> Result<f64> {
    if y.len() != tree.k || p.len() != tree.k {
        return Err(Error::Nesting(format!(
            "expected {} categories, got y: {}, p: {}",
            tree.k,
            y.len(),
            p.len()
        )));
    }
    let mut total = 0.0;
    for node in &tree.nodes {
        let y_left: u64 = node.left_set.iter().map(|&k| y[k]).sum();
        let n_member: u64 = node.member_set().iter().map(|&k| y[k]).sum();
        if n_member == 0 {
            continue;
        }
        let p_left: f64 = node.left_set.iter().map(|&k| p[k]).sum();
        let p_member: f64 = node.member_set().iter().map(|&k| p[k]).sum();
        if p_member <= 0.0 {
            return Err(Error::Domain(format!(
                "node '{}': zero member probability with {} observed counts",
                node.label, n_member
            )));
        }
        total += dist::binomial_logpmf(y_left, n_member, p_left / p_member);
    }
    Ok(total)
}
