//! Daubechies least-asymmetric wavelet basis on a dyadic grid, the forward
//! and inverse transforms, the observation-time interpolation matrix H, and
//! posterior transform summaries.
//!
//! The basis lives on L = 2^D grid cells over one period and is built from
//! the 8-tap least-asymmetric filter with periodic boundary handling. The
//! coefficient vector is ordered coarse-to-fine: index 0 is the scaling
//! coefficient, then detail level j (1..=D) contributes 2^{j-1} coefficients.
//! Level j is labelled with the frequency window [2^{j-1}, 2^j) in cycles per
//! grid period; tones sitting exactly on a window edge split between the two
//! adjacent levels depending on their phase.
//!
//! Observation times map into the grid through H, a sparse row-stochastic
//! linear-interpolation matrix, so the mean function at the observations is
//! μ = H·Wᵗ·θ. Integer time units are centred in the grid and the unused
//! margin wraps periodically; times on the unit interval use the whole grid.

use crate::{Error, Result};

/// 8-tap least-asymmetric low-pass decomposition filter (sum √2).
pub const LA8_LO: [f64; 8] = [
    -0.07576571478927333,
    -0.02963552764599851,
    0.49761866763201545,
    0.8037387518059161,
    0.29785779560527736,
    -0.09921954357684722,
    -0.012603967262037833,
    0.0322231006040427,
];

fn la8_hi() -> [f64; 8] {
    let mut h = [0.0; 8];
    for (n, h_n) in h.iter_mut().enumerate() {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        *h_n = sign * LA8_LO[7 - n];
    }
    h
}

/// Orthonormal wavelet basis on a 2^D grid.
#[derive(Debug, Clone)]
pub struct WaveletBasis {
    /// Number of detail levels.
    pub d: usize,
    /// Grid size L = 2^D.
    pub l: usize,
    /// L×L orthonormal transform matrix, row-major; dwt(x) = W·x.
    pub w: Vec<f64>,
    /// Level label per coefficient index: 0 for the scaling coefficient,
    /// then j for detail level j (which owns 2^{j-1} consecutive indices).
    pub detail_map: Vec<usize>,
}

/// Build the basis for `d` detail levels (grid size 2^d).
pub fn build_basis(d: usize) -> Result<WaveletBasis> {
    if !(2..=12).contains(&d) {
        return Err(Error::Wavelet(format!("detail levels D = {d} outside 2..=12")));
    }
    let l = 1usize << d;
    let mut detail_map = Vec::with_capacity(l);
    detail_map.push(0);
    for j in 1..=d {
        detail_map.extend(std::iter::repeat(j).take(1 << (j - 1)));
    }
    // W row k is the transform of the k-th unit vector read off column-wise:
    // dwt(e_i)[k] = W[k][i].
    let mut w = vec![0.0; l * l];
    let mut unit = vec![0.0; l];
    for i in 0..l {
        unit.iter_mut().for_each(|v| *v = 0.0);
        unit[i] = 1.0;
        let col = pyramid_forward(&unit, d);
        for k in 0..l {
            w[k * l + i] = col[k];
        }
    }
    Ok(WaveletBasis { d, l, w, detail_map })
}

impl WaveletBasis {
    /// Forward transform via the pyramid algorithm; agrees with W·x.
    pub fn dwt(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.len() != self.l {
            return Err(Error::Wavelet(format!(
                "signal length {} does not match grid size {}",
                signal.len(),
                self.l
            )));
        }
        Ok(pyramid_forward(signal, self.d))
    }

    /// Inverse transform; idwt(dwt(x)) = x.
    pub fn idwt(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.l {
            return Err(Error::Wavelet(format!(
                "coefficient length {} does not match grid size {}",
                coeffs.len(),
                self.l
            )));
        }
        Ok(pyramid_inverse(coeffs, self.d))
    }

    /// Dense W·x, the matrix form of the forward transform.
    pub fn matrix_dwt(&self, signal: &[f64]) -> Vec<f64> {
        let l = self.l;
        let mut out = vec![0.0; l];
        for k in 0..l {
            let row = &self.w[k * l..(k + 1) * l];
            out[k] = row.iter().zip(signal).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Wᵗ·θ: the grid-valued function with coefficient vector θ.
    pub fn synthesize(&self, theta: &[f64]) -> Vec<f64> {
        pyramid_inverse(theta, self.d)
    }

    /// Frequency window [2^{j-1}, 2^j) label of a detail level, in cycles per
    /// grid period; the reported "frequency value" is the window's upper edge
    /// 2^j.
    pub fn frequency_window(&self, level: usize) -> (f64, f64) {
        assert!(level >= 1 && level <= self.d);
        ((1u64 << (level - 1)) as f64, (1u64 << level) as f64)
    }

    /// Coefficient index range of a level (0 = scaling).
    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        if level == 0 {
            return 0..1;
        }
        let start = 1 << (level - 1);
        start..start + (1 << (level - 1))
    }

    /// Squared-coefficient energy per level, scaling first.
    pub fn level_energies(&self, coeffs: &[f64]) -> Vec<f64> {
        (0..=self.d)
            .map(|j| self.level_range(j).map(|i| coeffs[i] * coeffs[i]).sum())
            .collect()
    }
}

fn pyramid_forward(signal: &[f64], d: usize) -> Vec<f64> {
    let hi = la8_hi();
    let mut approx = signal.to_vec();
    let mut out = vec![0.0; signal.len()];
    for stage in 1..=d {
        let len = approx.len();
        let half = len / 2;
        let mut next = vec![0.0; half];
        let level = d + 1 - stage;
        let base = if level >= 1 { 1 << (level - 1) } else { 0 };
        for k in 0..half {
            let mut a = 0.0;
            let mut dd = 0.0;
            for n in 0..8 {
                let idx = (2 * k + n) % len;
                a += LA8_LO[n] * approx[idx];
                dd += hi[n] * approx[idx];
            }
            next[k] = a;
            out[base + k] = dd;
        }
        approx = next;
    }
    out[0] = approx[0];
    out
}

fn pyramid_inverse(coeffs: &[f64], d: usize) -> Vec<f64> {
    let hi = la8_hi();
    let mut approx = vec![coeffs[0]];
    for level in 1..=d {
        let base = 1 << (level - 1);
        let detail = &coeffs[base..2 * base];
        let len = 2 * approx.len();
        let mut next = vec![0.0; len];
        for k in 0..approx.len() {
            for n in 0..8 {
                let idx = (2 * k + n) % len;
                next[idx] += LA8_LO[n] * approx[k] + hi[n] * detail[k];
            }
        }
        approx = next;
    }
    approx
}

/// How observation times are laid onto the grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Placement {
    /// Integer time units 1..=t_max centred in the grid; the margin wraps.
    CenteredInteger { t_max: usize },
    /// Times in [0,1) scaled across the whole grid.
    UnitInterval,
}

impl Placement {
    /// Continuous grid coordinate of a time value.
    pub fn grid_coord(&self, time: f64, l: usize) -> f64 {
        match self {
            Placement::CenteredInteger { t_max } => {
                let margin = (l - t_max) / 2;
                margin as f64 + (time - 1.0)
            }
            Placement::UnitInterval => time * l as f64,
        }
    }
}

/// Sparse row-stochastic interpolation matrix from grid to observation times.
#[derive(Debug, Clone)]
pub struct InterpolationMatrix {
    /// Per observation time: (grid index, weight) pairs summing to 1.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub l: usize,
    pub placement: Placement,
    pub times: Vec<f64>,
}

/// Build H for sorted observation times under a placement rule.
pub fn build_interpolation(
    times: &[f64],
    basis: &WaveletBasis,
    placement: Placement,
) -> Result<InterpolationMatrix> {
    let l = basis.l;
    if let Placement::CenteredInteger { t_max } = placement {
        if t_max > l {
            return Err(Error::Wavelet(format!(
                "{t_max} time units do not fit a grid of {l} cells"
            )));
        }
    }
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        match placement {
            Placement::CenteredInteger { t_max } => {
                if t < 1.0 || t > t_max as f64 {
                    return Err(Error::Wavelet(format!(
                        "time {t} outside declared span 1..={t_max}"
                    )));
                }
            }
            Placement::UnitInterval => {
                if !(0.0..1.0).contains(&t) {
                    return Err(Error::Wavelet(format!("time {t} outside [0,1)")));
                }
            }
        }
        let x = placement.grid_coord(t, l);
        let lo = x.floor();
        let frac = x - lo;
        let i0 = (lo as isize).rem_euclid(l as isize) as usize;
        if frac.abs() < 1e-12 {
            rows.push(vec![(i0, 1.0)]);
        } else {
            let i1 = (i0 + 1) % l;
            rows.push(vec![(i0, 1.0 - frac), (i1, frac)]);
        }
    }
    Ok(InterpolationMatrix { rows, l, placement, times: times.to_vec() })
}

impl InterpolationMatrix {
    /// H·g for a grid-valued vector g.
    pub fn apply(&self, grid: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(i, w)| w * grid[i]).sum())
            .collect()
    }

    /// Hᵗ·v, scattering observation-space values back onto the grid.
    pub fn apply_transpose(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.l];
        for (row, &v) in self.rows.iter().zip(values) {
            for &(i, w) in row {
                out[i] += w * v;
            }
        }
        out
    }

    /// Nearest grid cell per observation time (used to map fitted values back
    /// onto the grid for transform summaries).
    pub fn primary_cells(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|row| {
                row.iter()
                    .cloned()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// μ = H·Wᵗ·θ.
pub fn mean_function(theta: &[f64], h: &InterpolationMatrix, basis: &WaveletBasis) -> Vec<f64> {
    h.apply(&basis.synthesize(theta))
}

/// One row of a transform summary: the magnitude of a single coefficient of
/// a single draw's transform. `draw_id` 0 is the posterior median transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub level: usize,
    pub block_start: usize,
    pub block_end: usize,
    pub draw_id: usize,
    pub magnitude: f64,
}

/// Per-level, per-time-block coefficient magnitudes across posterior draws.
#[derive(Debug, Clone)]
pub struct WaveletTransformSummary {
    pub rows: Vec<SummaryRow>,
    pub d: usize,
    pub l: usize,
}

/// Map posterior mean-function draws (values at the observation times) back
/// to the grid, transform each, and emit per-coefficient magnitudes for the
/// median transform plus up to `max_draws` individual draws.
pub fn transform_summary(
    mu_draws: &[Vec<f64>],
    basis: &WaveletBasis,
    h: &InterpolationMatrix,
    max_draws: usize,
) -> Result<WaveletTransformSummary> {
    if mu_draws.is_empty() {
        return Err(Error::Wavelet("transform summary needs at least one draw".into()));
    }
    let cells = h.primary_cells();
    let l = basis.l;
    let mut transforms = Vec::with_capacity(mu_draws.len());
    for draw in mu_draws {
        if draw.len() != cells.len() {
            return Err(Error::Wavelet(format!(
                "draw has {} values for {} observation times",
                draw.len(),
                cells.len()
            )));
        }
        let mut grid = vec![0.0; l];
        let mut hits = vec![0usize; l];
        for (&c, &v) in cells.iter().zip(draw) {
            grid[c] += v;
            hits[c] += 1;
        }
        for (g, &n) in grid.iter_mut().zip(&hits) {
            if n > 1 {
                *g /= n as f64;
            }
        }
        transforms.push(basis.dwt(&grid)?);
    }
    let n_draws = transforms.len();
    let mut median = vec![0.0; l];
    let mut buf = vec![0.0; n_draws];
    for i in 0..l {
        for (b, t) in buf.iter_mut().zip(&transforms) {
            *b = t[i];
        }
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        median[i] = if n_draws % 2 == 1 {
            buf[n_draws / 2]
        } else {
            0.5 * (buf[n_draws / 2 - 1] + buf[n_draws / 2])
        };
    }
    let mut rows = Vec::new();
    let emit = |coeffs: &[f64], draw_id: usize, rows: &mut Vec<SummaryRow>| {
        for level in 0..=basis.d {
            let range = basis.level_range(level);
            let n_blocks = range.len();
            let span = l / n_blocks;
            for (b, i) in range.enumerate() {
                rows.push(SummaryRow {
                    level,
                    block_start: b * span,
                    block_end: (b + 1) * span,
                    draw_id,
                    magnitude: coeffs[i].abs(),
                });
            }
        }
    };
    emit(&median, 0, &mut rows);
    for (d, t) in transforms.iter().enumerate().take(max_draws) {
        emit(t, d + 1, &mut rows);
    }
    Ok(WaveletTransformSummary { rows, d: basis.d, l })
}

impl WaveletTransformSummary {
    /// Serialize as long-format CSV: `level,block_start,block_end,draw_id,magnitude`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["level", "block_start", "block_end", "draw_id", "magnitude"])?;
        for r in &self.rows {
            wtr.write_record(&[
                r.level.to_string(),
                r.block_start.to_string(),
                r.block_end.to_string(),
                r.draw_id.to_string(),
                format!("{:.17e}", r.magnitude),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read back the CSV written by [`write_csv`].
    pub fn read_csv<R: std::io::Read>(reader: R, d: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(SummaryRow {
                level: rec[0].parse().map_err(|_| Error::Data("bad level".into()))?,
                block_start: rec[1].parse().map_err(|_| Error::Data("bad block".into()))?,
                block_end: rec[2].parse().map_err(|_| Error::Data("bad block".into()))?,
                draw_id: rec[3].parse().map_err(|_| Error::Data("bad draw id".into()))?,
                magnitude: rec[4].parse().map_err(|_| Error::Data("bad magnitude".into()))?,
            });
        }
        Ok(WaveletTransformSummary { rows, d, l: 1 << d })
    }

    /// Energy (sum of squared magnitudes) of the median transform at one
    /// level over a block_start range.
    pub fn median_level_energy(&self, level: usize, from: usize, to: usize) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.draw_id == 0 && r.level == level && r.block_start >= from && r.block_start < to)
            .map(|r| r.magnitude * r.magnitude)
            .sum()
    }
}
