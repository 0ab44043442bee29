use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::CellRow;

/// Cell statistic a heatmap is drawn from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    TestLoss,
    Error01,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::TestLoss => "test_loss",
            Metric::Error01 => "error01",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        match s {
            "test_loss" => Ok(Metric::TestLoss),
            "error01" => Ok(Metric::Error01),
            other => Err(Error::config("metric", format!("unknown metric {other:?} (expected test_loss or error01)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub test_loss_mean: f64,
    pub test_loss_std: f64,
    pub error01_mean: f64,
    pub error01_std: f64,
}

impl GridCell {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::TestLoss => self.test_loss_mean,
            Metric::Error01 => self.error01_mean,
        }
    }
}

/// Cell means over an `N × SNR` grid at one flip rate. Rows follow
/// `n_axis`, columns follow `snr_axis`; both ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub alpha: f64,
    pub n_axis: Vec<usize>,
    pub snr_axis: Vec<f64>,
    /// Row-major, `n_axis.len() × snr_axis.len()`.
    pub cells: Vec<GridCell>,
}

impl PhaseGrid {
    pub fn new(alpha: f64, n_axis: Vec<usize>, snr_axis: Vec<f64>, cells: Vec<GridCell>) -> Result<Self> {
        if n_axis.is_empty() || snr_axis.is_empty() {
            return Err(Error::Empty("phase grid axes"));
        }
        if cells.len() != n_axis.len() * snr_axis.len() {
            return Err(Error::shape("phase grid cells", n_axis.len() * snr_axis.len(), cells.len()));
        }
        if !n_axis.windows(2).all(|w| w[0] < w[1]) || !snr_axis.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("axes", "must be strictly ascending"));
        }
        for (i, c) in cells.iter().enumerate() {
            if !(c.test_loss_mean.is_finite() && c.error01_mean.is_finite()) {
                return Err(Error::NonFinite(format!("mean of grid cell {i}")));
            }
            if !(c.test_loss_std >= 0.0 && c.error01_std >= 0.0) {
                return Err(Error::config("cells", format!("cell {i} has a negative or missing std")));
            }
        }
        Ok(PhaseGrid { alpha, n_axis, snr_axis, cells })
    }

    /// Builds the grid of all cells at flip rate `alpha`. The selected
    /// cells must share `sigma_p`, `eta` and `sigma_v` and cover every
    /// `(N, SNR)` pair exactly once.
    pub fn from_cells(cells: &[CellRow], alpha: f64) -> Result<Self> {
        let sel: Vec<&CellRow> = cells.iter().filter(|c| c.params.alpha == alpha).collect();
        let first = sel.first().ok_or_else(|| Error::config("alpha", format!("no cells at alpha = {alpha}")))?;
        for c in &sel {
            let (p, q) = (&c.params, &first.params);
            if p.sigma_p != q.sigma_p || p.eta != q.eta || p.sigma_v != q.sigma_v {
                return Err(Error::AxisMismatch(
                    "cells at this alpha vary in sigma_p, eta or sigma_v; a phase grid needs them fixed".into(),
                ));
            }
        }
        let mut n_axis: Vec<usize> = sel.iter().map(|c| c.params.n).collect();
        n_axis.sort_unstable();
        n_axis.dedup();
        let mut snr_axis: Vec<f64> = sel.iter().map(|c| c.snr).collect();
        snr_axis.sort_by(|a, b| a.total_cmp(b));
        snr_axis.dedup();
        let cols = snr_axis.len();
        let mut slots: Vec<Option<GridCell>> = vec![None; n_axis.len() * cols];
        for c in &sel {
            if c.n_ok == 0 {
                return Err(Error::NonFinite(format!("cell {} has no successful runs", c.cell)));
            }
            let i = n_axis.binary_search(&c.params.n).expect("axis built from cells");
            let j = snr_axis.binary_search_by(|s| s.total_cmp(&c.snr)).expect("axis built from cells");
            if slots[i * cols + j].is_some() {
                return Err(Error::AxisMismatch(format!("duplicate cell at N = {}, SNR = {}", c.params.n, c.snr)));
            }
            slots[i * cols + j] = Some(GridCell {
                test_loss_mean: c.test_loss.mean,
                test_loss_std: c.test_loss.std,
                error01_mean: c.error01.mean,
                error01_std: c.error01.std,
            });
        }
        let cells = slots
            .into_iter()
            .enumerate()
            .map(|(k, s)| s.ok_or_else(|| Error::AxisMismatch(format!("grid has no cell at N = {}, SNR = {}", n_axis[k / cols], snr_axis[k % cols]))))
            .collect::<Result<Vec<_>>>()?;
        PhaseGrid::new(alpha, n_axis, snr_axis, cells)
    }

    pub fn rows(&self) -> usize {
        self.n_axis.len()
    }

    pub fn cols(&self) -> usize {
        self.snr_axis.len()
    }

    pub fn cell(&self, i: usize, j: usize) -> &GridCell {
        &self.cells[i * self.cols() + j]
    }

    pub fn values(&self, m: Metric) -> Vec<f64> {
        self.cells.iter().map(|c| c.metric(m)).collect()
    }
}

/// Benign map: `true` where the mean error is at most `alpha + threshold`.
pub fn binarize_phase(grid: &PhaseGrid, threshold: f64) -> Result<Vec<Vec<bool>>> {
    if !(threshold > 0.0) {
        return Err(Error::config("threshold", "must be > 0"));
    }
    let level = grid.alpha + threshold;
    Ok((0..grid.rows()).map(|i| (0..grid.cols()).map(|j| grid.cell(i, j).error01_mean <= level).collect()).collect())
}

/// Fraction of adjacent-cell transitions (one step up in N or in SNR) that
/// do not go from benign to harmful. 1.0 for grids without transitions.
pub fn upward_closed_fraction(map: &[Vec<bool>]) -> f64 {
    let (mut total, mut good) = (0usize, 0usize);
    for i in 0..map.len() {
        for j in 0..map[i].len() {
            if i + 1 < map.len() {
                total += 1;
                good += !(map[i][j] && !map[i + 1][j]) as usize;
            }
            if j + 1 < map[i].len() {
                total += 1;
                good += !(map[i][j] && !map[i][j + 1]) as usize;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        good as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowBoundary {
    pub n: usize,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalFit {
    /// Geometric mean of `N·SNR²` at the per-row boundaries.
    pub c_hat: f64,
    /// Benign threshold above `alpha` on the mean error.
    pub threshold: f64,
    /// Standard deviation of `ln(N·SNR²)` over the rows used.
    pub residual: f64,
    pub alpha: f64,
    pub boundaries: Vec<RowBoundary>,
}

/// Fits `N·SNR² = C` to the benign boundary of each row.
///
/// In each row the boundary sits between the last harmful cell and the
/// first cell of the benign run that reaches the top of the SNR axis, and
/// is placed by linear interpolation of the mean error in `ln SNR`. Rows
/// that are entirely benign or entirely harmful do not contribute.
pub fn fit_critical_line(grid: &PhaseGrid, threshold: f64) -> Result<CriticalFit> {
    let map = binarize_phase(grid, threshold)?;
    let level = grid.alpha + threshold;
    let mut boundaries = Vec::new();
    for (i, row) in map.iter().enumerate() {
        let mut j = row.len();
        while j > 0 && row[j - 1] {
            j -= 1;
        }
        if j == 0 || j == row.len() {
            continue;
        }
        let (e0, e1) = (grid.cell(i, j - 1).error01_mean, grid.cell(i, j).error01_mean);
        let (l0, l1) = (grid.snr_axis[j - 1].ln(), grid.snr_axis[j].ln());
        let t = ((e0 - level) / (e0 - e1)).clamp(0.0, 1.0);
        boundaries.push(RowBoundary { n: grid.n_axis[i], snr: (l0 + t * (l1 - l0)).exp() });
    }
    if boundaries.is_empty() {
        let benign = map.iter().flatten().filter(|&&b| b).count();
        let what = if benign == 0 { "no benign cells" } else if benign == grid.cells.len() { "no harmful cells" } else { "no row crosses the threshold" };
        return Err(Error::NoBoundary(format!("{what} at alpha = {} with threshold {threshold}", grid.alpha)));
    }
    let logs: Vec<f64> = boundaries.iter().map(|b| (b.n as f64 * b.snr * b.snr).ln()).collect();
    let k = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / k;
    let residual = (logs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k).sqrt();
    Ok(CriticalFit {
        c_hat: mean.exp(),
        threshold,
        residual,
        alpha: grid.alpha,
        boundaries,
    })
}

/// Pearson correlation of the two grids' flattened cell means.
pub fn heatmap_similarity(a: &PhaseGrid, b: &PhaseGrid, metric: Metric) -> Result<f64> {
    if a.n_axis != b.n_axis {
        return Err(Error::AxisMismatch(format!("N axes differ: {:?} vs {:?}", a.n_axis, b.n_axis)));
    }
    let same_snr = a.snr_axis.len() == b.snr_axis.len() && a.snr_axis.iter().zip(&b.snr_axis).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()));
    if !same_snr {
        return Err(Error::AxisMismatch(format!("SNR axes differ: {:?} vs {:?}", a.snr_axis, b.snr_axis)));
    }
    let (x, y) = (a.values(metric), b.values(metric));
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (u, v) in x.iter().zip(&y) {
        sxy += (u - mx) * (v - my);
        sxx += (u - mx) * (u - mx);
        syy += (v - my) * (v - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance(format!("{} is constant over a grid", metric.name())));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
