//! Sweeps over data and training parameters, phase grids built from them,
//! critical-line fits and heatmap comparison.

mod grid;
mod io;
mod svg;

pub use grid::{binarize_phase, fit_critical_line, heatmap_similarity, upward_closed_fraction, CriticalFit, GridCell, Metric, PhaseGrid, RowBoundary};
pub use io::{read_cells_csv, write_cells_csv, write_runs_csv, CELL_COLUMNS, RUN_COLUMNS};
pub use svg::render_heatmap_svg;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_dataset, snr, DataConfig};
use crate::error::{Error, Result};
use crate::evaluator::estimate_test;
use crate::model::ModelConfig;
use crate::numerics::RngStream;
use crate::trainer::{train, TrainConfig};

/// Values swept over. The grid is their cartesian product, enumerated with
/// `n` outermost and `sigma_v` innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axes {
    pub n: Vec<usize>,
    pub mu_norm: Vec<f64>,
    pub sigma_p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub eta: Vec<f64>,
    pub sigma_v: Vec<f64>,
}

/// Parameters shared by every run of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixed {
    pub d: usize,
    pub m_k: usize,
    pub m_v: usize,
    pub sigma_k: f64,
    #[serde(default = "one")]
    pub upsilon_norm: f64,
    #[serde(default = "default_target")]
    pub target_loss: f64,
    pub max_iters: usize,
    #[serde(default = "yes")]
    pub train_upsilon: bool,
    /// Monte-Carlo test points per run.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
}

fn one() -> f64 {
    1.0
}

fn default_target() -> f64 {
    0.01
}

fn yes() -> bool {
    true
}

fn default_n_mc() -> usize {
    2000
}

fn default_repeats() -> usize {
    20
}

/// How run streams are keyed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedScope {
    /// Stream from `(base_seed, cell, repeat)`: every run independent.
    #[default]
    Cell,
    /// Stream from `(base_seed, repeat)`: repeat `r` of every cell sees the
    /// same noise draws, labels and initialization directions.
    Repeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub axes: Axes,
    pub fixed: Fixed,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub seed_scope: SeedScope,
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub n: usize,
    pub mu_norm: f64,
    pub sigma_p: f64,
    pub alpha: f64,
    pub eta: f64,
    pub sigma_v: f64,
}

impl SweepManifest {
    pub fn validate(&self) -> Result<()> {
        let a = &self.axes;
        for (name, len) in [
            ("axes.n", a.n.len()),
            ("axes.mu_norm", a.mu_norm.len()),
            ("axes.sigma_p", a.sigma_p.len()),
            ("axes.alpha", a.alpha.len()),
            ("axes.eta", a.eta.len()),
            ("axes.sigma_v", a.sigma_v.len()),
        ] {
            if len == 0 {
                return Err(Error::config(name, "must be nonempty"));
            }
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be >= 1"));
        }
        if self.fixed.n_mc == 0 {
            return Err(Error::config("fixed.n_mc", "must be >= 1"));
        }
        for c in self.cells() {
            self.data_config(&c).validate()?;
            self.model_config(&c).validate()?;
            self.train_config(&c).validate()?;
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellParams> {
        let a = &self.axes;
        let mut out = Vec::new();
        for &n in &a.n {
            for &mu_norm in &a.mu_norm {
                for &sigma_p in &a.sigma_p {
                    for &alpha in &a.alpha {
                        for &eta in &a.eta {
                            for &sigma_v in &a.sigma_v {
                                out.push(CellParams { n, mu_norm, sigma_p, alpha, eta, sigma_v });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn data_config(&self, c: &CellParams) -> DataConfig {
        DataConfig {
            d: self.fixed.d,
            mu_norm: c.mu_norm,
            sigma_p: c.sigma_p,
            alpha: c.alpha,
            n: c.n,
        }
    }

    pub fn model_config(&self, c: &CellParams) -> ModelConfig {
        ModelConfig {
            d: self.fixed.d,
            m_k: self.fixed.m_k,
            m_v: self.fixed.m_v,
            sigma_k: self.fixed.sigma_k,
            sigma_v: c.sigma_v,
            upsilon_norm: self.fixed.upsilon_norm,
        }
    }

    pub fn train_config(&self, c: &CellParams) -> TrainConfig {
        TrainConfig {
            eta: c.eta,
            max_iters: self.fixed.max_iters,
            target_loss: self.fixed.target_loss,
            train_upsilon: self.fixed.train_upsilon,
            // Only the endpoint is used by sweeps.
            record_every: self.fixed.max_iters.max(1),
            record_test_mc: 0,
        }
    }

    /// Stream of one run.
    pub fn run_stream(&self, cell: usize, repeat: usize) -> RngStream {
        let root = RngStream::new(self.base_seed, 0);
        match self.seed_scope {
            SeedScope::Cell => root.child(cell as u64).child(repeat as u64),
            SeedScope::Repeat => root.child(repeat as u64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    IterationCap,
    /// Diverged or produced non-finite values; excluded from cell means.
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::IterationCap => "iteration_cap",
            RunStatus::Failed => "failed",
        }
    }

    pub fn is_ok(self) -> bool {
        self != RunStatus::Failed
    }
}

/// Terminal metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub cell: usize,
    pub repeat: usize,
    pub params: CellParams,
    pub snr: f64,
    pub status: RunStatus,
    pub iterations: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_loss_std_err: f64,
    pub error01: f64,
    pub error01_clean: f64,
    pub atten_signal: f64,
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

/// Aggregate of the successful runs of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub cell: usize,
    pub params: CellParams,
    pub snr: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub n_converged: usize,
    pub test_loss: Stat,
    pub error01: Stat,
    pub error01_clean: Stat,
    pub train_loss: Stat,
    pub iterations: Stat,
    pub atten_signal: Stat,
}

impl CellRow {
    pub fn aggregate(cell: usize, params: CellParams, snr: f64, runs: &[RunRow]) -> CellRow {
        let ok: Vec<&RunRow> = runs.iter().filter(|r| r.status.is_ok()).collect();
        let col = |f: fn(&RunRow) -> f64| Stat::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        CellRow {
            cell,
            params,
            snr,
            n_ok: ok.len(),
            n_failed: runs.len() - ok.len(),
            n_converged: ok.iter().filter(|r| r.status == RunStatus::Converged).count(),
            test_loss: col(|r| r.test_loss),
            error01: col(|r| r.error01),
            error01_clean: col(|r| r.error01_clean),
            train_loss: col(|r| r.train_loss),
            iterations: col(|r| r.iterations as f64),
            atten_signal: col(|r| r.atten_signal),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub manifest: SweepManifest,
    pub runs: Vec<RunRow>,
    pub cells: Vec<CellRow>,
}

/// Samples, trains and evaluates one run. Divergence and non-finite values
/// give a `Failed` row; any other error is returned.
pub fn run_one(manifest: &SweepManifest, cell: usize, params: CellParams, repeat: usize) -> Result<RunRow> {
    let rng = manifest.run_stream(cell, repeat);
    let dc = manifest.data_config(&params);
    let s = snr(&dc)?;
    let ds = sample_dataset(&dc, &rng.named("data"))?;
    let failed = RunRow {
        cell,
        repeat,
        params,
        snr: s,
        status: RunStatus::Failed,
        iterations: 0,
        train_loss: f64::NAN,
        test_loss: f64::NAN,
        test_loss_std_err: f64::NAN,
        error01: f64::NAN,
        error01_clean: f64::NAN,
        atten_signal: f64::NAN,
    };
    let run = match train(&ds, &manifest.model_config(&params), &manifest.train_config(&params), &rng) {
        Ok(run) => run,
        Err(e) if e.is_numerical() => {
            log::warn!("cell {cell} repeat {repeat}: {e}");
            let iterations = match &e {
                Error::Divergence { iteration, .. } => *iteration,
                _ => 0,
            };
            return Ok(RunRow { iterations, ..failed });
        }
        Err(e) => return Err(e),
    };
    let est = match estimate_test(&run.params, &dc, &ds.signals, manifest.fixed.n_mc, &rng.named("eval")) {
        Ok(est) => est,
        Err(e) if e.is_numerical() => return Ok(RunRow { iterations: run.record.iterations, ..failed }),
        Err(e) => return Err(e),
    };
    let last = run.record.last().expect("record always holds the final state");
    Ok(RunRow {
        cell,
        repeat,
        params,
        snr: s,
        status: if run.record.converged() { RunStatus::Converged } else { RunStatus::IterationCap },
        iterations: run.record.iterations,
        train_loss: last.train_loss,
        test_loss: est.loss,
        test_loss_std_err: est.std_err,
        error01: est.error01,
        error01_clean: est.error01_clean,
        atten_signal: last.atten_signal,
    })
}

/// Runs every cell × repeat, on at most `jobs` worker threads (all cores
/// when `None`). Output order and content do not depend on `jobs`.
pub fn run_sweep(manifest: &SweepManifest, jobs: Option<usize>) -> Result<SweepResult> {
    manifest.validate()?;
    let cells = manifest.cells();
    let tasks: Vec<(usize, CellParams, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (0..manifest.repeats).map(move |r| (i, *c, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let runs: Vec<RunRow> = pool.install(|| tasks.par_iter().map(|&(i, c, r)| run_one(manifest, i, c, r)).collect::<Result<Vec<_>>>())?;
    let mut by_cell: BTreeMap<usize, Vec<RunRow>> = BTreeMap::new();
    for r in &runs {
        by_cell.entry(r.cell).or_default().push(*r);
    }
    let cell_rows = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let rs = &by_cell[&i];
            CellRow::aggregate(i, *c, rs[0].snr, rs)
        })
        .collect();
    let failed = runs.iter().filter(|r| !r.status.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed and were excluded", runs.len());
    }
    Ok(SweepResult {
        manifest: manifest.clone(),
        runs,
        cells: cell_rows,
    })
}

/// A swept variable of a single-variable curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    N,
    Alpha,
    MuNorm,
    SigmaP,
    Eta,
    SigmaV,
}

impl Variable {
    pub const ALL: [Variable; 6] = [Variable::N, Variable::Alpha, Variable::MuNorm, Variable::SigmaP, Variable::Eta, Variable::SigmaV];

    pub fn name(self) -> &'static str {
        match self {
            Variable::N => "n",
            Variable::Alpha => "alpha",
            Variable::MuNorm => "mu_norm",
            Variable::SigmaP => "sigma_p",
            Variable::Eta => "eta",
            Variable::SigmaV => "sigma_v",
        }
    }

    pub fn get(self, c: &CellParams) -> f64 {
        match self {
            Variable::N => c.n as f64,
            Variable::Alpha => c.alpha,
            Variable::MuNorm => c.mu_norm,
            Variable::SigmaP => c.sigma_p,
            Variable::Eta => c.eta,
            Variable::SigmaV => c.sigma_v,
        }
    }
}

/// Curves that each vary one parameter around a shared base point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvesManifest {
    #[serde(default = "default_base")]
    pub base: CellParams,
    pub fixed: Fixed,
    /// Values per varied parameter; parameters not listed get no curve.
    pub curves: BTreeMap<Variable, Vec<f64>>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub base_seed: u64,
}

/// Base point of the single-variable curves: `N = 100`, the other entries
/// matching the defaults used elsewhere.
pub fn default_base() -> CellParams {
    CellParams {
        n: 100,
        mu_norm: 40.0,
        sigma_p: 2.0,
        alpha: 0.0,
        eta: 1.0,
        sigma_v: 0.001,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub value: f64,
    pub test_loss: Stat,
    pub error01: Stat,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub variable: Variable,
    pub points: Vec<CurvePoint>,
    /// Per-run rows; repeat `r` shares its data and initialization streams
    /// across the points of a curve.
    pub runs: Vec<RunRow>,
}

impl Curve {
    /// Final test loss of each repeat along the curve, `None` where the
    /// run failed. Indexed `[repeat][point]`.
    pub fn per_repeat_losses(&self) -> Vec<Vec<Option<f64>>> {
        let reps = self.runs.iter().map(|r| r.repeat + 1).max().unwrap_or(0);
        let mut out = vec![vec![None; self.points.len()]; reps];
        for r in &self.runs {
            if r.status.is_ok() {
                out[r.repeat][r.cell] = Some(r.test_loss);
            }
        }
        out
    }
}

impl CurvesManifest {
    /// Sweep manifest for one curve: the named axis takes the listed values,
    /// every other axis is the base point.
    pub fn sweep_for(&self, variable: Variable, values: &[f64]) -> Result<SweepManifest> {
        let b = &self.base;
        let mut axes = Axes {
            n: vec![b.n],
            mu_norm: vec![b.mu_norm],
            sigma_p: vec![b.sigma_p],
            alpha: vec![b.alpha],
            eta: vec![b.eta],
            sigma_v: vec![b.sigma_v],
        };
        match variable {
            Variable::N => {
                axes.n = values
                    .iter()
                    .map(|&v| {
                        if v >= 1.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::config("curves.n", format!("{v} is not a positive integer")))
                        }
                    })
                    .collect::<Result<_>>()?
            }
            Variable::Alpha => axes.alpha = values.to_vec(),
            Variable::MuNorm => axes.mu_norm = values.to_vec(),
            Variable::SigmaP => axes.sigma_p = values.to_vec(),
            Variable::Eta => axes.eta = values.to_vec(),
            Variable::SigmaV => axes.sigma_v = values.to_vec(),
        }
        Ok(SweepManifest {
            axes,
            fixed: self.fixed,
            repeats: self.repeats,
            base_seed: self.base_seed,
            seed_scope: SeedScope::Repeat,
        })
    }
}

/// One curve per entry of `manifest.curves`, in [`Variable`] order.
pub fn single_variable_sweeps(manifest: &CurvesManifest, jobs: Option<usize>) -> Result<Vec<Curve>> {
    let mut out = Vec::new();
    for (&variable, values) in &manifest.curves {
        if values.is_empty() {
            return Err(Error::config(format!("curves.{}", variable.name()), "must be nonempty"));
        }
        let sweep = run_sweep(&manifest.sweep_for(variable, values)?, jobs)?;
        let points = sweep
            .cells
            .iter()
            .map(|c| CurvePoint {
                value: variable.get(&c.params),
                test_loss: c.test_loss,
                error01: c.error01,
                n_ok: c.n_ok,
            })
            .collect();
        out.push(Curve { variable, points, runs: sweep.runs });
    }
    Ok(out)
}
