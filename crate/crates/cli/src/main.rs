use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use attnlab::data::{sample_dataset, snr, DataConfig};
use attnlab::evaluator::{estimate_test, harmful_lower_bound, split_test_loss, SplitLoss, TestEstimate, DEFAULT_N_MC};
use attnlab::experiments::{
    fit_critical_line, heatmap_similarity, read_cells_csv, render_heatmap_svg, run_sweep, single_variable_sweeps, write_cells_csv,
    write_runs_csv, CellRow, CriticalFit, Curve, CurvesManifest, Metric, PhaseGrid, SweepManifest,
};
use attnlab::model::ModelConfig;
use attnlab::numerics::RngStream;
use attnlab::trainer::{detect_stages, gradient_audit, train, StageBoundaries, Termination, TrainConfig, TrainingRecord};
use attnlab::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "attnlab", version, about = "Train and sweep a softmax-attention classifier under label-flip noise")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its record, sidecar and test metrics.
    Train {
        /// Run config (JSON); a run.json sidecar is also accepted.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a nonempty output directory.
        #[arg(long)]
        force: bool,
        /// Replace the config's seed; the original is kept in the sidecar.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid sweep or a set of single-variable curves.
    Sweep {
        /// Sweep manifest (JSON); a manifest with a "curves" key runs curves.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Replace the manifest's base_seed; the original is kept in the sidecar.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Benign threshold above alpha used for critical.json.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Cell statistic drawn in heatmaps: test_loss or error01.
        #[arg(long, default_value = "test_loss")]
        metric: Metric,
    },
    /// Detect stage boundaries in a training record CSV.
    Stages {
        #[arg(long)]
        record: PathBuf,
        /// Target loss; defaults to the value in a run.json next to the record, else 0.01.
        #[arg(long)]
        target_loss: Option<f64>,
    },
    /// Fit N·SNR² = C to the benign boundary of a cells.csv grid.
    FitCritical {
        #[arg(long)]
        cells: PathBuf,
        /// Flip rate of the grid; needed when the file holds several.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Also write the fit to this JSON file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pearson correlation between two phase grids.
    Similarity {
        /// First cells.csv.
        a: PathBuf,
        /// Second cells.csv (default: the first).
        b: Option<PathBuf>,
        #[arg(long)]
        alpha_a: Option<f64>,
        #[arg(long)]
        alpha_b: Option<f64>,
        #[arg(long, default_value = "test_loss")]
        metric: Metric,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Errors the CLI raises itself, outside the library.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Marks a numerical failure that has already been reported.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<serde_json::Error>() {
            return EXIT_USAGE;
        }
        if cause.is::<Numerical>() {
            return EXIT_NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Divergence { .. } | Error::NonFinite(_) | Error::NoBoundary(_) | Error::ZeroVariance(_) => EXIT_NUMERICAL,
                Error::Io(_) => EXIT_OTHER,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_OTHER
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train { config, out, force, seed } => cmd_train(&config, &out, force, seed),
        Command::Sweep {
            manifest,
            out,
            force,
            seed,
            jobs,
            threshold,
            metric,
        } => cmd_sweep(&manifest, &out, force, seed, jobs, threshold, metric),
        Command::Stages { record, target_loss } => cmd_stages(&record, target_loss),
        Command::FitCritical { cells, alpha, threshold, out } => cmd_fit_critical(&cells, alpha, threshold, out.as_deref()),
        Command::Similarity { a, b, alpha_a, alpha_b, metric } => cmd_similarity(&a, b.as_deref(), alpha_a, alpha_b, metric),
        Command::Gradcheck { instances, seed, tolerance } => cmd_gradcheck(instances, seed, tolerance),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Creates `dir`, refusing to reuse a nonempty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(usage(format!("{} exists and is not a directory", dir.display())));
        }
        let nonempty = fs::read_dir(dir)?.next().is_some();
        if nonempty && !force {
            return Err(usage(format!("refusing to overwrite existing run directory {} (pass --force)", dir.display())));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn default_n_mc() -> usize {
    DEFAULT_N_MC
}

/// Input of `attnlab train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainJob {
    data: DataConfig,
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    seed: u64,
    /// Monte-Carlo test points for the final evaluation.
    #[serde(default = "default_n_mc")]
    n_mc: usize,
}

#[derive(Serialize)]
struct TrainOutcome {
    termination: Option<Termination>,
    iterations: usize,
    final_train_loss: Option<f64>,
    stages: StageBoundaries,
    snr: f64,
    n_snr2: f64,
    test: Option<TestEstimate>,
    split: Option<SplitLoss>,
    harmful_lower_bound: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct TrainSidecar<'a> {
    #[serde(flatten)]
    job: &'a TrainJob,
    seed_override: Option<SeedOverride>,
    result: TrainOutcome,
}

#[derive(Serialize)]
struct SeedOverride {
    original: u64,
    applied: u64,
}

fn cmd_train(config: &Path, out: &Path, force: bool, seed: Option<u64>) -> anyhow::Result<()> {
    let mut job: TrainJob = read_json(config)?;
    let seed_override = seed.map(|s| {
        let o = SeedOverride { original: job.seed, applied: s };
        job.seed = s;
        o
    });
    job.data.validate()?;
    job.model.validate()?;
    job.train.validate()?;
    if job.n_mc == 0 {
        return Err(Error::config("n_mc", "must be >= 1").into());
    }
    if job.model.d != job.data.d {
        return Err(Error::config("model.d", format!("must equal data.d = {}", job.data.d)).into());
    }
    prepare_out(out, force)?;

    let rng = RngStream::new(job.seed, 0);
    let ds = sample_dataset(&job.data, &rng.named("data"))?;
    let s = snr(&job.data)?;
    let mut outcome = TrainOutcome {
        termination: None,
        iterations: 0,
        final_train_loss: None,
        stages: StageBoundaries::default(),
        snr: s,
        n_snr2: job.data.n as f64 * s * s,
        test: None,
        split: None,
        harmful_lower_bound: harmful_lower_bound(job.data.alpha).ok(),
        error: None,
    };
    let record_path = out.join("record.csv");
    let write_record = |r: &TrainingRecord| -> anyhow::Result<()> {
        let mut f = BufWriter::new(File::create(&record_path)?);
        r.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    };
    match train(&ds, &job.model, &job.train, &rng) {
        Ok(run) => {
            write_record(&run.record)?;
            let eval = rng.named("eval");
            let test = estimate_test(&run.params, &job.data, &ds.signals, job.n_mc, &eval)?;
            let split = split_test_loss(&run.params, &job.data, &ds.signals, job.n_mc, &eval)?;
            outcome.termination = run.record.termination;
            outcome.iterations = run.record.iterations;
            outcome.final_train_loss = run.record.final_train_loss();
            outcome.stages = run.record.stages;
            outcome.test = Some(test);
            outcome.split = Some(split);
            write_json(&out.join("run.json"), &TrainSidecar { job: &job, seed_override, result: outcome })?;
            let mut f = BufWriter::new(File::create(out.join("params.bin"))?);
            run.params.write_checkpoint(&mut f)?;
            f.flush()?;
            let status = match run.record.termination {
                Some(Termination::Converged) => "converged",
                _ => "iteration cap reached",
            };
            println!(
                "{status} after {} iterations: train loss {:.6}, test loss {:.6} ± {:.6}, test error {:.4}",
                run.record.iterations,
                run.record.final_train_loss().unwrap_or(f64::NAN),
                test.loss,
                test.std_err,
                test.error01
            );
            println!("stages: t1_hat = {:?}, t2_hat = {:?}", run.record.stages.t1_hat, run.record.stages.t2_hat);
            Ok(())
        }
        Err(e @ (Error::Divergence { .. } | Error::NonFinite(_))) => {
            if let Error::Divergence { last_good, iteration, .. } = &e {
                write_record(last_good)?;
                outcome.iterations = *iteration;
                outcome.final_train_loss = last_good.final_train_loss();
            }
            outcome.error = Some(e.to_string());
            write_json(&out.join("run.json"), &TrainSidecar { job: &job, seed_override, result: outcome })?;
            Err(anyhow::Error::new(e))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct SweepSidecar<'a, M: Serialize> {
    #[serde(flatten)]
    manifest: &'a M,
    seed_override: Option<SeedOverride>,
    result: SweepSummary,
}

#[derive(Serialize)]
struct SweepSummary {
    runs: usize,
    failed: usize,
    files: Vec<String>,
}

#[derive(Serialize)]
struct CriticalEntry {
    alpha: f64,
    fit: Option<CriticalFit>,
    error: Option<String>,
}

fn cmd_sweep(path: &Path, out: &Path, force: bool, seed: Option<u64>, jobs: Option<usize>, threshold: f64, metric: Metric) -> anyhow::Result<()> {
    let raw: serde_json::Value = read_json(path)?;
    if raw.get("curves").is_some() {
        let mut m: CurvesManifest = serde_json::from_value(raw).with_context(|| format!("parsing {}", path.display()))?;
        let seed_override = seed.map(|s| {
            let o = SeedOverride { original: m.base_seed, applied: s };
            m.base_seed = s;
            o
        });
        prepare_out(out, force)?;
        let curves = single_variable_sweeps(&m, jobs)?;
        let files = write_curves(out, &curves)?;
        let runs: usize = curves.iter().map(|c| c.runs.len()).sum();
        let failed = curves.iter().flat_map(|c| &c.runs).filter(|r| !r.status.is_ok()).count();
        write_json(&out.join("sweep.json"), &SweepSidecar { manifest: &m, seed_override, result: SweepSummary { runs, failed, files } })?;
        for c in &curves {
            let pts: Vec<String> = c.points.iter().map(|p| format!("{}={:.4}", p.value, p.test_loss.mean)).collect();
            println!("{}: {}", c.variable.name(), pts.join(" "));
        }
        return Ok(());
    }

    let mut m: SweepManifest = serde_json::from_value(raw).with_context(|| format!("parsing {}", path.display()))?;
    let seed_override = seed.map(|s| {
        let o = SeedOverride { original: m.base_seed, applied: s };
        m.base_seed = s;
        o
    });
    m.validate()?;
    prepare_out(out, force)?;
    let res = run_sweep(&m, jobs)?;
    let mut files = vec!["cells.csv".to_string(), "runs.csv".to_string()];
    {
        let mut f = BufWriter::new(File::create(out.join("cells.csv"))?);
        write_cells_csv(&res.cells, &mut f)?;
        f.flush()?;
        let mut f = BufWriter::new(File::create(out.join("runs.csv"))?);
        write_runs_csv(&res.runs, &mut f)?;
        f.flush()?;
    }
    // Heatmaps and critical fits need an N × μ grid at fixed σ_p, η, σ_v.
    let is_grid = m.axes.sigma_p.len() == 1 && m.axes.eta.len() == 1 && m.axes.sigma_v.len() == 1;
    if is_grid {
        let mut critical = Vec::new();
        let several = m.axes.alpha.len() > 1;
        for &alpha in &m.axes.alpha {
            let grid = match PhaseGrid::from_cells(&res.cells, alpha) {
                Ok(g) => g,
                Err(e) => {
                    log::warn!("no phase grid at alpha = {alpha}: {e}");
                    critical.push(CriticalEntry { alpha, fit: None, error: Some(e.to_string()) });
                    continue;
                }
            };
            let name = if several { format!("heatmap_alpha_{alpha}.svg") } else { "heatmap.svg".to_string() };
            fs::write(out.join(&name), render_heatmap_svg(&grid, metric))?;
            files.push(name);
            match fit_critical_line(&grid, threshold) {
                Ok(fit) => {
                    println!("alpha {alpha}: c_hat = {:.4}, residual = {:.4} over {} rows", fit.c_hat, fit.residual, fit.boundaries.len());
                    critical.push(CriticalEntry { alpha, fit: Some(fit), error: None });
                }
                Err(e) => critical.push(CriticalEntry { alpha, fit: None, error: Some(e.to_string()) }),
            }
        }
        write_json(&out.join("critical.json"), &critical)?;
        files.push("critical.json".into());
    }
    let failed = res.runs.iter().filter(|r| !r.status.is_ok()).count();
    write_json(
        &out.join("sweep.json"),
        &SweepSidecar {
            manifest: &m,
            seed_override,
            result: SweepSummary { runs: res.runs.len(), failed, files },
        },
    )?;
    println!("{} cells, {} runs, {} failed", res.cells.len(), res.runs.len(), failed);
    Ok(())
}

fn write_curves(out: &Path, curves: &[Curve]) -> anyhow::Result<Vec<String>> {
    let mut f = BufWriter::new(File::create(out.join("curves.csv"))?);
    writeln!(f, "variable,value,test_loss_mean,test_loss_std,error01_mean,error01_std,n_ok")?;
    let num = |x: f64| if x.is_finite() { x.to_string() } else { String::new() };
    for c in curves {
        for p in &c.points {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                c.variable.name(),
                num(p.value),
                num(p.test_loss.mean),
                num(p.test_loss.std),
                num(p.error01.mean),
                num(p.error01.std),
                p.n_ok
            )?;
        }
    }
    f.flush()?;
    let mut files = vec!["curves.csv".to_string()];
    for c in curves {
        let name = format!("runs_{}.csv", c.variable.name());
        let mut f = BufWriter::new(File::create(out.join(&name))?);
        write_runs_csv(&c.runs, &mut f)?;
        f.flush()?;
        files.push(name);
    }
    Ok(files)
}

fn cmd_stages(record: &Path, target_loss: Option<f64>) -> anyhow::Result<()> {
    let target = match target_loss {
        Some(t) => t,
        None => {
            let sidecar = record.with_file_name("run.json");
            if sidecar.exists() {
                let job: TrainJob = read_json(&sidecar)?;
                job.train.target_loss
            } else {
                TrainConfig::default().target_loss
            }
        }
    };
    if !(target > 0.0) {
        return Err(usage("--target-loss must be > 0"));
    }
    let f = File::open(record).with_context(|| format!("opening {}", record.display()))?;
    let rows = TrainingRecord::read_csv_rows(BufReader::new(f)).with_context(|| format!("reading {}", record.display()))?;
    let mut rec = TrainingRecord::new(target);
    rec.rows = rows;
    let stages = detect_stages(&rec)?;
    let fmt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_else(|| "absent".into());
    println!("t1_hat = {}", fmt(stages.t1_hat));
    println!("t2_hat = {}", fmt(stages.t2_hat));
    println!("target_loss = {target}");
    Ok(())
}

fn load_cells(path: &Path) -> anyhow::Result<Vec<CellRow>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_cells_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn pick_alpha(cells: &[CellRow], alpha: Option<f64>, path: &Path) -> anyhow::Result<f64> {
    if let Some(a) = alpha {
        return Ok(a);
    }
    let mut alphas: Vec<f64> = cells.iter().map(|c| c.params.alpha).collect();
    alphas.sort_by(|a, b| a.total_cmp(b));
    alphas.dedup();
    match alphas.as_slice() {
        [a] => Ok(*a),
        [] => Err(usage(format!("{} has no cells", path.display()))),
        many => Err(usage(format!("{} holds several flip rates {many:?}; choose one with --alpha", path.display()))),
    }
}

fn cmd_fit_critical(cells: &Path, alpha: Option<f64>, threshold: f64, out: Option<&Path>) -> anyhow::Result<()> {
    let rows = load_cells(cells)?;
    let alpha = pick_alpha(&rows, alpha, cells)?;
    let grid = PhaseGrid::from_cells(&rows, alpha)?;
    let fit = fit_critical_line(&grid, threshold)?;
    println!("c_hat = {:.6}", fit.c_hat);
    println!("residual = {:.6}", fit.residual);
    println!("rows = {}", fit.boundaries.len());
    for b in &fit.boundaries {
        println!("  N = {:>4}  SNR* = {:.6}  N·SNR*² = {:.6}", b.n, b.snr, b.n as f64 * b.snr * b.snr);
    }
    if let Some(path) = out {
        write_json(path, &fit)?;
    }
    Ok(())
}

fn cmd_similarity(a: &Path, b: Option<&Path>, alpha_a: Option<f64>, alpha_b: Option<f64>, metric: Metric) -> anyhow::Result<()> {
    let cells_a = load_cells(a)?;
    let (cells_b, path_b) = match b {
        Some(p) => (load_cells(p)?, p),
        None => (cells_a.clone(), a),
    };
    let ga = PhaseGrid::from_cells(&cells_a, pick_alpha(&cells_a, alpha_a, a)?)?;
    let gb = PhaseGrid::from_cells(&cells_b, pick_alpha(&cells_b, alpha_b, path_b)?)?;
    let r = heatmap_similarity(&ga, &gb, metric)?;
    println!("{r:.6}");
    Ok(())
}

fn cmd_gradcheck(instances: usize, seed: u64, tolerance: f64) -> anyhow::Result<()> {
    if instances == 0 {
        return Err(usage("--instances must be >= 1"));
    }
    let audit = gradient_audit(instances, seed)?;
    println!("instances = {}", audit.instances);
    println!("w_q     max rel. error = {:.3e}", audit.w_q);
    println!("w_k     max rel. error = {:.3e}", audit.w_k);
    println!("w_v     max rel. error = {:.3e}", audit.w_v);
    println!("upsilon max rel. error = {:.3e}", audit.upsilon);
    println!("max rel. error = {:.3e}", audit.max_error());
    if audit.max_error() < tolerance {
        Ok(())
    } else {
        Err(anyhow::Error::new(Numerical(format!("gradient audit exceeded tolerance {tolerance:e}"))))
    }
}
