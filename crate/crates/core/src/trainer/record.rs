use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the record CSV.
pub const RECORD_COLUMNS: [&str; 12] = [
    "iteration",
    "train_loss",
    "test_loss",
    "test_error01",
    "atten_signal",
    "atten_noise",
    "v_plus",
    "v_minus",
    "v_xi_mean",
    "rho_plus",
    "rho_minus",
    "rho_xi_mean",
];

/// Instrumentation at one recorded iteration. Attention and value columns
/// are averages over the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_error01: Option<f64>,
    pub atten_signal: f64,
    pub atten_noise: f64,
    pub v_plus: f64,
    pub v_minus: f64,
    pub v_xi_mean: f64,
    pub rho_plus: f64,
    pub rho_minus: f64,
    pub rho_xi_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    IterationCap,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBoundaries {
    pub t1_hat: Option<usize>,
    pub t2_hat: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub target_loss: f64,
    pub rows: Vec<RecordRow>,
    pub stages: StageBoundaries,
    pub termination: Option<Termination>,
    /// Number of GD steps taken.
    pub iterations: usize,
}

impl TrainingRecord {
    pub fn new(target_loss: f64) -> Self {
        TrainingRecord {
            target_loss,
            rows: Vec::new(),
            stages: StageBoundaries::default(),
            termination: None,
            iterations: 0,
        }
    }

    pub fn last(&self) -> Option<&RecordRow> {
        self.rows.last()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.train_loss)
    }

    pub fn converged(&self) -> bool {
        self.termination == Some(Termination::Converged)
    }

    /// Writes the rows as CSV with the header [`RECORD_COLUMNS`]; absent
    /// test columns are left empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", RECORD_COLUMNS.join(","))?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.train_loss,
                opt(r.test_loss),
                opt(r.test_error01),
                r.atten_signal,
                r.atten_noise,
                r.v_plus,
                r.v_minus,
                r.v_xi_mean,
                r.rho_plus,
                r.rho_minus,
                r.rho_xi_mean
            )?;
        }
        Ok(())
    }

    /// Reads rows written by [`TrainingRecord::write_csv`].
    pub fn read_csv_rows<R: BufRead>(input: R) -> Result<Vec<RecordRow>> {
        let mut rows = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if idx == 0 {
                if line.trim() != RECORD_COLUMNS.join(",") {
                    return Err(Error::Parse { line: 1, message: "unexpected record header".into() });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != RECORD_COLUMNS.len() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected {} fields, found {}", RECORD_COLUMNS.len(), fields.len()),
                });
            }
            let num = |i: usize| -> Result<f64> {
                fields[i].trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("column {}: {e}", RECORD_COLUMNS[i]),
                })
            };
            let opt = |i: usize| -> Result<Option<f64>> {
                if fields[i].trim().is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            };
            let iteration = fields[0].trim().parse::<usize>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("column iteration: {e}"),
            })?;
            rows.push(RecordRow {
                iteration,
                train_loss: num(1)?,
                test_loss: opt(2)?,
                test_error01: opt(3)?,
                atten_signal: num(4)?,
                atten_noise: num(5)?,
                v_plus: num(6)?,
                v_minus: num(7)?,
                v_xi_mean: num(8)?,
                rho_plus: num(9)?,
                rho_minus: num(10)?,
                rho_xi_mean: num(11)?,
            });
        }
        Ok(rows)
    }
}

/// Fraction of `(initial − target)` the loss must drop by to end the first
/// stage.
pub const STAGE1_DROP: f64 = 0.05;
/// Multiple of the target loss that marks the start of the last stage.
pub const STAGE3_FACTOR: f64 = 2.0;

/// Empirical stage boundaries of a loss curve.
///
/// `t1_hat` is the first recorded iteration whose loss has dropped by at
/// least 5% of `initial − target`; `t2_hat` the first whose loss is at most
/// twice the target. A threshold that is never crossed gives `None`.
pub fn detect_stages(record: &TrainingRecord) -> Result<StageBoundaries> {
    if record.rows.len() < 3 {
        return Err(Error::Empty("detect_stages needs at least 3 recorded iterations"));
    }
    let initial = record.rows[0].train_loss;
    let target = record.target_loss;
    let t2 = record.rows.iter().find(|r| r.train_loss <= STAGE3_FACTOR * target).map(|r| r.iteration);
    let t1 = if initial > target {
        let level = initial - STAGE1_DROP * (initial - target);
        record.rows.iter().find(|r| r.train_loss <= level).map(|r| r.iteration)
    } else {
        t2
    };
    let t1 = match (t1, t2) {
        (Some(a), Some(b)) if a > b => Some(b),
        _ => t1,
    };
    Ok(StageBoundaries { t1_hat: t1, t2_hat: t2 })
}
