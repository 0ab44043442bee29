use std::io::{BufRead, Write};

use crate::error::{Error, Result};

use super::{CellParams, CellRow, RunRow, Stat};

pub const CELL_COLUMNS: [&str; 25] = [
    "cell",
    "n",
    "mu_norm",
    "sigma_p",
    "alpha",
    "eta",
    "sigma_v",
    "snr",
    "n_ok",
    "n_failed",
    "n_converged",
    "test_loss_mean",
    "test_loss_std",
    "error01_mean",
    "error01_std",
    "error01_clean_mean",
    "error01_clean_std",
    "train_loss_mean",
    "train_loss_std",
    "iterations_mean",
    "iterations_std",
    "atten_signal_mean",
    "atten_signal_std",
    "n_snr2",
    "runs",
];

pub const RUN_COLUMNS: [&str; 16] = [
    "cell",
    "repeat",
    "n",
    "mu_norm",
    "sigma_p",
    "alpha",
    "eta",
    "sigma_v",
    "snr",
    "status",
    "iterations",
    "train_loss",
    "test_loss",
    "test_loss_std_err",
    "error01",
    "error01_clean",
];

/// Finite values in shortest round-trip form, anything else as an empty field.
fn num(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

pub fn write_cells_csv<W: Write>(cells: &[CellRow], mut out: W) -> Result<()> {
    writeln!(out, "{}", CELL_COLUMNS.join(","))?;
    for c in cells {
        let p = &c.params;
        let fields = [
            c.cell.to_string(),
            p.n.to_string(),
            num(p.mu_norm),
            num(p.sigma_p),
            num(p.alpha),
            num(p.eta),
            num(p.sigma_v),
            num(c.snr),
            c.n_ok.to_string(),
            c.n_failed.to_string(),
            c.n_converged.to_string(),
            num(c.test_loss.mean),
            num(c.test_loss.std),
            num(c.error01.mean),
            num(c.error01.std),
            num(c.error01_clean.mean),
            num(c.error01_clean.std),
            num(c.train_loss.mean),
            num(c.train_loss.std),
            num(c.iterations.mean),
            num(c.iterations.std),
            num(c.atten_signal.mean),
            num(c.atten_signal.std),
            num(p.n as f64 * c.snr * c.snr),
            (c.n_ok + c.n_failed).to_string(),
        ];
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn write_runs_csv<W: Write>(runs: &[RunRow], mut out: W) -> Result<()> {
    writeln!(out, "{}", RUN_COLUMNS.join(","))?;
    for r in runs {
        let p = &r.params;
        let fields = [
            r.cell.to_string(),
            r.repeat.to_string(),
            p.n.to_string(),
            num(p.mu_norm),
            num(p.sigma_p),
            num(p.alpha),
            num(p.eta),
            num(p.sigma_v),
            num(r.snr),
            r.status.as_str().to_string(),
            r.iterations.to_string(),
            num(r.train_loss),
            num(r.test_loss),
            num(r.test_loss_std_err),
            num(r.error01),
            num(r.error01_clean),
        ];
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Reads a file written by [`write_cells_csv`]. Columns are located by
/// header name, so extra columns are ignored.
pub fn read_cells_csv<R: BufRead>(input: R) -> Result<Vec<CellRow>> {
    let mut lines = input.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, message: "empty file".into() })??;
    let names: Vec<&str> = header.trim().split(',').collect();
    let idx = |name: &str| -> Result<usize> {
        names.iter().position(|n| *n == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let cols: Vec<usize> = CELL_COLUMNS[..23].iter().map(|n| idx(n)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        let lineno = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != names.len() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", names.len(), f.len()),
            });
        }
        let get = |c: usize| -> &str { f[cols[c]].trim() };
        let float = |c: usize| -> Result<f64> {
            let s = get(c);
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("column {}: {e}", CELL_COLUMNS[c]),
            })
        };
        let int = |c: usize| -> Result<usize> {
            get(c).parse::<usize>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("column {}: {e}", CELL_COLUMNS[c]),
            })
        };
        let stat = |c: usize| -> Result<Stat> { Ok(Stat { mean: float(c)?, std: float(c + 1)? }) };
        out.push(CellRow {
            cell: int(0)?,
            params: CellParams {
                n: int(1)?,
                mu_norm: float(2)?,
                sigma_p: float(3)?,
                alpha: float(4)?,
                eta: float(5)?,
                sigma_v: float(6)?,
            },
            snr: float(7)?,
            n_ok: int(8)?,
            n_failed: int(9)?,
            n_converged: int(10)?,
            test_loss: stat(11)?,
            error01: stat(13)?,
            error01_clean: stat(15)?,
            train_loss: stat(17)?,
            iterations: stat(19)?,
            atten_signal: stat(21)?,
        });
    }
    Ok(out)
}
