//! Two-token synthetic data: a class signal token and a Gaussian noise
//! token, with observed labels flipped at rate `alpha`.
//!
//! The signal token is keyed to the *true* label. Only the training target
//! is flipped, so a flipped point carries the opposite class's label but
//! its own class's signal.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, fill_gaussian, norm, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "+1")]
    Pos,
    #[serde(rename = "-1")]
    Neg,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Pos => Label::Neg,
            Label::Neg => Label::Pos,
        }
    }

    /// `sign(f)` with `sign(0) = +1`.
    pub fn from_output(f: f64) -> Label {
        if f >= 0.0 {
            Label::Pos
        } else {
            Label::Neg
        }
    }

    fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "1" | "+1" | "1.0" => Some(Label::Pos),
            "-1" | "-1.0" => Some(Label::Neg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Token dimension.
    pub d: usize,
    /// `‖μ‖₂`.
    pub mu_norm: f64,
    /// Noise standard deviation per coordinate.
    pub sigma_p: f64,
    /// Label flip probability, in `[0, 0.5)`.
    pub alpha: f64,
    /// Number of training samples.
    pub n: usize,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::config("d", "need at least 2 dimensions for two orthogonal signals"));
        }
        if !(self.mu_norm >= 0.0 && self.mu_norm.is_finite()) {
            return Err(Error::config("mu_norm", "must be finite and >= 0"));
        }
        if !(self.sigma_p >= 0.0 && self.sigma_p.is_finite()) {
            return Err(Error::config("sigma_p", "must be finite and >= 0"));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 0.5), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `‖μ‖₂ / (σ_p √d)`.
pub fn snr(config: &DataConfig) -> Result<f64> {
    if !(config.sigma_p > 0.0) {
        return Err(Error::config("sigma_p", "SNR is undefined for zero noise"));
    }
    if config.d == 0 {
        return Err(Error::config("d", "SNR needs d >= 1"));
    }
    Ok(config.mu_norm / (config.sigma_p * (config.d as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPair {
    pub mu_plus: Vec<f64>,
    pub mu_minus: Vec<f64>,
}

impl SignalPair {
    /// Arbitrary orthogonal pair of equal norm.
    pub fn new(mu_plus: Vec<f64>, mu_minus: Vec<f64>) -> Result<Self> {
        if mu_plus.len() != mu_minus.len() {
            return Err(Error::shape("SignalPair", mu_plus.len(), mu_minus.len()));
        }
        let (np, nm) = (norm(&mu_plus), norm(&mu_minus));
        let scale = np.max(nm).max(1.0);
        if (np - nm).abs() > 1e-10 * scale {
            return Err(Error::config("signals", format!("norms differ: {np} vs {nm}")));
        }
        if dot(&mu_plus, &mu_minus).abs() > 1e-10 * scale * scale {
            return Err(Error::config("signals", "signals are not orthogonal"));
        }
        Ok(SignalPair { mu_plus, mu_minus })
    }

    pub fn dim(&self) -> usize {
        self.mu_plus.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.mu_plus)
    }

    pub fn for_label(&self, label: Label) -> &[f64] {
        match label {
            Label::Pos => &self.mu_plus,
            Label::Neg => &self.mu_minus,
        }
    }
}

/// `μ₊ = ‖μ‖·e₁`, `μ₋ = ‖μ‖·e₂`.
pub fn make_signals(config: &DataConfig) -> Result<SignalPair> {
    if config.d < 2 {
        return Err(Error::config("d", "need at least 2 dimensions for two orthogonal signals"));
    }
    let mut mu_plus = vec![0.0; config.d];
    let mut mu_minus = vec![0.0; config.d];
    mu_plus[0] = config.mu_norm;
    mu_minus[1] = config.mu_norm;
    Ok(SignalPair { mu_plus, mu_minus })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    /// Signal token, `μ₊` or `μ₋` according to `y_true`.
    pub x1: Vec<f64>,
    /// Noise token ξ.
    pub x2: Vec<f64>,
    pub y_true: Label,
    pub y_obs: Label,
}

impl DataPoint {
    pub fn is_flipped(&self) -> bool {
        self.y_true != self.y_obs
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub signals: SignalPair,
    pub points: Vec<DataPoint>,
    /// Indices with `y_obs = +1`.
    pub s_plus: Vec<usize>,
    /// Indices with `y_obs = -1`.
    pub s_minus: Vec<usize>,
}

impl Dataset {
    pub fn from_points(config: DataConfig, signals: SignalPair, points: Vec<DataPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.x1.len() != signals.dim() || p.x2.len() != signals.dim() {
                return Err(Error::shape(format!("data point {i}"), signals.dim(), p.x1.len().max(p.x2.len())));
            }
        }
        let (s_plus, s_minus) = (0..points.len()).partition(|&i| points[i].y_obs == Label::Pos);
        Ok(Dataset {
            config,
            signals,
            points,
            s_plus,
            s_minus,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.signals.dim()
    }

    pub fn flip_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_flipped()).count()
    }

    /// One CSV row per point: `y_true,y_obs,x1_0..x1_{d-1},x2_0..x2_{d-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        let mut header = vec!["y_true".to_string(), "y_obs".to_string()];
        header.extend((0..d).map(|j| format!("x1_{j}")));
        header.extend((0..d).map(|j| format!("x2_{j}")));
        writeln!(out, "{}", header.join(","))?;
        for p in &self.points {
            write!(out, "{},{}", p.y_true.value(), p.y_obs.value())?;
            for v in p.x1.iter().chain(&p.x2) {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Reads rows written by [`Dataset::write_csv`].
pub fn read_points_csv<R: BufRead>(input: R) -> Result<Vec<DataPoint>> {
    let mut lines = input.lines();
    let header = lines.next().ok_or(Error::Empty("dataset csv"))??;
    let cols = header.split(',').count();
    if cols < 2 || (cols - 2) % 2 != 0 {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected 2 + 2d columns, found {cols}"),
        });
    }
    let d = (cols - 2) / 2;
    let mut points = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {cols} fields, found {}", fields.len()),
            });
        }
        let label = |s: &str| {
            Label::parse(s).ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("bad label {s:?}"),
            })
        };
        let nums = fields[2..]
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        points.push(DataPoint {
            y_true: label(fields[0])?,
            y_obs: label(fields[1])?,
            x1: nums[..d].to_vec(),
            x2: nums[d..].to_vec(),
        });
    }
    Ok(points)
}

/// Draws one point. Each call consumes the same number of variates
/// regardless of `alpha`, so streams stay aligned across flip rates.
pub(crate) fn draw_point<R: Rng + ?Sized>(
    rng: &mut R,
    signals: &SignalPair,
    sigma_p: f64,
    alpha: f64,
    noise: &mut [f64],
) -> (Label, Label) {
    let y_true = if rng.random_bool(0.5) { Label::Pos } else { Label::Neg };
    let u: f64 = rng.random();
    let y_obs = if u < alpha { y_true.flipped() } else { y_true };
    fill_gaussian(rng, sigma_p, noise);
    debug_assert_eq!(noise.len(), signals.dim());
    (y_true, y_obs)
}

pub fn sample_dataset(config: &DataConfig, rng: &RngStream) -> Result<Dataset> {
    let signals = make_signals(config)?;
    sample_dataset_with(config, signals, rng)
}

/// Like [`sample_dataset`] but with a caller-supplied signal pair.
pub fn sample_dataset_with(config: &DataConfig, signals: SignalPair, rng: &RngStream) -> Result<Dataset> {
    config.validate()?;
    if signals.dim() != config.d {
        return Err(Error::shape("signal dimension", config.d, signals.dim()));
    }
    let mut gen = rng.rng();
    let mut points = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let mut x2 = vec![0.0; config.d];
        let (y_true, y_obs) = draw_point(&mut gen, &signals, config.sigma_p, config.alpha, &mut x2);
        points.push(DataPoint {
            x1: signals.for_label(y_true).to_vec(),
            x2,
            y_true,
            y_obs,
        });
    }
    Dataset::from_points(*config, signals, points)
}
