//! Monte-Carlo test metrics, the flip-stratified loss split and the
//! closed-form harmful-regime loss floor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{draw_point, DataConfig, Dataset, Label, SignalPair};
use crate::error::{Error, Result};
use crate::model::{BatchForward, ModelParams};
use crate::numerics::{dot, Matrix, RngStream};
use crate::trainer::logistic_loss;

pub const DEFAULT_N_MC: usize = 20_000;

/// Points per Monte-Carlo chunk. Chunk `c` always draws from child stream
/// `c`, so results do not depend on the thread count.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestEstimate {
    /// Mean logistic loss against the observed (possibly flipped) label.
    pub loss: f64,
    pub std_err: f64,
    /// Fraction with `sign(f) ≠ y_obs`, `sign(0) = +1`.
    pub error01: f64,
    pub error01_std_err: f64,
    /// Fraction with `sign(f) ≠ y_true`.
    pub error01_clean: f64,
    pub n_mc: usize,
}

/// Count, mean and centred sum of squares, merged pairwise.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = (self.n + o.n) as f64;
        let delta = o.mean - self.mean;
        self.mean += delta * o.n as f64 / n;
        self.m2 += o.m2 + delta * delta * self.n as f64 * o.n as f64 / n;
        self.n += o.n;
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    fn std_err(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((self.m2 / (n - 1.0)).max(0.0) / n).sqrt()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ChunkStats {
    all: Moments,
    unflipped: Moments,
    flipped: Moments,
    errors: usize,
    clean_errors: usize,
}

fn chunk_stats(params: &ModelParams, fwd: &BatchForward, cfg: &DataConfig, signals: &SignalPair, len: usize, stream: RngStream) -> Result<ChunkStats> {
    let mut rng = stream.rng();
    let mut noise = Matrix::zeros(len, cfg.d);
    let mut truth = Vec::with_capacity(len);
    let mut observed = Vec::with_capacity(len);
    for i in 0..len {
        let (t, o) = draw_point(&mut rng, signals, cfg.sigma_p, cfg.alpha, noise.row_mut(i));
        truth.push(t);
        observed.push(o);
    }
    debug_assert_eq!(params.d(), cfg.d);
    let out = fwd.run(&truth, &noise)?;
    let mut st = ChunkStats::default();
    for ((o, &t), &y) in out.iter().zip(&truth).zip(&observed) {
        let l = logistic_loss(y.value() * o.f);
        st.all.push(l);
        if t == y {
            st.unflipped.push(l);
        } else {
            st.flipped.push(l);
        }
        let pred = Label::from_output(o.f);
        st.errors += (pred != y) as usize;
        st.clean_errors += (pred != t) as usize;
    }
    Ok(st)
}

fn run_chunks(params: &ModelParams, cfg: &DataConfig, signals: &SignalPair, n_mc: usize, rng: &RngStream) -> Result<ChunkStats> {
    if n_mc == 0 {
        return Err(Error::config("n_mc", "must be >= 1"));
    }
    cfg.validate()?;
    if cfg.d != params.d() {
        return Err(Error::shape("data d vs params d", params.d(), cfg.d));
    }
    let fwd = BatchForward::new(params, signals)?;
    let n_chunks = n_mc.div_ceil(CHUNK);
    let parts: Vec<Result<ChunkStats>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(n_mc - c * CHUNK);
            chunk_stats(params, &fwd, cfg, signals, len, rng.child(c as u64))
        })
        .collect();
    let mut total = ChunkStats::default();
    for p in parts {
        let p = p?;
        total.all.merge(&p.all);
        total.unflipped.merge(&p.unflipped);
        total.flipped.merge(&p.flipped);
        total.errors += p.errors;
        total.clean_errors += p.clean_errors;
    }
    Ok(total)
}

/// Test metrics on `n_mc` fresh draws from the data distribution.
pub fn estimate_test(params: &ModelParams, data_config: &DataConfig, signals: &SignalPair, n_mc: usize, rng: &RngStream) -> Result<TestEstimate> {
    let st = run_chunks(params, data_config, signals, n_mc, rng)?;
    let n = n_mc as f64;
    let error01 = st.errors as f64 / n;
    Ok(TestEstimate {
        loss: st.all.mean(),
        std_err: st.all.std_err(),
        error01,
        error01_std_err: (error01 * (1.0 - error01) / n).sqrt(),
        error01_clean: st.clean_errors as f64 / n,
        n_mc,
    })
}

/// Test loss split by whether the label was flipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitLoss {
    /// Mean loss over draws whose label was kept; `None` if there were none.
    pub unflipped: Option<f64>,
    pub unflipped_std_err: Option<f64>,
    pub flipped: Option<f64>,
    pub flipped_std_err: Option<f64>,
    /// `(1 − α)·unflipped + α·flipped`, or the present part alone.
    pub total: f64,
    pub total_std_err: f64,
    pub n_unflipped: usize,
    pub n_flipped: usize,
}

pub fn split_test_loss(params: &ModelParams, data_config: &DataConfig, signals: &SignalPair, n_mc: usize, rng: &RngStream) -> Result<SplitLoss> {
    let st = run_chunks(params, data_config, signals, n_mc, rng)?;
    let part = |m: &Moments| if m.n == 0 { (None, None) } else { (Some(m.mean()), Some(m.std_err())) };
    let (u, u_se) = part(&st.unflipped);
    let (f, f_se) = part(&st.flipped);
    let a = data_config.alpha;
    let (total, total_std_err) = match (u, f) {
        (Some(u), Some(f)) => {
            let (us, fs) = (u_se.unwrap_or(0.0), f_se.unwrap_or(0.0));
            ((1.0 - a) * u + a * f, ((1.0 - a) * (1.0 - a) * us * us + a * a * fs * fs).sqrt())
        }
        (Some(u), None) => (u, u_se.unwrap_or(0.0)),
        (None, Some(f)) => (f, f_se.unwrap_or(0.0)),
        (None, None) => unreachable!("n_mc >= 1"),
    };
    Ok(SplitLoss {
        unflipped: u,
        unflipped_std_err: u_se,
        flipped: f,
        flipped_std_err: f_se,
        total,
        total_std_err,
        n_unflipped: st.unflipped.n,
        n_flipped: st.flipped.n,
    })
}

/// `(1 − α)·log((1 + 2e^{1/2})/(1 + e^{1/2})) + α·log(2 + e^{−1/2})`, the
/// floor on the test loss of a converged harmful-regime model.
pub fn harmful_lower_bound(alpha: f64) -> Result<f64> {
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::config("alpha", "must lie in [0, 0.5]"));
    }
    let h = 0.5f64.exp();
    let clean = ((1.0 + 2.0 * h) / (1.0 + h)).ln();
    let flipped = (2.0 + 1.0 / h).ln();
    Ok((1.0 - alpha) * clean + alpha * flipped)
}

/// Value-path drift coordinates relative to an initial snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoCoefficients {
    pub plus: f64,
    pub minus: f64,
    /// One entry per training sample, in dataset order.
    pub xi: Vec<f64>,
}

impl RhoCoefficients {
    pub fn xi_mean(&self) -> f64 {
        if self.xi.is_empty() {
            0.0
        } else {
            self.xi.iter().sum::<f64>() / self.xi.len() as f64
        }
    }
}

/// `ρ = xᵀ(W_V^{(t)} − W_V^{(0)})ᵀυ / ‖υ‖²` for the two signals and every
/// training noise token. Both snapshots must share `υ`.
pub fn rho_coefficients(params_t: &ModelParams, params_0: &ModelParams, signals: &SignalPair, dataset: &Dataset) -> Result<RhoCoefficients> {
    params_t.check_shapes()?;
    params_0.check_shapes()?;
    if params_t.w_v.shape() != params_0.w_v.shape() {
        return Err(Error::shape("W_V snapshots", format!("{:?}", params_0.w_v.shape()), format!("{:?}", params_t.w_v.shape())));
    }
    if params_t.upsilon != params_0.upsilon {
        return Err(Error::UpsilonMismatch);
    }
    if signals.dim() != params_t.d() || (!dataset.is_empty() && dataset.dim() != params_t.d()) {
        return Err(Error::shape("token dimension", params_t.d(), signals.dim()));
    }
    let u = &params_t.upsilon;
    let u2 = dot(u, u);
    let mut delta = params_t.w_v.clone();
    delta.add_scaled(-1.0, &params_0.w_v)?;
    let dir = delta.tr_matvec(u)?;
    let r = |x: &[f64]| dot(x, &dir) / u2;
    Ok(RhoCoefficients {
        plus: r(&signals.mu_plus),
        minus: r(&signals.mu_minus),
        xi: dataset.points.iter().map(|p| r(&p.x2)).collect(),
    })
}
