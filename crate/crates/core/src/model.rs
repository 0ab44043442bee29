//! Single-layer softmax attention over two tokens followed by a linear
//! read-out `υ`.
//!
//! For a point `X = (x₁, x₂)` with queries `qᵢ = W_Q xᵢ`, keys
//! `kᵢ = W_K xᵢ` and raw scores `⟨qᵢ, kⱼ⟩` (no temperature), the output is
//!
//! ```text
//! f = (1/m_v) · [ (S₁₁ + S₂₁)·⟨W_V x₁, υ⟩ + (S₁₂ + S₂₂)·⟨W_V x₂, υ⟩ ]
//! ```
//!
//! where row `i` of `S` is the softmax of `(⟨qᵢ,k₁⟩, ⟨qᵢ,k₂⟩)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{DataPoint, Dataset, Label, SignalPair};
use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_matrix, gemm, norm, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub m_k: usize,
    pub m_v: usize,
    /// Init std of `W_Q` and `W_K`.
    pub sigma_k: f64,
    /// Init std of `W_V`.
    pub sigma_v: f64,
    /// `‖υ‖₂` after initialization.
    #[serde(default = "default_upsilon_norm")]
    pub upsilon_norm: f64,
}

fn default_upsilon_norm() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("d", self.d), ("m_k", self.m_k), ("m_v", self.m_v)] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        for (name, v) in [("sigma_k", self.sigma_k), ("sigma_v", self.sigma_v)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        if !(self.upsilon_norm > 0.0 && self.upsilon_norm.is_finite()) {
            return Err(Error::config("upsilon_norm", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `m_k × d`.
    pub w_q: Matrix,
    /// `m_k × d`.
    pub w_k: Matrix,
    /// `m_v × d`.
    pub w_v: Matrix,
    /// Length `m_v`.
    pub upsilon: Vec<f64>,
}

impl ModelParams {
    pub fn d(&self) -> usize {
        self.w_q.cols()
    }

    pub fn m_k(&self) -> usize {
        self.w_q.rows()
    }

    pub fn m_v(&self) -> usize {
        self.w_v.rows()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.d();
        if self.w_k.shape() != self.w_q.shape() {
            return Err(Error::shape("w_k", format!("{:?}", self.w_q.shape()), format!("{:?}", self.w_k.shape())));
        }
        if self.w_v.cols() != d {
            return Err(Error::shape("w_v columns", d, self.w_v.cols()));
        }
        if self.upsilon.len() != self.m_v() {
            return Err(Error::shape("upsilon", self.m_v(), self.upsilon.len()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w_q.is_finite()
            && self.w_k.is_finite()
            && self.w_v.is_finite()
            && self.upsilon.iter().all(|x| x.is_finite())
    }

    /// `W_Vᵀ υ`, the d-vector whose inner product with a token is that
    /// token's value projection.
    pub fn value_direction(&self) -> Vec<f64> {
        self.w_v.tr_matvec(&self.upsilon).expect("checked shapes")
    }

    /// Binary checkpoint: the magic `ATTNPRM1`, then for each of `w_q`,
    /// `w_k`, `w_v`, `upsilon` a little-endian `u64` row count, `u64`
    /// column count and the row-major `f64` payload. `upsilon` is stored as
    /// an `m_v × 1` block.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        let ups = Matrix::from_vec(self.upsilon.len(), 1, self.upsilon.clone())?;
        for block in [&self.w_q, &self.w_k, &self.w_v, &ups] {
            out.write_all(&(block.rows() as u64).to_le_bytes())?;
            out.write_all(&(block.cols() as u64).to_le_bytes())?;
            for v in block.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                line: 0,
                message: "not an attnlab checkpoint".into(),
            });
        }
        let mut read_block = || -> Result<Matrix> {
            let mut word = [0u8; 8];
            input.read_exact(&mut word)?;
            let rows = u64::from_le_bytes(word) as usize;
            input.read_exact(&mut word)?;
            let cols = u64::from_le_bytes(word) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                input.read_exact(&mut word)?;
                data.push(f64::from_le_bytes(word));
            }
            Matrix::from_vec(rows, cols, data)
        };
        let w_q = read_block()?;
        let w_k = read_block()?;
        let w_v = read_block()?;
        let upsilon = read_block()?.into_vec();
        let params = ModelParams { w_q, w_k, w_v, upsilon };
        params.check_shapes()?;
        Ok(params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ATTNPRM1";

/// Gaussian init of the three attention matrices; `υ` is drawn Gaussian and
/// rescaled to `upsilon_norm`. Each block uses its own child stream, so
/// e.g. changing `sigma_v` rescales `W_V` without touching the others.
pub fn init_params(config: &ModelConfig, rng: &RngStream) -> Result<ModelParams> {
    config.validate()?;
    let w_q = gaussian_matrix(&rng.named("w_q"), config.m_k, config.d, config.sigma_k)?;
    let w_k = gaussian_matrix(&rng.named("w_k"), config.m_k, config.d, config.sigma_k)?;
    let w_v = gaussian_matrix(&rng.named("w_v"), config.m_v, config.d, config.sigma_v)?;
    let mut upsilon = gaussian_matrix(&rng.named("upsilon"), config.m_v, 1, 1.0)?.into_vec();
    let len = norm(&upsilon);
    upsilon.iter_mut().for_each(|x| *x *= config.upsilon_norm / len);
    Ok(ModelParams { w_q, w_k, w_v, upsilon })
}

/// Softmax of two scores, returning `(p_a, p_b)` with `p_a + p_b = 1`.
#[inline]
pub fn softmax2(a: f64, b: f64) -> (f64, f64) {
    // Both masses from the same exponent so the smaller one keeps full
    // relative precision.
    if a >= b {
        let e = (b - a).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = (a - b).exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    }
}

/// Everything the forward pass computes for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    pub s11: f64,
    pub s12: f64,
    pub s21: f64,
    pub s22: f64,
    /// `⟨W_V x₁, υ⟩`.
    pub v_sig: f64,
    /// `⟨W_V x₂, υ⟩`.
    pub v_noise: f64,
    pub f: f64,
    /// `⟨q₁,k₁⟩ − ⟨q₁,k₂⟩`.
    pub lambda_sig: f64,
    /// `⟨q₂,k₁⟩ − ⟨q₂,k₂⟩`.
    pub lambda_noise: f64,
}

pub fn forward(params: &ModelParams, point: &DataPoint) -> Result<ForwardTrace> {
    params.check_shapes()?;
    let d = params.d();
    if point.x1.len() != d || point.x2.len() != d {
        return Err(Error::shape("forward token", d, point.x1.len().max(point.x2.len())));
    }
    let q1 = params.w_q.matvec(&point.x1)?;
    let q2 = params.w_q.matvec(&point.x2)?;
    let k1 = params.w_k.matvec(&point.x1)?;
    let k2 = params.w_k.matvec(&point.x2)?;
    let a11 = dot(&q1, &k1);
    let a12 = dot(&q1, &k2);
    let a21 = dot(&q2, &k1);
    let a22 = dot(&q2, &k2);
    let (s11, s12) = softmax2(a11, a12);
    let (s21, s22) = softmax2(a21, a22);
    let v_sig = dot(&params.w_v.matvec(&point.x1)?, &params.upsilon);
    let v_noise = dot(&params.w_v.matvec(&point.x2)?, &params.upsilon);
    let f = ((s11 + s21) * v_sig + (s12 + s22) * v_noise) / params.m_v() as f64;
    Ok(ForwardTrace {
        q1,
        q2,
        k1,
        k2,
        s11,
        s12,
        s21,
        s22,
        v_sig,
        v_noise,
        f,
        lambda_sig: a11 - a12,
        lambda_noise: a21 - a22,
    })
}

/// Softmax masses and output of one point, without the projection vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputSummary {
    pub s11: f64,
    pub s12: f64,
    pub s21: f64,
    pub s22: f64,
    pub f: f64,
}

impl From<&ForwardTrace> for OutputSummary {
    fn from(t: &ForwardTrace) -> Self {
        OutputSummary {
            s11: t.s11,
            s12: t.s12,
            s21: t.s21,
            s22: t.s22,
            f: t.f,
        }
    }
}

/// Forward pass precomputation for many points whose signal token is one
/// of a fixed pair: the signal projections are computed once and the noise
/// tokens go through a single matrix product.
pub struct BatchForward<'a> {
    params: &'a ModelParams,
    q_sig: [Vec<f64>; 2],
    k_sig: [Vec<f64>; 2],
    v_sig: [f64; 2],
    self_score: [f64; 2],
    value_dir: Vec<f64>,
}

impl<'a> BatchForward<'a> {
    pub fn new(params: &'a ModelParams, signals: &SignalPair) -> Result<Self> {
        params.check_shapes()?;
        if signals.dim() != params.d() {
            return Err(Error::shape("signal dimension", params.d(), signals.dim()));
        }
        let value_dir = params.value_direction();
        let proj = |mu: &[f64]| -> Result<(Vec<f64>, Vec<f64>, f64)> {
            Ok((params.w_q.matvec(mu)?, params.w_k.matvec(mu)?, dot(mu, &value_dir)))
        };
        let (qp, kp, vp) = proj(&signals.mu_plus)?;
        let (qm, km, vm) = proj(&signals.mu_minus)?;
        let self_score = [dot(&qp, &kp), dot(&qm, &km)];
        Ok(BatchForward {
            params,
            q_sig: [qp, qm],
            k_sig: [kp, km],
            v_sig: [vp, vm],
            self_score,
            value_dir,
        })
    }

    /// `noise` is `n × d`; `labels[i]` picks the signal token of row `i`.
    pub fn run(&self, labels: &[Label], noise: &Matrix) -> Result<Vec<OutputSummary>> {
        let n = labels.len();
        if noise.rows() != n || noise.cols() != self.params.d() {
            return Err(Error::shape("batch noise", format!("{n}x{}", self.params.d()), format!("{:?}", noise.shape())));
        }
        let m_k = self.params.m_k();
        let mut qn = Matrix::zeros(n, m_k);
        let mut kn = Matrix::zeros(n, m_k);
        gemm(1.0, noise, false, &self.params.w_q, true, 0.0, &mut qn);
        gemm(1.0, noise, false, &self.params.w_k, true, 0.0, &mut kn);
        let inv_mv = 1.0 / self.params.m_v() as f64;
        let out = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let c = class_index(label);
                let (q2, k2) = (qn.row(i), kn.row(i));
                let (s11, s12) = softmax2(self.self_score[c], dot(&self.q_sig[c], k2));
                let (s21, s22) = softmax2(dot(q2, &self.k_sig[c]), dot(q2, k2));
                let v_noise = dot(noise.row(i), &self.value_dir);
                let f = ((s11 + s21) * self.v_sig[c] + (s12 + s22) * v_noise) * inv_mv;
                OutputSummary { s11, s12, s21, s22, f }
            })
            .collect();
        Ok(out)
    }
}

#[inline]
pub(crate) fn class_index(label: Label) -> usize {
    match label {
        Label::Pos => 0,
        Label::Neg => 1,
    }
}

/// Mean attention on the signal key and on the noise key, averaged over
/// both query rows and all samples. The two always sum to one.
pub fn attention_summary<'t, I, T>(traces: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = &'t T>,
    T: AttentionMasses + 't,
{
    let mut n = 0usize;
    let (mut sig, mut noi) = (0.0, 0.0);
    for t in traces {
        let (s11, s12, s21, s22) = t.masses();
        sig += 0.5 * (s11 + s21);
        noi += 0.5 * (s12 + s22);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("attention_summary needs at least one trace"));
    }
    Ok((sig / n as f64, noi / n as f64))
}

pub trait AttentionMasses {
    /// `(s11, s12, s21, s22)`.
    fn masses(&self) -> (f64, f64, f64, f64);
}

impl AttentionMasses for ForwardTrace {
    fn masses(&self) -> (f64, f64, f64, f64) {
        (self.s11, self.s12, self.s21, self.s22)
    }
}

impl AttentionMasses for OutputSummary {
    fn masses(&self) -> (f64, f64, f64, f64) {
        (self.s11, self.s12, self.s21, self.s22)
    }
}

/// `(V₊, V₋, mean_i V_ξ,i)` with `V = ⟨W_V x, υ⟩`.
pub fn value_summary(params: &ModelParams, signals: &SignalPair, dataset: &Dataset) -> Result<(f64, f64, f64)> {
    params.check_shapes()?;
    if signals.dim() != params.d() {
        return Err(Error::shape("signal dimension", params.d(), signals.dim()));
    }
    let dir = params.value_direction();
    let v_xi = if dataset.is_empty() {
        0.0
    } else {
        dataset.points.iter().map(|p| dot(&p.x2, &dir)).sum::<f64>() / dataset.len() as f64
    };
    Ok((dot(&signals.mu_plus, &dir), dot(&signals.mu_minus, &dir), v_xi))
}
