//! Gradient descent carried out in the span of the training tokens.
//!
//! Every gradient of the loss is a sum of outer products `u ⊗ t` with `t`
//! one of the `N + 2` distinct tokens `[μ₊, μ₋, ξ₁, …, ξ_N]`. So it is
//! enough to track the projections `W t` of each token (rows of `q`, `k`,
//! `p`), updated through the token Gram matrix, plus the accumulated
//! coefficients needed to rebuild the dense weights at the end. A step then
//! costs `O(m·(N+2)²)` instead of `O(m·d·N)`.

use crate::data::Dataset;
use crate::error::Result;
use crate::model::{class_index, ModelParams};
use crate::numerics::{axpy, dot, gemm, Matrix};

use super::{logistic_loss, logistic_slope, point_sensitivity, RecordRow};

pub(crate) struct SpanState {
    initial: ModelParams,
    tokens: Matrix,
    gram: Matrix,
    /// `(class token, noise token)` row indices per sample.
    pairs: Vec<(usize, usize)>,
    y_obs: Vec<f64>,
    q: Matrix,
    k: Matrix,
    p: Matrix,
    p0: Matrix,
    upsilon: Vec<f64>,
    coef_q: Matrix,
    coef_k: Matrix,
    coef_v: Matrix,
    // Scratch buffers reused across steps.
    dq: Matrix,
    dk: Matrix,
    scratch: Matrix,
}

/// Per-sample forward quantities at the current iterate.
pub(crate) struct SpanEval {
    pub loss: f64,
    /// `(s11, s12, s21, s22)` per sample.
    pub masses: Vec<[f64; 4]>,
    /// Raw scores `(a11, a12, a21, a22)` per sample.
    pub scores: Vec<[f64; 4]>,
    pub values: Vec<(f64, f64)>,
    pub f: Vec<f64>,
}

impl SpanState {
    pub fn new(dataset: &Dataset, initial: &ModelParams) -> Result<Self> {
        initial.check_shapes()?;
        let d = initial.d();
        if dataset.dim() != d {
            return Err(crate::error::Error::shape("dataset d vs params d", d, dataset.dim()));
        }
        let n = dataset.len();
        let n_tok = n + 2;
        let mut tokens = Matrix::zeros(n_tok, d);
        tokens.row_mut(0).copy_from_slice(&dataset.signals.mu_plus);
        tokens.row_mut(1).copy_from_slice(&dataset.signals.mu_minus);
        let mut pairs = Vec::with_capacity(n);
        let mut y_obs = Vec::with_capacity(n);
        for (i, pt) in dataset.points.iter().enumerate() {
            // x1 is the class signal of the true label; keep that as the
            // token even if a custom dataset carries something else.
            let a = if pt.x1 == dataset.signals.mu_plus {
                0
            } else if pt.x1 == dataset.signals.mu_minus {
                1
            } else {
                class_index(pt.y_true)
            };
            if pt.x1 != tokens.row(a) {
                return Err(crate::error::Error::shape(
                    "signal token of sample",
                    "one of the signal pair",
                    format!("sample {i}"),
                ));
            }
            tokens.row_mut(2 + i).copy_from_slice(&pt.x2);
            pairs.push((a, 2 + i));
            y_obs.push(pt.y_obs.value());
        }
        let mut gram = Matrix::zeros(n_tok, n_tok);
        gemm(1.0, &tokens, false, &tokens, true, 0.0, &mut gram);
        let project = |w: &Matrix| {
            let mut out = Matrix::zeros(n_tok, w.rows());
            gemm(1.0, &tokens, false, w, true, 0.0, &mut out);
            out
        };
        let q = project(&initial.w_q);
        let k = project(&initial.w_k);
        let p = project(&initial.w_v);
        let (m_k, m_v) = (initial.m_k(), initial.m_v());
        Ok(SpanState {
            initial: initial.clone(),
            p0: p.clone(),
            tokens,
            gram,
            pairs,
            y_obs,
            q,
            k,
            p,
            upsilon: initial.upsilon.clone(),
            coef_q: Matrix::zeros(n_tok, m_k),
            coef_k: Matrix::zeros(n_tok, m_k),
            coef_v: Matrix::zeros(n_tok, m_v),
            dq: Matrix::zeros(n_tok, m_k),
            dk: Matrix::zeros(n_tok, m_k),
            scratch: Matrix::zeros(n_tok, m_k),
        })
    }

    pub fn evaluate(&self) -> SpanEval {
        let n = self.pairs.len();
        let inv_mv = 1.0 / self.p.cols() as f64;
        let tv: Vec<f64> = (0..self.p.rows()).map(|j| dot(self.p.row(j), &self.upsilon)).collect();
        let mut ev = SpanEval {
            loss: 0.0,
            masses: Vec::with_capacity(n),
            scores: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            f: Vec::with_capacity(n),
        };
        for (i, &(a, b)) in self.pairs.iter().enumerate() {
            let (qa, qb, ka, kb) = (self.q.row(a), self.q.row(b), self.k.row(a), self.k.row(b));
            let sc = [dot(qa, ka), dot(qa, kb), dot(qb, ka), dot(qb, kb)];
            let (s11, s12) = crate::model::softmax2(sc[0], sc[1]);
            let (s21, s22) = crate::model::softmax2(sc[2], sc[3]);
            let (v1, v2) = (tv[a], tv[b]);
            let f = ((s11 + s21) * v1 + (s12 + s22) * v2) * inv_mv;
            ev.loss += logistic_loss(self.y_obs[i] * f);
            ev.masses.push([s11, s12, s21, s22]);
            ev.scores.push(sc);
            ev.values.push((v1, v2));
            ev.f.push(f);
        }
        ev.loss /= n as f64;
        ev
    }

    /// One simultaneous GD step from the iterate described by `ev`.
    pub fn step(&mut self, ev: &SpanEval, eta: f64, train_upsilon: bool) {
        let n = self.pairs.len();
        let m_v = self.p.cols();
        let n_tok = self.tokens.rows();
        self.dq.as_mut_slice().fill(0.0);
        self.dk.as_mut_slice().fill(0.0);
        let mut cvec = vec![0.0; n_tok];
        for (i, &(a, b)) in self.pairs.iter().enumerate() {
            let y = self.y_obs[i];
            let weight = -y * logistic_slope(y * ev.f[i]) / n as f64;
            let (v1, v2) = ev.values[i];
            let (s, _) = point_sensitivity(ev.scores[i], v1, v2, weight, m_v);
            let [d11, d12, d21, d22] = s.d_scores;
            // Rows a and b may coincide only for distinct samples, never
            // within one sample, so reading k/q rows while writing dq/dk is fine.
            {
                let (ka, kb) = (self.k.row(a), self.k.row(b));
                axpy(d11, ka, self.dq.row_mut(a));
                axpy(d12, kb, self.dq.row_mut(a));
                axpy(d21, ka, self.dq.row_mut(b));
                axpy(d22, kb, self.dq.row_mut(b));
            }
            {
                let (qa, qb) = (self.q.row(a), self.q.row(b));
                axpy(d11, qa, self.dk.row_mut(a));
                axpy(d21, qb, self.dk.row_mut(a));
                axpy(d12, qa, self.dk.row_mut(b));
                axpy(d22, qb, self.dk.row_mut(b));
            }
            cvec[a] += s.d_values[0];
            cvec[b] += s.d_values[1];
        }

        // υ gradient uses the old P, P update uses the old υ.
        let g_ups = self.p.tr_matvec(&cvec).expect("cvec has one entry per token");
        let gc = self.gram.matvec(&cvec).expect("gram is square over tokens");
        for j in 0..n_tok {
            axpy(-eta * gc[j], &self.upsilon, self.p.row_mut(j));
            axpy(-eta * cvec[j], &self.upsilon, self.coef_v.row_mut(j));
        }
        if train_upsilon {
            axpy(-eta, &g_ups, &mut self.upsilon);
        }

        gemm(1.0, &self.gram, false, &self.dq, false, 0.0, &mut self.scratch);
        self.q.add_scaled(-eta, &self.scratch).expect("same shape");
        gemm(1.0, &self.gram, false, &self.dk, false, 0.0, &mut self.scratch);
        self.k.add_scaled(-eta, &self.scratch).expect("same shape");
        self.coef_q.add_scaled(-eta, &self.dq).expect("same shape");
        self.coef_k.add_scaled(-eta, &self.dk).expect("same shape");
    }

    /// Rebuilds dense parameters: `W = W₀ + coefᵀ T`.
    pub fn materialize(&self) -> ModelParams {
        let mut out = self.initial.clone();
        gemm(1.0, &self.coef_q, true, &self.tokens, false, 1.0, &mut out.w_q);
        gemm(1.0, &self.coef_k, true, &self.tokens, false, 1.0, &mut out.w_k);
        gemm(1.0, &self.coef_v, true, &self.tokens, false, 1.0, &mut out.w_v);
        out.upsilon = self.upsilon.clone();
        out
    }

    pub fn record_row(&self, iteration: usize, ev: &SpanEval) -> RecordRow {
        let n = self.pairs.len() as f64;
        let (mut sig, mut noi) = (0.0, 0.0);
        for m in &ev.masses {
            sig += 0.5 * (m[0] + m[2]);
            noi += 0.5 * (m[1] + m[3]);
        }
        let u2 = dot(&self.upsilon, &self.upsilon);
        let proj = |j: usize| dot(self.p.row(j), &self.upsilon);
        let drift = |j: usize| {
            let d: f64 = self.p.row(j).iter().zip(self.p0.row(j)).zip(&self.upsilon).map(|((a, b), u)| (a - b) * u).sum();
            d / u2
        };
        let n_tok = self.tokens.rows();
        RecordRow {
            iteration,
            train_loss: ev.loss,
            test_loss: None,
            test_error01: None,
            atten_signal: sig / n,
            atten_noise: noi / n,
            v_plus: proj(0),
            v_minus: proj(1),
            v_xi_mean: (2..n_tok).map(proj).sum::<f64>() / n,
            rho_plus: drift(0),
            rho_minus: drift(1),
            rho_xi_mean: (2..n_tok).map(drift).sum::<f64>() / n,
        }
    }
}
