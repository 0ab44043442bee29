//! Logistic loss, exact full-batch gradients and the gradient-descent loop.
//!
//! [`analytic_gradients`] and [`gd_step`] work on dense parameter matrices
//! and serve as the reference implementation. [`train`] runs the same
//! iteration through [`span::SpanState`], which keeps every quantity in the
//! span of the training tokens; the two agree to rounding (see the
//! `span_matches_dense_steps` test).

mod audit;
mod record;
pub(crate) mod span;

pub use audit::{gradient_audit, gradient_errors, GradientAudit, AUDIT_D, AUDIT_M, AUDIT_N};
pub use record::{detect_stages, RecordRow, StageBoundaries, Termination, TrainingRecord, RECORD_COLUMNS, STAGE1_DROP, STAGE3_FACTOR};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluator::estimate_test;
use crate::model::{forward, init_params, softmax2, ModelConfig, ModelParams};
use crate::numerics::{axpy, dot, Matrix, RngStream};

use span::SpanState;

/// Loss value above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// `ℓ(z) = log(1 + e^{−z})`, evaluated without overflow.
pub fn logistic_loss(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `−ℓ'(z) = 1 / (1 + e^{z})`.
pub fn logistic_slope(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Mean logistic loss of `y_obs · f` over the training set.
pub fn train_loss(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("train_loss needs a nonempty dataset"));
    }
    let mut total = 0.0;
    for p in &dataset.points {
        total += logistic_loss(p.y_obs.value() * forward(params, p)?.f);
    }
    Ok(total / dataset.len() as f64)
}

/// Missing fields take the values of [`TrainConfig::default`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate η. Zero is accepted and leaves the parameters fixed.
    pub eta: f64,
    pub max_iters: usize,
    /// Stop once the training loss is at or below this value.
    pub target_loss: f64,
    pub train_upsilon: bool,
    pub record_every: usize,
    /// Fresh Monte-Carlo points for the test columns of each record row;
    /// 0 leaves those columns empty.
    pub record_test_mc: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 1.0,
            max_iters: 2000,
            target_loss: 0.01,
            train_upsilon: true,
            record_every: 1,
            record_test_mc: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be finite and >= 0"));
        }
        if !(self.target_loss > 0.0) {
            return Err(Error::config("target_loss", "must be > 0"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub upsilon: Vec<f64>,
}

/// Per-point partial derivatives of the loss with respect to the four
/// attention scores and the two value projections.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PointSensitivity {
    /// dL/d⟨qᵢ,kⱼ⟩ for (11, 12, 21, 22).
    pub d_scores: [f64; 4],
    /// dL/dV for the signal and noise tokens.
    pub d_values: [f64; 2],
}

/// Backward pass of one point given its scores and value projections.
/// `weight` is dL/df for the point.
#[inline]
pub(crate) fn point_sensitivity(scores: [f64; 4], v_sig: f64, v_noise: f64, weight: f64, m_v: usize) -> (PointSensitivity, f64) {
    let inv_mv = 1.0 / m_v as f64;
    let (s11, s12) = softmax2(scores[0], scores[1]);
    let (s21, s22) = softmax2(scores[2], scores[3]);
    let f = ((s11 + s21) * v_sig + (s12 + s22) * v_noise) * inv_mv;
    let gap = (v_sig - v_noise) * inv_mv * weight;
    let row1 = gap * s11 * s12;
    let row2 = gap * s21 * s22;
    let sens = PointSensitivity {
        d_scores: [row1, -row1, row2, -row2],
        d_values: [weight * (s11 + s21) * inv_mv, weight * (s12 + s22) * inv_mv],
    };
    (sens, f)
}

/// Exact gradients of [`train_loss`] by the chain rule through the value
/// path and the two row-wise softmaxes.
pub fn analytic_gradients(params: &ModelParams, dataset: &Dataset) -> Result<Gradients> {
    if dataset.is_empty() {
        return Err(Error::Empty("analytic_gradients needs a nonempty dataset"));
    }
    params.check_shapes()?;
    let (m_k, m_v, d) = (params.m_k(), params.m_v(), params.d());
    let n = dataset.len() as f64;
    let mut g = Gradients {
        w_q: Matrix::zeros(m_k, d),
        w_k: Matrix::zeros(m_k, d),
        w_v: Matrix::zeros(m_v, d),
        upsilon: vec![0.0; m_v],
    };
    for (i, p) in dataset.points.iter().enumerate() {
        let t = forward(params, p)?;
        let y = p.y_obs.value();
        let weight = -y * logistic_slope(y * t.f) / n;
        let scores = [dot(&t.q1, &t.k1), dot(&t.q1, &t.k2), dot(&t.q2, &t.k1), dot(&t.q2, &t.k2)];
        let (s, _) = point_sensitivity(scores, t.v_sig, t.v_noise, weight, m_v);
        let [d11, d12, d21, d22] = s.d_scores;
        // dL/dW_Q = Σ dᵢⱼ kⱼ xᵢᵀ, dL/dW_K = Σ dᵢⱼ qᵢ xⱼᵀ.
        for r in 0..m_k {
            let gq1 = d11 * t.k1[r] + d12 * t.k2[r];
            let gq2 = d21 * t.k1[r] + d22 * t.k2[r];
            let gk1 = d11 * t.q1[r] + d21 * t.q2[r];
            let gk2 = d12 * t.q1[r] + d22 * t.q2[r];
            let row = g.w_q.row_mut(r);
            axpy(gq1, &p.x1, row);
            axpy(gq2, &p.x2, row);
            let row = g.w_k.row_mut(r);
            axpy(gk1, &p.x1, row);
            axpy(gk2, &p.x2, row);
        }
        let [c1, c2] = s.d_values;
        for r in 0..m_v {
            let row = g.w_v.row_mut(r);
            axpy(c1 * params.upsilon[r], &p.x1, row);
            axpy(c2 * params.upsilon[r], &p.x2, row);
        }
        let wv1 = params.w_v.matvec(&p.x1)?;
        let wv2 = params.w_v.matvec(&p.x2)?;
        axpy(c1, &wv1, &mut g.upsilon);
        axpy(c2, &wv2, &mut g.upsilon);
        if !weight.is_finite() || !s.d_scores.iter().chain(&s.d_values).all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient contribution of sample {i}")));
        }
    }
    Ok(g)
}

/// One simultaneous GD update of all trained blocks, every gradient taken
/// at the current iterate.
pub fn gd_step(params: &ModelParams, dataset: &Dataset, config: &TrainConfig) -> Result<ModelParams> {
    config.validate()?;
    let g = analytic_gradients(params, dataset)?;
    let mut next = params.clone();
    next.w_q.add_scaled(-config.eta, &g.w_q)?;
    next.w_k.add_scaled(-config.eta, &g.w_k)?;
    next.w_v.add_scaled(-config.eta, &g.w_v)?;
    if config.train_upsilon {
        axpy(-config.eta, &g.upsilon, &mut next.upsilon);
    }
    if !next.is_finite() {
        return Err(Error::NonFinite("parameters after gd_step".into()));
    }
    Ok(next)
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub record: TrainingRecord,
    pub initial: ModelParams,
    pub params: ModelParams,
}

/// Full-batch GD from a fresh initialization until the training loss
/// reaches `target_loss` or `max_iters` steps have been taken.
///
/// `rng` seeds the initialization (child `"init"`) and the Monte-Carlo test
/// points used in record rows (child `"test"`).
pub fn train(dataset: &Dataset, model_config: &ModelConfig, train_config: &TrainConfig, rng: &RngStream) -> Result<TrainRun> {
    model_config.validate()?;
    if model_config.d != dataset.dim() {
        return Err(Error::shape("model d vs data d", dataset.dim(), model_config.d));
    }
    let initial = init_params(model_config, &rng.named("init"))?;
    train_from(dataset, initial, train_config, rng)
}

/// Like [`train`] but starting from given parameters.
pub fn train_from(dataset: &Dataset, initial: ModelParams, config: &TrainConfig, rng: &RngStream) -> Result<TrainRun> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("train needs a nonempty dataset"));
    }
    let test_stream = rng.named("test");
    let mut state = SpanState::new(dataset, &initial)?;
    let mut record = TrainingRecord::new(config.target_loss);
    let mut eval = state.evaluate();
    let mut iter = 0usize;
    let mut prev_loss = f64::INFINITY;
    loop {
        if !eval.loss.is_finite() || eval.loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence {
                iteration: iter,
                loss: eval.loss,
                last_good: Box::new(record),
            });
        }
        if eval.loss > prev_loss + 1e-6 {
            log::warn!("train loss rose from {prev_loss} to {} at iteration {iter}", eval.loss);
        }
        prev_loss = eval.loss;
        let converged = eval.loss <= config.target_loss;
        let last = converged || iter >= config.max_iters;
        if iter % config.record_every == 0 || last {
            let mut row = state.record_row(iter, &eval);
            if config.record_test_mc > 0 {
                let params = state.materialize();
                let est = estimate_test(&params, &dataset.config, &dataset.signals, config.record_test_mc, &test_stream)?;
                row.test_loss = Some(est.loss);
                row.test_error01 = Some(est.error01);
            }
            record.rows.push(row);
        }
        if last {
            record.termination = Some(if converged { Termination::Converged } else { Termination::IterationCap });
            record.iterations = iter;
            break;
        }
        state.step(&eval, config.eta, config.train_upsilon);
        iter += 1;
        eval = state.evaluate();
    }
    let params = state.materialize();
    if !params.is_finite() {
        return Err(Error::NonFinite(format!("parameters after {iter} iterations")));
    }
    let stages = detect_stages(&record).unwrap_or_default();
    record.stages = stages;
    Ok(TrainRun { record, initial, params })
}
