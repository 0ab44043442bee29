use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_dataset, DataConfig};
use crate::error::Result;
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::numerics::{finite_diff_grad, relative_error, Matrix, RngStream, DEFAULT_FD_STEP};

use super::{analytic_gradients, train_loss};

/// Worst relative Frobenius error per block over a batch of random
/// instances, analytic against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientAudit {
    pub instances: usize,
    pub w_q: f64,
    pub w_k: f64,
    pub w_v: f64,
    pub upsilon: f64,
}

impl GradientAudit {
    pub fn max_error(&self) -> f64 {
        self.w_q.max(self.w_k).max(self.w_v).max(self.upsilon)
    }
}

/// Instance size of the audit: `d = 8`, `m_k = m_v = 4`, `N = 4`.
pub const AUDIT_D: usize = 8;
pub const AUDIT_M: usize = 4;
pub const AUDIT_N: usize = 4;

/// Relative errors of the four gradient blocks at one parameter point.
pub fn gradient_errors(params: &ModelParams, dataset: &crate::data::Dataset) -> Result<[f64; 4]> {
    let g = analytic_gradients(params, dataset)?;
    let floor = 1e-12;
    let loss_at = |p: ModelParams| train_loss(&p, dataset).unwrap_or(f64::NAN);
    let q = finite_diff_grad(|w| loss_at(ModelParams { w_q: w.clone(), ..params.clone() }), &params.w_q, DEFAULT_FD_STEP)?;
    let k = finite_diff_grad(|w| loss_at(ModelParams { w_k: w.clone(), ..params.clone() }), &params.w_k, DEFAULT_FD_STEP)?;
    let v = finite_diff_grad(|w| loss_at(ModelParams { w_v: w.clone(), ..params.clone() }), &params.w_v, DEFAULT_FD_STEP)?;
    let ups = Matrix::from_vec(1, params.upsilon.len(), params.upsilon.clone())?;
    let u = finite_diff_grad(|w| loss_at(ModelParams { upsilon: w.as_slice().to_vec(), ..params.clone() }), &ups, DEFAULT_FD_STEP)?;
    let gu = Matrix::from_vec(1, g.upsilon.len(), g.upsilon)?;
    Ok([
        relative_error(&g.w_q, &q, floor),
        relative_error(&g.w_k, &k, floor),
        relative_error(&g.w_v, &v, floor),
        relative_error(&gu, &u, floor),
    ])
}

/// Runs the finite-difference audit on `instances` random small problems.
/// Each instance draws its own scales so that attention ranges from nearly
/// uniform to strongly peaked and labels include flips.
pub fn gradient_audit(instances: usize, seed: u64) -> Result<GradientAudit> {
    let root = RngStream::new(seed, 0).named("gradcheck");
    let mut out = GradientAudit { instances, w_q: 0.0, w_k: 0.0, w_v: 0.0, upsilon: 0.0 };
    for i in 0..instances {
        let s = root.child(i as u64);
        let mut r = s.named("scales").rng();
        let dc = DataConfig {
            d: AUDIT_D,
            mu_norm: r.random_range(0.5..3.0),
            sigma_p: r.random_range(0.2..1.5),
            alpha: r.random_range(0.0..0.45),
            n: AUDIT_N,
        };
        let mc = ModelConfig {
            d: AUDIT_D,
            m_k: AUDIT_M,
            m_v: AUDIT_M,
            sigma_k: r.random_range(0.1..1.0),
            sigma_v: r.random_range(0.1..2.0),
            upsilon_norm: r.random_range(0.5..2.0),
        };
        let ds = sample_dataset(&dc, &s.named("data"))?;
        let p = init_params(&mc, &s.named("init"))?;
        let e = gradient_errors(&p, &ds)?;
        out.w_q = out.w_q.max(e[0]);
        out.w_k = out.w_k.max(e[1]);
        out.w_v = out.w_v.max(e[2]);
        out.upsilon = out.upsilon.max(e[3]);
    }
    Ok(out)
}
