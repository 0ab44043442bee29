//! Dense row-major matrices, seeded random streams and a central-difference
//! gradient oracle.
//!
//! Everything is `f64`. Softmax masses in the attention model become
//! exponentially small once the score margins grow, and single precision
//! underflows well before training finishes.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            for r in 0..self.rows {
                write!(f, "\n  {:?}", self.row(r))?;
            }
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul inner dimension",
                self.cols,
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::shape("tr_matvec", self.rows, v.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_scaled",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
///
/// Panics when shapes disagree; callers validate dimensions up front.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: the strides above describe exactly the m×k / k×n / m×n
    // views of the three owned buffers, whose lengths were checked by the
    // shape asserts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// An addressable random stream.
///
/// The generator is ChaCha8 keyed by `seed_from_u64(seed)` with the ChaCha
/// stream counter set to `stream_id`, so equal `(seed, stream_id)` pairs
/// replay the same sequence and different ids never overlap. Child streams
/// are addressed with [`RngStream::child`], whose id is
/// `mix(stream_id, tag)`:
///
/// ```text
/// mix(a, b) = splitmix64(splitmix64(a) ^ (b + 0x9E3779B97F4A7C15))
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn child(&self, tag: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream_id: mix(self.stream_id, tag),
        }
    }

    /// Child addressed by a string label (hashed with FNV-1a first).
    pub fn named(&self, label: &str) -> RngStream {
        self.child(fnv1a(label.as_bytes()))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Fills `out` with i.i.d. `N(0, sigma²)` draws.
pub fn fill_gaussian<R: rand::Rng + ?Sized>(rng: &mut R, sigma: f64, out: &mut [f64]) {
    for x in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x = sigma * z;
    }
}

/// `rows × cols` matrix of i.i.d. `N(0, sigma²)` entries drawn from the
/// start of `stream`.
pub fn gaussian_matrix(stream: &RngStream, rows: usize, cols: usize, sigma: f64) -> Result<Matrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    let mut m = Matrix::zeros(rows, cols);
    if sigma > 0.0 {
        fill_gaussian(&mut stream.rng(), sigma, m.as_mut_slice());
    }
    Ok(m)
}

/// Default central-difference step for unit-scale parameters.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `loss_fn` at `params`.
///
/// Entry `(i, j)` is `[L(P + h·E_ij) − L(P − h·E_ij)] / 2h`.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &Matrix, step: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::config("step", "must be positive"));
    }
    let mut probe = params.clone();
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    for i in 0..params.rows() {
        for j in 0..params.cols() {
            let orig = params.get(i, j);
            probe.set(i, j, orig + step);
            let up = loss_fn(&probe);
            probe.set(i, j, orig - step);
            let down = loss_fn(&probe);
            probe.set(i, j, orig);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss evaluation at perturbed entry ({i}, {j}): +h -> {up}, -h -> {down}"
                )));
            }
            grad.set(i, j, (up - down) / (2.0 * step));
        }
    }
    Ok(grad)
}

/// Relative Frobenius error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    let mut diff = a.clone();
    diff.add_scaled(-1.0, b).expect("relative_error shapes");
    diff.frobenius_norm() / a.frobenius_norm().max(b.frobenius_norm()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn zero_sigma_gives_zero_matrix() {
        let m = gaussian_matrix(&RngStream::new(1, 2), 5, 7, 0.0).unwrap();
        assert!(m.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(gaussian_matrix(&RngStream::new(1, 2), 2, 2, -1.0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let m = gaussian_matrix(&RngStream::new(42, 0), 1000, 1000, 1.0).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let s = RngStream::new(7, 3);
        let a = gaussian_matrix(&s, 4, 4, 1.0).unwrap();
        let b = gaussian_matrix(&s, 4, 4, 1.0).unwrap();
        assert_eq!(a, b);
        let c = gaussian_matrix(&RngStream::new(7, 4), 4, 4, 1.0).unwrap();
        assert_ne!(a, c);
        assert_ne!(s.child(0), s.child(1));
        assert_eq!(s.named("w_q"), s.named("w_q"));
    }

    #[test]
    fn independent_streams_are_uncorrelated() {
        let a = gaussian_matrix(&RngStream::new(9, 0), 1, 20000, 1.0).unwrap();
        let b = gaussian_matrix(&RngStream::new(9, 1), 1, 20000, 1.0).unwrap();
        let corr = dot(a.as_slice(), b.as_slice()) / 20000.0;
        // 5 standard errors of a sample correlation at n = 20000.
        assert!(corr.abs() < 5.0 / (20000f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let s = RngStream::new(3, 3);
        let a = gaussian_matrix(&s.child(0), 5, 3, 1.0).unwrap();
        let b = gaussian_matrix(&s.child(1), 5, 4, 1.0).unwrap();
        let mut c = Matrix::zeros(3, 4);
        gemm(1.0, &a, true, &b, false, 0.0, &mut c);
        let expect = naive_matmul(&a.transpose(), &b);
        assert!(c.max_abs_diff(&expect) < 1e-12);

        let mut d = Matrix::zeros(5, 5);
        gemm(2.0, &a, false, &a, true, 0.0, &mut d);
        let mut expect = naive_matmul(&a, &a.transpose());
        expect.scale(2.0);
        assert!(d.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        assert!(Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn fd_of_linear_and_quadratic() {
        let w = gaussian_matrix(&RngStream::new(5, 5), 3, 4, 1.0).unwrap();
        let g = finite_diff_grad(|m| m.as_slice().iter().sum(), &w, DEFAULT_FD_STEP).unwrap();
        assert!(g.as_slice().iter().all(|x| (x - 1.0).abs() < 1e-9));

        let g = finite_diff_grad(|m| 0.5 * dot(m.as_slice(), m.as_slice()), &w, DEFAULT_FD_STEP).unwrap();
        assert!(g.max_abs_diff(&w) < 1e-9);
    }

    #[test]
    fn fd_error_is_second_order_in_step() {
        // L = Σ w³, dL/dw = 3w², central-difference error = h²·w⁰ exactly.
        let w = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let cube = |m: &Matrix| m.as_slice().iter().map(|x| x.powi(3)).sum::<f64>();
        for &h in &[1e-2, 1e-3] {
            let g = finite_diff_grad(cube, &w, h).unwrap();
            for j in 0..3 {
                let exact = 3.0 * w.get(0, j).powi(2);
                assert!((g.get(0, j) - exact - h * h).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fd_reports_offending_entry() {
        let w = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let err = finite_diff_grad(|m| if m.get(0, 1) > 1.0 { f64::NAN } else { 0.0 }, &w, 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let s = RngStream::new(seed, 0);
            let a = gaussian_matrix(&s.child(0), n, k, 1.0).unwrap();
            let b = gaussian_matrix(&s.child(1), k, p, 1.0).unwrap();
            let c = gaussian_matrix(&s.child(2), p, q, 1.0).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-10);
            prop_assert!(left.max_abs_diff(&naive_matmul(&naive_matmul(&a, &b), &c)) < 1e-10);
        }
    }
}
