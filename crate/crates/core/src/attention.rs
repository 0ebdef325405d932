//! Training-path attention: full per-head K/V materialization, causal
//! softmax, and analytic gradients of the low-rank key/value projection.

use crate::config::Mechanism;
use crate::error::{Error, Result};
use crate::linalg::{dot, softmax, Matrix, Scalar};
use crate::weights::{KvPath, WeightSet};

/// Epsilon inside the RMSNorm square root.
pub const RMS_EPS: f64 = 1e-6;

/// `x / √(mean(x²) + ε)`, no learned gain.
pub fn rms_norm<T: Scalar>(x: &[T]) -> Vec<T> {
    if x.is_empty() {
        return Vec::new();
    }
    let ms = x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|&v| T::from_f64(v.as_f64() * inv)).collect()
}

pub(crate) fn rms_norm_rows<T: Scalar>(m: &mut Matrix<T>) {
    for i in 0..m.rows() {
        let normed = rms_norm(m.row(i));
        m.row_mut(i).copy_from_slice(&normed);
    }
}

/// Causal attention weights of one query row over the first `len` rows of `k`.
pub(crate) fn causal_scores<T: Scalar>(q: &[T], k: &Matrix<T>, len: usize, scale: T) -> Vec<T> {
    (0..len).map(|j| dot(q, k.row(j)) * scale).collect()
}

/// Full causal multi-head attention over `x` (`T × d`).
///
/// Returns `T × (H·d_h)` with head outputs concatenated head-major. Every
/// mechanism goes through its effective per-head weights, so this is also
/// the reference the decode paths are checked against.
pub fn forward_attention<T: Scalar>(w: &WeightSet<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let c = w.config();
    if x.cols() != c.d {
        return Err(Error::Dimension(format!("input has {} columns, expected d={}", x.cols(), c.d)));
    }
    if x.rows() == 0 {
        return Err(Error::Dimension("forward_attention needs at least one token".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("attention input"));
    }
    let t = x.rows();
    let scale = T::from_f64(c.scale());
    let mut out = Matrix::zeros(t, c.n_heads * c.d_h);
    for h in 0..c.n_heads {
        let (wk, wv) = w.effective_kv(h)?;
        let mut q = x.matmul(&w.wq[h]);
        let mut k = x.matmul(&wk);
        let v = x.matmul(&wv);
        if c.qk_norm {
            rms_norm_rows(&mut q);
            rms_norm_rows(&mut k);
        }
        for i in 0..t {
            let weights = softmax(&causal_scores(q.row(i), &k, i + 1, scale));
            let dst = &mut out.row_mut(i)[h * c.d_h..(h + 1) * c.d_h];
            for (j, &a) in weights.iter().enumerate() {
                for (o, &vj) in dst.iter_mut().zip(v.row(j)) {
                    *o = *o + a * vj;
                }
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("attention output"));
    }
    Ok(out)
}

/// Gradients of a low-rank projection `K = X·(W_shared + U·Bᵀ)` for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrad<T> {
    /// `d × d_h`; this head's share of the shared-base gradient.
    pub d_shared: Matrix<T>,
    /// `d × r`
    pub d_u: Matrix<T>,
    /// `d_h × r`
    pub d_b: Matrix<T>,
}

/// Backpropagates `upstream = ∂L/∂K_head` (`T × d_h`) through the LRKV
/// projection of `head` on `path`.
///
/// `∂W_shared = Xᵀ·G`, `∂U = Xᵀ·G·B`, `∂B = Gᵀ·X·U`. The shared gradient of
/// a whole layer is the sum of the per-head values returned here.
pub fn projection_backward<T: Scalar>(
    w: &WeightSet<T>,
    x: &Matrix<T>,
    upstream: &Matrix<T>,
    head: usize,
    path: KvPath,
) -> Result<ProjectionGrad<T>> {
    let c = w.config();
    let proj = w.low_rank_path(path).ok_or(Error::UnsupportedMechanism {
        op: "projection_backward",
        mechanism: c.mechanism,
    })?;
    c.check_head(head)?;
    if x.cols() != c.d || upstream.cols() != c.d_h || x.rows() != upstream.rows() {
        return Err(Error::Dimension(format!(
            "X is {:?} and upstream is {:?}; expected (T, {}) and (T, {})",
            x.shape(),
            upstream.shape(),
            c.d,
            c.d_h
        )));
    }
    debug_assert_eq!(c.mechanism, Mechanism::Lrkv);
    let d_shared = x.t_matmul(upstream);
    let d_u = d_shared.matmul(&proj.b[head]);
    let d_b = upstream.t_matmul(&x.matmul(&proj.u[head]));
    Ok(ProjectionGrad { d_shared, d_u, d_b })
}
