//! Truncated SVD and how far learned residuals sit from it.


use super::eigen::jacobi_eigen;
use crate::config::Mechanism;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Scalar};
use crate::weights::{KvPath, KvWeights, LowRankProjection, WeightSet};

/// Best rank-`r` approximation `left · rightᵀ` of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// `rows × r`, equal to `U_r · diag(σ_1..σ_r)`.
    pub left: Matrix<f64>,
    /// `cols × r` with orthonormal columns.
    pub right: Matrix<f64>,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
    /// `‖W − left·rightᵀ‖_F`.
    pub residual_error: f64,
}

impl TruncatedSvd {
    pub fn product(&self) -> Matrix<f64> {
        self.left.matmul_t(&self.right)
    }
}

/// Rank-`r` truncated SVD of `w` through the eigendecomposition of `wᵀw`.
pub fn svd_truncate(w: &Matrix<f64>, r: usize) -> Result<TruncatedSvd> {
    let (rows, cols) = w.shape();
    if r > rows.min(cols) {
        return Err(Error::Parameter(format!(
            "rank {r} exceeds min(rows, cols) = {} for a {rows}×{cols} matrix",
            rows.min(cols)
        )));
    }
    let eig = jacobi_eigen(&w.t_matmul(w))?;
    let right = eig.vectors.columns(0, r);
    let left = w.matmul(&right);
    let residual_error = w.sub(&left.matmul_t(&right)).frobenius_norm();
    Ok(TruncatedSvd {
        left,
        right,
        singular_values: eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect(),
        residual_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub head: usize,
    pub path: KvPath,
    pub rank: usize,
    /// `‖W_ref − (W_shared + U·Bᵀ)‖_F`
    pub e_learned: f64,
    /// Optimal error of any rank-`r` residual on top of `W_shared`.
    pub e_opt: f64,
    /// `e_learned / e_opt`; 1 when both vanish.
    pub ratio: f64,
}

/// Compares each head's learned residual against the truncated SVD of
/// `W_ref − W_shared`. `reference` must be MHA with matching dimensions.
/// The optimum is taken at `rank`, or at the residual's own rank if `None`;
/// only in the latter case is `ratio ≥ 1` guaranteed.
pub fn factorization_gap<T: Scalar>(
    w: &WeightSet<T>,
    reference: &WeightSet<T>,
    rank: Option<usize>,
) -> Result<Vec<GapRow>> {
    let (targets_k, targets_v) = reference_targets(w, reference)?;
    let mut rows = Vec::new();
    for path in KvPath::BOTH {
        let proj = w.low_rank_path(path).expect("checked by reference_targets");
        let targets = match path {
            KvPath::Key => &targets_k,
            KvPath::Value => &targets_v,
        };
        let shared: Matrix<f64> = proj.shared.cast();
        for (head, target) in targets.iter().enumerate() {
            let learned: Matrix<f64> = proj.effective(head).cast();
            let e_learned = target.sub(&learned).frobenius_norm();
            let r = rank.unwrap_or(proj.u[head].cols());
            let e_opt = svd_truncate(&target.sub(&shared), r)?.residual_error;
            let ratio = if e_opt > 0.0 {
                e_learned / e_opt
            } else if e_learned == 0.0 {
                1.0
            } else {
                f64::INFINITY
            };
            rows.push(GapRow {
                head,
                path,
                rank: r,
                e_learned,
                e_opt,
                ratio,
            });
        }
    }
    Ok(rows)
}

type Targets = (Vec<Matrix<f64>>, Vec<Matrix<f64>>);

fn reference_targets<T: Scalar>(w: &WeightSet<T>, reference: &WeightSet<T>) -> Result<Targets> {
    let (a, b) = (w.config(), reference.config());
    if a.mechanism != Mechanism::Lrkv {
        return Err(Error::UnsupportedMechanism {
            op: "factorization_gap",
            mechanism: a.mechanism,
        });
    }
    if b.mechanism != Mechanism::Mha || (a.d, a.n_heads, a.d_h) != (b.d, b.n_heads, b.d_h) {
        return Err(Error::Parameter(format!(
            "reference must be MHA with d={}, H={}, d_h={}; got {} with d={}, H={}, d_h={}",
            a.d, a.n_heads, a.d_h, b.mechanism, b.d, b.n_heads, b.d_h
        )));
    }
    let KvWeights::PerHead { wk, wv } = &reference.kv else {
        unreachable!("MHA weights are per head")
    };
    Ok((wk.iter().map(Matrix::cast).collect(), wv.iter().map(Matrix::cast).collect()))
}

/// LRKV weights whose residuals are the rank-`r` truncated SVD of
/// `W_ref − W_shared` per head. Queries are copied from `reference`.
pub fn lrkv_from_reference(
    reference: &WeightSet<f64>,
    k_shared: Matrix<f64>,
    v_shared: Matrix<f64>,
    r: usize,
) -> Result<WeightSet<f64>> {
    let c = reference.config();
    if c.mechanism != Mechanism::Mha {
        return Err(Error::UnsupportedMechanism {
            op: "lrkv_from_reference",
            mechanism: c.mechanism,
        });
    }
    let KvWeights::PerHead { wk, wv } = &reference.kv else {
        unreachable!("MHA weights are per head")
    };
    let fit = |targets: &[Matrix<f64>], shared: Matrix<f64>| -> Result<LowRankProjection<f64>> {
        let mut u = Vec::with_capacity(targets.len());
        let mut b = Vec::with_capacity(targets.len());
        for t in targets {
            if t.shape() != shared.shape() {
                return Err(Error::Dimension(format!(
                    "shared base is {:?}, reference heads are {:?}",
                    shared.shape(),
                    t.shape()
                )));
            }
            let svd = svd_truncate(&t.sub(&shared), r)?;
            u.push(svd.left);
            b.push(svd.right);
        }
        Ok(LowRankProjection { shared, u, b })
    };
    let k = fit(wk, k_shared)?;
    let v = fit(wv, v_shared)?;
    let config = c.clone().with_mechanism(Mechanism::Lrkv).with_rank(r);
    WeightSet::from_parts(config, reference.wq.clone(), KvWeights::LowRank { k, v })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeRow {
    pub head: usize,
    pub path: KvPath,
    pub shared_norm: f64,
    pub residual_norm: f64,
    pub total_norm: f64,
    /// Frobenius cosine between shared and residual; 0 if either vanishes.
    pub cosine: f64,
}

/// Norms of the shared, residual and combined projections per head.
pub fn magnitude_report<T: Scalar>(w: &WeightSet<T>) -> Result<Vec<MagnitudeRow>> {
    if w.low_rank().is_none() {
        return Err(Error::UnsupportedMechanism {
            op: "magnitude_report",
            mechanism: w.mechanism(),
        });
    }
    let mut rows = Vec::new();
    for path in KvPath::BOTH {
        let p = w.low_rank_path(path).expect("checked above");
        let shared: Matrix<f64> = p.shared.cast();
        let shared_norm = shared.frobenius_norm();
        for head in 0..p.u.len() {
            let residual: Matrix<f64> = p.residual(head).cast();
            let residual_norm = residual.frobenius_norm();
            let denom = shared_norm * residual_norm;
            rows.push(MagnitudeRow {
                head,
                path,
                shared_norm,
                residual_norm,
                total_norm: shared.add(&residual).frobenius_norm(),
                cosine: if denom > 0.0 {
                    (shared.frobenius_inner(&residual) / denom).clamp(-1.0, 1.0)
                } else {
                    0.0
                },
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AttentionConfig;
    use crate::rng::RngSpec;
    use crate::weights::init_weights;

    #[test]
    fn full_and_zero_rank() {
        let w: Matrix<f64> = RngSpec::new(3).generator(0).matrix(8, 4, 1.0);
        let norm = w.frobenius_norm();
        assert!(svd_truncate(&w, 4).unwrap().residual_error <= 1e-9 * norm);
        assert_eq!(svd_truncate(&w, 0).unwrap().residual_error, norm);
        assert!(matches!(svd_truncate(&w, 5), Err(Error::Parameter(_))));
    }

    #[test]
    fn residual_matches_singular_tail() {
        let w: Matrix<f64> = RngSpec::new(4).generator(0).matrix(9, 5, 1.0);
        let s = svd_truncate(&w, 2).unwrap();
        let tail: f64 = s.singular_values[2..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((s.residual_error - tail).abs() < 1e-10);
        let rtr = s.right.t_matmul(&s.right);
        assert!(rtr.max_abs_diff(&Matrix::identity(2)) < 1e-12);
    }

    #[test]
    fn gap_of_svd_residuals_is_one() {
        let c = AttentionConfig::new(Mechanism::Mha, 3, 4);
        let reference = init_weights::<f64>(&c, RngSpec::new(1)).unwrap();
        let mut g = RngSpec::new(2).generator(0);
        let w = lrkv_from_reference(&reference, g.matrix(12, 4, 0.3), g.matrix(12, 4, 0.3), 2).unwrap();
        for row in factorization_gap(&w, &reference, None).unwrap() {
            assert!((row.ratio - 1.0).abs() < 1e-9, "{row:?}");
        }
    }

    #[test]
    fn gap_rejects_mismatch() {
        let lr = init_weights::<f64>(&AttentionConfig::new(Mechanism::Lrkv, 3, 4).with_rank(1), RngSpec::new(1)).unwrap();
        let mha = init_weights::<f64>(&AttentionConfig::new(Mechanism::Mha, 2, 4), RngSpec::new(1)).unwrap();
        assert!(matches!(factorization_gap(&lr, &mha, None), Err(Error::Parameter(_))));
        assert!(matches!(factorization_gap(&mha, &mha, None), Err(Error::UnsupportedMechanism { .. })));
    }

    #[test]
    fn magnitude_at_init() {
        let c = AttentionConfig::new(Mechanism::Lrkv, 4, 8).with_rank(3);
        let w = init_weights::<f64>(&c, RngSpec::new(9)).unwrap();
        let rows = magnitude_report(&w).unwrap();
        assert_eq!(rows.len(), 8);
        for r in rows {
            assert!((r.residual_norm / r.shared_norm - 0.1).abs() < 1e-6);
            assert!(r.total_norm <= r.shared_norm + r.residual_norm);
        }
        let mha = init_weights::<f64>(&c.with_mechanism(Mechanism::Mha), RngSpec::new(9)).unwrap();
        assert!(magnitude_report(&mha).is_err());
    }
}
