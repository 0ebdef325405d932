//! Per-head bilinear forms and their Frobenius Gram matrix.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Scalar};
use crate::weights::WeightSet;

/// The forms `A_h = Q_h·K_hᵀ` (`d × d`), kept in factored form.
///
/// Only the `d × d_h` factors are stored; [`BilinearFormSet::form`]
/// materializes a single form on request.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearFormSet {
    queries: Vec<Matrix<f64>>,
    keys: Vec<Matrix<f64>>,
}

impl BilinearFormSet {
    /// Builds forms from per-head query and key projections of equal shape.
    pub fn from_factors(queries: Vec<Matrix<f64>>, keys: Vec<Matrix<f64>>) -> Result<Self> {
        if queries.is_empty() || queries.len() != keys.len() {
            return Err(Error::Dimension(format!(
                "need one key factor per query factor and at least one head, got {} and {}",
                queries.len(),
                keys.len()
            )));
        }
        let shape = queries[0].shape();
        if queries.iter().chain(&keys).any(|m| m.shape() != shape) {
            return Err(Error::Dimension("query and key factors must all share one shape".into()));
        }
        if !queries.iter().chain(&keys).all(Matrix::is_finite) {
            return Err(Error::NonFinite("bilinear form factors"));
        }
        Ok(BilinearFormSet { queries, keys })
    }

    pub fn n_heads(&self) -> usize {
        self.queries.len()
    }

    /// Model width `d`; forms are `d × d`.
    pub fn dim(&self) -> usize {
        self.queries[0].rows()
    }

    pub fn query(&self, head: usize) -> &Matrix<f64> {
        &self.queries[head]
    }

    pub fn key(&self, head: usize) -> &Matrix<f64> {
        &self.keys[head]
    }

    /// Materialized `A_h`.
    pub fn form(&self, head: usize) -> Matrix<f64> {
        self.queries[head].matmul_t(&self.keys[head])
    }
}

/// Forms of every head, using effective key weights.
pub fn bilinear_forms<T: Scalar>(w: &WeightSet<T>) -> Result<BilinearFormSet> {
    let h = w.config().n_heads;
    let mut keys = Vec::with_capacity(h);
    for head in 0..h {
        keys.push(w.effective_kv(head)?.0.cast());
    }
    BilinearFormSet::from_factors(w.wq.iter().map(Matrix::cast).collect(), keys)
}

/// Symmetric `H × H` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: Matrix<f64>,
    /// Entries are cosines `⟨A_i,A_j⟩ / (‖A_i‖‖A_j‖)`.
    pub normalized: bool,
    pub centered: bool,
    scale: f64,
}

impl GramMatrix {
    /// Wraps an arbitrary symmetric matrix.
    pub fn new(values: Matrix<f64>, normalized: bool, centered: bool) -> Result<Self> {
        let n = values.rows();
        if values.cols() != n {
            return Err(Error::Dimension(format!("Gram matrix must be square, got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("Gram matrix"));
        }
        let scale = values.frobenius_norm();
        for i in 0..n {
            for j in 0..i {
                if (values[(i, j)] - values[(j, i)]).abs() > 1e-12 * scale.max(1.0) {
                    return Err(Error::Parameter(format!("Gram matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(GramMatrix {
            values,
            normalized,
            centered,
            scale,
        })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    /// Frobenius norm of the matrix before any centering; sets the
    /// round-off floor for its spectrum.
    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Raw inner products `⟨A_i, A_j⟩_F` for all pairs.
///
/// Evaluated as `⟨Q_iᵀQ_j, K_iᵀK_j⟩_F`, which equals
/// `tr(K_iᵀK_j Q_jᵀQ_i)` and only forms `d_h × d_h` products.
fn raw_gram(forms: &BilinearFormSet) -> Matrix<f64> {
    let h = forms.n_heads();
    let mut g = Matrix::zeros(h, h);
    for i in 0..h {
        for j in i..h {
            let qq = forms.queries[i].t_matmul(&forms.queries[j]);
            let kk = forms.keys[i].t_matmul(&forms.keys[j]);
            let v = qq.frobenius_inner(&kk);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Cosine-normalizes `raw` in place. Heads with a zero-norm form get a zero
/// row and column; their indices are returned.
fn normalize(raw: &mut Matrix<f64>) -> Vec<usize> {
    let h = raw.rows();
    let norms: Vec<f64> = (0..h).map(|i| raw[(i, i)].max(0.0).sqrt()).collect();
    let degenerate: Vec<usize> = (0..h).filter(|&i| norms[i] == 0.0).collect();
    for i in 0..h {
        for j in 0..h {
            raw[(i, j)] = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                (raw[(i, j)] / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
        }
    }
    degenerate
}

/// `G[i][j] = ⟨A_i, A_j⟩_F`, optionally cosine-normalized.
pub fn gram(forms: &BilinearFormSet, normalize_entries: bool) -> Result<GramMatrix> {
    let mut g = raw_gram(forms);
    if normalize_entries {
        if let Some(&head) = normalize(&mut g).first() {
            return Err(Error::DegenerateHead(head));
        }
    }
    GramMatrix::new(g, normalize_entries, false)
}

/// Normalized Gram that flags zero-norm heads instead of failing.
pub(crate) fn normalized_gram_flagged(forms: &BilinearFormSet) -> Result<(GramMatrix, Vec<usize>)> {
    let mut g = raw_gram(forms);
    let degenerate = normalize(&mut g);
    Ok((GramMatrix::new(g, true, false)?, degenerate))
}

/// `G − row means − column means + grand mean`.
pub fn center_gram(g: &GramMatrix) -> GramMatrix {
    let n = g.n();
    let m = &g.values;
    let nf = n as f64;
    let row: Vec<f64> = (0..n).map(|i| m.row(i).iter().sum::<f64>() / nf).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| m[(i, j)]).sum::<f64>() / nf).collect();
    let grand = row.iter().sum::<f64>() / nf;
    GramMatrix {
        values: Matrix::from_fn(n, n, |i, j| m[(i, j)] - row[i] - col[j] + grand),
        normalized: g.normalized,
        centered: true,
        scale: g.scale,
    }
}
