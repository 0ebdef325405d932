//! Variance spectra, entropy effective rank and cumulative variance.


use super::eigen::jacobi_eigen;
use super::gram::GramMatrix;
use crate::error::{Error, Result};

/// Eigenvalues below `-NEGATIVE_CLIP` are treated as a numerical failure;
/// smaller negative values are floored to zero.
pub const NEGATIVE_CLIP: f64 = 1e-10;

/// Relative floor below which an eigenvalue counts as round-off.
const ROUNDOFF: f64 = 1e-12;

/// Threshold for the component count.
pub const VARIANCE_TARGET: f64 = 0.90;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
    pub variance_fractions: Vec<f64>,
    pub cumulative_variance: Vec<f64>,
    /// `exp(−Σ v ln v)`; 0 for a degenerate spectrum.
    pub effective_rank_abs: f64,
    /// `effective_rank_abs / H`.
    pub effective_rank_pct: f64,
    /// Smallest `k` whose cumulative variance reaches 90%; 0 if degenerate.
    pub n_components_for_90pct: usize,
    /// The spectrum sums to zero (for example identical heads after centering).
    pub degenerate: bool,
}

impl SpectrumReport {
    /// Report for a given list of eigenvalues (any order).
    pub fn from_eigenvalues(values: &[f64]) -> Result<Self> {
        Self::build(values.to_vec(), 0.0)
    }

    fn build(mut values: Vec<f64>, floor: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectrum"));
        }
        let negative = NEGATIVE_CLIP.max(floor);
        if let Some(&bad) = values.iter().find(|&&v| v < -negative) {
            return Err(Error::Numerical(format!(
                "eigenvalue {bad:e} is below -{negative:e}; matrix is not positive semidefinite"
            )));
        }
        for v in &mut values {
            if *v < 0.0 || *v <= floor {
                *v = 0.0;
            }
        }
        values.sort_by(|a, b| b.total_cmp(a));
        let n = values.len();
        let total: f64 = values.iter().sum();
        if total == 0.0 {
            return Ok(SpectrumReport {
                eigenvalues: values,
                variance_fractions: vec![0.0; n],
                cumulative_variance: vec![0.0; n],
                effective_rank_abs: 0.0,
                effective_rank_pct: 0.0,
                n_components_for_90pct: 0,
                degenerate: true,
            });
        }
        let fractions: Vec<f64> = values.iter().map(|v| v / total).collect();
        let cumulative: Vec<f64> = fractions
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let entropy: f64 = fractions.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
        let rank = entropy.exp().clamp(1.0, n as f64);
        let n90 = cumulative
            .iter()
            .position(|&c| c >= VARIANCE_TARGET - 1e-12)
            .map_or(n, |k| k + 1);
        Ok(SpectrumReport {
            eigenvalues: values,
            variance_fractions: fractions,
            cumulative_variance: cumulative,
            effective_rank_abs: rank,
            effective_rank_pct: rank / n as f64,
            n_components_for_90pct: n90,
            degenerate: false,
        })
    }
}

/// Eigen-spectrum of a Gram matrix. Eigenvalues within round-off of zero
/// (relative to the uncentered matrix's norm) are set to zero.
pub fn spectrum(g: &GramMatrix) -> Result<SpectrumReport> {
    let eig = jacobi_eigen(&g.values)?;
    SpectrumReport::build(eig.values, ROUNDOFF * g.scale())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diversity::gram::center_gram;
    use crate::linalg::Matrix;

    #[test]
    fn uniform() {
        let s = SpectrumReport::from_eigenvalues(&[1.0; 4]).unwrap();
        assert!((s.effective_rank_abs - 4.0).abs() < 1e-12);
        assert_eq!(s.cumulative_variance, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(s.n_components_for_90pct, 4);
    }

    #[test]
    fn one_hot() {
        let s = SpectrumReport::from_eigenvalues(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.effective_rank_abs, 1.0);
        assert_eq!(s.eigenvalues[0], 1.0);
        assert_eq!(s.n_components_for_90pct, 1);
    }

    #[test]
    fn closed_form_entropy() {
        let s = SpectrumReport::from_eigenvalues(&[0.5, 0.25, 0.25]).unwrap();
        assert!((s.effective_rank_abs - 2f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn tiny_negative_clipped_large_negative_rejected() {
        let s = SpectrumReport::from_eigenvalues(&[1.0, -1e-12]).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0, 0.0]);
        assert!(matches!(SpectrumReport::from_eigenvalues(&[1.0, -1e-6]), Err(Error::Numerical(_))));
    }

    #[test]
    fn identical_heads_centered_is_degenerate() {
        let g = GramMatrix::new(Matrix::from_fn(3, 3, |_, _| 1.0), true, false).unwrap();
        let s = spectrum(&center_gram(&g)).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.effective_rank_abs, 0.0);
        let u = spectrum(&g).unwrap();
        assert!((u.effective_rank_abs - 1.0).abs() < 1e-9);
    }
}
