//! Head-diversity analysis on bilinear forms, plus truncated-SVD tools.

mod eigen;
mod gram;
mod spectrum;
mod svd;

pub use eigen::{jacobi_eigen, SymmetricEigen, JACOBI_TOLERANCE};
pub use gram::{bilinear_forms, center_gram, gram, BilinearFormSet, GramMatrix};
pub use spectrum::{spectrum, SpectrumReport, NEGATIVE_CLIP, VARIANCE_TARGET};
pub use svd::{
    factorization_gap, lrkv_from_reference, magnitude_report, svd_truncate, GapRow, MagnitudeRow, TruncatedSvd,
};

use crate::error::Result;
use crate::linalg::Scalar;
use crate::weights::WeightSet;

/// Uncentered and centered spectra of one layer's normalized Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub n_heads: usize,
    /// Cosine similarities, uncentered; suitable for a heatmap.
    pub similarity: GramMatrix,
    pub centered_similarity: GramMatrix,
    pub uncentered: SpectrumReport,
    pub centered: SpectrumReport,
    /// Heads whose bilinear form is zero. Their similarity row and column
    /// are zero.
    pub degenerate_heads: Vec<usize>,
}

pub fn diversity_report<T: Scalar>(w: &WeightSet<T>) -> Result<DiversityReport> {
    let forms = bilinear_forms(w)?;
    let (similarity, degenerate_heads) = gram::normalized_gram_flagged(&forms)?;
    let centered_similarity = center_gram(&similarity);
    Ok(DiversityReport {
        n_heads: forms.n_heads(),
        uncentered: spectrum(&similarity)?,
        centered: spectrum(&centered_similarity)?,
        similarity,
        centered_similarity,
        degenerate_heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AttentionConfig, Mechanism};
    use crate::linalg::Matrix;
    use crate::rng::RngSpec;
    use crate::weights::{init_weights, KvWeights};

    #[test]
    fn mqa_identical_queries_rank_one() {
        let c = AttentionConfig::new(Mechanism::Mqa, 4, 3);
        let mut w = init_weights::<f64>(&c, RngSpec::new(2)).unwrap();
        let q0 = w.wq[0].clone();
        w.wq.iter_mut().for_each(|q| *q = q0.clone());
        let rep = diversity_report(&w).unwrap();
        assert!((rep.uncentered.effective_rank_pct - 0.25).abs() < 1e-9);
        assert!(rep.centered.degenerate);
    }

    #[test]
    fn zero_head_is_flagged() {
        let c = AttentionConfig::new(Mechanism::Mha, 3, 2);
        let mut w = init_weights::<f64>(&c, RngSpec::new(3)).unwrap();
        if let KvWeights::PerHead { wk, .. } = &mut w.kv {
            wk[2] = Matrix::zeros(6, 2);
        }
        let rep = diversity_report(&w).unwrap();
        assert_eq!(rep.degenerate_heads, vec![2]);
    }
}
