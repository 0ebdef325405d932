//! Randomized harness checking the factored decode path against explicit
//! reconstruction, and both against the full forward pass.

use crate::attention::forward_attention;
use crate::cache::prefill;
use crate::config::{AttentionConfig, Mechanism};
use crate::decode::{step_explicit, step_factored, SCORES};
use crate::error::{Error, Result};
use crate::instrument::measure;
use crate::linalg::{max_abs_diff, Dtype, Matrix, Scalar};
use crate::rng::RngSpec;
use crate::weights::init_weights;

/// Pass thresholds for one element type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    /// Factored vs. explicit decode, logits and outputs.
    pub equivalence: f64,
    /// Token-by-token decode vs. the matching forward-pass row.
    pub forward: f64,
}

impl Tolerance {
    pub fn for_dtype(dtype: Dtype) -> Self {
        match dtype {
            Dtype::F64 => Tolerance {
                equivalence: 1e-9,
                forward: 1e-6,
            },
            Dtype::F32 => Tolerance {
                equivalence: 1e-5,
                forward: 1e-4,
            },
        }
    }
}

/// One trial of [`equivalence_report`]. Factored columns are `None` for
/// mechanisms without a factored path.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceRow {
    pub trial: usize,
    pub mechanism: Mechanism,
    pub dtype: Dtype,
    pub tokens: usize,
    pub prefill_tokens: usize,
    pub max_logit_diff: Option<f64>,
    pub max_output_diff: Option<f64>,
    pub max_forward_diff: f64,
    /// Non-score transient elements allocated by the last explicit step.
    pub explicit_elements: usize,
    pub factored_elements: Option<usize>,
    pub explicit_flops: u64,
    pub factored_flops: Option<u64>,
}

impl EquivalenceRow {
    pub fn max_diff(&self) -> Option<f64> {
        match (self.max_logit_diff, self.max_output_diff) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        }
    }

    pub fn passes(&self, tol: Tolerance) -> bool {
        self.max_diff().is_none_or(|d| d <= tol.equivalence) && self.max_forward_diff <= tol.forward
    }
}

/// For each trial: fresh weights and inputs, prefill of the first half of
/// the sequence, then one decode step per remaining token through both
/// paths. Records the worst discrepancies and the last step's cost.
pub fn equivalence_report<T: Scalar>(
    config: &AttentionConfig,
    rng: RngSpec,
    tokens: usize,
    trials: usize,
) -> Result<Vec<EquivalenceRow>> {
    if tokens == 0 {
        return Err(Error::Parameter("tokens must be at least 1".into()));
    }
    if trials == 0 {
        return Err(Error::Parameter("trials must be at least 1".into()));
    }
    config.validate()?;
    let factored = config.mechanism.has_factored_decode() && !config.qk_norm;
    let mut rows = Vec::with_capacity(trials);
    for trial in 0..trials {
        let spec = rng.trial(trial as u64);
        let w = init_weights::<T>(config, spec)?;
        let x: Matrix<T> = spec.generator(1).matrix(tokens, config.d, 1.0);
        let reference = forward_attention(&w, &x)?;
        let prefill_tokens = tokens / 2;
        let mut cache = prefill(&w, &x.top_rows(prefill_tokens), tokens)?;

        let mut row = EquivalenceRow {
            trial,
            mechanism: config.mechanism,
            dtype: T::DTYPE,
            tokens,
            prefill_tokens,
            max_logit_diff: factored.then_some(0.0),
            max_output_diff: factored.then_some(0.0),
            max_forward_diff: 0.0,
            explicit_elements: 0,
            factored_elements: None,
            explicit_flops: 0,
            factored_flops: None,
        };
        for t in prefill_tokens..tokens {
            let token = x.row(t);
            cache.append(&w, token)?;
            let (explicit, me) = measure(|| step_explicit(&cache, &w, token));
            let explicit = explicit?;
            row.max_forward_diff = row
                .max_forward_diff
                .max(max_abs_diff(&explicit.concat_out(), reference.row(t)).as_f64());
            row.explicit_elements = me.total_elements() - scores(&me);
            row.explicit_flops = me.flops;
            if factored {
                let (fact, mf) = measure(|| step_factored(&cache, &w, token));
                let fact = fact?;
                let upd = |slot: &mut Option<f64>, v: f64| *slot = slot.map(|s| s.max(v));
                upd(&mut row.max_logit_diff, explicit.max_logit_diff(&fact));
                upd(&mut row.max_output_diff, explicit.max_output_diff(&fact));
                row.factored_elements = Some(mf.total_elements() - scores(&mf));
                row.factored_flops = Some(mf.flops);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn scores(m: &crate::instrument::Measurement) -> usize {
    m.allocations
        .iter()
        .filter(|a| a.label == SCORES)
        .map(|a| a.elements())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_trials_and_tokens() {
        let c = AttentionConfig::new(Mechanism::Lrkv, 2, 4).with_rank(1);
        assert!(matches!(equivalence_report::<f64>(&c, RngSpec::new(0), 4, 0), Err(Error::Parameter(_))));
        assert!(matches!(equivalence_report::<f64>(&c, RngSpec::new(0), 0, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn mha_has_no_factored_columns() {
        let c = AttentionConfig::new(Mechanism::Mha, 2, 4);
        let rows = equivalence_report::<f64>(&c, RngSpec::new(0), 6, 2).unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert!(r.max_logit_diff.is_none() && r.factored_flops.is_none());
            assert!(r.max_forward_diff <= 1e-6);
            assert!(r.passes(Tolerance::for_dtype(Dtype::F64)));
        }
    }

    #[test]
    fn lrkv_paths_agree() {
        let c = AttentionConfig::new(Mechanism::Lrkv, 3, 8).with_rank(3);
        for r in equivalence_report::<f64>(&c, RngSpec::new(1), 12, 3).unwrap() {
            assert!(r.max_diff().unwrap() <= 1e-9, "{r:?}");
            assert!(r.max_forward_diff <= 1e-6);
            assert!(r.factored_elements.unwrap() < r.explicit_elements);
        }
    }
}
