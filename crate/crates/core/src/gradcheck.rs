//! Central-difference check of the low-rank projection gradients.
//!
//! The probe loss is `L = Σ_path Σ_h ½‖X·W_h − Y_h‖²_F` with random targets
//! `Y_h`. Its upstream gradient per head is `X·W_h − Y_h`, which is fed to
//! [`projection_backward`]; shared-base gradients are summed over heads.

use crate::attention::projection_backward;
use crate::config::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::RngSpec;
use crate::weights::{init_weights, KvPath, KvWeights, LowRankProjection, WeightSet};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub path: KvPath,
    /// `shared`, `u.<h>` or `b.<h>`.
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

struct Problem {
    w: WeightSet<f64>,
    x: Matrix<f64>,
    targets_k: Vec<Matrix<f64>>,
    targets_v: Vec<Matrix<f64>>,
}

impl Problem {
    fn targets(&self, path: KvPath) -> &[Matrix<f64>] {
        match path {
            KvPath::Key => &self.targets_k,
            KvPath::Value => &self.targets_v,
        }
    }

    fn loss(&self, w: &WeightSet<f64>) -> f64 {
        let mut total = 0.0;
        for path in KvPath::BOTH {
            let p = w.low_rank_path(path).expect("LRKV weights");
            for (h, y) in self.targets(path).iter().enumerate() {
                let diff = self.x.matmul(&p.effective(h)).sub(y);
                total += 0.5 * diff.frobenius_inner(&diff);
            }
        }
        total
    }
}

fn path_mut(w: &mut WeightSet<f64>, path: KvPath) -> &mut LowRankProjection<f64> {
    match (&mut w.kv, path) {
        (KvWeights::LowRank { k, .. }, KvPath::Key) => k,
        (KvWeights::LowRank { v, .. }, KvPath::Value) => v,
        _ => unreachable!("LRKV weights"),
    }
}

fn tensor_mut<'a>(p: &'a mut LowRankProjection<f64>, name: &str) -> &'a mut Matrix<f64> {
    match name.split_once('.') {
        None => &mut p.shared,
        Some(("u", h)) => &mut p.u[h.parse::<usize>().expect("head index")],
        Some(("b", h)) => &mut p.b[h.parse::<usize>().expect("head index")],
        _ => unreachable!("tensor names are generated here"),
    }
}

/// Compares analytic and central-difference gradients at `samples`
/// randomly chosen entries of every shared, `U` and `B` tensor.
pub fn gradient_check(config: &AttentionConfig, seed: u64, tokens: usize, samples: usize) -> Result<Vec<GradcheckRow>> {
    if config.mechanism != Mechanism::Lrkv {
        return Err(Error::UnsupportedMechanism {
            op: "gradient_check",
            mechanism: config.mechanism,
        });
    }
    if tokens == 0 || samples == 0 {
        return Err(Error::Parameter("tokens and samples must be positive".into()));
    }
    let spec = RngSpec::new(seed);
    let mut g = spec.generator(1);
    let h = config.n_heads;
    let problem = Problem {
        w: init_weights(config, spec)?,
        x: g.matrix(tokens, config.d, 1.0),
        targets_k: (0..h).map(|_| g.matrix(tokens, config.d_h, 1.0)).collect(),
        targets_v: (0..h).map(|_| g.matrix(tokens, config.d_h, 1.0)).collect(),
    };

    let mut rows = Vec::new();
    for path in KvPath::BOTH {
        let proj = problem.w.low_rank_path(path).expect("LRKV weights");
        let mut analytic: Vec<(String, Matrix<f64>)> = Vec::new();
        let mut shared = Matrix::zeros(config.d, config.d_h);
        for head in 0..h {
            let upstream = problem.x.matmul(&proj.effective(head)).sub(&problem.targets(path)[head]);
            let grad = projection_backward(&problem.w, &problem.x, &upstream, head, path)?;
            shared = shared.add(&grad.d_shared);
            analytic.push((format!("u.{head}"), grad.d_u));
            analytic.push((format!("b.{head}"), grad.d_b));
        }
        analytic.insert(0, ("shared".to_string(), shared));

        for (name, grad) in &analytic {
            if grad.is_empty() {
                continue;
            }
            for _ in 0..samples {
                let (i, j) = (g.below(grad.rows()), g.below(grad.cols()));
                let mut w = problem.w.clone();
                let base = tensor_mut(path_mut(&mut w, path), name)[(i, j)];
                tensor_mut(path_mut(&mut w, path), name)[(i, j)] = base + FD_STEP;
                let plus = problem.loss(&w);
                tensor_mut(path_mut(&mut w, path), name)[(i, j)] = base - FD_STEP;
                let minus = problem.loss(&w);
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let a = grad[(i, j)];
                rows.push(GradcheckRow {
                    path,
                    tensor: name.clone(),
                    row: i,
                    col: j,
                    analytic: a,
                    numeric,
                    rel_error: (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instance_agrees() {
        let c = AttentionConfig::new(Mechanism::Lrkv, 2, 3).with_rank(2);
        let rows = gradient_check(&c, 5, 4, 3).unwrap();
        assert_eq!(rows.len(), 2 * 5 * 3);
        for r in rows {
            assert!(r.rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn zero_rank_checks_only_shared() {
        let c = AttentionConfig::new(Mechanism::Lrkv, 2, 3).with_rank(0);
        let rows = gradient_check(&c, 5, 4, 2).unwrap();
        assert!(rows.iter().all(|r| r.tensor == "shared"));
    }

    #[test]
    fn rejects_other_mechanisms() {
        let c = AttentionConfig::new(Mechanism::Mha, 2, 3);
        assert!(gradient_check(&c, 0, 4, 1).is_err());
    }
}
