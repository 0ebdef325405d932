//! Single-token decode steps over a [`DecodeCache`].
//!
//! The explicit path rebuilds each head's keys and values for every cached
//! position (`K_h = K_shared + R_h·Bᵀ` for LRKV, `K_h = Z·W_up` for MLA) and
//! then attends. The factored path never forms a per-head `T × d_h` tensor:
//!
//! ```text
//! LRKV  q·K_hᵀ = q·K_sharedᵀ + (q·B_h^K)·(R_h^K)ᵀ
//!       a·V_h  = a·V_shared  + (a·R_h^V)·(B_h^V)ᵀ
//! MLA   q·K_hᵀ = (q·(W_up^K)ᵀ)·Zᵀ
//!       a·V_h  = (a·Z)·W_up^V
//! ```
//!
//! Both compute the same logits and outputs up to rounding.

use crate::attention::{rms_norm, rms_norm_rows};
use crate::cache::{CachePayload, DecodeCache};
use crate::config::Mechanism;
use crate::error::{Error, Result};
use crate::instrument::{add_flops, record_alloc};
use crate::linalg::{axpy, dot, matvec, softmax, vecmat, Matrix, Scalar};
use crate::weights::{KvWeights, WeightSet};

/// Label for the length-`T` score vectors every attention step needs.
pub const SCORES: &str = "scores";
/// Label for materialized per-head keys/values on the explicit path.
pub const EXPLICIT_KV: &str = "explicit.kv";

/// Per-head result of one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStepOutput<T> {
    /// Scaled pre-softmax scores over the cached positions, per head.
    pub logits: Vec<Vec<T>>,
    /// Attention output, `d_h` per head.
    pub out: Vec<Vec<T>>,
}

impl<T: Scalar> DecodeStepOutput<T> {
    pub fn max_logit_diff(&self, other: &Self) -> f64 {
        max_nested_diff(&self.logits, &other.logits)
    }

    pub fn max_output_diff(&self, other: &Self) -> f64 {
        max_nested_diff(&self.out, &other.out)
    }

    /// Outputs concatenated head-major, matching a row of
    /// [`crate::attention::forward_attention`].
    pub fn concat_out(&self) -> Vec<T> {
        self.out.concat()
    }
}

fn max_nested_diff<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p.as_f64() - q.as_f64()).abs())
        })
        .fold(0.0, f64::max)
}

fn query<T: Scalar>(w: &WeightSet<T>, x: &[T], head: usize) -> Vec<T> {
    record_alloc("q", 1, w.config().d_h);
    let q = vecmat(x, &w.wq[head]);
    if w.config().qk_norm {
        rms_norm(&q)
    } else {
        q
    }
}

fn check_step<T: Scalar>(cache: &DecodeCache<T>, w: &WeightSet<T>, x: &[T]) -> Result<()> {
    cache.check_compatible(w)?;
    if x.len() != w.config().d {
        return Err(Error::Dimension(format!(
            "token has {} features, expected d={}",
            x.len(),
            w.config().d
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("token"));
    }
    if cache.is_empty() {
        return Err(Error::Dimension("decode step needs at least one cached token".into()));
    }
    Ok(())
}

fn check_factored<T: Scalar>(w: &WeightSet<T>) -> Result<()> {
    let c = w.config();
    if !c.mechanism.has_factored_decode() {
        return Err(Error::UnsupportedMechanism {
            op: "factored decode",
            mechanism: c.mechanism,
        });
    }
    if c.qk_norm {
        return Err(Error::UnsupportedMode("factored decode"));
    }
    Ok(())
}

fn finish<T: Scalar>(out: DecodeStepOutput<T>) -> Result<DecodeStepOutput<T>> {
    let finite = |v: &Vec<Vec<T>>| v.iter().flatten().all(|x| x.is_finite());
    if !finite(&out.logits) || !finite(&out.out) {
        return Err(Error::NonFinite("decode step"));
    }
    Ok(out)
}

/// Attends `q` over the first `len` rows of explicit `k`/`v`.
fn attend<T: Scalar>(q: &[T], k: &Matrix<T>, v: &Matrix<T>, len: usize, scale: T) -> (Vec<T>, Vec<T>) {
    record_alloc(SCORES, 1, len);
    let logits: Vec<T> = (0..len).map(|t| dot(q, k.row(t)) * scale).collect();
    add_flops(len as u64);
    record_alloc(SCORES, 1, len);
    let weights = softmax(&logits);
    record_alloc("out", 1, v.cols());
    let mut out = vec![T::zero(); v.cols()];
    for (t, &a) in weights.iter().enumerate() {
        axpy(a, v.row(t), &mut out);
    }
    (logits, out)
}

/// Decode step over a cache that already contains the query token `x`,
/// reconstructing per-head keys and values explicitly.
pub fn step_explicit<T: Scalar>(
    cache: &DecodeCache<T>,
    w: &WeightSet<T>,
    x: &[T],
) -> Result<DecodeStepOutput<T>> {
    check_step(cache, w, x)?;
    let c = w.config();
    let len = cache.len();
    let scale = T::from_f64(c.scale());
    let mut logits = Vec::with_capacity(c.n_heads);
    let mut outs = Vec::with_capacity(c.n_heads);
    for h in 0..c.n_heads {
        let q = query(w, x, h);
        let (k, v) = match (cache.payload(), &w.kv) {
            (CachePayload::Full { k, v }, _) => {
                let s = match c.mechanism {
                    Mechanism::Mha => h,
                    Mechanism::Gqa => c.group_of(h),
                    _ => 0,
                };
                if c.qk_norm {
                    record_alloc(EXPLICIT_KV, len, c.d_h);
                    let mut kn = k[s].top_rows(len);
                    rms_norm_rows(&mut kn);
                    (std::borrow::Cow::Owned(kn), std::borrow::Cow::Borrowed(&v[s]))
                } else {
                    (std::borrow::Cow::Borrowed(&k[s]), std::borrow::Cow::Borrowed(&v[s]))
                }
            }
            (CachePayload::Latent { z }, KvWeights::Latent { wup_k, wup_v, .. }) => {
                let zt = z.top_rows(len);
                record_alloc(EXPLICIT_KV, len, c.d_h);
                let mut kh = zt.matmul(&wup_k[h]);
                record_alloc(EXPLICIT_KV, len, c.d_h);
                let vh = zt.matmul(&wup_v[h]);
                if c.qk_norm {
                    rms_norm_rows(&mut kh);
                }
                (std::borrow::Cow::Owned(kh), std::borrow::Cow::Owned(vh))
            }
            (
                CachePayload::LowRank { k_shared, v_shared, rk, rv },
                KvWeights::LowRank { k: pk, v: pv },
            ) => {
                record_alloc(EXPLICIT_KV, len, c.d_h);
                let mut kh = k_shared.top_rows(len).add(&rk[h].top_rows(len).matmul_t(&pk.b[h]));
                record_alloc(EXPLICIT_KV, len, c.d_h);
                let vh = v_shared.top_rows(len).add(&rv[h].top_rows(len).matmul_t(&pv.b[h]));
                if c.qk_norm {
                    rms_norm_rows(&mut kh);
                }
                (std::borrow::Cow::Owned(kh), std::borrow::Cow::Owned(vh))
            }
            _ => unreachable!("cache compatibility checked"),
        };
        let (l, o) = attend(&q, &k, &v, len, scale);
        logits.push(l);
        outs.push(o);
    }
    finish(DecodeStepOutput { logits, out: outs })
}

/// Decode step over a cache that already contains `x`, using the factored
/// identities. Only LRKV and MLA have this path, and only without qk_norm.
pub fn step_factored<T: Scalar>(
    cache: &DecodeCache<T>,
    w: &WeightSet<T>,
    x: &[T],
) -> Result<DecodeStepOutput<T>> {
    check_factored(w)?;
    check_step(cache, w, x)?;
    let c = w.config();
    let len = cache.len();
    let scale = T::from_f64(c.scale());
    let mut logits = Vec::with_capacity(c.n_heads);
    let mut outs = Vec::with_capacity(c.n_heads);
    match (cache.payload(), &w.kv) {
        (CachePayload::LowRank { k_shared, v_shared, rk, rv }, KvWeights::LowRank { k: pk, v: pv }) => {
            for h in 0..c.n_heads {
                let q = query(w, x, h);
                record_alloc("q_b", 1, c.r);
                let qb = vecmat(&q, &pk.b[h]);
                record_alloc(SCORES, 1, len);
                let l: Vec<T> = (0..len)
                    .map(|t| (dot(&q, k_shared.row(t)) + dot(&qb, rk[h].row(t))) * scale)
                    .collect();
                add_flops(2 * len as u64);
                record_alloc(SCORES, 1, len);
                let a = softmax(&l);
                record_alloc("out", 1, c.d_h);
                let mut out = vec![T::zero(); c.d_h];
                record_alloc("a_r", 1, c.r);
                let mut ar = vec![T::zero(); c.r];
                for (t, &at) in a.iter().enumerate() {
                    axpy(at, v_shared.row(t), &mut out);
                    axpy(at, rv[h].row(t), &mut ar);
                }
                record_alloc("lift", 1, c.d_h);
                let lift = matvec(&pv.b[h], &ar);
                for (o, l) in out.iter_mut().zip(lift) {
                    *o = *o + l;
                }
                add_flops(c.d_h as u64);
                logits.push(l);
                outs.push(out);
            }
        }
        (CachePayload::Latent { z }, KvWeights::Latent { wup_k, wup_v, .. }) => {
            for h in 0..c.n_heads {
                let q = query(w, x, h);
                record_alloc("q_latent", 1, c.d_c);
                let ql = matvec(&wup_k[h], &q);
                record_alloc(SCORES, 1, len);
                let l: Vec<T> = (0..len).map(|t| dot(&ql, z.row(t)) * scale).collect();
                add_flops(len as u64);
                record_alloc(SCORES, 1, len);
                let a = softmax(&l);
                record_alloc("a_z", 1, c.d_c);
                let mut az = vec![T::zero(); c.d_c];
                for (t, &at) in a.iter().enumerate() {
                    axpy(at, z.row(t), &mut az);
                }
                record_alloc("out", 1, c.d_h);
                outs.push(vecmat(&az, &wup_v[h]));
                logits.push(l);
            }
        }
        _ => unreachable!("mechanism checked"),
    }
    finish(DecodeStepOutput { logits, out: outs })
}

/// Appends `x` to `cache` and runs the explicit step.
pub fn decode_explicit<T: Scalar>(
    cache: &mut DecodeCache<T>,
    w: &WeightSet<T>,
    x: &[T],
) -> Result<DecodeStepOutput<T>> {
    cache.append(w, x)?;
    step_explicit(cache, w, x)
}

/// Appends `x` to `cache` and runs the factored step. The cache is left
/// untouched if the mechanism or mode is unsupported.
pub fn decode_factored<T: Scalar>(
    cache: &mut DecodeCache<T>,
    w: &WeightSet<T>,
    x: &[T],
) -> Result<DecodeStepOutput<T>> {
    check_factored(w)?;
    cache.append(w, x)?;
    step_factored(cache, w, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::prefill;
    use crate::config::AttentionConfig;
    use crate::rng::RngSpec;
    use crate::weights::init_weights;

    #[test]
    fn single_token_output_is_value_row() {
        for mech in Mechanism::ALL {
            let c = AttentionConfig::new(mech, 2, 4).with_rank(2).with_latent(3).with_groups(2);
            let w: WeightSet<f64> = init_weights(&c, RngSpec::new(4)).unwrap();
            let x: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
            let mut cache = DecodeCache::with_capacity(&w, 1);
            let out = decode_explicit(&mut cache, &w, &x).unwrap();
            for h in 0..2 {
                let (_, wv) = w.effective_kv(h).unwrap();
                let v = vecmat(&x, &wv);
                for (a, b) in out.out[h].iter().zip(&v) {
                    assert!((a - b).abs() < 1e-12, "{mech}");
                }
            }
        }
    }

    #[test]
    fn factored_rejects_unsupported_without_mutating() {
        let c = AttentionConfig::new(Mechanism::Gqa, 2, 4).with_groups(1);
        let w: WeightSet<f64> = init_weights(&c, RngSpec::new(4)).unwrap();
        let mut cache = DecodeCache::with_capacity(&w, 2);
        let err = decode_factored(&mut cache, &w, &[0.0; 8]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedMechanism { .. }));
        assert_eq!(cache.len(), 0);

        let c = AttentionConfig::new(Mechanism::Lrkv, 2, 4).with_rank(1).with_qk_norm(true);
        let w: WeightSet<f64> = init_weights(&c, RngSpec::new(4)).unwrap();
        let mut cache = DecodeCache::with_capacity(&w, 2);
        let err = decode_factored(&mut cache, &w, &[0.0; 8]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedMode(_)));
        assert_eq!(cache.len(), 0);
        // The explicit path still works with qk_norm on.
        decode_explicit(&mut cache, &w, &[0.5; 8]).unwrap();
    }

    #[test]
    fn zero_rank_logits_are_shared_dot_products() {
        let c = AttentionConfig::new(Mechanism::Lrkv, 3, 4).with_rank(0);
        let w: WeightSet<f64> = init_weights(&c, RngSpec::new(9)).unwrap();
        let xs: Matrix<f64> = RngSpec::new(9).generator(1).matrix(4, 12, 1.0);
        let cache = prefill(&w, &xs, 4).unwrap();
        let x = xs.row(3);
        let out = step_factored(&cache, &w, x).unwrap();
        let (k, _) = w.low_rank().unwrap();
        let ks = xs.matmul(&k.shared);
        for h in 0..3 {
            let q = vecmat(x, &w.wq[h]);
            for t in 0..4 {
                let expected = (dot(&q, ks.row(t)) + 0.0) * 0.5;
                assert_eq!(out.logits[h][t], expected);
            }
        }
    }

    #[test]
    fn empty_cache_step_is_an_error() {
        let c = AttentionConfig::new(Mechanism::Mha, 1, 2);
        let w: WeightSet<f64> = init_weights(&c, RngSpec::new(0)).unwrap();
        let cache = DecodeCache::with_capacity(&w, 1);
        assert!(step_explicit(&cache, &w, &[0.0; 2]).is_err());
    }
}
