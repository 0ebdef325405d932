//! Per-mechanism decode caches with dense preallocation.

use crate::config::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};
use crate::linalg::{vecmat, Matrix, Scalar};
use crate::weights::{KvWeights, WeightSet};

/// Cached state. Every buffer has `capacity` rows; only the first `len`
/// rows are meaningful.
#[derive(Debug, Clone, PartialEq)]
pub enum CachePayload<T> {
    /// MHA (`H` streams), MQA (1) and GQA (`G`): projected keys and values,
    /// each `capacity × d_h`.
    Full { k: Vec<Matrix<T>>, v: Vec<Matrix<T>> },
    /// MLA: a single latent stream `Z = X·W_down`, `capacity × d_c`.
    Latent { z: Matrix<T> },
    /// LRKV: shared features (`capacity × d_h`) plus per-head latents
    /// `R_h = X·U_h` (`capacity × r`). Nothing here is `d_h` wide per head.
    LowRank {
        k_shared: Matrix<T>,
        v_shared: Matrix<T>,
        rk: Vec<Matrix<T>>,
        rv: Vec<Matrix<T>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCache<T> {
    config: AttentionConfig,
    len: usize,
    capacity: usize,
    payload: CachePayload<T>,
}

impl<T: Scalar> DecodeCache<T> {
    /// Empty cache able to hold `capacity` tokens.
    pub fn with_capacity(w: &WeightSet<T>, capacity: usize) -> Self {
        let c = w.config();
        let buf = |cols: usize| Matrix::zeros(capacity, cols);
        let payload = match c.mechanism {
            Mechanism::Mha | Mechanism::Mqa | Mechanism::Gqa => {
                let n = c.kv_streams();
                CachePayload::Full {
                    k: (0..n).map(|_| buf(c.d_h)).collect(),
                    v: (0..n).map(|_| buf(c.d_h)).collect(),
                }
            }
            Mechanism::Mla => CachePayload::Latent { z: buf(c.d_c) },
            Mechanism::Lrkv => CachePayload::LowRank {
                k_shared: buf(c.d_h),
                v_shared: buf(c.d_h),
                rk: (0..c.n_heads).map(|_| buf(c.r)).collect(),
                rv: (0..c.n_heads).map(|_| buf(c.r)).collect(),
            },
        };
        DecodeCache {
            config: c.clone(),
            len: 0,
            capacity,
            payload,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mechanism(&self) -> Mechanism {
        self.config.mechanism
    }

    pub fn payload(&self) -> &CachePayload<T> {
        &self.payload
    }

    /// Every payload tensor, at full capacity.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        match &self.payload {
            CachePayload::Full { k, v } => k.iter().chain(v).collect(),
            CachePayload::Latent { z } => vec![z],
            CachePayload::LowRank { k_shared, v_shared, rk, rv } => {
                [k_shared, v_shared].into_iter().chain(rk).chain(rv).collect()
            }
        }
    }

    /// Total stored elements at capacity.
    pub fn element_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub(crate) fn check_compatible(&self, w: &WeightSet<T>) -> Result<()> {
        let a = &self.config;
        let b = w.config();
        let same = a.mechanism == b.mechanism
            && a.d == b.d
            && a.n_heads == b.n_heads
            && a.d_h == b.d_h
            && match a.mechanism {
                Mechanism::Gqa => a.n_groups == b.n_groups,
                Mechanism::Mla => a.d_c == b.d_c,
                Mechanism::Lrkv => a.r == b.r,
                Mechanism::Mha | Mechanism::Mqa => true,
            };
        if !same {
            return Err(Error::Dimension(format!(
                "cache was built for {} (H={}, d_h={}) but weights are {} (H={}, d_h={})",
                a.mechanism, a.n_heads, a.d_h, b.mechanism, b.n_heads, b.d_h
            )));
        }
        Ok(())
    }

    /// Projects one token and stores it. Equivalent to re-prefilling the
    /// extended sequence, bit for bit.
    pub fn append(&mut self, w: &WeightSet<T>, x: &[T]) -> Result<()> {
        self.check_compatible(w)?;
        if x.len() != self.config.d {
            return Err(Error::Dimension(format!(
                "token has {} features, expected d={}",
                x.len(),
                self.config.d
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("token"));
        }
        if self.len >= self.capacity {
            return Err(Error::Capacity {
                capacity: self.capacity,
            });
        }
        let row = self.len;
        let put = |dst: &mut Matrix<T>, wm: &Matrix<T>| {
            let p = vecmat(x, wm);
            dst.row_mut(row).copy_from_slice(&p);
        };
        match (&mut self.payload, &w.kv) {
            (CachePayload::Full { k, v }, KvWeights::PerHead { wk, wv })
            | (CachePayload::Full { k, v }, KvWeights::Grouped { wk, wv }) => {
                for s in 0..k.len() {
                    put(&mut k[s], &wk[s]);
                    put(&mut v[s], &wv[s]);
                }
            }
            (CachePayload::Full { k, v }, KvWeights::Shared { wk, wv }) => {
                put(&mut k[0], wk);
                put(&mut v[0], wv);
            }
            (CachePayload::Latent { z }, KvWeights::Latent { wdown, .. }) => put(z, wdown),
            (
                CachePayload::LowRank { k_shared, v_shared, rk, rv },
                KvWeights::LowRank { k, v },
            ) => {
                put(k_shared, &k.shared);
                put(v_shared, &v.shared);
                for h in 0..rk.len() {
                    put(&mut rk[h], &k.u[h]);
                    put(&mut rv[h], &v.u[h]);
                }
            }
            _ => unreachable!("compatibility checked above"),
        }
        self.len += 1;
        Ok(())
    }
}

/// Projects a whole prompt `x` (`T × d`) into a fresh cache of the given
/// capacity (at least `T`).
pub fn prefill<T: Scalar>(w: &WeightSet<T>, x: &Matrix<T>, capacity: usize) -> Result<DecodeCache<T>> {
    let c = w.config();
    if x.cols() != c.d {
        return Err(Error::Dimension(format!("prompt has {} columns, expected d={}", x.cols(), c.d)));
    }
    if x.rows() > capacity {
        return Err(Error::Capacity { capacity });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("prompt"));
    }
    let mut cache = DecodeCache::with_capacity(w, capacity);
    let t = x.rows();
    let put = |dst: &mut Matrix<T>, wm: &Matrix<T>| {
        let p = x.matmul(wm);
        dst.as_mut_slice()[..p.len()].copy_from_slice(p.as_slice());
    };
    match (&mut cache.payload, &w.kv) {
        (CachePayload::Full { k, v }, KvWeights::PerHead { wk, wv })
        | (CachePayload::Full { k, v }, KvWeights::Grouped { wk, wv }) => {
            for s in 0..k.len() {
                put(&mut k[s], &wk[s]);
                put(&mut v[s], &wv[s]);
            }
        }
        (CachePayload::Full { k, v }, KvWeights::Shared { wk, wv }) => {
            put(&mut k[0], wk);
            put(&mut v[0], wv);
        }
        (CachePayload::Latent { z }, KvWeights::Latent { wdown, .. }) => put(z, wdown),
        (CachePayload::LowRank { k_shared, v_shared, rk, rv }, KvWeights::LowRank { k, v }) => {
            put(k_shared, &k.shared);
            put(v_shared, &v.shared);
            for h in 0..rk.len() {
                put(&mut rk[h], &k.u[h]);
                put(&mut rv[h], &v.u[h]);
            }
        }
        _ => unreachable!("cache built from the same weights"),
    }
    cache.len = t;
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSpec;
    use crate::weights::init_weights;

    fn weights(mech: Mechanism, r: usize) -> WeightSet<f64> {
        let c = AttentionConfig::new(mech, 4, 4).with_rank(r).with_latent(5).with_groups(2);
        init_weights(&c, RngSpec::new(21)).unwrap()
    }

    #[test]
    fn empty_prefill() {
        for mech in Mechanism::ALL {
            let w = weights(mech, 2);
            let cache = prefill(&w, &Matrix::zeros(0, 16), 0).unwrap();
            assert_eq!(cache.len(), 0);
            assert_eq!(cache.element_count(), 0);
        }
    }

    #[test]
    fn zero_rank_cache_is_mqa_cache_plus_empty_latents() {
        let w = weights(Mechanism::Lrkv, 0);
        let x: Matrix<f64> = RngSpec::new(3).generator(1).matrix(5, 16, 1.0);
        let cache = prefill(&w, &x, 5).unwrap();
        let (k, v) = w.low_rank().unwrap();
        let CachePayload::LowRank { k_shared, v_shared, rk, rv } = cache.payload() else {
            panic!("wrong payload")
        };
        assert_eq!(*k_shared, x.matmul(&k.shared));
        assert_eq!(*v_shared, x.matmul(&v.shared));
        assert!(rk.iter().chain(rv).all(|m| m.shape() == (5, 0)));
    }

    #[test]
    fn append_zero_vector_appends_zero_rows() {
        let w = weights(Mechanism::Lrkv, 2);
        let mut cache = DecodeCache::with_capacity(&w, 2);
        cache.append(&w, &[0.0; 16]).unwrap();
        assert!(cache.tensors().iter().all(|m| m.row(0).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn capacity_is_enforced() {
        let w = weights(Mechanism::Mha, 0);
        let mut cache = DecodeCache::with_capacity(&w, 1);
        cache.append(&w, &[1.0; 16]).unwrap();
        assert!(matches!(cache.append(&w, &[1.0; 16]), Err(Error::Capacity { capacity: 1 })));
        assert!(matches!(prefill(&w, &Matrix::zeros(3, 16), 2), Err(Error::Capacity { .. })));
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let w = weights(Mechanism::Lrkv, 2);
        let other = weights(Mechanism::Lrkv, 1);
        let mut cache = DecodeCache::with_capacity(&w, 2);
        assert!(matches!(cache.append(&other, &[0.0; 16]), Err(Error::Dimension(_))));
    }

    #[test]
    fn lrkv_cache_has_no_per_head_full_width_tensor() {
        let w = weights(Mechanism::Lrkv, 1);
        let cache = DecodeCache::with_capacity(&w, 7);
        let full_width = cache.tensors().iter().filter(|m| m.cols() == 4).count();
        assert_eq!(full_width, 2, "only the two shared streams are d_h wide");
    }
}
