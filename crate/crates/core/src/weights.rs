//! Per-mechanism projection weights and their deterministic initialization.

use std::collections::BTreeMap;

use crate::config::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Scalar};
use crate::rng::RngSpec;

/// Target ratio ‖U·Bᵀ‖_F / ‖W_shared‖_F at initialization.
pub const INIT_RESIDUAL_RATIO: f64 = 0.1;

/// Which of the two cached projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KvPath {
    Key,
    Value,
}

impl KvPath {
    pub const BOTH: [KvPath; 2] = [KvPath::Key, KvPath::Value];

    pub fn label(self) -> &'static str {
        match self {
            KvPath::Key => "K",
            KvPath::Value => "V",
        }
    }
}

/// Shared base plus per-head rank-`r` residual for one of the K/V paths:
/// `W_h = shared + u[h] · b[h]ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankProjection<T> {
    /// `d × d_h`
    pub shared: Matrix<T>,
    /// `d × r` per head
    pub u: Vec<Matrix<T>>,
    /// `d_h × r` per head
    pub b: Vec<Matrix<T>>,
}

impl<T: Scalar> LowRankProjection<T> {
    pub fn residual(&self, head: usize) -> Matrix<T> {
        self.u[head].matmul_t(&self.b[head])
    }

    pub fn effective(&self, head: usize) -> Matrix<T> {
        self.shared.add(&self.residual(head))
    }

    fn cast<U: Scalar>(&self) -> LowRankProjection<U> {
        LowRankProjection {
            shared: self.shared.cast(),
            u: self.u.iter().map(Matrix::cast).collect(),
            b: self.b.iter().map(Matrix::cast).collect(),
        }
    }
}

/// Mechanism-specific key/value parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum KvWeights<T> {
    /// MHA: one `d × d_h` pair per head.
    PerHead { wk: Vec<Matrix<T>>, wv: Vec<Matrix<T>> },
    /// MQA: one pair for all heads.
    Shared { wk: Matrix<T>, wv: Matrix<T> },
    /// GQA: one pair per group.
    Grouped { wk: Vec<Matrix<T>>, wv: Vec<Matrix<T>> },
    /// MLA: `W_h = wdown · wup[h]`.
    Latent {
        /// `d × d_c`
        wdown: Matrix<T>,
        /// `d_c × d_h` per head
        wup_k: Vec<Matrix<T>>,
        wup_v: Vec<Matrix<T>>,
    },
    /// LRKV.
    LowRank {
        k: LowRankProjection<T>,
        v: LowRankProjection<T>,
    },
}

/// All projection weights of one attention layer. Owns its config so that
/// shapes can never drift from it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<T> {
    config: AttentionConfig,
    /// `d × d_h` per head.
    pub wq: Vec<Matrix<T>>,
    pub kv: KvWeights<T>,
}

impl<T: Scalar> WeightSet<T> {
    /// Assembles a weight set, checking every shape against `config`.
    pub fn from_parts(config: AttentionConfig, wq: Vec<Matrix<T>>, kv: KvWeights<T>) -> Result<Self> {
        config.validate()?;
        let w = WeightSet { config, wq, kv };
        w.check()?;
        Ok(w)
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn mechanism(&self) -> Mechanism {
        self.config.mechanism
    }

    /// Overrides the softmax scale / qk_norm flags without touching shapes.
    pub fn set_attention_flags(&mut self, qk_norm: bool, softmax_scale: Option<f64>) -> Result<()> {
        let mut c = self.config.clone();
        c.qk_norm = qk_norm;
        c.softmax_scale = softmax_scale;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn low_rank(&self) -> Option<(&LowRankProjection<T>, &LowRankProjection<T>)> {
        match &self.kv {
            KvWeights::LowRank { k, v } => Some((k, v)),
            _ => None,
        }
    }

    pub fn low_rank_path(&self, path: KvPath) -> Option<&LowRankProjection<T>> {
        self.low_rank().map(|(k, v)| match path {
            KvPath::Key => k,
            KvPath::Value => v,
        })
    }

    /// Effective `(W_h^K, W_h^V)` for `head`, each `d × d_h`.
    pub fn effective_kv(&self, head: usize) -> Result<(Matrix<T>, Matrix<T>)> {
        self.config.check_head(head)?;
        Ok(match &self.kv {
            KvWeights::PerHead { wk, wv } => (wk[head].clone(), wv[head].clone()),
            KvWeights::Shared { wk, wv } => (wk.clone(), wv.clone()),
            KvWeights::Grouped { wk, wv } => {
                let g = self.config.group_of(head);
                (wk[g].clone(), wv[g].clone())
            }
            KvWeights::Latent { wdown, wup_k, wup_v } => {
                (wdown.matmul(&wup_k[head]), wdown.matmul(&wup_v[head]))
            }
            KvWeights::LowRank { k, v } => (k.effective(head), v.effective(head)),
        })
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        let all = |v: &Vec<Matrix<T>>| v.iter().map(Matrix::cast).collect::<Vec<_>>();
        let kv = match &self.kv {
            KvWeights::PerHead { wk, wv } => KvWeights::PerHead { wk: all(wk), wv: all(wv) },
            KvWeights::Shared { wk, wv } => KvWeights::Shared { wk: wk.cast(), wv: wv.cast() },
            KvWeights::Grouped { wk, wv } => KvWeights::Grouped { wk: all(wk), wv: all(wv) },
            KvWeights::Latent { wdown, wup_k, wup_v } => KvWeights::Latent {
                wdown: wdown.cast(),
                wup_k: all(wup_k),
                wup_v: all(wup_v),
            },
            KvWeights::LowRank { k, v } => KvWeights::LowRank { k: k.cast(), v: v.cast() },
        };
        WeightSet {
            config: self.config.clone(),
            wq: all(&self.wq),
            kv,
        }
    }

    /// Every tensor with its canonical archive name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        push_indexed("wq", &self.wq, &mut out);
        match &self.kv {
            KvWeights::PerHead { wk, wv } | KvWeights::Grouped { wk, wv } => {
                push_indexed("wk", wk, &mut out);
                push_indexed("wv", wv, &mut out);
            }
            KvWeights::Shared { wk, wv } => {
                out.push(("wk".into(), wk));
                out.push(("wv".into(), wv));
            }
            KvWeights::Latent { wdown, wup_k, wup_v } => {
                out.push(("wdown".into(), wdown));
                push_indexed("wup_k", wup_k, &mut out);
                push_indexed("wup_v", wup_v, &mut out);
            }
            KvWeights::LowRank { k, v } => {
                out.push(("wk_shared".into(), &k.shared));
                out.push(("wv_shared".into(), &v.shared));
                push_indexed("uk", &k.u, &mut out);
                push_indexed("bk", &k.b, &mut out);
                push_indexed("uv", &v.u, &mut out);
                push_indexed("bv", &v.b, &mut out);
            }
        }
        out
    }

    /// Inverse of [`WeightSet::named_tensors`]. Unknown or missing names are errors.
    pub fn from_named(config: AttentionConfig, mut tensors: BTreeMap<String, Matrix<T>>) -> Result<Self> {
        config.validate()?;
        let h = config.n_heads;
        let mut take = |name: String| {
            tensors
                .remove(&name)
                .ok_or_else(|| Error::archive(name, "missing tensor"))
        };
        let many = |prefix: &str, n: usize, take: &mut dyn FnMut(String) -> Result<Matrix<T>>| {
            (0..n).map(|i| take(format!("{prefix}.{i}"))).collect::<Result<Vec<_>>>()
        };
        let wq = many("wq", h, &mut take)?;
        let kv = match config.mechanism {
            Mechanism::Mha => KvWeights::PerHead {
                wk: many("wk", h, &mut take)?,
                wv: many("wv", h, &mut take)?,
            },
            Mechanism::Mqa => KvWeights::Shared {
                wk: take("wk".into())?,
                wv: take("wv".into())?,
            },
            Mechanism::Gqa => KvWeights::Grouped {
                wk: many("wk", config.n_groups, &mut take)?,
                wv: many("wv", config.n_groups, &mut take)?,
            },
            Mechanism::Mla => KvWeights::Latent {
                wdown: take("wdown".into())?,
                wup_k: many("wup_k", h, &mut take)?,
                wup_v: many("wup_v", h, &mut take)?,
            },
            Mechanism::Lrkv => {
                let k_shared = take("wk_shared".into())?;
                let v_shared = take("wv_shared".into())?;
                let k = LowRankProjection {
                    shared: k_shared,
                    u: many("uk", h, &mut take)?,
                    b: many("bk", h, &mut take)?,
                };
                let v = LowRankProjection {
                    shared: v_shared,
                    u: many("uv", h, &mut take)?,
                    b: many("bv", h, &mut take)?,
                };
                KvWeights::LowRank { k, v }
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::archive(extra.clone(), "unexpected tensor for mechanism"));
        }
        WeightSet::from_parts(config, wq, kv)
    }

    fn check(&self) -> Result<()> {
        let c = &self.config;
        let (d, h, dh) = (c.d, c.n_heads, c.d_h);
        let expect = |name: &str, m: &Matrix<T>, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::Dimension(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("weights"));
            }
            Ok(())
        };
        let expect_all = |name: &str, ms: &[Matrix<T>], n: usize, shape| -> Result<()> {
            if ms.len() != n {
                return Err(Error::Dimension(format!("{name}: expected {n} matrices, got {}", ms.len())));
            }
            ms.iter().try_for_each(|m| expect(name, m, shape))
        };
        expect_all("wq", &self.wq, h, (d, dh))?;
        let mech_ok = matches!(
            (&self.kv, c.mechanism),
            (KvWeights::PerHead { .. }, Mechanism::Mha)
                | (KvWeights::Shared { .. }, Mechanism::Mqa)
                | (KvWeights::Grouped { .. }, Mechanism::Gqa)
                | (KvWeights::Latent { .. }, Mechanism::Mla)
                | (KvWeights::LowRank { .. }, Mechanism::Lrkv)
        );
        if !mech_ok {
            return Err(Error::Config(format!(
                "weight payload does not match mechanism {}",
                c.mechanism
            )));
        }
        match &self.kv {
            KvWeights::PerHead { wk, wv } => {
                expect_all("wk", wk, h, (d, dh))?;
                expect_all("wv", wv, h, (d, dh))
            }
            KvWeights::Shared { wk, wv } => {
                expect("wk", wk, (d, dh))?;
                expect("wv", wv, (d, dh))
            }
            KvWeights::Grouped { wk, wv } => {
                expect_all("wk", wk, c.n_groups, (d, dh))?;
                expect_all("wv", wv, c.n_groups, (d, dh))
            }
            KvWeights::Latent { wdown, wup_k, wup_v } => {
                expect("wdown", wdown, (d, c.d_c))?;
                expect_all("wup_k", wup_k, h, (c.d_c, dh))?;
                expect_all("wup_v", wup_v, h, (c.d_c, dh))
            }
            KvWeights::LowRank { k, v } => {
                for (p, name) in [(k, "k"), (v, "v")] {
                    expect(name, &p.shared, (d, dh))?;
                    expect_all(name, &p.u, h, (d, c.r))?;
                    expect_all(name, &p.b, h, (dh, c.r))?;
                }
                Ok(())
            }
        }
    }
}

fn push_indexed<'a, T>(prefix: &str, ms: &'a [Matrix<T>], out: &mut Vec<(String, &'a Matrix<T>)>) {
    for (i, m) in ms.iter().enumerate() {
        out.push((format!("{prefix}.{i}"), m));
    }
}

/// Deterministically initializes weights for `config`.
///
/// Dense projections are Kaiming-normal with std `√(2/fan_in)` (fan-in `d`,
/// or `d_c` for MLA up-projections). LRKV factors are drawn with std
/// `1/√r` and then `U` is rescaled so that `‖U·Bᵀ‖_F = 0.1·‖W_shared‖_F`
/// exactly, per head and per path. Sampling happens in `f64` regardless of
/// `T`, so the `f32` weights are the rounded `f64` ones.
pub fn init_weights<T: Scalar>(config: &AttentionConfig, rng: RngSpec) -> Result<WeightSet<T>> {
    config.validate()?;
    let mut g = rng.generator(0);
    let (d, h, dh) = (config.d, config.n_heads, config.d_h);
    let kaiming = (2.0 / d as f64).sqrt();
    let mut dense = |n: usize, rows: usize, cols: usize, std: f64| -> Vec<Matrix<f64>> {
        (0..n).map(|_| g.matrix(rows, cols, std)).collect()
    };
    let wq = dense(h, d, dh, kaiming);
    let kv = match config.mechanism {
        Mechanism::Mha => KvWeights::PerHead {
            wk: dense(h, d, dh, kaiming),
            wv: dense(h, d, dh, kaiming),
        },
        Mechanism::Mqa => {
            let mut m = dense(2, d, dh, kaiming);
            let wv = m.pop().expect("two");
            let wk = m.pop().expect("two");
            KvWeights::Shared { wk, wv }
        }
        Mechanism::Gqa => KvWeights::Grouped {
            wk: dense(config.n_groups, d, dh, kaiming),
            wv: dense(config.n_groups, d, dh, kaiming),
        },
        Mechanism::Mla => {
            let up = (2.0 / config.d_c as f64).sqrt();
            KvWeights::Latent {
                wdown: dense(1, d, config.d_c, kaiming).pop().expect("one"),
                wup_k: dense(h, config.d_c, dh, up),
                wup_v: dense(h, config.d_c, dh, up),
            }
        }
        Mechanism::Lrkv => {
            let mut path = || -> LowRankProjection<f64> {
                let shared: Matrix<f64> = g.matrix(d, dh, kaiming);
                let target = INIT_RESIDUAL_RATIO * shared.frobenius_norm();
                let sigma = if config.r == 0 { 0.0 } else { 1.0 / (config.r as f64).sqrt() };
                let mut u = Vec::with_capacity(h);
                let mut b = Vec::with_capacity(h);
                for _ in 0..h {
                    let uh: Matrix<f64> = g.matrix(d, config.r, sigma);
                    let bh: Matrix<f64> = g.matrix(dh, config.r, sigma);
                    let norm = uh.matmul_t(&bh).frobenius_norm();
                    let uh = if norm > 0.0 { uh.scale(target / norm) } else { uh };
                    u.push(uh);
                    b.push(bh);
                }
                LowRankProjection { shared, u, b }
            };
            let k = path();
            let v = path();
            KvWeights::LowRank { k, v }
        }
    };
    WeightSet::from_parts(config.clone(), wq, kv).map(|w| w.cast())
}
