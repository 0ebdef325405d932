//! Closed-form KV-cache, parameter, and decode-FLOP accounting.
//!
//! Conventions: a multiply-add is 2 FLOPs, softmax is 5 FLOPs per position,
//! FLOP counts are per decode step, per layer, for one sequence. "MiB" is
//! 2²⁰ bytes.

use serde::Serialize;

use crate::cache::DecodeCache;
use crate::config::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};
use crate::linalg::Scalar;

/// Documented in every FLOP CSV.
pub const FLOP_CONVENTION: &str = "mul-add=2;softmax=5/position;per layer per step per sequence";

pub const MIB: f64 = 1024.0 * 1024.0;

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / MIB
}

/// Inputs to the cache-size model.
#[derive(Debug, Clone, PartialEq)]
pub struct CostQuery {
    pub config: AttentionConfig,
    /// Cached sequence length.
    pub tokens: usize,
    pub batch: usize,
    pub bytes_per_element: usize,
    /// Cached MLA latent streams: 1 (one `Z` shared by K and V) or 2.
    pub mla_latent_streams: usize,
}

impl CostQuery {
    pub const DEFAULT_MLA_STREAMS: usize = 2;

    /// Batch 1, 2-byte elements, default MLA stream count.
    pub fn new(config: AttentionConfig, tokens: usize) -> Self {
        CostQuery {
            config,
            tokens,
            batch: 1,
            bytes_per_element: 2,
            mla_latent_streams: Self::DEFAULT_MLA_STREAMS,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_bytes(mut self, bytes: usize) -> Self {
        self.bytes_per_element = bytes;
        self
    }

    pub fn with_mla_streams(mut self, streams: usize) -> Self {
        self.mla_latent_streams = streams;
        self
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism) -> Self {
        self.config.mechanism = mechanism;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.batch == 0 {
            return Err(Error::Parameter("batch must be positive".into()));
        }
        if ![1, 2, 4, 8].contains(&self.bytes_per_element) {
            return Err(Error::Parameter(format!(
                "bytes_per_element must be 1, 2, 4 or 8, got {}",
                self.bytes_per_element
            )));
        }
        if !(1..=2).contains(&self.mla_latent_streams) {
            return Err(Error::Parameter(format!(
                "mla_latent_streams must be 1 or 2, got {}",
                self.mla_latent_streams
            )));
        }
        Ok(())
    }

    /// Cached elements per token per layer.
    pub fn elements_per_token(&self) -> u64 {
        let c = &self.config;
        let (h, dh) = (c.n_heads as u64, c.d_h as u64);
        match c.mechanism {
            Mechanism::Mha => 2 * h * dh,
            Mechanism::Mqa => 2 * dh,
            Mechanism::Gqa => 2 * c.n_groups as u64 * dh,
            Mechanism::Mla => self.mla_latent_streams as u64 * c.d_c as u64,
            Mechanism::Lrkv => 2 * (dh + h * c.r as u64),
        }
    }
}

/// KV-cache bytes across all layers.
pub fn cache_bytes(q: &CostQuery) -> Result<u64> {
    q.validate()?;
    Ok(q.config.n_layers as u64
        * q.batch as u64
        * q.tokens as u64
        * q.elements_per_token()
        * q.bytes_per_element as u64)
}

/// Cache size relative to MHA with the same shape. For LRKV this is the
/// closed form `1/H + r/d_h`; other mechanisms use the byte ratio under the
/// default query.
pub fn cache_ratio(config: &AttentionConfig) -> Result<f64> {
    config.validate()?;
    if config.mechanism == Mechanism::Lrkv {
        return Ok(1.0 / config.n_heads as f64 + config.r as f64 / config.d_h as f64);
    }
    let q = CostQuery::new(config.clone(), 1);
    ratio_vs_mha(&q)
}

fn ratio_vs_mha(q: &CostQuery) -> Result<f64> {
    let mha = q.clone().with_mechanism(Mechanism::Mha);
    let mut probe = q.clone();
    if probe.tokens == 0 {
        probe.tokens = 1;
    }
    let mut mha_probe = mha;
    mha_probe.tokens = probe.tokens;
    Ok(cache_bytes(&probe)? as f64 / cache_bytes(&mha_probe)? as f64)
}

/// Key/value projection parameters per layer (queries excluded).
pub fn kv_param_count(config: &AttentionConfig) -> Result<u64> {
    config.validate()?;
    let (d, h, dh) = (config.d as u64, config.n_heads as u64, config.d_h as u64);
    Ok(match config.mechanism {
        Mechanism::Mha => 2 * h * d * dh,
        Mechanism::Mqa => 2 * d * dh,
        Mechanism::Gqa => 2 * config.n_groups as u64 * d * dh,
        Mechanism::Mla => {
            let dc = config.d_c as u64;
            d * dc + 2 * h * dc * dh
        }
        Mechanism::Lrkv => {
            let r = config.r as u64;
            2 * d * dh + 2 * h * r * (d + dh)
        }
    })
}

/// FLOPs of one decode step split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecodeFlops {
    /// The `O(T)` pass over cached positions: query-key scores, softmax,
    /// value aggregation, and for LRKV the latent-side scores and values.
    pub scan: u64,
    /// Work needed to obtain per-head keys/values beyond the scan: MLA's
    /// latent-to-head expansion, LRKV's `q·B` and `B`-lift.
    pub reconstruction: u64,
    /// Projections of the new token (query, and whatever gets cached).
    pub projection: u64,
}

impl DecodeFlops {
    pub fn attention(&self) -> u64 {
        self.scan + self.reconstruction
    }

    pub fn total(&self) -> u64 {
        self.scan + self.reconstruction + self.projection
    }
}

/// FLOP breakdown for a decode step attending over `tokens` positions.
///
/// MLA is counted on its explicit path (expanding `Z` to per-head keys and
/// values every step); LRKV on its factored path.
pub fn decode_flops_breakdown(config: &AttentionConfig, tokens: usize) -> Result<DecodeFlops> {
    config.validate()?;
    let t = tokens as u64;
    let (d, h, dh) = (config.d as u64, config.n_heads as u64, config.d_h as u64);
    let (r, dc, g) = (config.r as u64, config.d_c as u64, config.n_groups as u64);
    let base_scan = h * (4 * t * dh + 5 * t);
    let q_proj = h * 2 * d * dh;
    Ok(match config.mechanism {
        Mechanism::Mha => DecodeFlops {
            scan: base_scan,
            reconstruction: 0,
            projection: q_proj + h * 4 * d * dh,
        },
        Mechanism::Mqa => DecodeFlops {
            scan: base_scan,
            reconstruction: 0,
            projection: q_proj + 4 * d * dh,
        },
        Mechanism::Gqa => DecodeFlops {
            scan: base_scan,
            reconstruction: 0,
            projection: q_proj + g * 4 * d * dh,
        },
        Mechanism::Mla => DecodeFlops {
            scan: base_scan,
            reconstruction: h * 4 * t * dc * dh,
            projection: q_proj + 2 * d * dc,
        },
        Mechanism::Lrkv => DecodeFlops {
            scan: base_scan + h * 4 * t * r,
            reconstruction: h * 4 * r * dh,
            projection: q_proj + 4 * d * dh + h * 4 * d * r,
        },
    })
}

/// `(total FLOPs, relative overhead of the total vs. MHA)` for one step.
pub fn decode_flops(q: &CostQuery) -> Result<(u64, f64)> {
    q.validate()?;
    let own = decode_flops_breakdown(&q.config, q.tokens)?.total();
    let mha = decode_flops_breakdown(&q.config.clone().with_mechanism(Mechanism::Mha), q.tokens)?.total();
    Ok((own, own as f64 / mha as f64 - 1.0))
}

/// Relative overhead vs. MHA of the attention part only (scan plus
/// reconstruction, new-token projections excluded). Tends to about `r/d_h`
/// for LRKV as `tokens` grows.
pub fn attention_overhead(config: &AttentionConfig, tokens: usize) -> Result<f64> {
    let own = decode_flops_breakdown(config, tokens)?.attention();
    let mha = decode_flops_breakdown(&config.clone().with_mechanism(Mechanism::Mha), tokens)?.attention();
    Ok(own as f64 / mha as f64 - 1.0)
}

/// How the reconstruction term scales with sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TDependence {
    None,
    Linear,
}

impl TDependence {
    pub fn label(self) -> &'static str {
        match self {
            TDependence::None => "none",
            TDependence::Linear => "linear",
        }
    }
}

/// Classifies the reconstruction term by evaluating the counter at
/// several sequence lengths.
pub fn reconstruction_t_dependence(config: &AttentionConfig) -> Result<TDependence> {
    let at = |t| decode_flops_breakdown(config, t).map(|f| f.reconstruction);
    let (a, b, c) = (at(1024)?, at(2048)?, at(4096)?);
    if a == b && b == c {
        Ok(TDependence::None)
    } else if c - b == 2 * (b - a) {
        Ok(TDependence::Linear)
    } else {
        Err(Error::Numerical("reconstruction count is neither constant nor linear in T".into()))
    }
}

/// Bytes held by an actual cache at its capacity, for one layer.
pub fn measured_cache_bytes<T: Scalar>(cache: &DecodeCache<T>, bytes_per_element: usize) -> u64 {
    cache.element_count() as u64 * bytes_per_element as u64
}

/// Summary of every model for one query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub cache_bytes: u64,
    pub cache_ratio_vs_mha: f64,
    pub decode_flops_per_step: u64,
    pub flops_overhead_vs_mha: f64,
    pub kv_param_count: u64,
}

pub fn cost_report(q: &CostQuery) -> Result<CostReport> {
    let bytes = cache_bytes(q)?;
    let (flops, overhead) = decode_flops(q)?;
    Ok(CostReport {
        cache_bytes: bytes,
        cache_ratio_vs_mha: ratio_vs_mha(q)?,
        decode_flops_per_step: flops,
        flops_overhead_vs_mha: overhead,
        kv_param_count: kv_param_count(&q.config)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub r: usize,
    pub cache_ratio: f64,
    pub cache_bytes: u64,
    pub kv_param_count: u64,
    /// Attention-only decode overhead vs. MHA at the table's sequence length.
    pub decode_overhead: f64,
}

/// One row per LRKV rank, other fields taken from `base`.
pub fn ablation_table(base: &AttentionConfig, ranks: &[usize], tokens: usize) -> Result<Vec<AblationRow>> {
    if base.mechanism != Mechanism::Lrkv {
        return Err(Error::UnsupportedMechanism {
            op: "rank ablation",
            mechanism: base.mechanism,
        });
    }
    ranks
        .iter()
        .map(|&r| {
            let c = base.clone().with_rank(r);
            Ok(AblationRow {
                r,
                cache_ratio: cache_ratio(&c)?,
                cache_bytes: cache_bytes(&CostQuery::new(c.clone(), tokens))?,
                kv_param_count: kv_param_count(&c)?,
                decode_overhead: attention_overhead(&c, tokens)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small128m(mech: Mechanism) -> AttentionConfig {
        AttentionConfig::new(mech, 6, 128)
            .with_layers(12)
            .with_groups(3)
            .with_latent(128)
            .with_rank(64)
    }

    #[test]
    fn zero_tokens_zero_bytes() {
        for mech in Mechanism::ALL {
            assert_eq!(cache_bytes(&CostQuery::new(small128m(mech), 0)).unwrap(), 0);
        }
    }

    #[test]
    fn zero_rank_matches_mqa() {
        let lrkv = CostQuery::new(small128m(Mechanism::Lrkv).with_rank(0), 333);
        let mqa = CostQuery::new(small128m(Mechanism::Mqa), 333);
        assert_eq!(cache_bytes(&lrkv).unwrap(), cache_bytes(&mqa).unwrap());
        assert_eq!(
            kv_param_count(&lrkv.config).unwrap(),
            kv_param_count(&mqa.config).unwrap()
        );
        let f = decode_flops_breakdown(&lrkv.config, 100).unwrap();
        let m = decode_flops_breakdown(&mqa.config, 100).unwrap();
        assert_eq!(f.scan, m.scan);
        assert_eq!(f.reconstruction, 0);
    }

    #[test]
    fn gqa_with_all_groups_is_mha() {
        let c = AttentionConfig::new(Mechanism::Gqa, 6, 16).with_groups(6);
        assert_eq!(
            kv_param_count(&c).unwrap(),
            kv_param_count(&c.clone().with_mechanism(Mechanism::Mha)).unwrap()
        );
        assert_eq!(cache_ratio(&c).unwrap(), 1.0);
    }

    #[test]
    fn lrkv_params_128m() {
        let c = AttentionConfig::new(Mechanism::Lrkv, 6, 128).with_rank(64);
        assert_eq!(kv_param_count(&c).unwrap(), 884_736);
        assert_eq!(kv_param_count(&c.with_mechanism(Mechanism::Mha)).unwrap(), 1_179_648);
    }

    #[test]
    fn ratio_formula() {
        let c = AttentionConfig::new(Mechanism::Lrkv, 6, 128).with_rank(46);
        assert!((cache_ratio(&c).unwrap() - 0.526).abs() < 5e-4);
        let c = c.with_rank(64);
        assert!((cache_ratio(&c).unwrap() - (1.0 / 6.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn query_validation() {
        let q = CostQuery::new(small128m(Mechanism::Mha), 1);
        assert!(cache_bytes(&q.clone().with_bytes(3)).is_err());
        assert!(cache_bytes(&q.clone().with_batch(0)).is_err());
        assert!(cache_bytes(&q.clone().with_mla_streams(3)).is_err());
    }

    #[test]
    fn reconstruction_classification() {
        assert_eq!(
            reconstruction_t_dependence(&small128m(Mechanism::Mla)).unwrap(),
            TDependence::Linear
        );
        for mech in [Mechanism::Mha, Mechanism::Mqa, Mechanism::Gqa, Mechanism::Lrkv] {
            assert_eq!(reconstruction_t_dependence(&small128m(mech)).unwrap(), TDependence::None);
        }
    }

    #[test]
    fn ablation_needs_lrkv() {
        assert!(ablation_table(&small128m(Mechanism::Mha), &[8], 2048).is_err());
        assert!(ablation_table(&small128m(Mechanism::Lrkv), &[], 2048).unwrap().is_empty());
    }
}
