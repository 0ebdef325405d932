use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five attention variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mha,
    Mqa,
    Gqa,
    Mla,
    Lrkv,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Mha,
        Mechanism::Mqa,
        Mechanism::Gqa,
        Mechanism::Mla,
        Mechanism::Lrkv,
    ];

    /// Upper-case label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Mechanism::Mha => "MHA",
            Mechanism::Mqa => "MQA",
            Mechanism::Gqa => "GQA",
            Mechanism::Mla => "MLA",
            Mechanism::Lrkv => "LRKV",
        }
    }

    /// Whether a factored (no per-head reconstruction) decode path exists.
    pub fn has_factored_decode(self) -> bool {
        matches!(self, Mechanism::Mla | Mechanism::Lrkv)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mha" => Ok(Mechanism::Mha),
            "mqa" => Ok(Mechanism::Mqa),
            "gqa" => Ok(Mechanism::Gqa),
            "mla" => Ok(Mechanism::Mla),
            "lrkv" => Ok(Mechanism::Lrkv),
            _ => Err(Error::Config(format!("unknown mechanism {s:?}"))),
        }
    }
}

/// Shape and variant of one attention layer.
///
/// Field names in the JSON form follow the usual notation (`H`, `d_h`,
/// `G`, ...). Fields that do not apply to `mechanism` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    /// Model width.
    pub d: usize,
    #[serde(rename = "H")]
    pub n_heads: usize,
    pub d_h: usize,
    /// Layer count; only the cost model reads it.
    #[serde(default = "one")]
    pub n_layers: usize,
    /// LRKV residual rank.
    #[serde(default)]
    pub r: usize,
    /// MLA latent width.
    #[serde(default = "one")]
    pub d_c: usize,
    /// GQA key/value head count.
    #[serde(rename = "G", default = "one")]
    pub n_groups: usize,
    #[serde(default)]
    pub qk_norm: bool,
    /// Defaults to `1/√d_h` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub softmax_scale: Option<f64>,
}

fn one() -> usize {
    1
}

impl AttentionConfig {
    /// A config with every optional field at its default.
    pub fn new(mechanism: Mechanism, n_heads: usize, d_h: usize) -> Self {
        AttentionConfig {
            mechanism,
            d: n_heads * d_h,
            n_heads,
            d_h,
            n_layers: 1,
            r: 0,
            d_c: 1,
            n_groups: 1,
            qk_norm: false,
            softmax_scale: None,
        }
    }

    pub fn with_rank(mut self, r: usize) -> Self {
        self.r = r;
        self
    }

    pub fn with_latent(mut self, d_c: usize) -> Self {
        self.d_c = d_c;
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.n_groups = g;
        self
    }

    pub fn with_layers(mut self, n: usize) -> Self {
        self.n_layers = n;
        self
    }

    pub fn with_qk_norm(mut self, on: bool) -> Self {
        self.qk_norm = on;
        self
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism) -> Self {
        self.mechanism = mechanism;
        self
    }

    pub fn scale(&self) -> f64 {
        self.softmax_scale
            .unwrap_or_else(|| 1.0 / (self.d_h as f64).sqrt())
    }

    /// Number of stored K/V streams for full-width mechanisms.
    pub fn kv_streams(&self) -> usize {
        match self.mechanism {
            Mechanism::Mha => self.n_heads,
            Mechanism::Gqa => self.n_groups,
            Mechanism::Mqa | Mechanism::Mla | Mechanism::Lrkv => 1,
        }
    }

    /// GQA head-to-group map: contiguous blocks of `H/G` heads.
    pub fn group_of(&self, head: usize) -> usize {
        head * self.n_groups / self.n_heads
    }

    pub fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.n_heads {
            return Err(Error::HeadIndex {
                head,
                n_heads: self.n_heads,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_heads == 0 {
            return fail("H must be positive".into());
        }
        if self.d_h == 0 {
            return fail("d_h must be positive".into());
        }
        if self.d != self.n_heads * self.d_h {
            return fail(format!(
                "d = H * d_h violated: d={}, H={}, d_h={}",
                self.d, self.n_heads, self.d_h
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be positive".into());
        }
        if let Some(s) = self.softmax_scale {
            if !(s.is_finite() && s > 0.0) {
                return fail(format!("softmax_scale must be finite and positive, got {s}"));
            }
        }
        match self.mechanism {
            Mechanism::Gqa => {
                if self.n_groups == 0 || !self.n_heads.is_multiple_of(self.n_groups) {
                    return fail(format!(
                        "GQA requires H mod G = 0 with G >= 1: H={}, G={}",
                        self.n_heads, self.n_groups
                    ));
                }
            }
            Mechanism::Lrkv => {
                if self.r > self.d {
                    return fail(format!("LRKV requires r <= d: r={}, d={}", self.r, self.d));
                }
            }
            Mechanism::Mla => {
                if self.d_c == 0 || self.d_c > self.d {
                    return fail(format!(
                        "MLA requires 1 <= d_c <= d: d_c={}, d={}",
                        self.d_c, self.d
                    ));
                }
            }
            Mechanism::Mha | Mechanism::Mqa => {}
        }
        Ok(())
    }
}
