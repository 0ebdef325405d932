//! Named model scales with per-mechanism attention settings.

use crate::config::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalePreset {
    pub name: &'static str,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d: usize,
    pub d_h: usize,
    /// GQA key/value groups.
    pub gqa_groups: usize,
    /// MLA latent width.
    pub mla_latent: usize,
    /// LRKV rank used for the headline cache percentages.
    pub lrkv_rank_table: usize,
    /// LRKV rank used for the measured memory rows.
    pub lrkv_rank_measured: usize,
}

const fn preset(
    name: &'static str,
    n_layers: usize,
    n_heads: usize,
    gqa_groups: usize,
    mla_latent: usize,
    lrkv_rank_table: usize,
) -> ScalePreset {
    ScalePreset {
        name,
        n_layers,
        n_heads,
        d: n_heads * 128,
        d_h: 128,
        gqa_groups,
        mla_latent,
        lrkv_rank_table,
        lrkv_rank_measured: 64,
    }
}

impl ScalePreset {
    pub const ALL: [ScalePreset; 5] = [
        preset("128M", 12, 6, 3, 128, 46),
        preset("512M", 24, 12, 4, 256, 51),
        preset("1.2B", 24, 12, 4, 256, 51),
        preset("2.5B", 18, 18, 6, 384, 55),
        preset("6.3B", 32, 32, 2, 1024, 54),
    ];

    pub fn by_name(name: &str) -> Result<ScalePreset> {
        Self::ALL
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .copied()
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|p| p.name).collect();
                Error::Config(format!("unknown preset {name:?}; known: {}", known.join(", ")))
            })
    }

    /// Config for `mechanism` at this scale, with the measured LRKV rank.
    pub fn config(&self, mechanism: Mechanism) -> AttentionConfig {
        AttentionConfig::new(mechanism, self.n_heads, self.d_h)
            .with_layers(self.n_layers)
            .with_groups(self.gqa_groups)
            .with_latent(self.mla_latent)
            .with_rank(self.lrkv_rank_measured)
    }

    /// Same as [`ScalePreset::config`] but with the table LRKV rank.
    pub fn table_config(&self, mechanism: Mechanism) -> AttentionConfig {
        self.config(mechanism).with_rank(self.lrkv_rank_table)
    }
}
