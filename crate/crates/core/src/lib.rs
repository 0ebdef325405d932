//! Low-rank key/value attention and the baselines it is measured against.
//!
//! The crate builds MHA, MQA, GQA, MLA and LRKV attention layers from
//! deterministic weights, runs explicit and factored decode over their
//! caches, counts cache bytes and decode FLOPs in closed form, and analyzes
//! how much head-level diversity a set of weights carries.
//!
//! ```
//! use kvlab::{init_weights, prefill, step_explicit, step_factored, AttentionConfig, Matrix, Mechanism, RngSpec};
//!
//! let config = AttentionConfig::new(Mechanism::Lrkv, 4, 8).with_rank(2);
//! let w = init_weights::<f64>(&config, RngSpec::new(7)).unwrap();
//! let x: Matrix<f64> = RngSpec::new(8).generator(0).matrix(5, config.d, 1.0);
//! let cache = prefill(&w, &x, 5).unwrap();
//! let a = step_explicit(&cache, &w, x.row(4)).unwrap();
//! let b = step_factored(&cache, &w, x.row(4)).unwrap();
//! assert!(a.max_output_diff(&b) < 1e-12);
//! ```

pub mod archive;
pub mod attention;
pub mod cache;
pub mod cli;
pub mod config;
pub mod cost;
pub mod decode;
pub mod diversity;
pub mod equivalence;
pub mod error;
pub mod instrument;
pub mod linalg;
pub mod preset;
pub mod gradcheck;
pub mod rng;
pub mod weights;

pub use attention::{forward_attention, projection_backward, ProjectionGrad};
pub use cache::{prefill, CachePayload, DecodeCache};
pub use config::{AttentionConfig, Mechanism};
pub use cost::{
    ablation_table, attention_overhead, cache_bytes, cache_ratio, decode_flops, decode_flops_breakdown,
    kv_param_count, measured_cache_bytes, CostQuery, CostReport, DecodeFlops,
};
pub use decode::{decode_explicit, decode_factored, step_explicit, step_factored, DecodeStepOutput};
pub use archive::{read_archive, read_archive_any, write_archive, AnyWeights};
pub use diversity::{
    bilinear_forms, center_gram, diversity_report, factorization_gap, gram, magnitude_report, spectrum, svd_truncate, BilinearFormSet, DiversityReport,
    GramMatrix, SpectrumReport,
};
pub use equivalence::{equivalence_report, EquivalenceRow, Tolerance};
pub use error::{Error, Result};
pub use gradcheck::{gradient_check, GradcheckRow};
pub use linalg::{Dtype, Matrix, Scalar};
pub use preset::ScalePreset;
pub use rng::{Gaussian, RngSpec};
pub use weights::{init_weights, KvPath, KvWeights, LowRankProjection, WeightSet};
