//! The `kvlab` command line.
//!
//! Every subcommand writes CSV with a header row, to `--out` or stdout.
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::archive::{read_archive_any, write_archive};
use crate::config::{AttentionConfig, Mechanism};
use crate::cost::{
    self, ablation_table, attention_overhead, decode_flops_breakdown, kv_param_count, reconstruction_t_dependence,
    CostQuery, FLOP_CONVENTION,
};
use crate::diversity::{diversity_report, factorization_gap, magnitude_report, GramMatrix, SpectrumReport};
use crate::equivalence::{equivalence_report, EquivalenceRow, Tolerance};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check, FD_STEP};
use crate::linalg::Dtype;
use crate::preset::ScalePreset;
use crate::rng::RngSpec;
use crate::weights::init_weights;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kvlab", version, about = "Low-rank KV attention laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample deterministic weights and write them to an archive.
    GenWeights(GenWeightsArgs),
    /// Check factored decode against explicit reconstruction and the forward pass.
    Verify(VerifyArgs),
    /// KV-cache bytes for every mechanism.
    Memory(MemoryArgs),
    /// Per-step decode FLOPs for every mechanism.
    Flops(FlopsArgs),
    /// LRKV cache and cost across ranks.
    Ablate(AblateArgs),
    /// Head-diversity spectra of an archived weight set.
    Diversity(DiversityArgs),
    /// Learned LRKV residuals against the truncated SVD of a reference.
    SvdCompare(SvdCompareArgs),
    /// Finite-difference check of the projection gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct Shape {
    /// Named scale (128M, 512M, 1.2B, 2.5B, 6.3B).
    #[arg(long, conflicts_with = "config_json")]
    preset: Option<String>,
    /// JSON file with an attention config.
    #[arg(long)]
    config_json: Option<PathBuf>,
    /// Mechanism; required with --preset, overrides the JSON otherwise.
    #[arg(long)]
    mechanism: Option<Mechanism>,
    /// LRKV rank override.
    #[arg(long)]
    rank: Option<usize>,
}

impl Shape {
    fn resolve(&self) -> Result<AttentionConfig> {
        let mut c = match (&self.preset, &self.config_json) {
            (Some(p), None) => {
                let mech = self
                    .mechanism
                    .ok_or_else(|| Error::Parameter("--mechanism is required with --preset".into()))?;
                ScalePreset::by_name(p)?.config(mech)
            }
            (None, Some(path)) => {
                let mut c = load_config(path)?;
                if let Some(m) = self.mechanism {
                    c.mechanism = m;
                }
                c
            }
            _ => return Err(Error::Parameter("one of --preset or --config-json is required".into())),
        };
        if let Some(r) = self.rank {
            c.r = r;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct GenWeightsArgs {
    #[command(flatten)]
    shape: Shape,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f64")]
    dtype: Dtype,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    shape: Shape,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value = "f64")]
    dtype: Dtype,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MemoryArgs {
    #[arg(long, conflicts_with = "custom")]
    preset: Option<String>,
    /// JSON attention config; its mechanism field is ignored.
    #[arg(long)]
    custom: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 2048)]
    tokens: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    bytes: usize,
    #[arg(long, default_value_t = CostQuery::DEFAULT_MLA_STREAMS)]
    mla_streams: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long, default_value = "128M")]
    preset: String,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 4096)]
    tokens: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, default_value = "128M")]
    preset: String,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 2048)]
    tokens: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiversityArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Files are written as `<prefix>_<table>.csv`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Debug, Args)]
struct SvdCompareArgs {
    /// LRKV archive.
    #[arg(long)]
    weights: PathBuf,
    /// MHA archive with the same d, H and d_h.
    #[arg(long)]
    reference: PathBuf,
    /// Rank of the SVD optimum; defaults to the LRKV rank.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    config_json: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    /// Entries sampled per tensor.
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Largest relative error accepted.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parameter(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

/// `Ok(false)` means the command ran but a check failed.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::GenWeights(a) => gen_weights(a).map(|()| true),
        Command::Verify(a) => verify(a),
        Command::Memory(a) => memory(a).map(|()| true),
        Command::Flops(a) => flops(a).map(|()| true),
        Command::Ablate(a) => ablate(a).map(|()| true),
        Command::Diversity(a) => diversity(a).map(|()| true),
        Command::SvdCompare(a) => svd_compare(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn load_config(path: &Path) -> Result<AttentionConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(io::BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn sci(v: f64) -> String {
    format!("{v:e}")
}

fn gen_weights(a: GenWeightsArgs) -> Result<()> {
    let c = a.shape.resolve()?;
    let rng = RngSpec::new(a.seed);
    match a.dtype {
        Dtype::F32 => write_archive(&init_weights::<f32>(&c, rng)?, &a.out),
        Dtype::F64 => write_archive(&init_weights::<f64>(&c, rng)?, &a.out),
    }
}

pub const VERIFY_HEADER: [&str; 15] = [
    "trial",
    "mechanism",
    "dtype",
    "tokens",
    "prefill_tokens",
    "max_logit_diff",
    "max_output_diff",
    "max_diff",
    "max_forward_diff",
    "explicit_elements",
    "factored_elements",
    "explicit_flops",
    "factored_flops",
    "tolerance",
    "pass",
];

fn verify(a: VerifyArgs) -> Result<bool> {
    let c = a.shape.resolve()?;
    let rng = RngSpec::new(a.seed);
    let rows: Vec<EquivalenceRow> = match a.dtype {
        Dtype::F32 => equivalence_report::<f32>(&c, rng, a.tokens, a.trials)?,
        Dtype::F64 => equivalence_report::<f64>(&c, rng, a.tokens, a.trials)?,
    };
    let tol = Tolerance::for_dtype(a.dtype);
    let mut w = writer(a.out.as_deref())?;
    w.write_record(VERIFY_HEADER)?;
    let mut all = true;
    for r in &rows {
        let pass = r.passes(tol);
        all &= pass;
        w.write_record([
            r.trial.to_string(),
            r.mechanism.label().to_string(),
            r.dtype.to_string(),
            r.tokens.to_string(),
            r.prefill_tokens.to_string(),
            opt(r.max_logit_diff.map(sci)),
            opt(r.max_output_diff.map(sci)),
            opt(r.max_diff().map(sci)),
            sci(r.max_forward_diff),
            r.explicit_elements.to_string(),
            opt(r.factored_elements),
            r.explicit_flops.to_string(),
            opt(r.factored_flops),
            sci(tol.equivalence),
            pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(all)
}

pub const MEMORY_HEADER: [&str; 12] = [
    "mechanism",
    "cache_bytes",
    "ratio_vs_mha",
    "cache_mib",
    "n_layers",
    "tokens",
    "batch",
    "bytes_per_element",
    "elements_per_token",
    "kv_params",
    "r",
    "mla_latent_streams",
];

fn memory(a: MemoryArgs) -> Result<()> {
    let mut base = match (&a.preset, &a.custom) {
        (Some(p), None) => ScalePreset::by_name(p)?.config(Mechanism::Mha),
        (None, Some(path)) => load_config(path)?,
        _ => return Err(Error::Parameter("one of --preset or --custom is required".into())),
    };
    if let Some(r) = a.rank {
        base.r = r;
    }
    let query = |m: Mechanism| {
        CostQuery::new(base.clone().with_mechanism(m), a.tokens)
            .with_batch(a.batch)
            .with_bytes(a.bytes)
            .with_mla_streams(a.mla_streams)
    };
    let mha = cost::cache_bytes(&query(Mechanism::Mha))?;
    let mut w = writer(a.out.as_deref())?;
    w.write_record(MEMORY_HEADER)?;
    for m in Mechanism::ALL {
        let q = query(m);
        let bytes = cost::cache_bytes(&q)?;
        let ratio = if mha == 0 { "NA".into() } else { format!("{:.3}", bytes as f64 / mha as f64) };
        w.write_record([
            m.label().to_string(),
            bytes.to_string(),
            ratio,
            format!("{:.1}", cost::mib(bytes)),
            q.config.n_layers.to_string(),
            q.tokens.to_string(),
            q.batch.to_string(),
            q.bytes_per_element.to_string(),
            q.elements_per_token().to_string(),
            kv_param_count(&q.config)?.to_string(),
            if m == Mechanism::Lrkv { q.config.r.to_string() } else { "NA".into() },
            if m == Mechanism::Mla { q.mla_latent_streams.to_string() } else { "NA".into() },
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const FLOPS_HEADER: [&str; 11] = [
    "mechanism",
    "tokens",
    "scan_flops",
    "reconstruction_flops",
    "projection_flops",
    "attention_flops",
    "total_flops",
    "attention_overhead_vs_mha",
    "total_overhead_vs_mha",
    "reconstruction_t_dependence",
    "flop_convention",
];

fn flops(a: FlopsArgs) -> Result<()> {
    let preset = ScalePreset::by_name(&a.preset)?;
    let mut w = writer(a.out.as_deref())?;
    w.write_record(FLOPS_HEADER)?;
    let mha_total = decode_flops_breakdown(&preset.config(Mechanism::Mha), a.tokens)?.total();
    for m in Mechanism::ALL {
        let mut c = preset.config(m);
        if let Some(r) = a.rank {
            c.r = r;
        }
        let f = decode_flops_breakdown(&c, a.tokens)?;
        w.write_record([
            m.label().to_string(),
            a.tokens.to_string(),
            f.scan.to_string(),
            f.reconstruction.to_string(),
            f.projection.to_string(),
            f.attention().to_string(),
            f.total().to_string(),
            format!("{:.4}", attention_overhead(&c, a.tokens)?),
            format!("{:.4}", f.total() as f64 / mha_total as f64 - 1.0),
            reconstruction_t_dependence(&c)?.label().to_string(),
            FLOP_CONVENTION.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const ABLATE_HEADER: [&str; 6] = ["r", "cache_ratio", "cache_pct", "cache_bytes", "kv_params", "attention_overhead"];

fn ablate(a: AblateArgs) -> Result<()> {
    let base = ScalePreset::by_name(&a.preset)?.config(Mechanism::Lrkv);
    let rows = ablation_table(&base, &a.ranks, a.tokens)?;
    let mut w = writer(a.out.as_deref())?;
    w.write_record(ABLATE_HEADER)?;
    for r in rows {
        w.write_record([
            r.r.to_string(),
            format!("{:.3}", r.cache_ratio),
            format!("{:.1}", 100.0 * r.cache_ratio),
            r.cache_bytes.to_string(),
            r.kv_param_count.to_string(),
            format!("{:.4}", r.decode_overhead),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn prefixed(prefix: &Path, table: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(format!("_{table}.csv"));
    prefix.with_file_name(name)
}

fn write_matrix(path: &Path, g: &GramMatrix) -> Result<()> {
    let mut w = writer(Some(path))?;
    let n = g.n();
    let mut header = vec!["head".to_string()];
    header.extend((0..n).map(|j| format!("h{j}")));
    w.write_record(&header)?;
    for i in 0..n {
        let mut row = vec![i.to_string()];
        row.extend(g.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn diversity(a: DiversityArgs) -> Result<()> {
    let weights = read_archive_any(&a.weights)?.to_f64();
    let rep = diversity_report(&weights)?;
    write_matrix(&prefixed(&a.out_prefix, "similarity"), &rep.similarity)?;
    write_matrix(&prefixed(&a.out_prefix, "similarity_centered"), &rep.centered_similarity)?;
    let variants: [(&str, &SpectrumReport); 2] = [("uncentered", &rep.uncentered), ("centered", &rep.centered)];

    let mut w = writer(Some(&prefixed(&a.out_prefix, "spectra")))?;
    w.write_record(["variant", "component", "eigenvalue", "variance_fraction"])?;
    for (name, s) in variants {
        for (k, (l, v)) in s.eigenvalues.iter().zip(&s.variance_fractions).enumerate() {
            w.write_record([name.to_string(), (k + 1).to_string(), l.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = writer(Some(&prefixed(&a.out_prefix, "cumulative")))?;
    w.write_record(["variant", "components", "cumulative_variance"])?;
    for (name, s) in variants {
        for (k, c) in s.cumulative_variance.iter().enumerate() {
            w.write_record([name.to_string(), (k + 1).to_string(), c.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = writer(Some(&prefixed(&a.out_prefix, "effective_rank")))?;
    w.write_record([
        "variant",
        "mechanism",
        "n_heads",
        "effective_rank_abs",
        "effective_rank_pct",
        "n_components_90pct",
        "degenerate",
        "degenerate_heads",
    ])?;
    let flagged: Vec<String> = rep.degenerate_heads.iter().map(usize::to_string).collect();
    for (name, s) in variants {
        w.write_record([
            name.to_string(),
            weights.mechanism().label().to_string(),
            rep.n_heads.to_string(),
            format!("{:.6}", s.effective_rank_abs),
            format!("{:.2}", 100.0 * s.effective_rank_pct),
            s.n_components_for_90pct.to_string(),
            s.degenerate.to_string(),
            flagged.join(";"),
        ])?;
    }
    w.flush()?;

    if weights.mechanism() == Mechanism::Lrkv {
        let mut w = writer(Some(&prefixed(&a.out_prefix, "magnitude")))?;
        w.write_record(["head", "path", "shared_norm", "residual_norm", "total_norm", "cosine"])?;
        for r in magnitude_report(&weights)? {
            w.write_record([
                r.head.to_string(),
                r.path.label().to_string(),
                r.shared_norm.to_string(),
                r.residual_norm.to_string(),
                r.total_norm.to_string(),
                r.cosine.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn svd_compare(a: SvdCompareArgs) -> Result<()> {
    let w = read_archive_any(&a.weights)?.to_f64();
    let reference = read_archive_any(&a.reference)?.to_f64();
    let rows = factorization_gap(&w, &reference, a.rank)?;
    let mut out = writer(a.out.as_deref())?;
    out.write_record(["head", "path", "rank", "e_learned", "e_opt", "ratio"])?;
    for r in rows {
        out.write_record([
            r.head.to_string(),
            r.path.label().to_string(),
            r.rank.to_string(),
            r.e_learned.to_string(),
            r.e_opt.to_string(),
            r.ratio.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let c = load_config(&a.config_json)?;
    let rows = gradient_check(&c, a.seed, a.tokens, a.samples)?;
    let mut w = writer(a.out.as_deref())?;
    w.write_record(["path", "tensor", "row", "col", "analytic", "numeric", "rel_error", "step", "pass"])?;
    let mut all = true;
    for r in rows {
        let pass = r.rel_error <= a.tolerance;
        all &= pass;
        w.write_record([
            r.path.label().to_string(),
            r.tensor,
            r.row.to_string(),
            r.col.to_string(),
            sci(r.analytic),
            sci(r.numeric),
            sci(r.rel_error),
            sci(FD_STEP),
            pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(all)
}
