use std::path::Path;
use std::process::{Command, Output};

fn kvlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvlab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn header(csv: &str) -> &str {
    csv.lines().next().unwrap_or("")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn memory_matches_golden() {
    let o = kvlab(&["memory", "--preset", "128M", "--tokens", "2048", "--batch", "1", "--bytes", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out, golden("memory_128m.csv"));
    assert!(out.contains("\nMHA,75497472,1.000,72.0,"));
    assert!(out.contains("\nLRKV,50331648,"));
}

#[test]
fn memory_custom_config_and_streams() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"mechanism":"mha","d":256,"H":4,"d_h":64,"n_layers":2,"r":8,"d_c":32,"G":2}"#).unwrap();
    let o = kvlab(&["memory", "--custom", cfg.to_str().unwrap(), "--tokens", "10", "--mla-streams", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    // 2 layers × 10 tokens × 32 latent × 2 bytes
    assert!(out.contains("\nMLA,1280,"), "{out}");
    // 2 × 10 × 2·(64 + 4·8) × 2
    assert!(out.contains("\nLRKV,7680,"), "{out}");
}

#[test]
fn ablate_and_flops_match_golden() {
    let o = kvlab(&["ablate", "--preset", "128M", "--ranks", "8,16,32,64,128"]);
    assert_eq!(stdout(&o), golden("ablate_128m.csv"));
    let o = kvlab(&["ablate", "--preset", "128M", "--ranks", "8,32,128"]);
    let ratios: Vec<String> = stdout(&o).lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    assert_eq!(ratios, ["0.229", "0.417", "1.167"]);
    let o = kvlab(&["flops", "--preset", "128M", "--tokens", "4096"]);
    assert_eq!(stdout(&o), golden("flops_128m.csv"));
}

#[test]
fn verify_schema_and_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.csv");
    let o = kvlab(&[
        "verify", "--preset", "128M", "--mechanism", "lrkv", "--tokens", "24", "--trials", "2", "--dtype", "f64", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let csv = read(&out);
    assert_eq!(header(&csv), kvlab::cli::VERIFY_HEADER.join(","));
    assert_eq!(csv.lines().count(), 3);
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert!(cols[7].parse::<f64>().unwrap() <= 1e-9);
        assert_eq!(cols[14], "true");
    }

    let o = kvlab(&["verify", "--preset", "128M", "--mechanism", "mha", "--tokens", "6", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    assert_eq!(row.split(',').nth(5), Some("NA"));
}

#[test]
fn archive_driven_commands() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let cfg = p("c.json");
    std::fs::write(&cfg, r#"{"mechanism":"lrkv","d":32,"H":4,"d_h":8,"r":3}"#).unwrap();
    let lrkv = p("l.kvl");
    let mha = p("m.kvl");
    assert_eq!(kvlab(&["gen-weights", "--config-json", &cfg, "--seed", "3", "--out", &lrkv]).status.code(), Some(0));
    let o = kvlab(&["gen-weights", "--config-json", &cfg, "--mechanism", "mha", "--dtype", "f32", "--out", &mha]);
    assert_eq!(o.status.code(), Some(0));

    let prefix = p("div");
    assert_eq!(kvlab(&["diversity", "--weights", &lrkv, "--out-prefix", &prefix]).status.code(), Some(0));
    let table = |t: &str| read(Path::new(&format!("{prefix}_{t}.csv")));
    assert_eq!(header(&table("similarity")), "head,h0,h1,h2,h3");
    assert_eq!(table("similarity").lines().count(), 5);
    assert_eq!(header(&table("similarity_centered")), "head,h0,h1,h2,h3");
    assert_eq!(header(&table("spectra")), "variant,component,eigenvalue,variance_fraction");
    assert_eq!(header(&table("cumulative")), "variant,components,cumulative_variance");
    assert_eq!(
        header(&table("effective_rank")),
        "variant,mechanism,n_heads,effective_rank_abs,effective_rank_pct,n_components_90pct,degenerate,degenerate_heads"
    );
    assert_eq!(header(&table("magnitude")), "head,path,shared_norm,residual_norm,total_norm,cosine");

    let o = kvlab(&["svd-compare", "--weights", &lrkv, "--reference", &mha]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(header(&out), "head,path,rank,e_learned,e_opt,ratio");
    assert_eq!(out.lines().count(), 9);
}

#[test]
fn gradcheck_passes_and_fails_on_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"mechanism":"lrkv","d":12,"H":3,"d_h":4,"r":2}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = kvlab(&["gradcheck", "--config-json", cfg, "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(header(&stdout(&o)), "path,tensor,row,col,analytic,numeric,rel_error,step,pass");
    let o = kvlab(&["gradcheck", "--config-json", cfg, "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(kvlab(&["memory", "--preset", "128M", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(kvlab(&["memory"]).status.code(), Some(2));
    assert_eq!(kvlab(&["memory", "--preset", "7B"]).status.code(), Some(2));
    assert_eq!(kvlab(&["memory", "--preset", "128M", "--bytes", "3"]).status.code(), Some(2));
    assert_eq!(kvlab(&["verify", "--preset", "128M"]).status.code(), Some(2));
    let o = kvlab(&["nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(kvlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_archive_is_a_failure() {
    let o = kvlab(&["diversity", "--weights", "/nonexistent/w.kvl", "--out-prefix", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn output_is_deterministic() {
    let args = ["verify", "--preset", "128M", "--mechanism", "mla", "--tokens", "8", "--trials", "1", "--seed", "4"];
    assert_eq!(stdout(&kvlab(&args)), stdout(&kvlab(&args)));
}
