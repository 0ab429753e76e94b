use std::path::Path;
use std::process::{Command, Output};

use compact_attn::io;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compact-attn"))
        .args(args)
        .current_dir(dir)
        .env_remove("COMPACT_ATTN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace()
        .find_map(|t| t.strip_prefix(key)?.strip_prefix('='))
        .unwrap_or_else(|| panic!("no {key}= in {text}"))
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        let o = run(&["--seed", seed, "synth", "--pattern", "battery", "--texture", "0.3", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("cross.probs.catn")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["maps"].as_array().unwrap().len(), 5);
}

#[test]
fn oversized_extent_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--grid", "2x4x4", "--omega", "9", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("omega"), "{}", stderr(&o));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn search_prints_defaults_and_writes_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["synth", "--p", "0.97", "--out", "."], dir.path()).status.success());
    let o = run(&["search", "local.probs.catn", "--grid", "4x8x8", "--block-size", "16", "-o", "cfg.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains(
        "tau=0.9 lambda=0.011 tile=1x4x4 block_size=16 groups=0,1,3,7 step_reuse_n=5 full_prefix=15 family=dual-window"
    ), "{text}");
    assert!(field(&text, "recall").parse::<f64>().unwrap() >= 0.9);
    let doc = io::load_head_config(dir.path().join("cfg.json")).unwrap();
    assert_eq!(doc.block_size, 16);

    let r = run(&["rasterize", "--config", "cfg.json"], dir.path());
    assert!(r.status.success());
    assert_eq!(field(&stdout(&r), "sparsity"), field(&text, "sparsity"));
}

#[test]
fn several_maps_need_merge() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["synth", "--variants", "2", "--p", "0.97", "--out", "."], dir.path()).status.success());
    let maps = ["local.probs.catn", "local.v0.probs.catn", "local.v1.probs.catn"];
    let mut args = vec!["search", "--grid", "4x8x8", "--block-size", "16"];
    args.extend(maps);
    let o = run(&args, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("merge"));

    args.push("--merge");
    let o = run(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("merged recall="));
}

#[test]
fn tau_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["synth", "--p", "0.95", "--out", "."], dir.path()).status.success());
    let o = run(
        &["search", "local.probs.catn", "--grid", "4x8x8", "--block-size", "16", "--lambda", "0.5",
          "--sweep-tau", "0.95,0.9,0.8", "-o", "sweep.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["tau", "sparsity"]);
    let rows: Vec<(f64, f64)> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[1].1 >= w[0].1), "{rows:?}");
}

#[test]
fn attend_sparse_matches_dense_under_full_config() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["synth", "--pattern", "global", "--p", "1", "--qkv", "8", "--out", "."], dir.path()).status.success());
    let o = run(&["search", "global.probs.catn", "--grid", "4x8x8", "--block-size", "16", "-o", "cfg.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        &["attend", "--q", "qkv.q.catn", "--k", "qkv.k.catn", "--v", "qkv.v.catn", "--config", "cfg.json",
          "--dense", "--sparse", "-o", "out.catn"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(field(&text, "sparsity").parse::<f64>().unwrap(), 0.0);
    assert!(field(&text, "max_abs_diff").parse::<f64>().unwrap() <= 1e-5);
    assert_eq!(io::read_tensor(dir.path().join("out.catn")).unwrap().shape(), (256, 8));
}

#[test]
fn report_classifies_uniform_map() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["synth", "--pattern", "global", "--p", "1", "--out", "."], dir.path()).status.success());
    let o = run(
        &["report", "global.probs.catn", "--grid", "4x8x8", "--block-size", "16", "--compare", "raster,tiled",
          "--format", "json"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: serde_json::Value = serde_json::from_str(&text[text.find("\n[").unwrap()..]).unwrap();
    let row = &rows[0];
    assert_eq!(row["spatial"], "Global");
    assert_eq!(row["temporal"], "TimeInvariant");
    assert!(row["topk@0.95_raster"].is_number() && row["topk@0.95_tiled"].is_number());
}

#[test]
fn exit_codes_separate_io_from_validation() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.probs.catn"), b"NOPE").unwrap();
    let o = run(&["search", "bad.probs.catn", "--grid", "1x2x2"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));

    std::fs::write(dir.path().join("bad.json"), "{\"grid\": 3}").unwrap();
    let o = run(&["rasterize", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("grid"));

    let o = run(&["search", "--tau", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}
