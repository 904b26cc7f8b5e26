use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vibe_core::blending::read_blend_export;
use vibe_core::feature_io::read_feature_file;
use vibe_core::model::TrainConfig;

fn vibe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vibe"))
        .args(args)
        .current_dir(cwd)
        .env_remove("VIBE_THREADS")
        .output()
        .expect("spawn vibe")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

const SMALL: &[&str] = &[
    "--total-steps",
    "40",
    "--sample-loss-warmup",
    "20",
    "--hidden-dim",
    "24",
    "--latent-dim",
    "3",
    "--scales",
    "2,4,6",
    "--k",
    "3",
    "--alphas",
    "0,0.25,0.5,0.75,1",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

#[test]
fn synth_circle_writes_requested_points() {
    let dir = tempfile::tempdir().unwrap();
    ok(vibe(&["synth", "--kind", "circle", "--n", "50", "--seed", "3", "--out", "c.vibe"], dir.path()));
    let g = read_feature_file(dir.path().join("c.vibe")).unwrap();
    assert_eq!(g.len(), 50);
    assert_eq!(g.dim(), 2);
    for r in g.tokens().row_iter() {
        // Stored as f32.
        assert!((r.norm() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn unknown_cloud_kind_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vibe(&["synth", "--kind", "torus"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_two_and_names_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = vibe(&["train", "--source", "x.vibe", "--config", "absent.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config"), "{}", stderr(&o));
}

#[test]
fn config_with_unknown_field_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"total_step": 5}"#).unwrap();
    let o = vibe(&["train", "--source", "x.vibe", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config"), "{}", stderr(&o));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(vibe(&["synth", "--kind", "circle", "--n", "40", "--out", "c.vibe"], dir.path()));
    fs::write(
        dir.path().join("run.json"),
        r#"{"total_steps": 7, "sample_loss_warmup": 3, "hidden_dim": 8, "latent_dim": 2, "scales": [2, 4], "output_dir": "from_file"}"#,
    )
    .unwrap();
    ok(vibe(&["train", "--source", "c.vibe", "--config", "run.json", "--total-steps", "9"], dir.path()));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("from_file/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config"]["total_steps"], 9);
    assert_eq!(metrics["config"]["hidden_dim"], 8);
    assert_eq!(metrics["report"]["recon_history"].as_array().unwrap().len(), 9);
}

#[test]
fn unknown_subcommand_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = vibe(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_thread_count_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["0", "-3", "many"] {
        let o = Command::new(env!("CARGO_BIN_EXE_vibe"))
            .args(["synth", "--kind", "circle", "--out", "c.vibe"])
            .current_dir(dir.path())
            .env("VIBE_THREADS", bad)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(2), "VIBE_THREADS={bad}");
        assert!(stderr(&o).contains("VIBE_THREADS"));
    }
    let o = Command::new(env!("CARGO_BIN_EXE_vibe"))
        .args(["synth", "--kind", "circle", "--out", "c.vibe"])
        .current_dir(dir.path())
        .env("VIBE_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
}

/// Value of `[default: ...]` in the help block of `flag`.
fn help_default(help: &str, flag: &str) -> String {
    let start = help.find(&format!("{flag} ")).unwrap_or_else(|| panic!("{flag} missing from help"));
    let block = &help[start..];
    let end = block[2..].find("\n  -").map(|e| e + 2).unwrap_or(block.len());
    let block = &block[..end];
    let d = block.find("[default: ").unwrap_or_else(|| panic!("{flag} has no default"));
    let rest = &block[d + "[default: ".len()..];
    rest[..rest.find(']').unwrap()].to_string()
}

#[test]
fn help_defaults_match_training_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(vibe(&["train", "--help"], dir.path()));
    let help = String::from_utf8(o.stdout).unwrap();
    let d = TrainConfig::default();
    let num = |flag: &str| help_default(&help, flag).parse::<f64>().unwrap();
    assert_eq!(num("--learning-rate"), d.learning_rate);
    assert_eq!(num("--total-steps"), d.total_steps as f64);
    assert_eq!(num("--hidden-dim"), d.hidden_dim as f64);
    assert_eq!(num("--n-layers"), d.n_layers as f64);
    assert_eq!(num("--latent-dim"), d.latent_dim as f64);
    assert_eq!(num("--w-flag-enc"), d.weights.flag_enc);
    assert_eq!(num("--w-flag-dec"), d.weights.flag_dec);
    assert_eq!(num("--w-sample"), d.weights.sample);
    assert_eq!(num("--w-recon"), d.weights.recon);
    assert_eq!(num("--sample-loss-warmup"), d.sample_loss_warmup as f64);
    assert_eq!(num("--decoded-kernel-refresh"), d.decoded_kernel_refresh as f64);
    assert_eq!(num("--seed"), d.seed as f64);
}

fn blend_swiss_rolls(dir: &Path, out: &str) {
    ok(vibe(&["synth", "--kind", "swiss_roll", "--n", "60", "--seed", "1", "--out", "a.vibe"], dir));
    ok(vibe(&["synth", "--kind", "swiss_roll", "--n", "60", "--seed", "2", "--noise", "0.1", "--out", "b.vibe"], dir));
    ok(vibe(&with_small(&["blend", "--a", "a.vibe", "--b", "b.vibe", "--output-dir", out]), dir));
}

#[test]
fn synth_blend_pns_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    blend_swiss_rolls(p, "run");
    let (manifest, grids) = read_blend_export(p.join("run")).unwrap();
    assert_eq!(manifest.alphas, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(grids.len(), 5);
    for name in ["model.vibm", "origin.vibe", "direction.vibe", "segmentation_a.json", "segmentation_b.json"] {
        assert!(p.join("run").join(name).exists(), "{name}");
    }
    let seg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("run/segmentation_a.json")).unwrap()).unwrap();
    assert_eq!(seg["k"], 3);
    assert_eq!(seg["labels"].as_array().unwrap().len(), 60);

    ok(vibe(&["pns", "--path-dir", "run", "--output-dir", "scores"], p));
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("scores/metrics.json")).unwrap()).unwrap();
    let row = &rows[0];
    for key in ["pair_id", "length_ratio", "direction_change", "normalized_pns"] {
        assert!(!row[key].is_null(), "{key}");
    }
    assert!(row["length_ratio"].as_f64().unwrap() >= 1.0 - 1e-9);
    assert_eq!(row["normalized_pns"].as_f64().unwrap(), 0.5);
}

#[test]
fn select_alpha_reads_realized_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    blend_swiss_rolls(p, "run");
    fs::create_dir(p.join("real")).unwrap();
    for i in 0..5 {
        let name = format!("{i:03}.vibe");
        fs::copy(p.join("run").join(format!("alpha_{name}")), p.join("real").join(format!("realized_{name}"))).unwrap();
    }
    ok(vibe(&["select-alpha", "--path-dir", "run", "--realized-dir", "real", "--output-dir", "sel"], p));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("sel/metrics.json")).unwrap()).unwrap();
    // Realized equals ideal everywhere, so every score ties and the smallest alpha wins.
    assert_eq!(m["alpha"].as_f64().unwrap(), 0.0);
    assert_eq!(m["scores"].as_array().unwrap().len(), 5);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    blend_swiss_rolls(p, "one");
    ok(vibe(&with_small(&["blend", "--a", "a.vibe", "--b", "b.vibe", "--output-dir", "two"]), p));
    let mut names: Vec<_> = fs::read_dir(p.join("one")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 10);
    for n in names {
        let a = fs::read(p.join("one").join(&n)).unwrap();
        let b = fs::read(p.join("two").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?} differs");
    }
}

#[test]
fn btfit_reports_strengths_and_rejects_disconnected_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.json"), r#"[["a","b"],["a","b"],["a","b"],["b","a"]]"#).unwrap();
    ok(vibe(&["btfit", "--comparisons", "c.json", "--output-dir", "bt"], p));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("bt/metrics.json")).unwrap()).unwrap();
    let s: Vec<f64> = m["strengths"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((s[0] / s[1] - 3.0).abs() < 1e-8);

    fs::write(p.join("d.json"), r#"[["a","b"],["b","a"],["c","d"],["d","c"]]"#).unwrap();
    let o = vibe(&["btfit", "--comparisons", "d.json", "--output-dir", "bt2"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("disconnected"));
}

#[test]
fn diversity_and_masked_similarity() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(vibe(&["synth", "--kind", "two_arcs", "--n", "8", "--out", "c.vibe"], p));
    let o = ok(vibe(&["diversity", "--input", "c.vibe", "--input", "c.vibe", "--output-dir", "d"], p));
    let v: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!(v.abs() < 1e-12);

    fs::write(p.join("m.json"), "[true,true,false,false,false,false,false,false]").unwrap();
    let o = ok(vibe(
        &["masked-sim", "--a", "c.vibe", "--mask-a", "m.json", "--b", "c.vibe", "--mask-b", "m.json", "--output-dir", "s"],
        p,
    ));
    let s: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!((s - 1.0).abs() < 1e-12);

    fs::write(p.join("short.json"), "[true]").unwrap();
    let o = vibe(
        &["masked-sim", "--a", "c.vibe", "--mask-a", "short.json", "--b", "c.vibe", "--mask-b", "m.json"],
        p,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn match_writes_segmentations_and_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(vibe(&["synth", "--kind", "two_arcs", "--n", "40", "--out", "t.vibe"], p));
    ok(vibe(&["match", "--a", "t.vibe", "--b", "t.vibe", "--k", "2", "--output-dir", "m"], p));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("m/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["pi"], serde_json::json!([0, 1]));
    assert!(m["cost"].as_f64().unwrap().abs() < 1e-12);
}
