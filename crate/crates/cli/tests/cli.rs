use std::path::Path;
use std::process::{Command, Output};

use candle_core::{DType, Device, Tensor};
use clap::Parser;
use distillkit::data::{generate_synthetic, SegDataset, SynthSpec};
use distillkit::experiment::{flatten_keys, ExperimentConfig};
use distillkit::models::SegModel;
use distillkit::train::save_model;
use distillkit_cli::{ablation_rows, resolve_config, Axis, Cli};

const SMALL: &[&str] = &[
    "--set",
    "data.train.synthetic.num_samples=8",
    "--set",
    "data.val.synthetic.num_samples=4",
    "--set",
    "distill.schedule.total_iters=2",
];

fn distillkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distillkit"))
        .args(args)
        .env_remove("DISTILLKIT_CACHE")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small(extra: &[&str]) -> Vec<String> {
    SMALL.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run_small(extra: &[&str]) -> Output {
    let args = small(extra);
    distillkit(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn last_json(o: &Output) -> serde_json::Value {
    let text = stdout(o);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json summary line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn help_lists_every_config_key_with_default() {
    let o = distillkit(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let tree = serde_json::to_value(ExperimentConfig::default()).unwrap();
    for (key, value) in flatten_keys(&tree) {
        assert!(text.contains(&format!("{key} = {value}")), "help is missing `{key}`");
    }
}

#[test]
fn gradcheck_full_exits_zero() {
    let o = distillkit(&["gradcheck", "full"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("full: pass"));
}

#[test]
fn unknown_gradcheck_component_fails() {
    let o = distillkit(&["gradcheck", "nope"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn schema_violation_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, "{\n  \"distill\": {\n    \"batch_sise\": 4\n  }\n}\n").unwrap();
    let o = distillkit(&["--config", path.to_str().unwrap(), "train-student"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("cfg.json:3:"), "{err}");
    assert!(err.contains("batch_sise"), "{err}");
}

#[test]
fn unknown_override_key_fails() {
    let o = distillkit(&["--set", "distill.nope=1", "train-student"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("distill.nope"));
}

#[test]
fn flags_override_config_in_order() {
    let cli = Cli::try_parse_from([
        "distillkit",
        "--set",
        "distill.seed=3",
        "--seed",
        "9",
        "--out",
        "elsewhere",
        "train-student",
    ])
    .unwrap();
    let cfg = resolve_config(&cli).unwrap();
    assert_eq!(cfg.distill.seed, 9);
    assert_eq!(cfg.train.teacher_seed, 9);
    assert_eq!(cfg.out_dir, Path::new("elsewhere"));
}

#[test]
fn pea_stage_axis_has_six_rows() {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = "runs/x".into();
    let rows = ablation_rows(&cfg, Axis::PeaStage);
    let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["none", "1st", "2nd", "3rd", "4th", "all"]);
    let (_, fourth) = &rows[4];
    assert_eq!(fourth.distill.pea_stages, [false, false, false, true]);
    assert_eq!(fourth.distill.weights.alpha, [0.0, 0.0, 0.0, 1.0]);
    assert_eq!(rows[0].1.distill.pea_stages, [false; 4]);
    assert_eq!(rows[5].1.distill.weights.alpha, cfg.distill.weights.alpha);
    assert_eq!(rows[5].1.out_dir, Path::new("runs/x/all"));
    assert_eq!(ablation_rows(&cfg, Axis::Fusion).len(), 2);
    assert_eq!(ablation_rows(&cfg, Axis::Loss).len(), 3);
}

#[test]
fn rerun_resumes_and_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("student");
    let out = out.to_str().unwrap();
    let first = run_small(&["--out", out, "train-student"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let a = last_json(&first);
    assert_eq!(a["steps_run"], 2);

    let again = run_small(&["--out", out, "train-student"]);
    assert!(again.status.success(), "{}", stderr(&again));
    let b = last_json(&again);
    assert_eq!(b["steps_run"], 0);
    assert_eq!(a["miou"], b["miou"]);

    let changed = run_small(&["--out", out, "--set", "distill.batch_size=4", "train-student"]);
    assert!(!changed.status.success());
    assert!(stderr(&changed).contains("distill.batch_size: 2 -> 4"), "{}", stderr(&changed));
}

#[test]
fn distill_without_teacher_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_small(&["--out", dir.path().to_str().unwrap(), "distill"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("teacher"));
}

#[test]
fn teacher_then_ablation_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let t = run_small(&["--out", teacher_dir.to_str().unwrap(), "train-teacher"]);
    assert!(t.status.success(), "{}", stderr(&t));
    let model = teacher_dir.join("model.safetensors");
    assert!(model.exists());

    let sweep = dir.path().join("sweep");
    let o = run_small(&[
        "--out",
        sweep.to_str().unwrap(),
        "ablate",
        "--axis",
        "pea-stage",
        "--teacher",
        model.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(sweep.join("ablate_pea_stage.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["none", "1st", "2nd", "3rd", "4th", "all"]);
    let table = stdout(&o);
    for n in names {
        assert!(table.lines().any(|l| l.starts_with(n)), "row {n} missing from table");
    }
}

#[test]
fn synth_data_writes_pairs_and_cache_env_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let o = run_small(&["--out", out.to_str().unwrap(), "synth-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(out.join("train/images")).unwrap().count(), 8);
    assert_eq!(std::fs::read_dir(out.join("val/labels")).unwrap().count(), 4);

    let cache = dir.path().join("cache");
    let args = small(&["--out", dir.path().join("run").to_str().unwrap(), "train-student"]);
    let o = Command::new(env!("CARGO_BIN_EXE_distillkit"))
        .args(&args)
        .env("DISTILLKIT_CACHE", &cache)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let cached: Vec<_> = std::fs::read_dir(&cache).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(cached.len(), 2, "{cached:?}");
    assert!(cached.iter().all(|n| n.to_string_lossy().starts_with("synth-")));
}

/// With a zeroed classifier every logit ties, so every pixel is predicted as class 0.
/// Class 0 then scores IoU = n0 / N, every other present class 0, and absent classes drop
/// out of the mean.
#[test]
fn eval_of_uniform_logits_matches_constant_prediction_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let model = SegModel::new(&cfg.model.student, 5, DType::F32, &Device::Cpu).unwrap();
    for (name, p) in model.store().iter() {
        if name.starts_with("head.cls.") {
            p.var.set(&Tensor::zeros(p.var.shape(), DType::F32, &Device::Cpu).unwrap()).unwrap();
        }
    }
    let ckpt = dir.path().join("zero.safetensors");
    save_model(&model, &ckpt).unwrap();

    let val = SynthSpec {
        seed: 1_000_003,
        num_samples: 4,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&val).unwrap();
    let mut counts = [0u64; 256];
    for i in 0..ds.len() {
        for &l in &ds.get(i).unwrap().label {
            counts[l as usize] += 1;
        }
    }
    let valid: u64 = counts[..8].iter().sum();
    let present = counts[..8].iter().filter(|&&c| c > 0).count();
    let expected = 100.0 * counts[0] as f64 / valid as f64 / present as f64;

    let out = dir.path().join("eval");
    let o = distillkit(&[
        "--set",
        "data.val.synthetic.num_samples=4",
        "--out",
        out.to_str().unwrap(),
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = last_json(&o)["miou"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    assert!(out.join("eval_per_class.csv").exists());
    assert!(out.join("eval_summary.json").exists());
}
