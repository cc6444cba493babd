//! Command-line surface of distillkit: training, evaluation, gradient checks,
//! synthetic data export and ablation sweeps, all driven by one JSON config.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use distillkit::data::{export_dataset, generate_synthetic, SegDataset};
use distillkit::experiment::{describe_keys, DataSource, ExperimentConfig, CACHE_ENV};
use distillkit::fusion::FusionKind;
use distillkit::metrics::{write_per_class_csv, MiouReport};
use distillkit::models::SegModel;
use distillkit::train::{evaluate, gradcheck, load_model, train, Component, LossMode, RunOutcome, TrainMode};

#[derive(Debug, Parser)]
#[command(
    name = "distillkit",
    version,
    about = "Transformer-to-transformer distillation for semantic segmentation",
    after_help = format!("Config keys (override with --set KEY=VALUE):\n{}", describe_keys())
)]
pub struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config leaf, e.g. `--set distill.batch_size=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for model initialization and batch order (student and teacher).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; replaces `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher with cross-entropy.
    TrainTeacher,
    /// Train the student alone with cross-entropy (the no-distillation baseline).
    TrainStudent,
    /// Distill a trained teacher into the student.
    Distill {
        /// Teacher model or checkpoint; defaults to `train.teacher_checkpoint`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a model on the validation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write prediction PNGs to this directory.
        #[arg(long)]
        export_maps: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in double precision.
    Gradcheck {
        #[arg(default_value = "all")]
        component: String,
    },
    /// Write the configured synthetic train and val sets as PNG pairs.
    SynthData,
    /// Run one distillation per row of an ablation axis and tabulate the results.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Teacher model or checkpoint; defaults to `train.teacher_checkpoint`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Fusion,
    Loss,
    PeaStage,
}

/// Loads the config and applies `--set`, `--seed` and `--out`, in that order.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.distill.seed = seed;
        cfg.train.teacher_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn open_data(cfg: &ExperimentConfig) -> Result<(Box<dyn SegDataset>, Box<dyn SegDataset>)> {
    let cache = cache_dir();
    let train_ds = cfg.data.train.open(cache.as_deref()).context("opening training data")?;
    let val_ds = cfg.data.val.open(cache.as_deref()).context("opening validation data")?;
    Ok((train_ds, val_ds))
}

fn load_teacher(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<SegModel> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.train.teacher_checkpoint.clone())
        .context("no teacher given: pass --teacher or set train.teacher_checkpoint (see `train-teacher`)")?;
    let mut teacher =
        load_model(&path, DType::F32, &Device::Cpu).with_context(|| format!("loading teacher {}", path.display()))?;
    teacher.set_frozen(true);
    Ok(teacher)
}

fn summary(out: &RunOutcome) -> serde_json::Value {
    json!({
        "out_dir": out.out_dir,
        "iter": out.final_eval.iter,
        "steps_run": out.steps_run,
        "miou": out.final_eval.miou,
        "per_class": out.final_eval.per_class,
    })
}

fn run_training(cfg: &ExperimentConfig, mode: TrainMode, teacher: Option<&SegModel>) -> Result<RunOutcome> {
    let (train_ds, val_ds) = open_data(cfg)?;
    let out = train(cfg, mode, &*train_ds, &*val_ds, teacher)?;
    println!("{}", summary(&out));
    Ok(out)
}

fn fmt_score(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

/// Fixed-width table: one row per run, mIoU then per-class IoU.
pub fn render_table(rows: &[(String, MiouReport)]) -> String {
    let k = rows.first().map(|(_, r)| r.per_class.len()).unwrap_or(0);
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<name_w$}  {:>6}", "row", "mIoU");
    for c in 0..k {
        out.push_str(&format!("  {:>6}", format!("c{c}")));
    }
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!("{name:<name_w$}  {:>6}", fmt_score(r.miou)));
        for v in &r.per_class {
            out.push_str(&format!("  {:>6}", fmt_score(*v)));
        }
        out.push('\n');
    }
    out
}

fn ordinal(stage: usize) -> String {
    let suffix = match stage {
        1 => "st",
        2 => "nd",
        3 => "rd",
        _ => "th",
    };
    format!("{stage}{suffix}")
}

/// The distillation configs of one ablation axis, named by row.
pub fn ablation_rows(cfg: &ExperimentConfig, axis: Axis) -> Vec<(String, ExperimentConfig)> {
    let mut rows = Vec::new();
    match axis {
        Axis::Fusion => {
            for (name, kind) in [("skf", FusionKind::Skf), ("abf", FusionKind::Abf)] {
                let mut c = cfg.clone();
                c.distill.fusion.kind = kind;
                rows.push((name.to_string(), c));
            }
        }
        Axis::Loss => {
            for (name, mode) in [
                ("hcl", LossMode::Hcl),
                ("channel_kl", LossMode::ChannelKl),
                ("spatial_kl", LossMode::SpatialKl),
            ] {
                let mut c = cfg.clone();
                c.distill.loss_mode = mode;
                rows.push((name.to_string(), c));
            }
        }
        Axis::PeaStage => {
            let m = cfg.distill.pea_stages.len();
            let mut none = cfg.clone();
            none.distill.pea_stages = vec![false; m];
            rows.push(("none".to_string(), none));
            for s in 0..m {
                let mut c = cfg.clone();
                c.distill.pea_stages = (0..m).map(|i| i == s).collect();
                c.distill.weights.alpha = (0..m).map(|i| if i == s { 1.0 } else { 0.0 }).collect();
                rows.push((ordinal(s + 1), c));
            }
            let mut all = cfg.clone();
            all.distill.pea_stages = vec![true; m];
            rows.push(("all".to_string(), all));
        }
    }
    for (name, c) in &mut rows {
        c.out_dir = cfg.out_dir.join(name.as_str());
    }
    rows
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Fusion => "fusion",
        Axis::Loss => "loss",
        Axis::PeaStage => "pea_stage",
    }
}

fn report_of(out: &RunOutcome) -> MiouReport {
    MiouReport {
        miou: out.final_eval.miou,
        per_class: out.final_eval.per_class.clone(),
    }
}

fn cmd_ablate(cfg: &ExperimentConfig, axis: Axis, teacher: Option<&Path>) -> Result<()> {
    let teacher = load_teacher(cfg, teacher)?;
    let (train_ds, val_ds) = open_data(cfg)?;
    let mut results = Vec::new();
    for (name, row_cfg) in ablation_rows(cfg, axis) {
        log::info!("ablation row `{name}` -> {}", row_cfg.out_dir.display());
        let out = train(&row_cfg, TrainMode::Distill, &*train_ds, &*val_ds, Some(&teacher))
            .with_context(|| format!("ablation row `{name}`"))?;
        results.push((name, report_of(&out)));
    }
    let csv = cfg.out_dir.join(format!("ablate_{}.csv", axis_name(axis)));
    write_per_class_csv(&results, &csv)?;
    print!("{}", render_table(&results));
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, export: Option<&Path>) -> Result<MiouReport> {
    let model = load_model(checkpoint, DType::F32, &Device::Cpu)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    if model.config().num_classes != cfg.data.val.num_classes() {
        bail!(
            "model predicts {} classes, validation data has {}",
            model.config().num_classes,
            cfg.data.val.num_classes()
        );
    }
    let val_ds = cfg.data.val.open(cache_dir().as_deref())?;
    let (_, report) = evaluate(&model, &*val_ds, cfg, export)?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let rows = vec![("eval".to_string(), report.clone())];
    write_per_class_csv(&rows, &cfg.out_dir.join("eval_per_class.csv"))?;
    let doc = json!({ "miou": report.miou, "per_class": report.per_class });
    let path = cfg.out_dir.join("eval_summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))?;
    println!("{doc}");
    Ok(report)
}

fn cmd_gradcheck(which: &str) -> Result<()> {
    let components: Vec<Component> = if which == "all" {
        Component::ALL.to_vec()
    } else {
        vec![which.parse()?]
    };
    let mut failed = Vec::new();
    for c in components {
        match gradcheck(c) {
            Ok(r) => println!("{c}: pass, max relative error {:.3e} over {} entries", r.max_rel_error, r.checked),
            Err(e) => {
                println!("{c}: FAIL, {e}");
                failed.push(c.to_string());
            }
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_synth_data(cfg: &ExperimentConfig) -> Result<()> {
    for (split, source) in [("train", &cfg.data.train), ("val", &cfg.data.val)] {
        let DataSource::Synthetic(spec) = source else {
            bail!("data.{split} is not a synthetic source");
        };
        let dir = cfg.out_dir.join(split);
        export_dataset(&generate_synthetic(spec)?, &dir)?;
        println!("{split}: {} samples -> {}", spec.num_samples, dir.display());
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Command::Gradcheck { component } = &cli.command {
        return cmd_gradcheck(component);
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::TrainTeacher => run_training(&cfg, TrainMode::Teacher, None).map(drop),
        Command::TrainStudent => run_training(&cfg, TrainMode::StudentPlain, None).map(drop),
        Command::Distill { teacher } => {
            let t = load_teacher(&cfg, teacher.as_deref())?;
            run_training(&cfg, TrainMode::Distill, Some(&t)).map(drop)
        }
        Command::Eval {
            checkpoint,
            export_maps,
        } => cmd_eval(&cfg, checkpoint, export_maps.as_deref()).map(drop),
        Command::SynthData => cmd_synth_data(&cfg),
        Command::Ablate { axis, teacher } => cmd_ablate(&cfg, *axis, teacher.as_deref()),
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
}
