use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::checkpoint::Checkpoint;
use super::engine::{distill_step_with_taps, plain_step, StepReport};
use super::optim::AdamW;
use crate::data::{Augment, Batch, BatchSampler, SegDataset};
use crate::error::{Error, Result};
use crate::experiment::{config_diff, ExperimentConfig};
use crate::fusion::FusionStack;
use crate::losses::PeaParams;
use crate::metrics::{default_palette, export_maps, predict, ConfusionMatrix, MiouReport};
use crate::models::{EncoderConfig, SegModel, StageTaps};
use crate::tensors::{FeatureMap, PatchEmbedding};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
/// Student-only weights, the artefact used for evaluation and deployment.
pub const MODEL_FILE: &str = "model.safetensors";
/// Fusion stack and PEA matrices, kept apart from the student.
pub const DISTILL_PARAMS_FILE: &str = "distill_params.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const HASH_FILE: &str = "config.sha256";

const FUSION_SEED_STREAM: u64 = 0x5f_5f46;
const PEA_SEED_STREAM: u64 = 0x5f_5045;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Teacher,
    StudentPlain,
    Distill,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Teacher => "teacher",
            TrainMode::StudentPlain => "student-plain",
            TrainMode::Distill => "distill",
        }
    }
}

/// Independent RNG stream for an auxiliary parameter group.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: u64,
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepReport),
    Eval(EvalRecord),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub final_eval: EvalRecord,
    /// Steps executed by this call (0 when resuming a finished run).
    pub steps_run: u64,
    pub last_step: Option<StepReport>,
}

/// Runs the model over `dataset` in order and accumulates a confusion matrix at label
/// resolution.
pub fn evaluate(
    model: &SegModel,
    dataset: &dyn SegDataset,
    cfg: &ExperimentConfig,
    export_dir: Option<&Path>,
) -> Result<(ConfusionMatrix, MiouReport)> {
    let [h, w] = cfg.data.resize;
    let sampler = BatchSampler::new(
        dataset.len(),
        cfg.eval.batch_size,
        0,
        (h, w),
        model.config().total_stride(),
        cfg.data.normalization,
        Default::default(),
    )?;
    let device = model.store().device().clone();
    let mut cm = ConfusionMatrix::new(dataset.num_classes());
    let palette = default_palette(dataset.num_classes());
    let mut exported = 0usize;
    for batch in sampler.sequential(dataset, &device)? {
        let logits = model.forward(&batch.images)?;
        let pred = predict(&logits, batch.labels.height, batch.labels.width)?;
        cm.update(&pred, &batch.labels)?;
        if let Some(dir) = export_dir {
            if exported < cfg.eval.max_exported {
                let keep = (cfg.eval.max_exported - exported).min(pred.batch);
                let plane = pred.height * pred.width;
                let part = crate::tensors::LabelBatch::new(pred.data[..keep * plane].to_vec(), keep, pred.height, pred.width)?;
                export_maps(&part, &palette, dir, batch.indices[0])?;
                exported += keep;
            }
        }
    }
    let report = cm.miou();
    Ok((cm, report))
}

/// Saves the model weights alone, with enough metadata to rebuild it.
pub fn save_model(model: &SegModel, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "model");
    ck.set_meta("encoder", serde_json::to_string(model.config())?);
    ck.set_meta("seed", model.seed());
    ck.insert_group("model", model.store().snapshot()?);
    ck.save(path)
}

/// Rebuilds a model from a model file or a full training checkpoint.
pub fn load_model(path: &Path, dtype: DType, device: &Device) -> Result<SegModel> {
    let ck = Checkpoint::load(path, device)?;
    let enc: EncoderConfig = serde_json::from_str(ck.meta("encoder")?)?;
    let seed = ck.meta("seed")?.parse().unwrap_or(0);
    let model = SegModel::new(&enc, seed, dtype, device)?;
    model.store().load(&ck.group("model"))?;
    Ok(model)
}

/// Frozen-teacher outputs, computed one sample at a time so a sample's outputs do not
/// depend on which batch it lands in. Without augmentation a sample always yields the
/// same input row, so the outputs are kept for reuse.
struct TeacherTaps {
    keep: bool,
    cache: HashMap<usize, StageTaps>,
}

impl TeacherTaps {
    fn new(augment: &Augment) -> Self {
        Self {
            keep: !augment.hflip && augment.random_crop.is_none(),
            cache: HashMap::new(),
        }
    }

    fn for_batch(&mut self, teacher: &SegModel, batch: &Batch) -> Result<StageTaps> {
        let mut rows = Vec::with_capacity(batch.indices.len());
        for (row, idx) in batch.indices.iter().enumerate() {
            let taps = match self.cache.get(idx) {
                Some(t) => t.clone(),
                None => {
                    let t = teacher.forward_with_taps(&batch.images.narrow(0, row, 1)?)?.detach();
                    if self.keep {
                        self.cache.insert(*idx, t.clone());
                    }
                    t
                }
            };
            rows.push(taps);
        }
        concat_taps(&rows)
    }
}

fn concat_taps(rows: &[StageTaps]) -> Result<StageTaps> {
    let first = &rows[0];
    let embeddings = (0..first.embeddings.len())
        .map(|m| {
            let parts: Vec<_> = rows.iter().map(|r| r.embeddings[m].tensor().clone()).collect();
            PatchEmbedding::new(candle_core::Tensor::cat(&parts, 0)?, first.embeddings[m].stage())
        })
        .collect::<Result<_>>()?;
    let feature_maps = (0..first.feature_maps.len())
        .map(|m| {
            let parts: Vec<_> = rows.iter().map(|r| r.feature_maps[m].tensor().clone()).collect();
            FeatureMap::new(candle_core::Tensor::cat(&parts, 0)?, first.feature_maps[m].stage())
        })
        .collect::<Result<_>>()?;
    let logits: Vec<_> = rows.iter().map(|r| r.logits.clone()).collect();
    Ok(StageTaps {
        embeddings,
        feature_maps,
        logits: candle_core::Tensor::cat(&logits, 0)?,
    })
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    mode: TrainMode,
    model: SegModel,
    stack: Option<FusionStack>,
    pea: Option<PeaParams>,
    optimizer: AdamW,
    hash: String,
}

impl Run<'_> {
    fn checkpoint(&self, iter: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", self.mode.as_str());
        ck.set_meta("config", serde_json::to_string(self.cfg)?);
        ck.set_meta("config_hash", &self.hash);
        ck.set_meta("encoder", serde_json::to_string(self.model.config())?);
        ck.set_meta("seed", self.model.seed());
        ck.set_meta("iter", iter);
        ck.insert_group("model", self.model.store().snapshot()?);
        if let Some(stack) = &self.stack {
            ck.insert_group("distill", stack.store().snapshot()?);
            ck.insert_group("buffer", stack.buffers());
        }
        if let Some(pea) = &self.pea {
            ck.insert_group("distill", pea.store().snapshot()?);
        }
        ck.insert_group("optim", self.optimizer.state()?);
        Ok(ck)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<u64> {
        if ck.meta("config_hash")? != self.hash {
            return Err(Error::Checkpoint("checkpoint belongs to a different configuration".into()));
        }
        self.model.store().load(&ck.group("model"))?;
        let distill = ck.group("distill");
        if let Some(stack) = &self.stack {
            stack.store().load(&distill)?;
            stack.load_buffers(&ck.group("buffer"))?;
        }
        if let Some(pea) = &self.pea {
            pea.store().load(&distill)?;
        }
        self.optimizer.load_state(&ck.group("optim"))?;
        ck.iter()
    }
}

fn write_record(file: &mut File, record: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}").map_err(|e| Error::io(METRICS_FILE, e))?;
    file.flush().map_err(|e| Error::io(METRICS_FILE, e))
}

/// Keeps log records up to `iter` completed steps: step records with index below it and
/// eval records taken at or before it.
fn truncate_log(path: &Path, iter: u64) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line)?;
        let keep = match &rec {
            LogRecord::Step(s) => s.iter < iter,
            LogRecord::Eval(e) => e.iter <= iter,
        };
        if keep {
            kept.push(rec);
        }
    }
    let mut out = File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in &kept {
        write_record(&mut out, rec)?;
    }
    Ok(kept)
}

/// Reads every record of a metrics log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Refuses to reuse a run directory that holds a different configuration.
fn claim_out_dir(cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash_path = dir.join(HASH_FILE);
    let cfg_path = dir.join(CONFIG_FILE);
    if hash_path.exists() {
        let old = std::fs::read_to_string(&hash_path).map_err(|e| Error::io(&hash_path, e))?;
        if old.trim() != hash {
            let old_cfg: Value = std::fs::read_to_string(&cfg_path)
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok())
                .unwrap_or(Value::Null);
            let new_cfg = serde_json::to_value(cfg)?;
            let diff = config_diff(&old_cfg, &new_cfg);
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration; refusing to overwrite. Differences:\n  {}",
                dir.display(),
                if diff.is_empty() { "(run kind differs)".to_string() } else { diff.join("\n  ") }
            )));
        }
    } else {
        let text = serde_json::to_string_pretty(cfg)?;
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        std::fs::write(&hash_path, format!("{hash}\n")).map_err(|e| Error::io(&hash_path, e))?;
    }
    Ok(())
}

/// Trains one model according to `mode` and writes metrics, checkpoints and the final
/// model into `cfg.out_dir`. Re-running with the same configuration resumes from the
/// last checkpoint; a different configuration is refused.
pub fn train(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    train_ds: &dyn SegDataset,
    val_ds: &dyn SegDataset,
    teacher: Option<&SegModel>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let device = Device::Cpu;
    let dtype = DType::F32;
    let d = &cfg.distill;
    let mut dcfg = d.clone();
    let (enc, seed) = match mode {
        TrainMode::Teacher => {
            if let Some(k) = cfg.train.teacher_iters {
                dcfg.schedule.total_iters = k;
            }
            if let Some(lr) = cfg.train.teacher_lr {
                dcfg.optimizer.base_lr = lr;
            }
            (&cfg.model.teacher, cfg.train.teacher_seed)
        }
        _ => (&cfg.model.student, d.seed),
    };
    let teacher = match (mode, teacher) {
        (TrainMode::Distill, Some(t)) => {
            if !t.is_frozen() {
                return Err(Error::Contract("the teacher must be frozen before distillation".into()));
            }
            if t.config().stage_channels != cfg.model.teacher.stage_channels {
                return Err(Error::Config(format!(
                    "teacher channels {:?} differ from the configured {:?}",
                    t.config().stage_channels,
                    cfg.model.teacher.stage_channels
                )));
            }
            Some(t)
        }
        (TrainMode::Distill, None) => return Err(Error::Config("distillation needs a trained teacher".into())),
        _ => None,
    };
    if train_ds.num_classes() != enc.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            train_ds.num_classes(),
            enc.num_classes
        )));
    }

    let hash = cfg.content_hash(mode.as_str())?;
    claim_out_dir(cfg, &hash)?;

    let model = SegModel::new(enc, seed, dtype, &device)?;
    let (stack, pea) = if mode == TrainMode::Distill {
        let s_ch = &cfg.model.student.stage_channels;
        let t_ch = &cfg.model.teacher.stage_channels;
        (
            Some(FusionStack::new(s_ch, t_ch, &d.fusion, stream_seed(d.seed, FUSION_SEED_STREAM), dtype, &device)?),
            Some(PeaParams::new(s_ch, t_ch, &d.pea_stages, stream_seed(d.seed, PEA_SEED_STREAM), dtype, &device)?),
        )
    } else {
        (None, None)
    };
    let mut stores = vec![model.store()];
    stores.extend(stack.as_ref().map(|s| s.store()));
    stores.extend(pea.as_ref().map(|p| p.store()));
    let optimizer = AdamW::new(&stores, &dcfg.optimizer)?;
    let mut run = Run {
        cfg,
        mode,
        model,
        stack,
        pea,
        optimizer,
        hash,
    };

    let out = &cfg.out_dir;
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(METRICS_FILE);
    let start = if ck_path.exists() {
        let it = run.restore(&Checkpoint::load(&ck_path, &device)?)?;
        log::info!("resuming {} from iteration {it}", out.display());
        it
    } else {
        0
    };
    let history = truncate_log(&log_path, start)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let [h, w] = cfg.data.resize;
    let sampler = BatchSampler::new(
        train_ds.len(),
        dcfg.batch_size,
        dcfg.seed,
        (h, w),
        enc.total_stride(),
        cfg.data.normalization,
        cfg.data.augment.clone(),
    )?;
    let total = dcfg.schedule.total_iters;
    let due = |every: u64, done: u64| done == total || (every > 0 && done % every == 0);

    let mut last_step = None;
    let mut last_eval = history.iter().rev().find_map(|r| match r {
        LogRecord::Eval(e) if e.iter == start => Some(e.clone()),
        _ => None,
    });
    let mut teacher_taps = TeacherTaps::new(&cfg.data.augment);
    for it in start..total {
        let batch = sampler.batch(train_ds, it, &device)?;
        let report = match (&run.stack, &run.pea, teacher) {
            (Some(stack), Some(pea), Some(t)) => {
                let taps = teacher_taps.for_batch(t, &batch)?;
                distill_step_with_taps(&batch, &taps, &run.model, stack, pea, &dcfg, &mut run.optimizer, it)?
            }
            _ => plain_step(&batch, &run.model, &dcfg, &mut run.optimizer, it)?,
        };
        log::debug!("iter {it} total {:.5}", report.total);
        write_record(&mut log, &LogRecord::Step(report.clone()))?;
        last_step = Some(report);
        let done = it + 1;
        if due(cfg.train.eval_every, done) {
            let (_, rep) = evaluate(&run.model, val_ds, cfg, None)?;
            let rec = EvalRecord {
                iter: done,
                miou: rep.miou,
                per_class: rep.per_class,
            };
            log::info!("{} iter {done}: mIoU {:?}", mode.as_str(), rec.miou);
            write_record(&mut log, &LogRecord::Eval(rec.clone()))?;
            last_eval = Some(rec);
        }
        if due(cfg.train.checkpoint_every, done) {
            run.checkpoint(done)?.save(&ck_path)?;
        }
    }

    let steps_run = total.saturating_sub(start);
    let final_iter = total.max(start);
    let final_eval = match last_eval.filter(|e| e.iter == final_iter) {
        Some(e) => e,
        None => {
            let (_, rep) = evaluate(&run.model, val_ds, cfg, None)?;
            let rec = EvalRecord {
                iter: final_iter,
                miou: rep.miou,
                per_class: rep.per_class,
            };
            write_record(&mut log, &LogRecord::Eval(rec.clone()))?;
            rec
        }
    };
    if cfg.eval.export_maps {
        evaluate(&run.model, val_ds, cfg, Some(&out.join("maps")))?;
    }
    if !ck_path.exists() {
        run.checkpoint(final_iter)?.save(&ck_path)?;
    }
    save_model(&run.model, &out.join(MODEL_FILE))?;
    if let (Some(stack), Some(pea)) = (&run.stack, &run.pea) {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "distill_params");
        ck.insert_group("distill", stack.store().snapshot()?);
        ck.insert_group("distill", pea.store().snapshot()?);
        ck.insert_group("buffer", stack.buffers());
        ck.save(&out.join(DISTILL_PARAMS_FILE))?;
    }
    Ok(RunOutcome {
        out_dir: out.clone(),
        final_eval,
        steps_run,
        last_step,
    })
}
