//! Experiment configuration: one JSON document per run, with leaf overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{
    export_dataset, generate_synthetic, load_paired_dataset, Augment, Normalization, SegDataset, SynthSpec,
};
use crate::error::{Error, Result};
use crate::models::EncoderConfig;
use crate::train::config::DistillConfig;

/// Environment variable naming the directory where synthetic datasets are cached.
pub const CACHE_ENV: &str = "DISTILLKIT_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            teacher: EncoderConfig::desk_teacher(8),
            student: EncoderConfig::desk_student(8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Paired {
        image_dir: PathBuf,
        label_dir: PathBuf,
        num_classes: usize,
    },
}

impl DataSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.num_classes,
            DataSource::Paired { num_classes, .. } => *num_classes,
        }
    }

    /// Opens the source. Synthetic data is cached under `cache` when given.
    pub fn open(&self, cache: Option<&Path>) -> Result<Box<dyn SegDataset>> {
        match self {
            DataSource::Synthetic(spec) => match cache {
                None => Ok(Box::new(generate_synthetic(spec)?)),
                Some(root) => {
                    let key = short_hash(&serde_json::to_string(spec)?);
                    let dir = root.join(format!("synth-{key}"));
                    let done = dir.join(".complete");
                    if !done.exists() {
                        let ds = generate_synthetic(spec)?;
                        export_dataset(&ds, &dir)?;
                        std::fs::write(&done, b"").map_err(|e| Error::io(&done, e))?;
                    }
                    Ok(Box::new(load_paired_dataset(
                        &dir.join("images"),
                        &dir.join("labels"),
                        spec.num_classes,
                    )?))
                }
            },
            DataSource::Paired {
                image_dir,
                label_dir,
                num_classes,
            } => Ok(Box::new(load_paired_dataset(image_dir, label_dir, *num_classes)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: DataSource,
    pub val: DataSource,
    /// `[height, width]` every sample is resized to.
    pub resize: [usize; 2],
    pub normalization: Normalization,
    pub augment: Augment,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: DataSource::Synthetic(SynthSpec::default()),
            val: DataSource::Synthetic(SynthSpec {
                seed: 1_000_003,
                num_samples: 64,
                ..SynthSpec::default()
            }),
            resize: [64, 64],
            normalization: Normalization::default(),
            augment: Augment::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Evaluate on the validation set every this many iterations (and at the end); 0 = end only.
    pub eval_every: u64,
    /// Save a resumable checkpoint every this many iterations (and at the end); 0 = end only.
    pub checkpoint_every: u64,
    pub teacher_seed: u64,
    /// Teacher-training overrides of `distill.schedule.total_iters` and `distill.optimizer.base_lr`.
    pub teacher_iters: Option<u64>,
    pub teacher_lr: Option<f64>,
    /// Trained teacher used by `distill`; a checkpoint or model file.
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            eval_every: 500,
            checkpoint_every: 500,
            teacher_seed: 0,
            teacher_iters: None,
            teacher_lr: None,
            teacher_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    /// Write indexed-colour prediction PNGs after the final evaluation.
    pub export_maps: bool,
    pub max_exported: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            export_maps: false,
            max_exported: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub distill: DistillConfig,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            distill: DistillConfig::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let (t, s) = (&self.model.teacher, &self.model.student);
        t.validate()?;
        s.validate()?;
        if t.stages() != s.stages() {
            return Err(Error::Config(format!(
                "teacher has {} stages, student {}",
                t.stages(),
                s.stages()
            )));
        }
        if t.num_classes != s.num_classes || s.num_classes != self.data.train.num_classes() {
            return Err(Error::Config(format!(
                "class counts disagree: teacher {}, student {}, data {}",
                t.num_classes,
                s.num_classes,
                self.data.train.num_classes()
            )));
        }
        if self.data.val.num_classes() != self.data.train.num_classes() {
            return Err(Error::Config("train and val data have different class counts".into()));
        }
        self.distill.validate(s.stages())?;
        let [h, w] = self.data.resize;
        s.stage_resolutions(h, w)?;
        t.stage_resolutions(h, w)?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses a JSON document; syntax and schema errors carry line and column.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| located(origin, e))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Applies `key.path=value` overrides. The value is parsed as JSON, falling back to a
    /// plain string. Keys must already exist in the configuration tree.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key.trim(), value)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    /// Content hash of everything except `out_dir`, tagged with the run kind.
    pub fn content_hash(&self, kind: &str) -> Result<String> {
        let mut tree = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut tree {
            m.remove("out_dir");
        }
        let doc = serde_json::json!({ "kind": kind, "config": tree });
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&doc)?.as_bytes());
        Ok(hex(&h.finalize()))
    }
}

fn located(origin: &str, e: serde_json::Error) -> Error {
    Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn short_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    hex(&h.finalize())[..16].to_string()
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        node = match node {
            Value::Object(m) => m
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{here}`")))?,
            Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("`{here}`: list index expected")))?;
                let len = a.len();
                a.get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("`{here}`: index {idx} out of range (len {len})")))?
            }
            _ => return Err(Error::Config(format!("`{here}` does not name a section"))),
        };
    }
    *node = value;
    Ok(())
}

/// Every leaf key of a JSON tree with its value, in document order.
pub fn flatten_keys(tree: &Value) -> Vec<(String, Value)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => out.push((prefix.to_string(), v.clone())),
        }
    }
    let mut out = Vec::new();
    walk("", tree, &mut out);
    out
}

/// Human-readable list of keys whose values differ between two configuration trees.
pub fn config_diff(old: &Value, new: &Value) -> Vec<String> {
    let a = flatten_keys(old);
    let b = flatten_keys(new);
    let mut lines = Vec::new();
    for (k, v) in &a {
        match b.iter().find(|(kb, _)| kb == k) {
            Some((_, nv)) if nv != v => lines.push(format!("{k}: {v} -> {nv}")),
            None => lines.push(format!("{k}: {v} -> (absent)")),
            _ => {}
        }
    }
    for (k, v) in &b {
        if !a.iter().any(|(ka, _)| ka == k) {
            lines.push(format!("{k}: (absent) -> {v}"));
        }
    }
    lines
}

/// `key = default` for every configuration leaf.
pub fn describe_keys() -> String {
    let tree = serde_json::to_value(ExperimentConfig::default()).expect("default config serializes");
    flatten_keys(&tree)
        .into_iter()
        .map(|(k, v)| format!("  {k} = {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&text, "x").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "{\n  \"distill\": {\n    \"alpah\": [1]\n  }\n}";
        let err = ExperimentConfig::from_json_str(text, "cfg.json").unwrap_err().to_string();
        assert!(err.contains("cfg.json:3:"), "{err}");
        assert!(err.contains("alpah"), "{err}");
    }

    #[test]
    fn overrides_set_leaves_and_reject_unknown_keys() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                "distill.seed=7".into(),
                "distill.weights.alpha=[0,0,0,1]".into(),
                "distill.fusion.kind=abf".into(),
                "out_dir=/tmp/x".into(),
            ])
            .unwrap();
        assert_eq!(cfg.distill.seed, 7);
        assert_eq!(cfg.distill.weights.alpha, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        let err = ExperimentConfig::default()
            .with_overrides(&["distill.nope=1".into()])
            .unwrap_err();
        assert!(err.to_string().contains("distill.nope"));
    }

    #[test]
    fn hash_ignores_out_dir_but_not_settings() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.content_hash("distill").unwrap(), b.content_hash("distill").unwrap());
        b.distill.seed = 3;
        assert_ne!(a.content_hash("distill").unwrap(), b.content_hash("distill").unwrap());
        assert_ne!(a.content_hash("distill").unwrap(), a.content_hash("teacher").unwrap());
    }

    #[test]
    fn diff_names_changed_leaves() {
        let a = serde_json::to_value(ExperimentConfig::default()).unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.distill.batch_size = 4;
        let b = serde_json::to_value(cfg).unwrap();
        assert_eq!(config_diff(&a, &b), vec!["distill.batch_size: 2 -> 4".to_string()]);
    }

    #[test]
    fn help_lists_nested_keys() {
        let text = describe_keys();
        assert!(text.contains("distill.optimizer.base_lr = 0.00006"));
        assert!(text.contains("distill.pyramid.pool_sizes = [4,2,1]"));
    }
}
