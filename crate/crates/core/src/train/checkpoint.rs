use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "1";

/// A single safetensors archive: named tensors plus string metadata.
///
/// Tensor names are grouped by prefix (`model.`, `fusion.`, `pea.`, `optim.`, `buffer.`).
/// The metadata always carries `version`.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("metadata field `{key}` missing")))
    }

    pub fn iter(&self) -> Result<u64> {
        self.meta("iter")?
            .parse()
            .map_err(|_| Error::Checkpoint("metadata field `iter` is not an integer".into()))
    }

    pub fn insert_group(&mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v);
        }
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let meta: HashMap<String, String> = self.meta.clone().into_iter().collect();
        let data: Vec<(&str, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.as_str(), t.contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize_to_file(data, Some(meta), &tmp)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        match meta.get("version").map(String::as_str) {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "{} has version {v}, expected {CHECKPOINT_VERSION}",
                    path.display()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{} has no version field", path.display()))),
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?
            .into_iter()
            .collect();
        Ok(Self { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_tensors_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let mut ck = Checkpoint::new();
        ck.set_meta("iter", 17);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[1.5f32, -2.0], &Device::Cpu).unwrap());
        ck.insert_group("model", g);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path, &Device::Cpu).unwrap();
        assert_eq!(back.iter().unwrap(), 17);
        let w = back.group("model")["w"].to_vec1::<f32>().unwrap();
        assert_eq!(w, vec![1.5, -2.0]);
    }

    #[test]
    fn missing_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let t = Tensor::new(&[1f32], &Device::Cpu).unwrap();
        safetensors::serialize_to_file([("x", t)], None, &path).unwrap();
        assert!(matches!(Checkpoint::load(&path, &Device::Cpu), Err(Error::Checkpoint(_))));
    }
}
