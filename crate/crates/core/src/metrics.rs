//! Confusion-matrix based segmentation metrics and prediction export.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::class_color;
use crate::error::{Error, Result};
use crate::tensors::{LabelBatch, IGNORE_INDEX};

/// `K x K` pixel counts, rows are ground truth and columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one prediction/label pair of equal shape; ignored pixels are skipped.
    pub fn update(&mut self, prediction: &LabelBatch, label: &LabelBatch) -> Result<()> {
        if (prediction.batch, prediction.height, prediction.width) != (label.batch, label.height, label.width) {
            return Err(Error::Dimension(format!(
                "prediction {}x{}x{} and label {}x{}x{} differ",
                prediction.batch, prediction.height, prediction.width, label.batch, label.height, label.width
            )));
        }
        let k = self.num_classes;
        for (&p, &t) in prediction.data.iter().zip(&label.data) {
            if t == IGNORE_INDEX {
                continue;
            }
            if p as usize >= k || t as usize >= k {
                return Err(Error::Data(format!(
                    "class id out of range for {k} classes (prediction {p}, label {t})"
                )));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Element-wise sum, for merging per-worker or per-batch matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Dimension(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU in percent; classes that never occur in either map are `None`
    /// and excluded from the mean.
    pub fn miou(&self) -> MiouReport {
        let k = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).filter(|&j| j != c).map(|j| self.get(c, j)).sum();
                let fp: u64 = (0..k).filter(|&i| i != c).map(|i| self.get(i, c)).sum();
                let union = tp + fp + fn_;
                (union > 0).then(|| 100.0 * tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        MiouReport { miou, per_class }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` when no class has a non-empty union.
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

/// Arg-max class map of `(B, K, h, w)` logits; ties go to the lowest class id.
pub fn argmax_classes(logits: &Tensor) -> Result<LabelBatch> {
    let (b, k, h, w) = logits.dims4()?;
    let v = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for p in 0..h * w {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..k {
                let x = v[(bi * k + c) * h * w + p];
                if x > best_v {
                    best_v = x;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    LabelBatch::new(out, b, h, w)
}

/// Class predictions at label resolution: arg-max at logit resolution, then
/// nearest-neighbour upsampling.
pub fn predict(logits: &Tensor, label_height: usize, label_width: usize) -> Result<LabelBatch> {
    Ok(argmax_classes(logits)?.resize_nearest(label_height, label_width))
}

/// RGB palette indexed by class id; index 255 (ignore) is black.
pub fn default_palette(num_classes: usize) -> Vec<[u8; 3]> {
    let mut pal = vec![[0u8; 3]; 256];
    for (c, entry) in pal.iter_mut().enumerate().take(num_classes.min(255)) {
        let rgb = class_color(c, num_classes);
        *entry = rgb.map(|v| (v * 255.0).round() as u8);
    }
    pal[IGNORE_INDEX as usize] = [0, 0, 0];
    pal
}

/// Writes one indexed-colour PNG per sample, named `pred_NNNNN.png` from
/// `first_index` onwards. Returns the written paths.
pub fn export_maps(
    predictions: &LabelBatch,
    palette: &[[u8; 3]],
    out_dir: &Path,
    first_index: usize,
) -> Result<Vec<PathBuf>> {
    if palette.len() != 256 {
        return Err(Error::Config(format!("palette must have 256 entries, got {}", palette.len())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let plane = predictions.height * predictions.width;
    let flat_palette: Vec<u8> = palette.iter().flatten().copied().collect();
    let mut paths = Vec::with_capacity(predictions.batch);
    for b in 0..predictions.batch {
        let path = out_dir.join(format!("pred_{:05}.png", first_index + b));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), predictions.width as u32, predictions.height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(flat_palette.clone());
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        writer
            .write_image_data(&predictions.data[b * plane..(b + 1) * plane])
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        writer.finish().map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads the class ids back out of an indexed PNG written by [`export_maps`].
pub fn read_indexed_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!("{} is not an 8-bit indexed PNG", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.height as usize, info.width as usize))
}

/// One CSV row per named report: `name,miou,class_0,..,class_{K-1}`; undefined entries are empty.
pub fn write_per_class_csv(rows: &[(String, MiouReport)], path: &Path) -> Result<()> {
    let k = rows.first().map(|(_, r)| r.per_class.len()).unwrap_or(0);
    let mut out = String::from("name,miou");
    for c in 0..k {
        out.push_str(&format!(",class_{c}"));
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    for (name, r) in rows {
        out.push_str(&format!("{name},{}", fmt(r.miou)));
        for v in &r.per_class {
            out.push_str(&format!(",{}", fmt(*v)));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lb(data: Vec<u8>, h: usize, w: usize) -> LabelBatch {
        LabelBatch::new(data, 1, h, w).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal_and_100() {
        let l = lb(vec![0, 1, 2, 1, 0, 2], 2, 3);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&l, &l).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.get(i, j) > 0, i == j);
            }
        }
        assert_eq!(cm.miou().miou, Some(100.0));
    }

    #[test]
    fn fully_ignored_update_is_noop() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&lb(vec![1, 2], 1, 2), &lb(vec![255, 255], 1, 2)).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
        assert_eq!(cm.miou().miou, None);
    }

    #[test]
    fn hand_counted_two_by_two() {
        // truth [[0, 1], [1, 1]], prediction [[0, 0], [1, 1]]
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&lb(vec![0, 0, 1, 1], 2, 2), &lb(vec![0, 1, 1, 1], 2, 2)).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 0, 1, 2));
        let r = cm.miou();
        // class 0: 1 / (1 + 1 + 0); class 1: 2 / (2 + 0 + 1)
        assert!((r.per_class[0].unwrap() - 50.0).abs() < 1e-12);
        assert!((r.per_class[1].unwrap() - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn binary_case_from_counts() {
        // class 1: TP 3, FP 1, FN 0; class 0: TP 96, FP 0, FN 1; 100 pixels
        let mut truth = vec![0u8; 97];
        truth.extend([1, 1, 1]);
        let mut pred = vec![0u8; 96];
        pred.push(1);
        pred.extend([1, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&lb(pred, 10, 10), &lb(truth, 10, 10)).unwrap();
        let r = cm.miou();
        assert!((r.per_class[0].unwrap() - 9600.0 / 97.0).abs() < 1e-9);
        assert_eq!(r.per_class[1], Some(75.0));
        assert!((r.miou.unwrap() - 86.99).abs() < 0.01);
    }

    #[test]
    fn absent_class_is_undefined_not_zero() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&lb(vec![0, 1], 1, 2), &lb(vec![0, 1], 1, 2)).unwrap();
        let r = cm.miou();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.miou, Some(100.0));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.update(&lb(vec![0, 1], 1, 2), &lb(vec![0, 1, 0], 1, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        let logits = Tensor::zeros((1, 4, 2, 2), DType::F32, &candle_core::Device::Cpu).unwrap();
        assert_eq!(argmax_classes(&logits).unwrap().data, vec![0; 4]);
    }

    #[test]
    fn export_round_trips_ids() {
        let dir = tempfile::tempdir().unwrap();
        let preds = LabelBatch::new(vec![0, 1, 2, 255, 3, 3, 1, 0], 2, 2, 2).unwrap();
        let paths = export_maps(&preds, &default_palette(4), dir.path(), 7).unwrap();
        assert_eq!(paths[0].file_name().unwrap(), "pred_00007.png");
        assert_eq!(paths[1].file_name().unwrap(), "pred_00008.png");
        let (ids, h, w) = read_indexed_png(&paths[0]).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(ids, vec![0, 1, 2, 255]);
        assert_eq!(default_palette(4)[255], [0, 0, 0]);
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let preds = LabelBatch::new(vec![0; 4], 1, 2, 2).unwrap();
        assert!(matches!(
            export_maps(&preds, &default_palette(2), &blocker.join("sub"), 0),
            Err(Error::Io { .. })
        ));
    }
}
