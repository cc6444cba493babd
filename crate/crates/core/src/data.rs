//! Segmentation data: synthetic shape scenes, on-disk image/label pairs, and
//! deterministic batching.
//!
//! Images are held as 8-bit RGB and normalized only when a batch is assembled,
//! so a dataset exported to PNG and read back is bit-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::bilinear_weights;
use crate::tensors::{nearest_source, LabelBatch, IGNORE_INDEX};

/// One image with its label map. `image` is interleaved RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegSample {
    pub image: Vec<u8>,
    pub label: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl SegSample {
    pub fn new(image: Vec<u8>, label: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        if image.len() != 3 * height * width || label.len() != height * width {
            return Err(Error::Dimension(format!(
                "sample buffers ({} image bytes, {} labels) do not match {height}x{width}",
                image.len(),
                label.len()
            )));
        }
        Ok(Self {
            image,
            label,
            height,
            width,
        })
    }
}

/// Random-access source of samples.
pub trait SegDataset: Send + Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<SegSample>;
    fn num_classes(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-channel normalization `(x / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    pub fn normalize(&self, value: f32, channel: usize) -> f32 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, value: f32, channel: usize) -> f32 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// Parameters of the synthetic shape-scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Gaussian pixel noise in [0, 1] colour units.
    pub noise_std: f64,
    /// Uniform per-shape colour perturbation around the class colour, [0, 1] units.
    pub color_jitter: f64,
    /// Shape geometry is snapped to cells of this many pixels.
    pub grid: usize,
    /// Shape extent in grid cells.
    pub size_min: usize,
    pub size_max: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_samples: 256,
            image_size: 64,
            num_classes: 8,
            shapes_min: 2,
            shapes_max: 5,
            noise_std: 0.08,
            color_jitter: 0.08,
            grid: 4,
            size_min: 3,
            size_max: 8,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "synthetic data needs 2..=255 classes, got {}",
                self.num_classes
            )));
        }
        if self.grid == 0 || self.image_size == 0 || self.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of grid {}",
                self.image_size, self.grid
            )));
        }
        let cells = self.image_size / self.grid;
        if self.size_min == 0 || self.size_min > self.size_max || self.size_max > cells {
            return Err(Error::Config(format!(
                "shape size range {}..={} must lie within 1..={cells} cells",
                self.size_min, self.size_max
            )));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("shapes_min exceeds shapes_max".into()));
        }
        if !(self.noise_std >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::Config("noise_std and color_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Base colour of a class, spread around the hue circle with alternating brightness.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.5, 0.5, 0.5];
    }
    let hue = (class - 1) as f64 / (num_classes - 1).max(1) as f64;
    let value = if class % 2 == 0 { 0.95 } else { 0.75 };
    hsv_to_rgb(hue, 0.85, value)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).min(5.999_999);
    let i = h6.floor() as usize;
    let f = h6 - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Circle { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    /// Membership of the grid cell `(cy, cx)`, tested at the cell centre.
    fn covers(&self, cy: usize, cx: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => cy >= y0 && cy < y1 && cx >= x0 && cx < x1,
            Shape::Circle { cy: oy, cx: ox, r } => {
                let dy = cy as f64 + 0.5 - oy;
                let dx = cx as f64 + 0.5 - ox;
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

/// In-memory dataset.
#[derive(Debug, Clone)]
pub struct MemoryDataset {
    samples: Vec<SegSample>,
    num_classes: usize,
}

impl MemoryDataset {
    pub fn new(samples: Vec<SegSample>, num_classes: usize) -> Self {
        Self {
            samples,
            num_classes,
        }
    }

    pub fn samples(&self) -> &[SegSample] {
        &self.samples
    }
}

impl SegDataset for MemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<SegSample> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("sample {index} out of range (len {})", self.samples.len())))
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Generates shape scenes: a class-0 background with rectangles and discs of classes
/// `1..K` painted back to front; the label records the topmost shape at each pixel.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<MemoryDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let size = spec.image_size;
    let g = spec.grid;
    let cells = size / g;
    let k = spec.num_classes;
    let mut samples = Vec::with_capacity(spec.num_samples);
    for _ in 0..spec.num_samples {
        let mut cell_label = vec![0u8; cells * cells];
        let mut cell_color = vec![class_color(0, k); cells * cells];
        let n_shapes = rng.random_range(spec.shapes_min..=spec.shapes_max);
        for _ in 0..n_shapes {
            let class = rng.random_range(1..k);
            let base = class_color(class, k);
            let mut color = base;
            for c in &mut color {
                *c = (*c + rng.random_range(-1.0..=1.0) * spec.color_jitter).clamp(0.0, 1.0);
            }
            let shape = if rng.random_bool(0.5) {
                let hh = rng.random_range(spec.size_min..=spec.size_max);
                let ww = rng.random_range(spec.size_min..=spec.size_max);
                let y0 = rng.random_range(0..=cells - hh);
                let x0 = rng.random_range(0..=cells - ww);
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + hh,
                    x1: x0 + ww,
                }
            } else {
                let d = rng.random_range(spec.size_min..=spec.size_max);
                let r = d as f64 / 2.0;
                let cy = rng.random_range(r..=(cells as f64 - r).max(r));
                let cx = rng.random_range(r..=(cells as f64 - r).max(r));
                Shape::Circle { cy, cx, r }
            };
            for cy in 0..cells {
                for cx in 0..cells {
                    if shape.covers(cy, cx) {
                        cell_label[cy * cells + cx] = class as u8;
                        cell_color[cy * cells + cx] = color;
                    }
                }
            }
        }
        let mut image = Vec::with_capacity(3 * size * size);
        let mut label = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let cell = (y / g) * cells + x / g;
                label.push(cell_label[cell]);
                for c in 0..3 {
                    let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let v = (cell_color[cell][c] + n).clamp(0.0, 1.0);
                    image.push((v * 255.0).round() as u8);
                }
            }
        }
        samples.push(SegSample::new(image, label, size, size)?);
    }
    Ok(MemoryDataset::new(samples, k))
}

/// Writes `images/NNNNN.png` (RGB) and `labels/NNNNN.png` (8-bit IDs) under `out_dir`.
pub fn export_dataset(dataset: &dyn SegDataset, out_dir: &Path) -> Result<()> {
    let img_dir = out_dir.join("images");
    let lbl_dir = out_dir.join("labels");
    for d in [&img_dir, &lbl_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for i in 0..dataset.len() {
        let s = dataset.get(i)?;
        let name = format!("{i:05}.png");
        let rgb = image::RgbImage::from_raw(s.width as u32, s.height as u32, s.image)
            .ok_or_else(|| Error::Dimension("image buffer size".into()))?;
        let path = img_dir.join(&name);
        rgb.save(&path).map_err(|e| Error::Image { path, source: e })?;
        let gray = image::GrayImage::from_raw(s.width as u32, s.height as u32, s.label)
            .ok_or_else(|| Error::Dimension("label buffer size".into()))?;
        let path = lbl_dir.join(&name);
        gray.save(&path).map_err(|e| Error::Image { path, source: e })?;
    }
    Ok(())
}

/// Image/label pairs on disk, matched by file stem. Labels are validated when the
/// dataset is opened; images are decoded on access.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pairs: Vec<(PathBuf, PathBuf)>,
    num_classes: usize,
    pub warnings: Vec<String>,
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn read_label(path: &Path) -> Result<image::GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::Data(format!(
            "{}: labels must be single-channel 8-bit, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn load_paired_dataset(image_dir: &Path, label_dir: &Path, num_classes: usize) -> Result<PairedDataset> {
    let images = list_by_stem(image_dir)?;
    let labels = list_by_stem(label_dir)?;
    let mut problems = Vec::new();
    for stem in images.keys().filter(|s| !labels.contains_key(*s)) {
        problems.push(format!("image `{stem}` has no label"));
    }
    for stem in labels.keys().filter(|s| !images.contains_key(*s)) {
        problems.push(format!("label `{stem}` has no image"));
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!(
            "{} unpaired file(s): {}",
            problems.len(),
            problems.join("; ")
        )));
    }
    let mut pairs = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let lbl_path = labels[stem].clone();
        let lbl = read_label(&lbl_path)?;
        for (x, y, p) in lbl.enumerate_pixels() {
            let v = p.0[0];
            if v != IGNORE_INDEX && v as usize >= num_classes {
                return Err(Error::Data(format!(
                    "{}: label ID {v} at (x {x}, y {y}) is outside 0..{num_classes} and is not {IGNORE_INDEX}",
                    lbl_path.display()
                )));
            }
        }
        pairs.push((img_path.clone(), lbl_path));
    }
    let mut warnings = Vec::new();
    if pairs.is_empty() {
        let msg = format!(
            "no image/label pairs found in {} and {}",
            image_dir.display(),
            label_dir.display()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(PairedDataset {
        pairs,
        num_classes,
        warnings,
    })
}

impl SegDataset for PairedDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn get(&self, index: usize) -> Result<SegSample> {
        let (img_path, lbl_path) = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::Data(format!("sample {index} out of range (len {})", self.pairs.len())))?;
        let rgb = image::open(img_path)
            .map_err(|e| Error::Image {
                path: img_path.clone(),
                source: e,
            })?
            .to_rgb8();
        let lbl = read_label(lbl_path)?;
        if rgb.dimensions() != lbl.dimensions() {
            return Err(Error::Dimension(format!(
                "{} is {:?} but its label is {:?}",
                img_path.display(),
                rgb.dimensions(),
                lbl.dimensions()
            )));
        }
        let (w, h) = rgb.dimensions();
        SegSample::new(rgb.into_raw(), lbl.into_raw(), h as usize, w as usize)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Bilinear resize of interleaved RGB to `out_h x out_w`, returned as `[0, 1]` floats
/// in channel-major `(3, H, W)` order.
pub fn resize_image(sample: &SegSample, out_h: usize, out_w: usize) -> Vec<f32> {
    let (h, w) = (sample.height, sample.width);
    let rh = bilinear_weights(out_h, h);
    let rw = bilinear_weights(out_w, w);
    let taps = |m: &[f64], o: usize, n: usize| -> Vec<(usize, f64)> {
        (0..n).filter(|&i| m[o * n + i] != 0.0).map(|i| (i, m[o * n + i])).collect()
    };
    let mut out = vec![0f32; 3 * out_h * out_w];
    for oy in 0..out_h {
        let ty = taps(&rh, oy, h);
        for ox in 0..out_w {
            let tx = taps(&rw, ox, w);
            for c in 0..3 {
                let mut acc = 0.0;
                for &(iy, wy) in &ty {
                    for &(ix, wx) in &tx {
                        acc += wy * wx * sample.image[(iy * w + ix) * 3 + c] as f64;
                    }
                }
                out[(c * out_h + oy) * out_w + ox] = (acc / 255.0) as f32;
            }
        }
    }
    out
}

pub fn resize_label(sample: &SegSample, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = nearest_source(oy, out_h, sample.height);
        for ox in 0..out_w {
            let sx = nearest_source(ox, out_w, sample.width);
            out.push(sample.label[sy * sample.width + sx]);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    #[serde(default)]
    pub hflip: bool,
    /// Random crop `[h, w]` taken after resizing.
    #[serde(default)]
    pub random_crop: Option<[usize; 2]>,
}

/// A model-ready batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: LabelBatch,
    pub indices: Vec<usize>,
}

/// Deterministic batching: the sample order of epoch `e` is a shuffle seeded by
/// `(seed, e)`, so any iteration's batch can be rebuilt without replaying the past.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pub batch_size: usize,
    pub seed: u64,
    pub resize_to: (usize, usize),
    pub normalization: Normalization,
    pub augment: Augment,
    len: usize,
}

impl BatchSampler {
    /// `stride` is the model's total stride; the output size must be a multiple of it.
    pub fn new(
        dataset_len: usize,
        batch_size: usize,
        seed: u64,
        resize_to: (usize, usize),
        stride: usize,
        normalization: Normalization,
        augment: Augment,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let (oh, ow) = augment.random_crop.map(|[h, w]| (h, w)).unwrap_or(resize_to);
        if stride == 0 || oh % stride != 0 || ow % stride != 0 || oh == 0 || ow == 0 {
            return Err(Error::Config(format!(
                "batch size {oh}x{ow} must be a non-zero multiple of the model stride {stride}"
            )));
        }
        if oh > resize_to.0 || ow > resize_to.1 {
            return Err(Error::Config(format!(
                "crop {oh}x{ow} exceeds the resize target {}x{}",
                resize_to.0, resize_to.1
            )));
        }
        Ok(Self {
            batch_size,
            seed,
            resize_to,
            normalization,
            augment,
            len: dataset_len,
        })
    }

    /// Full batches per epoch (the trailing partial batch is dropped during training).
    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Sample indices of the `iteration`-th training batch.
    pub fn indices_for(&self, iteration: u64) -> Result<Vec<usize>> {
        let per_epoch = self.batches_per_epoch() as u64;
        if per_epoch == 0 {
            return Err(Error::Config(format!(
                "dataset of {} samples cannot fill a batch of {}",
                self.len, self.batch_size
            )));
        }
        let epoch = iteration / per_epoch;
        let slot = (iteration % per_epoch) as usize;
        let order = self.epoch_order(epoch);
        Ok(order[slot * self.batch_size..(slot + 1) * self.batch_size].to_vec())
    }

    pub fn batch(&self, dataset: &dyn SegDataset, iteration: u64, device: &Device) -> Result<Batch> {
        let indices = self.indices_for(iteration)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(iteration.wrapping_mul(0xA24B_AED4_963E_E407)));
        self.assemble(dataset, &indices, Some(&mut rng), device)
    }

    /// Every sample in index order, without augmentation; the last batch may be short.
    pub fn sequential(&self, dataset: &dyn SegDataset, device: &Device) -> Result<Vec<Batch>> {
        let idx: Vec<usize> = (0..dataset.len()).collect();
        idx.chunks(self.batch_size)
            .map(|c| self.assemble(dataset, c, None, device))
            .collect()
    }

    fn assemble(
        &self,
        dataset: &dyn SegDataset,
        indices: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
        device: &Device,
    ) -> Result<Batch> {
        let (rh, rw) = self.resize_to;
        let (oh, ow) = match (&rng, self.augment.random_crop) {
            (Some(_), Some([h, w])) => (h, w),
            _ => (rh, rw),
        };
        let mut images = Vec::with_capacity(indices.len() * 3 * oh * ow);
        let mut labels = Vec::with_capacity(indices.len() * oh * ow);
        for &i in indices {
            let s = dataset.get(i)?;
            let img = resize_image(&s, rh, rw);
            let lbl = resize_label(&s, rh, rw);
            let (mut y0, mut x0, mut flip) = (0, 0, false);
            if let Some(r) = rng.as_deref_mut() {
                if self.augment.random_crop.is_some() {
                    y0 = r.random_range(0..=rh - oh);
                    x0 = r.random_range(0..=rw - ow);
                }
                flip = self.augment.hflip && r.random_bool(0.5);
            }
            for c in 0..3 {
                for y in 0..oh {
                    for x in 0..ow {
                        let sx = if flip { x0 + ow - 1 - x } else { x0 + x };
                        let v = img[(c * rh + y0 + y) * rw + sx];
                        images.push(self.normalization.normalize(v, c));
                    }
                }
            }
            for y in 0..oh {
                for x in 0..ow {
                    let sx = if flip { x0 + ow - 1 - x } else { x0 + x };
                    labels.push(lbl[(y0 + y) * rw + sx]);
                }
            }
        }
        let b = indices.len();
        Ok(Batch {
            images: Tensor::from_vec(images, (b, 3, oh, ow), device)?,
            labels: LabelBatch::new(labels, b, oh, ow)?,
            indices: indices.to_vec(),
        })
    }
}

/// Convenience constructor mirroring the usual loader call.
pub fn make_batches(
    dataset: &dyn SegDataset,
    batch_size: usize,
    seed: u64,
    resize_to: (usize, usize),
    stride: usize,
) -> Result<BatchSampler> {
    BatchSampler::new(
        dataset.len(),
        batch_size,
        seed,
        resize_to,
        stride,
        Normalization::default(),
        Augment::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            num_samples: 6,
            image_size: 32,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a.samples(), b.samples());
        let mut other = small_spec();
        other.seed = 1;
        assert_ne!(generate_synthetic(&other).unwrap().samples(), a.samples());
    }

    #[test]
    fn noiseless_single_rectangle_has_matching_boundaries() {
        let spec = SynthSpec {
            num_samples: 20,
            image_size: 32,
            shapes_min: 1,
            shapes_max: 1,
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for s in ds.samples() {
            // every pair of pixels has equal colour iff it has equal label
            let mut color_of: BTreeMap<u8, [u8; 3]> = BTreeMap::new();
            for p in 0..s.height * s.width {
                let c = [s.image[3 * p], s.image[3 * p + 1], s.image[3 * p + 2]];
                let prev = color_of.entry(s.label[p]).or_insert(c);
                assert_eq!(*prev, c);
            }
            let colors: std::collections::BTreeSet<_> = color_of.values().collect();
            assert_eq!(colors.len(), color_of.len());
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SynthSpec::default();
        s.num_classes = 1;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.image_size = 30;
        assert!(s.validate().is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let n = Normalization::default();
        for v in [0.0f32, 0.1, 0.5, 0.77, 1.0] {
            for c in 0..3 {
                assert!((n.denormalize(n.normalize(v, c), c) - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampler_rejects_indivisible_size() {
        assert!(BatchSampler::new(10, 2, 0, (30, 32), 32, Normalization::default(), Augment::default()).is_err());
        assert!(BatchSampler::new(10, 0, 0, (32, 32), 32, Normalization::default(), Augment::default()).is_err());
    }

    #[test]
    fn epochs_cover_every_sample_once() {
        let s = BatchSampler::new(10, 3, 7, (32, 32), 32, Normalization::default(), Augment::default()).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|i| s.indices_for(i).unwrap()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_ne!(s.epoch_order(0), s.epoch_order(1));
    }

    #[test]
    fn identity_resize_is_exact() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let s = &ds.samples()[0];
        let img = resize_image(s, 32, 32);
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    assert_eq!(img[(c * 32 + y) * 32 + x], s.image[(y * 32 + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        assert_eq!(resize_label(s, 32, 32), s.label);
    }

    #[test]
    fn flip_mirrors_labels() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let aug = Augment {
            hflip: true,
            random_crop: None,
        };
        let s = BatchSampler::new(6, 1, 0, (32, 32), 32, Normalization::default(), aug).unwrap();
        let mut flipped = 0;
        for it in 0..12 {
            let b = s.batch(&ds, it, &Device::Cpu).unwrap();
            let orig = &ds.samples()[b.indices[0]].label;
            let mirrored: Vec<u8> = (0..32)
                .flat_map(|y| (0..32).rev().map(move |x| (y, x)))
                .map(|(y, x)| orig[y * 32 + x])
                .collect();
            if b.labels.data == mirrored && b.labels.data != *orig {
                flipped += 1;
            } else {
                assert_eq!(b.labels.data, *orig);
            }
        }
        assert!(flipped > 0);
    }
}
