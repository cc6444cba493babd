//! Distillation losses and the segmentation cross-entropy.
//!
//! All losses return scalar tensors that stay attached to the autodiff graph.
//! MSE terms reduce with the mean over every element, so stage weights keep the
//! same meaning whatever the stage's size.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::tensors::{FeatureMap, LabelBatch, PatchEmbedding, IGNORE_INDEX};

/// Pool sizes of the hierarchical context loss; level `n` (1-based) uses `pool_sizes[n - 1]`
/// with weight `2^-n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSpec {
    pub pool_sizes: Vec<usize>,
    /// Adds a weight-1 full-resolution term matching the `1` in the normalizer.
    #[serde(default)]
    pub include_full_level: bool,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self {
            pool_sizes: vec![4, 2, 1],
            include_full_level: false,
        }
    }
}

impl PyramidSpec {
    pub fn new(pool_sizes: Vec<usize>) -> Result<Self> {
        let spec = Self {
            pool_sizes,
            include_full_level: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_levels(&self) -> usize {
        self.pool_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_sizes.is_empty() {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if let Some(i) = self.pool_sizes.iter().position(|&p| p == 0) {
            return Err(Error::Config(format!("pyramid pool size at level {} is 0", i + 1)));
        }
        Ok(())
    }

    /// `(pool size, weight)` per term, plus the constant added to the weight sum in the normalizer.
    fn levels(&self) -> (Vec<(usize, f64)>, f64) {
        let mut levels: Vec<(usize, f64)> = self
            .pool_sizes
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, 0.5f64.powi(i as i32 + 1)))
            .collect();
        if self.include_full_level {
            levels.insert(0, (1, 1.0));
            (levels, 0.0)
        } else {
            (levels, 1.0)
        }
    }
}

/// Per-stage weights of the embedding and feature-map terms in the total loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: vec![0.1, 0.1, 0.5, 1.0],
            beta: vec![1.0, 1.0, 1.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self, stages: usize) -> Result<()> {
        if self.alpha.len() != stages || self.beta.len() != stages {
            return Err(Error::Config(format!(
                "loss weights need {stages} entries each, got alpha {} / beta {}",
                self.alpha.len(),
                self.beta.len()
            )));
        }
        if self
            .alpha
            .iter()
            .chain(&self.beta)
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Learnable channel-alignment matrices, one `(C_student, C_teacher)` matrix per distilled stage.
#[derive(Debug, Clone)]
pub struct PeaParams {
    store: ParamStore,
    matrices: Vec<Option<Tensor>>,
}

impl PeaParams {
    /// `enabled[m]` selects whether stage `m + 1` gets a matrix.
    pub fn new(
        student_channels: &[usize],
        teacher_channels: &[usize],
        enabled: &[bool],
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if student_channels.len() != teacher_channels.len() || enabled.len() != student_channels.len() {
            return Err(Error::Config(format!(
                "PEA needs one entry per stage: student {}, teacher {}, toggles {}",
                student_channels.len(),
                teacher_channels.len(),
                enabled.len()
            )));
        }
        let mut store = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrices = Vec::with_capacity(enabled.len());
        {
            let mut b = store.builder(&mut rng);
            for (m, ((&cs, &ct), &on)) in student_channels
                .iter()
                .zip(teacher_channels)
                .zip(enabled)
                .enumerate()
            {
                matrices.push(if on {
                    Some(b.pp("pea").pp(m).kaiming_uniform("w_e", &[cs, ct], cs)?)
                } else {
                    None
                });
            }
        }
        Ok(Self { store, matrices })
    }

    /// Matrix for 1-based `stage`, if that stage is distilled.
    pub fn matrix(&self, stage: usize) -> Option<&Tensor> {
        self.matrices.get(stage.wrapping_sub(1)).and_then(|m| m.as_ref())
    }

    pub fn stages(&self) -> usize {
        self.matrices.len()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Mean squared error between `E_s @ W_e` and `E_t`. The teacher side is detached.
pub fn pea_loss(e_student: &PatchEmbedding, w_e: &Tensor, e_teacher: &PatchEmbedding) -> Result<Tensor> {
    let stage = e_student.stage();
    let (bs, ns, cs) = e_student.dims();
    let (bt, nt, ct) = e_teacher.dims();
    if bs != bt || ns != nt {
        return Err(Error::Dimension(format!(
            "stage {stage}: student embedding (B={bs}, N={ns}) and teacher embedding (B={bt}, N={nt}) differ"
        )));
    }
    if w_e.dims() != [cs, ct] {
        return Err(Error::Dimension(format!(
            "stage {stage}: alignment matrix is {:?}, expected [{cs}, {ct}]",
            w_e.dims()
        )));
    }
    let aligned = e_student.tensor().broadcast_matmul(w_e)?;
    let loss = (aligned - e_teacher.tensor().detach())?.sqr()?.mean_all()?;
    check_scalar(&loss, &format!("stage {stage} patch-embedding loss"))?;
    Ok(loss)
}

/// `sum_n w_n * MSE(pool(out, p_n), pool(teacher, p_n)) / (base + sum_n w_n)`.
pub fn weighted_pyramid_mse(
    u_out: &Tensor,
    u_teacher: &Tensor,
    levels: &[(usize, f64)],
    base: f64,
) -> Result<Tensor> {
    if levels.is_empty() {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    if u_out.dims() != u_teacher.dims() {
        return Err(Error::Dimension(format!(
            "fused output {:?} and teacher map {:?} differ",
            u_out.dims(),
            u_teacher.dims()
        )));
    }
    let mut total: Option<Tensor> = None;
    let mut weight_sum = base;
    for &(pool, weight) in levels {
        let a = ops::avg_pool_ceil(u_out, pool)?;
        let b = ops::avg_pool_ceil(u_teacher, pool)?;
        let term = ((a - b)?.sqr()?.mean_all()? * weight)?;
        weight_sum += weight;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.expect("at least one level") / weight_sum)?)
}

/// Hierarchical context loss between a fused student output and the teacher's stage map.
pub fn hcl_loss(u_out: &FeatureMap, u_teacher: &FeatureMap, spec: &PyramidSpec) -> Result<Tensor> {
    spec.validate()?;
    if u_out.dims() != u_teacher.dims() {
        return Err(Error::Dimension(format!(
            "stage {}: fused output {:?} and teacher map {:?} differ",
            u_out.stage(),
            u_out.dims(),
            u_teacher.dims()
        )));
    }
    let (levels, base) = spec.levels();
    let loss = weighted_pyramid_mse(u_out.tensor(), &u_teacher.tensor().detach(), &levels, base)?;
    check_scalar(&loss, &format!("stage {} feature-map loss", u_out.stage()))?;
    Ok(loss)
}

/// Cross-entropy result; `all_ignored` is set when no pixel contributed.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: Tensor,
    pub valid_pixels: usize,
    pub all_ignored: bool,
}

/// Mean softmax cross-entropy over non-ignored pixels of `(B, K, h, w)` logits.
pub fn cross_entropy_seg(logits: &Tensor, labels: &LabelBatch, ignore_index: u8) -> Result<CrossEntropy> {
    let (b, k, h, w) = logits.dims4()?;
    if (labels.batch, labels.height, labels.width) != (b, h, w) {
        return Err(Error::Dimension(format!(
            "labels are {}x{}x{}, logits need {b}x{h}x{w}",
            labels.batch, labels.height, labels.width
        )));
    }
    let mut mask = vec![0f32; b * k * h * w];
    let mut valid = 0usize;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let l = labels.get(bi, y, x);
                if l == ignore_index {
                    continue;
                }
                if l as usize >= k {
                    return Err(Error::Data(format!(
                        "label {l} at (batch {bi}, y {y}, x {x}) is outside 0..{k}"
                    )));
                }
                mask[((bi * k + l as usize) * h + y) * w + x] = 1.0;
                valid += 1;
            }
        }
    }
    if valid == 0 {
        return Ok(CrossEntropy {
            loss: Tensor::zeros((), logits.dtype(), logits.device())?,
            valid_pixels: 0,
            all_ignored: true,
        });
    }
    let mask = Tensor::from_vec(mask, (b, k, h, w), logits.device())?.to_dtype(logits.dtype())?;
    let logp = ops::log_softmax(logits, 1)?;
    let loss = ((logp * mask)?.sum_all()?.neg()? / valid as f64)?;
    check_scalar(&loss, "cross-entropy")?;
    Ok(CrossEntropy {
        loss,
        valid_pixels: valid,
        all_ignored: false,
    })
}

/// `sum p_t (log p_t - log p_s)` along `dim`, with the teacher detached.
fn kl_along(student: &Tensor, teacher: &Tensor, dim: usize, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    if student.dims() != teacher.dims() {
        return Err(Error::Dimension(format!(
            "student {:?} and teacher {:?} differ",
            student.dims(),
            teacher.dims()
        )));
    }
    let log_ps = ops::log_softmax(&(student / temperature)?, dim)?;
    let log_pt = ops::log_softmax(&(teacher.detach() / temperature)?, dim)?;
    let pt = log_pt.exp()?;
    Ok((pt * (log_pt - log_ps)?)?.sum_keepdim(dim)?)
}

/// Pixel-wise KL between temperature-softened teacher and student class distributions,
/// averaged over pixels and scaled by `T^2`.
pub fn logits_kd_loss(student_logits: &Tensor, teacher_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let kl = kl_along(student_logits, teacher_logits, 1, temperature)?;
    let loss = (kl.mean_all()? * (temperature * temperature))?;
    check_scalar(&loss, "logit distillation loss")?;
    Ok(loss)
}

/// Channel-wise distillation: softmax over each channel's spatial positions,
/// KL per channel, mean over channels (and batch), scaled by `T^2`.
pub fn channel_kl_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<Tensor> {
    let (b, c, h, w) = student.dims4()?;
    if teacher.dims() != student.dims() {
        return Err(Error::Dimension(format!(
            "student {:?} and teacher {:?} differ",
            student.dims(),
            teacher.dims()
        )));
    }
    let s = student.reshape((b, c, h * w))?;
    let t = teacher.reshape((b, c, h * w))?;
    let kl = kl_along(&s, &t, 2, temperature)?;
    let loss = (kl.mean_all()? * (temperature * temperature))?;
    check_scalar(&loss, "channel KL loss")?;
    Ok(loss)
}

/// Spatial distillation: softmax over channels at each pixel, KL per pixel,
/// mean over pixels, scaled by `T^2`.
pub fn spatial_kl_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<Tensor> {
    student.dims4()?;
    let kl = kl_along(student, teacher, 1, temperature)?;
    let loss = (kl.mean_all()? * (temperature * temperature))?;
    check_scalar(&loss, "spatial KL loss")?;
    Ok(loss)
}

fn check_scalar(loss: &Tensor, what: &str) -> Result<()> {
    let v = ops::scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("{what} is {v}")));
    }
    Ok(())
}

/// Returns `Ok(())` when every label is a valid class or the ignore index.
pub fn validate_labels(labels: &LabelBatch, num_classes: usize) -> Result<()> {
    for (i, &l) in labels.data.iter().enumerate() {
        if l != IGNORE_INDEX && l as usize >= num_classes {
            let x = i % labels.width;
            let y = (i / labels.width) % labels.height;
            let b = i / (labels.width * labels.height);
            return Err(Error::Data(format!(
                "label {l} at (batch {b}, y {y}, x {x}) is outside 0..{num_classes}"
            )));
        }
    }
    Ok(())
}
