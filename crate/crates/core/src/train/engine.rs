use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{DistillConfig, LossMode};
use super::optim::{grad_norm, poly_lr, AdamW};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::fusion::FusionStack;
use crate::losses::{
    channel_kl_loss, cross_entropy_seg, hcl_loss, logits_kd_loss, pea_loss, spatial_kl_loss, LossWeights, PeaParams,
};
use crate::models::{SegModel, StageTaps};
use crate::ops::scalar;
use crate::tensors::{LabelBatch, IGNORE_INDEX};

/// `ce + sum(alpha_m * embd_m) + sum(beta_m * fm_m)`, accumulated in f64.
pub fn total_loss(ce: &Tensor, embd: &[Tensor], fm: &[Tensor], w: &LossWeights) -> Result<Tensor> {
    if embd.len() != w.alpha.len() || fm.len() != w.beta.len() {
        return Err(Error::Config(format!(
            "total loss got {} embedding / {} feature-map terms for {} / {} weights",
            embd.len(),
            fm.len(),
            w.alpha.len(),
            w.beta.len()
        )));
    }
    let mut total = ce.to_dtype(DType::F64)?;
    for (l, &a) in embd.iter().zip(&w.alpha) {
        total = (total + (l.to_dtype(DType::F64)? * a)?)?;
    }
    for (l, &b) in fm.iter().zip(&w.beta) {
        total = (total + (l.to_dtype(DType::F64)? * b)?)?;
    }
    Ok(total)
}

/// Every loss term of one distillation forward pass, still attached to the graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub ce: Tensor,
    pub valid_pixels: usize,
    /// One entry per stage; disabled PEA stages hold an unattached zero.
    pub embd: Vec<Tensor>,
    pub fm: Vec<Tensor>,
    pub kd: Option<Tensor>,
    pub total: Tensor,
}

/// Gradient L2 norms per parameter group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub student: f64,
    pub fusion: f64,
    pub pea: f64,
}

/// Scalar summary of one optimizer step, as written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: u64,
    pub lr: f64,
    pub ce: f64,
    pub embd: Vec<f64>,
    pub fm: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    pub total: f64,
    pub grad_norm: GradNorms,
}

impl StepReport {
    /// Recombines the reported components with `w` (and the KD weight, if any).
    pub fn recombine(&self, w: &LossWeights, kd_weight: f64) -> f64 {
        let embd: f64 = self.embd.iter().zip(&w.alpha).map(|(l, a)| l * a).sum();
        let fm: f64 = self.fm.iter().zip(&w.beta).map(|(l, b)| l * b).sum();
        self.ce + embd + fm + self.kd.map_or(0.0, |k| k * kd_weight)
    }
}

/// Labels at the logits' resolution (nearest neighbour).
pub fn labels_for_logits(labels: &LabelBatch, logits: &Tensor) -> Result<LabelBatch> {
    let (_, _, h, w) = logits.dims4()?;
    Ok(if (labels.height, labels.width) == (h, w) {
        labels.clone()
    } else {
        labels.resize_nearest(h, w)
    })
}

/// Assembles CE, per-stage embedding and feature-map losses, and the weighted total.
pub fn compute_losses(
    student: &StageTaps,
    teacher: &StageTaps,
    labels: &LabelBatch,
    stack: &FusionStack,
    pea: &PeaParams,
    cfg: &DistillConfig,
) -> Result<LossTerms> {
    let m = student.feature_maps.len();
    if teacher.feature_maps.len() != m || pea.stages() != m || stack.len() != m {
        return Err(Error::Config(format!(
            "stage counts differ: student {m}, teacher {}, fusion {}, pea {}",
            teacher.feature_maps.len(),
            stack.len(),
            pea.stages()
        )));
    }
    let labels = labels_for_logits(labels, &student.logits)?;
    let ce = cross_entropy_seg(&student.logits, &labels, IGNORE_INDEX)?;
    let zero = Tensor::zeros((), student.logits.dtype(), student.logits.device())?;

    let mut embd = Vec::with_capacity(m);
    for i in 0..m {
        embd.push(match pea.matrix(i + 1) {
            Some(w_e) => pea_loss(&student.embeddings[i], w_e, &teacher.embeddings[i].detach())?,
            None => zero.clone(),
        });
    }

    let reviewed = stack.review(&student.feature_maps)?;
    let mut fm = Vec::with_capacity(m);
    for (out, t) in reviewed.iter().zip(&teacher.feature_maps) {
        let t = t.detach();
        fm.push(match cfg.loss_mode {
            LossMode::Hcl => hcl_loss(out, &t, &cfg.pyramid)?,
            LossMode::ChannelKl => channel_kl_loss(out.tensor(), t.tensor(), cfg.kl_temperature)?,
            LossMode::SpatialKl => spatial_kl_loss(out.tensor(), t.tensor(), cfg.kl_temperature)?,
        });
    }

    let mut total = total_loss(&ce.loss, &embd, &fm, &cfg.weights)?;
    let kd = if cfg.kd_weight > 0.0 {
        let kd = logits_kd_loss(&student.logits, &teacher.logits.detach(), cfg.kd_temperature)?;
        total = (total + (kd.to_dtype(DType::F64)? * cfg.kd_weight)?)?;
        Some(kd)
    } else {
        None
    };
    let t = scalar(&total)?;
    if !t.is_finite() {
        return Err(Error::Numeric(format!("total loss is {t}")));
    }
    Ok(LossTerms {
        ce: ce.loss,
        valid_pixels: ce.valid_pixels,
        embd,
        fm,
        kd,
        total,
    })
}

fn scalars(ts: &[Tensor]) -> Result<Vec<f64>> {
    ts.iter().map(scalar).collect()
}

/// One joint optimizer step of student, fusion stack and PEA matrices against a frozen teacher.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    batch: &Batch,
    teacher: &SegModel,
    student: &SegModel,
    stack: &FusionStack,
    pea: &PeaParams,
    cfg: &DistillConfig,
    optimizer: &mut AdamW,
    iter: u64,
) -> Result<StepReport> {
    if !teacher.is_frozen() {
        return Err(Error::Contract("distill_step needs a frozen teacher".into()));
    }
    let teacher_taps = teacher.forward_with_taps(&batch.images)?.detach();
    distill_step_with_taps(batch, &teacher_taps, student, stack, pea, cfg, optimizer, iter)
}

/// [`distill_step`] with the teacher outputs for `batch` already computed.
#[allow(clippy::too_many_arguments)]
pub fn distill_step_with_taps(
    batch: &Batch,
    teacher_taps: &StageTaps,
    student: &SegModel,
    stack: &FusionStack,
    pea: &PeaParams,
    cfg: &DistillConfig,
    optimizer: &mut AdamW,
    iter: u64,
) -> Result<StepReport> {
    let student_taps = student.forward_with_taps(&batch.images)?;
    let terms = compute_losses(&student_taps, &teacher_taps.detach(), &batch.labels, stack, pea, cfg)?;
    let grads = terms.total.backward()?;
    let norms = GradNorms {
        student: grad_norm(student.store(), &grads)?,
        fusion: grad_norm(stack.store(), &grads)?,
        pea: grad_norm(pea.store(), &grads)?,
    };
    let lr = poly_lr(iter, cfg.optimizer.base_lr, &cfg.schedule);
    optimizer.step(&grads, lr)?;
    Ok(StepReport {
        iter,
        lr,
        ce: scalar(&terms.ce)?,
        embd: scalars(&terms.embd)?,
        fm: scalars(&terms.fm)?,
        kd: terms.kd.as_ref().map(scalar).transpose()?,
        total: scalar(&terms.total)?,
        grad_norm: norms,
    })
}

/// One cross-entropy-only step; used for teacher training and the plain-student baseline.
pub fn plain_step(
    batch: &Batch,
    model: &SegModel,
    cfg: &DistillConfig,
    optimizer: &mut AdamW,
    iter: u64,
) -> Result<StepReport> {
    let logits = model.forward(&batch.images)?;
    let labels = labels_for_logits(&batch.labels, &logits)?;
    let ce = cross_entropy_seg(&logits, &labels, IGNORE_INDEX)?;
    let total = ce.loss.to_dtype(DType::F64)?;
    let grads = total.backward()?;
    let lr = poly_lr(iter, cfg.optimizer.base_lr, &cfg.schedule);
    let norms = GradNorms {
        student: grad_norm(model.store(), &grads)?,
        ..GradNorms::default()
    };
    optimizer.step(&grads, lr)?;
    let ce_v = scalar(&ce.loss)?;
    Ok(StepReport {
        iter,
        lr,
        ce: ce_v,
        embd: Vec::new(),
        fm: Vec::new(),
        kd: None,
        total: scalar(&total)?,
        grad_norm: norms,
    })
}
