//! Central finite-difference checks of the analytic gradients, in double precision.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::DistillConfig;
use super::engine::compute_losses;
use crate::error::{Error, Result};
use crate::fusion::{review_pipeline, FusionConfig, FusionStack};
use crate::losses::{hcl_loss, pea_loss, LossWeights, PeaParams, PyramidSpec};
use crate::models::{EmbedTap, EncoderConfig, SegModel};
use crate::ops::scalar;
use crate::params::ParamStore;
use crate::tensors::{FeatureMap, LabelBatch, PatchEmbedding};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Pea,
    Skf,
    Hcl,
    Full,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Pea, Component::Skf, Component::Hcl, Component::Full];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Pea => "pea",
            Component::Skf => "skf",
            Component::Hcl => "hcl",
            Component::Full => "full",
        })
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pea" => Component::Pea,
            "skf" => Component::Skf,
            "hcl" => Component::Hcl,
            "full" => Component::Full,
            other => return Err(Error::Config(format!("unknown gradcheck component `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter tensor and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `loss` against central differences for every listed
/// variable. `max_per_tensor` caps the entries probed per tensor (evenly spaced).
pub fn check_gradients(
    component: &str,
    vars: &[(String, Var)],
    loss: impl Fn() -> Result<Tensor>,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    let grads = loss()?.backward()?;
    let mut report = GradCheckReport {
        component: component.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (name, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(Error::Contract(format!("gradcheck needs f64, `{name}` is {:?}", var.dtype())));
        }
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let picks: Vec<usize> = match max_per_tensor {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut probe = base.clone();
        for &i in &picks {
            probe[i] = base[i] + STEP;
            var.set(&Tensor::from_vec(probe.clone(), &shape, var.device())?)?;
            let up = scalar(&loss()?)?;
            probe[i] = base[i] - STEP;
            var.set(&Tensor::from_vec(probe.clone(), &shape, var.device())?)?;
            let down = scalar(&loss()?)?;
            probe[i] = base[i];
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(analytic[i], numeric, FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
        var.set(&Tensor::from_vec(base, &shape, var.device())?)?;
    }
    Ok(report)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).map(|x: f64| x * scale).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn store_vars(store: &ParamStore) -> Vec<(String, Var)> {
    store.iter().map(|(k, p)| (k.clone(), p.var.clone())).collect()
}

/// Replaces the zero-initialized gate matrices with random values so the gates are not
/// probed only at the symmetric point.
fn randomize_gates(stack: &FusionStack, rng: &mut ChaCha8Rng) -> Result<()> {
    for (name, p) in stack.store().iter() {
        if name.ends_with("gate_a") || name.ends_with("gate_b") {
            p.var.set(&randn(rng, p.var.dims(), 0.5)?)?;
        }
    }
    Ok(())
}

fn check_pea(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let e_s = Var::from_tensor(&randn(rng, &[1, 2, 3], 1.0)?)?;
    let w_e = Var::from_tensor(&randn(rng, &[3, 4], 0.5)?)?;
    let e_t = PatchEmbedding::new(randn(rng, &[1, 2, 4], 1.0)?, 1)?;
    let vars = vec![("e_student".to_string(), e_s.clone()), ("w_e".to_string(), w_e.clone())];
    check_gradients(
        "pea",
        &vars,
        || pea_loss(&PatchEmbedding::new(e_s.as_tensor().clone(), 1)?, w_e.as_tensor(), &e_t),
        None,
    )
}

fn check_hcl(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let u = Var::from_tensor(&randn(rng, &[1, 3, 4, 4], 1.0)?)?;
    let t = FeatureMap::new(randn(rng, &[1, 3, 4, 4], 1.0)?, 1)?;
    let full = PyramidSpec {
        include_full_level: true,
        ..PyramidSpec::default()
    };
    let odd = PyramidSpec::new(vec![3, 2])?;
    let vars = vec![("u_out".to_string(), u.clone())];
    check_gradients(
        "hcl",
        &vars,
        || {
            let fm = FeatureMap::new(u.as_tensor().clone(), 1)?;
            let a = hcl_loss(&fm, &t, &PyramidSpec::default())?;
            let b = hcl_loss(&fm, &t, &full)?;
            let c = hcl_loss(&fm, &t, &odd)?;
            Ok(((a + b)? + c)?)
        },
        None,
    )
}

fn check_skf(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = FusionConfig {
        width: 4,
        min_dim: 4,
        reduction: 2,
        ..FusionConfig::default()
    };
    let stack = FusionStack::new(&[3, 5], &[4, 6], &cfg, 11, DType::F64, &Device::Cpu)?;
    randomize_gates(&stack, rng)?;
    let s1 = Var::from_tensor(&randn(rng, &[1, 3, 4, 4], 1.0)?)?;
    let s2 = Var::from_tensor(&randn(rng, &[1, 5, 2, 2], 1.0)?)?;
    let teacher = vec![
        FeatureMap::new(randn(rng, &[1, 4, 4, 4], 1.0)?, 1)?,
        FeatureMap::new(randn(rng, &[1, 6, 2, 2], 1.0)?, 2)?,
    ];
    let mut vars = store_vars(stack.store());
    vars.push(("student.1".to_string(), s1.clone()));
    vars.push(("student.2".to_string(), s2.clone()));
    check_gradients(
        "skf",
        &vars,
        || {
            let student = vec![
                FeatureMap::new(s1.as_tensor().clone(), 1)?,
                FeatureMap::new(s2.as_tensor().clone(), 2)?,
            ];
            let losses = review_pipeline(&student, &teacher, &stack, &PyramidSpec::default())?;
            Ok((&losses[0] + &losses[1])?)
        },
        None,
    )
}

fn tiny_encoder(channels: [usize; 2], num_classes: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        stage_channels: channels.to_vec(),
        stage_depths: vec![1, 1],
        stage_strides: vec![2, 2],
        patch_kernel: vec![3, 3],
        heads: vec![1, 2],
        attn_reduction: vec![2, 1],
        mlp_ratio: 2,
        decoder_width: 4,
        num_classes,
        embed_tap: EmbedTap::AfterPatchEmbed,
    }
}

fn check_full(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let k = 3;
    let student = SegModel::new(&tiny_encoder([4, 8], k), 1, DType::F64, &Device::Cpu)?;
    let mut teacher = SegModel::new(&tiny_encoder([6, 10], k), 2, DType::F64, &Device::Cpu)?;
    teacher.set_frozen(true);
    let cfg = DistillConfig {
        weights: LossWeights {
            alpha: vec![0.5, 1.0],
            beta: vec![1.0, 1.0],
        },
        pea_stages: vec![true, true],
        fusion: FusionConfig {
            width: 4,
            min_dim: 4,
            reduction: 2,
            ..FusionConfig::default()
        },
        ..DistillConfig::default()
    };
    let stack = FusionStack::new(&[4, 8], &[6, 10], &cfg.fusion, 3, DType::F64, &Device::Cpu)?;
    randomize_gates(&stack, rng)?;
    let pea = PeaParams::new(&[4, 8], &[6, 10], &[true, true], 4, DType::F64, &Device::Cpu)?;
    let images = randn(rng, &[1, 3, 8, 8], 1.0)?;
    let labels: Vec<u8> = (0..16).map(|i| (i * 7 % 4) as u8).map(|l| if l == 3 { 255 } else { l }).collect();
    let labels = LabelBatch::new(labels, 1, 4, 4)?;
    let teacher_taps = teacher.forward_with_taps(&images)?;
    let mut vars = store_vars(student.store());
    vars.extend(store_vars(stack.store()));
    vars.extend(store_vars(pea.store()));
    check_gradients(
        "full",
        &vars,
        || {
            let taps = student.forward_with_taps(&images)?;
            Ok(compute_losses(&taps, &teacher_taps, &labels, &stack, &pea, &cfg)?.total)
        },
        Some(12),
    )
}

/// Runs one component's check on fixed tiny inputs. Fails with the worst parameter and
/// index when the relative error reaches the tolerance.
pub fn gradcheck(component: Component) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6752_6164);
    let report = match component {
        Component::Pea => check_pea(&mut rng)?,
        Component::Skf => check_skf(&mut rng)?,
        Component::Hcl => check_hcl(&mut rng)?,
        Component::Full => check_full(&mut rng)?,
    };
    if !report.passed() {
        let (name, idx) = report.worst.clone().unwrap_or_default();
        return Err(Error::GradCheck(format!(
            "{component}: `{name}` index {idx} has relative error {:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
            report.max_rel_error
        )));
    }
    Ok(report)
}
