//! Cross-stage feature fusion for the review-style distillation branch.
//!
//! The student's stage maps are visited deepest to shallowest. At each stage a
//! fusion module projects the student map to a common width, mixes it with the
//! resized fused map coming up from the next-deeper stage, and projects the
//! mixture to the teacher's channel count so it can be compared against the
//! teacher's stage map.
//!
//! Two fusion modules are provided. [`SkfModule`] gates the two branches per
//! channel with a selective-kernel style soft attention; [`AbfModule`] gates
//! them per pixel with two spatial attention maps.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{hcl_loss, PyramidSpec};
use crate::ops;
use crate::params::{ParamBuilder, ParamStore};
use crate::tensors::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Skf,
    Abf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Common fusion width `C`.
    pub width: usize,
    /// Reduction ratio `r` of the compact feature.
    pub reduction: usize,
    /// Floor `L` on the compact feature size.
    pub min_dim: usize,
    pub kind: FusionKind,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            width: 64,
            reduction: 16,
            min_dim: 32,
            kind: FusionKind::Skf,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.reduction == 0 || self.min_dim == 0 {
            return Err(Error::Config(
                "fusion width, reduction and min_dim must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Size of the compact feature: `max(C / r, L)` with floor division.
pub fn compact_dim(width: usize, reduction: usize, min_dim: usize) -> usize {
    (width / reduction).max(min_dim)
}

/// Per-channel spatial mean of a `(B, C, H, W)` map, shape `(B, C)`.
pub fn global_avg_pool(u: &Tensor) -> Result<Tensor> {
    u.dims4()?;
    Ok(u.flatten_from(2)?.mean(2)?)
}

/// Batch normalization over the feature axis of a `(B, d)` tensor with running statistics.
#[derive(Debug)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Mutex<Tensor>,
    running_var: Mutex<Tensor>,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1d {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, momentum: f64, eps: f64) -> Result<Self> {
        let gamma = b.ones("gamma", &[dim], false)?;
        let beta = b.zeros("beta", &[dim], false)?;
        let dev = b.device();
        let dtype = b.dtype();
        Ok(Self {
            gamma,
            beta,
            running_mean: Mutex::new(Tensor::zeros(dim, dtype, &dev)?),
            running_var: Mutex::new(Tensor::ones(dim, dtype, &dev)?),
            momentum,
            eps,
        })
    }

    pub fn running_stats(&self) -> (Tensor, Tensor) {
        (
            self.running_mean.lock().expect("bn stats lock").clone(),
            self.running_var.lock().expect("bn stats lock").clone(),
        )
    }

    pub fn set_running_stats(&self, mean: Tensor, var: Tensor) -> Result<()> {
        let dim = self.gamma.dim(0)?;
        if mean.dims() != [dim] || var.dims() != [dim] {
            return Err(Error::Checkpoint(format!(
                "batch-norm statistics must have {dim} entries"
            )));
        }
        *self.running_mean.lock().expect("bn stats lock") = mean;
        *self.running_var.lock().expect("bn stats lock") = var;
        Ok(())
    }

    /// Batch statistics (and a running-stat update) in training mode with more than one
    /// sample; running statistics otherwise. A single sample has no batch variance.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (batch, _) = x.dims2()?;
        let (mean, var) = if training && batch > 1 {
            let mean = x.mean_keepdim(0)?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
            let unbiased = (var.detach() * (batch as f64 / (batch - 1) as f64))?.squeeze(0)?;
            let m = self.momentum;
            let mut rm = self.running_mean.lock().expect("bn stats lock");
            let mut rv = self.running_var.lock().expect("bn stats lock");
            *rm = ((&*rm * (1.0 - m))? + (mean.detach().squeeze(0)? * m)?)?;
            *rv = ((&*rv * (1.0 - m))? + (unbiased * m)?)?;
            (mean, var)
        } else {
            let rm = self.running_mean.lock().expect("bn stats lock").unsqueeze(0)?;
            let rv = self.running_var.lock().expect("bn stats lock").unsqueeze(0)?;
            (rm, rv)
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// `z = ReLU(BN(s @ W^T))` for channel statistics `s` of shape `(B, C)`; `fc_weight` is `(d, C)`.
pub fn compact_feature(s: &Tensor, fc_weight: &Tensor, bn: &BatchNorm1d, training: bool) -> Result<Tensor> {
    let (_, c) = s.dims2()?;
    let (_, wc) = fc_weight.dims2()?;
    if c != wc {
        return Err(Error::Dimension(format!(
            "channel statistics have {c} channels, reduction expects {wc}"
        )));
    }
    let y = ops::linear(s, fc_weight, None)?;
    Ok(bn.forward(&y, training)?.relu()?)
}

/// Two-way channel softmax: `a_c = e^{A_c z} / (e^{A_c z} + e^{B_c z})`, `b_c` likewise.
/// Both gates are `(B, C)` and sum to one.
pub fn sk_gate(z: &Tensor, gate_a: &Tensor, gate_b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, d) = z.dims2()?;
    if gate_a.dims() != gate_b.dims() || gate_a.dims2()?.1 != d {
        return Err(Error::Dimension(format!(
            "gate matrices {:?} / {:?} do not match compact feature size {d}",
            gate_a.dims(),
            gate_b.dims()
        )));
    }
    let la = ops::linear(z, gate_a, None)?;
    let lb = ops::linear(z, gate_b, None)?;
    let m = la.maximum(&lb)?.detach();
    let ea = (la - &m)?.exp()?;
    let eb = (lb - &m)?.exp()?;
    let denom = (&ea + &eb)?;
    Ok(((ea / &denom)?, (eb / denom)?))
}

/// Result of one fusion module: the fused map passed to the next-shallower stage and
/// the teacher-width output that is compared against the teacher.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub u_mid: Tensor,
    pub u_out: FeatureMap,
}

fn check_pair(stage: usize, u_in: &FeatureMap, in_channels: usize, next: Option<&Tensor>, width: usize) -> Result<()> {
    if u_in.channels() != in_channels {
        return Err(Error::Dimension(format!(
            "stage {stage}: fusion module expects {in_channels} input channels, got {}",
            u_in.channels()
        )));
    }
    if let Some(next) = next {
        let (nb, nc, nh, nw) = next.dims4()?;
        let (b, _, h, w) = u_in.dims();
        if nc != width || nb != b {
            return Err(Error::Dimension(format!(
                "stage {stage}: deeper fused map is {:?}, expected batch {b} and {width} channels",
                next.dims()
            )));
        }
        if nh > h || nw > w {
            return Err(Error::Contract(format!(
                "stage {stage}: deeper fused map {nh}x{nw} is larger than the stage map {h}x{w}; review runs deep to shallow"
            )));
        }
    }
    Ok(())
}

/// Selective-kernel fusion of the projected stage map and the resized deeper fused map.
#[derive(Debug)]
pub struct SkfModule {
    pub stage: usize,
    pub proj_in: Tensor,
    pub fc_reduce: Tensor,
    pub bn: BatchNorm1d,
    pub gate_a: Tensor,
    pub gate_b: Tensor,
    pub proj_out: Tensor,
    in_channels: usize,
    width: usize,
}

impl SkfModule {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        stage: usize,
        in_channels: usize,
        out_channels: usize,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let c = cfg.width;
        let d = compact_dim(c, cfg.reduction, cfg.min_dim);
        let proj_in = b.pp("proj_in").kaiming_uniform("weight", &[c, in_channels, 1, 1], in_channels)?;
        let fc_reduce = b.pp("fc_reduce").kaiming_uniform("weight", &[d, c], c)?;
        let bn = BatchNorm1d::new(&mut b.pp("bn"), d, cfg.bn_momentum, cfg.bn_eps)?;
        let gate_a = b.zeros("gate_a", &[c, d], false)?;
        let gate_b = b.zeros("gate_b", &[c, d], false)?;
        let proj_out = b
            .pp("proj_out")
            .kaiming_uniform("weight", &[out_channels, c, 3, 3], c * 9)?;
        Ok(Self {
            stage,
            proj_in,
            fc_reduce,
            bn,
            gate_a,
            gate_b,
            proj_out,
            in_channels,
            width: c,
        })
    }

    /// Channel gates `(a, b)` computed from the element-wise sum of both branches.
    pub fn gates(&self, u_in: &Tensor, u_mid: &Tensor, training: bool) -> Result<(Tensor, Tensor)> {
        let summed = (u_in + u_mid)?;
        let s = global_avg_pool(&summed)?;
        let z = compact_feature(&s, &self.fc_reduce, &self.bn, training)?;
        sk_gate(&z, &self.gate_a, &self.gate_b)
    }

    pub fn forward(&self, u_in: &FeatureMap, u_mid_next: Option<&Tensor>, training: bool) -> Result<FusionOutput> {
        check_pair(self.stage, u_in, self.in_channels, u_mid_next, self.width)?;
        let (_, _, h, w) = u_in.dims();
        let x = ops::conv2d(u_in.tensor(), &self.proj_in, None, 1, 0)?;
        let u_mid = match u_mid_next {
            None => x,
            Some(next) => {
                let y = ops::resize_bilinear(next, h, w)?;
                let (a, b) = self.gates(&x, &y, training)?;
                let (bsz, c) = a.dims2()?;
                let a = a.reshape((bsz, c, 1, 1))?;
                let b = b.reshape((bsz, c, 1, 1))?;
                (x.broadcast_mul(&a)? + y.broadcast_mul(&b)?)?
            }
        };
        let u_out = ops::conv2d(&u_mid, &self.proj_out, None, 1, 1)?;
        Ok(FusionOutput {
            u_mid,
            u_out: FeatureMap::new(u_out, self.stage)?,
        })
    }
}

/// Attention-based fusion: a 1x1 convolution over the concatenated branches yields two
/// spatial maps, normalized against each other at every pixel, that weight the branches.
#[derive(Debug)]
pub struct AbfModule {
    pub stage: usize,
    pub proj_in: Tensor,
    pub att_weight: Tensor,
    pub att_bias: Tensor,
    pub proj_out: Tensor,
    in_channels: usize,
    width: usize,
}

impl AbfModule {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        stage: usize,
        in_channels: usize,
        out_channels: usize,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let c = cfg.width;
        let proj_in = b.pp("proj_in").kaiming_uniform("weight", &[c, in_channels, 1, 1], in_channels)?;
        let att_weight = b.pp("att").kaiming_uniform("weight", &[2, 2 * c, 1, 1], 2 * c)?;
        let att_bias = b.pp("att").zeros("bias", &[2], false)?;
        let proj_out = b
            .pp("proj_out")
            .kaiming_uniform("weight", &[out_channels, c, 3, 3], c * 9)?;
        Ok(Self {
            stage,
            proj_in,
            att_weight,
            att_bias,
            proj_out,
            in_channels,
            width: c,
        })
    }

    /// Spatial weights `(B, 2, H, W)`; channel 0 weights the stage branch.
    pub fn attention(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let cat = Tensor::cat(&[x, y], 1)?;
        let logits = ops::conv2d(&cat, &self.att_weight, Some(&self.att_bias), 1, 0)?;
        ops::softmax(&logits, 1)
    }

    pub fn forward(&self, u_in: &FeatureMap, u_mid_next: Option<&Tensor>, _training: bool) -> Result<FusionOutput> {
        check_pair(self.stage, u_in, self.in_channels, u_mid_next, self.width)?;
        let (_, _, h, w) = u_in.dims();
        let x = ops::conv2d(u_in.tensor(), &self.proj_in, None, 1, 0)?;
        let u_mid = match u_mid_next {
            None => x,
            Some(next) => {
                let y = ops::resize_bilinear(next, h, w)?;
                let att = self.attention(&x, &y)?;
                let wx = att.narrow(1, 0, 1)?;
                let wy = att.narrow(1, 1, 1)?;
                (x.broadcast_mul(&wx)? + y.broadcast_mul(&wy)?)?
            }
        };
        let u_out = ops::conv2d(&u_mid, &self.proj_out, None, 1, 1)?;
        Ok(FusionOutput {
            u_mid,
            u_out: FeatureMap::new(u_out, self.stage)?,
        })
    }
}

#[derive(Debug)]
pub enum FusionModule {
    Skf(SkfModule),
    Abf(AbfModule),
}

impl FusionModule {
    pub fn forward(&self, u_in: &FeatureMap, u_mid_next: Option<&Tensor>, training: bool) -> Result<FusionOutput> {
        match self {
            FusionModule::Skf(m) => m.forward(u_in, u_mid_next, training),
            FusionModule::Abf(m) => m.forward(u_in, u_mid_next, training),
        }
    }
}

/// One fusion module per distilled stage, owning their parameters.
#[derive(Debug)]
pub struct FusionStack {
    modules: Vec<FusionModule>,
    store: ParamStore,
    cfg: FusionConfig,
    teacher_channels: Vec<usize>,
    training: bool,
}

impl FusionStack {
    pub fn new(
        student_channels: &[usize],
        teacher_channels: &[usize],
        cfg: &FusionConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        if student_channels.len() != teacher_channels.len() || student_channels.is_empty() {
            return Err(Error::Config(format!(
                "fusion stack needs matching non-empty stage lists, got {} student / {} teacher",
                student_channels.len(),
                teacher_channels.len()
            )));
        }
        let mut store = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modules = Vec::with_capacity(student_channels.len());
        {
            let mut b = store.builder(&mut rng);
            let mut root = b.pp("fusion");
            for (m, (&cs, &ct)) in student_channels.iter().zip(teacher_channels).enumerate() {
                let mut mb = root.pp(m);
                modules.push(match cfg.kind {
                    FusionKind::Skf => FusionModule::Skf(SkfModule::new(&mut mb, m + 1, cs, ct, cfg)?),
                    FusionKind::Abf => FusionModule::Abf(AbfModule::new(&mut mb, m + 1, cs, ct, cfg)?),
                });
            }
        }
        Ok(Self {
            modules,
            store,
            cfg: cfg.clone(),
            teacher_channels: teacher_channels.to_vec(),
            training: true,
        })
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn modules(&self) -> &[FusionModule] {
        &self.modules
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn teacher_channels(&self) -> &[usize] {
        &self.teacher_channels
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Non-learnable state (batch-norm running statistics), keyed like parameters.
    pub fn buffers(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (m, module) in self.modules.iter().enumerate() {
            if let FusionModule::Skf(skf) = module {
                let (mean, var) = skf.bn.running_stats();
                out.insert(format!("fusion.{m}.bn.running_mean"), mean);
                out.insert(format!("fusion.{m}.bn.running_var"), var);
            }
        }
        out
    }

    pub fn load_buffers(&self, buffers: &BTreeMap<String, Tensor>) -> Result<()> {
        for (m, module) in self.modules.iter().enumerate() {
            if let FusionModule::Skf(skf) = module {
                let get = |k: &str| {
                    buffers
                        .get(&format!("fusion.{m}.bn.{k}"))
                        .cloned()
                        .ok_or_else(|| Error::Checkpoint(format!("missing buffer fusion.{m}.bn.{k}")))
                };
                skf.bn.set_running_stats(
                    get("running_mean")?.to_dtype(self.store.dtype())?,
                    get("running_var")?.to_dtype(self.store.dtype())?,
                )?;
            }
        }
        Ok(())
    }

    /// Runs the modules deepest to shallowest and returns every stage's teacher-width
    /// output, ordered shallow to deep.
    pub fn review(&self, student_fms: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        if student_fms.len() != self.modules.len() {
            return Err(Error::Config(format!(
                "review got {} student maps for {} fusion modules",
                student_fms.len(),
                self.modules.len()
            )));
        }
        let mut outputs: Vec<Option<FeatureMap>> = vec![None; self.modules.len()];
        let mut carry: Option<Tensor> = None;
        for m in (0..self.modules.len()).rev() {
            let out = self.modules[m].forward(&student_fms[m], carry.as_ref(), self.training)?;
            carry = Some(out.u_mid);
            outputs[m] = Some(out.u_out);
        }
        Ok(outputs.into_iter().map(|o| o.expect("every stage visited")).collect())
    }
}

/// Review the student maps through `stack` and score each stage's output against the
/// teacher map with the hierarchical context loss. Losses are indexed shallow to deep.
pub fn review_pipeline(
    student_fms: &[FeatureMap],
    teacher_fms: &[FeatureMap],
    stack: &FusionStack,
    spec: &PyramidSpec,
) -> Result<Vec<Tensor>> {
    if student_fms.len() != teacher_fms.len() {
        return Err(Error::Config(format!(
            "review got {} student maps and {} teacher maps",
            student_fms.len(),
            teacher_fms.len()
        )));
    }
    let outputs = stack.review(student_fms)?;
    outputs
        .iter()
        .zip(teacher_fms)
        .map(|(out, teacher)| hcl_loss(out, &teacher.detach(), spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn stack(kind: FusionKind, s: &[usize], t: &[usize], width: usize) -> FusionStack {
        let cfg = FusionConfig {
            width,
            kind,
            ..FusionConfig::default()
        };
        FusionStack::new(s, t, &cfg, 3, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn compact_dim_floors_then_applies_minimum() {
        assert_eq!(compact_dim(64, 16, 32), 32);
        assert_eq!(compact_dim(1024, 16, 32), 64);
        assert_eq!(compact_dim(70, 16, 2), 4);
    }

    #[test]
    fn gap_of_small_map() {
        let u = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let s = global_avg_pool(&u).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(s, vec![2.5]);
    }

    #[test]
    fn equal_gate_matrices_split_evenly() {
        let dev = Device::Cpu;
        let z = Tensor::randn(0f64, 3.0, (3, 5), &dev).unwrap();
        let a = Tensor::randn(0f64, 1.0, (4, 5), &dev).unwrap();
        let (ga, gb) = sk_gate(&z, &a, &a).unwrap();
        for v in ga.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert_eq!(v, 0.5);
        }
        for v in gb.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn gate_logit_gap_of_ln3_gives_three_quarters() {
        let dev = Device::Cpu;
        let z = Tensor::from_vec(vec![1.0f64, 2.0], (1, 2), &dev).unwrap();
        // (A - B) z = ln 3 with A = [ln3, 0], B = 0
        let a = Tensor::from_vec(vec![3f64.ln(), 0.0], (1, 2), &dev).unwrap();
        let b = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        let (ga, gb) = sk_gate(&z, &a, &b).unwrap();
        assert!((ga.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0] - 0.75).abs() < 1e-12);
        assert!((gb.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gates_survive_huge_logits() {
        let dev = Device::Cpu;
        let z = Tensor::from_vec(vec![1e4f32], (1, 1), &dev).unwrap();
        let a = Tensor::from_vec(vec![1.0f32, -1.0], (2, 1), &dev).unwrap();
        let b = Tensor::from_vec(vec![-1.0f32, 1.0], (2, 1), &dev).unwrap();
        let (ga, gb) = sk_gate(&z, &a, &b).unwrap();
        assert_eq!(ga.to_vec2::<f32>().unwrap(), vec![vec![1.0, 0.0]]);
        assert_eq!(gb.to_vec2::<f32>().unwrap(), vec![vec![0.0, 1.0]]);
    }

    #[test]
    fn compact_feature_identity_case() {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm1d::new(&mut store.builder(&mut rng), 2, 0.1, 0.0).unwrap();
        let s = Tensor::from_vec(vec![-1.0f64, 2.0], (1, 2), &Device::Cpu).unwrap();
        let eye = Tensor::eye(2, DType::F64, &Device::Cpu).unwrap();
        let z = compact_feature(&s, &eye, &bn, false).unwrap();
        assert_eq!(z.to_vec2::<f64>().unwrap(), vec![vec![0.0, 2.0]]);
    }

    #[test]
    fn batch_norm_single_sample_uses_running_stats() {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm1d::new(&mut store.builder(&mut rng), 3, 0.1, 0.0).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, -2.0, 3.0], (1, 3), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), x.to_vec2::<f64>().unwrap());
        let (mean, var) = bn.running_stats();
        assert_eq!(mean.to_vec1::<f64>().unwrap(), vec![0.0; 3]);
        assert_eq!(var.to_vec1::<f64>().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn batch_norm_training_updates_running_stats() {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm1d::new(&mut store.builder(&mut rng), 1, 0.5, 0.0).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 3.0], (2, 1), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-1.0, 1.0]);
        let (mean, var) = bn.running_stats();
        assert_eq!(mean.to_vec1::<f64>().unwrap(), vec![1.0]);
        // unbiased batch variance 2, blended with 1 at momentum 0.5
        assert_eq!(var.to_vec1::<f64>().unwrap(), vec![1.5]);
    }

    #[test]
    fn deepest_stage_of_constant_map_stays_constant() {
        let st = stack(FusionKind::Skf, &[3], &[2], 4);
        let FusionModule::Skf(m) = &st.modules()[0] else { unreachable!() };
        let avg = Tensor::full(1.0f64 / 3.0, (4, 3, 1, 1), &Device::Cpu).unwrap();
        let var = st.store().get("fusion.0.proj_in.weight").unwrap().var.clone();
        var.set(&avg).unwrap();
        let u = FeatureMap::new(Tensor::full(2.5f64, (1, 3, 4, 4), &Device::Cpu).unwrap(), 1).unwrap();
        let out = m.forward(&u, None, false).unwrap();
        for v in out.u_mid.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        assert_eq!(out.u_out.dims(), (1, 2, 4, 4));
    }

    #[test]
    fn deeper_map_larger_than_stage_is_rejected() {
        let st = stack(FusionKind::Skf, &[3, 5], &[2, 4], 4);
        let u = FeatureMap::new(Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap(), 1).unwrap();
        let big = Tensor::zeros((1, 4, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let err = st.modules()[0].forward(&u, Some(&big), true).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn channel_mismatch_names_stage() {
        let st = stack(FusionKind::Abf, &[3, 5], &[2, 4], 4);
        let u = FeatureMap::new(Tensor::zeros((1, 6, 2, 2), DType::F64, &Device::Cpu).unwrap(), 2).unwrap();
        let err = st.modules()[1].forward(&u, None, true).unwrap_err().to_string();
        assert!(err.contains("stage 2"), "{err}");
    }

    #[test]
    fn review_rejects_length_mismatch() {
        let st = stack(FusionKind::Skf, &[3, 5], &[2, 4], 4);
        let u = FeatureMap::new(Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap(), 1).unwrap();
        assert!(matches!(
            review_pipeline(&[u.clone()], &[u.clone(), u], &st, &PyramidSpec::default()),
            Err(Error::Config(_))
        ));
    }
}
