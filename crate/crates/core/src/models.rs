//! Toy hierarchical vision transformers with per-stage taps.
//!
//! Each stage is an overlapping convolutional patch embedding, a stack of
//! transformer blocks with spatially reduced attention and a depthwise
//! convolution inside the MLP, and a final layer norm. There is no positional
//! encoding; the convolutions carry the spatial structure. A light all-MLP head
//! projects every stage to a common width, resizes to the first stage's
//! resolution, fuses and classifies.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{ParamBuilder, ParamStore};
use crate::tensors::{FeatureMap, PatchEmbedding};

const LN_EPS: f64 = 1e-6;

/// Where the per-stage patch embedding is tapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedTap {
    /// After the patch projection and its norm, before the stage's blocks.
    #[default]
    AfterPatchEmbed,
    /// After the stage's blocks.
    AfterBlocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub patch_kernel: Vec<usize>,
    pub heads: Vec<usize>,
    pub attn_reduction: Vec<usize>,
    pub mlp_ratio: usize,
    pub decoder_width: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub embed_tap: EmbedTap,
}

impl EncoderConfig {
    fn four_stage(channels: [usize; 4], depths: [usize; 4], heads: [usize; 4], decoder_width: usize, num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            stage_channels: channels.to_vec(),
            stage_depths: depths.to_vec(),
            stage_strides: vec![4, 2, 2, 2],
            patch_kernel: vec![7, 3, 3, 3],
            heads: heads.to_vec(),
            attn_reduction: vec![8, 4, 2, 1],
            mlp_ratio: 4,
            decoder_width,
            num_classes,
            embed_tap: EmbedTap::AfterPatchEmbed,
        }
    }

    /// Desk-scale student: channels 16/32/64/128, one block per stage.
    pub fn desk_student(num_classes: usize) -> Self {
        Self::four_stage([16, 32, 64, 128], [1, 1, 1, 1], [1, 2, 4, 8], 64, num_classes)
    }

    /// Desk-scale teacher: channels 32/64/128/256, two blocks per stage.
    pub fn desk_teacher(num_classes: usize) -> Self {
        Self::four_stage([32, 64, 128, 256], [2, 2, 2, 2], [1, 2, 4, 8], 128, num_classes)
    }

    /// SegFormer-B0-like channel layout (32/64/160/256).
    pub fn segformer_student(num_classes: usize) -> Self {
        Self::four_stage([32, 64, 160, 256], [2, 2, 2, 2], [1, 2, 5, 8], 256, num_classes)
    }

    /// SegFormer-B2-like channel layout (64/128/320/512).
    pub fn segformer_teacher(num_classes: usize) -> Self {
        Self::four_stage([64, 128, 320, 512], [3, 4, 6, 3], [1, 2, 5, 8], 768, num_classes)
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.stage_channels.len();
        if m == 0 {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        let lists = [
            ("stage_depths", self.stage_depths.len()),
            ("stage_strides", self.stage_strides.len()),
            ("patch_kernel", self.patch_kernel.len()),
            ("heads", self.heads.len()),
            ("attn_reduction", self.attn_reduction.len()),
        ];
        for (name, len) in lists {
            if len != m {
                return Err(Error::Config(format!(
                    "{name} has {len} entries, stage_channels has {m}"
                )));
            }
        }
        for i in 0..m {
            let (c, h) = (self.stage_channels[i], self.heads[i]);
            if c == 0 || h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: {c} channels are not divisible by {h} heads",
                    i + 1
                )));
            }
            if self.stage_strides[i] == 0 {
                return Err(Error::Config(format!("stage {}: stride must be >= 1", i + 1)));
            }
            if self.attn_reduction[i] == 0 {
                return Err(Error::Config(format!("stage {}: attention reduction must be >= 1", i + 1)));
            }
            if self.patch_kernel[i] == 0 || self.patch_kernel[i] % 2 == 0 {
                return Err(Error::Config(format!(
                    "stage {}: patch kernel must be odd, got {}",
                    i + 1,
                    self.patch_kernel[i]
                )));
            }
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 || self.decoder_width == 0 {
            return Err(Error::Config("in_channels, mlp_ratio and decoder_width must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    /// Spatial size of every stage for an `h x w` input.
    pub fn stage_resolutions(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let total = self.total_stride();
        if h % total != 0 || w % total != 0 {
            let near = |v: usize| ((v as f64 / total as f64).round().max(1.0) as usize) * total;
            return Err(Error::Dimension(format!(
                "input {h}x{w} is not divisible by the total stride {total}; nearest valid size is {}x{}",
                near(h),
                near(w)
            )));
        }
        let mut out = Vec::with_capacity(self.stages());
        let (mut ch, mut cw) = (h, w);
        for &s in &self.stage_strides {
            ch /= s;
            cw /= s;
            out.push((ch, cw));
        }
        Ok(out)
    }
}

#[derive(Debug)]
struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    fn new(b: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.ones("gamma", &[dim], false)?,
            beta: b.zeros("beta", &[dim], false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }
}

#[derive(Debug)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new(b: &mut ParamBuilder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.kaiming_uniform("weight", &[d_out, d_in], d_in)?,
            bias: b.zeros("bias", &[d_out], false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, Some(&self.bias))
    }
}

#[derive(Debug)]
struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(b: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Ok(Self {
            weight: b.kaiming_uniform("weight", &[c_out, c_in, kernel, kernel], c_in * kernel * kernel)?,
            bias: b.zeros("bias", &[c_out], false)?,
            stride,
            padding,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

/// Multi-head attention whose keys and values come from a strided-conv reduced map.
#[derive(Debug)]
struct EfficientAttention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    reduce: Option<(Conv, LayerNorm)>,
    heads: usize,
}

impl EfficientAttention {
    fn new(b: &mut ParamBuilder<'_>, dim: usize, heads: usize, reduction: usize) -> Result<Self> {
        let reduce = if reduction > 1 {
            Some((
                Conv::new(&mut b.pp("sr"), dim, dim, reduction, reduction, 0)?,
                LayerNorm::new(&mut b.pp("sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&mut b.pp("q"), dim, dim)?,
            kv: Linear::new(&mut b.pp("kv"), dim, 2 * dim)?,
            proj: Linear::new(&mut b.pp("proj"), dim, dim)?,
            reduce,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let dh = c / self.heads;
        let q = self
            .q
            .forward(x)?
            .reshape((b, n, self.heads, dh))?
            .transpose(1, 2)?
            .contiguous()?;
        let src = match &self.reduce {
            Some((conv, norm)) => {
                let map = ops::tokens_to_map(x, h, w)?;
                norm.forward(&ops::map_to_tokens(&conv.forward(&map)?)?)?
            }
            None => x.clone(),
        };
        let nk = src.dim(1)?;
        let kv = self.kv.forward(&src)?.reshape((b, nk, 2, self.heads, dh))?;
        let k = kv.narrow(2, 0, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let v = kv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let scale = 1.0 / (dh as f64).sqrt();
        let att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let att = ops::softmax(&att, 3)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

/// Linear, depthwise 3x3 convolution, GELU, linear.
#[derive(Debug)]
struct MixFfn {
    fc1: Linear,
    dw_weight: Tensor,
    dw_bias: Tensor,
    fc2: Linear,
}

impl MixFfn {
    fn new(b: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.pp("fc1"), dim, hidden)?,
            dw_weight: b.pp("dw").kaiming_uniform("weight", &[hidden, 3, 3], 9)?,
            dw_bias: b.pp("dw").zeros("bias", &[hidden], false)?,
            fc2: Linear::new(&mut b.pp("fc2"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.fc1.forward(x)?;
        let map = ops::tokens_to_map(&y, h, w)?;
        let map = ops::depthwise_conv3x3(&map, &self.dw_weight, Some(&self.dw_bias))?;
        let y = ops::map_to_tokens(&map)?.gelu_erf()?;
        self.fc2.forward(&y)
    }
}

#[derive(Debug)]
struct Block {
    norm1: LayerNorm,
    attn: EfficientAttention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        let y = self.ffn.forward(&self.norm2.forward(&x)?, h, w)?;
        Ok((x + y)?)
    }
}

#[derive(Debug)]
struct Stage {
    patch: Conv,
    patch_norm: LayerNorm,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
}

/// Per-stage embeddings and feature maps plus the class logits of one forward pass.
#[derive(Debug, Clone)]
pub struct StageTaps {
    pub embeddings: Vec<PatchEmbedding>,
    pub feature_maps: Vec<FeatureMap>,
    /// `(B, K, H/4, W/4)` for the default stride layout.
    pub logits: Tensor,
}

impl StageTaps {
    pub fn detach(&self) -> Self {
        Self {
            embeddings: self.embeddings.iter().map(|e| e.detach()).collect(),
            feature_maps: self.feature_maps.iter().map(|f| f.detach()).collect(),
            logits: self.logits.detach(),
        }
    }
}

/// Hierarchical encoder plus all-MLP decode head.
#[derive(Debug)]
pub struct SegModel {
    cfg: EncoderConfig,
    seed: u64,
    stages: Vec<Stage>,
    head_proj: Vec<Linear>,
    head_fuse: Linear,
    head_cls: Linear,
    store: ParamStore,
}

/// Builds a model with deterministic initialization under `seed`.
pub fn build_encoder(cfg: &EncoderConfig, seed: u64, dtype: DType, device: &Device) -> Result<SegModel> {
    SegModel::new(cfg, seed, dtype, device)
}

impl SegModel {
    pub fn new(cfg: &EncoderConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stages, head_proj, head_fuse, head_cls) = {
            let mut b = store.builder(&mut rng);
            let mut stages = Vec::with_capacity(cfg.stages());
            let mut c_prev = cfg.in_channels;
            for i in 0..cfg.stages() {
                let c = cfg.stage_channels[i];
                let mut sb = b.pp(format!("stages.{i}"));
                let k = cfg.patch_kernel[i];
                let patch = Conv::new(&mut sb.pp("patch"), c_prev, c, k, cfg.stage_strides[i], k / 2)?;
                let patch_norm = LayerNorm::new(&mut sb.pp("patch_norm"), c)?;
                let mut blocks = Vec::with_capacity(cfg.stage_depths[i]);
                for j in 0..cfg.stage_depths[i] {
                    let mut bb = sb.pp(format!("blocks.{j}"));
                    blocks.push(Block {
                        norm1: LayerNorm::new(&mut bb.pp("norm1"), c)?,
                        attn: EfficientAttention::new(&mut bb.pp("attn"), c, cfg.heads[i], cfg.attn_reduction[i])?,
                        norm2: LayerNorm::new(&mut bb.pp("norm2"), c)?,
                        ffn: MixFfn::new(&mut bb.pp("ffn"), c, c * cfg.mlp_ratio)?,
                    });
                }
                let out_norm = LayerNorm::new(&mut sb.pp("out_norm"), c)?;
                stages.push(Stage {
                    patch,
                    patch_norm,
                    blocks,
                    out_norm,
                });
                c_prev = c;
            }
            let e = cfg.decoder_width;
            let mut hb = b.pp("head");
            let head_proj = cfg
                .stage_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Linear::new(&mut hb.pp("proj").pp(i), c, e))
                .collect::<Result<Vec<_>>>()?;
            let head_fuse = Linear::new(&mut hb.pp("fuse"), e * cfg.stages(), e)?;
            let head_cls = Linear::new(&mut hb.pp("cls"), e, cfg.num_classes)?;
            (stages, head_proj, head_fuse, head_cls)
        };
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            stages,
            head_proj,
            head_fuse,
            head_cls,
            store,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Frozen models expose no trainable parameters and return detached taps.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.store.set_frozen(frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Runs every stage, tapping embeddings and feature maps, then the decode head.
    pub fn forward_with_taps(&self, images: &Tensor) -> Result<StageTaps> {
        let (_, c_in, h, w) = images.dims4()?;
        if c_in != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "model expects {} input channels, got {c_in}",
                self.cfg.in_channels
            )));
        }
        let resolutions = self.cfg.stage_resolutions(h, w)?;
        let images = images.to_dtype(self.store.dtype())?;
        let mut x_map = images;
        let mut embeddings = Vec::with_capacity(self.stages.len());
        let mut feature_maps = Vec::with_capacity(self.stages.len());
        for (i, (stage, &(sh, sw))) in self.stages.iter().zip(&resolutions).enumerate() {
            let patches = stage.patch.forward(&x_map)?;
            let mut tokens = stage.patch_norm.forward(&ops::map_to_tokens(&patches)?)?;
            if self.cfg.embed_tap == EmbedTap::AfterPatchEmbed {
                embeddings.push(PatchEmbedding::new(tokens.clone(), i + 1)?);
            }
            for block in &stage.blocks {
                tokens = block.forward(&tokens, sh, sw)?;
            }
            if self.cfg.embed_tap == EmbedTap::AfterBlocks {
                embeddings.push(PatchEmbedding::new(tokens.clone(), i + 1)?);
            }
            let tokens = stage.out_norm.forward(&tokens)?;
            x_map = ops::tokens_to_map(&tokens, sh, sw)?;
            feature_maps.push(FeatureMap::new(x_map.clone(), i + 1)?);
        }
        let logits = self.decode(&feature_maps, resolutions[0])?;
        let taps = StageTaps {
            embeddings,
            feature_maps,
            logits,
        };
        Ok(if self.is_frozen() { taps.detach() } else { taps })
    }

    /// Class logits only.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_taps(images)?.logits)
    }

    fn decode(&self, feature_maps: &[FeatureMap], (oh, ow): (usize, usize)) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(feature_maps.len());
        for (fm, proj) in feature_maps.iter().zip(&self.head_proj) {
            let (_, _, h, w) = fm.dims();
            let tokens = proj.forward(&ops::map_to_tokens(fm.tensor())?)?;
            let map = ops::tokens_to_map(&tokens, h, w)?;
            parts.push(ops::resize_bilinear(&map, oh, ow)?);
        }
        let fused = Tensor::cat(&parts, 1)?;
        let tokens = self.head_fuse.forward(&ops::map_to_tokens(&fused)?)?.relu()?;
        let logits = self.head_cls.forward(&tokens)?;
        ops::tokens_to_map(&logits, oh, ow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(num_classes: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            stage_channels: vec![4, 8],
            stage_depths: vec![1, 1],
            stage_strides: vec![4, 2],
            patch_kernel: vec![7, 3],
            heads: vec![1, 2],
            attn_reduction: vec![2, 1],
            mlp_ratio: 2,
            decoder_width: 8,
            num_classes,
            embed_tap: EmbedTap::AfterPatchEmbed,
        }
    }

    #[test]
    fn single_linear_layer_count() {
        let mut store = ParamStore::new(DType::F32, &Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Linear::new(&mut store.builder(&mut rng), 7, 3).unwrap();
        assert_eq!(store.count(), 7 * 3 + 3);
    }

    #[test]
    fn invalid_configs_name_the_violation() {
        let mut cfg = tiny(3);
        cfg.heads = vec![3, 2];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
        let mut cfg = tiny(3);
        cfg.stage_strides.push(2);
        assert!(cfg.validate().unwrap_err().to_string().contains("stage_strides"));
    }

    #[test]
    fn indivisible_input_suggests_nearest_size() {
        let cfg = tiny(3);
        let err = cfg.stage_resolutions(30, 16).unwrap_err().to_string();
        assert!(err.contains("32x16"), "{err}");
    }

    #[test]
    fn tap_after_blocks_changes_embedding() {
        let images = Tensor::randn(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let a = SegModel::new(&tiny(3), 5, DType::F32, &Device::Cpu).unwrap();
        let mut cfg = tiny(3);
        cfg.embed_tap = EmbedTap::AfterBlocks;
        let b = SegModel::new(&cfg, 5, DType::F32, &Device::Cpu).unwrap();
        let ta = a.forward_with_taps(&images).unwrap();
        let tb = b.forward_with_taps(&images).unwrap();
        assert_eq!(ta.embeddings[0].dims(), tb.embeddings[0].dims());
        let diff = (ta.embeddings[0].tensor() - tb.embeddings[0].tensor())
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff > 0.0);
        // the feature maps themselves do not depend on the tap point
        let same = (ta.logits - tb.logits).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(same, 0.0);
    }
}
