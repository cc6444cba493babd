//! Stage-tagged tensor wrappers exchanged between models, fusion and losses.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Rank-4 `(batch, channels, height, width)` map from one transformer stage.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Tensor,
    stage: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stage: usize) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "stage {stage}: feature map must be a non-empty (B, C, H, W) tensor, got {dims:?}"
            )));
        }
        Ok(Self { data, stage })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// 1-based stage index.
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[2], d[3])
    }

    /// Same values with gradient tracking cut.
    pub fn detach(&self) -> Self {
        Self {
            data: self.data.detach(),
            stage: self.stage,
        }
    }
}

/// Rank-3 `(batch, tokens, channels)` sequence tapped after a stage's patch embedding.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    data: Tensor,
    stage: usize,
}

impl PatchEmbedding {
    pub fn new(data: Tensor, stage: usize) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "stage {stage}: patch embedding must be a non-empty (B, N, C) tensor, got {dims:?}"
            )));
        }
        Ok(Self { data, stage })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2])
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn detach(&self) -> Self {
        Self {
            data: self.data.detach(),
            stage: self.stage,
        }
    }
}

/// Integer label maps `(B, H, W)`, row-major. 255 marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub data: Vec<u8>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

pub const IGNORE_INDEX: u8 = 255;

impl LabelBatch {
    pub fn new(data: Vec<u8>, batch: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::Dimension(format!(
                "label buffer holds {} values, expected {batch}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            batch,
            height,
            width,
        })
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    /// Nearest-neighbour resize with half-pixel centres; never invents label IDs.
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelBatch {
        let mut data = Vec::with_capacity(self.batch * height * width);
        for b in 0..self.batch {
            for y in 0..height {
                let sy = nearest_source(y, height, self.height);
                for x in 0..width {
                    let sx = nearest_source(x, width, self.width);
                    data.push(self.get(b, sy, sx));
                }
            }
        }
        LabelBatch {
            data,
            batch: self.batch,
            height,
            width,
        }
    }
}

/// Source index for nearest-neighbour sampling of `dst` in an `out`-long axis from an `input`-long axis.
pub fn nearest_source(dst: usize, out: usize, input: usize) -> usize {
    (((dst as f64 + 0.5) * input as f64 / out as f64).floor() as usize).min(input - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn wrappers_reject_wrong_rank() {
        let t = Tensor::zeros((2, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(FeatureMap::new(t.clone(), 1).is_err());
        assert!(PatchEmbedding::new(t, 1).is_err());
    }

    #[test]
    fn nearest_resize_keeps_ids() {
        let labels = LabelBatch::new(vec![0, 1, 2, 255], 1, 2, 2).unwrap();
        let up = labels.resize_nearest(4, 4);
        assert_eq!(
            up.data,
            vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 255, 255, 2, 2, 255, 255]
        );
        let down = up.resize_nearest(2, 2);
        assert_eq!(down, labels);
    }
}
