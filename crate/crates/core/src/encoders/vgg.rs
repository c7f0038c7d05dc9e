//! VGG-style convolutional feature extractor with torchvision parameter names
//! (`features.{i}.weight`).

use candle_core::Tensor;
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VggConfig {
    pub input_size: usize,
    /// `(channels, convolutions)` per stage; a 2×2 max-pool separates stages.
    pub stages: Vec<(usize, usize)>,
}

impl VggConfig {
    pub fn vgg16() -> Self {
        Self {
            input_size: 96,
            stages: vec![(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)],
        }
    }

    /// Spatial side of the last stage's feature map.
    pub fn final_side(&self) -> usize {
        self.input_size >> self.stages.len().saturating_sub(1)
    }

    pub fn embedding_dim(&self) -> usize {
        let side = self.final_side();
        self.stages.last().map(|s| s.0).unwrap_or(0) * side * side
    }

    /// Torchvision indices of the ReLU that closes each stage (relu1_2, relu2_2,
    /// relu3_3, relu4_3, relu5_3 for VGG16).
    pub fn tap_indices(&self) -> Vec<usize> {
        let mut idx = 0;
        let mut taps = Vec::new();
        for (stage, &(_, convs)) in self.stages.iter().enumerate() {
            if stage > 0 {
                idx += 1;
            }
            idx += 2 * convs;
            taps.push(idx - 1);
        }
        taps
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|&(c, n)| c == 0 || n == 0) {
            return Err(Error::InvalidConfig("VGG stages must be non-empty".into()));
        }
        if !self.input_size.is_multiple_of(1 << (self.stages.len() - 1)) {
            return Err(Error::InvalidConfig("VGG input size must survive every pooling step".into()));
        }
        Ok(())
    }
}

struct Conv {
    weight: Tensor,
    bias: Tensor,
}

pub(crate) struct Vgg {
    stages: Vec<Vec<Conv>>,
}

impl Vgg {
    pub(crate) fn load(vb: VarBuilder, cfg: VggConfig) -> Result<Self> {
        cfg.validate()?;
        let vb = vb.pp("features");
        let mut idx = 0;
        let mut in_c = 3;
        let mut stages = Vec::new();
        for (stage, &(out_c, convs)) in cfg.stages.iter().enumerate() {
            if stage > 0 {
                idx += 1;
            }
            let mut layers = Vec::new();
            for _ in 0..convs {
                let hint = Init::Kaiming {
                    dist: candle_nn::init::NormalOrUniform::Normal,
                    fan: candle_nn::init::FanInOut::FanIn,
                    non_linearity: candle_nn::init::NonLinearity::ReLU,
                };
                let l = vb.pp(idx);
                layers.push(Conv {
                    weight: l.get_with_hints((out_c, in_c, 3, 3), "weight", hint)?,
                    bias: l.get_with_hints(out_c, "bias", Init::Const(0.0))?,
                });
                in_c = out_c;
                idx += 2;
            }
            stages.push(layers);
        }
        Ok(Self { stages })
    }

    /// Returns the activation closing each stage, `[batch, channels, h, w]`.
    pub(crate) fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = h.max_pool2d(2)?;
            }
            for conv in stage {
                h = h
                    .conv2d(&conv.weight, 1, 1, 1, 1)?
                    .broadcast_add(&conv.bias.reshape((1, (), 1, 1))?)?
                    .relu()?;
            }
            taps.push(h.clone());
        }
        Ok(taps)
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        self.stages
            .iter()
            .flatten()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect()
    }
}
