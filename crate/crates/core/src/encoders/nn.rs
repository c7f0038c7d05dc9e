//! Frozen building blocks shared by the vision and text towers.
//!
//! Weights are plain tensors rather than `Var`s, so autograd never produces
//! gradients for them; gradients still flow through to the inputs.

use candle_core::{DType, Device, Shape, Tensor, D};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub(crate) struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub(crate) fn load(vb: VarBuilder, in_dim: usize, out_dim: usize, bias: bool, std: f64) -> Result<Self> {
        let weight = vb.get_with_hints((out_dim, in_dim), "weight", Init::Randn { mean: 0.0, stdev: std })?;
        let bias = if bias {
            Some(vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }
}

pub(crate) struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub(crate) fn load(vb: VarBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
}

pub(crate) fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    Ok((x * candle_nn::ops::sigmoid(&(x * 1.702)?)?)?)
}

/// Deterministic random weights: every tensor is drawn from its own stream, keyed by
/// the global seed and the tensor name, so construction order does not matter.
pub(crate) struct SeededInit {
    pub(crate) seed: u64,
}

impl SeededInit {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        let digest = Sha256::new().chain_update(self.seed.to_le_bytes()).chain_update(name).finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

impl SimpleBackend for SeededInit {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let n = s.elem_count();
        let mut rng = self.rng(name);
        let values: Vec<f32> = match h {
            Init::Const(c) => vec![c as f32; n],
            Init::Randn { mean, stdev } => {
                let dist = Normal::new(mean, stdev).map_err(candle_core::Error::wrap)?;
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
            Init::Uniform { lo, up } => {
                let dist = Uniform::new(lo, up).map_err(candle_core::Error::wrap)?;
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
            Init::Kaiming { .. } => {
                let fan_in: usize = s.dims().iter().skip(1).product::<usize>().max(1);
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(candle_core::Error::wrap)?;
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
        };
        Tensor::from_vec(values, s, dev)?.to_dtype(dtype)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("seeded init needs a shape for {name}")
    }

    fn contains_tensor(&self, _name: &str) -> bool {
        true
    }
}

pub(crate) fn seeded_var_builder(seed: u64, dev: &Device) -> VarBuilder<'static> {
    VarBuilder::from_backend(Box::new(SeededInit { seed }), DType::F32, dev.clone())
}
