//! Sender and receiver networks.
//!
//! The sender maps frozen encoder features of a photo to a 64-d latent, decodes it
//! with a two-hidden-layer MLP to `4 * n_lines` values, squashes them into the unit
//! square with a logistic function and rasterizes the result. The receiver maps
//! encoder features of either a sketch or a photo through the same small MLP, and
//! guesses by scoring the sketch embedding against every photo in the pool.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderHandle, EncoderKind, Embedding};
use crate::error::{Error, Result};
use crate::raster::{self, LineSet, RasterConfig, COORDS_PER_SEGMENT, DEFAULT_LINES};

pub const LATENT_DIM: usize = 64;
pub const RECEIVER_DIM: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    #[default]
    Dot,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Width of the encoder features fed to both agents.
    pub feature_dim: usize,
    pub n_lines: usize,
    pub latent_dim: usize,
    pub sender_hidden: [usize; 2],
    pub receiver_hidden: usize,
    pub receiver_out: usize,
    #[serde(default)]
    pub scoring: Scoring,
}

impl AgentConfig {
    /// Decoder widths follow the encoder: 64/256 for VGG16, 1024/1024 for the ViT.
    pub fn for_encoder(kind: EncoderKind, feature_dim: usize) -> Self {
        let sender_hidden = match kind {
            EncoderKind::Vgg16 => [64, 256],
            EncoderKind::VitB32 => [1024, 1024],
        };
        Self {
            feature_dim,
            n_lines: DEFAULT_LINES,
            latent_dim: LATENT_DIM,
            sender_hidden,
            receiver_hidden: RECEIVER_DIM,
            receiver_out: RECEIVER_DIM,
            scoring: Scoring::Dot,
        }
    }

    pub fn coord_dim(&self) -> usize {
        COORDS_PER_SEGMENT * self.n_lines
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.feature_dim,
            self.n_lines,
            self.latent_dim,
            self.sender_hidden[0],
            self.sender_hidden[1],
            self.receiver_hidden,
            self.receiver_out,
        ];
        if widths.contains(&0) {
            return Err(Error::InvalidConfig("agent layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected layer, `y = x Wᵀ + b`, with PyTorch's default fan-in uniform init.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng, dev: &Device) -> Result<Self> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Tensor::from_vec(draw(out_dim * in_dim), (out_dim, in_dim), dev)?;
        let bias = Tensor::from_vec(draw(out_dim), out_dim, dev)?;
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Var::from_tensor(&bias)?,
        })
    }

    fn from_tensors(weight: Tensor, bias: Tensor, in_dim: usize, out_dim: usize) -> Result<Self> {
        if weight.dims() != [out_dim, in_dim] || bias.dims() != [out_dim] {
            return Err(Error::Checkpoint(format!(
                "layer shape {:?}/{:?} does not match {out_dim}x{in_dim}",
                weight.dims(),
                bias.dims()
            )));
        }
        Ok(Self {
            weight: Var::from_tensor(&weight.to_dtype(DType::F32)?)?,
            bias: Var::from_tensor(&bias.to_dtype(DType::F32)?)?,
        })
    }

    fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            weight: Var::from_tensor(&self.weight.as_tensor().to_dtype(dtype)?)?,
            bias: Var::from_tensor(&self.bias.as_tensor().to_dtype(dtype)?)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Clone, Debug)]
pub struct SenderParams {
    pub projection: Dense,
    pub hidden1: Dense,
    pub hidden2: Dense,
    pub output: Dense,
}

impl SenderParams {
    /// Raw endpoint coordinates `[batch, 4 * n_lines]` in `[0, 1]`.
    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        let z = self.projection.forward(features)?;
        let h = self.hidden1.forward(&z)?.relu()?;
        let h = self.hidden2.forward(&h)?.relu()?;
        Ok(candle_nn::ops::sigmoid(&self.output.forward(&h)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct ReceiverParams {
    pub projection: Dense,
    pub hidden: Dense,
    pub output: Dense,
}

impl ReceiverParams {
    /// Maps `[n, feature_dim]` encoder features to `[n, receiver_out]`.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let z = self.projection.forward(features)?;
        let h = self.hidden.forward(&z)?.relu()?;
        self.output.forward(&h)
    }
}

/// Both agents plus their shared shape description.
#[derive(Clone, Debug)]
pub struct Agents {
    pub config: AgentConfig,
    pub sender: SenderParams,
    pub receiver: ReceiverParams,
}

impl Agents {
    pub fn init(config: AgentConfig, seed: u64, dev: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let sender = SenderParams {
            projection: Dense::init(c.feature_dim, c.latent_dim, &mut rng, dev)?,
            hidden1: Dense::init(c.latent_dim, c.sender_hidden[0], &mut rng, dev)?,
            hidden2: Dense::init(c.sender_hidden[0], c.sender_hidden[1], &mut rng, dev)?,
            output: Dense::init(c.sender_hidden[1], c.coord_dim(), &mut rng, dev)?,
        };
        let receiver = ReceiverParams {
            projection: Dense::init(c.feature_dim, c.latent_dim, &mut rng, dev)?,
            hidden: Dense::init(c.latent_dim, c.receiver_hidden, &mut rng, dev)?,
            output: Dense::init(c.receiver_hidden, c.receiver_out, &mut rng, dev)?,
        };
        Ok(Self {
            config,
            sender,
            receiver,
        })
    }

    fn layers(&self) -> [(&'static str, &Dense); 7] {
        [
            ("sender.projection", &self.sender.projection),
            ("sender.hidden1", &self.sender.hidden1),
            ("sender.hidden2", &self.sender.hidden2),
            ("sender.output", &self.sender.output),
            ("receiver.projection", &self.receiver.projection),
            ("receiver.hidden", &self.receiver.hidden),
            ("receiver.output", &self.receiver.output),
        ]
    }

    /// Every trainable variable with a stable name, in a fixed order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, d)| {
                [
                    (format!("{name}.weight"), d.weight.clone()),
                    (format!("{name}.bias"), d.bias.clone()),
                ]
            })
            .collect()
    }

    /// Detached copies of every parameter, keyed by name.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_vars()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn from_tensors(config: AgentConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let get = |name: &str, in_dim: usize, out_dim: usize| -> Result<Dense> {
            let w = tensors.get(&format!("{name}.weight"));
            let b = tensors.get(&format!("{name}.bias"));
            match (w, b) {
                (Some(w), Some(b)) => Dense::from_tensors(w.clone(), b.clone(), in_dim, out_dim),
                _ => Err(Error::Checkpoint(format!("missing parameters for {name}"))),
            }
        };
        let c = &config;
        let sender = SenderParams {
            projection: get("sender.projection", c.feature_dim, c.latent_dim)?,
            hidden1: get("sender.hidden1", c.latent_dim, c.sender_hidden[0])?,
            hidden2: get("sender.hidden2", c.sender_hidden[0], c.sender_hidden[1])?,
            output: get("sender.output", c.sender_hidden[1], c.coord_dim())?,
        };
        let receiver = ReceiverParams {
            projection: get("receiver.projection", c.feature_dim, c.latent_dim)?,
            hidden: get("receiver.hidden", c.latent_dim, c.receiver_hidden)?,
            output: get("receiver.output", c.receiver_hidden, c.receiver_out)?,
        };
        Ok(Self {
            config,
            sender,
            receiver,
        })
    }

    /// Independent copy with every parameter cast to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let s = &self.sender;
        let r = &self.receiver;
        Ok(Self {
            config: self.config.clone(),
            sender: SenderParams {
                projection: s.projection.to_dtype(dtype)?,
                hidden1: s.hidden1.to_dtype(dtype)?,
                hidden2: s.hidden2.to_dtype(dtype)?,
                output: s.output.to_dtype(dtype)?,
            },
            receiver: ReceiverParams {
                projection: r.projection.to_dtype(dtype)?,
                hidden: r.hidden.to_dtype(dtype)?,
                output: r.output.to_dtype(dtype)?,
            },
        })
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        let got = features.dim(D::Minus1)?;
        if got != self.config.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.feature_dim,
                got,
            });
        }
        Ok(())
    }

    /// Sender coordinates from precomputed photo features `[batch, feature_dim]`.
    pub fn sender_coords(&self, features: &Tensor) -> Result<Tensor> {
        self.check_features(features)?;
        self.sender.decode(features)
    }

    /// Receiver embeddings from precomputed features `[batch, feature_dim]`.
    pub fn receiver_head(&self, features: &Tensor) -> Result<Tensor> {
        self.check_features(features)?;
        self.receiver.head(features)
    }

    /// Scores of sketch embeddings `[batch, d]` against pools `[batch, pool, d]`.
    pub fn score(&self, sketch: &Tensor, pool: &Tensor) -> Result<Tensor> {
        score_tensor(sketch, pool, self.config.scoring)
    }
}

/// Photo → (line sets, sketch tensor `[batch, 1, res, res]`).
pub fn sender_forward(
    photos: &Tensor,
    agents: &Agents,
    handle: &EncoderHandle,
    cfg: &RasterConfig,
) -> Result<(Vec<LineSet>, Tensor)> {
    let features = handle.encode_embedding(photos)?;
    let coords = agents.sender_coords(&features)?;
    let sketch = raster::rasterize_tensor(&coords, cfg)?;
    Ok((raster::line_sets_from_tensor(&coords)?, sketch))
}

/// Sketches or photos `[batch, C, H, W]` → receiver embeddings `[batch, 64]`.
pub fn receiver_embed(images: &Tensor, agents: &Agents, handle: &EncoderHandle) -> Result<Tensor> {
    let features = handle.encode_embedding(images)?;
    agents.receiver_head(&features)
}

/// Batched scoring: `[batch, d] × [batch, pool, d] → [batch, pool]`.
pub fn score_tensor(sketch: &Tensor, pool: &Tensor, scoring: Scoring) -> Result<Tensor> {
    let (b, d) = sketch.dims2()?;
    let (pb, _, pd) = pool.dims3()?;
    if pd != d {
        return Err(Error::DimensionMismatch { expected: d, got: pd });
    }
    if pb != b {
        return Err(Error::DimensionMismatch { expected: b, got: pb });
    }
    let (s, p) = match scoring {
        Scoring::Dot => (sketch.clone(), pool.clone()),
        Scoring::Cosine => (unit_rows(sketch)?, unit_rows(pool)?),
    };
    Ok(p.matmul(&s.unsqueeze(2)?)?.squeeze(2)?)
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// Inner product of the sketch embedding with every pool embedding.
pub fn score_pool(sketch: &Embedding, pool: &[Embedding]) -> Result<Vec<f64>> {
    pool.iter()
        .map(|p| {
            if p.dim() != sketch.dim() {
                return Err(Error::DimensionMismatch {
                    expected: sketch.dim(),
                    got: p.dim(),
                });
            }
            Ok(sketch.0.iter().zip(&p.0).map(|(a, b)| *a as f64 * *b as f64).sum())
        })
        .collect()
}

/// Index of the highest score; the first one wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderSpec;

    fn tiny_config() -> AgentConfig {
        AgentConfig {
            sender_hidden: [32, 32],
            ..AgentConfig::for_encoder(EncoderKind::VitB32, 24)
        }
    }

    #[test]
    fn decoder_widths_follow_encoder() {
        let vgg = AgentConfig::for_encoder(EncoderKind::Vgg16, 18432);
        assert_eq!(vgg.sender_hidden, [64, 256]);
        assert_eq!(vgg.coord_dim(), 80);
        let vit = AgentConfig::for_encoder(EncoderKind::VitB32, 512);
        assert_eq!(vit.sender_hidden, [1024, 1024]);
        assert_eq!(vit.receiver_out, 64);
    }

    #[test]
    fn sender_output_is_a_valid_line_set() {
        let handle = EncoderHandle::random(EncoderSpec::tiny_vit(32), 1).unwrap();
        let agents = Agents::init(tiny_config(), 3, &Device::Cpu).unwrap();
        let photo = Tensor::rand(0f32, 1f32, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let cfg = RasterConfig::for_resolution(32).unwrap();
        let (lines, sketch) = sender_forward(&photo, &agents, &handle, &cfg).unwrap();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l.len() == 20));
        assert_eq!(sketch.dims(), &[2, 1, 32, 32]);
        let (again, _) = sender_forward(&photo, &agents, &handle, &cfg).unwrap();
        assert_eq!(lines, again);
    }

    #[test]
    fn receiver_embeds_to_64() {
        let handle = EncoderHandle::random(EncoderSpec::tiny_vit(32), 1).unwrap();
        let agents = Agents::init(tiny_config(), 3, &Device::Cpu).unwrap();
        let white = Tensor::ones((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let photo = Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let a = receiver_embed(&white, &agents, &handle).unwrap().to_vec2::<f32>().unwrap();
        let b = receiver_embed(&photo, &agents, &handle).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a[0].len(), 64);
        assert!(a[0].iter().all(|v| v.is_finite()));
        assert_ne!(a, b);
    }

    #[test]
    fn score_pool_examples() {
        let e1 = Embedding(vec![1.0, 0.0]);
        let e2 = Embedding(vec![0.0, 1.0]);
        assert_eq!(score_pool(&e1, &[e1.clone(), e2.clone()]).unwrap(), vec![1.0, 0.0]);
        let zero = Embedding(vec![0.0, 0.0]);
        assert_eq!(score_pool(&zero, &[e1.clone(), e2]).unwrap(), vec![0.0, 0.0]);
        let bad = score_pool(&e1, &[Embedding(vec![1.0])]).unwrap_err();
        assert!(matches!(bad, Error::DimensionMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn tensor_scores_match_scalar_scores() {
        let dev = Device::Cpu;
        let sketch = Tensor::randn(0f32, 1f32, (2, 5), &dev).unwrap();
        let pool = Tensor::randn(0f32, 1f32, (2, 3, 5), &dev).unwrap();
        let got = score_tensor(&sketch, &pool, Scoring::Dot).unwrap().to_vec2::<f32>().unwrap();
        let s = sketch.to_vec2::<f32>().unwrap();
        let p = pool.to_vec3::<f32>().unwrap();
        for b in 0..2 {
            let expected = score_pool(
                &Embedding(s[b].clone()),
                &p[b].iter().cloned().map(Embedding).collect::<Vec<_>>(),
            )
            .unwrap();
            for (g, e) in got[b].iter().zip(expected) {
                assert!((*g as f64 - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn parameters_round_trip_through_tensors() {
        let agents = Agents::init(tiny_config(), 9, &Device::Cpu).unwrap();
        let restored = Agents::from_tensors(agents.config.clone(), &agents.tensors().unwrap()).unwrap();
        let features = Tensor::randn(0f32, 1f32, (3, 24), &Device::Cpu).unwrap();
        let a = agents.sender_coords(&features).unwrap().to_vec2::<f32>().unwrap();
        let b = restored.sender_coords(&features).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        let wrong = Tensor::randn(0f32, 1f32, (3, 7), &Device::Cpu).unwrap();
        assert!(matches!(agents.sender_coords(&wrong), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn argmax_prefers_first_of_ties() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
