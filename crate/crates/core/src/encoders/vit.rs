//! CLIP vision and text transformers, laid out like the Hugging Face
//! `CLIPModel` checkpoint (`vision_model.*`, `text_model.*`, `*_projection`).

use candle_core::{Device, IndexOp, Tensor, D};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use super::nn::{quick_gelu, LayerNorm, Linear};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl VitConfig {
    pub fn vit_b32() -> Self {
        Self {
            image_size: 224,
            patch_size: 32,
            width: 768,
            layers: 12,
            heads: 12,
            embed_dim: 512,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig("image size must be a multiple of the patch size".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig("width must be a multiple of the head count".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl TextConfig {
    pub fn clip_b32() -> Self {
        Self {
            vocab_size: super::tokenizer::VOCAB_SIZE,
            context_length: super::tokenizer::CONTEXT_LENGTH,
            width: 512,
            layers: 12,
            heads: 8,
            embed_dim: 512,
        }
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn load(vb: VarBuilder, width: usize, heads: usize) -> Result<Self> {
        let std = (width as f64).powf(-0.5);
        Ok(Self {
            q: Linear::load(vb.pp("q_proj"), width, width, true, std)?,
            k: Linear::load(vb.pp("k_proj"), width, width, true, std)?,
            v: Linear::load(vb.pp("v_proj"), width, width, true, std)?,
            out: Linear::load(vb.pp("out_proj"), width, width, true, std)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, w) = x.dims3()?;
        let hd = w / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split((self.q.forward(x)? * (hd as f64).powf(-0.5))?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = q.matmul(&k.t()?)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, w))?;
        self.out.forward(&y)
    }

    fn tensors(&self) -> Vec<&Tensor> {
        [&self.q, &self.k, &self.v, &self.out].into_iter().flat_map(|l| l.tensors()).collect()
    }
}

struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn load(vb: VarBuilder, width: usize, heads: usize) -> Result<Self> {
        let std = (width as f64).powf(-0.5);
        Ok(Self {
            ln1: LayerNorm::load(vb.pp("layer_norm1"), width)?,
            attn: Attention::load(vb.pp("self_attn"), width, heads)?,
            ln2: LayerNorm::load(vb.pp("layer_norm2"), width)?,
            fc1: Linear::load(vb.pp("mlp").pp("fc1"), width, 4 * width, true, std)?,
            fc2: Linear::load(vb.pp("mlp").pp("fc2"), 4 * width, width, true, std)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        let h = self.fc2.forward(&quick_gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?)?;
        Ok((x + h)?)
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.ln1.tensors();
        out.extend(self.attn.tensors());
        out.extend(self.ln2.tensors());
        out.extend(self.fc1.tensors());
        out.extend(self.fc2.tensors());
        out
    }
}

fn load_blocks(vb: VarBuilder, layers: usize, width: usize, heads: usize) -> Result<Vec<Block>> {
    (0..layers)
        .map(|i| Block::load(vb.pp("encoder").pp("layers").pp(i), width, heads))
        .collect()
}

pub(crate) struct VisionTransformer {
    cfg: VitConfig,
    patch_weight: Tensor,
    class_embedding: Tensor,
    position_embedding: Tensor,
    pre_ln: LayerNorm,
    blocks: Vec<Block>,
    post_ln: LayerNorm,
    projection: Tensor,
}

/// Output of one vision forward pass.
pub(crate) struct VisionOutput {
    pub embedding: Tensor,
    /// Residual stream after each transformer block, `[batch, tokens, width]`.
    pub taps: Vec<Tensor>,
}

impl VisionTransformer {
    pub(crate) fn load(vb: VarBuilder, cfg: VitConfig) -> Result<Self> {
        cfg.validate()?;
        let vm = vb.pp("vision_model");
        let emb = vm.pp("embeddings");
        let std = (cfg.width as f64).powf(-0.5);
        let p = cfg.patch_size;
        let patch_weight = emb
            .pp("patch_embedding")
            .get_with_hints((cfg.width, 3, p, p), "weight", Init::Randn { mean: 0.0, stdev: std })?
            .reshape((cfg.width, 3 * p * p))?;
        Ok(Self {
            cfg,
            patch_weight,
            class_embedding: emb.get_with_hints(cfg.width, "class_embedding", Init::Randn { mean: 0.0, stdev: std })?,
            position_embedding: emb
                .pp("position_embedding")
                .get_with_hints((cfg.tokens(), cfg.width), "weight", Init::Randn { mean: 0.0, stdev: 0.02 })?,
            pre_ln: LayerNorm::load(vm.pp("pre_layrnorm"), cfg.width)?,
            blocks: load_blocks(vm.clone(), cfg.layers, cfg.width, cfg.heads)?,
            post_ln: LayerNorm::load(vm.pp("post_layernorm"), cfg.width)?,
            projection: vb.pp("visual_projection").get_with_hints(
                (cfg.embed_dim, cfg.width),
                "weight",
                Init::Randn { mean: 0.0, stdev: std },
            )?,
        })
    }

    /// `x` is a normalized `[batch, 3, image_size, image_size]` tensor.
    pub(crate) fn forward(&self, x: &Tensor, keep_taps: bool) -> Result<VisionOutput> {
        let (b, _, _, _) = x.dims4()?;
        let g = self.cfg.grid();
        let p = self.cfg.patch_size;
        let w = self.cfg.width;
        let patches = x
            .reshape((b, 3, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, g * g, 3 * p * p))?;
        let tokens = patches.broadcast_matmul(&self.patch_weight.t()?)?;
        let cls = self.class_embedding.reshape((1, 1, w))?.broadcast_as((b, 1, w))?;
        let mut h = Tensor::cat(&[&cls.to_dtype(tokens.dtype())?, &tokens], 1)?
            .broadcast_add(&self.position_embedding)?;
        h = self.pre_ln.forward(&h)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(&h, None)?;
            if keep_taps {
                taps.push(h.clone());
            }
        }
        let pooled = self.post_ln.forward(&h.i((.., 0, ..))?)?;
        let embedding = pooled.matmul(&self.projection.t()?)?;
        Ok(VisionOutput { embedding, taps })
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_weight, &self.class_embedding, &self.position_embedding];
        out.extend(self.pre_ln.tensors());
        out.extend(self.blocks.iter().flat_map(|b| b.tensors()));
        out.extend(self.post_ln.tensors());
        out.push(&self.projection);
        out
    }
}

pub(crate) struct TextTransformer {
    cfg: TextConfig,
    token_embedding: Tensor,
    position_embedding: Tensor,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    projection: Tensor,
}

impl TextTransformer {
    pub(crate) fn load(vb: VarBuilder, cfg: TextConfig) -> Result<Self> {
        if cfg.heads == 0 || !cfg.width.is_multiple_of(cfg.heads) {
            return Err(Error::InvalidConfig("text width must be a multiple of the head count".into()));
        }
        let tm = vb.pp("text_model");
        let emb = tm.pp("embeddings");
        Ok(Self {
            cfg,
            token_embedding: emb
                .pp("token_embedding")
                .get_with_hints((cfg.vocab_size, cfg.width), "weight", Init::Randn { mean: 0.0, stdev: 0.02 })?,
            position_embedding: emb.pp("position_embedding").get_with_hints(
                (cfg.context_length, cfg.width),
                "weight",
                Init::Randn { mean: 0.0, stdev: 0.01 },
            )?,
            blocks: load_blocks(tm.clone(), cfg.layers, cfg.width, cfg.heads)?,
            final_ln: LayerNorm::load(tm.pp("final_layer_norm"), cfg.width)?,
            projection: vb.pp("text_projection").get_with_hints(
                (cfg.embed_dim, cfg.width),
                "weight",
                Init::Randn { mean: 0.0, stdev: (cfg.width as f64).powf(-0.5) },
            )?,
        })
    }

    pub(crate) fn config(&self) -> &TextConfig {
        &self.cfg
    }

    /// Embeds tokenized prompts. Every sequence must start with the start marker and
    /// end with the end marker; the end-marker position is pooled.
    pub(crate) fn forward(&self, sequences: &[Vec<u32>], device: &Device) -> Result<Tensor> {
        let len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 || len > self.cfg.context_length {
            return Err(Error::InvalidInput(format!("token sequence length {len} is out of range")));
        }
        let n = sequences.len();
        let mut ids = vec![0u32; n * len];
        for (row, seq) in ids.chunks_exact_mut(len).zip(sequences) {
            row[..seq.len()].copy_from_slice(seq);
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
                return Err(Error::InvalidInput(format!("token id {bad} outside the vocabulary")));
            }
        }
        let ids = Tensor::from_vec(ids, n * len, device)?;
        let tokens = self.token_embedding.index_select(&ids, 0)?.reshape((n, len, self.cfg.width))?;
        let mut h = tokens.broadcast_add(&self.position_embedding.narrow(0, 0, len)?)?;

        let mask: Vec<f32> = (0..len)
            .flat_map(|i| (0..len).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (len, len), device)?.to_dtype(h.dtype())?;
        for block in &self.blocks {
            h = block.forward(&h, Some(&mask))?;
        }
        h = self.final_ln.forward(&h)?;
        let pooled: Vec<Tensor> = sequences
            .iter()
            .enumerate()
            .map(|(i, seq)| h.i((i, seq.len() - 1, ..)))
            .collect::<candle_core::Result<_>>()?;
        let pooled = Tensor::stack(&pooled, 0)?;
        Ok(pooled.matmul(&self.projection.t()?)?)
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        out.extend(self.blocks.iter().flat_map(|b| b.tensors()));
        out.extend(self.final_ln.tensors());
        out.push(&self.projection);
        out
    }
}
