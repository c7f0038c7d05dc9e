//! Frozen pretrained image encoders and the CLIP text tower.
//!
//! An [`EncoderHandle`] is cheap to clone and shares its weights; the sender and the
//! receiver are given clones of the same handle. Image tensors are `[batch, C, H, W]`
//! with `C` either 1 (sketches) or 3 (photos) and values in `[0, 1]`.

mod nn;
pub mod tokenizer;
mod vgg;
mod vit;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use tokenizer::ClipTokenizer;
pub use vgg::VggConfig;
pub use vit::{TextConfig, VitConfig};

const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Vgg16,
    VitB32,
}

/// Architecture of an encoder. The named constructors give the pretrained shapes;
/// the `tiny_*` variants keep the same structure at toy sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum EncoderSpec {
    Vit {
        vision: VitConfig,
        text: Option<TextConfig>,
    },
    Vgg(VggConfig),
}

impl EncoderSpec {
    pub fn vit_b32() -> Self {
        Self::Vit {
            vision: VitConfig::vit_b32(),
            text: Some(TextConfig::clip_b32()),
        }
    }

    pub fn vgg16() -> Self {
        Self::Vgg(VggConfig::vgg16())
    }

    pub fn tiny_vit(image_size: usize) -> Self {
        Self::Vit {
            vision: VitConfig {
                image_size,
                patch_size: 8,
                width: 32,
                layers: 2,
                heads: 2,
                embed_dim: 24,
            },
            text: Some(TextConfig {
                vocab_size: tokenizer::VOCAB_SIZE,
                context_length: tokenizer::CONTEXT_LENGTH,
                width: 16,
                layers: 1,
                heads: 2,
                embed_dim: 24,
            }),
        }
    }

    pub fn tiny_vgg(input_size: usize) -> Self {
        Self::Vgg(VggConfig {
            input_size,
            stages: vec![(8, 1), (16, 1), (16, 1)],
        })
    }

    pub fn default_for(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::Vgg16 => Self::vgg16(),
            EncoderKind::VitB32 => Self::vit_b32(),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Self::Vit { .. } => EncoderKind::VitB32,
            Self::Vgg(_) => EncoderKind::Vgg16,
        }
    }

    pub fn input_resolution(&self) -> usize {
        match self {
            Self::Vit { vision, .. } => vision.image_size,
            Self::Vgg(cfg) => cfg.input_size,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            Self::Vit { vision, .. } => vision.embed_dim,
            Self::Vgg(cfg) => cfg.embedding_dim(),
        }
    }

    /// Number of feature taps `|L|`.
    pub fn layer_count(&self) -> usize {
        match self {
            Self::Vit { vision, .. } => vision.layers,
            Self::Vgg(cfg) => cfg.stages.len(),
        }
    }
}

/// Where an encoder's weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum WeightSource {
    /// A `.safetensors` or `.pth` file using Hugging Face CLIP or torchvision names.
    Pretrained { path: PathBuf },
    /// Seeded random weights, for tests and offline development.
    Random { seed: u64 },
}

enum VisionModel {
    Vit(vit::VisionTransformer),
    Vgg(vgg::Vgg),
}

struct Inner {
    spec: EncoderSpec,
    source: WeightSource,
    vision: VisionModel,
    text: Option<(vit::TextTransformer, ClipTokenizer)>,
    mean: Tensor,
    std: Tensor,
    device: Device,
    fingerprint: String,
}

#[derive(Clone)]
pub struct EncoderHandle(Arc<Inner>);

impl std::fmt::Debug for EncoderHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderHandle")
            .field("spec", &self.0.spec)
            .field("source", &self.0.source)
            .field("fingerprint", &self.0.fingerprint)
            .finish()
    }
}

fn weights_var_builder(path: &Path, dev: &Device) -> Result<VarBuilder<'static>> {
    if !path.exists() {
        return Err(Error::MissingAsset(format!("encoder weights not found at {}", path.display())));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("pth") | Some("pt") => Ok(VarBuilder::from_pth(path, DType::F32, dev)?),
        _ => {
            let bytes = std::fs::read(path)?;
            Ok(VarBuilder::from_buffered_safetensors(bytes, DType::F32, dev)?)
        }
    }
}

impl EncoderHandle {
    pub fn new(spec: EncoderSpec, source: WeightSource) -> Result<Self> {
        let device = Device::Cpu;
        let vb = match &source {
            WeightSource::Pretrained { path } => weights_var_builder(path, &device)?,
            WeightSource::Random { seed } => nn::seeded_var_builder(*seed, &device),
        };
        let (vision, text, mean, std) = match &spec {
            EncoderSpec::Vit { vision, text } => {
                let model = vit::VisionTransformer::load(vb.clone(), *vision)?;
                let text = match text {
                    Some(cfg) => Some((vit::TextTransformer::load(vb.clone(), *cfg)?, ClipTokenizer::new()?)),
                    None => None,
                };
                (VisionModel::Vit(model), text, CLIP_MEAN, CLIP_STD)
            }
            EncoderSpec::Vgg(cfg) => (
                VisionModel::Vgg(vgg::Vgg::load(vb, cfg.clone())?),
                None,
                IMAGENET_MEAN,
                IMAGENET_STD,
            ),
        };
        let mean = Tensor::from_vec(mean.to_vec(), (1, 3, 1, 1), &device)?;
        let std = Tensor::from_vec(std.to_vec(), (1, 3, 1, 1), &device)?;
        let mut inner = Inner {
            spec,
            source,
            vision,
            text,
            mean,
            std,
            device,
            fingerprint: String::new(),
        };
        inner.fingerprint = compute_fingerprint(&inner)?;
        Ok(Self(Arc::new(inner)))
    }

    pub fn random(spec: EncoderSpec, seed: u64) -> Result<Self> {
        Self::new(spec, WeightSource::Random { seed })
    }

    pub fn pretrained(spec: EncoderSpec, path: impl Into<PathBuf>) -> Result<Self> {
        Self::new(spec, WeightSource::Pretrained { path: path.into() })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.0.spec
    }

    pub fn source(&self) -> &WeightSource {
        &self.0.source
    }

    pub fn kind(&self) -> EncoderKind {
        self.0.spec.kind()
    }

    pub fn input_resolution(&self) -> usize {
        self.0.spec.input_resolution()
    }

    pub fn embedding_dim(&self) -> usize {
        self.0.spec.embedding_dim()
    }

    pub fn layer_count(&self) -> usize {
        self.0.spec.layer_count()
    }

    pub fn device(&self) -> &Device {
        &self.0.device
    }

    pub fn has_text_tower(&self) -> bool {
        self.0.text.is_some()
    }

    /// SHA-256 over every weight tensor, in a fixed order.
    pub fn fingerprint(&self) -> &str {
        &self.0.fingerprint
    }

    /// Recomputes the fingerprint from the live weights.
    pub fn recompute_fingerprint(&self) -> Result<String> {
        compute_fingerprint(&self.0)
    }

    /// True when both handles share one set of weights.
    pub fn same_as(&self, other: &EncoderHandle) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn preprocess(&self, images: &Tensor) -> Result<Tensor> {
        preprocess(images, self)
    }

    pub fn encode_embedding(&self, images: &Tensor) -> Result<Tensor> {
        encode_embedding(images, self)
    }

    pub fn encode_layers(&self, images: &Tensor) -> Result<FeatureStack> {
        encode_layers(images, self)
    }

    pub fn encode_text<S: AsRef<str>>(&self, prompts: &[S]) -> Result<Tensor> {
        encode_text(prompts, self)
    }
}

fn compute_fingerprint(inner: &Inner) -> Result<String> {
    let mut tensors = match &inner.vision {
        VisionModel::Vit(m) => m.tensors(),
        VisionModel::Vgg(m) => m.tensors(),
    };
    if let Some((t, _)) = &inner.text {
        tensors.extend(t.tensors());
    }
    let mut hasher = Sha256::new();
    for t in tensors {
        hasher.update(format!("{:?}", t.dims()).as_bytes());
        for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// One tap of a [`FeatureStack`].
#[derive(Clone, Debug)]
pub struct FeatureLayer {
    /// `[batch, tokens, width]` for transformer taps or `[batch, C, H, W]` for
    /// convolutional taps.
    pub features: Tensor,
    /// Axis holding channels; normalisation happens along this axis.
    pub channel_dim: usize,
}

impl FeatureLayer {
    /// Feature dimensionality `n_l` of one batch item.
    pub fn dims_per_item(&self) -> usize {
        self.features.dims().iter().skip(1).product()
    }
}

#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub layers: Vec<FeatureLayer>,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Embedding vector of a single item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Splits a `[n, dim]` tensor into one embedding per row.
    pub fn rows(t: &Tensor) -> Result<Vec<Embedding>> {
        Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?.into_iter().map(Embedding).collect())
    }
}

/// Bilinear interpolation matrix (`[out, in]`) with half-pixel centres and edge clamping.
fn resize_matrix(out: usize, input: usize, dev: &Device) -> Result<Tensor> {
    let mut m = vec![0f32; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = (src - i0 as f64) as f32;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    Ok(Tensor::from_vec(m, (out, input), dev)?)
}

/// Differentiable bilinear resize of `[batch, C, H, W]` to `[batch, C, out_h, out_w]`.
pub fn resize_bilinear(images: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = images.dims4()?;
    let mut x = images.clone();
    if h != out_h {
        let rh = resize_matrix(out_h, h, images.device())?.to_dtype(images.dtype())?;
        x = rh.broadcast_matmul(&x)?;
    }
    if w != out_w {
        let rw = resize_matrix(out_w, w, images.device())?.to_dtype(images.dtype())?;
        x = x.broadcast_matmul(&rw.t()?)?;
    }
    Ok(x)
}

/// Replicates grayscale to RGB, resizes to the encoder resolution and applies the
/// encoder's per-channel normalisation.
pub fn preprocess(images: &Tensor, handle: &EncoderHandle) -> Result<Tensor> {
    let (b, c, _, _) = images.dims4()?;
    let total = images.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !total.is_finite() {
        return Err(Error::InvalidInput("image contains non-finite values".into()));
    }
    let rgb = match c {
        3 => images.clone(),
        1 => images.repeat((1, 3, 1, 1))?,
        other => {
            return Err(Error::InvalidInput(format!("expected 1 or 3 channels, got {other}")));
        }
    };
    let r = handle.input_resolution();
    let resized = resize_bilinear(&rgb.to_dtype(DType::F32)?, r, r)?;
    debug_assert_eq!(resized.dims()[0], b);
    Ok(resized.broadcast_sub(&handle.0.mean)?.broadcast_div(&handle.0.std)?)
}

/// Final embedding: the CLIP image embedding for ViT, flattened last-stage features
/// for VGG.
pub fn encode_embedding(images: &Tensor, handle: &EncoderHandle) -> Result<Tensor> {
    let x = preprocess(images, handle)?;
    match &handle.0.vision {
        VisionModel::Vit(m) => Ok(m.forward(&x, false)?.embedding),
        VisionModel::Vgg(m) => {
            let taps = m.forward(&x)?;
            let last = taps.last().expect("validated non-empty");
            Ok(last.flatten_from(1)?)
        }
    }
}

pub fn encode_layers(images: &Tensor, handle: &EncoderHandle) -> Result<FeatureStack> {
    let x = preprocess(images, handle)?;
    let layers = match &handle.0.vision {
        VisionModel::Vit(m) => m
            .forward(&x, true)?
            .taps
            .into_iter()
            .map(|features| FeatureLayer { features, channel_dim: 2 })
            .collect(),
        VisionModel::Vgg(m) => m
            .forward(&x)?
            .into_iter()
            .map(|features| FeatureLayer { features, channel_dim: 1 })
            .collect(),
    };
    Ok(FeatureStack { layers })
}

/// CLIP text embeddings, one row per prompt.
pub fn encode_text<S: AsRef<str>>(prompts: &[S], handle: &EncoderHandle) -> Result<Tensor> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("prompt list is empty".into()));
    }
    let Some((model, tok)) = &handle.0.text else {
        return Err(Error::InvalidInput("encoder has no text tower".into()));
    };
    let ctx = model.config().context_length;
    let seqs: Vec<Vec<u32>> = prompts
        .iter()
        .map(|p| {
            let p = p.as_ref();
            if p.trim().is_empty() {
                Err(Error::InvalidInput("empty prompt".into()))
            } else {
                Ok(tok.encode_with_markers(p, ctx))
            }
        })
        .collect::<Result<_>>()?;
    model.forward(&seqs, &handle.0.device)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vit() -> EncoderHandle {
        EncoderHandle::random(EncoderSpec::tiny_vit(32), 7).unwrap()
    }

    fn image(seed: u64, c: usize, side: usize) -> Tensor {
        let n = c * side * side;
        let v: Vec<f32> = (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f32) / 1000.0).collect();
        Tensor::from_vec(v, (1, c, side, side), &Device::Cpu).unwrap()
    }

    #[test]
    fn preprocess_shape_and_white_constant() {
        let h = tiny_vit();
        let white = Tensor::ones((1, 1, 12, 12), DType::F32, &Device::Cpu).unwrap();
        let x = preprocess(&white, &h).unwrap();
        assert_eq!(x.dims(), &[1, 3, 32, 32]);
        let v = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (ch, chunk) in v.chunks(32 * 32).enumerate() {
            let expected = (1.0 - CLIP_MEAN[ch]) / CLIP_STD[ch];
            assert!(chunk.iter().all(|&p| (p - expected).abs() < 1e-6));
        }
    }

    #[test]
    fn preprocess_rejects_non_finite() {
        let h = tiny_vit();
        let bad = Tensor::from_vec(vec![f32::NAN; 64], (1, 1, 8, 8), &Device::Cpu).unwrap();
        assert!(matches!(preprocess(&bad, &h), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn resize_identity_is_exact() {
        let img = image(3, 3, 16);
        let out = resize_bilinear(&img, 16, 16).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            img.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn resize_matrix_rows_sum_to_one() {
        let m = resize_matrix(224, 96, &Device::Cpu).unwrap().to_vec2::<f32>().unwrap();
        for row in m {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn embedding_and_layers_are_deterministic() {
        let h = tiny_vit();
        let img = image(1, 3, 32);
        let a = encode_embedding(&img, &h).unwrap().to_vec2::<f32>().unwrap();
        let b = encode_embedding(&img, &h).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 24);
        let other = encode_embedding(&image(2, 3, 32), &h).unwrap().to_vec2::<f32>().unwrap();
        assert_ne!(a, other);
        let stack = encode_layers(&img, &h).unwrap();
        assert_eq!(stack.len(), 2);
        assert_eq!(stack.layers[0].dims_per_item(), 17 * 32);
    }

    #[test]
    fn text_embeddings() {
        let h = tiny_vit();
        let e = encode_text(&["a photo of a cat.", "a photo of a dog.", "a photo of a cat."], &h)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0], e[2]);
        assert_ne!(e[0], e[1]);
        assert!(encode_text::<&str>(&[], &h).is_err());
        assert!(encode_text(&["  "], &h).is_err());
    }

    #[test]
    fn vgg_has_no_text_tower() {
        let h = EncoderHandle::random(EncoderSpec::tiny_vgg(16), 0).unwrap();
        assert!(!h.has_text_tower());
        assert!(encode_text(&["a photo of a cat."], &h).is_err());
        let stack = encode_layers(&image(0, 3, 16), &h).unwrap();
        assert_eq!(stack.len(), 3);
        assert_eq!(stack.layers[2].features.dims(), &[1, 16, 4, 4]);
        assert_eq!(encode_embedding(&image(0, 3, 16), &h).unwrap().dims(), &[1, 256]);
    }

    #[test]
    fn random_weights_depend_only_on_seed() {
        let a = EncoderHandle::random(EncoderSpec::tiny_vgg(16), 5).unwrap();
        let b = EncoderHandle::random(EncoderSpec::tiny_vgg(16), 5).unwrap();
        let c = EncoderHandle::random(EncoderSpec::tiny_vgg(16), 6).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert!(!a.same_as(&b));
        assert!(a.same_as(&a.clone()));
    }

    #[test]
    fn missing_weights_are_reported() {
        let err = EncoderHandle::pretrained(EncoderSpec::vgg16(), "/nonexistent/vgg16.pth").unwrap_err();
        assert!(matches!(err, Error::MissingAsset(_)));
    }
}
