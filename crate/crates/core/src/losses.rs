//! Training objectives: the multi-class hinge game loss, the normalised
//! feature-space perceptual loss, and the augmented embedding-cosine loss.

use candle_core::{DType, Tensor, D};
use nalgebra::{SMatrix, SVector};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::encoders::{resize_bilinear, EncoderHandle, FeatureStack};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-10;
const FILL: f64 = 1.0;

/// Which auxiliary term, if any, is added to the game loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[default]
    #[serde(rename = "game")]
    Game,
    #[serde(rename = "game+percep")]
    GamePercep,
    #[serde(rename = "game+clip")]
    GameClip,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Game => "game",
            Self::GamePercep => "game+percep",
            Self::GameClip => "game+clip",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub percep: f64,
    pub clip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { percep: 1.0, clip: 1.0 }
    }
}

/// Per-layer weights `w_l` for the perceptual loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights(pub Vec<f64>);

impl LayerWeights {
    pub fn uniform(layers: usize) -> Self {
        Self(vec![1.0; layers])
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.0.len() != layers {
            return Err(Error::DimensionMismatch {
                expected: layers,
                got: self.0.len(),
            });
        }
        if self.0.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("layer weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `Σ_{j≠t} max(0, 1 − s_t + s_j)`.
pub fn game_hinge_loss(scores: &[f64], target: usize) -> Result<f64> {
    let st = *scores.get(target).ok_or(Error::IndexOutOfRange {
        index: target,
        len: scores.len(),
    })?;
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, &sj)| (1.0 - st + sj).max(0.0))
        .sum())
}

/// Batched hinge loss over `[batch, pool]` scores, averaged over the batch.
pub fn game_hinge_loss_tensor(scores: &Tensor, targets: &[usize]) -> Result<Tensor> {
    Ok(game_hinge_loss_per_item(scores, targets)?.mean_all()?)
}

/// Per-game hinge loss `[batch]`.
pub fn game_hinge_loss_per_item(scores: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (b, p) = scores.dims2()?;
    if targets.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: targets.len(),
        });
    }
    let mut onehot = vec![0f32; b * p];
    for (i, &t) in targets.iter().enumerate() {
        if t >= p {
            return Err(Error::IndexOutOfRange { index: t, len: p });
        }
        onehot[i * p + t] = 1.0;
    }
    let mask = Tensor::from_vec(onehot, (b, p), scores.device())?.to_dtype(scores.dtype())?;
    let st = (scores * &mask)?.sum_keepdim(1)?;
    let margins = (scores.broadcast_sub(&st)? + 1.0)?.relu()?;
    Ok((margins * (1.0 - mask)?)?.sum(1)?)
}

/// Unit-normalises features along `channel_dim` at every other position.
pub fn normalize_channels(features: &Tensor, channel_dim: usize) -> Result<Tensor> {
    let norm = features.sqr()?.sum_keepdim(channel_dim)?.sqrt()?;
    Ok(features.broadcast_div(&(norm + NORM_EPS)?)?)
}

/// Per-item perceptual distance `[batch]` between two feature stacks:
/// `Σ_l (w_l / n_l) ‖Ŝ_l − Î_l‖²`.
pub fn perceptual_loss_stacks(a: &FeatureStack, b: &FeatureStack, weights: &LayerWeights) -> Result<Tensor> {
    weights.validate(a.len())?;
    if b.len() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut total: Option<Tensor> = None;
    for ((la, lb), &w) in a.layers.iter().zip(&b.layers).zip(&weights.0) {
        if la.features.dims() != lb.features.dims() {
            return Err(Error::InvalidInput(format!(
                "feature shapes differ: {:?} vs {:?}",
                la.features.dims(),
                lb.features.dims()
            )));
        }
        let na = normalize_channels(&la.features, la.channel_dim)?;
        let nb = normalize_channels(&lb.features, lb.channel_dim)?;
        let per_item = (na - nb)?.sqr()?.flatten_from(1)?.sum(1)?;
        let term = (per_item * (w / la.dims_per_item() as f64))?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidInput("empty feature stack".into()))
}

/// Perceptual loss between sketches and photos, averaged over the batch.
pub fn perceptual_loss(
    sketch: &Tensor,
    photo: &Tensor,
    weights: &LayerWeights,
    handle: &EncoderHandle,
) -> Result<Tensor> {
    weights.validate(handle.layer_count())?;
    let a = handle.encode_layers(sketch)?;
    let b = handle.encode_layers(photo)?;
    Ok(perceptual_loss_stacks(&a, &b, weights)?.mean_all()?)
}

/// Random augmentation settings: a perspective warp followed by a resized crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSet {
    pub count: usize,
    pub perspective_scale: f64,
    pub crop_min: f64,
    #[serde(default = "one")]
    pub crop_max: f64,
    #[serde(default = "default_ratio")]
    pub ratio: (f64, f64),
}

fn one() -> f64 {
    1.0
}

fn default_ratio() -> (f64, f64) {
    (3.0 / 4.0, 4.0 / 3.0)
}

impl Default for AugmentationSet {
    fn default() -> Self {
        Self {
            count: 4,
            perspective_scale: 0.5,
            crop_min: 0.7,
            crop_max: 1.0,
            ratio: default_ratio(),
        }
    }
}

impl AugmentationSet {
    /// `count` transforms that leave images untouched.
    pub fn identity(count: usize) -> Self {
        Self {
            count,
            perspective_scale: 0.0,
            crop_min: 1.0,
            crop_max: 1.0,
            ratio: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.count >= 1
            && (0.0..=1.0).contains(&self.perspective_scale)
            && self.crop_min > 0.0
            && self.crop_min <= self.crop_max
            && self.crop_max <= 1.0
            && self.ratio.0 > 0.0
            && self.ratio.0 <= self.ratio.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid augmentation settings {self:?}")))
        }
    }
}

/// One sampled transform, in normalised canvas coordinates so that it applies to
/// any resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    /// Where the canvas corners (top-left, top-right, bottom-right, bottom-left)
    /// land after the perspective warp.
    pub corners: [[f64; 2]; 4],
    /// Crop window `[top, left, height, width]` on the warped canvas.
    pub crop: [f64; 4],
}

const UNIT_CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

pub fn sample_augmentations<R: Rng + ?Sized>(aug: &AugmentationSet, rng: &mut R) -> Result<Vec<Augmentation>> {
    aug.validate()?;
    Ok((0..aug.count).map(|_| Augmentation::sample(aug, rng)).collect())
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            corners: UNIT_CORNERS,
            crop: [0.0, 0.0, 1.0, 1.0],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn sample<R: Rng + ?Sized>(aug: &AugmentationSet, rng: &mut R) -> Self {
        let half = aug.perspective_scale / 2.0;
        let mut inset = || if half > 0.0 { rng.random_range(0.0..=half) } else { 0.0 };
        let corners = [
            [inset(), inset()],
            [1.0 - inset(), inset()],
            [1.0 - inset(), 1.0 - inset()],
            [inset(), 1.0 - inset()],
        ];

        let uniform = |rng: &mut R, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut crop = [0.0, 0.0, 1.0, 1.0];
        for _ in 0..10 {
            let area = uniform(rng, aug.crop_min, aug.crop_max);
            let ratio = uniform(rng, aug.ratio.0.ln(), aug.ratio.1.ln()).exp();
            let w = (area * ratio).sqrt();
            let h = (area / ratio).sqrt();
            if w <= 1.0 && h <= 1.0 {
                crop = [uniform(rng, 0.0, 1.0 - h), uniform(rng, 0.0, 1.0 - w), h, w];
                break;
            }
        }
        Self { corners, crop }
    }

    /// Homography taking warped-canvas points back to source points.
    fn inverse_homography(&self) -> [f64; 8] {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&[x, y], &[u, v])) in self.corners.iter().zip(UNIT_CORNERS.iter()).enumerate() {
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a.lu().solve(&b).unwrap_or_else(|| SVector::from([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
        let mut out = [0.0; 8];
        out.copy_from_slice(h.as_slice());
        out
    }

    /// Applies the transform to `[batch, C, H, W]`, producing `[batch, C, out, out]`.
    /// Samples falling outside the source are white.
    pub fn apply(&self, images: &Tensor, out: usize) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        if self.is_identity() {
            return if (h, w) == (out, out) {
                Ok(images.clone())
            } else {
                resize_bilinear(images, out, out)
            };
        }
        let hm = self.inverse_homography();
        let [top, left, ch, cw] = self.crop;
        let n = out * out;
        let mut idx = [vec![0u32; n], vec![0u32; n], vec![0u32; n], vec![0u32; n]];
        let mut wts = [vec![0f64; n], vec![0f64; n], vec![0f64; n], vec![0f64; n]];
        let mut fill = vec![0f64; n];
        for r in 0..out {
            for col in 0..out {
                let k = r * out + col;
                let x = left + (col as f64 + 0.5) / out as f64 * cw;
                let y = top + (r as f64 + 0.5) / out as f64 * ch;
                let den = hm[6] * x + hm[7] * y + 1.0;
                let sx = (hm[0] * x + hm[1] * y + hm[2]) / den * w as f64 - 0.5;
                let sy = (hm[3] * x + hm[4] * y + hm[5]) / den * h as f64 - 0.5;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let taps = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ];
                for (j, &(tx, ty, wt)) in taps.iter().enumerate() {
                    let inside = tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64;
                    if inside {
                        idx[j][k] = (ty as usize * w + tx as usize) as u32;
                        wts[j][k] = wt;
                    } else {
                        fill[k] += wt * FILL;
                    }
                }
            }
        }
        let dev = images.device();
        let dtype = images.dtype();
        let flat = images.reshape((b * c, h * w))?;
        let mut acc = Tensor::from_vec(fill, (1, n), dev)?.to_dtype(dtype)?.broadcast_as((b * c, n))?;
        for j in 0..4 {
            let ids = Tensor::from_slice(&idx[j], n, dev)?;
            let wt = Tensor::from_slice(&wts[j], (1, n), dev)?.to_dtype(dtype)?;
            acc = (acc + flat.index_select(&ids, 1)?.broadcast_mul(&wt)?)?;
        }
        Ok(acc.reshape((b, c, out, out))?)
    }
}

fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok((dot / ((na * nb)? + 1e-12)?)?)
}

/// `−Σ_t cos(f(t(S)), target)` per item, averaged over the batch, for an arbitrary
/// differentiable embedding function `f`. Targets are `[batch, dim]`.
pub fn clip_aug_loss_with<F>(encode: F, sketch: &Tensor, targets: &Tensor, transforms: &[Augmentation], out: usize) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if transforms.is_empty() {
        return Err(Error::InvalidInput("at least one transform is required".into()));
    }
    let mut total: Option<Tensor> = None;
    for t in transforms {
        let emb = encode(&t.apply(sketch, out)?)?;
        let cos = cosine_rows(&emb, targets)?;
        total = Some(match total {
            Some(acc) => (acc - cos)?,
            None => cos.neg()?,
        });
    }
    Ok(total.expect("non-empty").mean_all()?)
}

/// Augmented cosine loss between sketches and photos through the encoder's embedding.
pub fn clip_aug_loss(
    sketch: &Tensor,
    photo: &Tensor,
    transforms: &[Augmentation],
    handle: &EncoderHandle,
) -> Result<Tensor> {
    let targets = handle.encode_embedding(photo)?.detach();
    clip_aug_loss_with(
        |x| handle.encode_embedding(x),
        sketch,
        &targets,
        transforms,
        handle.input_resolution(),
    )
}

/// `game + λ·aux`, where at most one auxiliary term may be present.
pub fn total_loss(game: &Tensor, percep: Option<&Tensor>, clip: Option<&Tensor>, lw: &LossWeights) -> Result<Tensor> {
    match (percep, clip) {
        (Some(_), Some(_)) => Err(Error::ConflictingLosses),
        (Some(p), None) => Ok((game + (p * lw.percep)?)?),
        (None, Some(c)) => Ok((game + (c * lw.clip)?)?),
        (None, None) => Ok(game.clone()),
    }
}

/// Scalar value of a zero-dimensional tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
