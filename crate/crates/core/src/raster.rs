//! Soft straight-line rasterizer.
//!
//! Every segment contributes `exp(-d²/σ²)`, where `d` is the distance from a pixel
//! centre to the segment. Contributions are composited with `max` and inverted, so a
//! canvas with no ink is all ones and a pixel centre lying on a stroke is zero.
//! Coordinates live in the unit square: `x` runs along columns, `y` along rows, and
//! the centre of pixel `(row, col)` is `((col + 0.5) / res, (row + 0.5) / res)`.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LINES: usize = 20;
pub const COORDS_PER_SEGMENT: usize = 4;

pub type Point = [f64; 2];

/// Closest-point projection of `p` onto the closed segment `[a, b]`.
///
/// Returns the clamped segment parameter `t` and the offset `p - q` to the closest
/// point `q = a + t (b - a)`. A zero-length segment projects onto `a` with `t = 0`.
#[inline]
fn project(p: Point, a: Point, b: Point) -> (f64, f64, f64) {
    let ex = b[0] - a[0];
    let ey = b[1] - a[1];
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (t, p[0] - (a[0] + t * ex), p[1] - (a[1] + t * ey))
}

#[inline]
fn dist2(p: Point, a: Point, b: Point) -> f64 {
    let (_, dx, dy) = project(p, a, b);
    dx * dx + dy * dy
}

/// Euclidean distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    dist2(p, a, b).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Segment {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn start(&self) -> Point {
        [self.x0, self.y0]
    }

    pub fn end(&self) -> Point {
        [self.x1, self.y1]
    }

    fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// The sender's message: straight segments in unit-square coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct LineSet {
    segments: Vec<Segment>,
}

impl LineSet {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if s.coords().iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidInput(format!(
                    "segment {i} has a coordinate outside [0, 1]: {s:?}"
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a line set from `[x0, y0, x1, y1, x0, y0, ...]`.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if !coords.len().is_multiple_of(COORDS_PER_SEGMENT) {
            return Err(Error::InvalidInput(format!(
                "expected a multiple of {COORDS_PER_SEGMENT} coordinates, got {}",
                coords.len()
            )));
        }
        Self::new(
            coords
                .chunks_exact(COORDS_PER_SEGMENT)
                .map(|c| Segment::new(c[0], c[1], c[2], c[3]))
                .collect(),
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| s.coords()).collect()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

impl TryFrom<Vec<Segment>> for LineSet {
    type Error = Error;

    fn try_from(segments: Vec<Segment>) -> Result<Self> {
        Self::new(segments)
    }
}

impl From<LineSet> for Vec<Segment> {
    fn from(lines: LineSet) -> Self {
        lines.segments
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    /// Pixels per canvas side.
    pub resolution: usize,
    /// Stroke falloff `σ²`, in squared unit-square coordinates.
    pub sigma2: f64,
}

impl RasterConfig {
    pub const MIN_RESOLUTION: usize = 8;

    pub fn new(resolution: usize, sigma2: f64) -> Result<Self> {
        let cfg = Self { resolution, sigma2 };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sharpness giving a stroke profile with a full width at half maximum of two
    /// pixels: `exp(-d²/σ²) = 1/2` at `d = 1/res`.
    pub fn for_resolution(resolution: usize) -> Result<Self> {
        let px = 1.0 / resolution as f64;
        Self::new(resolution, px * px / std::f64::consts::LN_2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < Self::MIN_RESOLUTION {
            return Err(Error::InvalidConfig(format!(
                "raster resolution must be at least {}, got {}",
                Self::MIN_RESOLUTION,
                self.resolution
            )));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "raster sharpness must be positive, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }

    #[inline]
    fn pixel_center(&self, row: usize, col: usize) -> Point {
        let res = self.resolution as f64;
        [(col as f64 + 0.5) / res, (row as f64 + 0.5) / res]
    }
}

/// Grayscale canvas, row-major, `1` is paper and `0` is full ink.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    resolution: usize,
    pixels: Vec<f64>,
}

impl RasterImage {
    pub fn from_pixels(resolution: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != resolution * resolution {
            return Err(Error::DimensionMismatch {
                expected: resolution * resolution,
                got: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { resolution, pixels })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.resolution + col]
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        crate::imageio::encode_gray_png(self.resolution, self.resolution, &self.to_gray8())
    }
}

fn render_into(coords: &[f64], cfg: &RasterConfig, out: &mut [f64]) {
    let res = cfg.resolution;
    for row in 0..res {
        for col in 0..res {
            let p = cfg.pixel_center(row, col);
            let best = coords
                .chunks_exact(COORDS_PER_SEGMENT)
                .map(|c| dist2(p, [c[0], c[1]], [c[2], c[3]]))
                .fold(f64::INFINITY, f64::min);
            out[row * res + col] = 1.0 - (-best / cfg.sigma2).exp();
        }
    }
}

/// Vector-Jacobian product of [`render_into`]: accumulates `grad_out · ∂pixels/∂coords`
/// into `grad_coords`. Only the nearest segment of each pixel receives gradient.
fn render_vjp(coords: &[f64], cfg: &RasterConfig, grad_out: &[f64], grad_coords: &mut [f64]) {
    let res = cfg.resolution;
    if coords.is_empty() {
        return;
    }
    for row in 0..res {
        for col in 0..res {
            let go = grad_out[row * res + col];
            if go == 0.0 {
                continue;
            }
            let p = cfg.pixel_center(row, col);
            let mut best = (f64::INFINITY, 0usize, 0.0, 0.0, 0.0);
            for (i, c) in coords.chunks_exact(COORDS_PER_SEGMENT).enumerate() {
                let (t, dx, dy) = project(p, [c[0], c[1]], [c[2], c[3]]);
                let d2 = dx * dx + dy * dy;
                if d2 < best.0 {
                    best = (d2, i, t, dx, dy);
                }
            }
            let (d2, i, t, dx, dy) = best;
            // pixel = 1 - exp(-d²/σ²); ∂d²/∂a = -2 (p - q)(1 - t), ∂d²/∂b = -2 (p - q) t
            let scale = go * (-d2 / cfg.sigma2).exp() / cfg.sigma2 * -2.0;
            let g = &mut grad_coords[i * COORDS_PER_SEGMENT..(i + 1) * COORDS_PER_SEGMENT];
            g[0] += scale * dx * (1.0 - t);
            g[1] += scale * dy * (1.0 - t);
            g[2] += scale * dx * t;
            g[3] += scale * dy * t;
        }
    }
}

pub fn rasterize(lines: &LineSet, cfg: &RasterConfig) -> Result<RasterImage> {
    cfg.validate()?;
    let mut pixels = vec![0.0; cfg.resolution * cfg.resolution];
    render_into(&lines.to_flat(), cfg, &mut pixels);
    Ok(RasterImage {
        resolution: cfg.resolution,
        pixels,
    })
}

/// Gradient of `Σ upstream ⊙ rasterize(lines)` with respect to the flat endpoint
/// coordinates of `lines`.
pub fn rasterize_vjp(lines: &LineSet, cfg: &RasterConfig, upstream: &[f64]) -> Result<Vec<f64>> {
    cfg.validate()?;
    if upstream.len() != cfg.resolution * cfg.resolution {
        return Err(Error::DimensionMismatch {
            expected: cfg.resolution * cfg.resolution,
            got: upstream.len(),
        });
    }
    let coords = lines.to_flat();
    let mut grad = vec![0.0; coords.len()];
    render_vjp(&coords, cfg, upstream, &mut grad);
    Ok(grad)
}

struct RasterizeOp {
    cfg: RasterConfig,
}

fn contiguous_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("rasterizer input must be contiguous".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        other => candle_core::bail!("rasterizer does not support {:?}", other.dtype()),
    })
}

impl CustomOp1 for RasterizeOp {
    fn name(&self) -> &'static str {
        "soft-line-rasterize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, width) = layout.shape().dims2()?;
        let coords = contiguous_f64(storage, layout)?;
        let res = self.cfg.resolution;
        let mut out = vec![0.0f64; batch * res * res];
        for (c, o) in coords.chunks_exact(width.max(1)).zip(out.chunks_exact_mut(res * res)) {
            render_into(c, &self.cfg, o);
        }
        if width == 0 {
            out.fill(1.0);
        }
        let shape = Shape::from((batch, 1, res, res));
        Ok(match storage.dtype() {
            DType::F64 => (CpuStorage::F64(out), shape),
            _ => (CpuStorage::F32(out.into_iter().map(|x| x as f32).collect()), shape),
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (batch, width) = arg.dims2()?;
        let res = self.cfg.resolution;
        let coords = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let upstream = grad_res.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut grad = vec![0.0f64; batch * width];
        if width > 0 {
            for ((c, g), u) in coords
                .chunks_exact(width)
                .zip(grad.chunks_exact_mut(width))
                .zip(upstream.chunks_exact(res * res))
            {
                render_vjp(c, &self.cfg, u, g);
            }
        }
        let grad = Tensor::from_vec(grad, (batch, width), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(grad))
    }
}

/// Differentiable batched rasterization.
///
/// `coords` is `[batch, 4 * n_lines]` with values in `[0, 1]`; the result is
/// `[batch, 1, res, res]` in the same dtype.
pub fn rasterize_tensor(coords: &Tensor, cfg: &RasterConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (_, width) = coords.dims2()?;
    if width % COORDS_PER_SEGMENT != 0 {
        return Err(Error::InvalidInput(format!(
            "coordinate width {width} is not a multiple of {COORDS_PER_SEGMENT}"
        )));
    }
    Ok(coords.contiguous()?.apply_op1(RasterizeOp { cfg: *cfg })?)
}

/// Splits a `[batch, 4n]` coordinate tensor into line sets.
pub fn line_sets_from_tensor(coords: &Tensor) -> Result<Vec<LineSet>> {
    let rows = coords.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    rows.iter().map(|r| LineSet::from_flat(r)).collect()
}

/// Splits a `[batch, 1, res, res]` sketch tensor into raster images.
pub fn raster_images_from_tensor(sketches: &Tensor) -> Result<Vec<RasterImage>> {
    let (batch, _, res, _) = sketches.dims4()?;
    let flat = sketches.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    flat.chunks_exact(res * res)
        .take(batch)
        .map(|p| RasterImage::from_pixels(res, p.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        assert_eq!(point_segment_distance([0.5, 0.5], [0.0, 0.5], [1.0, 0.5]), 0.0);
        assert_eq!(point_segment_distance([0.0, 0.0], [1.0, 0.0], [1.0, 1.0]), 1.0);
        assert_eq!(point_segment_distance([2.0, 0.0], [0.0, 0.0], [0.0, 0.0]), 2.0);
    }

    #[test]
    fn empty_canvas_is_white() {
        let cfg = RasterConfig::for_resolution(16).unwrap();
        let img = rasterize(&LineSet::empty(), &cfg).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn pixel_on_stroke_is_black() {
        let cfg = RasterConfig::for_resolution(16).unwrap();
        let y = 4.5 / 16.0;
        let lines = LineSet::new(vec![Segment::new(0.0, y, 1.0, y)]).unwrap();
        let img = rasterize(&lines, &cfg).unwrap();
        assert_eq!(img.get(4, 7), 0.0);
    }

    #[test]
    fn one_sigma_away_is_one_minus_inverse_e() {
        let res = 16;
        let y = 4.5 / res as f64;
        let d = 1.0 / res as f64;
        let cfg = RasterConfig::new(res, d * d).unwrap();
        let lines = LineSet::new(vec![Segment::new(0.0, y, 1.0, y)]).unwrap();
        let img = rasterize(&lines, &cfg).unwrap();
        let expected = 1.0 - (-1.0f64).exp();
        assert!((img.get(5, 8) - expected).abs() < 1e-12);
        assert!((expected - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn default_sharpness_gives_two_pixel_fwhm() {
        let cfg = RasterConfig::for_resolution(32).unwrap();
        let d = 1.0 / 32.0;
        assert!(((-d * d / cfg.sigma2).exp() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(RasterConfig::new(4, 0.1).is_err());
        assert!(RasterConfig::new(32, 0.0).is_err());
        assert!(RasterConfig::new(32, -1.0).is_err());
        let bad = RasterConfig { resolution: 32, sigma2: f64::NAN };
        assert!(rasterize(&LineSet::empty(), &bad).is_err());
    }

    #[test]
    fn rejects_out_of_range_coordinates() {
        assert!(LineSet::from_flat(&[0.0, 0.0, 1.2, 0.5]).is_err());
        assert!(LineSet::from_flat(&[0.0, 0.0, 1.0]).is_err());
        assert!(serde_json::from_str::<LineSet>(r#"[{"x0":0,"y0":0,"x1":2,"y1":0}]"#).is_err());
    }

    #[test]
    fn degenerate_segment_renders_as_dot() {
        let cfg = RasterConfig::for_resolution(16).unwrap();
        let c = 8.5 / 16.0;
        let lines = LineSet::new(vec![Segment::new(c, c, c, c)]).unwrap();
        let img = rasterize(&lines, &cfg).unwrap();
        assert_eq!(img.get(8, 8), 0.0);
        assert!(img.get(0, 0) > 0.999);
    }

    #[test]
    fn tensor_path_matches_scalar_path() {
        let cfg = RasterConfig::for_resolution(12).unwrap();
        let flat = [0.1, 0.2, 0.9, 0.7, 0.5, 0.1, 0.5, 0.95];
        let lines = LineSet::from_flat(&flat).unwrap();
        let reference = rasterize(&lines, &cfg).unwrap();
        let t = Tensor::from_vec(flat.to_vec(), (1, 8), &Device::Cpu).unwrap();
        let out = rasterize_tensor(&t, &cfg).unwrap();
        assert_eq!(out.dims(), &[1, 1, 12, 12]);
        let imgs = raster_images_from_tensor(&out).unwrap();
        assert_eq!(imgs[0], reference);
    }

    #[test]
    fn tensor_backward_matches_vjp() {
        let cfg = RasterConfig::for_resolution(10).unwrap();
        let flat = vec![0.15, 0.3, 0.8, 0.65, 0.4, 0.9, 0.55, 0.05];
        let var = Var::from_tensor(&Tensor::from_vec(flat.clone(), (1, 8), &Device::Cpu).unwrap()).unwrap();
        let out = rasterize_tensor(var.as_tensor(), &cfg).unwrap();
        let grads = out.sum_all().unwrap().backward().unwrap();
        let g = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let lines = LineSet::from_flat(&flat).unwrap();
        let expected = rasterize_vjp(&lines, &cfg, &vec![1.0; 100]).unwrap();
        assert_eq!(g, expected);
    }

    fn segment_strategy() -> impl Strategy<Value = Segment> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)
            .prop_map(|(a, b, c, d)| Segment::new(a, b, c, d))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn output_in_unit_interval(segs in prop::collection::vec(segment_strategy(), 0..24)) {
            let cfg = RasterConfig::for_resolution(16).unwrap();
            let img = rasterize(&LineSet::new(segs).unwrap(), &cfg).unwrap();
            prop_assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }

        #[test]
        fn permutation_invariant(segs in prop::collection::vec(segment_strategy(), 1..24), rot in 0usize..24) {
            let cfg = RasterConfig::for_resolution(16).unwrap();
            let mut shuffled = segs.clone();
            shuffled.reverse();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            let a = rasterize(&LineSet::new(segs).unwrap(), &cfg).unwrap();
            let b = rasterize(&LineSet::new(shuffled).unwrap(), &cfg).unwrap();
            prop_assert_eq!(a.pixels(), b.pixels());
        }

        #[test]
        fn more_ink_never_lightens(segs in prop::collection::vec(segment_strategy(), 0..20), extra in segment_strategy()) {
            let cfg = RasterConfig::for_resolution(16).unwrap();
            let before = rasterize(&LineSet::new(segs.clone()).unwrap(), &cfg).unwrap();
            let mut more = segs;
            more.push(extra);
            let after = rasterize(&LineSet::new(more).unwrap(), &cfg).unwrap();
            prop_assert!(before.pixels().iter().zip(after.pixels()).all(|(b, a)| a <= b));
        }
    }
}
