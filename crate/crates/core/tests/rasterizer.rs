use std::time::Instant;

use candle_core::{Device, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sketchcomm::raster::{self, LineSet, RasterConfig, Segment, DEFAULT_LINES};

const RES: usize = 32;
const STEP: f64 = 1e-4;

fn random_lines(rng: &mut ChaCha8Rng, n: usize) -> LineSet {
    let mut c = || rng.random_range(0.02..0.98);
    LineSet::new((0..n).map(|_| Segment::new(c(), c(), c(), c())).collect()).unwrap()
}

fn pixel_sum(lines: &LineSet, cfg: &RasterConfig) -> f64 {
    raster::rasterize(lines, cfg).unwrap().pixels().iter().sum()
}

/// Index of the nearest segment at every pixel centre, i.e. the segment that wins
/// the max composition there.
fn owners(lines: &LineSet, res: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(res * res);
    for row in 0..res {
        for col in 0..res {
            let p = [(col as f64 + 0.5) / res as f64, (row as f64 + 0.5) / res as f64];
            let mut best = (f64::INFINITY, 0);
            for (i, s) in lines.segments().iter().enumerate() {
                let d = raster::point_segment_distance(p, s.start(), s.end());
                if d < best.0 {
                    best = (d, i);
                }
            }
            out.push(best.1);
        }
    }
    out
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)` between two gradient vectors.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Analytic and central-difference gradients of the pixel sum, skipping coordinates
/// whose difference stencil crosses the max tie set. Returns (analytic, numeric, skipped).
fn gradient_pair(lines: &LineSet, cfg: &RasterConfig) -> (Vec<f64>, Vec<f64>, usize) {
    let res = cfg.resolution;
    let analytic = raster::rasterize_vjp(lines, cfg, &vec![1.0; res * res]).unwrap();
    let base = owners(lines, res);
    let flat = lines.to_flat();
    let (mut a, mut n, mut skipped) = (Vec::new(), Vec::new(), 0);
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[i] += STEP;
        minus[i] -= STEP;
        let lp = LineSet::from_flat(&plus).unwrap();
        let lm = LineSet::from_flat(&minus).unwrap();
        if owners(&lp, res) != base || owners(&lm, res) != base {
            skipped += 1;
            continue;
        }
        a.push(analytic[i]);
        n.push((pixel_sum(&lp, cfg) - pixel_sum(&lm, cfg)) / (2.0 * STEP));
    }
    (a, n, skipped)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let start = Instant::now();
    let cfg = RasterConfig::for_resolution(RES).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut skipped, mut checked) = (0.0f64, 0, 0);
    for case in 0..24 {
        let lines = random_lines(&mut rng, DEFAULT_LINES);
        let (analytic, numeric, s) = gradient_pair(&lines, &cfg);
        let err = rel_err(&analytic, &numeric);
        assert!(err <= 1e-3, "case {case}: relative error {err}");
        worst = worst.max(err);
        skipped += s;
        checked += analytic.len();
    }
    let elapsed = start.elapsed();
    eprintln!(
        "rasterizer gradient suite: {checked} coordinates checked, {skipped} straddling a tie skipped, \
         worst relative error {worst:.2e} in {elapsed:?}"
    );
    assert!(checked >= 20 * 60);
    assert!(elapsed.as_secs_f64() < 60.0);
}

#[test]
fn autodiff_path_matches_vjp() {
    let cfg = RasterConfig::for_resolution(RES).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sets: Vec<LineSet> = (0..3).map(|_| random_lines(&mut rng, DEFAULT_LINES)).collect();
    let flat: Vec<f32> = sets.iter().flat_map(|l| l.to_flat()).map(|v| v as f32).collect();
    let coords = Var::from_tensor(&Tensor::from_vec(flat, (3, DEFAULT_LINES * 4), &Device::Cpu).unwrap()).unwrap();
    let weights: Vec<f64> = (0..3 * RES * RES).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::from_vec(weights.iter().map(|&v| v as f32).collect::<Vec<_>>(), (3, 1, RES, RES), &Device::Cpu).unwrap();
    let img = raster::rasterize_tensor(coords.as_tensor(), &cfg).unwrap();
    let loss = (img * w).unwrap().sum_all().unwrap();
    let grads = loss.backward().unwrap();
    let g = grads.get(coords.as_tensor()).unwrap().to_vec2::<f32>().unwrap();
    for (i, lines) in sets.iter().enumerate() {
        let reference = raster::rasterize_vjp(lines, &cfg, &weights[i * RES * RES..(i + 1) * RES * RES]).unwrap();
        let got: Vec<f64> = g[i].iter().map(|&v| v as f64).collect();
        assert!(rel_err(&got, &reference) < 1e-4);
    }
}

#[test]
fn permutation_invariance_is_bit_exact() {
    let cfg = RasterConfig::for_resolution(RES).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let lines = random_lines(&mut rng, DEFAULT_LINES);
        let mut segs = lines.segments().to_vec();
        for i in (1..segs.len()).rev() {
            segs.swap(i, rng.random_range(0..=i));
        }
        let a = raster::rasterize(&lines, &cfg).unwrap();
        let b = raster::rasterize(&LineSet::new(segs).unwrap(), &cfg).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
