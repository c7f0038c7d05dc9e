//! STL-10 ingestion, a decoded blob+index cache, class-balanced toy subsets, game
//! enumeration, and a synthetic shapes dataset for offline runs.
//!
//! On disk every STL-10 image is 27 648 bytes: three 96×96 planes (R, G, B), each
//! stored column-major. In memory images are row-major interleaved RGB (HWC).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::index::sample;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SIDE: usize = 96;
pub const RECORD_BYTES: usize = 3 * SIDE * SIDE;
pub const CLASSES: [&str; 10] = [
    "airplane", "bird", "car", "cat", "deer", "dog", "horse", "monkey", "ship", "truck",
];
pub const DATA_ENV: &str = "SKETCHCOMM_DATA";
pub const CHECKSUM_FILE: &str = "checksums.json";
const CACHE_FORMAT: &str = "sketchcomm-decoded/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }

    pub fn expected_count(self) -> usize {
        match self {
            Self::Train => 5000,
            Self::Test => 8000,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: u32,
    /// Zero-based index into [`CLASSES`].
    pub label: u8,
    /// `side × side × 3` row-major RGB.
    pub pixels: Vec<u8>,
}

impl LabeledImage {
    pub fn class_name(&self) -> &'static str {
        CLASSES[self.label as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub side: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_histogram(&self) -> [usize; 10] {
        let mut h = [0; 10];
        for img in &self.images {
            h[img.label as usize] += 1;
        }
        h
    }

    /// `[n, 3, side, side]` tensor in `[0, 1]` for the given positions.
    pub fn tensor(&self, positions: &[usize], dev: &Device) -> Result<Tensor> {
        let s = self.side;
        let mut data = Vec::with_capacity(positions.len() * 3 * s * s);
        for &p in positions {
            let img = self.images.get(p).ok_or(Error::IndexOutOfRange {
                index: p,
                len: self.images.len(),
            })?;
            for c in 0..3 {
                data.extend(img.pixels.iter().skip(c).step_by(3).map(|&v| v as f32 / 255.0));
            }
        }
        Ok(Tensor::from_vec(data, (positions.len(), 3, s, s), dev)?)
    }

    /// Class-balanced subset with `per_class` images per class, drawn with `seed`.
    /// Returned images keep their original ids and appear in id order.
    pub fn balanced_subset(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, img) in self.images.iter().enumerate() {
            by_class.entry(img.label).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::new();
        for (_, members) in by_class {
            if members.len() < per_class {
                return Err(Error::DatasetTooSmall {
                    needed: per_class,
                    available: members.len(),
                });
            }
            chosen.extend(sample(&mut rng, members.len(), per_class).into_iter().map(|k| members[k]));
        }
        chosen.sort_unstable();
        Ok(Dataset {
            split: format!("{}-toy{}", self.split, per_class * 10),
            side: self.side,
            images: chosen.into_iter().map(|i| self.images[i].clone()).collect(),
        })
    }
}

/// STL-10 class-balanced toy split of `size` images (a multiple of 10).
pub fn toy_split(dataset: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 || !size.is_multiple_of(CLASSES.len()) {
        return Err(Error::InvalidInput(format!("toy split size {size} is not a positive multiple of 10")));
    }
    dataset.balanced_subset(size / CLASSES.len(), seed)
}

/// Column-major planar record → row-major interleaved RGB.
pub fn decode_record(record: &[u8]) -> Result<Vec<u8>> {
    if record.len() != RECORD_BYTES {
        return Err(Error::DimensionMismatch {
            expected: RECORD_BYTES,
            got: record.len(),
        });
    }
    let plane = SIDE * SIDE;
    let mut out = vec![0u8; RECORD_BYTES];
    for c in 0..3 {
        for x in 0..SIDE {
            for y in 0..SIDE {
                out[(y * SIDE + x) * 3 + c] = record[c * plane + x * SIDE + y];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`decode_record`].
pub fn encode_record(pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != RECORD_BYTES {
        return Err(Error::DimensionMismatch {
            expected: RECORD_BYTES,
            got: pixels.len(),
        });
    }
    let plane = SIDE * SIDE;
    let mut out = vec![0u8; RECORD_BYTES];
    for c in 0..3 {
        for x in 0..SIDE {
            for y in 0..SIDE {
                out[c * plane + x * SIDE + y] = pixels[(y * SIDE + x) * 3 + c];
            }
        }
    }
    Ok(out)
}

/// Directory holding the `*_X.bin` / `*_y.bin` files under `root`.
pub fn binary_dir(root: &Path) -> PathBuf {
    let nested = root.join("stl10_binary");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Dataset root from `SKETCHCOMM_DATA`, defaulting to `./data/stl10`.
pub fn default_root() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/stl10"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Verifies `file` against the digest pinned in `checksums.json`, when present.
fn verify_pinned(dir: &Path, file: &Path) -> Result<()> {
    let manifest = dir.join(CHECKSUM_FILE);
    if !manifest.exists() {
        return Ok(());
    }
    let pins: BTreeMap<String, String> = serde_json::from_slice(&std::fs::read(&manifest)?)?;
    let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if let Some(expected) = pins.get(name) {
        let actual = sha256_file(file)?;
        if &actual != expected {
            return Err(Error::ChecksumMismatch {
                path: file.to_path_buf(),
                expected: expected.clone(),
                actual,
            });
        }
    }
    Ok(())
}

/// Decodes a pair of image/label files. `expected` enforces the split size.
pub fn decode_files(images: &Path, labels: &Path, expected: Option<usize>) -> Result<Vec<LabeledImage>> {
    for p in [images, labels] {
        if !p.exists() {
            return Err(Error::MissingAsset(format!("{} not found", p.display())));
        }
    }
    let x = std::fs::read(images)?;
    let y = std::fs::read(labels)?;
    if x.is_empty() {
        return Err(Error::Truncated {
            path: images.to_path_buf(),
            detail: "file is empty".into(),
        });
    }
    if x.len() % RECORD_BYTES != 0 {
        return Err(Error::Truncated {
            path: images.to_path_buf(),
            detail: format!("{} bytes is not a whole number of {RECORD_BYTES}-byte records", x.len()),
        });
    }
    let count = x.len() / RECORD_BYTES;
    if y.len() != count {
        return Err(Error::SizeMismatch {
            path: labels.to_path_buf(),
            detail: format!("{} labels for {count} images", y.len()),
        });
    }
    if let Some(n) = expected {
        if count != n {
            return Err(Error::SizeMismatch {
                path: images.to_path_buf(),
                detail: format!("expected {n} images, found {count}"),
            });
        }
    }
    x.chunks_exact(RECORD_BYTES)
        .zip(&y)
        .enumerate()
        .map(|(i, (rec, &label))| {
            if !(1..=10).contains(&label) {
                return Err(Error::InvalidInput(format!("label {label} of image {i} is outside 1..=10")));
            }
            Ok(LabeledImage {
                id: i as u32,
                label: label - 1,
                pixels: decode_record(rec)?,
            })
        })
        .collect()
}

/// Loads the `train` or `test` split from an STL-10 binary root.
pub fn load_stl10_split(root: &Path, split: Split) -> Result<Dataset> {
    let dir = binary_dir(root);
    let images = dir.join(format!("{}_X.bin", split.name()));
    let labels = dir.join(format!("{}_y.bin", split.name()));
    for f in [&images, &labels] {
        if f.exists() {
            verify_pinned(&dir, f)?;
        }
    }
    Ok(Dataset {
        split: split.name().into(),
        side: SIDE,
        images: decode_files(&images, &labels, Some(split.expected_count()))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    id: u32,
    label: u8,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheIndex {
    format: String,
    split: String,
    side: usize,
    record_bytes: usize,
    /// SHA-256 of the blob, checked on load.
    blob_sha256: String,
    entries: Vec<CacheEntry>,
}

fn cache_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.blob")), dir.join(format!("{split}.index.json")))
}

/// Writes decoded pixels as one contiguous blob plus a JSON index.
pub fn write_decoded_cache(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (blob_path, index_path) = cache_paths(dir, &dataset.split);
    let record_bytes = dataset.side * dataset.side * 3;
    let mut blob = Vec::with_capacity(dataset.len() * record_bytes);
    let mut entries = Vec::with_capacity(dataset.len());
    for img in &dataset.images {
        entries.push(CacheEntry {
            id: img.id,
            label: img.label,
            offset: blob.len() as u64,
        });
        blob.extend_from_slice(&img.pixels);
    }
    let index = CacheIndex {
        format: CACHE_FORMAT.into(),
        split: dataset.split.clone(),
        side: dataset.side,
        record_bytes,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        entries,
    };
    write_atomic(&blob_path, &blob)?;
    write_atomic(&index_path, &serde_json::to_vec(&index)?)?;
    Ok(())
}

/// Reads a cache written by [`write_decoded_cache`]; `Ok(None)` when absent.
pub fn read_decoded_cache(dir: &Path, split: &str) -> Result<Option<Dataset>> {
    let (blob_path, index_path) = cache_paths(dir, split);
    if !blob_path.exists() || !index_path.exists() {
        return Ok(None);
    }
    let index: CacheIndex = serde_json::from_slice(&std::fs::read(&index_path)?)?;
    if index.format != CACHE_FORMAT {
        return Err(Error::InvalidInput(format!("unsupported cache format {:?}", index.format)));
    }
    let blob = std::fs::read(&blob_path)?;
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != index.blob_sha256 {
        return Err(Error::ChecksumMismatch {
            path: blob_path,
            expected: index.blob_sha256,
            actual,
        });
    }
    let images = index
        .entries
        .iter()
        .map(|e| {
            let start = e.offset as usize;
            let rec = blob.get(start..start + index.record_bytes).ok_or_else(|| Error::Truncated {
                path: blob_path.clone(),
                detail: format!("record {} extends past the blob", e.id),
            })?;
            Ok(LabeledImage {
                id: e.id,
                label: e.label,
                pixels: rec.to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Some(Dataset {
        split: index.split,
        side: index.side,
        images,
    }))
}

/// Loads a split through the decoded cache in `cache_dir`, filling it on a miss.
pub fn load_stl10_cached(root: &Path, split: Split, cache_dir: &Path) -> Result<Dataset> {
    if let Some(ds) = read_decoded_cache(cache_dir, split.name())? {
        return Ok(ds);
    }
    let ds = load_stl10_split(root, split)?;
    write_decoded_cache(&ds, cache_dir)?;
    Ok(ds)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One referential game over dataset positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Game {
    /// Position of the target in the dataset.
    pub target: usize,
    /// `K + 1` distinct dataset positions, the target among them.
    pub pool: Vec<usize>,
    pub target_index: usize,
}

/// Samples `k` distractors uniformly without replacement (target excluded) and
/// places the target at a uniform position.
pub fn sample_game_for_target<R: Rng + ?Sized>(n: usize, target: usize, k: usize, rng: &mut R) -> Result<Game> {
    if target >= n {
        return Err(Error::IndexOutOfRange { index: target, len: n });
    }
    if k + 1 > n {
        return Err(Error::DatasetTooSmall {
            needed: k + 1,
            available: n,
        });
    }
    let mut pool: Vec<usize> = sample(rng, n - 1, k)
        .into_iter()
        .map(|i| if i >= target { i + 1 } else { i })
        .collect();
    let target_index = rng.random_range(0..=k);
    pool.insert(target_index, target);
    Ok(Game {
        target,
        pool,
        target_index,
    })
}

/// A game with a uniformly drawn target.
pub fn sample_game<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Game> {
    if n == 0 || k + 1 > n {
        return Err(Error::DatasetTooSmall {
            needed: k + 1,
            available: n,
        });
    }
    let target = rng.random_range(0..n);
    sample_game_for_target(n, target, k, rng)
}

/// RNG stream for the game whose target is `target`.
pub fn game_rng(seed: u64, target: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(target as u64);
    rng
}

/// One game per dataset position as target, with seeded distractors.
pub fn enumerate_test_games(n: usize, k: usize, seed: u64) -> Result<Vec<Game>> {
    if k + 1 > n {
        return Err(Error::DatasetTooSmall {
            needed: k + 1,
            available: n,
        });
    }
    (0..n)
        .map(|t| sample_game_for_target(n, t, k, &mut game_rng(seed, t)))
        .collect()
}

/// Synthetic labelled images: one shape family per class, with random position,
/// size, colour and background. Useful for offline tests and smoke runs.
pub fn synthetic_shapes(count: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|i| {
            let label = (i % CLASSES.len()) as u8;
            LabeledImage {
                id: i as u32,
                label,
                pixels: draw_shape(label, side, &mut rng),
            }
        })
        .collect();
    Dataset {
        split: format!("synthetic-{seed}"),
        side,
        images,
    }
}

fn draw_shape(label: u8, side: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.5));
    let cx = rng.random_range(0.3..0.7);
    let cy = rng.random_range(0.3..0.7);
    let r = rng.random_range(0.12..0.3);
    let mut px = vec![0u8; side * side * 3];
    for row in 0..side {
        for col in 0..side {
            let x = (col as f64 + 0.5) / side as f64 - cx;
            let y = (row as f64 + 0.5) / side as f64 - cy;
            let d = (x * x + y * y).sqrt();
            let inside = match label {
                0 => d < r,
                1 => x.abs() < r && y.abs() < r,
                2 => y < r && y > -r && x.abs() < (r - y) / 2.0,
                3 => (x.abs() < r / 4.0 && y.abs() < r) || (y.abs() < r / 4.0 && x.abs() < r),
                4 => (d - r).abs() < r / 4.0,
                5 => x.abs() < r && (y * 6.0 / r).rem_euclid(2.0) < 1.0 && y.abs() < r,
                6 => y.abs() < r && (x * 6.0 / r).rem_euclid(2.0) < 1.0 && x.abs() < r,
                7 => (x - y).abs() < r / 4.0 && d < r * 1.3,
                8 => x.abs() + y.abs() < r,
                _ => ((x - y).abs() < r / 5.0 || (x + y).abs() < r / 5.0) && d < r * 1.3,
            };
            let colour = if inside { fg } else { bg };
            for c in 0..3 {
                px[(row * side + col) * 3 + c] = (colour[c] * 255.0).round() as u8;
            }
        }
    }
    px
}

/// Writes `images` in the STL-10 binary layout (for fixtures and tests).
pub fn write_stl10_files(images: &[LabeledImage], x_path: &Path, y_path: &Path) -> Result<()> {
    let mut x = Vec::with_capacity(images.len() * RECORD_BYTES);
    let mut y = Vec::with_capacity(images.len());
    for img in images {
        x.extend(encode_record(&img.pixels)?);
        y.push(img.label + 1);
    }
    std::fs::write(x_path, x)?;
    std::fs::write(y_path, y)?;
    Ok(())
}
