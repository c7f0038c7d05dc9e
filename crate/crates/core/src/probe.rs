//! Zero-shot CLIP prompt probe: classifies sketches, targets and guesses against
//! "a drawing of a X." / "a photo of a X." prompts and tabulates agreement rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::agents::argmax;
use crate::data::{Dataset, CLASSES};
use crate::encoders::EncoderHandle;
use crate::error::{Error, Result};
use crate::game::{self, GameRecord, Model};
use crate::raster::{self, RasterConfig};

pub const PLACEHOLDER: &str = "XXX";
pub const TEMPLATES: [&str; 2] = ["a drawing of a XXX.", "a photo of a XXX."];
const BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptType {
    Drawing,
    Photo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub class: u8,
    pub kind: PromptType,
}

/// The twenty filled prompts, drawings first, with their unit-norm text embeddings.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
    embeddings: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub class: u8,
    pub kind: PromptType,
    pub prompt: usize,
}

impl Classification {
    pub fn class_name(&self) -> &'static str {
        CLASSES[self.class as usize]
    }
}

/// Filled prompt strings in prompt-index order.
pub fn prompts() -> Vec<Prompt> {
    let mut out = Vec::with_capacity(TEMPLATES.len() * CLASSES.len());
    for (template, kind) in TEMPLATES.iter().zip([PromptType::Drawing, PromptType::Photo]) {
        for (class, name) in CLASSES.iter().enumerate() {
            out.push(Prompt {
                text: template.replace(PLACEHOLDER, name),
                class: class as u8,
                kind,
            });
        }
    }
    out
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let x = x.to_dtype(DType::F32)?;
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

impl PromptSet {
    /// Encodes the prompts with the handle's text tower.
    pub fn new(handle: &EncoderHandle) -> Result<Self> {
        let prompts = prompts();
        let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
        let emb = handle.encode_text(&texts)?;
        Self::from_embeddings(prompts, &emb)
    }

    pub fn from_embeddings(prompts: Vec<Prompt>, embeddings: &Tensor) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        if n != prompts.len() {
            return Err(Error::DimensionMismatch {
                expected: prompts.len(),
                got: n,
            });
        }
        Ok(Self {
            prompts,
            embeddings: unit_rows(&embeddings.detach())?,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Unit-norm prompt embeddings `[prompts, dim]`.
    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Nearest prompt by cosine similarity for each image embedding `[n, dim]`;
    /// ties go to the lowest prompt index.
    pub fn classify_embeddings(&self, embeddings: &Tensor) -> Result<Vec<Classification>> {
        let sims = unit_rows(embeddings)?.matmul(&self.embeddings.t()?)?.to_vec2::<f32>()?;
        sims.iter()
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                let i = argmax(&row).ok_or_else(|| Error::InvalidInput("empty prompt set".into()))?;
                let p = &self.prompts[i];
                Ok(Classification {
                    class: p.class,
                    kind: p.kind,
                    prompt: i,
                })
            })
            .collect()
    }
}

/// Classifies images `[n, C, H, W]` (values in [0, 1]) with the probe encoder.
pub fn clip_classify(images: &Tensor, prompts: &PromptSet, handle: &EncoderHandle) -> Result<Vec<Classification>> {
    let n = images.dim(0)?;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(BATCH) {
        let len = BATCH.min(n - start);
        let emb = handle.encode_embedding(&images.narrow(0, start, len)?)?;
        out.extend(prompts.classify_embeddings(&emb)?);
    }
    Ok(out)
}

/// Classifies dataset photos by position.
pub fn classify_photos(
    dataset: &Dataset,
    positions: &[usize],
    prompts: &PromptSet,
    handle: &EncoderHandle,
) -> Result<Vec<Classification>> {
    let mut out = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(BATCH) {
        let images = dataset.tensor(chunk, handle.device())?;
        out.extend(clip_classify(&images, prompts, handle)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCounts {
    pub sketch_gt: u64,
    pub sketch_target: u64,
    pub sketch_guess: u64,
    pub target_gt: u64,
    pub guess_gt: u64,
    pub sketch_drawing: u64,
    pub target_photo: u64,
    pub guess_photo: u64,
}

/// Per-game probe outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeGame {
    pub gt: u8,
    pub sketch: Classification,
    pub target: Classification,
    pub guess: Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub statistic: String,
    pub count: u64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub games: u64,
    pub k: usize,
    pub seed: u64,
    pub counts: ProbeCounts,
    pub rows: Vec<ProbeRow>,
}

pub const ROW_LABELS: [&str; 8] = [
    "c(sketch)==gt(input)",
    "c(sketch)==c(target)",
    "c(sketch)==c(guess)",
    "c(target)==gt(input)",
    "c(guess)==gt(input)",
    "tp(sketch)=='drawing'",
    "tp(target)=='photo'",
    "tp(guess)=='photo'",
];

impl ProbeCounts {
    pub fn add(&mut self, g: &ProbeGame) {
        let b = |x: bool| x as u64;
        self.sketch_gt += b(g.sketch.class == g.gt);
        self.sketch_target += b(g.sketch.class == g.target.class);
        self.sketch_guess += b(g.sketch.class == g.guess.class);
        self.target_gt += b(g.target.class == g.gt);
        self.guess_gt += b(g.guess.class == g.gt);
        self.sketch_drawing += b(g.sketch.kind == PromptType::Drawing);
        self.target_photo += b(g.target.kind == PromptType::Photo);
        self.guess_photo += b(g.guess.kind == PromptType::Photo);
    }

    pub fn values(&self) -> [u64; 8] {
        [
            self.sketch_gt,
            self.sketch_target,
            self.sketch_guess,
            self.target_gt,
            self.guess_gt,
            self.sketch_drawing,
            self.target_photo,
            self.guess_photo,
        ]
    }
}

impl ProbeReport {
    pub fn from_games(games: &[ProbeGame], k: usize, seed: u64) -> Self {
        let mut counts = ProbeCounts::default();
        for g in games {
            counts.add(g);
        }
        let n = games.len() as u64;
        let rows = ROW_LABELS
            .iter()
            .zip(counts.values())
            .map(|(label, count)| ProbeRow {
                statistic: label.to_string(),
                count,
                percent: if n == 0 { 0.0 } else { 100.0 * count as f64 / n as f64 },
            })
            .collect();
        Self {
            games: n,
            k,
            seed,
            counts,
            rows,
        }
    }

    pub fn percent(&self, statistic: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.statistic == statistic).map(|r| r.percent)
    }
}

/// Text table with one column per model, statistics as rows.
pub fn render_table(columns: &[(&str, &ProbeReport)]) -> String {
    let label_w = ROW_LABELS.iter().map(|l| l.len()).max().unwrap_or(0);
    let col_w: Vec<usize> = columns.iter().map(|(name, _)| name.len().max(7)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for ((name, _), w) in columns.iter().zip(&col_w) {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    for (i, label) in ROW_LABELS.iter().enumerate() {
        let _ = write!(out, "{label:label_w$}");
        for ((_, report), w) in columns.iter().zip(&col_w) {
            let _ = write!(out, "  {:>w$}", format!("{:.1}%", report.rows[i].percent));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:label_w$}", "games");
    for ((_, report), w) in columns.iter().zip(&col_w) {
        let _ = write!(out, "  {:>w$}", report.games);
    }
    out.push('\n');
    out
}

/// Probes already-played games. `render` turns a batch of records into sketch
/// images `[b, C, H, W]`; targets and guesses are photos from `dataset`.
pub fn probe_records<F>(
    records: &[GameRecord],
    dataset: &Dataset,
    render: F,
    prompts: &PromptSet,
    probe: &EncoderHandle,
) -> Result<Vec<ProbeGame>>
where
    F: Fn(&[&GameRecord]) -> Result<Tensor>,
{
    let mut photo_positions: Vec<usize> = records.iter().flat_map(|r| [r.target, r.guess()]).collect();
    photo_positions.sort_unstable();
    photo_positions.dedup();
    let photo_classes: BTreeMap<usize, Classification> = photo_positions
        .iter()
        .copied()
        .zip(classify_photos(dataset, &photo_positions, prompts, probe)?)
        .collect();

    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(BATCH) {
        let refs: Vec<&GameRecord> = chunk.iter().collect();
        let sketches = clip_classify(&render(&refs)?, prompts, probe)?;
        for (r, sketch) in chunk.iter().zip(sketches) {
            out.push(ProbeGame {
                gt: dataset.images[r.target].label,
                sketch,
                target: photo_classes[&r.target],
                guess: photo_classes[&r.guess()],
            });
        }
    }
    Ok(out)
}

/// Renders each record's lines at the probe encoder's input resolution.
pub fn render_at(resolution: usize) -> Result<impl Fn(&[&GameRecord]) -> Result<Tensor>> {
    let cfg = RasterConfig::for_resolution(resolution)?;
    Ok(move |records: &[&GameRecord]| {
        let flat: Vec<f32> = records
            .iter()
            .flat_map(|r| r.lines.to_flat())
            .map(|v| v as f32)
            .collect();
        let width = records.first().map(|r| r.lines.len() * raster::COORDS_PER_SEGMENT).unwrap_or(0);
        let coords = Tensor::from_vec(flat, (records.len(), width), &candle_core::Device::Cpu)?;
        raster::rasterize_tensor(&coords, &cfg)
    })
}

/// Plays `games` with `model` and probes every one with the CLIP `probe` encoder.
pub fn probe_games(
    model: &Model,
    dataset: &Dataset,
    games: &[crate::data::Game],
    prompts: &PromptSet,
    probe: &EncoderHandle,
    seed: u64,
) -> Result<ProbeReport> {
    if !probe.has_text_tower() {
        return Err(Error::InvalidConfig("the probe encoder needs a text tower".into()));
    }
    let k = games.first().map(|g| g.pool.len().saturating_sub(1)).unwrap_or(0);
    let features = game::encode_dataset(&model.handle, dataset)?;
    let records = game::play_games(model.players(), &features, dataset, games)?;
    let per_game = probe_records(&records, dataset, render_at(probe.input_resolution())?, prompts, probe)?;
    Ok(ProbeReport::from_games(&per_game, k, seed))
}

/// Zero-shot rates over photos alone: (c(photo)==gt, tp(photo)=='photo') in percent.
pub fn photo_zero_shot(dataset: &Dataset, prompts: &PromptSet, probe: &EncoderHandle) -> Result<(f64, f64, usize)> {
    let positions: Vec<usize> = (0..dataset.len()).collect();
    let classes = classify_photos(dataset, &positions, prompts, probe)?;
    let n = classes.len();
    let gt = classes
        .iter()
        .zip(&dataset.images)
        .filter(|(c, img)| c.class == img.label)
        .count();
    let photo = classes.iter().filter(|c| c.kind == PromptType::Photo).count();
    let pct = |x: usize| if n == 0 { 0.0 } else { 100.0 * x as f64 / n as f64 };
    Ok((pct(gt), pct(photo), n))
}
