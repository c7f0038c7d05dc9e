//! Run configuration, training loop, checkpoint/resume and communication-rate
//! evaluation for the referential game in which the receiver's pool contains the
//! sender's own photo.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{argmax, AgentConfig, Agents, Scoring};
use crate::assets;
use crate::checkpoint::{canonical_hash, Checkpoint, CheckpointMeta, EncoderRecord, OptimizerRecord, FORMAT};
use crate::data::{self, Dataset, Game, Split};
use crate::encoders::{EncoderHandle, EncoderKind, EncoderSpec, FeatureLayer, FeatureStack, WeightSource};
use crate::error::{Error, Result};
use crate::losses::{self, AugmentationSet, LayerWeights, LossKind, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::raster::{self, LineSet, RasterConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
const ENCODE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Weight file; defaults to the standard file name in the weight cache.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Use seeded random weights instead of pretrained ones.
    #[serde(default)]
    pub random_seed: Option<u64>,
    /// Architecture override, e.g. a reduced-size variant for tests.
    #[serde(default)]
    pub spec: Option<EncoderSpec>,
}

impl EncoderConfig {
    pub fn pretrained(kind: EncoderKind) -> Self {
        Self {
            kind,
            weights: None,
            random_seed: None,
            spec: None,
        }
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec.clone().unwrap_or_else(|| EncoderSpec::default_for(self.kind))
    }

    pub fn build(&self) -> Result<EncoderHandle> {
        let spec = self.spec();
        if spec.kind() != self.kind {
            return Err(Error::InvalidConfig(format!(
                "encoder spec is {:?} but kind is {:?}",
                spec.kind(),
                self.kind
            )));
        }
        if let Some(seed) = self.random_seed {
            return EncoderHandle::random(spec, seed);
        }
        let path = match &self.weights {
            Some(p) => p.clone(),
            None => {
                let p = assets::default_weights_path(self.kind);
                assets::verify_weights(&p, assets::weight_asset(self.kind))?;
                p
            }
        };
        EncoderHandle::pretrained(spec, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// STL-10 train split for training, test split for evaluation.
    Stl10 {
        /// Defaults to `$SKETCHCOMM_DATA`.
        #[serde(default)]
        root: Option<PathBuf>,
        /// Decoded-cache directory; defaults to `<root>/decoded`.
        #[serde(default)]
        cache: Option<PathBuf>,
        /// Class-balanced subset size of the training split.
        #[serde(default)]
        toy: Option<usize>,
        #[serde(default)]
        toy_seed: u64,
    },
    Synthetic {
        train: usize,
        eval: usize,
        side: usize,
        seed: u64,
    },
}

impl DataConfig {
    pub fn root(&self) -> Option<PathBuf> {
        match self {
            Self::Stl10 { root, .. } => Some(root.clone().unwrap_or_else(data::default_root)),
            Self::Synthetic { .. } => None,
        }
    }

    fn load_split(&self, split: Split) -> Result<Dataset> {
        match self {
            Self::Stl10 { cache, .. } => {
                let root = self.root().expect("stl10 has a root");
                let cache = cache.clone().unwrap_or_else(|| root.join("decoded"));
                data::load_stl10_cached(&root, split, &cache)
            }
            Self::Synthetic { train, eval, side, seed } => Ok(match split {
                Split::Train => data::synthetic_shapes(*train, *side, *seed),
                Split::Test => data::synthetic_shapes(*eval, *side, seed.wrapping_add(1)),
            }),
        }
    }

    pub fn load_train(&self) -> Result<Dataset> {
        let ds = self.load_split(Split::Train)?;
        match self {
            Self::Stl10 {
                toy: Some(n),
                toy_seed,
                ..
            } => data::toy_split(&ds, *n, *toy_seed),
            _ => Ok(ds),
        }
    }

    pub fn load_eval(&self) -> Result<Dataset> {
        self.load_split(Split::Test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "one")]
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Game,
            lambda: 1.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many steps; 0 evaluates only at the end.
    #[serde(default)]
    pub every: u64,
    #[serde(default = "default_eval_games")]
    pub games: usize,
    /// Distractor count for evaluation; defaults to the training `k`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_eval_games() -> usize {
    1000
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 0,
            games: default_eval_games(),
            k: None,
            seed: 0,
        }
    }
}

fn default_k() -> usize {
    99
}

fn default_batch() -> usize {
    32
}

/// A training run. Serialised as the JSON file passed to `train --config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: u64,
    /// Defaults to 1e-3 for the ViT encoder and 1e-4 for VGG16.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub aug: AugmentationSet,
    /// Defaults to a canvas at the encoder's input resolution.
    #[serde(default)]
    pub raster: Option<RasterConfig>,
    #[serde(default)]
    pub sender_hidden: Option<[usize; 2]>,
    #[serde(default)]
    pub scoring: Scoring,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
}

impl GameConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.encoder.kind {
            EncoderKind::VitB32 => 1e-3,
            EncoderKind::Vgg16 => 1e-4,
        })
    }

    pub fn raster_config(&self) -> Result<RasterConfig> {
        match self.raster {
            Some(r) => {
                r.validate()?;
                Ok(r)
            }
            None => RasterConfig::for_resolution(self.encoder.spec().input_resolution()),
        }
    }

    pub fn eval_k(&self) -> usize {
        self.eval.k.unwrap_or(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.loss.lambda.is_finite() && self.loss.lambda >= 0.0) {
            return bad("loss.lambda must be non-negative");
        }
        if self.eval.games < 1 {
            return bad("eval.games must be at least 1");
        }
        self.aug.validate()?;
        self.raster_config()?;
        Ok(())
    }

    /// Hash of the run definition; the output location is not part of it.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        canonical_hash(&v)
    }
}

/// RNG derived from the run seed, a purpose tag and an index.
pub fn derive_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(tag.as_bytes())
        .chain_update(index.to_le_bytes())
        .finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Frozen encoder embeddings `[n, dim]` of every image in `dataset`.
pub fn encode_dataset(handle: &EncoderHandle, dataset: &Dataset) -> Result<Tensor> {
    let positions: Vec<usize> = (0..dataset.len()).collect();
    let mut parts = Vec::new();
    for chunk in positions.chunks(ENCODE_BATCH) {
        let imgs = dataset.tensor(chunk, handle.device())?;
        parts.push(handle.encode_embedding(&imgs)?.detach());
    }
    if parts.is_empty() {
        return Err(Error::DatasetTooSmall { needed: 1, available: 0 });
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Evaluation games: `n_games` targets in a seeded order, each with the distractors
/// [`data::enumerate_test_games`] would give it. With `n_games == n` every image is
/// the target exactly once.
pub fn eval_games(n: usize, k: usize, n_games: usize, seed: u64) -> Result<Vec<Game>> {
    if k + 1 > n {
        return Err(Error::DatasetTooSmall {
            needed: k + 1,
            available: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "eval-order", 0));
    (0..n_games)
        .map(|i| {
            let pass = (i / n) as u64;
            let target = order[i % n];
            let pass_seed = if pass == 0 { seed } else { seed ^ pass.wrapping_mul(0x9E37_79B9_7F4A_7C15) };
            data::sample_game_for_target(n, target, k, &mut data::game_rng(pass_seed, target))
        })
        .collect()
}

/// Everything needed to play: both agents, the shared encoder and the canvas.
#[derive(Clone, Copy)]
pub struct Players<'a> {
    pub agents: &'a Agents,
    pub handle: &'a EncoderHandle,
    pub raster: &'a RasterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub target: usize,
    pub target_id: u32,
    pub pool: Vec<usize>,
    pub pool_ids: Vec<u32>,
    pub target_index: usize,
    pub scores: Vec<f64>,
    pub guess_index: usize,
    pub success: bool,
    pub lines: LineSet,
}

impl GameRecord {
    pub fn guess(&self) -> usize {
        self.pool[self.guess_index]
    }
}

/// Sender line coordinates `[n, 4 * n_lines]` for the given photo features.
pub fn sketch_coords(players: Players, features: &Tensor) -> Result<Tensor> {
    Ok(players.agents.sender_coords(features)?.detach())
}

fn receiver_rows(players: Players, features: &Tensor) -> Result<Vec<Vec<f32>>> {
    let n = features.dim(0)?;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(ENCODE_BATCH) {
        let len = ENCODE_BATCH.min(n - start);
        let emb = players.agents.receiver_head(&features.narrow(0, start, len)?)?;
        out.extend(emb.to_vec2::<f32>()?);
    }
    Ok(out)
}

fn score_rows(sketch: &[f32], pool: &[&Vec<f32>], scoring: Scoring) -> Vec<f64> {
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
    match scoring {
        Scoring::Dot => pool.iter().map(|p| dot(sketch, p)).collect(),
        Scoring::Cosine => {
            let ns = dot(sketch, sketch).sqrt();
            pool.iter().map(|p| dot(sketch, p) / (ns * dot(p, p).sqrt() + 1e-12)).collect()
        }
    }
}

/// Receiver scores for one game given the sketch embedding and the receiver
/// embeddings of every photo, with the guessed pool position.
pub fn judge_game(game: &Game, sketch: &[f32], photos: &[Vec<f32>], scoring: Scoring) -> Result<(Vec<f64>, usize)> {
    let pool = game
        .pool
        .iter()
        .map(|&p| photos.get(p).ok_or(Error::IndexOutOfRange { index: p, len: photos.len() }))
        .collect::<Result<Vec<_>>>()?;
    let scores = score_rows(sketch, &pool, scoring);
    let guess = argmax(&scores).ok_or_else(|| Error::InvalidInput("empty pool".into()))?;
    Ok((scores, guess))
}

/// Plays `games` over a dataset whose frozen features are `features`.
pub fn play_games(players: Players, features: &Tensor, dataset: &Dataset, games: &[Game]) -> Result<Vec<GameRecord>> {
    let mut targets: Vec<usize> = games.iter().map(|g| g.target).collect();
    targets.sort_unstable();
    targets.dedup();
    let mut sketches: BTreeMap<usize, (LineSet, Vec<f32>)> = BTreeMap::new();
    for chunk in targets.chunks(ENCODE_BATCH) {
        let idx = Tensor::from_vec(chunk.iter().map(|&t| t as u32).collect::<Vec<_>>(), chunk.len(), features.device())?;
        let coords = sketch_coords(players, &features.index_select(&idx, 0)?)?;
        let images = raster::rasterize_tensor(&coords, players.raster)?;
        let emb = players.agents.receiver_head(&players.handle.encode_embedding(&images)?)?;
        let lines = raster::line_sets_from_tensor(&coords)?;
        for ((&t, l), e) in chunk.iter().zip(lines).zip(emb.to_vec2::<f32>()?) {
            sketches.insert(t, (l, e));
        }
    }
    let photos = receiver_rows(players, features)?;
    games
        .iter()
        .map(|g| {
            let (lines, emb) = &sketches[&g.target];
            let (scores, guess_index) = judge_game(g, emb, &photos, players.agents.config.scoring)?;
            Ok(GameRecord {
                target: g.target,
                target_id: dataset.images[g.target].id,
                pool: g.pool.clone(),
                pool_ids: g.pool.iter().map(|&p| dataset.images[p].id).collect(),
                target_index: g.target_index,
                guess_index,
                success: guess_index == g.target_index,
                scores,
                lines: lines.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub games: usize,
    pub k: usize,
    pub comm_rate: f64,
    /// Mean hinge loss over the evaluated games.
    pub loss: f64,
}

pub fn summarize(records: &[GameRecord], k: usize) -> Result<EvalStats> {
    let wins = records.iter().filter(|r| r.success).count();
    let loss: f64 = records
        .iter()
        .map(|r| losses::game_hinge_loss(&r.scores, r.target_index))
        .sum::<Result<f64>>()?;
    let n = records.len().max(1) as f64;
    Ok(EvalStats {
        games: records.len(),
        k,
        comm_rate: wins as f64 / n,
        loss: loss / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub game_loss: f64,
    pub aux_loss: Option<f64>,
    pub comm_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSplit {
    Train,
    Eval,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: MetricSplit,
    pub loss: f64,
    pub comm_rate: f64,
    pub wallclock: f64,
}

pub struct Trainer {
    pub config: GameConfig,
    pub handle: EncoderHandle,
    pub raster: RasterConfig,
    pub agents: Agents,
    pub train_set: Dataset,
    pub eval_set: Dataset,
    optimizer: Adam,
    train_features: Tensor,
    eval_features: Tensor,
    layer_weights: LayerWeights,
    step: u64,
}

impl Trainer {
    /// Builds the encoder and loads data; fails before any step if either is missing.
    pub fn new(config: GameConfig) -> Result<Self> {
        config.validate()?;
        let handle = config.encoder.build()?;
        let train = config.data.load_train()?;
        let eval = config.data.load_eval()?;
        Self::from_parts(config, handle, train, eval)
    }

    pub fn from_parts(config: GameConfig, handle: EncoderHandle, train_set: Dataset, eval_set: Dataset) -> Result<Self> {
        config.validate()?;
        for (ds, k) in [(&train_set, config.k), (&eval_set, config.eval_k())] {
            if ds.len() < k + 1 {
                return Err(Error::DatasetTooSmall {
                    needed: k + 1,
                    available: ds.len(),
                });
            }
        }
        let raster = config.raster_config()?;
        let mut agent_cfg = AgentConfig::for_encoder(handle.kind(), handle.embedding_dim());
        if let Some(h) = config.sender_hidden {
            agent_cfg.sender_hidden = h;
        }
        agent_cfg.scoring = config.scoring;
        let agents = Agents::init(agent_cfg, config.seed, handle.device())?;
        let optimizer = Adam::new(agents.named_vars(), AdamConfig::with_lr(config.learning_rate()))?;
        let train_features = encode_dataset(&handle, &train_set)?;
        let eval_features = encode_dataset(&handle, &eval_set)?;
        let layer_weights = LayerWeights::uniform(handle.layer_count());
        Ok(Self {
            config,
            handle,
            raster,
            agents,
            train_set,
            eval_set,
            optimizer,
            train_features,
            eval_features,
            layer_weights,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn players(&self) -> Players<'_> {
        Players {
            agents: &self.agents,
            handle: &self.handle,
            raster: &self.raster,
        }
    }

    pub fn train_features(&self) -> &Tensor {
        &self.train_features
    }

    /// Replaces the optimizer (resetting its moments) with one using `lr`.
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        self.optimizer = Adam::new(self.agents.named_vars(), AdamConfig::with_lr(lr))?;
        Ok(())
    }

    /// Games and augmentations for the next step, drawn from `(seed, step)`.
    pub fn next_batch(&self) -> Result<(Vec<Game>, Vec<losses::Augmentation>)> {
        let mut rng = derive_rng(self.config.seed, "train-step", self.step + 1);
        let n = self.train_set.len();
        let games = (0..self.config.batch_size)
            .map(|_| data::sample_game(n, self.config.k, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let transforms = if self.config.loss.kind == LossKind::GameClip {
            losses::sample_augmentations(&self.config.aug, &mut rng)?
        } else {
            Vec::new()
        };
        Ok((games, transforms))
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let (games, transforms) = self.next_batch()?;
        self.train_step_on(&games, &transforms)
    }

    /// Forward pass on `games`: (total loss, game loss, auxiliary loss, scores).
    fn forward(&self, games: &[Game], transforms: &[losses::Augmentation]) -> Result<(Tensor, Tensor, Option<Tensor>, Tensor)> {
        let dev = self.handle.device();
        let b = games.len();
        let pool_size = games.first().map(|g| g.pool.len()).unwrap_or(0);
        if games.iter().any(|g| g.pool.len() != pool_size) {
            return Err(Error::InvalidInput("games in a batch must share a pool size".into()));
        }
        let target_ids: Vec<u32> = games.iter().map(|g| g.target as u32).collect();
        let target_feats = self.train_features.index_select(&Tensor::from_vec(target_ids, b, dev)?, 0)?;
        let coords = self.agents.sender_coords(&target_feats)?;
        let sketch = raster::rasterize_tensor(&coords, &self.raster)?;
        let sketch_emb = self.agents.receiver_head(&self.handle.encode_embedding(&sketch)?)?;
        let pool_ids: Vec<u32> = games.iter().flat_map(|g| g.pool.iter().map(|&p| p as u32)).collect();
        let pool_feats = self
            .train_features
            .index_select(&Tensor::from_vec(pool_ids, b * pool_size, dev)?, 0)?;
        let pool_emb = self
            .agents
            .receiver_head(&pool_feats)?
            .reshape((b, pool_size, self.agents.config.receiver_out))?;
        let scores = self.agents.score(&sketch_emb, &pool_emb)?;
        let target_index: Vec<usize> = games.iter().map(|g| g.target_index).collect();
        let game = losses::game_hinge_loss_tensor(&scores, &target_index)?;

        let aux = match self.config.loss.kind {
            LossKind::Game => None,
            LossKind::GamePercep => {
                let targets: Vec<usize> = games.iter().map(|g| g.target).collect();
                let photos = self.train_set.tensor(&targets, dev)?;
                let photo_stack = FeatureStack {
                    layers: self
                        .handle
                        .encode_layers(&photos)?
                        .layers
                        .into_iter()
                        .map(|l| FeatureLayer {
                            features: l.features.detach(),
                            channel_dim: l.channel_dim,
                        })
                        .collect(),
                };
                let sketch_stack = self.handle.encode_layers(&sketch)?;
                Some(losses::perceptual_loss_stacks(&sketch_stack, &photo_stack, &self.layer_weights)?.mean_all()?)
            }
            LossKind::GameClip => Some(losses::clip_aug_loss_with(
                |x| self.handle.encode_embedding(x),
                &sketch,
                &target_feats,
                transforms,
                self.handle.input_resolution(),
            )?),
        };
        let lw = LossWeights {
            percep: self.config.loss.lambda,
            clip: self.config.loss.lambda,
        };
        let (percep, clip) = match self.config.loss.kind {
            LossKind::GamePercep => (aux.as_ref(), None),
            LossKind::GameClip => (None, aux.as_ref()),
            LossKind::Game => (None, None),
        };
        let total = losses::total_loss(&game, percep, clip, &lw)?;
        Ok((total, game, aux, scores))
    }

    /// Loss on `games` without updating anything.
    pub fn loss_on(&self, games: &[Game], transforms: &[losses::Augmentation]) -> Result<f64> {
        losses::scalar(&self.forward(games, transforms)?.0)
    }

    /// One Adam update on the given batch.
    pub fn train_step_on(&mut self, games: &[Game], transforms: &[losses::Augmentation]) -> Result<StepStats> {
        let step = self.step + 1;
        let (total, game, aux, scores) = self.forward(games, transforms)?;
        let loss = losses::scalar(&total)?;
        let game_loss = losses::scalar(&game)?;
        let aux_loss = aux.as_ref().map(losses::scalar).transpose()?;
        let rows = scores.to_vec2::<f32>()?;
        let scores_finite = rows.iter().flatten().all(|v| v.is_finite());
        if !loss.is_finite() || !scores_finite {
            let diagnostics = self.dump_diagnostics(step, loss, game_loss, aux_loss, games)?;
            return Err(Error::NonFiniteLoss { step, diagnostics });
        }
        let grads = total.backward()?;
        self.optimizer.step(&grads)?;
        let wins = rows
            .iter()
            .zip(games)
            .filter(|(r, g)| {
                let r: Vec<f64> = r.iter().map(|&v| v as f64).collect();
                argmax(&r) == Some(g.target_index)
            })
            .count();
        self.step = step;
        Ok(StepStats {
            step,
            loss,
            game_loss,
            aux_loss,
            comm_rate: wins as f64 / games.len().max(1) as f64,
        })
    }

    fn dump_diagnostics(&self, step: u64, loss: f64, game: f64, aux: Option<f64>, games: &[Game]) -> Result<String> {
        let mut norms = BTreeMap::new();
        for (name, var) in self.agents.named_vars() {
            let n = var.as_tensor().sqr()?.sum_all()?.sqrt()?.to_scalar::<f32>()?;
            norms.insert(name, n as f64);
        }
        let report = serde_json::json!({
            "step": step,
            "loss": loss.to_string(),
            "game_loss": game.to_string(),
            "aux_loss": aux.map(|a| a.to_string()),
            "param_norms": norms.iter().map(|(k, v)| (k.clone(), v.to_string())).collect::<BTreeMap<_, _>>(),
            "targets": games.iter().map(|g| g.target).collect::<Vec<_>>(),
        });
        std::fs::create_dir_all(&self.config.output_dir)?;
        let path = self.config.output_dir.join(format!("nonfinite-step-{step}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
        Ok(format!("diagnostics written to {}", path.display()))
    }

    pub fn evaluate(&self) -> Result<EvalStats> {
        let k = self.config.eval_k();
        let games = eval_games(self.eval_set.len(), k, self.config.eval.games, self.config.eval.seed)?;
        let records = play_games(self.players(), &self.eval_features, &self.eval_set, &games)?;
        summarize(&records, k)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            format: FORMAT.into(),
            step: self.step,
            seed: self.config.seed,
            config: self.config.clone(),
            config_hash: self.config.hash()?,
            encoder: EncoderRecord {
                spec: self.handle.spec().clone(),
                source: self.handle.source().clone(),
                fingerprint: self.handle.fingerprint().to_string(),
            },
            raster: self.raster,
            agent: self.agents.config.clone(),
            optimizer: Some(OptimizerRecord {
                config: *self.optimizer.config(),
                steps: self.optimizer.steps(),
            }),
        };
        Ok(Checkpoint {
            meta,
            params: self.agents.tensors()?,
            optimizer: self.optimizer.state_tensors(),
        })
    }

    /// Loads parameters, optimizer state and the step counter from `ckpt`.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.meta.agent != self.agents.config {
            return Err(Error::Checkpoint("agent shapes differ from the configuration".into()));
        }
        if ckpt.meta.encoder.fingerprint != self.handle.fingerprint() {
            return Err(Error::Checkpoint("checkpoint was trained with different encoder weights".into()));
        }
        for (name, var) in self.agents.named_vars() {
            let t = ckpt
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            var.set(t)?;
        }
        let opt_steps = ckpt.meta.optimizer.as_ref().map(|o| o.steps).unwrap_or(0);
        self.optimizer.load_state(opt_steps, &ckpt.optimizer)?;
        self.step = ckpt.meta.step;
        Ok(())
    }
}

/// A trained model loaded for evaluation.
pub struct Model {
    pub config: GameConfig,
    pub handle: EncoderHandle,
    pub agents: Agents,
    pub raster: RasterConfig,
    pub step: u64,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::with_encoder(ckpt, rebuild_encoder(&ckpt.meta.encoder)?)
    }

    /// Uses an already-built encoder, which must match the checkpoint's fingerprint.
    pub fn with_encoder(ckpt: &Checkpoint, handle: EncoderHandle) -> Result<Self> {
        if handle.fingerprint() != ckpt.meta.encoder.fingerprint {
            return Err(Error::Checkpoint("encoder weights do not match the checkpoint".into()));
        }
        let agents = Agents::from_tensors(ckpt.meta.agent.clone(), &ckpt.params)?;
        Ok(Self {
            config: ckpt.meta.config.clone(),
            handle,
            agents,
            raster: ckpt.meta.raster,
            step: ckpt.meta.step,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn players(&self) -> Players<'_> {
        Players {
            agents: &self.agents,
            handle: &self.handle,
            raster: &self.raster,
        }
    }
}

fn rebuild_encoder(record: &EncoderRecord) -> Result<EncoderHandle> {
    let source = match &record.source {
        WeightSource::Pretrained { path } if !path.exists() => WeightSource::Pretrained {
            path: assets::default_weights_path(record.spec.kind()),
        },
        other => other.clone(),
    };
    EncoderHandle::new(record.spec.clone(), source)
}

/// Fraction of `n_games` seeded games on `dataset` that the model wins.
pub fn evaluate_comm_rate(model: &Model, dataset: &Dataset, k: usize, n_games: usize, seed: u64) -> Result<EvalStats> {
    if n_games == 0 {
        return Err(Error::InvalidInput("n_games must be at least 1".into()));
    }
    let features = encode_dataset(&model.handle, dataset)?;
    let games = eval_games(dataset.len(), k, n_games, seed)?;
    let records = play_games(model.players(), &features, dataset, &games)?;
    summarize(&records, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_eval: Option<EvalStats>,
    pub resumed_from: Option<u64>,
}

fn same_run(a: &GameConfig, b: &GameConfig) -> Result<bool> {
    let strip = |c: &GameConfig| -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(c)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("steps");
        }
        Ok(v)
    };
    Ok(strip(a)? == strip(b)?)
}

/// Keeps only metric lines up to and including `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut kept = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(&line)?;
        if rec.step <= step {
            kept.push(line);
        }
    }
    let mut body = kept.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    data::write_atomic(path, body.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    file.lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Runs (or resumes) training as described by `config`, writing metrics and
/// checkpoints under `config.output_dir`.
pub fn train(config: &GameConfig) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config.clone())?;
    train_with(trainer)
}

/// Like [`train`], starting from an already-constructed trainer.
pub fn train_with(mut trainer: Trainer) -> Result<TrainOutcome> {
    let config = trainer.config.clone();
    let out = config.output_dir.clone();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = out.join(METRICS_FILE);
    let latest = ckpt_dir.join(LATEST_CHECKPOINT);

    let mut resumed_from = None;
    if latest.exists() {
        let ckpt = Checkpoint::load(&latest)?;
        if !same_run(&ckpt.meta.config, &config)? {
            return Err(Error::InvalidConfig(format!(
                "{} holds a run with a different configuration",
                out.display()
            )));
        }
        if ckpt.meta.step > config.steps {
            return Err(Error::InvalidConfig(format!(
                "checkpoint is at step {} beyond the budget of {}",
                ckpt.meta.step, config.steps
            )));
        }
        trainer.restore(&ckpt)?;
        truncate_metrics(&metrics_path, ckpt.meta.step)?;
        resumed_from = Some(ckpt.meta.step);
    } else {
        std::fs::write(&metrics_path, b"")?;
    }

    let start = Instant::now();
    let mut metrics = std::fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let mut log = |rec: MetricRecord| -> Result<()> {
        writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
        metrics.flush()?;
        Ok(())
    };
    let save = |t: &Trainer| -> Result<PathBuf> {
        let ckpt = t.checkpoint()?;
        let path = ckpt_dir.join(format!("step-{:08}.ckpt", t.step()));
        ckpt.save(&path)?;
        ckpt.save(&latest)?;
        Ok(path)
    };

    let mut final_eval = None;
    let mut checkpoint = latest.clone();
    if trainer.step() == 0 && config.steps == 0 {
        let e = trainer.evaluate()?;
        log(MetricRecord {
            step: 0,
            split: MetricSplit::Eval,
            loss: e.loss,
            comm_rate: e.comm_rate,
            wallclock: start.elapsed().as_secs_f64(),
        })?;
        final_eval = Some(e);
        checkpoint = save(&trainer)?;
    }
    while trainer.step() < config.steps {
        let s = trainer.train_step()?;
        log(MetricRecord {
            step: s.step,
            split: MetricSplit::Train,
            loss: s.loss,
            comm_rate: s.comm_rate,
            wallclock: start.elapsed().as_secs_f64(),
        })?;
        let last = s.step == config.steps;
        if last || (config.eval.every > 0 && s.step % config.eval.every == 0) {
            let e = trainer.evaluate()?;
            log(MetricRecord {
                step: s.step,
                split: MetricSplit::Eval,
                loss: e.loss,
                comm_rate: e.comm_rate,
                wallclock: start.elapsed().as_secs_f64(),
            })?;
            if last {
                final_eval = Some(e);
            }
        }
        if last || (config.checkpoint_every > 0 && s.step % config.checkpoint_every == 0) {
            checkpoint = save(&trainer)?;
        }
    }
    Ok(TrainOutcome {
        steps: trainer.step(),
        checkpoint,
        metrics: metrics_path,
        final_eval,
        resumed_from,
    })
}

/// Metric lines with the wall-clock column removed, for run-to-run comparison.
pub fn metrics_without_wallclock(records: &[MetricRecord]) -> Vec<(u64, MetricSplit, u64, u64)> {
    records
        .iter()
        .map(|r| (r.step, r.split.clone(), r.loss.to_bits(), r.comm_rate.to_bits()))
        .collect()
}

pub fn default_device() -> Device {
    Device::Cpu
}
