//! Game generation for human-receiver sessions.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use sketchcomm::data::Dataset;
use sketchcomm::game::{self, Model};
use sketchcomm::{imageio, raster};

use crate::error::{Result, ServiceError};
use crate::store::{PhotoSlot, SessionGame, Store, HUMAN_K, SESSION_GAMES};

pub const CHECKPOINT_EXT: &str = "ckpt";

/// Produces the games of a new session.
pub trait GameSource: Send + Sync {
    /// Model configurations sessions can be created for.
    fn configs(&self) -> Result<Vec<String>>;

    /// The session's games for `config_id` and `seed`, with every image stored.
    fn generate(&self, config_id: &str, seed: u64, store: &Store) -> Result<Vec<SessionGame>>;
}

/// Serves `<dir>/<config_id>.ckpt` senders over a fixed test set.
pub struct CheckpointSource {
    dir: PathBuf,
    dataset: Arc<Dataset>,
    models: Mutex<HashMap<String, Arc<Model>>>,
}

impl CheckpointSource {
    pub fn new(dir: impl Into<PathBuf>, dataset: Dataset) -> Self {
        Self {
            dir: dir.into(),
            dataset: Arc::new(dataset),
            models: Mutex::new(HashMap::new()),
        }
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    fn checkpoint_path(&self, config_id: &str) -> Result<PathBuf> {
        let valid = !config_id.is_empty()
            && config_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '+' | '.'))
            && !config_id.starts_with('.');
        if !valid {
            return Err(ServiceError::UnknownConfig(config_id.to_string()));
        }
        let path = self.dir.join(format!("{config_id}.{CHECKPOINT_EXT}"));
        if !path.is_file() {
            return Err(ServiceError::UnknownConfig(config_id.to_string()));
        }
        Ok(path)
    }

    fn model(&self, config_id: &str) -> Result<Arc<Model>> {
        let path = self.checkpoint_path(config_id)?;
        let mut models = self.models.lock().expect("model cache poisoned");
        if let Some(m) = models.get(config_id) {
            return Ok(m.clone());
        }
        let model = Arc::new(Model::load(&path)?);
        models.insert(config_id.to_string(), model.clone());
        Ok(model)
    }
}

fn photo_png(dataset: &Dataset, position: usize) -> Result<Vec<u8>> {
    let img = &dataset.images[position];
    Ok(imageio::encode_rgb_png(dataset.side, dataset.side, &img.pixels)?)
}

/// Rasterizes the sender's sketch of each target position.
fn sketch_pngs(model: &Model, dataset: &Dataset, targets: &[usize]) -> Result<Vec<Vec<u8>>> {
    let subset = Dataset {
        split: dataset.split.clone(),
        side: dataset.side,
        images: targets.iter().map(|&t| dataset.images[t].clone()).collect(),
    };
    let features = game::encode_dataset(&model.handle, &subset)?;
    let coords = game::sketch_coords(model.players(), &features)?;
    let mut out = Vec::with_capacity(targets.len());
    for lines in raster::line_sets_from_tensor(&coords)? {
        out.push(raster::rasterize(&lines, &model.raster)?.to_png()?);
    }
    Ok(out)
}

/// Session games for a sender: targets and pools drawn from the whole test set
/// with `seed`, photos shown in a seeded order per game.
pub fn generate_games(model: &Model, dataset: &Dataset, seed: u64, store: &Store) -> Result<Vec<SessionGame>> {
    let games = game::eval_games(dataset.len(), HUMAN_K, SESSION_GAMES, seed)?;
    let targets: Vec<usize> = games.iter().map(|g| g.target).collect();
    let sketches = sketch_pngs(model, dataset, &targets)?;
    let mut photo_refs: HashMap<usize, String> = HashMap::new();
    let mut out = Vec::with_capacity(games.len());
    for (i, (g, sketch)) in games.iter().zip(sketches).enumerate() {
        let mut order = g.pool.clone();
        order.shuffle(&mut game::derive_rng(seed, "display", i as u64));
        let mut photos = Vec::with_capacity(order.len());
        for p in order {
            let photo_ref = match photo_refs.get(&p) {
                Some(r) => r.clone(),
                None => {
                    let r = store.put_image(&photo_png(dataset, p)?)?;
                    photo_refs.insert(p, r.clone());
                    r
                }
            };
            let img = &dataset.images[p];
            photos.push(PhotoSlot {
                photo_ref,
                image_id: img.id,
                class: img.label,
            });
        }
        let target = &dataset.images[g.target];
        out.push(SessionGame {
            sketch: store.put_image(&sketch)?,
            photos,
            target_id: target.id,
            target_class: target.label,
        });
    }
    Ok(out)
}

impl GameSource for CheckpointSource {
    fn configs(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        if !self.dir.is_dir() {
            return Ok(ids);
        }
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(CHECKPOINT_EXT) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    if self.checkpoint_path(stem).is_ok() {
                        ids.push(stem.to_string());
                    }
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn generate(&self, config_id: &str, seed: u64, store: &Store) -> Result<Vec<SessionGame>> {
        let model = self.model(config_id)?;
        generate_games(&model, &self.dataset, seed, store)
    }
}

/// Whether `dir` holds at least one checkpoint.
pub fn has_checkpoints(dir: &Path) -> bool {
    std::fs::read_dir(dir)
        .map(|entries| {
            entries
                .filter_map(|e| e.ok())
                .any(|e| e.path().extension().and_then(|x| x.to_str()) == Some(CHECKPOINT_EXT))
        })
        .unwrap_or(false)
}
