pub mod fetch;

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use candle_core::{Device, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sketchcomm::assets;
use sketchcomm::data::{self, Dataset, Split};
use sketchcomm::encoders::{EncoderHandle, EncoderKind};
use sketchcomm::game::{self, EncoderConfig, GameConfig, Model};
use sketchcomm::imageio;
use sketchcomm::probe::{self, ProbeReport, PromptSet};
use sketchcomm::raster::{self, LineSet, RasterConfig};

#[derive(Debug, Parser)]
#[command(name = "sketchcomm", version, about = "Sketch-based referential game toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize a line set, or a model's sketch of a photo, to PNG.
    Render(RenderArgs),
    /// Download and verify pretrained encoder weights.
    FetchWeights(FetchWeightsArgs),
    /// Download, verify and decode the STL-10 binaries.
    FetchData(FetchDataArgs),
    /// Train a sender/receiver pair from a JSON config.
    Train(TrainArgs),
    /// Communication rate of a checkpoint on the evaluation split.
    Eval(EvalArgs),
    /// CLIP prompt probe of a checkpoint's sketches.
    Probe(ProbeArgs),
    /// Run the human-receiver study service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// JSON array of line coordinates (x0, y0, x1, y1 per line) in [0, 1].
    #[arg(long, conflicts_with_all = ["checkpoint", "photo"])]
    pub lines: Option<PathBuf>,
    #[arg(long, requires = "photo")]
    pub checkpoint: Option<PathBuf>,
    /// Photo (PNG) for the checkpoint's sender to sketch.
    #[arg(long, requires = "checkpoint")]
    pub photo: Option<PathBuf>,
    #[arg(long, default_value_t = 224)]
    pub resolution: usize,
    /// Stroke width parameter; defaults to the resolution's standard value.
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EncoderChoice {
    Vgg16,
    VitB32,
    All,
}

#[derive(Debug, Args)]
pub struct FetchWeightsArgs {
    #[arg(long, value_enum, default_value_t = EncoderChoice::All)]
    pub encoder: EncoderChoice,
    /// Weight directory; defaults to `$SKETCHCOMM_WEIGHTS`.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    /// Alternative download URL (single encoder only).
    #[arg(long, conflicts_with = "from")]
    pub url: Option<String>,
    /// Install from a local file instead of downloading (single encoder only).
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FetchDataArgs {
    /// Dataset root; defaults to `$SKETCHCOMM_DATA`.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, conflicts_with = "from")]
    pub url: Option<String>,
    /// Install from a local copy of the archive.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Skip building the decoded cache.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 99)]
    pub k: usize,
    #[arg(long, default_value_t = 1000)]
    pub games: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A game count or every image of the split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GameCount {
    All,
    N(usize),
}

impl FromStr for GameCount {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            _ => match s.parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("expected a positive integer or `all`, got {s:?}")),
                Ok(n) => Ok(Self::N(n)),
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "all")]
    pub games: GameCount,
    #[arg(long, default_value_t = 99)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// CLIP ViT-B/32 weights for the probe; defaults to the weight cache.
    #[arg(long)]
    pub probe_weights: Option<PathBuf>,
    /// Also report zero-shot classification of the photos themselves.
    #[arg(long)]
    pub zero_shot: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory of `<config_id>.ckpt` files.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// STL-10 root for the test split; defaults to `$SKETCHCOMM_DATA`.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Serve over this many synthetic images instead of STL-10.
    #[arg(long)]
    pub synthetic: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Render(a) => render(&a),
        Command::FetchWeights(a) => fetch_weights(&a),
        Command::FetchData(a) => fetch_data(&a),
        Command::Train(a) => {
            let outcome = train(&a.config)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
            Ok(())
        }
        Command::Eval(a) => {
            let stats = eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
        Command::Probe(a) => {
            let out = run_probe(&a)?;
            println!("{}", probe::render_table(&[("sketches", &out.report)]));
            if let Some(z) = &out.photo_zero_shot {
                println!(
                    "photos: c(photo)==gt(input) {:.1}%  tp(photo)=='photo' {:.1}%  over {} images",
                    z.class_percent, z.photo_type_percent, z.images
                );
            }
            Ok(())
        }
        Command::Serve(a) => serve(a),
    }
}

fn photo_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (w, h, rgb) = imageio::decode_png_rgb(&bytes)?;
    let mut planar = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        planar.extend(rgb.iter().skip(c).step_by(3).map(|&v| v as f32 / 255.0));
    }
    Ok(Tensor::from_vec(planar, (1, 3, h, w), &Device::Cpu)?)
}

/// Lines the checkpoint's sender draws for a photo.
pub fn sketch_photo(model: &Model, photo: &Path) -> Result<LineSet> {
    let features = model.handle.encode_embedding(&photo_tensor(photo)?)?;
    let coords = game::sketch_coords(model.players(), &features)?;
    Ok(raster::line_sets_from_tensor(&coords)?.remove(0))
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let lines = match (&a.lines, &a.checkpoint, &a.photo) {
        (Some(path), None, None) => {
            let coords: Vec<f64> = serde_json::from_slice(&std::fs::read(path)?)
                .with_context(|| format!("{} is not a JSON array of numbers", path.display()))?;
            LineSet::from_flat(&coords)?
        }
        (None, Some(ckpt), Some(photo)) => sketch_photo(&Model::load(ckpt)?, photo)?,
        _ => bail!("give either --lines, or --checkpoint with --photo"),
    };
    let cfg = match a.sigma2 {
        Some(s) => RasterConfig::new(a.resolution, s)?,
        None => RasterConfig::for_resolution(a.resolution)?,
    };
    let png = raster::rasterize(&lines, &cfg)?.to_png()?;
    std::fs::write(&a.out, png).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn fetch_weights(a: &FetchWeightsArgs) -> Result<()> {
    let kinds: Vec<EncoderKind> = match a.encoder {
        EncoderChoice::Vgg16 => vec![EncoderKind::Vgg16],
        EncoderChoice::VitB32 => vec![EncoderKind::VitB32],
        EncoderChoice::All => vec![EncoderKind::Vgg16, EncoderKind::VitB32],
    };
    if kinds.len() > 1 && (a.url.is_some() || a.from.is_some()) {
        bail!("--url and --from need a single --encoder");
    }
    let dir = a.dir.clone().unwrap_or_else(assets::weights_dir);
    for kind in kinds {
        let asset = assets::weight_asset(kind);
        let (path, digest) = fetch::fetch_weights(asset, &dir, a.url.as_deref(), a.from.as_deref())?;
        println!("{}  {}", digest, path.display());
    }
    Ok(())
}

fn fetch_data(a: &FetchDataArgs) -> Result<()> {
    let root = a.root.clone().unwrap_or_else(data::default_root);
    let digests = fetch::fetch_stl10(&root, a.url.as_deref(), a.from.as_deref(), !a.no_cache)?;
    for (name, digest) in digests {
        println!("{digest}  {name}");
    }
    Ok(())
}

pub fn train(config: &Path) -> Result<game::TrainOutcome> {
    let cfg = GameConfig::from_json_file(config).with_context(|| format!("loading {}", config.display()))?;
    Ok(game::train(&cfg)?)
}

pub fn eval(a: &EvalArgs) -> Result<game::EvalStats> {
    let model = Model::load(&a.checkpoint)?;
    let dataset = model.config.data.load_eval()?;
    Ok(game::evaluate_comm_rate(&model, &dataset, a.k, a.games, a.seed)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShot {
    pub images: usize,
    pub class_percent: f64,
    pub photo_type_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeOutput {
    pub checkpoint: PathBuf,
    pub report: ProbeReport,
    pub photo_zero_shot: Option<ZeroShot>,
}

fn probe_encoder(model: &Model, weights: Option<&Path>) -> Result<EncoderHandle> {
    let mut cfg = EncoderConfig::pretrained(EncoderKind::VitB32);
    cfg.weights = weights.map(Path::to_path_buf);
    let handle = cfg.build()?;
    if handle.same_as(&model.handle) {
        return Ok(model.handle.clone());
    }
    Ok(handle)
}

/// Probes the checkpoint's games and writes the report JSON to `--out`.
pub fn run_probe(a: &ProbeArgs) -> Result<ProbeOutput> {
    let model = Model::load(&a.checkpoint)?;
    let dataset = model.config.data.load_eval()?;
    let probe_handle = probe_encoder(&model, a.probe_weights.as_deref())?;
    let output = probe_with(&model, &dataset, &probe_handle, a)?;
    std::fs::write(&a.out, serde_json::to_vec_pretty(&output)?).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(output)
}

/// The probe with an explicit probe encoder.
pub fn probe_with(model: &Model, dataset: &Dataset, probe_handle: &EncoderHandle, a: &ProbeArgs) -> Result<ProbeOutput> {
    let prompts = PromptSet::new(probe_handle)?;
    let games = match a.games {
        GameCount::All => data::enumerate_test_games(dataset.len(), a.k, a.seed)?,
        GameCount::N(n) => game::eval_games(dataset.len(), a.k, n, a.seed)?,
    };
    let report = probe::probe_games(model, dataset, &games, &prompts, probe_handle, a.seed)?;
    let photo_zero_shot = if a.zero_shot {
        let (class_percent, photo_type_percent, images) = probe::photo_zero_shot(dataset, &prompts, probe_handle)?;
        Some(ZeroShot {
            images,
            class_percent,
            photo_type_percent,
        })
    } else {
        None
    };
    Ok(ProbeOutput {
        checkpoint: a.checkpoint.clone(),
        report,
        photo_zero_shot,
    })
}

fn serve(a: ServeArgs) -> Result<()> {
    let dataset = match a.synthetic {
        Some(n) => data::synthetic_shapes(n, data::SIDE, 0),
        None => {
            let root = a.data.clone().unwrap_or_else(data::default_root);
            data::load_stl10_cached(&root, Split::Test, &root.join("decoded"))?
        }
    };
    let source = sketchcomm_service::CheckpointSource::new(&a.checkpoints, dataset);
    if !sketchcomm_service::source::has_checkpoints(&a.checkpoints) {
        tracing::warn!(dir = %a.checkpoints.display(), "no checkpoints found");
    }
    let store = sketchcomm_service::Store::open(&a.store)?;
    let state = sketchcomm_service::AppState::new(store, source);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(sketchcomm_service::serve(state, SocketAddr::new(a.host, a.port)))?;
    Ok(())
}
