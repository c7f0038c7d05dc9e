use std::io::Write;
use std::path::Path;

use clap::Parser;
use serde_json::json;

use sketchcomm::assets::{CLIP_B32_WEIGHTS, PIN_FILE, VGG16_WEIGHTS};
use sketchcomm::data::{self, CHECKSUM_FILE};
use sketchcomm::encoders::{EncoderHandle, EncoderSpec};
use sketchcomm::game::{self, Model};
use sketchcomm::imageio;
use sketchcomm_cli::{fetch, Cli, Command, GameCount};

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("sketchcomm").chain(args.iter().copied())).unwrap()
}

fn config_json(out: &Path, steps: u64, loss: &str) -> serde_json::Value {
    json!({
        "seed": 3,
        "encoder": {"kind": "vit-b32", "random_seed": 5, "spec": EncoderSpec::tiny_vit(32)},
        "data": {"source": "synthetic", "train": 24, "eval": 30, "side": 32, "seed": 4},
        "k": 4,
        "batch_size": 4,
        "steps": steps,
        "lr": 1e-3,
        "loss": {"kind": loss, "lambda": 0.5},
        "aug": {"count": 2, "perspective_scale": 0.5, "crop_min": 0.7},
        "sender_hidden": [16, 16],
        "eval": {"every": 2, "games": 20, "seed": 1},
        "output_dir": out,
    })
}

#[test]
fn game_counts_parse() {
    assert_eq!("all".parse::<GameCount>().unwrap(), GameCount::All);
    assert_eq!("12".parse::<GameCount>().unwrap(), GameCount::N(12));
    assert!("0".parse::<GameCount>().is_err());
    assert!("some".parse::<GameCount>().is_err());
    let cli = parse(&["probe", "--checkpoint", "m.ckpt", "--games", "all", "--seed", "1", "--out", "r.json"]);
    assert!(matches!(cli.command, Command::Probe(p) if p.games == GameCount::All && p.k == 99));
    let cli = parse(&["serve", "--checkpoints", "c", "--port", "9000", "--store", "s"]);
    assert!(matches!(cli.command, Command::Serve(s) if s.port == 9000));
    assert!(Cli::try_parse_from(["sketchcomm", "render", "--lines", "l.json", "--checkpoint", "m", "--out", "o.png"]).is_err());
}

#[test]
fn render_lines_to_png() {
    let dir = tempfile::tempdir().unwrap();
    let lines = dir.path().join("lines.json");
    let coords: Vec<f64> = (0..80).map(|i| (i * 37 % 100) as f64 / 100.0).collect();
    std::fs::write(&lines, serde_json::to_vec(&coords).unwrap()).unwrap();
    let out = dir.path().join("sketch.png");
    let (l, o) = (lines.to_str().unwrap(), out.to_str().unwrap());
    sketchcomm_cli::run(parse(&["render", "--lines", l, "--resolution", "64", "--out", o])).unwrap();
    let (w, h, rgb) = imageio::decode_png_rgb(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!((w, h), (64, 64));
    assert!(rgb.iter().any(|&v| v < 128) && rgb.iter().any(|&v| v > 250));

    std::fs::write(&lines, b"[0.1, 0.2, 0.3]").unwrap();
    assert!(sketchcomm_cli::run(parse(&["render", "--lines", l, "--out", o])).is_err());
}

#[test]
fn clip_weights_are_pinned_on_first_install() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("download.safetensors");
    std::fs::write(&src, b"first").unwrap();
    let weights = dir.path().join("weights");
    let (path, digest) = fetch::install_weights(&src, &weights, &CLIP_B32_WEIGHTS).unwrap();
    assert_eq!(path, weights.join(CLIP_B32_WEIGHTS.file_name));
    let pins: serde_json::Value = serde_json::from_slice(&std::fs::read(weights.join(PIN_FILE)).unwrap()).unwrap();
    assert_eq!(pins[CLIP_B32_WEIGHTS.file_name], digest);
    assert_eq!(fetch::fetch_weights(&CLIP_B32_WEIGHTS, &weights, Some("http://127.0.0.1:9/unused"), None).unwrap().1, digest);

    std::fs::write(&src, b"second").unwrap();
    assert!(fetch::install_weights(&src, &weights, &CLIP_B32_WEIGHTS).is_err());

    std::fs::write(&src, b"not the published vgg").unwrap();
    assert!(fetch::install_weights(&src, &weights, &VGG16_WEIGHTS).is_err());
}

fn write_archive(path: &Path, members: &[(&str, Vec<u8>)]) {
    let gz = flate2::write::GzEncoder::new(std::fs::File::create(path).unwrap(), flate2::Compression::fast());
    let mut tar = tar::Builder::new(gz);
    for (name, bytes) in members {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        tar.append_data(&mut header, format!("stl10_binary/{name}"), bytes.as_slice()).unwrap();
    }
    tar.into_inner().unwrap().finish().unwrap().flush().unwrap();
}

fn split_members(seed: u64) -> Vec<(&'static str, Vec<u8>)> {
    let mut members = Vec::new();
    for (split, n) in [("train", 6), ("test", 4)] {
        let ds = data::synthetic_shapes(n, data::SIDE, seed);
        let x: Vec<u8> = ds.images.iter().flat_map(|i| data::encode_record(&i.pixels).unwrap()).collect();
        let y: Vec<u8> = ds.images.iter().map(|i| i.label + 1).collect();
        members.push((if split == "train" { "train_X.bin" } else { "test_X.bin" }, x));
        members.push((if split == "train" { "train_y.bin" } else { "test_y.bin" }, y));
    }
    members.push(("unlabeled_X.bin", vec![0; 16]));
    members
}

#[test]
fn archive_install_checks_md5_and_pins_digests() {
    let dir = tempfile::tempdir().unwrap();
    let archive = dir.path().join("stl10_binary.tar.gz");
    write_archive(&archive, &split_members(1));
    let md5 = fetch::md5_file(&archive).unwrap();
    let root = dir.path().join("stl10");

    assert!(fetch::install_stl10_archive(&archive, &root, &"0".repeat(32), false).is_err());
    let digests = fetch::install_stl10_archive(&archive, &root, &md5, false).unwrap();
    assert_eq!(digests.len(), 4);
    let bin = root.join("stl10_binary");
    assert!(!bin.join("unlabeled_X.bin").exists());
    let pinned: std::collections::BTreeMap<String, String> =
        serde_json::from_slice(&std::fs::read(bin.join(CHECKSUM_FILE)).unwrap()).unwrap();
    assert_eq!(pinned, digests);
    let decoded = data::decode_files(&bin.join("test_X.bin"), &bin.join("test_y.bin"), None).unwrap();
    assert_eq!(decoded, data::synthetic_shapes(4, data::SIDE, 1).images);

    // Different content under the same names is caught by the pins.
    let other = dir.path().join("other.tar.gz");
    write_archive(&other, &split_members(2));
    let md5 = fetch::md5_file(&other).unwrap();
    assert!(fetch::install_stl10_archive(&other, &root, &md5, false).is_err());
}

#[test]
fn train_eval_render_and_probe_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, serde_json::to_vec_pretty(&config_json(&out, 4, "game+clip")).unwrap()).unwrap();
    sketchcomm_cli::run(parse(&["train", "--config", cfg.to_str().unwrap()])).unwrap();

    let metrics = game::read_metrics(&out.join(game::METRICS_FILE)).unwrap();
    assert!(metrics.iter().any(|m| m.step == 4));
    let line = std::fs::read_to_string(out.join(game::METRICS_FILE)).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "comm_rate", "wallclock"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}");
    }

    let ckpt = out.join(game::CHECKPOINT_DIR).join(game::LATEST_CHECKPOINT);
    let c = ckpt.to_str().unwrap();
    let args = |games: &str, seed: &str| match parse(&["eval", "--checkpoint", c, "--k", "4", "--games", games, "--seed", seed]).command {
        Command::Eval(a) => a,
        _ => unreachable!(),
    };
    let a = sketchcomm_cli::eval(&args("25", "2")).unwrap();
    assert_eq!(a.games, 25);
    assert_eq!(a, sketchcomm_cli::eval(&args("25", "2")).unwrap());

    let photo = dir.path().join("photo.png");
    let img = &data::synthetic_shapes(1, 32, 9).images[0];
    std::fs::write(&photo, imageio::encode_rgb_png(32, 32, &img.pixels).unwrap()).unwrap();
    let png = dir.path().join("sketch.png");
    sketchcomm_cli::run(parse(&[
        "render", "--checkpoint", c, "--photo", photo.to_str().unwrap(), "--out", png.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(imageio::decode_png_rgb(&std::fs::read(&png).unwrap()).unwrap().0, 224);

    // The probe needs CLIP weights; without them it fails before doing any work.
    let report = dir.path().join("report.json");
    let missing = dir.path().join("absent.safetensors");
    let probe_args = |extra: &[&str]| {
        let mut v = vec!["probe", "--checkpoint", c, "--k", "4", "--seed", "3", "--out", report.to_str().unwrap()];
        v.extend_from_slice(extra);
        match parse(&v).command {
            Command::Probe(p) => p,
            _ => unreachable!(),
        }
    };
    assert!(sketchcomm_cli::run_probe(&probe_args(&["--probe-weights", missing.to_str().unwrap()])).is_err());
    assert!(!report.exists());

    let model = Model::load(&ckpt).unwrap();
    let eval_set = model.config.data.load_eval().unwrap();
    let probe = EncoderHandle::random(EncoderSpec::tiny_vit(32), 8).unwrap();
    let all = sketchcomm_cli::probe_with(&model, &eval_set, &probe, &probe_args(&["--games", "all", "--zero-shot"])).unwrap();
    assert_eq!(all.report.games, 30);
    assert_eq!(all.photo_zero_shot.as_ref().unwrap().images, 30);
    let some = sketchcomm_cli::probe_with(&model, &eval_set, &probe, &probe_args(&["--games", "30"])).unwrap();
    assert_eq!(some.report, all.report);
}
