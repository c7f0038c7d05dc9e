//! Parity of the encoders against the PyTorch reference implementations.
//! Fixtures come from `tests/fixtures/make_reference_fixtures.py`.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use serde::Deserialize;
use sketchcomm::encoders::{EncoderHandle, EncoderSpec};

#[derive(Deserialize)]
struct ClipRef {
    image: Vec<f32>,
    embedding: Vec<f32>,
    taps: Vec<Vec<f32>>,
    text: std::collections::BTreeMap<String, Vec<f32>>,
}

#[derive(Deserialize)]
struct VggRef {
    image: Vec<f32>,
    taps: Vec<Vec<f32>>,
}

#[derive(Deserialize)]
struct Reference {
    clip: ClipRef,
    vgg: VggRef,
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn reference() -> Reference {
    let raw = std::fs::read_to_string(fixtures().join("reference_outputs.json")).unwrap();
    serde_json::from_str(&raw).unwrap()
}

fn assert_close(actual: &[f32], expected: &[f32], tol: f32, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!((a - e).abs() <= tol * (1.0 + e.abs()), "{what}[{i}]: {a} vs {e}");
    }
}

#[test]
fn vit_matches_reference() {
    let r = reference().clip;
    let h = EncoderHandle::pretrained(EncoderSpec::tiny_vit(32), fixtures().join("tiny_clip.safetensors")).unwrap();
    let img = Tensor::from_vec(r.image, (1, 3, 32, 32), &Device::Cpu).unwrap();

    let emb = h.encode_embedding(&img).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_close(&emb, &r.embedding, 1e-4, "embedding");

    let stack = h.encode_layers(&img).unwrap();
    assert_eq!(stack.len(), r.taps.len());
    for (i, (layer, expected)) in stack.layers.iter().zip(&r.taps).enumerate() {
        let got = layer.features.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_close(&got, expected, 1e-4, &format!("tap {i}"));
    }
}

#[test]
fn text_tower_matches_reference() {
    let r = reference().clip;
    let h = EncoderHandle::pretrained(EncoderSpec::tiny_vit(32), fixtures().join("tiny_clip.safetensors")).unwrap();
    let prompts: Vec<&String> = r.text.keys().collect();
    let got = h.encode_text(&prompts).unwrap().to_vec2::<f32>().unwrap();
    for (row, prompt) in got.iter().zip(&prompts) {
        assert_close(row, &r.text[*prompt], 1e-4, prompt);
    }
}

#[test]
fn vgg_matches_reference_from_pth() {
    let r = reference().vgg;
    let h = EncoderHandle::pretrained(EncoderSpec::tiny_vgg(16), fixtures().join("tiny_vgg.pth")).unwrap();
    let img = Tensor::from_vec(r.image, (1, 3, 16, 16), &Device::Cpu).unwrap();
    let stack = h.encode_layers(&img).unwrap();
    for (i, (layer, expected)) in stack.layers.iter().zip(&r.taps).enumerate() {
        let got = layer.features.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_close(&got, expected, 1e-4, &format!("stage {i}"));
    }
    let emb = h.encode_embedding(&img).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_close(&emb, r.taps.last().unwrap(), 1e-4, "embedding");
}
