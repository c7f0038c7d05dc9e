//! Pretrained-weight and dataset locations, download URLs and pinned digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::sha256_file;
use crate::encoders::EncoderKind;
use crate::error::{Error, Result};

pub const WEIGHTS_ENV: &str = "SKETCHCOMM_WEIGHTS";
pub const PIN_FILE: &str = "pins.json";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightAsset {
    pub kind: EncoderKind,
    pub file_name: &'static str,
    pub url: &'static str,
    /// Digest prefix published in the file name by the upstream host, if any.
    pub sha256_prefix: Option<&'static str>,
}

pub const VGG16_WEIGHTS: WeightAsset = WeightAsset {
    kind: EncoderKind::Vgg16,
    file_name: "vgg16-397923af.pth",
    url: "https://download.pytorch.org/models/vgg16-397923af.pth",
    sha256_prefix: Some("397923af"),
};

pub const CLIP_B32_WEIGHTS: WeightAsset = WeightAsset {
    kind: EncoderKind::VitB32,
    file_name: "clip-vit-base-patch32.safetensors",
    url: "https://huggingface.co/openai/clip-vit-base-patch32/resolve/main/model.safetensors",
    sha256_prefix: None,
};

pub const STL10_URL: &str = "http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz";
pub const STL10_ARCHIVE: &str = "stl10_binary.tar.gz";
pub const STL10_MD5: &str = "91f7769df0f17e558f3565bffb0c7dfb";

pub fn weight_asset(kind: EncoderKind) -> &'static WeightAsset {
    match kind {
        EncoderKind::Vgg16 => &VGG16_WEIGHTS,
        EncoderKind::VitB32 => &CLIP_B32_WEIGHTS,
    }
}

/// Weight cache directory: `$SKETCHCOMM_WEIGHTS`, else `~/.cache/sketchcomm/weights`.
pub fn weights_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(WEIGHTS_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache/sketchcomm/weights")
}

pub fn default_weights_path(kind: EncoderKind) -> PathBuf {
    weights_dir().join(weight_asset(kind).file_name)
}

fn read_pins(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(PIN_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Records `digest` for `file_name` in the directory's pin file.
pub fn pin_digest(dir: &Path, file_name: &str, digest: &str) -> Result<()> {
    let mut pins = read_pins(dir)?;
    pins.insert(file_name.to_string(), digest.to_string());
    std::fs::create_dir_all(dir)?;
    crate::data::write_atomic(&dir.join(PIN_FILE), &serde_json::to_vec_pretty(&pins)?)
}

/// Checks a weight file against the upstream digest prefix and any pinned digest.
/// Returns the file's SHA-256.
pub fn verify_weights(path: &Path, asset: &WeightAsset) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingAsset(format!(
            "{} weights not found at {}; run `sketchcomm fetch-weights` or set {WEIGHTS_ENV}",
            asset.file_name,
            path.display()
        )));
    }
    let actual = sha256_file(path)?;
    if let Some(prefix) = asset.sha256_prefix {
        if !actual.starts_with(prefix) {
            return Err(Error::ChecksumMismatch {
                path: path.to_path_buf(),
                expected: format!("{prefix}…"),
                actual,
            });
        }
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if let Some(expected) = read_pins(dir)?.get(name) {
        if *expected != actual {
            return Err(Error::ChecksumMismatch {
                path: path.to_path_buf(),
                expected: expected.clone(),
                actual,
            });
        }
    }
    Ok(actual)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_digest_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CLIP_B32_WEIGHTS.file_name);
        std::fs::write(&path, b"weights").unwrap();
        let digest = verify_weights(&path, &CLIP_B32_WEIGHTS).unwrap();
        pin_digest(dir.path(), CLIP_B32_WEIGHTS.file_name, &digest).unwrap();
        assert_eq!(verify_weights(&path, &CLIP_B32_WEIGHTS).unwrap(), digest);
        std::fs::write(&path, b"tampered").unwrap();
        assert!(matches!(
            verify_weights(&path, &CLIP_B32_WEIGHTS),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn prefix_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(VGG16_WEIGHTS.file_name);
        std::fs::write(&path, b"not vgg").unwrap();
        assert!(matches!(
            verify_weights(&path, &VGG16_WEIGHTS),
            Err(Error::ChecksumMismatch { .. })
        ));
        assert!(matches!(
            verify_weights(&dir.path().join("absent.pth"), &VGG16_WEIGHTS),
            Err(Error::MissingAsset(_))
        ));
    }
}
