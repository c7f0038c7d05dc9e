//! Downloading and installing pretrained weights and the STL-10 binaries.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use md5::{Digest, Md5};
use sketchcomm::assets::{self, WeightAsset};
use sketchcomm::data::{self, Split, CHECKSUM_FILE};

/// Extracted archive members; the unlabeled split is not used and is skipped.
const STL10_MEMBERS: [&str; 5] = ["train_X.bin", "train_y.bin", "test_X.bin", "test_y.bin", "class_names.txt"];

/// Streams `url` to `dest` through a temporary file.
pub fn download(url: &str, dest: &Path) -> Result<()> {
    if let Some(dir) = dest.parent() {
        std::fs::create_dir_all(dir)?;
    }
    tracing::info!(%url, dest = %dest.display(), "downloading");
    let mut resp = reqwest::blocking::Client::builder()
        .timeout(None)
        .build()?
        .get(url)
        .send()
        .and_then(|r| r.error_for_status())
        .with_context(|| format!("downloading {url}"))?;
    let part = dest.with_extension("part");
    let mut out = File::create(&part)?;
    std::io::copy(&mut resp, &mut out).with_context(|| format!("writing {}", part.display()))?;
    out.sync_all()?;
    std::fs::rename(&part, dest)?;
    Ok(())
}

pub fn md5_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut h = Md5::new();
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

/// Places a weight file in `dir`, verifies it, and pins its digest when the
/// upstream host publishes none. Returns the installed path and its SHA-256.
pub fn install_weights(src: &Path, dir: &Path, asset: &WeightAsset) -> Result<(PathBuf, String)> {
    std::fs::create_dir_all(dir)?;
    let dest = dir.join(asset.file_name);
    if src != dest {
        let tmp = dest.with_extension("part");
        std::fs::copy(src, &tmp).with_context(|| format!("copying {}", src.display()))?;
        std::fs::rename(&tmp, &dest)?;
    }
    let digest = assets::verify_weights(&dest, asset)?;
    if asset.sha256_prefix.is_none() && !pins(dir)?.contains_key(asset.file_name) {
        assets::pin_digest(dir, asset.file_name, &digest)?;
        tracing::info!(file = asset.file_name, %digest, "pinned digest");
    }
    Ok((dest, digest))
}

fn pins(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(assets::PIN_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Fetches one encoder's weights into `dir`, from `from` when given, otherwise
/// from `url` (default: the upstream URL). An already-valid file is kept.
pub fn fetch_weights(asset: &WeightAsset, dir: &Path, url: Option<&str>, from: Option<&Path>) -> Result<(PathBuf, String)> {
    let dest = dir.join(asset.file_name);
    if let Some(src) = from {
        return install_weights(src, dir, asset);
    }
    if dest.exists() {
        match assets::verify_weights(&dest, asset) {
            Ok(_) => return install_weights(&dest, dir, asset),
            Err(e) => tracing::warn!(error = %e, "existing weights rejected; downloading again"),
        }
    }
    download(url.unwrap_or(asset.url), &dest)?;
    install_weights(&dest, dir, asset)
}

/// Verifies the STL-10 archive, extracts the labelled splits into `root`, pins
/// their SHA-256 digests in `checksums.json` and, with `cache`, fills the decoded
/// cache under `<root>/decoded`.
pub fn install_stl10_archive(archive: &Path, root: &Path, expected_md5: &str, cache: bool) -> Result<BTreeMap<String, String>> {
    let actual = md5_file(archive)?;
    if actual != expected_md5 {
        bail!("{}: md5 {actual} does not match the published {expected_md5}", archive.display());
    }
    let dir = root.join("stl10_binary");
    std::fs::create_dir_all(&dir)?;
    let gz = flate2::read::GzDecoder::new(BufReader::new(File::open(archive)?));
    let mut tar = tar::Archive::new(gz);
    let mut found = Vec::new();
    for entry in tar.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            continue;
        };
        if !STL10_MEMBERS.contains(&name.as_str()) {
            continue;
        }
        let tmp = dir.join(format!("{name}.part"));
        let mut out = File::create(&tmp)?;
        std::io::copy(&mut entry, &mut out)?;
        out.flush()?;
        out.sync_all()?;
        std::fs::rename(&tmp, dir.join(&name))?;
        found.push(name);
    }
    let mut digests = BTreeMap::new();
    for name in STL10_MEMBERS.iter().filter(|n| n.ends_with(".bin")) {
        if !found.iter().any(|f| f == name) {
            bail!("{} has no {name}", archive.display());
        }
        digests.insert(name.to_string(), data::sha256_file(&dir.join(name))?);
    }
    let manifest = dir.join(CHECKSUM_FILE);
    if manifest.exists() {
        let pinned: BTreeMap<String, String> = serde_json::from_slice(&std::fs::read(&manifest)?)?;
        for (name, digest) in &digests {
            if let Some(expected) = pinned.get(name) {
                if expected != digest {
                    bail!("{name}: sha256 {digest} does not match the pinned {expected}");
                }
            }
        }
    } else {
        let tmp = manifest.with_extension("part");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&digests)?)?;
        std::fs::rename(&tmp, &manifest)?;
    }
    if cache {
        for split in [Split::Train, Split::Test] {
            let ds = data::load_stl10_cached(root, split, &root.join("decoded"))?;
            tracing::info!(split = split.name(), images = ds.len(), "decoded");
        }
    }
    Ok(digests)
}

/// Downloads (unless `from` is given) and installs STL-10 under `root`.
pub fn fetch_stl10(root: &Path, url: Option<&str>, from: Option<&Path>, cache: bool) -> Result<BTreeMap<String, String>> {
    let archive = match from {
        Some(p) => p.to_path_buf(),
        None => {
            let dest = root.join(assets::STL10_ARCHIVE);
            if !dest.exists() || md5_file(&dest)? != assets::STL10_MD5 {
                download(url.unwrap_or(assets::STL10_URL), &dest)?;
            }
            dest
        }
    };
    install_stl10_archive(&archive, root, assets::STL10_MD5, cache)
}
