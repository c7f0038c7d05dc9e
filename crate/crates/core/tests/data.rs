use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use sketchcomm::data::{self, Dataset, LabeledImage, Split, CHECKSUM_FILE, RECORD_BYTES};
use sketchcomm::Error;

fn write_split(dir: &Path, split: &str, images: &[LabeledImage]) {
    data::write_stl10_files(
        images,
        &dir.join(format!("{split}_X.bin")),
        &dir.join(format!("{split}_y.bin")),
    )
    .unwrap();
}

#[test]
fn full_size_test_split_decodes_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let synthetic = data::synthetic_shapes(Split::Test.expected_count(), data::SIDE, 1);
    write_split(dir.path(), "test", &synthetic.images);

    let ds = data::load_stl10_split(dir.path(), Split::Test).unwrap();
    assert_eq!(ds.len(), 8000);
    assert_eq!(ds.class_histogram(), [800; 10]);
    assert_eq!(ds.images, synthetic.images);

    let raw = std::fs::read(dir.path().join("test_X.bin")).unwrap();
    for (i, img) in ds.images.iter().enumerate().step_by(97) {
        let rec = &raw[i * RECORD_BYTES..(i + 1) * RECORD_BYTES];
        assert_eq!(data::encode_record(&img.pixels).unwrap(), rec);
    }
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("test_X.bin");
    let y = dir.path().join("test_y.bin");
    std::fs::write(&x, b"").unwrap();
    std::fs::write(&y, b"").unwrap();
    assert!(matches!(data::decode_files(&x, &y, None), Err(Error::Truncated { .. })));

    std::fs::write(&x, vec![0u8; RECORD_BYTES + 5]).unwrap();
    assert!(matches!(data::decode_files(&x, &y, None), Err(Error::Truncated { .. })));

    std::fs::write(&x, vec![0u8; 2 * RECORD_BYTES]).unwrap();
    std::fs::write(&y, [1u8]).unwrap();
    assert!(matches!(data::decode_files(&x, &y, None), Err(Error::SizeMismatch { .. })));

    std::fs::write(&y, [1u8, 2]).unwrap();
    assert_eq!(data::decode_files(&x, &y, None).unwrap().len(), 2);
    assert!(matches!(data::decode_files(&x, &y, Some(8000)), Err(Error::SizeMismatch { .. })));

    std::fs::write(&y, [1u8, 11]).unwrap();
    assert!(data::decode_files(&x, &y, None).is_err());

    assert!(matches!(
        data::load_stl10_split(&dir.path().join("nowhere"), Split::Test),
        Err(Error::MissingAsset(_))
    ));
}

#[test]
fn pinned_checksums_are_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let images = data::synthetic_shapes(20, data::SIDE, 2).images;
    write_split(dir.path(), "test", &images);
    let digest = data::sha256_file(&dir.path().join("test_X.bin")).unwrap();
    let mut pins = BTreeMap::new();
    pins.insert("test_X.bin".to_string(), digest);
    std::fs::write(dir.path().join(CHECKSUM_FILE), serde_json::to_vec(&pins).unwrap()).unwrap();
    // Pinned digest matches, so only the split size is wrong.
    assert!(matches!(
        data::load_stl10_split(dir.path(), Split::Test),
        Err(Error::SizeMismatch { .. })
    ));

    pins.insert("test_X.bin".to_string(), "0".repeat(64));
    std::fs::write(dir.path().join(CHECKSUM_FILE), serde_json::to_vec(&pins).unwrap()).unwrap();
    assert!(matches!(
        data::load_stl10_split(dir.path(), Split::Test),
        Err(Error::ChecksumMismatch { .. })
    ));
}

#[test]
fn decoded_cache_round_trips_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds: Dataset = data::synthetic_shapes(30, data::SIDE, 3);
    ds.split = "test".into();
    data::write_decoded_cache(&ds, dir.path()).unwrap();
    assert!(dir.path().join("test.blob").exists());
    assert!(dir.path().join("test.index.json").exists());
    assert_eq!(data::read_decoded_cache(dir.path(), "test").unwrap().unwrap(), ds);
    assert!(data::read_decoded_cache(dir.path(), "train").unwrap().is_none());

    let blob = dir.path().join("test.blob");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[10] ^= 0xff;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(
        data::read_decoded_cache(dir.path(), "test"),
        Err(Error::ChecksumMismatch { .. })
    ));
}

#[test]
fn cached_loader_fills_the_cache_once() {
    let root = tempfile::tempdir().unwrap();
    let images = data::synthetic_shapes(5000, data::SIDE, 4).images;
    write_split(root.path(), "train", &images);
    let cache = root.path().join("decoded");
    let first = data::load_stl10_cached(root.path(), Split::Train, &cache).unwrap();
    std::fs::remove_file(root.path().join("train_X.bin")).unwrap();
    let second = data::load_stl10_cached(root.path(), Split::Train, &cache).unwrap();
    assert_eq!(first, second);

    let toy = data::toy_split(&second, 1000, 0).unwrap();
    assert_eq!(toy.len(), 1000);
    assert_eq!(toy.class_histogram(), [100; 10]);
}

#[test]
fn test_game_enumeration() {
    let n = 8000;
    let games = data::enumerate_test_games(n, 99, 42).unwrap();
    assert_eq!(games.len(), n);
    let targets: HashSet<usize> = games.iter().map(|g| g.target).collect();
    assert_eq!(targets.len(), n);
    for g in games.iter().step_by(13) {
        assert_eq!(g.pool.len(), 100);
        assert_eq!(g.pool[g.target_index], g.target);
        assert_eq!(g.pool.iter().collect::<HashSet<_>>().len(), 100);
    }
    assert_eq!(games, data::enumerate_test_games(n, 99, 42).unwrap());
    assert_ne!(games, data::enumerate_test_games(n, 99, 43).unwrap());

    let singletons = data::enumerate_test_games(n, 0, 1).unwrap();
    assert!(singletons.iter().all(|g| g.pool == vec![g.target] && g.target_index == 0));
    assert!(data::enumerate_test_games(n, 8000, 1).is_err());
}

/// Checks the real STL-10 test split under `$SKETCHCOMM_DATA`.
#[test]
#[ignore = "requires the STL-10 binaries (sketchcomm fetch-data)"]
fn real_stl10_test_split() {
    let ds = data::load_stl10_split(&data::default_root(), Split::Test).unwrap();
    assert_eq!(ds.len(), 8000);
    assert_eq!(ds.class_histogram(), [800; 10]);
    let raw = std::fs::read(data::binary_dir(&data::default_root()).join("test_X.bin")).unwrap();
    for (i, img) in ds.images.iter().enumerate() {
        assert_eq!(data::encode_record(&img.pixels).unwrap(), &raw[i * RECORD_BYTES..(i + 1) * RECORD_BYTES]);
    }
}
