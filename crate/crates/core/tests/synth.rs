use std::fs;

use dmlseg::netpbm;
use dmlseg::synth::*;
use dmlseg::Error;

fn small_spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        size_min: 6,
        size_max: 14,
        ..SceneSpec::default()
    }
}

#[test]
fn corpus_round_trip_is_pixel_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let written = write_corpus(&spec, 6, 4, dir.path()).unwrap();
    let read = read_corpus(dir.path()).unwrap();
    assert_eq!(read, written);
    let (train, val) = generate_samples(&spec, 6, 4).unwrap();
    assert_eq!(read.load(Split::Train).unwrap(), train);
    assert_eq!(read.load(Split::Val).unwrap(), val);
    read.verify_regeneration().unwrap();
}

#[test]
fn missing_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&small_spec(), 3, 1, dir.path()).unwrap();
    fs::remove_file(dir.path().join("images/train_00001.ppm")).unwrap();
    let err = read_corpus(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("images/train_00001.ppm"), "{err}");
}

#[test]
fn tampered_file_fails_hash() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&small_spec(), 3, 1, dir.path()).unwrap();
    let path = dir.path().join("masks/val_00000.pgm");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    let err = read_corpus(dir.path()).unwrap_err();
    assert!(err.to_string().contains("hash mismatch"), "{err}");
}

#[test]
fn corrupt_manifest_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&small_spec(), 2, 1, dir.path()).unwrap();
    let path = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("n_train = 2", "n_train = 5");
    fs::write(&path, text).unwrap();
    assert!(matches!(read_corpus(dir.path()), Err(Error::Data(_))));
    fs::write(&path, "garbage without structure\n").unwrap();
    assert!(matches!(read_corpus(dir.path()), Err(Error::Data(_))));
}

#[test]
fn regeneration_detects_a_different_generator() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(&small_spec(), 3, 0, dir.path()).unwrap();
    // overwrite one image with another scene's pixels and refresh the hash
    let other = generate_scene(&small_spec(), 99).unwrap();
    netpbm::write_ppm(&dir.path().join("images/train_00002.ppm"), &other.image).unwrap();
    let mut tampered = corpus.clone();
    tampered.content_hash.clear();
    assert!(tampered.verify_regeneration().is_err());
}

#[test]
fn every_class_is_common_enough() {
    check_class_balance(&SceneSpec::default(), 500).unwrap();
}

#[test]
fn pools_share_appearance() {
    let spec = SceneSpec::default();
    let (a, b) = (&spec.pools[0], &spec.pools[1]);
    for (x, y) in a.iter().zip(b) {
        assert_eq!(spec.base_color(*x), spec.base_color(*y));
    }
    assert_ne!(spec.background_color(0), spec.background_color(1));
}

#[test]
fn image_tensor_scales_to_unit_range() {
    let scene = generate_scene(&small_spec(), 0).unwrap();
    let t = image_tensor::<f32>(&[&scene.image]).unwrap();
    assert_eq!(t.shape().dims(), [1, 3, 32, 32]);
    assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let [r, g, b] = scene.image.get(5, 7);
    assert_eq!(t.at(0, 0, 5, 7), r as f32 / 255.0);
    assert_eq!(t.at(0, 1, 5, 7), g as f32 / 255.0);
    assert_eq!(t.at(0, 2, 5, 7), b as f32 / 255.0);
}
