use std::fs;
use std::path::PathBuf;

use lipvae::data::{held_out_split, intensity_scale, load_idx, write_idx};
use lipvae::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn tiny_train() -> lipvae::data::Dataset {
    load_idx(
        &fixture("tiny-train-images-idx3-ubyte"),
        &fixture("tiny-train-labels-idx1-ubyte"),
    )
    .unwrap()
}

#[test]
fn fixture_shapes_and_scaling() {
    let d = tiny_train();
    assert_eq!((d.len(), d.dim(), d.height, d.width), (48, 36, 6, 6));
    assert_eq!(d.images.get(0, 0), 1.0);
    assert!(d.images.data().iter().all(|p| (0.0..=1.0).contains(p)));
    let bytes = fs::read(fixture("tiny-train-images-idx3-ubyte")).unwrap();
    for (k, &b) in bytes[16..].iter().enumerate() {
        assert_eq!(d.images.data()[k], b as f64 / 255.0);
    }
    assert_eq!(&d.labels[..6], &[0, 1, 2, 0, 1, 2]);
}

#[test]
fn loading_twice_is_identical_and_writing_round_trips() {
    let a = tiny_train();
    assert_eq!(a, tiny_train());
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&a, &ip, &lp).unwrap();
    assert_eq!(
        fs::read(&ip).unwrap(),
        fs::read(fixture("tiny-train-images-idx3-ubyte")).unwrap()
    );
    assert_eq!(
        fs::read(&lp).unwrap(),
        fs::read(fixture("tiny-train-labels-idx1-ubyte")).unwrap()
    );
}

#[test]
fn corrupt_copies_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = fs::read(fixture("tiny-test-images-idx3-ubyte")).unwrap();
    let labels = fixture("tiny-test-labels-idx1-ubyte");
    let path = dir.path().join("images");

    bytes[3] = 0x01;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_idx(&path, &labels),
        Err(Error::Format { .. })
    ));

    bytes[3] = 0x03;
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(
        load_idx(&path, &labels),
        Err(Error::Format { .. })
    ));

    fs::write(&path, &bytes).unwrap();
    let train_labels = fixture("tiny-train-labels-idx1-ubyte");
    assert!(matches!(
        load_idx(&path, &train_labels),
        Err(Error::Format { .. })
    ));
}

#[test]
fn class_split_and_scaling_keep_the_pixel_range() {
    let d = tiny_train();
    let (inl, out) = held_out_split(&d, &[0, 1]);
    assert_eq!(inl.len() + out.len(), d.len());
    assert!(out.labels.iter().all(|&l| l == 2));
    assert!(inl.labels.iter().all(|&l| l < 2));
    let (all, none) = held_out_split(&d, &[0, 1, 2]);
    assert_eq!((all.len(), none.len()), (48, 0));
    let bright = intensity_scale(&d, 15.0).unwrap();
    assert!(bright.images.data().iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(intensity_scale(&d, 1.0).unwrap(), d);
}
