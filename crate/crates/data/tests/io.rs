use clfseg_core::Tensor;
use clfseg_data::io::{self, MaskKind};
use clfseg_data::DataError;
use image::{GrayImage, Luma, Rgb, RgbImage};
use std::path::Path;

fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
}

fn write_rgb(path: &Path, w: u32, h: u32) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_fn(w, h, |x, y| Rgb([(x * 16) as u8, (y * 16) as u8, 200])).save(path).unwrap();
}

#[test]
fn black_and_white_masks() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    write_rgb(&img, 6, 5);
    let black = dir.path().join("black.png");
    let white = dir.path().join("white.png");
    write_gray(&black, 6, 5, |_, _| 0);
    write_gray(&white, 6, 5, |_, _| 255);

    let s = io::load_pair(&img, &black, (5, 6), 3, MaskKind::Binary).unwrap();
    assert_eq!(s.mask, Tensor::zeros(&[5, 6, 1]));
    assert_eq!(s.id, "img");
    assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(s.image.at(&[0, 1, 2]), 200.0 / 255.0);

    let s = io::load_pair(&img, &white, (5, 6), 3, MaskKind::Binary).unwrap();
    assert_eq!(s.mask, Tensor::ones(&[5, 6, 1]));
}

#[test]
fn threshold_is_strictly_above_127() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    let mask = dir.path().join("mask.png");
    write_gray(&img, 2, 1, |_, _| 10);
    write_gray(&mask, 2, 1, |x, _| if x == 0 { 127 } else { 128 });
    let s = io::load_pair(&img, &mask, (1, 2), 1, MaskKind::Binary).unwrap();
    assert_eq!(s.mask.data(), &[0.0, 1.0]);
}

#[test]
fn checkerboard_nearest_upscale() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    let mask = dir.path().join("mask.png");
    write_rgb(&img, 4, 4);
    write_gray(&mask, 4, 4, |x, y| if (x + y) % 2 == 0 { 255 } else { 0 });
    let s = io::load_pair(&img, &mask, (8, 8), 3, MaskKind::Binary).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            let expect = if (x / 2 + y / 2) % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(s.mask.at(&[y, x, 0]), expect, "({y},{x})");
        }
    }
    assert_eq!(s.image.shape(), &[8, 8, 3]);
}

#[test]
fn label_masks_become_one_hot() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    let mask = dir.path().join("mask.png");
    write_gray(&img, 3, 1, |_, _| 0);
    write_gray(&mask, 3, 1, |x, _| x as u8);
    let s = io::load_pair(&img, &mask, (1, 3), 1, MaskKind::Labels { classes: 3 }).unwrap();
    assert_eq!(s.mask.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    let err = io::load_pair(&img, &mask, (1, 3), 1, MaskKind::Labels { classes: 2 }).unwrap_err();
    assert!(matches!(err, DataError::BadLabel { value: 2, classes: 2, .. }));
}

#[test]
fn size_mismatch_names_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    let mask = dir.path().join("a_mask.png");
    write_rgb(&img, 4, 4);
    write_gray(&mask, 3, 4, |_, _| 0);
    let err = io::load_pair(&img, &mask, (4, 4), 3, MaskKind::Binary).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("a.png") && msg.contains("a_mask.png"), "{msg}");
}

#[test]
fn unreadable_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let err = io::load_pair(&missing, &missing, (4, 4), 3, MaskKind::Binary).unwrap_err();
    assert!(err.to_string().contains("nope.png"));

    let garbage = dir.path().join("garbage.png");
    std::fs::write(&garbage, b"not a png").unwrap();
    let err = io::load_pair(&garbage, &garbage, (4, 4), 3, MaskKind::Binary).unwrap_err();
    assert!(matches!(err, DataError::Image { .. }));
}

#[test]
fn loading_is_idempotent_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let samples = clfseg_data::synth_dataset(3, 16, 4, 0.5);
    io::write_dataset(dir.path(), &samples).unwrap();
    let a = io::load_dir(dir.path(), (16, 16), 3, MaskKind::Binary).unwrap();
    let b = io::load_dir(dir.path(), (16, 16), 3, MaskKind::Binary).unwrap();
    assert_eq!(a, b);
    for (orig, loaded) in samples.iter().zip(&a) {
        assert_eq!(orig.id, loaded.id);
        assert_eq!(orig.mask, loaded.mask);
        let err = orig.image.zip_map(&loaded.image, |x, y| (x - y).abs()).unwrap().max_abs();
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn dataset_layout_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    assert!(matches!(
        io::load_dir(dir.path(), (4, 4), 3, MaskKind::Binary),
        Err(DataError::Empty(_))
    ));
    write_rgb(&dir.path().join("images/x.png"), 4, 4);
    assert!(matches!(
        io::load_dir(dir.path(), (4, 4), 3, MaskKind::Binary),
        Err(DataError::MissingMask { .. })
    ));
}
