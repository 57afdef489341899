use std::fs;
use std::path::Path;

use fader::datasets::{
    generate_toy_dataset, iterate_batches, load_image, load_image_dataset, DefectKind, Label, Split, ToySpec,
};
use fader::Error;
use image::{GrayImage, Luma, Rgb, RgbImage};
use tempfile::TempDir;

fn small_spec(seed: u64) -> ToySpec {
    ToySpec {
        n_train_normal: 6,
        n_test_normal: 4,
        n_test_defect: 6,
        seed,
        ..ToySpec::default()
    }
}

fn write_rgb(path: &Path, side: u32, value: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(side, side, Rgb([value, value / 2, 255 - value]))
        .save(path)
        .unwrap();
}

fn write_mask(path: &Path, side: u32) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_fn(side, side, |x, _| Luma([if x < side / 2 { 255 } else { 0 }]))
        .save(path)
        .unwrap();
}

#[test]
fn toy_round_trip_reproduces_counts_and_labels() {
    let dir = TempDir::new().unwrap();
    let spec = small_spec(7);
    let toy = generate_toy_dataset(&spec, dir.path()).unwrap();
    let train = load_image_dataset(dir.path(), Split::Train, (64, 64), true).unwrap();
    let test = load_image_dataset(dir.path(), Split::Test, (64, 64), true).unwrap();
    assert_eq!(train, toy.train);
    assert_eq!(test, toy.test);
    assert_eq!(train.count(Label::Normal), 6);
    assert_eq!(test.count(Label::Normal), 4);
    assert_eq!(test.count(Label::Anomalous), 6);
    train.ensure_normal_only().unwrap();
    assert!(matches!(test.ensure_normal_only(), Err(Error::InvalidTrainingData(_))));

    let budget = spec.max_defect_pixels();
    for (i, e) in test.entries.iter().enumerate() {
        let gt = test.load_gt(i).unwrap();
        let positives = gt.data().iter().filter(|&&v| v).count();
        match e.label {
            Label::Normal => assert_eq!(positives, 0),
            Label::Anomalous => assert!((1..=budget).contains(&positives), "{positives} of {budget}"),
        }
    }
    let manifest = fs::read_to_string(&toy.manifest).unwrap();
    assert!(manifest.contains("seed = 7"));
}

#[test]
fn toy_generation_is_byte_identical_per_seed() {
    let (a, b, c) = (
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
    );
    let ta = generate_toy_dataset(&small_spec(7), a.path()).unwrap();
    let tb = generate_toy_dataset(&small_spec(7), b.path()).unwrap();
    let tc = generate_toy_dataset(&small_spec(8), c.path()).unwrap();
    let mut differs = false;
    for ((ea, eb), ec) in ta.test.entries.iter().zip(&tb.test.entries).zip(&tc.test.entries) {
        let bytes = fs::read(&ea.image_path).unwrap();
        assert_eq!(bytes, fs::read(&eb.image_path).unwrap());
        differs |= bytes != fs::read(&ec.image_path).unwrap();
    }
    assert!(differs);
    assert_eq!(fs::read(&ta.manifest).unwrap(), fs::read(&tb.manifest).unwrap());
}

#[test]
fn intensity_spots_stand_out_from_their_surround() {
    let dir = TempDir::new().unwrap();
    let spec = ToySpec {
        n_train_normal: 1,
        n_test_normal: 1,
        n_test_defect: 12,
        defect_kinds: vec![DefectKind::IntensitySpot],
        ..ToySpec::default()
    };
    let toy = generate_toy_dataset(&spec, dir.path()).unwrap();
    for (i, e) in toy.test.entries.iter().enumerate() {
        if e.label != Label::Anomalous {
            continue;
        }
        let img = toy.test.load_image::<f64>(i).unwrap();
        let gt = toy.test.load_gt(i).unwrap();
        let lum = img.luminance();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for (v, &g) in lum.data().iter().zip(gt.data()) {
            if g {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
        let gap = (inside / n_in as f64 - outside / n_out as f64).abs();
        assert!(gap >= 0.2, "{}: gap {gap}", e.image_path.display());
    }
}

#[test]
fn mvtec_layout_is_indexed_by_directory() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    for i in 0..3 {
        write_rgb(&root.join(format!("train/good/{i:03}.png")), 32, 40 * i as u8);
    }
    for i in 0..2 {
        write_rgb(&root.join(format!("test/good/{i:03}.png")), 32, 100);
        write_rgb(&root.join(format!("test/crack/{i:03}.png")), 32, 200);
        write_mask(&root.join(format!("ground_truth/crack/{i:03}_mask.png")), 32);
    }
    let train = load_image_dataset(root, Split::Train, (16, 16), true).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(train.count(Label::Normal), 3);
    let test = load_image_dataset(root, Split::Test, (16, 16), true).unwrap();
    assert_eq!(test.len(), 4);
    let crack: Vec<_> = test.entries.iter().filter(|e| e.category == "crack").collect();
    assert_eq!(crack.len(), 2);
    assert!(crack.iter().all(|e| e.label == Label::Anomalous && e.gt_path.is_some()));
    let i = test.entries.iter().position(|e| e.category == "crack").unwrap();
    let gt = test.load_gt(i).unwrap();
    assert_eq!(gt.dims(), (16, 16));
    assert!(gt.get(3, 2) && !gt.get(3, 12));
}

#[test]
fn missing_ground_truth_is_strict_or_a_warning() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    write_rgb(&root.join("test/good/000.png"), 16, 10);
    write_rgb(&root.join("test/crack/000.png"), 16, 10);
    match load_image_dataset(root, Split::Test, (16, 16), true) {
        Err(Error::MissingGroundTruth(p)) => assert!(p.ends_with("test/crack/000.png")),
        other => panic!("expected MissingGroundTruth, got {other:?}"),
    }
    let lenient = load_image_dataset(root, Split::Test, (16, 16), false).unwrap();
    assert_eq!(lenient.warnings.len(), 1);
    let i = lenient.entries.iter().position(|e| e.category == "crack").unwrap();
    assert!(matches!(lenient.load_gt(i), Err(Error::MissingGroundTruth(_))));
}

#[test]
fn missing_root_is_not_found() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(
        load_image_dataset(&missing, Split::Train, (16, 16), true),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn load_image_scales_resizes_and_rejects_garbage() {
    let dir = TempDir::new().unwrap();
    let white = dir.path().join("white.png");
    RgbImage::from_pixel(64, 64, Rgb([255, 255, 255])).save(&white).unwrap();
    let img = load_image::<f32>(&white, (32, 32)).unwrap();
    assert_eq!(img.shape(), (32, 32, 3));
    assert!(img.data().iter().all(|&v| v == 1.0));

    let gray = dir.path().join("gray.png");
    GrayImage::from_fn(48, 48, |x, y| Luma([((x * 5 + y * 3) % 256) as u8]))
        .save(&gray)
        .unwrap();
    let img = load_image::<f64>(&gray, (32, 32)).unwrap();
    assert_eq!(img.shape(), (32, 32, 3));
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let garbage = dir.path().join("garbage.png");
    fs::write(&garbage, b"definitely not a png").unwrap();
    assert!(matches!(
        load_image::<f32>(&garbage, (32, 32)),
        Err(Error::Decode { .. })
    ));
}

#[test]
fn batches_cover_everything_in_seeded_order() {
    let b = iterate_batches(10, 4, 3, 0).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    let mut all: Vec<usize> = b.concat();
    all.sort();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_eq!(b, iterate_batches(10, 4, 3, 0).unwrap());
    assert_ne!(b, iterate_batches(10, 4, 3, 1).unwrap());
    let singles = iterate_batches(10, 1, 3, 0).unwrap();
    assert_eq!(singles.len(), 10);
    assert!(iterate_batches(10, 0, 3, 0).is_err());
}
