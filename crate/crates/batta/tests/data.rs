use batta::data::*;
use batta_core::BinaryMask;

fn variance(v: &[f32]) -> f64 {
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / v.len() as f64
}

#[test]
fn generation_is_deterministic_and_prefix_stable() {
    let a = gen_clean(6, 32, 11).unwrap();
    let b = gen_clean(6, 32, 11).unwrap();
    assert_eq!(a, b);
    let prefix = gen_clean(3, 32, 11).unwrap();
    assert_eq!(&a[..3], &prefix[..]);
    assert_ne!(a, gen_clean(6, 32, 12).unwrap());
}

#[test]
fn samples_respect_contracts() {
    for s in gen_clean(40, 32, 3).unwrap() {
        assert_eq!(s.image.len(), 3 * 32 * 32);
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        let frac = s.mask.count() as f64 / (32.0 * 32.0);
        assert!((0.02..=0.4).contains(&frac), "{} foreground fraction {frac}", s.id);
        let b = s.box_prompt().unwrap().boxes[0];
        assert!(b.x0 < b.x1 && b.y0 < b.y1);
        let p = s.point_prompt(1).unwrap().points[0];
        assert!(s.mask.get(p.y as usize, p.x as usize));
    }
}

#[test]
fn generator_rejects_bad_arguments() {
    assert!(gen_clean(0, 32, 0).is_err());
    assert!(gen_clean(2, 4, 0).is_err());
}

#[test]
fn zero_severity_is_identity() {
    let clean = gen_clean(4, 24, 5).unwrap();
    for kind in [ShiftKind::Contrast, ShiftKind::Blur, ShiftKind::Noise, ShiftKind::Invert, ShiftKind::Combo] {
        let out = apply_shift(&clean, &ShiftSpec { kind, severity: 0.0, seed: 1 }).unwrap();
        assert_eq!(out, clean, "{kind:?}");
    }
}

#[test]
fn shifts_never_touch_masks_or_ids() {
    let clean = gen_clean(4, 24, 6).unwrap();
    for kind in [ShiftKind::Contrast, ShiftKind::Blur, ShiftKind::Noise, ShiftKind::Invert, ShiftKind::Combo] {
        let out = apply_shift(&clean, &ShiftSpec { kind, severity: 0.7, seed: 2 }).unwrap();
        for (a, b) in clean.iter().zip(&out) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.id, b.id);
            assert_ne!(a.image, b.image, "{kind:?} left the image unchanged");
            assert!(b.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn full_contrast_shift_shrinks_variance() {
    let clean = gen_clean(3, 32, 7).unwrap();
    let out = apply_shift(&clean, &ShiftSpec { kind: ShiftKind::Contrast, severity: 1.0, seed: 0 }).unwrap();
    for (a, b) in clean.iter().zip(&out) {
        assert!(variance(&b.image) < variance(&a.image));
    }
}

#[test]
fn invert_at_full_severity_flips_pixels() {
    let clean = gen_clean(2, 16, 8).unwrap();
    let out = apply_shift(&clean, &ShiftSpec { kind: ShiftKind::Invert, severity: 1.0, seed: 0 }).unwrap();
    for (a, b) in clean.iter().zip(&out) {
        for (x, y) in a.image.iter().zip(&b.image) {
            assert!((x + y - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn severity_out_of_range_is_rejected() {
    let clean = gen_clean(1, 16, 0).unwrap();
    for severity in [-0.1, 1.5, f64::NAN] {
        assert!(apply_shift(&clean, &ShiftSpec { kind: ShiftKind::Noise, severity, seed: 0 }).is_err());
    }
}

#[test]
fn dihedral_group_properties() {
    let s = &gen_clean(1, 16, 9).unwrap()[0];
    assert_eq!(&dihedral(s, 0), s);
    for code in 0..8u8 {
        let t = dihedral(s, code);
        assert_eq!(t.mask.count(), s.mask.count());
        let mut a = s.image.clone();
        let mut b = t.image.clone();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }
    // flips are involutions
    for code in [2u8, 4, 6, 1] {
        assert_eq!(&dihedral(&dihedral(s, code), code), s);
    }
    let t = dihedral(s, 2);
    assert_eq!(t.pixel(1, 3, 0), s.pixel(1, 3, 15));
    assert_eq!(t.mask.get(5, 2), s.mask.get(5, 13));
}

#[test]
fn benchmark_splits_are_disjoint_and_sized() {
    let cfg = DatasetConfig {
        n_train: 5,
        n_val: 3,
        n_test: 4,
        image_size: 16,
        ..DatasetConfig::default()
    };
    let b = gen_benchmark(&cfg, 1).unwrap();
    assert_eq!((b.train.len(), b.val.len(), b.test.len()), (5, 3, 4));
    assert_ne!(b.train[0].mask, b.val[0].mask);
    assert_ne!(b.train[0].mask, b.test[0].mask);
    let again = gen_benchmark(&cfg, 1).unwrap();
    assert_eq!(b.test, again.test);
    let bad = DatasetConfig { n_test: 0, ..cfg };
    assert!(gen_benchmark(&bad, 1).is_err());
}

#[test]
fn written_benchmark_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_train: 3,
        n_val: 2,
        n_test: 2,
        image_size: 16,
        ..DatasetConfig::default()
    };
    let b = gen_benchmark(&cfg, 4).unwrap();
    let manifest = write_benchmark(dir.path(), &cfg, 4, &b).unwrap();
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(m.splits["test"].shift, Some(cfg.shift));
    assert_eq!(m.splits["train"].ids.len(), 3);
    let files = walk(dir.path());
    assert_eq!(files, 2 * (3 + 2 + 2) + 1);
    let loaded = load_split(&dir.path().join("train"), 16).unwrap();
    for (a, b) in b.train.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        // 8-bit quantisation
        assert!(a.image.iter().zip(&b.image).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
    }
}

fn walk(p: &std::path::Path) -> usize {
    std::fs::read_dir(p)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            if e.file_type().unwrap().is_dir() { walk(&e.path()) } else { 1 }
        })
        .sum()
}

#[test]
fn load_folder_resizes_and_binarises() {
    let dir = tempfile::tempdir().unwrap();
    let (im, mk) = (dir.path().join("images"), dir.path().join("masks"));
    std::fs::create_dir_all(&im).unwrap();
    std::fs::create_dir_all(&mk).unwrap();
    image::RgbImage::from_pixel(32, 32, image::Rgb([255, 0, 51])).save(im.join("b.png")).unwrap();
    let gray = image::GrayImage::from_fn(32, 32, |x, _| image::Luma([if x < 16 { 200 } else { 100 }]));
    gray.save(mk.join("b.png")).unwrap();
    image::RgbImage::new(16, 16).save(im.join("a.png")).unwrap();
    image::GrayImage::new(16, 16).save(mk.join("a.png")).unwrap();
    let s = load_folder(&im, &mk, 16).unwrap();
    assert_eq!(s.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    assert_eq!(s[0].mask.count(), 0);
    assert_eq!(s[1].mask, BinaryMask::from_fn(16, 16, |_, j| j < 8));
    assert!((s[1].pixel(0, 4, 4) - 1.0).abs() < 1e-6);
    assert!((s[1].pixel(2, 4, 4) - 0.2).abs() < 1e-6);
}

#[test]
fn unmatched_stems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (im, mk) = (dir.path().join("images"), dir.path().join("masks"));
    std::fs::create_dir_all(&im).unwrap();
    std::fs::create_dir_all(&mk).unwrap();
    image::RgbImage::new(8, 8).save(im.join("only_image.png")).unwrap();
    image::GrayImage::new(8, 8).save(mk.join("only_mask.png")).unwrap();
    let err = load_folder(&im, &mk, 8).unwrap_err().to_string();
    assert!(err.contains("only_image") && err.contains("only_mask"), "{err}");
    assert!(load_folder(&dir.path().join("missing"), &mk, 8).is_err());
}
