//! Synthetic lesion benchmark, domain shifts, folder IO and prompt generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use batta_core::{minimal_box, sample_point, BinaryMask, PromptSet};
use candle_core::{Device, Tensor};
use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One image/mask pair. `image` is channel-major `3 x size x size` in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn pixel(&self, c: usize, i: usize, j: usize) -> f32 {
        self.image[(c * self.size + i) * self.size + j]
    }

    /// Minimal covering box of the ground-truth mask.
    pub fn box_prompt(&self) -> Result<PromptSet> {
        Ok(PromptSet::from_box(minimal_box(&self.mask)?))
    }

    pub fn point_prompt(&self, seed: u64) -> Result<PromptSet> {
        Ok(PromptSet::from_point(sample_point(&self.mask, seed)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Contrast,
    Blur,
    Noise,
    Invert,
    Combo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(invalid(format!("shift severity {} outside [0, 1]", self.severity)));
        }
        Ok(())
    }
}

/// Largest noise standard deviation, reached at severity 1.
pub const MAX_NOISE_STD: f64 = 0.3;
/// Largest blur standard deviation in pixels, reached at severity 1.
pub const MAX_BLUR_SIGMA: f64 = 2.5;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Lesion shape: rotated ellipse with a few low-frequency boundary harmonics.
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, s: f64) -> Self {
        let mut harmonics = [(0.0, 0.0); 3];
        for h in &mut harmonics {
            *h = (rng.random_range(0.0..0.12), rng.random_range(0.0..std::f64::consts::TAU));
        }
        Self {
            cx: rng.random_range(0.25 * s..0.75 * s),
            cy: rng.random_range(0.25 * s..0.75 * s),
            a: rng.random_range(0.08 * s..0.3 * s),
            b: rng.random_range(0.08 * s..0.3 * s),
            theta: rng.random_range(0.0..std::f64::consts::PI),
            harmonics,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let phi = v.atan2(u);
        let radius = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(k, (amp, phase))| amp * ((k as f64 + 2.0) * phi + phase).cos())
                .sum::<f64>();
        (u * u + v * v).sqrt() < radius
    }
}

fn gen_one(seed: u64, index: usize, size: usize) -> Sample {
    let mut rng = stream_rng(seed, index as u64);
    let s = size as f64;
    let mask = loop {
        let blob = Blob::random(&mut rng, s);
        let mask = BinaryMask::from_fn(size, size, |i, j| blob.contains(j as f64 + 0.5, i as f64 + 0.5));
        let frac = mask.count() as f64 / (s * s);
        if (0.02..=0.4).contains(&frac) {
            break mask;
        }
    };
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let bright = rng.random_bool(0.5);
    let delta: [f64; 3] = std::array::from_fn(|_| {
        let d = rng.random_range(0.2..0.35);
        if bright { d } else { -d }
    });
    // background texture: a few random plane waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let grain = Normal::new(0.0, 0.02).expect("valid std");
    let mut image = vec![0f32; 3 * size * size];
    for i in 0..size {
        for j in 0..size {
            let tex: f64 = waves
                .iter()
                .map(|(kx, ky, ph, amp)| amp * (kx * j as f64 + ky * i as f64 + ph).sin())
                .sum();
            let inside = mask.get(i, j);
            for c in 0..3 {
                let mut v = base[c] + tex + grain.sample(&mut rng);
                if inside {
                    v += delta[c];
                }
                image[(c * size + i) * size + j] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample {
        id: format!("s{index:05}"),
        size,
        image,
        mask,
    }
}

/// `n` clean samples; sample `k` depends only on (`seed`, `k`).
pub fn gen_clean(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n < 1 {
        return Err(invalid("n must be at least 1"));
    }
    if size < 8 {
        return Err(invalid("image size must be at least 8"));
    }
    Ok((0..n).map(|k| gen_one(seed, k, size)).collect())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

fn blur_plane(plane: &mut [f32], size: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clampi = |v: i64| v.clamp(0, size as i64 - 1) as usize;
    let mut tmp = vec![0f32; plane.len()];
    for i in 0..size {
        for j in 0..size {
            let acc: f64 = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * plane[i * size + clampi(j as i64 + t as i64 - r)] as f64)
                .sum();
            tmp[i * size + j] = acc as f32;
        }
    }
    for i in 0..size {
        for j in 0..size {
            let acc: f64 = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[clampi(i as i64 + t as i64 - r) * size + j] as f64)
                .sum();
            plane[i * size + j] = acc as f32;
        }
    }
}

fn shift_image(image: &mut [f32], size: usize, kind: ShiftKind, sev: f64, rng: &mut ChaCha8Rng) {
    match kind {
        ShiftKind::Contrast => {
            for v in image.iter_mut() {
                *v = (0.5 + (*v as f64 - 0.5) * (1.0 - sev)) as f32;
            }
        }
        ShiftKind::Blur => {
            if sev > 0.0 {
                for plane in image.chunks_mut(size * size) {
                    blur_plane(plane, size, MAX_BLUR_SIGMA * sev);
                }
            }
        }
        ShiftKind::Noise => {
            if sev > 0.0 {
                let n = Normal::new(0.0, MAX_NOISE_STD * sev).expect("valid std");
                for v in image.iter_mut() {
                    *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
                }
            }
        }
        ShiftKind::Invert => {
            for v in image.iter_mut() {
                *v = (*v as f64 * (1.0 - sev) + (1.0 - *v as f64) * sev) as f32;
            }
        }
        ShiftKind::Combo => {
            shift_image(image, size, ShiftKind::Contrast, sev, rng);
            shift_image(image, size, ShiftKind::Noise, sev, rng);
        }
    }
}

/// Shifted copies; masks and ids are untouched.
pub fn apply_shift(samples: &[Sample], spec: &ShiftSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok(samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut out = s.clone();
            let mut rng = stream_rng(spec.seed, k as u64);
            shift_image(&mut out.image, s.size, spec.kind, spec.severity, &mut rng);
            out
        })
        .collect())
}

/// One of the eight symmetries of the square: optional transpose, then
/// optional horizontal and vertical flips (bits 0, 1, 2 of `code`).
pub fn dihedral(sample: &Sample, code: u8) -> Sample {
    let n = sample.size;
    let src = |i: usize, j: usize| -> (usize, usize) {
        let (mut i, mut j) = (i, j);
        if code & 4 != 0 {
            i = n - 1 - i;
        }
        if code & 2 != 0 {
            j = n - 1 - j;
        }
        if code & 1 != 0 {
            (j, i)
        } else {
            (i, j)
        }
    };
    let mut image = vec![0f32; sample.image.len()];
    for c in 0..3 {
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = src(i, j);
                image[(c * n + i) * n + j] = sample.pixel(c, si, sj);
            }
        }
    }
    let mask = BinaryMask::from_fn(n, n, |i, j| {
        let (si, sj) = src(i, j);
        sample.mask.get(si, sj)
    });
    Sample {
        id: sample.id.clone(),
        size: n,
        image,
        mask,
    }
}

/// `B x 3 x S x S` image batch.
pub fn image_batch(samples: &[&Sample]) -> Result<Tensor> {
    let s = samples.first().ok_or_else(|| invalid("empty batch"))?.size;
    let data: Vec<f32> = samples.iter().flat_map(|x| x.image.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (samples.len(), 3, s, s), &Device::Cpu)?)
}

/// `B x 1 x S x S` mask batch of 0/1 values.
pub fn mask_batch(samples: &[&Sample]) -> Result<Tensor> {
    let s = samples.first().ok_or_else(|| invalid("empty batch"))?.size;
    let data: Vec<f32> = samples
        .iter()
        .flat_map(|x| x.mask.as_slice().iter().map(|&v| v as u8 as f32))
        .collect();
    Ok(Tensor::from_vec(data, (samples.len(), 1, s, s), &Device::Cpu)?)
}

pub fn to_rgb(sample: &Sample) -> RgbImage {
    let s = sample.size as u32;
    RgbImage::from_fn(s, s, |x, y| {
        let px = |c| (sample.pixel(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `{dir}/images/{id}.png` and `{dir}/masks/{id}.png` (0/255).
pub fn write_folder(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        save_png(&to_rgb(s), &dir.join("images").join(format!("{}.png", s.id)))?;
        save_png(&mask_to_gray(&s.mask), &dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads name-matched image/mask pairs, sorted by stem. Images are resized to
/// `size` and scaled to [0, 1]; masks are binarised at 127.
pub fn load_folder(images_dir: &Path, masks_dir: &Path, size: usize) -> Result<Vec<Sample>> {
    let images = png_stems(images_dir)?;
    let masks = png_stems(masks_dir)?;
    let unmatched: Vec<&str> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(invalid(format!("unmatched image/mask stems: {}", unmatched.join(", "))));
    }
    let s = size as u32;
    let mut out = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let mut rgb = open_image(img_path)?.to_rgb8();
        if rgb.dimensions() != (s, s) {
            rgb = image::imageops::resize(&rgb, s, s, image::imageops::FilterType::Triangle);
        }
        let mut gray = open_image(&masks[stem])?.to_luma8();
        if gray.dimensions() != (s, s) {
            gray = image::imageops::resize(&gray, s, s, image::imageops::FilterType::Nearest);
        }
        let mut image = vec![0f32; 3 * size * size];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                image[(c * size + y as usize) * size + x as usize] = p[c] as f32 / 255.0;
            }
        }
        let mask = BinaryMask::from_fn(size, size, |i, j| gray.get_pixel(j as u32, i as u32)[0] > 127);
        out.push(Sample {
            id: stem.clone(),
            size,
            image,
            mask,
        });
    }
    Ok(out)
}

pub fn load_split(root: &Path, size: usize) -> Result<Vec<Sample>> {
    load_folder(&root.join("images"), &root.join("masks"), size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub ids: Vec<String>,
    pub shift: Option<ShiftSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub splits: BTreeMap<String, SplitManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub shift: ShiftSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 50,
            n_test: 100,
            image_size: 64,
            shift: ShiftSpec {
                kind: ShiftKind::Combo,
                severity: 0.6,
                seed: 0,
            },
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_val < 1 || self.n_test < 1 {
            return Err(invalid("every split needs at least one sample"));
        }
        if self.image_size < 8 {
            return Err(invalid("image size must be at least 8"));
        }
        self.shift.validate()
    }
}

/// The three benchmark splits. Train and val are clean; test is shifted.
/// Each split draws from its own seed stream so the splits never overlap.
pub struct Benchmark {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn gen_benchmark(cfg: &DatasetConfig, seed: u64) -> Result<Benchmark> {
    cfg.validate()?;
    let split_seed = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    let train = gen_clean(cfg.n_train, cfg.image_size, split_seed(1))?;
    let val = gen_clean(cfg.n_val, cfg.image_size, split_seed(2))?;
    let clean_test = gen_clean(cfg.n_test, cfg.image_size, split_seed(3))?;
    let shift = ShiftSpec {
        seed: split_seed(cfg.shift.seed.wrapping_add(4)),
        ..cfg.shift
    };
    let test = apply_shift(&clean_test, &shift)?;
    Ok(Benchmark { train, val, test })
}

/// Writes `{root}/{train,val,test}/{images,masks}` and `manifest.json`.
pub fn write_benchmark(root: &Path, cfg: &DatasetConfig, seed: u64, bench: &Benchmark) -> Result<PathBuf> {
    let mut splits = BTreeMap::new();
    for (name, samples, shift) in [
        ("train", &bench.train, None),
        ("val", &bench.val, None),
        ("test", &bench.test, Some(cfg.shift)),
    ] {
        write_folder(&root.join(name), samples)?;
        splits.insert(
            name.to_string(),
            SplitManifest {
                ids: samples.iter().map(|s| s.id.clone()).collect(),
                shift,
            },
        );
    }
    let manifest = Manifest {
        seed,
        image_size: cfg.image_size,
        splits,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
