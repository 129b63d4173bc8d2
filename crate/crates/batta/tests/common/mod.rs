#![allow(dead_code)]

use batta::data::{gen_clean, Sample};
use batta::encoder::{EncoderConfig, InjectionStrategy};
use batta::model::{DecoderConfig, ModelConfig, SegModel};
use batta::params::{SeededParams, Weights};
use batta_core::{BoxXYXY, PromptSet};
use candle_core::{Device, Tensor};

/// 16x16 images, 4x4 grid, full 12-block / 4-stage layout with tiny widths.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            num_heads: 2,
            window_size: 2,
            mlp_ratio: 2,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            dim: 16,
            num_heads: 2,
            mlp_dim: 32,
            up_channels: 8,
            mask_channels: 4,
        },
    }
}

pub fn with_injection(cfg: &ModelConfig, s: InjectionStrategy, stages: usize, gain: f64) -> ModelConfig {
    let mut c = cfg.clone();
    c.encoder.injection_strategy = s;
    c.encoder.injection_stages = stages;
    c.encoder.injection_gain = gain;
    c
}

pub fn init(cfg: &ModelConfig) -> (SegModel, SeededParams) {
    SegModel::init(cfg).unwrap()
}

/// Fresh weights with every zero-initialised tensor replaced by small noise,
/// so that positional and prompt embeddings take part in tests.
pub fn noisy_weights(cfg: &ModelConfig, seed: u64) -> Weights {
    let (_, params) = init(cfg);
    let mut w = params.snapshot().unwrap();
    let mut k = seed;
    for t in w.values_mut() {
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        if v.iter().all(|&x| x == 0.0) {
            let noise: Vec<f32> = (0..v.len())
                .map(|i| {
                    k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407 + i as u64);
                    ((k >> 40) as f32 / (1u64 << 24) as f32 - 0.5) * 0.2
                })
                .collect();
            *t = Tensor::from_vec(noise, t.dims(), &Device::Cpu).unwrap();
        }
    }
    w
}

pub fn samples(n: usize, seed: u64) -> Vec<Sample> {
    gen_clean(n, 16, seed).unwrap()
}

pub fn random_images(b: usize, s: usize, seed: u64) -> Tensor {
    let mut k = seed;
    let data: Vec<f32> = (0..b * 3 * s * s)
        .map(|_| {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (k >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect();
    Tensor::from_vec(data, (b, 3, s, s), &Device::Cpu).unwrap()
}

pub fn box_prompts(b: usize) -> Vec<PromptSet> {
    (0..b)
        .map(|i| PromptSet::from_box(BoxXYXY::new(2.0 + i as f64, 3.0, 11.0, 12.0 - i as f64)))
        .collect()
}

pub fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}
