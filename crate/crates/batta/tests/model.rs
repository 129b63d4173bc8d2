mod common;

use batta::checkpoint::Checkpoint;
use batta::loss::{dice_loss, focal_loss, supervised_loss};
use batta::model::{to_results, SegModel};
use batta::train::{pretrain, PretrainConfig};
use batta_core::{BoxXYXY, Point2D, PromptSet};
use candle_core::{Device, Tensor};
use common::*;

#[test]
fn prompt_token_counts() {
    let (model, _) = init(&micro_config());
    let point = PromptSet::from_point(Point2D::new(3.0, 4.0));
    let bx = PromptSet::from_box(BoxXYXY::new(1.0, 1.0, 9.0, 7.0));
    assert_eq!(model.encode_prompts(&[point.clone()]).unwrap().sparse_tokens.dims(), &[1, 1, 16]);
    assert_eq!(model.encode_prompts(&[bx.clone()]).unwrap().sparse_tokens.dims(), &[1, 2, 16]);
    let both = PromptSet {
        points: point.points.clone(),
        boxes: bx.boxes.clone(),
    };
    assert_eq!(model.encode_prompts(&[both]).unwrap().sparse_tokens.dims(), &[1, 3, 16]);
    let a = values(&model.encode_prompts(&[bx.clone()]).unwrap().sparse_tokens);
    let b = values(&model.encode_prompts(&[bx.clone()]).unwrap().sparse_tokens);
    assert_eq!(a, b);
    assert!(model.encode_prompts(&[PromptSet::default()]).is_err());
    assert!(model.encode_prompts(&[point, bx]).is_err());
}

#[test]
fn decoder_shapes_and_mask_threshold() {
    let cfg = micro_config();
    let w = noisy_weights(&cfg, 1);
    let model = SegModel::from_weights(&cfg, &w).unwrap();
    let out = model.forward(&random_images(3, 16, 1), &box_prompts(3)).unwrap();
    assert_eq!(out.logits.dims(), &[3, 1, 16, 16]);
    assert_eq!(out.confidence.dims(), &[3]);
    for r in to_results(&out.logits, &out.confidence).unwrap() {
        assert_eq!(r.size, 16);
        assert!((0.0..=1.0).contains(&r.confidence));
        for (k, &l) in r.logits.iter().enumerate() {
            assert_eq!(r.mask.as_slice()[k], l > 0.0);
        }
    }
}

#[test]
fn decoding_is_deterministic_and_batch_equivariant() {
    let cfg = micro_config();
    let w = noisy_weights(&cfg, 2);
    let model = SegModel::from_weights(&cfg, &w).unwrap();
    let imgs = random_images(3, 16, 2);
    let p = box_prompts(3);
    let a = model.segment(&imgs, &p).unwrap();
    let b = model.segment(&imgs, &p).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.logits, y.logits);
    }
    let order = [2usize, 0, 1];
    let idx = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
    let perm_imgs = imgs.index_select(&idx, 0).unwrap();
    let perm_p: Vec<PromptSet> = order.iter().map(|&i| p[i].clone()).collect();
    let c = model.segment(&perm_imgs, &perm_p).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(c[k].mask, a[i].mask);
        for (u, v) in c[k].logits.iter().zip(&a[i].logits) {
            assert!((u - v).abs() < 1e-4);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn focal_ref(logits: &[f64], gt: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&x, &y) in logits.iter().zip(gt) {
        let p = sigmoid(x);
        let p_t = if y == 1.0 { p } else { 1.0 - p };
        let a_t = if y == 1.0 { 0.25 } else { 0.75 };
        total += a_t * (1.0 - p_t).powi(2) * -p_t.ln();
    }
    total / logits.len() as f64
}

fn dice_ref(logits: &[f64], gt: &[f64]) -> f64 {
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let inter: f64 = p.iter().zip(gt).map(|(a, b)| a * b).sum();
    1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + gt.iter().sum::<f64>() + 1.0)
}

fn t4(v: &[f64]) -> Tensor {
    let f: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    Tensor::from_vec(f, (1, 1, 4, 4), &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f32>().unwrap() as f64
}

#[test]
fn loss_matches_scalar_reference_on_4x4() {
    let logits = [
        2.0, -1.0, 0.5, -3.0, 1.5, 0.0, -0.5, 4.0, -2.0, 3.0, -4.0, 0.25, 1.0, -1.5, 2.5, -0.75,
    ];
    let gt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
    let parts = supervised_loss(&t4(&logits), &t4(&gt)).unwrap();
    assert!((scalar(&parts.focal) - focal_ref(&logits, &gt)).abs() < 1e-6);
    assert!((scalar(&parts.dice) - dice_ref(&logits, &gt)).abs() < 1e-6);
    assert!((scalar(&parts.total) - scalar(&parts.focal) - scalar(&parts.dice)).abs() < 1e-7);
    let separate = scalar(&focal_loss(&t4(&logits), &t4(&gt)).unwrap()) + scalar(&dice_loss(&t4(&logits), &t4(&gt)).unwrap());
    assert!((scalar(&parts.total) - separate).abs() < 1e-7);
}

#[test]
fn saturated_correct_logits_give_near_zero_loss() {
    let gt = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let logits: Vec<f64> = gt.iter().map(|&g| if g == 1.0 { 40.0 } else { -40.0 }).collect();
    let parts = supervised_loss(&t4(&logits), &t4(&gt)).unwrap();
    assert!(scalar(&parts.total) < 1e-6);
}

#[test]
fn empty_gt_with_negative_logits() {
    let logits = [-10.0; 16];
    let gt = [0.0; 16];
    let parts = supervised_loss(&t4(&logits), &t4(&gt)).unwrap();
    // closed form: 1 - 1 / (16 sigmoid(-10) + 1)
    let s = 16.0 * sigmoid(-10.0);
    let expected_dice = 1.0 - 1.0 / (s + 1.0);
    assert!((scalar(&parts.dice) - expected_dice).abs() < 1e-6);
    assert!(scalar(&parts.total) < 1e-3);
}

#[test]
fn loss_bounds_and_validation() {
    let logits = [0.3, -0.2, 1.1, -2.0, 0.0, 0.4, -0.9, 2.2, 0.1, -0.1, 0.6, -1.2, 1.3, 0.2, -0.5, 0.9];
    let gt = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let parts = supervised_loss(&t4(&logits), &t4(&gt)).unwrap();
    let d = scalar(&parts.dice);
    assert!((0.0..=1.0).contains(&d));
    assert!(scalar(&parts.focal) >= 0.0);
    let mut bad = gt;
    bad[3] = 0.5;
    assert!(supervised_loss(&t4(&logits), &t4(&bad)).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences_end_to_end() {
    let cfg = micro_config();
    let (model, params) = init(&cfg);
    params.load(&noisy_weights(&cfg, 3)).unwrap();
    let s = samples(2, 5);
    let refs: Vec<&batta::data::Sample> = s.iter().collect();
    let imgs = batta::data::image_batch(&refs).unwrap();
    let gt = batta::data::mask_batch(&refs).unwrap();
    let prompts: Vec<PromptSet> = s.iter().map(|x| x.box_prompt().unwrap()).collect();
    let loss_of = |m: &SegModel| -> Tensor {
        let out = m.forward(&imgs, &prompts).unwrap();
        supervised_loss(&out.logits, &gt).unwrap().total
    };
    let grads = loss_of(&model).backward().unwrap();
    let vars = params.vars();
    let names = [
        "encoder.blocks.11.norm1.weight",
        "encoder.blocks.11.mlp.fc2.bias",
        "decoder.hyper.fc2.weight",
        "decoder.up2.bias",
    ];
    for name in names {
        let var = &vars[name];
        let g = values(grads.get(var.as_tensor()).expect("gradient"));
        let k = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let orig = values(var.as_tensor());
        let h = 1e-2f32;
        let eval_at = |delta: f32| {
            let mut v = orig.clone();
            v[k] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
            scalar(&loss_of(&model))
        };
        let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h as f64);
        eval_at(0.0);
        let an = g[k] as f64;
        let rel = (fd - an).abs() / an.abs().max(1e-8);
        assert!(rel < 1e-2, "{name}[{k}]: analytic {an} vs fd {fd}");
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let cfg = micro_config();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        metadata: Default::default(),
        weights: noisy_weights(&cfg, 4),
    };
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..6], b"BATTA1");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for (k, v) in &ckpt.weights {
        assert_eq!(values(v), values(&back.weights[k]));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.batta");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn checkpoint_rejects_corruption() {
    let cfg = micro_config();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        metadata: Default::default(),
        weights: noisy_weights(&cfg, 5),
    };
    let bytes = ckpt.to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    let mut wrong = ckpt.clone();
    wrong.config.decoder.mlp_dim = 48;
    assert!(Checkpoint::from_bytes(&wrong.to_bytes().unwrap()).is_err());
    let mut extra = ckpt;
    extra.weights.insert("stray".into(), Tensor::zeros(2, candle_core::DType::F32, &Device::Cpu).unwrap());
    assert!(Checkpoint::from_bytes(&extra.to_bytes().unwrap()).is_err());
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let cfg = micro_config();
    let train = samples(4, 1);
    let pc = PretrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let ckpt = pretrain(&train, &[], &cfg, &pc, 0, |_| {}).unwrap();
    assert_eq!(ckpt.metadata.steps, 0);
    assert!(ckpt.metadata.loss_curve.is_empty());
    let (_, params) = init(&cfg);
    let fresh = params.snapshot().unwrap();
    for (k, v) in &fresh {
        assert_eq!(values(v), values(&ckpt.weights[k]), "{k}");
    }
}

#[test]
fn pretraining_is_reproducible() {
    let cfg = micro_config();
    let train = samples(6, 2);
    let val = samples(2, 3);
    let pc = PretrainConfig {
        epochs: 2,
        batch_size: 3,
        ..Default::default()
    };
    let a = pretrain(&train, &val, &cfg, &pc, 7, |_| {}).unwrap();
    let b = pretrain(&train, &val, &cfg, &pc, 7, |_| {}).unwrap();
    assert_eq!(a.metadata, b.metadata);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.metadata.steps, 4);
    assert!(pretrain(&[], &val, &cfg, &pc, 7, |_| {}).is_err());
}
