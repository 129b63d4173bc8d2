//! Prompt encoder, mask decoder and the assembled segmentation model.

use std::collections::HashMap;
use std::time::Instant;

use batta_core::{BinaryMask, PromptSet};
use candle_core::{Device, Module, Tensor, D};
use candle_nn::{Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderTrace, InjectionStrategy};
use crate::error::{invalid, Result};
use crate::nn::{linear, Attention, LayerNorm, Mlp};
use crate::params::{fixed_builder, frozen, SeededParams, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub up_channels: usize,
    pub mask_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_heads: 4,
            mlp_dim: 128,
            up_channels: 32,
            mask_channels: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = &self.decoder;
        if d.dim == 0 || d.dim % 2 != 0 || d.num_heads == 0 || d.dim % d.num_heads != 0 {
            return Err(invalid("decoder dim must be even and divisible by num_heads"));
        }
        if d.mlp_dim == 0 || d.up_channels == 0 || d.mask_channels == 0 {
            return Err(invalid("decoder widths must be positive"));
        }
        let p = self.encoder.patch_size;
        if p < 2 || p % 2 != 0 {
            return Err(invalid("decoder upsampling needs an even patch_size"));
        }
        Ok(())
    }
}

/// Random Fourier features of normalised `[0, 1]` coordinates.
#[derive(Debug, Clone)]
struct FourierPe {
    gaussian: Tensor,
}

impl FourierPe {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        let gaussian = vb.get_with_hints(
            (2, dim / 2),
            "pe_gaussian",
            candle_nn::Init::Randn { mean: 0.0, stdev: 1.0 },
        )?;
        Ok(Self { gaussian })
    }

    /// `coords`: `(..., 2)` as (x, y) in [0, 1].
    fn forward(&self, coords: &Tensor) -> candle_core::Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let proj = (c.broadcast_matmul(&self.gaussian)? * std::f64::consts::TAU)?;
        Tensor::cat(&[proj.sin()?, proj.cos()?], D::Minus1)
    }

    fn dense(&self, g: usize) -> candle_core::Result<Tensor> {
        let mut coords = Vec::with_capacity(g * g * 2);
        for i in 0..g {
            for j in 0..g {
                coords.push((j as f32 + 0.5) / g as f32);
                coords.push((i as f32 + 0.5) / g as f32);
            }
        }
        self.forward(&Tensor::from_vec(coords, (g * g, 2), &Device::Cpu)?)
    }
}

/// Sparse prompt tokens, `B x T x dim`.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub sparse_tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pe: FourierPe,
    type_embed: Tensor,
    image_size: usize,
}

impl PromptEncoder {
    fn new(dim: usize, image_size: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            pe: FourierPe::new(dim, vb.clone())?,
            // point, box top-left, box bottom-right
            type_embed: vb.get_with_hints((3, dim), "type_embed", candle_nn::Init::Randn { mean: 0.0, stdev: 1.0 })?,
            image_size,
        })
    }

    fn token_layout(prompts: &PromptSet) -> (usize, usize) {
        (prompts.points.len(), prompts.boxes.len())
    }

    /// One token per point, two per box. All sets in the batch must share the
    /// same number of points and boxes.
    pub fn encode(&self, prompts: &[PromptSet]) -> Result<PromptEmbedding> {
        let first = prompts.first().ok_or_else(|| invalid("no prompts"))?;
        let layout = Self::token_layout(first);
        let s = self.image_size as f64;
        let mut coords = Vec::new();
        let mut kinds = Vec::new();
        for p in prompts {
            p.validate_nonempty(self.image_size, self.image_size)?;
            if Self::token_layout(p) != layout {
                return Err(invalid("prompt sets in a batch must share one layout"));
            }
            for pt in &p.points {
                coords.extend([(pt.x + 0.5) / s, (pt.y + 0.5) / s]);
                kinds.extend([1.0, 0.0, 0.0]);
            }
            for b in &p.boxes {
                coords.extend([b.x0 / s, b.y0 / s, b.x1 / s, b.y1 / s]);
                kinds.extend([0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
            }
        }
        let t = layout.0 + 2 * layout.1;
        let b = prompts.len();
        let coords: Vec<f32> = coords.into_iter().map(|v| v as f32).collect();
        let kinds: Vec<f32> = kinds.into_iter().map(|v: f64| v as f32).collect();
        let coords = Tensor::from_vec(coords, (b, t, 2), &Device::Cpu)?;
        let kinds = Tensor::from_vec(kinds, (b, t, 3), &Device::Cpu)?;
        let tokens = (self.pe.forward(&coords)? + kinds.broadcast_matmul(&self.type_embed)?)?;
        Ok(PromptEmbedding { sparse_tokens: tokens })
    }
}

#[derive(Debug, Clone)]
struct TwoWayLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_t2i: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: Attention,
    norm4: LayerNorm,
}

impl TwoWayLayer {
    fn new(cfg: &DecoderConfig, vb: VarBuilder) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            self_attn: Attention::new(d, cfg.num_heads, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(d, vb.pp("norm1"))?,
            cross_t2i: Attention::new(d, cfg.num_heads, vb.pp("cross_t2i"))?,
            norm2: LayerNorm::new(d, vb.pp("norm2"))?,
            mlp: Mlp::new(d, cfg.mlp_dim, d, vb.pp("mlp"))?,
            norm3: LayerNorm::new(d, vb.pp("norm3"))?,
            cross_i2t: Attention::new(d, cfg.num_heads, vb.pp("cross_i2t"))?,
            norm4: LayerNorm::new(d, vb.pp("norm4"))?,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let q = (queries + query_pe)?;
        let queries = self.norm1.forward(&(queries + self.self_attn.forward(&q, &q, queries)?)?)?;
        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let queries = self.norm2.forward(&(&queries + self.cross_t2i.forward(&q, &k, keys)?)?)?;
        let queries = self.norm3.forward(&(&queries + self.mlp.forward(&queries)?)?)?;
        let q = (&queries + query_pe)?;
        let keys = self.norm4.forward(&(keys + self.cross_i2t.forward(&k, &q, &queries)?)?)?;
        Ok((queries, keys))
    }
}

/// `B x h x w x (k*k*c)` to `B x hk x wk x c`; a linear layer followed by this
/// is a transposed convolution with kernel = stride = k.
fn pixel_shuffle(x: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    let (b, h, w, kkc) = x.dims4()?;
    let c = kkc / (k * k);
    x.reshape((b, h, w, k, k, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * k, w * k, c))
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    neck: Linear,
    neck_norm: LayerNorm,
    pe: FourierPe,
    output_tokens: Tensor,
    layers: Vec<TwoWayLayer>,
    up1: Linear,
    up1_norm: LayerNorm,
    up2: Linear,
    hyper: Mlp,
    conf_head: Mlp,
    up1_k: usize,
    up2_k: usize,
    grid: usize,
}

impl MaskDecoder {
    fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let d = &cfg.decoder;
        let up1_k = 2;
        let up2_k = cfg.encoder.patch_size / 2;
        Ok(Self {
            neck: linear(cfg.encoder.embed_dim, d.dim, vb.pp("neck"))?,
            neck_norm: LayerNorm::new(d.dim, vb.pp("neck_norm"))?,
            pe: FourierPe::new(d.dim, vb.pp("image_pe"))?,
            output_tokens: vb.get_with_hints(
                (2, d.dim),
                "output_tokens",
                candle_nn::Init::Randn { mean: 0.0, stdev: 1.0 },
            )?,
            layers: (0..2)
                .map(|i| TwoWayLayer::new(d, vb.pp(format!("layers.{i}"))))
                .collect::<Result<_>>()?,
            up1: linear(d.dim, up1_k * up1_k * d.up_channels, vb.pp("up1"))?,
            up1_norm: LayerNorm::new(d.up_channels, vb.pp("up1_norm"))?,
            up2: linear(d.up_channels, up2_k * up2_k * d.mask_channels, vb.pp("up2"))?,
            hyper: Mlp::new(d.dim, d.dim, d.mask_channels, vb.pp("hyper"))?,
            conf_head: Mlp::new(d.dim, d.dim, 1, vb.pp("conf_head"))?,
            up1_k,
            up2_k,
            grid: cfg.encoder.grid_size(),
        })
    }

    /// `features`: channels-last `B x g x g x C`. Returns logits `B x 1 x S x S`
    /// and confidence `B`.
    pub fn decode(&self, features: &Tensor, q: &PromptEmbedding) -> Result<(Tensor, Tensor)> {
        let (b, g, g2, _) = features.dims4()?;
        if g != self.grid || g2 != self.grid {
            return Err(invalid(format!("decoder expects a {0}x{0} grid, got {g}x{g2}", self.grid)));
        }
        if q.sparse_tokens.dim(0)? != b {
            return Err(invalid("prompt batch does not match feature batch"));
        }
        let dim = self.output_tokens.dim(1)?;
        let keys = self.neck_norm.forward(&self.neck.forward(features)?)?.reshape((b, g * g, dim))?;
        let key_pe = self.pe.dense(g)?.unsqueeze(0)?;
        let out_tokens = self.output_tokens.unsqueeze(0)?.repeat((b, 1, 1))?;
        let tokens = Tensor::cat(&[&out_tokens, &q.sparse_tokens], 1)?;
        let (mut queries, mut keys) = (tokens.clone(), keys.broadcast_add(&key_pe)?);
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, &tokens, &key_pe)?;
        }
        let x = self.up1.forward(&keys.reshape((b, g, g, dim))?)?;
        let x = self.up1_norm.forward(&pixel_shuffle(&x, self.up1_k)?)?.gelu()?;
        let x = pixel_shuffle(&self.up2.forward(&x)?, self.up2_k)?;
        let (_, s, _, mc) = x.dims4()?;
        let mask_token = queries.narrow(1, 0, 1)?;
        let weights = self.hyper.forward(&mask_token)?.reshape((b, mc, 1))?;
        let logits = x.reshape((b, s * s, mc))?.matmul(&weights)?.reshape((b, 1, s, s))?;
        let conf_token = queries.narrow(1, 1, 1)?;
        let confidence = candle_nn::ops::sigmoid(&self.conf_head.forward(&conf_token)?)?.reshape(b)?;
        Ok((logits, confidence))
    }
}

/// Differentiable outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub confidence: Tensor,
    pub trace: EncoderTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub size: usize,
    pub logits: Vec<f32>,
    pub mask: BinaryMask,
    pub confidence: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    cfg: ModelConfig,
    pub encoder: Encoder,
    pub prompt_encoder: PromptEncoder,
    pub decoder: MaskDecoder,
}

impl SegModel {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(&cfg.encoder, vb.pp("encoder"))?,
            prompt_encoder: PromptEncoder::new(cfg.decoder.dim, cfg.encoder.image_size, vb.pp("prompt_encoder"))?,
            decoder: MaskDecoder::new(cfg, vb.pp("decoder"))?,
        })
    }

    /// Freshly initialised trainable model.
    pub fn init(cfg: &ModelConfig) -> Result<(Self, SeededParams)> {
        let params = SeededParams::new(cfg.encoder.seed);
        let model = Self::new(cfg, params.var_builder())?;
        Ok((model, params))
    }

    /// Inference model over fixed weights.
    pub fn from_weights(cfg: &ModelConfig, weights: &Weights) -> Result<Self> {
        Self::from_tensors(cfg, frozen(weights))
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: HashMap<String, Tensor>) -> Result<Self> {
        Self::new(cfg, fixed_builder(tensors))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn set_injection(&mut self, strategy: InjectionStrategy, stages: usize, gain: f64) -> Result<()> {
        self.encoder.set_injection(strategy, stages, gain)?;
        self.cfg.encoder = self.encoder.config().clone();
        Ok(())
    }

    pub fn encode_prompts(&self, prompts: &[PromptSet]) -> Result<PromptEmbedding> {
        self.prompt_encoder.encode(prompts)
    }

    pub fn decode(&self, trace: &EncoderTrace, prompts: &[PromptSet]) -> Result<(Tensor, Tensor)> {
        let q = self.encode_prompts(prompts)?;
        self.decoder.decode(trace.final_tokens(), &q)
    }

    pub fn forward(&self, images: &Tensor, prompts: &[PromptSet]) -> Result<ModelOutput> {
        let trace = self.encoder.encode(images, Some(prompts))?;
        let (logits, confidence) = self.decode(&trace, prompts)?;
        Ok(ModelOutput {
            logits,
            confidence,
            trace,
        })
    }

    /// Inference on a batch; timing is the batch wall time split evenly.
    pub fn segment(&self, images: &Tensor, prompts: &[PromptSet]) -> Result<Vec<SegmentationResult>> {
        let start = Instant::now();
        let out = self.forward(&images.detach(), prompts)?;
        let results = to_results(&out.logits, &out.confidence)?;
        let per = start.elapsed().as_secs_f64() * 1e3 / results.len().max(1) as f64;
        Ok(results
            .into_iter()
            .map(|mut r| {
                r.wall_time_ms = per;
                r
            })
            .collect())
    }
}

/// Thresholds logits at 0 into per-sample results (timing left at 0).
pub fn to_results(logits: &Tensor, confidence: &Tensor) -> Result<Vec<SegmentationResult>> {
    let (b, _, s, _) = logits.dims4()?;
    let conf: Vec<f32> = confidence.to_vec1()?;
    let flat: Vec<Vec<f32>> = logits.reshape((b, s * s))?.to_vec2()?;
    Ok(flat
        .into_iter()
        .zip(conf)
        .map(|(logits, c)| {
            let mask = BinaryMask::from_fn(s, s, |i, j| logits[i * s + j] > 0.0);
            SegmentationResult {
                size: s,
                logits,
                mask,
                confidence: c as f64,
                wall_time_ms: 0.0,
            }
        })
        .collect())
}
