//! Compact plain-ViT image encoder with prompt injection hooks.
//!
//! Blocks are grouped into stages of `blocks_per_stage`; inside each stage
//! all blocks but the last use non-overlapping windowed attention and the
//! last one attends globally. Prompt injection adds a spatial tensor either
//! to the block input (`*_pre_block`) or to the attention sublayer output
//! (`*_post_attn`), and only in the deepest `injection_stages` stages.
//!
//! Features flow through the blocks channels-last (`B x H x W x C`); the
//! trace exposes them as `B x C x H x W` feature maps.

use batta_core::{aggregate_heatmap, prompts_to_centers, Heatmap, PromptSet, SigmaPolicy};
use candle_core::{Device, Module, Tensor};
use candle_nn::{Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{linear, multi_head, LayerNorm, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectionStrategy {
    #[default]
    None,
    Overlay,
    EmbedPreBlock,
    EmbedPostAttn,
    GaussianPreBlock,
    GaussianPostAttn,
}

impl InjectionStrategy {
    pub const ALL: [InjectionStrategy; 6] = [
        InjectionStrategy::None,
        InjectionStrategy::Overlay,
        InjectionStrategy::EmbedPreBlock,
        InjectionStrategy::EmbedPostAttn,
        InjectionStrategy::GaussianPreBlock,
        InjectionStrategy::GaussianPostAttn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            InjectionStrategy::None => "none",
            InjectionStrategy::Overlay => "overlay",
            InjectionStrategy::EmbedPreBlock => "embed_pre_block",
            InjectionStrategy::EmbedPostAttn => "embed_post_attn",
            InjectionStrategy::GaussianPreBlock => "gaussian_pre_block",
            InjectionStrategy::GaussianPostAttn => "gaussian_post_attn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    fn placement(&self) -> Option<Placement> {
        match self {
            InjectionStrategy::EmbedPreBlock | InjectionStrategy::GaussianPreBlock => Some(Placement::PreBlock),
            InjectionStrategy::EmbedPostAttn | InjectionStrategy::GaussianPostAttn => Some(Placement::PostAttn),
            _ => None,
        }
    }

    /// Whether this strategy needs prompts at encode time.
    pub fn uses_prompts(&self) -> bool {
        !matches!(self, InjectionStrategy::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSettings {
    pub box_divisor: f64,
    pub point_divisor: f64,
}

impl Default for SigmaSettings {
    fn default() -> Self {
        let p = SigmaPolicy::default();
        Self {
            box_divisor: p.box_divisor,
            point_divisor: p.point_divisor,
        }
    }
}

impl From<SigmaSettings> for SigmaPolicy {
    fn from(s: SigmaSettings) -> Self {
        SigmaPolicy {
            box_divisor: s.box_divisor,
            point_divisor: s.point_divisor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub injection_strategy: InjectionStrategy,
    pub injection_stages: usize,
    pub injection_gain: f64,
    pub sigma: SigmaSettings,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            depth: 12,
            blocks_per_stage: 3,
            window_size: 4,
            mlp_ratio: 4,
            injection_strategy: InjectionStrategy::None,
            injection_stages: 4,
            injection_gain: 1.0,
            sigma: SigmaSettings::default(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_stages(&self) -> usize {
        self.depth / self.blocks_per_stage
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 9] = [
            (self.image_size > 0 && self.patch_size > 0, "image and patch size must be positive"),
            (self.image_size % self.patch_size == 0, "patch_size must divide image_size"),
            (self.num_heads > 0 && self.embed_dim % self.num_heads == 0, "embed_dim must be divisible by num_heads"),
            (self.blocks_per_stage > 0, "blocks_per_stage must be positive"),
            (self.depth > 0 && self.depth % self.blocks_per_stage == 0, "depth must be a multiple of blocks_per_stage"),
            (self.window_size > 0 && self.grid_size() % self.window_size == 0, "window_size must divide the feature grid side"),
            (self.injection_stages <= self.num_stages(), "injection_stages exceeds the number of stages"),
            (self.injection_gain.is_finite(), "injection_gain must be finite"),
            (self.sigma.box_divisor > 0.0 && self.sigma.point_divisor > 0.0, "sigma divisors must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(invalid(msg));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(invalid("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// First block that receives injection: the deepest `injection_stages`
    /// stages are active.
    pub fn first_injected_block(&self) -> usize {
        self.depth - self.injection_stages * self.blocks_per_stage
    }

    pub fn is_windowed(&self, block: usize) -> bool {
        block % self.blocks_per_stage != self.blocks_per_stage - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placement {
    PreBlock,
    PostAttn,
}

/// Resolved injection for one forward pass.
#[derive(Debug, Clone)]
pub struct InjectionPlan {
    placement: Placement,
    /// `B x H x W x 1` (Gaussian) or `B x H x W x C` (embedding), gain applied.
    addend: Tensor,
    first_active: usize,
}

impl InjectionPlan {
    fn active(&self, block: usize) -> bool {
        block >= self.first_active
    }

    pub fn addend(&self) -> &Tensor {
        &self.addend
    }
}

/// Per-sample prompt heatmaps on the feature grid.
pub fn prompt_heatmaps(prompts: &[PromptSet], cfg: &EncoderConfig) -> Result<Vec<Heatmap>> {
    let s = cfg.image_size;
    let g = cfg.grid_size();
    prompts
        .iter()
        .map(|p| {
            let centers = prompts_to_centers(p, (s, s), (g, g), &cfg.sigma.into())?;
            Ok(aggregate_heatmap(&centers, g, g)?)
        })
        .collect()
}

/// Heatmaps as a `B x H x W x 1` tensor.
pub fn heatmap_tensor(maps: &[Heatmap]) -> Result<Tensor> {
    let (h, w) = (maps[0].height(), maps[0].width());
    let data: Vec<f32> = maps
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|&v| v as f32))
        .collect();
    Ok(Tensor::from_vec(data, (maps.len(), h, w, 1), &Device::Cpu)?)
}

/// Pixels touched by the overlay strategy: 1-pixel box frames and 3x3 point squares.
pub fn overlay_pixels(prompts: &PromptSet, h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    let mut mark = |i: i64, j: i64| {
        if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
            out[i as usize * w + j as usize] = true;
        }
    };
    for b in &prompts.boxes {
        let (x0, y0) = (b.x0.floor() as i64, b.y0.floor() as i64);
        let (x1, y1) = (b.x1.ceil() as i64 - 1, b.y1.ceil() as i64 - 1);
        for x in x0..=x1 {
            mark(y0, x);
            mark(y1, x);
        }
        for y in y0..=y1 {
            mark(y, x0);
            mark(y, x1);
        }
    }
    for p in &prompts.points {
        let (x, y) = (p.x.floor() as i64, p.y.floor() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                mark(y + dy, x + dx);
            }
        }
    }
    out
}

/// Draws prompts onto a `B x 3 x S x S` batch at maximum intensity.
pub fn overlay_batch(images: &Tensor, prompts: &[PromptSet]) -> Result<Tensor> {
    let (b, _, h, w) = images.dims4()?;
    if prompts.len() != b {
        return Err(invalid("one prompt set per image is required"));
    }
    let mut mask = Vec::with_capacity(b * h * w);
    for p in prompts {
        p.validate(w, h)?;
        mask.extend(overlay_pixels(p, h, w).into_iter().map(|v| v as u8 as f32));
    }
    let m = Tensor::from_vec(mask, (b, 1, h, w), &Device::Cpu)?;
    let keep = (1.0 - &m)?;
    Ok(images.broadcast_mul(&keep)?.broadcast_add(&m)?)
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    window: Option<usize>,
}

impl Block {
    fn new(cfg: &EncoderConfig, index: usize, vb: VarBuilder) -> Result<Self> {
        let c = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(c, vb.pp("norm1"))?,
            qkv: linear(c, 3 * c, vb.pp("attn.qkv"))?,
            proj: linear(c, c, vb.pp("attn.proj"))?,
            norm2: LayerNorm::new(c, vb.pp("norm2"))?,
            mlp: Mlp::new(c, c * cfg.mlp_ratio, c, vb.pp("mlp"))?,
            heads: cfg.num_heads,
            window: cfg.is_windowed(index).then_some(cfg.window_size),
        })
    }

    fn attention(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let groups = match self.window {
            Some(ws) => x
                .reshape((b, h / ws, ws, w / ws, ws, c))?
                .permute((0, 1, 3, 2, 4, 5))?
                .contiguous()?
                .reshape((b * (h / ws) * (w / ws), ws * ws, c))?,
            None => x.reshape((b, h * w, c))?,
        };
        let qkv = self.qkv.forward(&groups)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let o = self.proj.forward(&multi_head(&q, &k, &v, self.heads)?)?;
        match self.window {
            Some(ws) => o
                .reshape((b, h / ws, w / ws, ws, ws, c))?
                .permute((0, 1, 3, 2, 4, 5))?
                .contiguous()?
                .reshape((b, h, w, c)),
            None => o.reshape((b, h, w, c)),
        }
    }

    fn forward(&self, x: &Tensor, post_attn: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let mut x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        if let Some(add) = post_attn {
            x = x.broadcast_add(add)?;
        }
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

/// Block outputs of one encoder pass.
///
/// `per_block[l]` is the output of block `l` as seen by its consumer, i.e.
/// including any pre-block injection that is added on the way into block
/// `l + 1` (or, for the last block, the output-side injection).
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub embedded: Tensor,
    pub per_block: Vec<Tensor>,
    pub plan: Option<InjectionPlan>,
}

impl EncoderTrace {
    /// Channels-last features consumed by the decoder.
    pub fn final_tokens(&self) -> &Tensor {
        self.per_block.last().expect("non-empty trace")
    }

    /// Block `l` output as a `B x C x H x W` tensor.
    pub fn feature_map(&self, l: usize) -> Result<Tensor> {
        let t = self
            .per_block
            .get(l)
            .ok_or_else(|| invalid(format!("block index {l} out of range")))?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn final_features(&self) -> Result<Tensor> {
        self.feature_map(self.per_block.len() - 1)
    }

    pub fn depth(&self) -> usize {
        self.per_block.len()
    }
}

/// Shallow and deep feature maps for boundary alignment.
pub fn select_features(trace: &EncoderTrace, l_s: usize, l_d: usize) -> Result<(Tensor, Tensor)> {
    if l_s >= l_d {
        return Err(invalid("l_s must be smaller than l_d"));
    }
    if l_d >= trace.depth() {
        return Err(invalid(format!("l_d = {l_d} exceeds encoder depth {}", trace.depth())));
    }
    Ok((trace.feature_map(l_s)?, trace.feature_map(l_d)?))
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch: Linear,
    pos: Tensor,
    prompt_embed: Tensor,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let g = cfg.grid_size();
        let p = cfg.patch_size;
        let patch = linear(3 * p * p, c, vb.pp("patch_embed"))?;
        let pos = vb.get_with_hints((1, g, g, c), "pos_embed", candle_nn::Init::Const(0.0))?;
        // rows: point, box top-left corner, box bottom-right corner
        let prompt_embed = vb.get_with_hints((3, c), "prompt_embed", candle_nn::Init::Const(0.0))?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(cfg, i, vb.pp(format!("blocks.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            pos,
            prompt_embed,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Linear patch projection plus the learned positional grid.
    pub fn patch_embed(&self, images: &Tensor) -> Result<Tensor> {
        let (b, ch, s, s2) = images.dims4()?;
        if ch != 3 || s != self.cfg.image_size || s2 != s {
            return Err(invalid(format!(
                "expected Bx3x{0}x{0} images, got {ch}x{s}x{s2}",
                self.cfg.image_size
            )));
        }
        let p = self.cfg.patch_size;
        let g = s / p;
        let patches = images
            .reshape((b, 3, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, g, g, 3 * p * p))?;
        Ok(self.patch.forward(&patches)?.broadcast_add(&self.pos)?)
    }

    /// Resolves the injection tensor for `cfg` (the encoder's own config
    /// unless overridden by the caller).
    pub fn injection_plan(&self, prompts: Option<&[PromptSet]>, batch: usize) -> Result<Option<InjectionPlan>> {
        let cfg = &self.cfg;
        let Some(placement) = cfg.injection_strategy.placement() else {
            return Ok(None);
        };
        if cfg.injection_stages == 0 || cfg.injection_gain == 0.0 {
            return Ok(None);
        }
        let prompts = prompts.ok_or_else(|| invalid("injection strategy requires prompts"))?;
        if prompts.len() != batch {
            return Err(invalid("one prompt set per image is required"));
        }
        let addend = match cfg.injection_strategy {
            InjectionStrategy::GaussianPreBlock | InjectionStrategy::GaussianPostAttn => {
                (heatmap_tensor(&prompt_heatmaps(prompts, cfg)?)? * cfg.injection_gain)?
            }
            _ => (self.prompt_cells(prompts)? * cfg.injection_gain)?,
        };
        Ok(Some(InjectionPlan {
            placement,
            addend,
            first_active: cfg.first_injected_block(),
        }))
    }

    /// Learned per-prompt embeddings dropped onto the grid cell under each
    /// prompt location (box corners for boxes).
    fn prompt_cells(&self, prompts: &[PromptSet]) -> Result<Tensor> {
        let s = self.cfg.image_size as f64;
        let g = self.cfg.grid_size();
        let b = prompts.len();
        let mut counts = vec![0f32; b * g * g * 3];
        let cell = |v: f64| ((v / s * g as f64).floor().max(0.0) as usize).min(g - 1);
        for (bi, p) in prompts.iter().enumerate() {
            p.validate_nonempty(self.cfg.image_size, self.cfg.image_size)?;
            let mut put = |x: f64, y: f64, kind: usize| {
                counts[((bi * g + cell(y)) * g + cell(x)) * 3 + kind] += 1.0;
            };
            for pt in &p.points {
                put(pt.x, pt.y, 0);
            }
            for bx in &p.boxes {
                put(bx.x0, bx.y0, 1);
                // half-open corner: last covered pixel
                put((bx.x1 - 1.0).max(bx.x0), (bx.y1 - 1.0).max(bx.y0), 2);
            }
        }
        let counts = Tensor::from_vec(counts, (b, g * g, 3), &Device::Cpu)?;
        let emb = counts.broadcast_matmul(&self.prompt_embed)?;
        Ok(emb.reshape((b, g, g, self.cfg.embed_dim))?)
    }

    /// One block on its own: pre-block variants add the injection to the
    /// block input, post-attention variants to the attention output.
    pub fn block_forward(&self, x: &Tensor, index: usize, plan: Option<&InjectionPlan>) -> Result<Tensor> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| invalid(format!("block index {index} out of range")))?;
        let active = plan.filter(|p| p.active(index));
        let x = match active.filter(|p| p.placement == Placement::PreBlock) {
            Some(p) => x.broadcast_add(&p.addend)?,
            None => x.clone(),
        };
        let post = active.filter(|p| p.placement == Placement::PostAttn);
        Ok(block.forward(&x, post.map(|p| &p.addend))?)
    }

    /// Runs blocks `start..depth` on `x`, which must already include any
    /// injection destined for block `start`'s input.
    pub fn run_blocks(&self, mut x: Tensor, start: usize, plan: Option<&InjectionPlan>) -> Result<Vec<Tensor>> {
        let last = self.blocks.len() - 1;
        let mut out = Vec::with_capacity(self.blocks.len() - start);
        for (l, block) in self.blocks.iter().enumerate().skip(start) {
            let post = plan.filter(|p| p.placement == Placement::PostAttn && p.active(l));
            x = block.forward(&x, post.map(|p| &p.addend))?;
            if let Some(p) = plan.filter(|p| p.placement == Placement::PreBlock) {
                let feeds_active = if l == last { p.active(l) } else { p.active(l + 1) };
                if feeds_active {
                    x = x.broadcast_add(&p.addend)?;
                }
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Full pass: (optional overlay) patch embedding, then every block.
    pub fn encode(&self, images: &Tensor, prompts: Option<&[PromptSet]>) -> Result<EncoderTrace> {
        let b = images.dim(0)?;
        let images = if self.cfg.injection_strategy == InjectionStrategy::Overlay
            && self.cfg.injection_stages > 0
        {
            let prompts = prompts.ok_or_else(|| invalid("overlay strategy requires prompts"))?;
            overlay_batch(images, prompts)?
        } else {
            images.clone()
        };
        let plan = self.injection_plan(prompts, b)?;
        let mut x = self.patch_embed(&images)?;
        if let Some(p) = plan.as_ref().filter(|p| p.placement == Placement::PreBlock && p.active(0)) {
            x = x.broadcast_add(&p.addend)?;
        }
        let per_block = self.run_blocks(x.clone(), 0, plan.as_ref())?;
        Ok(EncoderTrace {
            embedded: x,
            per_block,
            plan,
        })
    }

    pub fn set_injection(&mut self, strategy: InjectionStrategy, stages: usize, gain: f64) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.injection_strategy = strategy;
        cfg.injection_stages = stages;
        cfg.injection_gain = gain;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }
}
