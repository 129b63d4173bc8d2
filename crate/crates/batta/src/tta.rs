//! Per-sample test-time adaptation driven by the boundary alignment loss.
//!
//! Only parameters of the last encoder block are tuned, so each step re-runs
//! the network from the first block that holds a tuned tensor, starting from
//! the cached (detached) input of that block. The alignment loss and its
//! gradient with respect to the deep feature map come from `batta_core`; the
//! gradient is pushed into the model by back-propagating the surrogate
//! `sum(Fd * dL/dFd)`, whose parameter gradient equals that of the loss.

use std::collections::HashMap;
use std::time::Instant;

use batta_core::{
    alignment_loss, boundary_map, quality_gate, AlignmentReport, ChannelReduce, GateThresholds,
    GridRegion, PromptSet,
};
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::bridge::{feature_map_to_tokens, tokens_to_feature_map};
use crate::data::{image_batch, Sample};
use crate::error::{invalid, Result};
use crate::model::{ModelConfig, SegModel, SegmentationResult};
use crate::params::{frozen, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelector {
    #[default]
    LastBlockNorms,
    LastBlockAttnProj,
    LastBlockAll,
}

impl ParamSelector {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "last_block_norms" => Ok(Self::LastBlockNorms),
            "last_block_attn_proj" => Ok(Self::LastBlockAttnProj),
            "last_block_all" => Ok(Self::LastBlockAll),
            other => Err(invalid(format!("unknown parameter selector {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    #[default]
    Mean,
    Max,
}

impl From<Reduce> for ChannelReduce {
    fn from(r: Reduce) -> Self {
        match r {
            Reduce::Mean => ChannelReduce::Mean,
            Reduce::Max => ChannelReduce::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub steps: usize,
    pub lr: f64,
    pub param_selector: ParamSelector,
    pub l_s: usize,
    pub l_d: usize,
    pub tau: f64,
    pub delta: f64,
    pub support_threshold: f64,
    pub boundary_eps: f64,
    pub channel_reduce: Reduce,
    pub episodic: bool,
    pub stop_grad_shallow: bool,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            lr: 1e-4,
            param_selector: ParamSelector::LastBlockNorms,
            l_s: 2,
            l_d: 11,
            tau: 1.5,
            delta: 0.1,
            support_threshold: batta_core::align::DEFAULT_SUPPORT_THRESHOLD,
            boundary_eps: 1e-6,
            channel_reduce: Reduce::Mean,
            episodic: true,
            stop_grad_shallow: true,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("adaptation lr must be positive"));
        }
        if self.l_s >= self.l_d {
            return Err(invalid("l_s must be smaller than l_d"));
        }
        if self.l_d >= depth {
            return Err(invalid(format!("l_d = {} exceeds encoder depth {depth}", self.l_d)));
        }
        if !(0.0..1.0).contains(&self.support_threshold) {
            return Err(invalid("support_threshold must lie in [0, 1)"));
        }
        if !(self.boundary_eps > 0.0 && self.boundary_eps.is_finite()) {
            return Err(invalid("boundary_eps must be positive"));
        }
        GateThresholds::new(self.tau, self.delta)?;
        Ok(())
    }

    pub fn thresholds(&self) -> Result<GateThresholds> {
        Ok(GateThresholds::new(self.tau, self.delta)?)
    }
}

/// Names of the tensors a selector tunes, plus their scalar count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TunableSet {
    pub names: Vec<String>,
    pub scalars: usize,
}

impl TunableSet {
    /// Index of the first block that holds a tuned tensor.
    pub fn first_block(&self) -> Option<usize> {
        self.names
            .iter()
            .filter_map(|n| n.strip_prefix("encoder.blocks.")?.split('.').next()?.parse().ok())
            .min()
    }
}

pub fn select_tunable_params(cfg: &ModelConfig, weights: &Weights, selector: ParamSelector) -> Result<TunableSet> {
    let prefix = format!("encoder.blocks.{}.", cfg.encoder.depth - 1);
    let wanted = |rest: &str| match selector {
        ParamSelector::LastBlockNorms => rest.starts_with("norm1.") || rest.starts_with("norm2."),
        ParamSelector::LastBlockAttnProj => rest.starts_with("attn.proj."),
        ParamSelector::LastBlockAll => true,
    };
    let names: Vec<String> = weights
        .keys()
        .filter(|k| k.strip_prefix(&prefix).is_some_and(wanted))
        .cloned()
        .collect();
    if names.is_empty() {
        return Err(invalid("selector matched no parameters"));
    }
    let scalars = names.iter().map(|n| weights[n].elem_count()).sum();
    Ok(TunableSet { names, scalars })
}

/// Serialisable copy of an [`AlignmentReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub loss: f64,
    pub channels_used: usize,
    pub gate_passed: bool,
    pub support_fraction: f64,
}

impl From<AlignmentReport> for AlignmentRecord {
    fn from(r: AlignmentReport) -> Self {
        Self {
            loss: r.loss,
            channels_used: r.channels_used,
            gate_passed: r.gate_passed,
            support_fraction: r.support_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AdaptationTrace {
    pub per_step_loss: Vec<f64>,
    /// Loss after the last update, when at least one step was taken.
    pub final_loss: Option<f64>,
    pub gate_passed: bool,
    pub gate_mean_in: f64,
    pub gate_mean_out: f64,
    pub gate_degenerate: bool,
    pub params_updated: usize,
    pub steps_taken: usize,
    /// Steps taken over the whole stream up to and including this sample.
    pub cumulative_steps: usize,
    pub aborted: bool,
    pub initial_report: Option<AlignmentRecord>,
    pub wall_time_ms: f64,
}

/// Gate region on the feature grid: union of cells touched by the boxes.
pub fn gate_region(cfg: &ModelConfig, prompts: &PromptSet) -> GridRegion {
    let s = cfg.encoder.image_size;
    let g = cfg.encoder.grid_size();
    GridRegion::from_boxes(&prompts.boxes, (s, s), (g, g))
}

struct Episode {
    model: SegModel,
    vars: Vec<(String, Var)>,
}

fn build_episode(cfg: &ModelConfig, weights: &Weights, tunable: &TunableSet) -> Result<Episode> {
    let mut tensors: HashMap<String, Tensor> = frozen(weights);
    let mut vars = Vec::with_capacity(tunable.names.len());
    for name in &tunable.names {
        let var = Var::from_tensor(&weights[name].copy()?)?;
        tensors.insert(name.clone(), var.as_tensor().clone());
        vars.push((name.clone(), var));
    }
    Ok(Episode {
        model: SegModel::from_tensors(cfg, tensors)?,
        vars,
    })
}

struct StepEval {
    report: AlignmentReport,
    surrogate: Option<Tensor>,
}

/// Outcome of adapting on one sample. `updated` holds the tuned tensors
/// after the episode (absent when nothing changed).
pub struct SampleAdaptation {
    pub result: SegmentationResult,
    pub trace: AdaptationTrace,
    pub updated: Option<Weights>,
}

/// Adapts on one image (`1 x 3 x S x S`) and predicts. `weights` is never
/// modified; the caller decides whether to keep `updated`.
pub fn adapt_sample(
    cfg: &ModelConfig,
    weights: &Weights,
    image: &Tensor,
    prompts: &PromptSet,
    acfg: &AdaptationConfig,
) -> Result<SampleAdaptation> {
    let start_time = Instant::now();
    acfg.validate(cfg.encoder.depth)?;
    if image.dim(0)? != 1 {
        return Err(invalid("adapt_sample expects a single image"));
    }
    let tunable = select_tunable_params(cfg, weights, acfg.param_selector)?;
    let episode = build_episode(cfg, weights, &tunable)?;
    let model = &episode.model;
    let prompt_batch = std::slice::from_ref(prompts);
    let mut trace = AdaptationTrace::default();

    let image = image.detach();
    let enc = model.encoder.encode(&image, Some(prompt_batch))?;
    let start = tunable.first_block().unwrap_or(cfg.encoder.depth - 1);
    let block_input = if start == 0 {
        enc.embedded.detach()
    } else {
        enc.per_block[start - 1].detach()
    };
    let fs0 = tokens_to_feature_map(&enc.per_block[acfg.l_s])?;
    let m = boundary_map(&fs0, acfg.boundary_eps, acfg.channel_reduce.into())?;

    let region = gate_region(cfg, prompts);
    let decision = quality_gate(&m, &region, &acfg.thresholds()?)?[0];
    trace.gate_passed = decision.passed;
    trace.gate_mean_in = decision.mean_in;
    trace.gate_mean_out = decision.mean_out;
    trace.gate_degenerate = decision.degenerate;

    let evaluate = |with_grad: bool| -> Result<StepEval> {
        let outs = model.encoder.run_blocks(block_input.clone(), start, enc.plan.as_ref())?;
        let pick = |l: usize| if l >= start { outs[l - start].clone() } else { enc.per_block[l].detach() };
        let fs_t = pick(acfg.l_s);
        let fd_t = pick(acfg.l_d);
        let fs = tokens_to_feature_map(&fs_t)?;
        let fd = tokens_to_feature_map(&fd_t)?;
        // the shallow map is recomputed so it follows any tuned shallow block
        let m = if acfg.l_s >= start {
            boundary_map(&fs, acfg.boundary_eps, acfg.channel_reduce.into())?
        } else {
            m.clone()
        };
        let align = alignment_loss(&fs, &fd, &m, acfg.support_threshold)?;
        let mut report = align.report;
        report.gate_passed = decision.passed;
        if !with_grad || report.channels_used == 0 {
            return Ok(StepEval { report, surrogate: None });
        }
        let mut surrogate = None;
        if acfg.l_d >= start {
            let g = feature_map_to_tokens(&align.grad_deep)?;
            surrogate = Some((fd_t * g)?.sum_all()?);
        }
        if !acfg.stop_grad_shallow && acfg.l_s >= start {
            let g = feature_map_to_tokens(&align.grad_shallow)?;
            let term = (fs_t * g)?.sum_all()?;
            surrogate = Some(match surrogate {
                Some(s) => (s + term)?,
                None => term,
            });
        }
        Ok(StepEval { report, surrogate })
    };

    if decision.passed {
        for step in 0..acfg.steps {
            let eval = evaluate(true)?;
            if step == 0 {
                trace.initial_report = Some(eval.report.clone().into());
            }
            if !eval.report.loss.is_finite() {
                trace.aborted = true;
                break;
            }
            trace.per_step_loss.push(eval.report.loss);
            let Some(surrogate) = eval.surrogate else {
                // nothing to align or no tuned tensor reaches the deep map
                break;
            };
            let grads = surrogate.backward()?;
            for (_, var) in &episode.vars {
                if let Some(g) = grads.get(var.as_tensor()) {
                    var.set(&(var.as_tensor().detach() - (g * acfg.lr)?)?)?;
                }
            }
            trace.steps_taken += 1;
        }
        if trace.steps_taken > 0 && !trace.aborted {
            let loss = evaluate(false)?.report.loss;
            if loss.is_finite() {
                trace.final_loss = Some(loss);
            } else {
                trace.aborted = true;
            }
        }
    }

    let (result, updated) = if trace.aborted {
        trace.steps_taken = 0;
        let pristine = SegModel::from_weights(cfg, weights)?;
        (pristine.segment(&image, prompt_batch)?, None)
    } else {
        let updated = if trace.steps_taken > 0 {
            let mut w = Weights::new();
            for (name, var) in &episode.vars {
                w.insert(name.clone(), var.as_tensor().detach().copy()?);
            }
            trace.params_updated = tunable.scalars;
            Some(w)
        } else {
            None
        };
        (model.segment(&image, prompt_batch)?, updated)
    };
    let mut result = result.into_iter().next().expect("one result");
    trace.wall_time_ms = start_time.elapsed().as_secs_f64() * 1e3;
    result.wall_time_ms = trace.wall_time_ms;
    Ok(SampleAdaptation {
        result,
        trace,
        updated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Box,
    Point,
}

impl PromptKind {
    pub fn prompts_for(&self, sample: &Sample, index: usize, seed: u64) -> Result<PromptSet> {
        match self {
            PromptKind::Box => sample.box_prompt(),
            PromptKind::Point => sample.point_prompt(seed.wrapping_add(index as u64)),
        }
    }
}

pub struct StreamItem {
    pub sample_id: String,
    pub result: SegmentationResult,
    pub trace: AdaptationTrace,
}

/// Adapts over `samples` in order. Episodic mode starts every sample from
/// `weights`; continual mode carries updates forward. `weights` itself is
/// left untouched either way; the drifted weights of a continual run are
/// returned alongside the items.
pub fn run_stream(
    cfg: &ModelConfig,
    weights: &Weights,
    samples: &[Sample],
    prompt_kind: PromptKind,
    acfg: &AdaptationConfig,
) -> Result<(Vec<StreamItem>, Weights)> {
    if samples.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    acfg.validate(cfg.encoder.depth)?;
    let mut live = weights.clone();
    let mut cumulative = 0usize;
    let mut items = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let prompts = prompt_kind.prompts_for(s, k, acfg.seed)?;
        let image = image_batch(&[s])?;
        let base = if acfg.episodic { weights } else { &live };
        let out = adapt_sample(cfg, base, &image, &prompts, acfg)?;
        let mut trace = out.trace;
        cumulative += trace.steps_taken;
        trace.cumulative_steps = cumulative;
        if !acfg.episodic {
            if let Some(updated) = out.updated {
                live.extend(updated);
            }
        }
        items.push(StreamItem {
            sample_id: s.id.clone(),
            result: out.result,
            trace,
        });
    }
    Ok((items, live))
}

/// Zero-shot predictions, one sample at a time (matching the adaptation path).
pub fn run_zero_shot(cfg: &ModelConfig, weights: &Weights, samples: &[Sample], prompt_kind: PromptKind, seed: u64) -> Result<Vec<StreamItem>> {
    if samples.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let model = SegModel::from_weights(cfg, weights)?;
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let prompts = prompt_kind.prompts_for(s, k, seed)?;
            let result = model
                .segment(&image_batch(&[s])?, std::slice::from_ref(&prompts))?
                .remove(0);
            let trace = AdaptationTrace {
                wall_time_ms: result.wall_time_ms,
                ..Default::default()
            };
            Ok(StreamItem {
                sample_id: s.id.clone(),
                result,
                trace,
            })
        })
        .collect()
}
