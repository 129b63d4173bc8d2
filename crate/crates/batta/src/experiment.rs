//! Evaluation, adaptation and ablation runs shared by the CLI and tests.

use serde::Serialize;

use crate::config::InjectionConfig;
use crate::data::Sample;
use crate::encoder::InjectionStrategy;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::params::Weights;
use crate::report::{aggregate, score, RunSummary, SampleRecord};
use crate::tta::{run_stream, run_zero_shot, AdaptationConfig, PromptKind};

/// Zero-shot records with `injection` applied.
pub fn eval_records(
    model: &ModelConfig,
    weights: &Weights,
    injection: &InjectionConfig,
    samples: &[Sample],
    prompt: PromptKind,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    let cfg = injection.apply(model)?;
    let items = run_zero_shot(&cfg, weights, samples, prompt, seed)?;
    score(&items, samples, "zero_shot")
}

/// Adapted records with `injection` applied.
pub fn adapt_records(
    model: &ModelConfig,
    weights: &Weights,
    injection: &InjectionConfig,
    samples: &[Sample],
    prompt: PromptKind,
    acfg: &AdaptationConfig,
) -> Result<Vec<SampleRecord>> {
    let cfg = injection.apply(model)?;
    let (items, _) = run_stream(&cfg, weights, samples, prompt, acfg)?;
    let mode = if acfg.episodic { "episodic" } else { "continual" };
    score(&items, samples, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Stages,
    Strategies,
    Components,
}

impl Sweep {
    pub const ALL: [Sweep; 3] = [Sweep::Stages, Sweep::Strategies, Sweep::Components];

    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Stages => "stages",
            Sweep::Strategies => "strategies",
            Sweep::Components => "components",
        }
    }
}

/// One ablation cell: injection plus whether alignment runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub label: String,
    pub injection: InjectionConfig,
    pub align: bool,
}

/// Cells of a sweep. `adapt_injection` is the injection used by the
/// components sweep when injection is on.
pub fn sweep_cells(sweep: Sweep, num_stages: usize, adapt_injection: &InjectionConfig) -> Vec<Cell> {
    match sweep {
        Sweep::Stages => (0..=num_stages)
            .map(|k| Cell {
                label: format!("stages-{k}"),
                injection: InjectionConfig {
                    strategy: InjectionStrategy::GaussianPreBlock,
                    stages: k,
                    gain: adapt_injection.gain,
                },
                align: false,
            })
            .collect(),
        Sweep::Strategies => InjectionStrategy::ALL
            .iter()
            .map(|&s| Cell {
                label: s.name().to_string(),
                injection: InjectionConfig {
                    strategy: s,
                    stages: if s == InjectionStrategy::None { 0 } else { num_stages },
                    gain: adapt_injection.gain,
                },
                align: false,
            })
            .collect(),
        Sweep::Components => vec![
            Cell {
                label: "zero_shot".into(),
                injection: InjectionConfig::NONE,
                align: false,
            },
            Cell {
                label: "injection_only".into(),
                injection: *adapt_injection,
                align: false,
            },
            Cell {
                label: "alignment_only".into(),
                injection: InjectionConfig::NONE,
                align: true,
            },
            Cell {
                label: "injection_alignment".into(),
                injection: *adapt_injection,
                align: true,
            },
        ],
    }
}

/// Runs one cell and summarises it.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    cell: &Cell,
    model: &ModelConfig,
    weights: &Weights,
    samples: &[Sample],
    prompt: PromptKind,
    acfg: &AdaptationConfig,
    seed: u64,
    config: serde_json::Value,
) -> Result<RunSummary> {
    let records = if cell.align {
        adapt_records(model, weights, &cell.injection, samples, prompt, acfg)?
    } else {
        eval_records(model, weights, &cell.injection, samples, prompt, seed)?
    };
    aggregate(&cell.label, seed, config, records)
}
