//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{InjectionConfig, RunConfig};
use crate::data::{gen_benchmark, image_batch, load_folder, load_split, write_benchmark, Sample, ShiftKind};
use crate::encoder::{prompt_heatmaps, InjectionStrategy};
use crate::error::{invalid, Error, Result};
use crate::experiment::{adapt_records, eval_records, run_cell, sweep_cells, Sweep};
use crate::gradcam::gradcam_map;
use crate::report::{aggregate, emit_plots, write_json, MapPanel, RunSummary};
use crate::train::{mean_dice, pretrain};
use crate::tta::{gate_region, ParamSelector, PromptKind};
use batta_core::{boundary_map, Grid};

#[derive(Debug, Parser)]
#[command(name = "batta", version, about = "Boundary-aware test-time adaptation for a toy prompt-conditioned ViT segmenter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: `{BATTA_OUT_ROOT or ./runs}/{label}-{unix seconds}`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub label: Option<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// Benchmark root or an `images/` + `masks/` folder.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to read below the benchmark root.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub prompt: Option<PromptArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PromptArg {
    Box,
    Point,
}

#[derive(Debug, Args, Clone, Default)]
pub struct InjectionArgs {
    /// none | overlay | embed_pre_block | embed_post_attn | gaussian_pre_block | gaussian_post_attn
    #[arg(long)]
    pub injection: Option<String>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub gain: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct AdaptArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// last_block_norms | last_block_attn_proj | last_block_all
    #[arg(long)]
    pub selector: Option<String>,
    #[arg(long)]
    pub l_s: Option<usize>,
    #[arg(long)]
    pub l_d: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub support_threshold: Option<f64>,
    /// Carry adapted weights from sample to sample.
    #[arg(long)]
    pub continual: bool,
    /// Let the alignment gradient reach the shallow features too.
    #[arg(long)]
    pub grad_shallow: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShiftArg {
    Contrast,
    Blur,
    Noise,
    Invert,
    Combo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    Stages,
    Strategies,
    Components,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark (clean train/val, shifted test).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Samples per split; overrides all three split sizes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long, value_enum)]
        shift: Option<ShiftArg>,
        #[arg(long)]
        severity: Option<f64>,
    },
    /// Train the toy model on the clean splits.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Zero-shot segmentation over a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        injection: InjectionArgs,
    },
    /// Per-sample test-time adaptation, then segmentation.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        injection: InjectionArgs,
        #[command(flatten)]
        adapt: AdaptArgs,
    },
    /// Stage, strategy and component sweeps.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        injection: InjectionArgs,
        #[command(flatten)]
        adapt: AdaptArgs,
        #[arg(long, value_enum, default_value = "all")]
        sweep: SweepArg,
    },
    /// Heatmap, boundary-map and Grad-CAM images for a few samples.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        injection: InjectionArgs,
        /// Number of samples (from the start of the split).
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Encoder block explained by Grad-CAM (default: last).
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Combine run summaries into comparison plots and a table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories holding `summary.json`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.model.encoder.seed = s;
        cfg.adaptation.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(l) = &common.label {
        cfg.label = l.clone();
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(d) = &a.data {
        cfg.data = d.clone();
    }
    if let Some(s) = &a.split {
        cfg.split = s.clone();
    }
    if let Some(c) = &a.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(p) = a.prompt {
        cfg.prompt = match p {
            PromptArg::Box => PromptKind::Box,
            PromptArg::Point => PromptKind::Point,
        };
    }
}

fn apply_injection(target: &mut InjectionConfig, a: &InjectionArgs) -> Result<()> {
    if let Some(s) = &a.injection {
        target.strategy =
            InjectionStrategy::parse(s).ok_or_else(|| invalid(format!("unknown injection strategy {s:?}")))?;
    }
    if let Some(k) = a.stages {
        target.stages = k;
    }
    if let Some(g) = a.gain {
        target.gain = g;
    }
    Ok(())
}

fn apply_adapt(cfg: &mut RunConfig, a: &AdaptArgs) -> Result<()> {
    let t = &mut cfg.adaptation;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = &a.selector {
        t.param_selector = ParamSelector::parse(v)?;
    }
    if let Some(v) = a.l_s {
        t.l_s = v;
    }
    if let Some(v) = a.l_d {
        t.l_d = v;
    }
    if let Some(v) = a.tau {
        t.tau = v;
    }
    if let Some(v) = a.delta {
        t.delta = v;
    }
    if let Some(v) = a.support_threshold {
        t.support_threshold = v;
    }
    if a.continual {
        t.episodic = false;
    }
    if a.grad_shallow {
        t.stop_grad_shallow = false;
    }
    Ok(())
}

fn create_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn load_eval_inputs(cfg: &RunConfig) -> Result<(Checkpoint, Vec<Sample>)> {
    let ckpt = Checkpoint::load(cfg.checkpoint_path()?)?;
    if ckpt.config.encoder.image_size != cfg.model.encoder.image_size {
        return Err(invalid("checkpoint image size differs from the configured image size"));
    }
    let samples = load_split(&cfg.split_dir(&cfg.split), ckpt.config.encoder.image_size)?;
    if samples.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    Ok((ckpt, samples))
}

fn write_summary(out: &Path, summary: &RunSummary) -> Result<Vec<PathBuf>> {
    let path = out.join("summary.json");
    write_json(&path, summary)?;
    let mut files = vec![path];
    files.extend(emit_plots(std::slice::from_ref(summary), out, &[])?);
    Ok(files)
}

fn print_summary(s: &RunSummary) {
    println!(
        "{}: n={} dice={:.4} miou={:.4} gate_pass={:.2} mean_steps={:.2} ms/img={:.1}",
        s.label, s.n, s.mean_dice, s.mean_miou, s.gate_pass_rate, s.mean_steps, s.mean_wall_time_ms
    );
}

#[derive(Serialize)]
struct AblationEntry<'a> {
    sweep: &'a str,
    label: &'a str,
    mean_dice: f64,
    mean_miou: f64,
    mean_wall_time_ms: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            n,
            n_train,
            n_val,
            n_test,
            shift,
            severity,
        } => {
            let mut cfg = load_config(&common)?;
            let d = &mut cfg.dataset;
            if let Some(n) = n {
                (d.n_train, d.n_val, d.n_test) = (n, n, n);
            }
            d.n_train = n_train.unwrap_or(d.n_train);
            d.n_val = n_val.unwrap_or(d.n_val);
            d.n_test = n_test.unwrap_or(d.n_test);
            if let Some(k) = shift {
                d.shift.kind = match k {
                    ShiftArg::Contrast => ShiftKind::Contrast,
                    ShiftArg::Blur => ShiftKind::Blur,
                    ShiftArg::Noise => ShiftKind::Noise,
                    ShiftArg::Invert => ShiftKind::Invert,
                    ShiftArg::Combo => ShiftKind::Combo,
                };
            }
            d.shift.severity = severity.unwrap_or(d.shift.severity);
            cfg.validate()?;
            let bench = gen_benchmark(&cfg.dataset, cfg.seed)?;
            let out = create_out(&cfg)?;
            let manifest = write_benchmark(&out, &cfg.dataset, cfg.seed, &bench)?;
            println!("wrote benchmark to {} ({})", out.display(), manifest.display());
        }
        Command::Pretrain {
            common,
            data,
            epochs,
            lr,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = data {
                cfg.data = d;
            }
            cfg.pretrain.epochs = epochs.unwrap_or(cfg.pretrain.epochs);
            cfg.pretrain.lr = lr.unwrap_or(cfg.pretrain.lr);
            cfg.validate()?;
            let size = cfg.model.encoder.image_size;
            let train = load_folder(&cfg.data.join("train/images"), &cfg.data.join("train/masks"), size)?;
            let val = load_folder(&cfg.data.join("val/images"), &cfg.data.join("val/masks"), size)?;
            if train.is_empty() {
                return Err(invalid("training split is empty"));
            }
            let ckpt = pretrain(&train, &val, &cfg.model, &cfg.pretrain, cfg.seed, |r| {
                println!(
                    "epoch {:>3}: train_loss={:.4} val_dice={:.4}",
                    r.epoch, r.train_loss, r.val_dice
                );
            })?;
            let train_dice = mean_dice(&ckpt.model()?, &train, cfg.pretrain.batch_size)?;
            let out = create_out(&cfg)?;
            ckpt.save(&out.join("checkpoint.batta"))?;
            write_json(
                &out.join("loss_curve.json"),
                &serde_json::json!({
                    "metadata": ckpt.metadata,
                    "train_dice": train_dice,
                    "config": cfg.snapshot(),
                }),
            )?;
            println!("train dice {train_dice:.4}; checkpoint at {}", out.join("checkpoint.batta").display());
        }
        Command::Eval {
            common,
            data,
            injection,
        } => {
            let mut cfg = load_config(&common)?;
            apply_data(&mut cfg, &data);
            apply_injection(&mut cfg.eval_injection, &injection)?;
            cfg.validate()?;
            let (ckpt, samples) = load_eval_inputs(&cfg)?;
            let records = eval_records(&ckpt.config, &ckpt.weights, &cfg.eval_injection, &samples, cfg.prompt, cfg.seed)?;
            let summary = aggregate(&cfg.label, cfg.seed, cfg.snapshot(), records)?;
            let out = create_out(&cfg)?;
            write_summary(&out, &summary)?;
            print_summary(&summary);
        }
        Command::Adapt {
            common,
            data,
            injection,
            adapt,
        } => {
            let mut cfg = load_config(&common)?;
            apply_data(&mut cfg, &data);
            apply_injection(&mut cfg.adapt_injection, &injection)?;
            apply_adapt(&mut cfg, &adapt)?;
            cfg.validate()?;
            let (ckpt, samples) = load_eval_inputs(&cfg)?;
            let records = adapt_records(
                &ckpt.config,
                &ckpt.weights,
                &cfg.adapt_injection,
                &samples,
                cfg.prompt,
                &cfg.adaptation,
            )?;
            let summary = aggregate(&cfg.label, cfg.seed, cfg.snapshot(), records)?;
            let out = create_out(&cfg)?;
            write_summary(&out, &summary)?;
            print_summary(&summary);
        }
        Command::Ablate {
            common,
            data,
            injection,
            adapt,
            sweep,
        } => {
            let mut cfg = load_config(&common)?;
            apply_data(&mut cfg, &data);
            apply_injection(&mut cfg.adapt_injection, &injection)?;
            apply_adapt(&mut cfg, &adapt)?;
            cfg.validate()?;
            let (ckpt, samples) = load_eval_inputs(&cfg)?;
            let out = create_out(&cfg)?;
            let sweeps: Vec<Sweep> = match sweep {
                SweepArg::Stages => vec![Sweep::Stages],
                SweepArg::Strategies => vec![Sweep::Strategies],
                SweepArg::Components => vec![Sweep::Components],
                SweepArg::All => Sweep::ALL.to_vec(),
            };
            let mut table = Vec::new();
            for sw in sweeps {
                let dir = out.join(sw.name());
                let mut summaries = Vec::new();
                for cell in sweep_cells(sw, ckpt.config.encoder.num_stages(), &cfg.adapt_injection) {
                    let s = run_cell(
                        &cell,
                        &ckpt.config,
                        &ckpt.weights,
                        &samples,
                        cfg.prompt,
                        &cfg.adaptation,
                        cfg.seed,
                        cfg.snapshot(),
                    )?;
                    let cell_dir = dir.join(&cell.label);
                    fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
                    write_json(&cell_dir.join("summary.json"), &s)?;
                    print_summary(&s);
                    summaries.push(s);
                }
                emit_plots(&summaries, &dir, &[])?;
                for s in &summaries {
                    table.push(serde_json::to_value(AblationEntry {
                        sweep: sw.name(),
                        label: &s.label,
                        mean_dice: s.mean_dice,
                        mean_miou: s.mean_miou,
                        mean_wall_time_ms: s.mean_wall_time_ms,
                    })?);
                }
            }
            write_json(&out.join("ablation.json"), &table)?;
        }
        Command::Inspect {
            common,
            data,
            injection,
            count,
            layer,
        } => {
            let mut cfg = load_config(&common)?;
            apply_data(&mut cfg, &data);
            apply_injection(&mut cfg.adapt_injection, &injection)?;
            cfg.validate()?;
            if count == 0 {
                return Err(invalid("count must be positive"));
            }
            let (ckpt, samples) = load_eval_inputs(&cfg)?;
            let model_cfg = cfg.adapt_injection.apply(&ckpt.config)?;
            let depth = model_cfg.encoder.depth;
            let layer = layer.unwrap_or(depth - 1);
            if layer >= depth {
                return Err(invalid(format!("layer {layer} out of range for depth {depth}")));
            }
            let model = crate::model::SegModel::from_weights(&model_cfg, &ckpt.weights)?;
            let out = create_out(&cfg)?;
            let a = &cfg.adaptation;
            let mut panels = Vec::new();
            let mut gates = Vec::new();
            for (k, s) in samples.iter().take(count).enumerate() {
                let prompts = cfg.prompt.prompts_for(s, k, cfg.seed)?;
                let image = image_batch(&[s])?;
                let heat = prompt_heatmaps(std::slice::from_ref(&prompts), &model_cfg.encoder)?.remove(0);
                let trace = model.encoder.encode(&image, Some(std::slice::from_ref(&prompts)))?;
                let fs = crate::bridge::tokens_to_feature_map(&trace.per_block[a.l_s])?;
                let m = boundary_map(&fs, a.boundary_eps, a.channel_reduce.into())?;
                let (_, _, h, w) = (0, 0, m.shape()[2], m.shape()[3]);
                let decision = batta_core::quality_gate(&m, &gate_region(&model_cfg, &prompts), &a.thresholds()?)?[0];
                gates.push(serde_json::json!({
                    "sample_id": s.id,
                    "gate_passed": decision.passed,
                    "mean_in": decision.mean_in,
                    "mean_out": decision.mean_out,
                }));
                let cam = gradcam_map(&model, &image, &prompts, layer)?;
                panels.push(MapPanel {
                    name: format!("heatmap_{}", s.id),
                    grid: heat.grid().clone(),
                });
                panels.push(MapPanel {
                    name: format!("boundary_{}", s.id),
                    grid: Grid::from_vec(h, w, m.sample(0).to_vec())?,
                });
                panels.push(MapPanel {
                    name: format!("gradcam_{}", s.id),
                    grid: cam.map,
                });
            }
            for p in &panels {
                let path = out.join(format!("{}.png", p.name));
                crate::data::save_png(&crate::report::grid_to_gray(&p.grid, 8), &path)?;
            }
            write_json(&out.join("inspect.json"), &gates)?;
            println!("wrote {} panels to {}", panels.len(), out.display());
        }
        Command::Report { common, runs } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let mut summaries = Vec::new();
            for dir in &runs {
                let path = dir.join("summary.json");
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let s: RunSummary = serde_json::from_str(&text)?;
                summaries.push(s);
            }
            let out = create_out(&cfg)?;
            emit_plots(&summaries, &out, &[])?;
            let table: Vec<_> = summaries
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "label": s.label,
                        "seed": s.seed,
                        "n": s.n,
                        "mean_dice": s.mean_dice,
                        "mean_miou": s.mean_miou,
                        "median_dice": s.median_dice,
                        "median_miou": s.median_miou,
                        "mean_wall_time_ms": s.mean_wall_time_ms,
                    })
                })
                .collect();
            write_json(&out.join("report.json"), &table)?;
            for s in &summaries {
                print_summary(s);
            }
        }
    }
    Ok(())
}
