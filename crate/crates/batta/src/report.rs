//! Per-sample records, run summaries and plot emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use batta_core::{dice, miou, Grid};
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::data::{save_png, Sample};
use crate::error::{invalid, Error, Result};
use crate::tta::StreamItem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub dice: f64,
    pub miou: f64,
    pub gate_passed: bool,
    pub steps_taken: usize,
    pub per_step_loss: Vec<f64>,
    pub wall_time_ms: f64,
    pub mode: String,
}

/// Scores stream items against their ground truth.
pub fn score(items: &[StreamItem], samples: &[Sample], mode: &str) -> Result<Vec<SampleRecord>> {
    if items.len() != samples.len() {
        return Err(invalid("items and samples differ in length"));
    }
    items
        .iter()
        .zip(samples)
        .map(|(it, s)| {
            Ok(SampleRecord {
                sample_id: it.sample_id.clone(),
                dice: dice(&it.result.mask, &s.mask)?,
                miou: miou(&it.result.mask, &s.mask)?,
                gate_passed: it.trace.gate_passed,
                steps_taken: it.trace.steps_taken,
                per_step_loss: it.trace.per_step_loss.clone(),
                wall_time_ms: it.result.wall_time_ms,
                mode: mode.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub n: usize,
    pub mean_dice: f64,
    pub mean_miou: f64,
    pub median_dice: f64,
    pub median_miou: f64,
    pub mean_wall_time_ms: f64,
    pub median_wall_time_ms: f64,
    pub gate_pass_rate: f64,
    pub mean_steps: f64,
    pub config: serde_json::Value,
    pub records: Vec<SampleRecord>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn aggregate(label: &str, seed: u64, config: serde_json::Value, records: Vec<SampleRecord>) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(invalid("cannot aggregate zero records"));
    }
    let col = |f: fn(&SampleRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    let dices = col(|r| r.dice);
    let mious = col(|r| r.miou);
    let times = col(|r| r.wall_time_ms);
    let gates = col(|r| r.gate_passed as u8 as f64);
    let steps = col(|r| r.steps_taken as f64);
    Ok(RunSummary {
        label: label.to_string(),
        seed,
        n: records.len(),
        mean_dice: mean(&dices),
        mean_miou: mean(&mious),
        median_dice: median(&dices),
        median_miou: median(&mious),
        mean_wall_time_ms: mean(&times),
        median_wall_time_ms: median(&times),
        gate_pass_rate: mean(&gates),
        mean_steps: mean(&steps),
        config,
        records,
    })
}

/// Drops every object key mentioning wall-clock time, recursively.
pub fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !k.contains("wall_time") && !k.contains("timestamp"));
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped vertical bar chart. `series` pairs a name with one value per label.
pub fn bar_chart_svg(title: &str, labels: &[String], series: &[(&str, Vec<f64>)], y_max: f64) -> String {
    const COLORS: [&str; 4] = ["#4477aa", "#ee6677", "#228833", "#ccbb44"];
    let (w, h, left, bottom, top) = (120.0 + 90.0 * labels.len() as f64, 320.0, 60.0, 70.0, 40.0);
    let plot_h = h - bottom - top;
    let group = 90.0;
    let bar = (group - 20.0) / series.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        h - bottom
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        h - bottom,
        w - 20.0
    );
    for t in 0..=4 {
        let v = y_max * t as f64 / 4.0;
        let y = h - bottom - plot_h * t as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#, left - 4.0, y + 4.0, v);
    }
    for (li, label) in labels.iter().enumerate() {
        let x0 = left + 10.0 + group * li as f64;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(li).copied().unwrap_or(0.0).max(0.0);
            let bh = if y_max > 0.0 { (v / y_max).min(1.0) * plot_h } else { 0.0 };
            let x = x0 + bar * si as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="{}"><title>{v:.4}</title></rect>"#,
                h - bottom - bh,
                bar - 2.0,
                COLORS[si % COLORS.len()]
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" transform="rotate(-30 {0:.1} {1:.1})">{}</text>"#,
            x0 + group / 2.0,
            h - bottom + 14.0,
            escape(label)
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let x = w - 110.0;
        let y = top + 14.0 * si as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            COLORS[si % COLORS.len()],
            x + 14.0,
            y,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// A named `[0, 1]` grid to render as a grayscale panel.
pub struct MapPanel {
    pub name: String,
    pub grid: Grid,
}

/// Grayscale PNG, value `round(255 v)` clamped, each cell drawn `scale` pixels wide.
pub fn grid_to_gray(grid: &Grid, scale: u32) -> GrayImage {
    let scale = scale.max(1);
    GrayImage::from_fn(grid.width() as u32 * scale, grid.height() as u32 * scale, |x, y| {
        let v = grid.get((y / scale) as usize, (x / scale) as usize);
        image::Luma([(255.0 * v).round().clamp(0.0, 255.0) as u8])
    })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes the Dice/mIoU and timing bar charts plus any map panels.
pub fn emit_plots(summaries: &[RunSummary], outdir: &Path, panels: &[MapPanel]) -> Result<Vec<PathBuf>> {
    if summaries.is_empty() {
        return Err(invalid("no summaries to plot"));
    }
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let labels: Vec<String> = summaries.iter().map(|s| s.label.clone()).collect();
    let mut written = Vec::new();
    let metrics = bar_chart_svg(
        "Mean Dice / mIoU",
        &labels,
        &[
            ("dice", summaries.iter().map(|s| s.mean_dice).collect()),
            ("miou", summaries.iter().map(|s| s.mean_miou).collect()),
        ],
        1.0,
    );
    let timing_values: Vec<f64> = summaries.iter().map(|s| s.mean_wall_time_ms).collect();
    let t_max = timing_values.iter().copied().fold(0.0, f64::max).max(1e-9) * 1.1;
    let timing = bar_chart_svg("Mean wall time per image (ms)", &labels, &[("ms", timing_values)], t_max);
    for (name, body) in [("metrics_bar.svg", metrics), ("timing_bar.svg", timing)] {
        let path = outdir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    for p in panels {
        let path = outdir.join(format!("{}.png", sanitize(&p.name)));
        save_png(&grid_to_gray(&p.grid, 8), &path)?;
        written.push(path);
    }
    Ok(written)
}
