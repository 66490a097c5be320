//! Threshold and grid-size ablations.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use duet_core::io::media::ingest_media;
use duet_core::io::output::Staging;
use duet_core::io::pipeline::{edit_media, load_backends, RunOptions};
use duet_core::latent::PromptPair;
use duet_core::metrics::{evaluate_clip, ClipMetrics, MetricSuite};
use rayon::prelude::*;
use serde::Serialize;

use crate::plot::{line_chart, Series};
use crate::Common;

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    source_prompt: Option<String>,
    #[arg(long)]
    target_prompt: String,
    #[arg(long)]
    out: PathBuf,
    /// Threshold values; each is applied to τ_a and τ_v separately.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
    taus: Vec<f64>,
    /// Grid sizes compared at the configured thresholds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    grids: Vec<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Serialize)]
struct Point {
    axis: &'static str,
    tau_a: f64,
    tau_v: f64,
    grid_size: usize,
    frames: usize,
    metrics: ClipMetrics,
}

pub fn run(args: SweepArgs) -> Result<()> {
    let file = args.common.load()?;
    let base = file.edit.clone();
    let staging = Staging::begin(&args.out, args.common.force)?;
    let prompts = PromptPair::new(args.source_prompt.clone(), args.target_prompt.clone())?;
    let suite = MetricSuite::toy();

    let mut plan: Vec<(&'static str, f64, f64, usize)> = Vec::new();
    for &t in &args.taus {
        plan.push(("tau_a", t, base.tau_v, base.grid_size));
    }
    for &t in &args.taus {
        plan.push(("tau_v", base.tau_a, t, base.grid_size));
    }
    for &g in &args.grids {
        plan.push(("grid", base.tau_a, base.tau_v, g));
    }

    let points = plan
        .par_iter()
        .map(|&(axis, tau_a, tau_v, grid_size)| -> Result<Point> {
            let mut config = base.clone();
            config.tau_a = tau_a;
            config.tau_v = tau_v;
            config.grid_size = grid_size;
            config.validate()?;
            let backends = load_backends(&file.backends, grid_size)?;
            let source = ingest_media(&args.clip, file.media.fps, backends.audio_codec.mel_params().sample_rate)?;
            let per = grid_size * grid_size;
            let keep = source.frames.len() / per * per;
            if keep == 0 {
                anyhow::bail!("clip has fewer than {per} frames for a {grid_size}x{grid_size} grid");
            }
            if keep != source.frames.len() {
                log::warn!(
                    "grid {grid_size}x{grid_size}: trimming {} trailing frames and their audio",
                    source.frames.len() - keep
                );
            }
            let source = source.truncated(keep);
            let edited = edit_media(&source, &prompts, &config, &backends, &RunOptions::default(), None)
                .with_context(|| format!("{axis} τa={tau_a} τv={tau_v} grid={grid_size}"))?;
            let name = format!("{axis}_a{tau_a}_v{tau_v}_g{grid_size}");
            let metrics = evaluate_clip(&name, &source, &edited.edited, &args.target_prompt, None, &suite)?;
            Ok(Point {
                axis,
                tau_a,
                tau_v,
                grid_size,
                frames: keep,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "tau_a", "tau_v", "grid_size", "frames", "clip_f", "clip_t", "dino", "clap", "lpaps", "ib", "av_align"])?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for p in &points {
        let m = &p.metrics;
        w.write_record([
            p.axis.to_string(),
            p.tau_a.to_string(),
            p.tau_v.to_string(),
            p.grid_size.to_string(),
            p.frames.to_string(),
            cell(m.clip_f),
            cell(m.clip_t),
            cell(m.dino),
            cell(m.clap),
            cell(m.lpaps),
            cell(m.ib),
            cell(m.av_align),
        ])?;
    }
    std::fs::write(staging.path().join("sweep.csv"), w.into_inner()?)?;
    std::fs::write(staging.path().join("sweep.json"), serde_json::to_string_pretty(&points)?)?;

    let series = |axis: &str, x: fn(&Point) -> f64, label: &str, y: fn(&ClipMetrics) -> Option<f64>| Series {
        label: label.to_string(),
        points: points
            .iter()
            .filter(|p| p.axis == axis)
            .filter_map(|p| y(&p.metrics).map(|v| (x(p), v)))
            .collect(),
    };
    let tau_plot = line_chart(
        "Impact of the threshold",
        "τ",
        "AV-Align",
        &[
            series("tau_a", |p| p.tau_a, "vary τ_a", |m| m.av_align),
            series("tau_v", |p| p.tau_v, "vary τ_v", |m| m.av_align),
        ],
    );
    std::fs::write(staging.path().join("threshold.svg"), tau_plot)?;
    let grid_plot = line_chart(
        "Grid size",
        "n_g",
        "score",
        &[
            series("grid", |p| p.grid_size as f64, "DINO", |m| m.dino),
            series("grid", |p| p.grid_size as f64, "CLIP-F", |m| m.clip_f),
            series("grid", |p| p.grid_size as f64, "AV-Align", |m| m.av_align),
        ],
    );
    std::fs::write(staging.path().join("grid.svg"), grid_plot)?;
    let dir = staging.commit()?;
    log::info!("wrote {} sweep points to {}", points.len(), dir.display());
    Ok(())
}
