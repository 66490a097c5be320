use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use duet_core::backend::{BackendDescriptor, Modality};
use duet_core::contrastive::PairingVariant;
use duet_core::edit::{EditConfig, Objective};
use duet_core::io::config::{load_config, BackendPaths, ConfigFile, JobSpec, MediaSettings};
use duet_core::io::media::{synthetic_clip, write_clip};
use duet_core::io::pipeline::{evaluate_output, load_backends, run_job, RunOptions};
use duet_core::metrics::{MetricReport, MetricSuite};
use rayon::prelude::*;

mod plot;
mod sweep;

#[derive(Parser)]
#[command(name = "duet", version, about = "Joint audio-video latent editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit one clip.
    Edit(EditArgs),
    /// Run every job of a config file.
    Batch(BatchArgs),
    /// Compute metrics over finished output trees.
    Eval(EvalArgs),
    /// Threshold and grid-size ablations on one clip.
    Sweep(sweep::SweepArgs),
    /// Toy-backend oracle checks.
    Selftest,
    /// Write a synthetic clip directory (moving square with beeps).
    Synth(SynthArgs),
}

/// Flags shared by every verb that runs edits.
#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML job file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Backend descriptor (JSON); repeat for video and audio.
    #[arg(long = "backend")]
    pub backends: Vec<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub tau_a: Option<f64>,
    #[arg(long)]
    pub tau_v: Option<f64>,
    /// cross-modal or cross-modal-plus-intramodal.
    #[arg(long)]
    pub pairing_variant: Option<PairingVariant>,
    /// cross-modal, dds-only or sds-only.
    #[arg(long)]
    pub objective: Option<Objective>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Write relevance heatmaps under relevance/.
    #[arg(long)]
    pub debug_relevance: bool,
}

impl Common {
    pub fn load(&self) -> Result<ConfigFile> {
        let mut file = match &self.config {
            Some(p) => load_config(p)?,
            None => ConfigFile::default(),
        };
        for path in &self.backends {
            let d = BackendDescriptor::load(path)?;
            match d.modality {
                Modality::VideoGrid => file.backends.video = Some(path.clone()),
                Modality::Audio => file.backends.audio = Some(path.clone()),
            }
        }
        self.apply(&mut file.edit)?;
        for job in &mut file.jobs {
            self.apply(&mut job.edit)?;
        }
        Ok(file)
    }

    pub fn apply(&self, c: &mut EditConfig) -> Result<()> {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.steps {
            c.total_steps = v;
            if c.warmup_steps >= v && v > 0 {
                log::warn!("--steps {v} leaves no room for {} warmup steps; warmup shortened to {}", c.warmup_steps, v - 1);
                c.warmup_steps = v - 1;
            }
        }
        if let Some(v) = self.tau_a {
            c.tau_a = v;
        }
        if let Some(v) = self.tau_v {
            c.tau_v = v;
        }
        if let Some(v) = self.pairing_variant {
            c.pairing_variant = v;
        }
        if let Some(v) = self.objective {
            c.objective = v;
        }
        c.validate()?;
        Ok(())
    }

    pub fn options(&self) -> RunOptions {
        RunOptions {
            force: self.force,
            debug_relevance: self.debug_relevance,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct EditArgs {
    /// Clip directory (frames/ + audio.wav); defaults to the config's single job.
    #[arg(long)]
    clip: Option<PathBuf>,
    #[arg(long)]
    source_prompt: Option<String>,
    #[arg(long)]
    target_prompt: Option<String>,
    #[arg(long)]
    target_object: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BatchArgs {
    /// Parallel jobs; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Output trees, or directories containing them.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    #[arg(long, default_value_t = 4.0)]
    fps: f64,
    #[arg(long, default_value_t = 48)]
    size: u32,
    #[arg(long, default_value_t = 16_000)]
    sample_rate: u32,
}

fn single_job(args: &EditArgs, file: ConfigFile) -> Result<(JobSpec, MediaSettings, BackendPaths)> {
    let job = match (&args.clip, file.jobs.len()) {
        (Some(clip), _) => JobSpec {
            clip: clip.clone(),
            source_prompt: args.source_prompt.clone(),
            target_prompt: args.target_prompt.clone().context("--target-prompt is required with --clip")?,
            target_object: args.target_object.clone(),
            out: args.out.clone().context("--out is required with --clip")?,
            edit: file.edit.clone(),
        },
        (None, 1) => {
            let mut job = file.jobs[0].clone();
            if let Some(out) = &args.out {
                job.out = out.clone();
            }
            job
        }
        (None, n) => bail!("pass --clip, or a config with exactly one job (found {n}); use `batch` for several"),
    };
    Ok((job, file.media, file.backends))
}

fn edit(args: EditArgs) -> Result<()> {
    let file = args.common.load()?;
    let (job, media, paths) = single_job(&args, file)?;
    let backends = load_backends(&paths, job.edit.grid_size)?;
    let out = run_job(&job, &media, &paths, &backends, &args.common.options())?;
    log::info!(
        "wrote {} ({} steps, {:.1} s)",
        out.out_dir.display(),
        out.summary.steps,
        out.summary.elapsed_seconds
    );
    Ok(())
}

fn batch(args: BatchArgs) -> Result<()> {
    let file = args.common.load()?;
    if file.jobs.is_empty() {
        bail!("the config defines no [[job]] entries");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()?;
    let options = args.common.options();
    let results: Vec<(PathBuf, Result<()>)> = pool.install(|| {
        file.jobs
            .par_iter()
            .map(|job| {
                let r = load_backends(&file.backends, job.edit.grid_size)
                    .and_then(|b| run_job(job, &file.media, &file.backends, &b, &options))
                    .map(|_| ())
                    .map_err(anyhow::Error::from);
                (job.out.clone(), r)
            })
            .collect()
    });
    let mut failed = 0;
    for (out, r) in &results {
        match r {
            Ok(()) => log::info!("done {}", out.display()),
            Err(e) => {
                failed += 1;
                log::error!("{}: {e:#}", out.display());
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} jobs failed", results.len());
    }
    Ok(())
}

fn output_trees(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(duet_core::io::output::CONFIG_FILE).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(duet_core::io::output::CONFIG_FILE).is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        bail!("{} holds no output trees", path.display());
    }
    Ok(found)
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut trees = Vec::new();
    for p in &args.paths {
        trees.extend(output_trees(p)?);
    }
    let suite = MetricSuite::toy();
    let rows = trees
        .par_iter()
        .map(|t| evaluate_output(t, &suite).with_context(|| format!("evaluating {}", t.display())))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::new(rows, suite.provenance());
    let csv = report.to_csv()?;
    match &args.csv {
        Some(p) => std::fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    if let Some(p) = &args.json {
        std::fs::write(p, report.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn selftest() -> Result<bool> {
    let results = duet_core::selftest::run_selftest();
    for r in &results {
        println!("{} {}{}", if r.passed { "PASS" } else { "FAIL" }, r.name, if r.detail.is_empty() { String::new() } else { format!(" ({})", r.detail) });
    }
    Ok(results.iter().all(|r| r.passed))
}

fn synth(args: SynthArgs) -> Result<()> {
    if args.out.exists() && std::fs::read_dir(&args.out)?.next().is_some() {
        bail!("{} is not empty", args.out.display());
    }
    let clip = synthetic_clip(args.seconds, args.fps, args.sample_rate, args.size);
    write_clip(&args.out, &clip)?;
    log::info!("wrote {} frames to {}", clip.frames.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Edit(a) => edit(a).map(|_| true),
        Command::Batch(a) => batch(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Sweep(a) => sweep::run(a).map(|_| true),
        Command::Selftest => selftest(),
        Command::Synth(a) => synth(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
