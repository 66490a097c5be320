//! From clip directory to output tree.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;

use crate::backend::{BackendDescriptor, Backends};
use crate::edit::{run_edit_with, EditConfig, EditOutcome, RunState, StepOutput};
use crate::error::{Error, Result};
use crate::io::checkpoint::{save_checkpoint, Checkpoint};
use crate::io::config::{BackendPaths, JobSpec, MediaSettings, ResolvedRun};
use crate::io::media::{ingest_media, read_wav, MediaClip};
use crate::io::output::{relevance_heatmap, write_outputs, EditArtifacts, Staging, Summary, AUDIO_FILE, CONFIG_FILE, FRAMES_DIR};
use crate::latent::{AudioLatent, PromptPair, VideoLatent};
use crate::metrics::{evaluate_clip, ClipMetrics, MetricSuite};

/// Seed of the built-in toy denoiser weights (independent of the run seed).
pub const TOY_WEIGHT_SEED: u64 = 0;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub force: bool,
    pub debug_relevance: bool,
    /// Heatmaps are kept for every this many steps (and the last step).
    pub debug_every: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            force: false,
            debug_relevance: false,
            debug_every: 10,
        }
    }
}

/// Toy defaults for any descriptor not given.
pub fn load_backends(paths: &BackendPaths, grid_size: usize) -> Result<Backends> {
    let video = match &paths.video {
        Some(p) => BackendDescriptor::load(p)?,
        None => BackendDescriptor::toy_video(TOY_WEIGHT_SEED),
    };
    let audio = match &paths.audio {
        Some(p) => BackendDescriptor::load(p)?,
        None => BackendDescriptor::toy_audio(TOY_WEIGHT_SEED),
    };
    Backends::from_descriptors(&video, &audio, grid_size)
}

pub fn backend_names(paths: &BackendPaths) -> (String, String) {
    let name = |p: &Option<PathBuf>, toy: &str| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| toy.to_string());
    (name(&paths.video, "toy-video"), name(&paths.audio, "toy-audio"))
}

/// An edited clip with everything needed to write its output tree.
pub struct EditedMedia {
    pub edited: MediaClip,
    pub outcome: EditOutcome,
    pub source_mel: Array2<f64>,
    pub edited_mel: Array2<f64>,
    pub heatmaps: Vec<(PathBuf, RgbImage)>,
}

fn heatmaps_for(step: usize, out: &StepOutput, backends: &Backends) -> Result<Vec<(PathBuf, RgbImage)>> {
    let Some(rel) = &out.relevance else {
        return Ok(Vec::new());
    };
    let [_, aw, ah] = backends.audio.info().latent_shape;
    let [_, vw, vh] = backends.video.info().latent_shape;
    let dir = PathBuf::from("relevance").join(format!("step_{step:04}"));
    let zoom = (64 / vw.max(aw).max(1)).max(1) as u32;
    let mut images = vec![
        (dir.join("audio_source.png"), relevance_heatmap(&rel.audio_source.scores.to_vec(), aw, ah, zoom)?),
        (dir.join("audio_target.png"), relevance_heatmap(&rel.audio_target.scores.to_vec(), aw, ah, zoom)?),
    ];
    for (g, (s, t)) in rel.video_source.iter().zip(&rel.video_target).enumerate() {
        images.push((dir.join(format!("video_g{g:02}_source.png")), relevance_heatmap(&s.scores.to_vec(), vw, vh, zoom)?));
        images.push((dir.join(format!("video_g{g:02}_target.png")), relevance_heatmap(&t.scores.to_vec(), vw, vh, zoom)?));
    }
    Ok(images)
}

/// Encode, edit and decode an in-memory clip. Checkpoints go to
/// `workdir/checkpoints` when a workdir is given.
pub fn edit_media(
    clip: &MediaClip,
    prompts: &PromptPair,
    config: &EditConfig,
    backends: &Backends,
    options: &RunOptions,
    workdir: Option<&Path>,
) -> Result<EditedMedia> {
    clip.check_consistent()?;
    let per_grid = config.grid_size * config.grid_size;
    if !clip.frames.len().is_multiple_of(per_grid) {
        return Err(Error::Grid(format!(
            "{} frames do not fill {}x{} grids; trim the clip to a multiple of {per_grid} frames",
            clip.frames.len(),
            config.grid_size,
            config.grid_size
        )));
    }
    let video = VideoLatent::new(backends.video_codec.encode(&clip.frames)?, clip.fps)?;
    let audio = AudioLatent::new(backends.audio_codec.encode(&clip.audio)?, clip.audio.duration())?;

    let ckpt_dir = workdir.map(|w| w.join("checkpoints"));
    if let (Some(dir), true) = (&ckpt_dir, config.checkpoint_every > 0) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut heatmaps = Vec::new();
    let observer = |state: &RunState, out: &StepOutput| -> Result<()> {
        let step = out.record.step;
        if let (Some(dir), k) = (&ckpt_dir, config.checkpoint_every) {
            if k > 0 && state.step.is_multiple_of(k) {
                save_checkpoint(
                    &dir.join(format!("step_{:04}.safetensors", state.step)),
                    &Checkpoint {
                        step: state.step,
                        seed: config.seed,
                        video: state.theta_video.data.clone(),
                        audio: state.theta_audio.data.clone(),
                    },
                )?;
            }
        }
        if options.debug_relevance && (step.is_multiple_of(options.debug_every.max(1)) || step + 1 == config.total_steps) {
            heatmaps.extend(heatmaps_for(step, out, backends)?);
        }
        log::debug!(
            "step {step}: dds video {:.4e} audio {:.4e} cmds {:?}",
            out.record.loss_dds_video,
            out.record.loss_dds_audio,
            out.record.loss_cmds
        );
        Ok(())
    };
    let outcome = run_edit_with(&video, &audio, prompts, backends, config, observer)?;

    let (w, h) = clip.frames[0].dimensions();
    let frames = backends.video_codec.decode(outcome.video.data.view(), w, h)?;
    let wave = backends.audio_codec.decode_waveform(outcome.audio.data.view(), clip.audio.duration())?;
    let mel_frames = clip.audio.samples.len() * backends.audio_codec.mel_params().sample_rate as usize
        / clip.audio.sample_rate as usize
        / backends.audio_codec.mel_params().hop_length
        + 1;
    let source_mel = backends.audio_codec.decode_mel(audio.data.view(), mel_frames)?;
    let edited_mel = backends.audio_codec.decode_mel(outcome.audio.data.view(), mel_frames)?;
    Ok(EditedMedia {
        edited: MediaClip {
            frames,
            fps: clip.fps,
            audio: wave,
        },
        outcome,
        source_mel,
        edited_mel,
        heatmaps,
    })
}

pub struct JobOutcome {
    pub out_dir: PathBuf,
    pub source: MediaClip,
    pub edited: MediaClip,
    pub summary: Summary,
}

/// Full job: ingest, edit, decode and write the output tree atomically.
pub fn run_job(job: &JobSpec, media: &MediaSettings, backend_paths: &BackendPaths, backends: &Backends, options: &RunOptions) -> Result<JobOutcome> {
    let staging = Staging::begin(&job.out, options.force)?;
    let source = ingest_media(&job.clip, media.fps, backends.audio_codec.mel_params().sample_rate)?;
    let prompts = job.prompts()?;
    let edited = edit_media(&source, &prompts, &job.edit, backends, options, Some(staging.path()))?;

    let log = &edited.outcome.log;
    let last = log.records.last();
    let (video_backend, audio_backend) = backend_names(backend_paths);
    let summary = Summary {
        seed: job.edit.seed,
        steps: log.records.len(),
        elapsed_seconds: edited.outcome.elapsed.as_secs_f64(),
        frames: source.frames.len(),
        fps: source.fps,
        audio_seconds: source.audio.duration(),
        final_loss_dds_video: last.map(|r| r.loss_dds_video),
        final_loss_dds_audio: last.map(|r| r.loss_dds_audio),
        final_loss_cmds: last.and_then(|r| r.loss_cmds),
        video_backend,
        audio_backend,
    };
    let resolved = ResolvedRun {
        job: job.clone(),
        media: media.clone(),
        backends: backend_paths.clone(),
    }
    .emit()?;
    write_outputs(
        staging.path(),
        &EditArtifacts {
            frames: &edited.edited.frames,
            fps: edited.edited.fps,
            audio: &edited.edited.audio,
            source_mel: &edited.source_mel,
            edited_mel: &edited.edited_mel,
            runlog: &log.to_jsonl()?,
            config_resolved: &resolved,
            summary: &summary,
            extra_images: &edited.heatmaps,
        },
    )?;
    let out_dir = staging.commit()?;
    Ok(JobOutcome {
        out_dir,
        source,
        edited: edited.edited,
        summary,
    })
}

/// Metrics for one finished output tree, against the source clip named in
/// its `config.resolved`.
pub fn evaluate_output(dir: &Path, suite: &MetricSuite) -> Result<ClipMetrics> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let run = ResolvedRun::parse(&text, &path.display().to_string())?;
    let audio = read_wav(&dir.join(AUDIO_FILE))?;
    let mut frames_paths: Vec<PathBuf> = std::fs::read_dir(dir.join(FRAMES_DIR))
        .map_err(|e| Error::io(dir.join(FRAMES_DIR), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    frames_paths.sort();
    let frames = frames_paths
        .iter()
        .map(|p| image::open(p).map(|i| i.to_rgb8()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let edited = MediaClip {
        frames,
        fps: run.media.fps,
        audio,
    };
    let source = ingest_media(&run.job.clip, run.media.fps, edited.audio.sample_rate)?.truncated(edited.frames.len());
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    evaluate_clip(
        &name,
        &source,
        &edited,
        &run.job.target_prompt,
        run.job.target_object.as_deref(),
        suite,
    )
}
