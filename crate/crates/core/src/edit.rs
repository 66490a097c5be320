//! The joint audio-video optimization loop.
//!
//! Each step packs the current video latent into shuffled grids, noises both
//! branches of both modalities with shared `(t, ε)`, runs the guided
//! denoisers, and moves the target latents along the scaled
//! delta-denoising direction plus the exact gradient of the cross-modal
//! contrastive loss.

use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::{Backends, Denoiser, Modality, OutputGrad, ProbeData, PromptEmbedding};
use crate::contrastive::{cmds_loss, match_dims, resample_matrix, ContrastiveConfig, GridPairing, IntramodalPairs, PairingVariant};
use crate::error::{Error, Result};
use crate::grid::{pack_grid, shuffle_frames, unpack_grid, FramePermutation, GridSpec};
use crate::guidance::{cfg_predict, dds_gradient, dds_loss};
use crate::latent::{gaussian, noise_with_alpha_bar, sample_timestep, AudioLatent, DiffusionTimestep, PromptPair, VideoLatent};
use crate::relevance::{relevance_map, threshold_patches, PatchIndexSets, RelevanceMap};
use crate::rng::{Branch, Polarity, Purpose, RngStreams};
use crate::sampler::{sample_count, EmbeddingBatch, Origin};

/// What the target latents are optimized against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Delta denoising plus the cross-modal contrastive term.
    #[default]
    CrossModal,
    /// Delta denoising only; no probes are captured.
    DdsOnly,
    /// Single-branch score distillation against the injected noise.
    SdsOnly,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-modal" => Ok(Self::CrossModal),
            "dds-only" => Ok(Self::DdsOnly),
            "sds-only" => Ok(Self::SdsOnly),
            other => Err(Error::config("objective", format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lambda_cmds: f64,
    /// `(warmup, main)` scale of the video delta-denoising gradient.
    pub video_dds_scale: (f64, f64),
    pub audio_dds_scale: (f64, f64),
    pub lr0: f64,
    pub lr_decay: f64,
    pub tau_a: f64,
    pub tau_v: f64,
    pub pos_rate: f64,
    pub neg_rate: f64,
    pub grid_size: usize,
    /// Guidance weights; the backend default applies when unset.
    pub omega_video: Option<f64>,
    pub omega_audio: Option<f64>,
    pub alpha: f64,
    pub cosine_epsilon: f64,
    pub seed: u64,
    pub pairing_variant: PairingVariant,
    pub objective: Objective,
    pub t_range: (f64, f64),
    /// Per-modality global gradient norm limit; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            total_steps: 200,
            warmup_steps: 15,
            lambda_cmds: 10.0,
            video_dds_scale: (2000.0, 4000.0),
            audio_dds_scale: (1000.0, 5000.0),
            lr0: 1.0,
            lr_decay: 0.99,
            tau_a: 0.8,
            tau_v: 0.8,
            pos_rate: 0.5,
            neg_rate: 0.8,
            grid_size: 2,
            omega_video: None,
            omega_audio: None,
            alpha: 0.07,
            cosine_epsilon: 1e-8,
            seed: 0,
            pairing_variant: PairingVariant::CrossModal,
            objective: Objective::CrossModal,
            t_range: (0.05, 0.95),
            grad_clip_norm: 10.0,
            checkpoint_every: 0,
        }
    }
}

fn in_unit(field: &str, v: f64, closed_low: bool) -> Result<()> {
    let ok = if closed_low { (0.0..=1.0).contains(&v) } else { v > 0.0 && v <= 1.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} outside {}0, 1]", if closed_low { "[" } else { "(" })))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} must be positive")))
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::config(
                "warmup_steps",
                format!("{} must be below total_steps = {}", self.warmup_steps, self.total_steps),
            ));
        }
        if !(self.lambda_cmds >= 0.0 && self.lambda_cmds.is_finite()) {
            return Err(Error::config("lambda_cmds", "must be finite and non-negative"));
        }
        positive("video_dds_scale[0]", self.video_dds_scale.0)?;
        positive("video_dds_scale[1]", self.video_dds_scale.1)?;
        positive("audio_dds_scale[0]", self.audio_dds_scale.0)?;
        positive("audio_dds_scale[1]", self.audio_dds_scale.1)?;
        positive("lr0", self.lr0)?;
        in_unit("lr_decay", self.lr_decay, false)?;
        in_unit("tau_a", self.tau_a, true)?;
        in_unit("tau_v", self.tau_v, true)?;
        in_unit("pos_rate", self.pos_rate, false)?;
        in_unit("neg_rate", self.neg_rate, false)?;
        if self.grid_size == 0 {
            return Err(Error::config("grid_size", "must be at least 1"));
        }
        for (field, w) in [("omega_video", self.omega_video), ("omega_audio", self.omega_audio)] {
            if let Some(w) = w {
                if !w.is_finite() {
                    return Err(Error::config(field, "must be finite"));
                }
            }
        }
        positive("alpha", self.alpha)?;
        positive("cosine_epsilon", self.cosine_epsilon)?;
        let (lo, hi) = self.t_range;
        if !(lo >= 0.0 && hi <= 1.0 && lo < hi) {
            return Err(Error::config("t_range", format!("({lo}, {hi}) is not a nonempty sub-interval of (0, 1)")));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::config("grad_clip_norm", "must be non-negative (0 disables)"));
        }
        Ok(())
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            alpha: self.alpha,
            cosine_epsilon: self.cosine_epsilon,
            pairing_variant: self.pairing_variant,
        }
    }
}

/// Scales, contrastive weight and learning rate in force at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepWeights {
    pub video_scale: f64,
    pub audio_scale: f64,
    pub cmds_weight: f64,
    pub lr: f64,
}

pub fn schedule_weights(step: usize, config: &EditConfig) -> Result<StepWeights> {
    if step >= config.total_steps {
        return Err(Error::config(
            "step",
            format!("step {step} outside a run of {} steps", config.total_steps),
        ));
    }
    let warm = step < config.warmup_steps;
    let pick = |(w, m): (f64, f64)| if warm { w } else { m };
    Ok(StepWeights {
        video_scale: pick(config.video_dds_scale),
        audio_scale: pick(config.audio_dds_scale),
        cmds_weight: if warm { 0.0 } else { config.lambda_cmds },
        lr: config.lr0 * config.lr_decay.powi(step as i32),
    })
}

/// Optimized and fixed latents of one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub theta_video: VideoLatent,
    pub theta_audio: AudioLatent,
    pub source_video: VideoLatent,
    pub source_audio: AudioLatent,
    pub step: usize,
    pub streams: RngStreams,
}

impl RunState {
    pub fn new(source_video: VideoLatent, source_audio: AudioLatent, seed: u64) -> Self {
        Self {
            theta_video: source_video.clone(),
            theta_audio: source_audio.clone(),
            source_video,
            source_audio,
            step: 0,
            streams: RngStreams::new(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchCounts {
    pub positive: usize,
    pub negative: usize,
}

impl From<&PatchIndexSets> for PatchCounts {
    fn from(s: &PatchIndexSets) -> Self {
        Self {
            positive: s.positive.len(),
            negative: s.negative.len(),
        }
    }
}

/// Relevance and sampling bookkeeping of one step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub audio_source: PatchCounts,
    pub audio_target: PatchCounts,
    pub video_source: Vec<PatchCounts>,
    pub video_target: Vec<PatchCounts>,
    /// Maps whose raw scores were constant.
    pub degenerate_maps: usize,
    /// Aligned `(positive, negative)` pair counts per grid.
    pub pairs: Vec<(usize, usize)>,
    pub degenerate_grids: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub weights: StepWeights,
    pub t_video: DiffusionTimestep,
    pub t_audio: DiffusionTimestep,
    pub perm: Vec<usize>,
    /// Unscaled delta-denoising losses, summed over grids for video.
    pub loss_dds_video: f64,
    pub loss_dds_audio: f64,
    pub loss_cmds: Option<f64>,
    /// `video_scale·L_v + audio_scale·L_a + cmds_weight·L_cmds`.
    pub loss_total: f64,
    pub relevance: Option<RelevanceRecord>,
    pub grad_norm_video: f64,
    pub grad_norm_audio: f64,
    pub clipped_video: bool,
    pub clipped_audio: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LogHeader {
    kind: String,
    seed: u64,
    config: EditConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LogLine {
    kind: String,
    #[serde(flatten)]
    record: StepRecord,
}

/// Run configuration followed by one record per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config: EditConfig,
    pub records: Vec<StepRecord>,
}

impl RunLog {
    /// One JSON object per line: a `config` header and then `step` lines.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&LogHeader {
            kind: "config".into(),
            seed: self.config.seed,
            config: self.config.clone(),
        })?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&LogLine {
                kind: "step".into(),
                record: r.clone(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: LogHeader = serde_json::from_str(
            lines.next().ok_or_else(|| Error::config("runlog", "empty log"))?,
        )?;
        if header.kind != "config" {
            return Err(Error::config("runlog", "first line must be the config header"));
        }
        let records = lines
            .map(|l| {
                let line: LogLine = serde_json::from_str(l)?;
                Ok(line.record)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: header.config,
            records,
        })
    }
}

struct BranchPrompts {
    target: PromptEmbedding,
    source: PromptEmbedding,
    null: PromptEmbedding,
}

impl BranchPrompts {
    fn encode(denoiser: &dyn Denoiser, prompts: &PromptPair) -> Result<Self> {
        Ok(Self {
            target: denoiser.encode_text(&prompts.target)?,
            source: denoiser.encode_text(prompts.source_or_null())?,
            null: denoiser.encode_text(PromptPair::NULL_PROMPT)?,
        })
    }
}

/// Everything constant across the steps of one run.
pub struct EditContext<'a> {
    pub backends: &'a Backends,
    pub config: &'a EditConfig,
    pub grid: GridSpec,
    omega_video: f64,
    omega_audio: f64,
    video_prompts: BranchPrompts,
    audio_prompts: BranchPrompts,
}

impl<'a> EditContext<'a> {
    pub fn new(
        backends: &'a Backends,
        prompts: &PromptPair,
        config: &'a EditConfig,
        video: &VideoLatent,
        audio: &AudioLatent,
    ) -> Result<Self> {
        config.validate()?;
        let grid = GridSpec::for_latent(config.grid_size, video.data.view())?;
        let vinfo = backends.video.info();
        let expect = [video.shape()[1], grid.grid_width(), grid.grid_height()];
        if vinfo.latent_shape != expect {
            return Err(Error::Shape {
                context: "video grid vs video backend latent",
                expected: vinfo.latent_shape.to_vec(),
                found: expect.to_vec(),
            });
        }
        let ainfo = backends.audio.info();
        if ainfo.latent_shape[..] != audio.shape()[..] {
            return Err(Error::Shape {
                context: "audio latent vs audio backend latent",
                expected: ainfo.latent_shape.to_vec(),
                found: audio.shape().to_vec(),
            });
        }
        Ok(Self {
            backends,
            config,
            grid,
            omega_video: config.omega_video.unwrap_or(vinfo.guidance),
            omega_audio: config.omega_audio.unwrap_or(ainfo.guidance),
            video_prompts: BranchPrompts::encode(backends.video.as_ref(), prompts)?,
            audio_prompts: BranchPrompts::encode(backends.audio.as_ref(), prompts)?,
        })
    }

    fn uses_probes(&self) -> bool {
        self.config.objective == Objective::CrossModal
    }
}

/// The stochastic draws of one step that do not depend on the latents.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub perm: FramePermutation,
    pub t_video: DiffusionTimestep,
    pub t_audio: DiffusionTimestep,
    /// `M × C × W × H`, one noise image per grid.
    pub eps_video: Array4<f64>,
    pub eps_audio: Array3<f64>,
}

impl StepNoise {
    pub fn draw(ctx: &EditContext<'_>, streams: &RngStreams, step: usize) -> Result<Self> {
        let vinfo = ctx.backends.video.info();
        let ainfo = ctx.backends.audio.info();
        let perm = shuffle_frames(ctx.grid.frames, &mut streams.stream(step, Purpose::Permutation));
        let t_video = sample_timestep(
            &mut streams.stream(step, Purpose::Timestep(Modality::VideoGrid)),
            ctx.config.t_range,
            &vinfo.schedule,
        )?;
        let t_audio = sample_timestep(
            &mut streams.stream(step, Purpose::Timestep(Modality::Audio)),
            ctx.config.t_range,
            &ainfo.schedule,
        )?;
        let [c, w, h] = vinfo.latent_shape;
        let eps_video = gaussian(
            &mut streams.stream(step, Purpose::Noise(Modality::VideoGrid)),
            ndarray::Dim([ctx.grid.grids(), c, w, h]),
        );
        let eps_audio = gaussian(
            &mut streams.stream(step, Purpose::Noise(Modality::Audio)),
            ndarray::Dim(ainfo.latent_shape),
        );
        Ok(Self {
            perm,
            t_video,
            t_audio,
            eps_video,
            eps_audio,
        })
    }
}

/// Guided predictions of one latent image on both branches.
struct Pass {
    z_t_target: Array3<f64>,
    eps_target: Array3<f64>,
    /// Guided source prediction, or the injected noise for score distillation.
    eps_source: Array3<f64>,
    probes_target: Option<ProbeData>,
    probes_source: Option<ProbeData>,
}

#[allow(clippy::too_many_arguments)]
fn run_pass(
    denoiser: &dyn Denoiser,
    prompts: &BranchPrompts,
    omega: f64,
    theta: ArrayView3<'_, f64>,
    source: ArrayView3<'_, f64>,
    t: &DiffusionTimestep,
    eps: ArrayView3<'_, f64>,
    objective: Objective,
) -> Result<Pass> {
    let ab = denoiser.info().schedule.alpha_bar(t);
    let probes = objective == Objective::CrossModal;
    let z_t_target = noise_with_alpha_bar(&theta, &eps, ab)?;
    let cond = denoiser.predict_noise(z_t_target.view(), &prompts.target, t, probes)?;
    let null = denoiser.predict_noise(z_t_target.view(), &prompts.null, t, false)?;
    let eps_target = cfg_predict(&cond.eps.view(), &null.eps.view(), omega)?;
    let (eps_source, probes_source) = if objective == Objective::SdsOnly {
        (eps.to_owned(), None)
    } else {
        let z_t_source = noise_with_alpha_bar(&source, &eps, ab)?;
        let cond = denoiser.predict_noise(z_t_source.view(), &prompts.source, t, probes)?;
        let null = denoiser.predict_noise(z_t_source.view(), &prompts.null, t, false)?;
        (cfg_predict(&cond.eps.view(), &null.eps.view(), omega)?, cond.probes)
    };
    Ok(Pass {
        z_t_target,
        eps_target,
        eps_source,
        probes_target: cond.probes,
        probes_source,
    })
}

struct Forward {
    video: Vec<Pass>,
    audio: Pass,
}

fn forward(ctx: &EditContext<'_>, state: &RunState, noise: &StepNoise) -> Result<Forward> {
    let theta_grids = pack_grid(state.theta_video.data.view(), &ctx.grid, &noise.perm)?;
    let source_grids = pack_grid(state.source_video.data.view(), &ctx.grid, &noise.perm)?;
    let objective = ctx.config.objective;
    let (video, audio) = rayon::join(
        || {
            use rayon::prelude::*;
            (0..ctx.grid.grids())
                .into_par_iter()
                .map(|m| {
                    run_pass(
                        ctx.backends.video.as_ref(),
                        &ctx.video_prompts,
                        ctx.omega_video,
                        theta_grids.index_axis(Axis(0), m),
                        source_grids.index_axis(Axis(0), m),
                        &noise.t_video,
                        noise.eps_video.index_axis(Axis(0), m),
                        objective,
                    )
                })
                .collect::<Result<Vec<_>>>()
        },
        || {
            run_pass(
                ctx.backends.audio.as_ref(),
                &ctx.audio_prompts,
                ctx.omega_audio,
                state.theta_audio.data.view(),
                state.source_audio.data.view(),
                &noise.t_audio,
                noise.eps_audio.view(),
                objective,
            )
        },
    );
    Ok(Forward { video: video?, audio: audio? })
}

/// Patch indices chosen for the contrastive term, after count alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPlan {
    pub audio_pos: Vec<usize>,
    pub video_pos: Vec<usize>,
    pub video_neg_src: Vec<usize>,
    pub audio_neg_src: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntramodalPlan {
    pub audio: Vec<usize>,
    pub video: Vec<Vec<usize>>,
}

/// A complete sampling decision; replaying it on the same latents yields the
/// same loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub grids: Vec<GridPlan>,
    pub intramodal: Option<IntramodalPlan>,
}

/// Relevance maps of one step, kept for debug output.
#[derive(Debug, Clone)]
pub struct StepRelevance {
    pub audio_source: RelevanceMap,
    pub audio_target: RelevanceMap,
    pub video_source: Vec<RelevanceMap>,
    pub video_target: Vec<RelevanceMap>,
}

fn probes(p: &Option<ProbeData>) -> Result<&ProbeData> {
    p.as_ref().ok_or_else(|| Error::Backend("denoiser returned no probes".into()))
}

fn draw_indices(
    streams: &RngStreams,
    step: usize,
    purpose: Purpose,
    pool: &[usize],
    rate: f64,
) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    let k = sample_count(rate, pool.len()).min(pool.len());
    rand::seq::index::sample(&mut streams.stream(step, purpose), pool.len(), k)
        .into_iter()
        .map(|p| pool[p])
        .collect()
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let set: std::collections::BTreeSet<_> = b.iter().copied().collect();
    a.iter().copied().filter(|i| set.contains(i)).collect()
}

/// Drop entries of the longer list uniformly at random until both lists have
/// equal length; survivors keep their order. Same rule as
/// [`crate::sampler::align_counts`], on bare indices.
fn align_pair(a: Vec<usize>, b: Vec<usize>, streams: &RngStreams, step: usize, purpose: Purpose) -> (Vec<usize>, Vec<usize>) {
    let n = a.len().min(b.len());
    let shrink = |v: Vec<usize>| {
        if v.len() == n {
            return v;
        }
        let mut kept = rand::seq::index::sample(&mut streams.stream(step, purpose), v.len(), n).into_vec();
        kept.sort_unstable();
        kept.into_iter().map(|p| v[p]).collect()
    };
    (shrink(a), shrink(b))
}

fn relevance_and_plan(
    ctx: &EditContext<'_>,
    streams: &RngStreams,
    step: usize,
    fwd: &Forward,
) -> Result<(SamplePlan, StepRelevance, RelevanceRecord)> {
    let cfg = ctx.config;
    let a_src = relevance_map(probes(&fwd.audio.probes_source)?, Branch::Source)?;
    let a_trg = relevance_map(probes(&fwd.audio.probes_target)?, Branch::Target)?;
    let ia_src = threshold_patches(&a_src, cfg.tau_a)?;
    let ia_trg = threshold_patches(&a_trg, cfg.tau_a)?;
    let mut v_src = Vec::new();
    let mut v_trg = Vec::new();
    for pass in &fwd.video {
        v_src.push(relevance_map(probes(&pass.probes_source)?, Branch::Source)?);
        v_trg.push(relevance_map(probes(&pass.probes_target)?, Branch::Target)?);
    }
    let iv_src = v_src.iter().map(|m| threshold_patches(m, cfg.tau_v)).collect::<Result<Vec<_>>>()?;
    let iv_trg = v_trg.iter().map(|m| threshold_patches(m, cfg.tau_v)).collect::<Result<Vec<_>>>()?;

    let sample = |modality, branch, polarity, grid: usize| Purpose::Sample {
        modality,
        branch,
        polarity,
        grid: grid as u32,
    };
    let audio_pos = draw_indices(
        streams,
        step,
        sample(Modality::Audio, Branch::Target, Polarity::Positive, 0),
        &ia_trg.positive,
        cfg.pos_rate,
    );
    let audio_neg_src = draw_indices(
        streams,
        step,
        sample(Modality::Audio, Branch::Source, Polarity::Negative, 0),
        &ia_src.negative,
        cfg.neg_rate,
    );
    let mut grids = Vec::with_capacity(fwd.video.len());
    let mut pairs = Vec::with_capacity(fwd.video.len());
    for g in 0..fwd.video.len() {
        let video_pos = draw_indices(
            streams,
            step,
            sample(Modality::VideoGrid, Branch::Target, Polarity::Positive, g),
            &iv_trg[g].positive,
            cfg.pos_rate,
        );
        let video_neg_src = draw_indices(
            streams,
            step,
            sample(Modality::VideoGrid, Branch::Source, Polarity::Negative, g),
            &iv_src[g].negative,
            cfg.neg_rate,
        );
        let (ap, vp) = align_pair(audio_pos.clone(), video_pos, streams, step, Purpose::Align { grid: g as u32, pairing: 0 });
        let (vn, an) = align_pair(video_neg_src, audio_neg_src.clone(), streams, step, Purpose::Align { grid: g as u32, pairing: 1 });
        pairs.push((ap.len(), vn.len()));
        grids.push(GridPlan {
            audio_pos: ap,
            video_pos: vp,
            video_neg_src: vn,
            audio_neg_src: an,
        });
    }
    let intramodal = match cfg.pairing_variant {
        PairingVariant::CrossModal => None,
        PairingVariant::CrossModalPlusIntramodal => Some(IntramodalPlan {
            audio: draw_indices(
                streams,
                step,
                sample(Modality::Audio, Branch::Target, Polarity::Negative, 0),
                &intersect(&ia_src.negative, &ia_trg.negative),
                cfg.neg_rate,
            ),
            video: (0..fwd.video.len())
                .map(|g| {
                    draw_indices(
                        streams,
                        step,
                        sample(Modality::VideoGrid, Branch::Target, Polarity::Negative, g),
                        &intersect(&iv_src[g].negative, &iv_trg[g].negative),
                        cfg.neg_rate,
                    )
                })
                .collect(),
        }),
    };
    let degenerate_maps = std::iter::once(&a_src)
        .chain(std::iter::once(&a_trg))
        .chain(v_src.iter())
        .chain(v_trg.iter())
        .filter(|m| m.degenerate)
        .count();
    let record = RelevanceRecord {
        audio_source: (&ia_src).into(),
        audio_target: (&ia_trg).into(),
        video_source: iv_src.iter().map(Into::into).collect(),
        video_target: iv_trg.iter().map(Into::into).collect(),
        degenerate_maps,
        pairs,
        degenerate_grids: 0,
    };
    let maps = StepRelevance {
        audio_source: a_src,
        audio_target: a_trg,
        video_source: v_src,
        video_target: v_trg,
    };
    Ok((SamplePlan { grids, intramodal }, maps, record))
}

fn hidden(p: &Option<ProbeData>) -> Result<&Array2<f64>> {
    probes(p)?
        .hidden()
        .ok_or_else(|| Error::Backend("probe data has no layers".into()))
}

fn origin(modality: Modality, branch: Branch, polarity: Polarity) -> Origin {
    Origin {
        modality,
        branch,
        polarity,
    }
}

fn scatter(into: &mut Array2<f64>, grad: &Array2<f64>, rows: &[usize]) {
    for (g, &i) in grad.rows().into_iter().zip(rows) {
        let mut row = into.row_mut(i);
        row += &g;
    }
}

/// Contrastive loss of a fixed plan and its gradients with respect to the
/// target-branch hidden states (`audio`, then one per grid).
struct CmdsEval {
    loss: f64,
    degenerate_grids: usize,
    g_audio: Array2<f64>,
    g_video: Vec<Array2<f64>>,
}

fn eval_cmds(ctx: &EditContext<'_>, fwd: &Forward, plan: &SamplePlan) -> Result<CmdsEval> {
    use Branch::{Source, Target};
    use Modality::{Audio, VideoGrid};
    use Polarity::{Negative, Positive};
    let ha_trg = hidden(&fwd.audio.probes_target)?;
    let ha_src = hidden(&fwd.audio.probes_source)?;
    let d_a = ha_trg.ncols();
    let d_v = hidden(&fwd.video[0].probes_target)?.ncols();

    let mut pairings = Vec::with_capacity(plan.grids.len());
    for (g, gp) in plan.grids.iter().enumerate() {
        let hv_trg = hidden(&fwd.video[g].probes_target)?;
        let hv_src = hidden(&fwd.video[g].probes_source)?;
        pairings.push(GridPairing {
            audio_pos: match_dims(&EmbeddingBatch::gather(ha_trg.view(), gp.audio_pos.clone(), origin(Audio, Target, Positive))?, d_v)?,
            video_pos: EmbeddingBatch::gather(hv_trg.view(), gp.video_pos.clone(), origin(VideoGrid, Target, Positive))?,
            video_neg_src: EmbeddingBatch::gather(hv_src.view(), gp.video_neg_src.clone(), origin(VideoGrid, Source, Negative))?,
            audio_neg_src: match_dims(&EmbeddingBatch::gather(ha_src.view(), gp.audio_neg_src.clone(), origin(Audio, Source, Negative))?, d_v)?,
        });
    }
    let intramodal = match &plan.intramodal {
        None => None,
        Some(ip) => {
            let pair = |src: &Array2<f64>, trg: &Array2<f64>, idx: &[usize], m| -> Result<(EmbeddingBatch, EmbeddingBatch)> {
                Ok((
                    EmbeddingBatch::gather(src.view(), idx.to_vec(), origin(m, Source, Negative))?,
                    EmbeddingBatch::gather(trg.view(), idx.to_vec(), origin(m, Target, Negative))?,
                ))
            };
            let video = ip
                .video
                .iter()
                .enumerate()
                .map(|(g, idx)| pair(hidden(&fwd.video[g].probes_source)?, hidden(&fwd.video[g].probes_target)?, idx, VideoGrid))
                .collect::<Result<Vec<_>>>()?;
            Some(IntramodalPairs {
                audio: pair(ha_src, ha_trg, &ip.audio, Audio)?,
                video,
            })
        }
    };
    let out = cmds_loss(&pairings, intramodal.as_ref(), &ctx.config.contrastive())?;

    let r = resample_matrix(d_a, d_v);
    let mut g_audio = Array2::zeros(ha_trg.raw_dim());
    let mut g_video = Vec::with_capacity(plan.grids.len());
    for (g, (gp, gg)) in plan.grids.iter().zip(&out.grids).enumerate() {
        let g_native = if d_a == d_v { gg.audio_pos.clone() } else { gg.audio_pos.dot(&r) };
        scatter(&mut g_audio, &g_native, &gp.audio_pos);
        let mut gv = Array2::zeros(hidden(&fwd.video[g].probes_target)?.raw_dim());
        scatter(&mut gv, &gg.video_pos, &gp.video_pos);
        g_video.push(gv);
    }
    if let (Some(ip), Some(ig)) = (&plan.intramodal, &out.intramodal) {
        scatter(&mut g_audio, &ig.audio.1, &ip.audio);
        for (g, (idx, (_, gt))) in ip.video.iter().zip(&ig.video).enumerate() {
            scatter(&mut g_video[g], gt, idx);
        }
    }
    Ok(CmdsEval {
        loss: out.loss,
        degenerate_grids: out.degenerate_grids,
        g_audio,
        g_video,
    })
}

/// Gradient of a hidden-state functional with respect to the clean target
/// latent: the denoiser VJP at `z_t` times `∂z_t/∂θ = √ᾱ`.
fn hidden_vjp(
    denoiser: &dyn Denoiser,
    pass: &Pass,
    prompt: &PromptEmbedding,
    t: &DiffusionTimestep,
    g_hidden: Array2<f64>,
) -> Result<Array3<f64>> {
    let layer = probes(&pass.probes_target)?.layers.len() - 1;
    let grad = OutputGrad {
        eps: None,
        hidden: vec![(layer, g_hidden)],
    };
    let g = denoiser.vjp(pass.z_t_target.view(), prompt, t, &grad)?;
    Ok(g * denoiser.info().schedule.alpha_bar(t).sqrt())
}

/// Contrastive loss and its exact gradients with respect to the target video
/// frames and target audio latent, for fixed noise and sampling decisions.
fn cmds_gradients(
    ctx: &EditContext<'_>,
    fwd: &Forward,
    noise: &StepNoise,
    plan: &SamplePlan,
) -> Result<(f64, usize, Array4<f64>, Array3<f64>)> {
    let eval = eval_cmds(ctx, fwd, plan)?;
    let [c, w, h] = ctx.backends.video.info().latent_shape;
    let mut grid_grads = Array4::zeros((ctx.grid.grids(), c, w, h));
    for (m, gv) in eval.g_video.into_iter().enumerate() {
        let g = hidden_vjp(ctx.backends.video.as_ref(), &fwd.video[m], &ctx.video_prompts.target, &noise.t_video, gv)?;
        grid_grads.index_axis_mut(Axis(0), m).assign(&g);
    }
    let g_video = unpack_grid(grid_grads.view(), &ctx.grid, &noise.perm)?;
    let g_audio = hidden_vjp(ctx.backends.audio.as_ref(), &fwd.audio, &ctx.audio_prompts.target, &noise.t_audio, eval.g_audio)?;
    Ok((eval.loss, eval.degenerate_grids, g_video, g_audio))
}

/// Contrastive loss at the current target latents under a fixed noise draw
/// and sampling plan, with its exact gradients `(∂L/∂θ_v, ∂L/∂θ_a)`.
pub fn cmds_objective(
    ctx: &EditContext<'_>,
    state: &RunState,
    noise: &StepNoise,
    plan: &SamplePlan,
) -> Result<(f64, Array4<f64>, Array3<f64>)> {
    if !ctx.uses_probes() {
        return Err(Error::config("objective", "contrastive loss needs the cross-modal objective"));
    }
    let fwd = forward(ctx, state, noise)?;
    let (loss, _, gv, ga) = cmds_gradients(ctx, &fwd, noise, plan)?;
    Ok((loss, gv, ga))
}

/// The sampling plan the loop would use at `state.step` for this noise draw.
pub fn sample_plan(ctx: &EditContext<'_>, state: &RunState, noise: &StepNoise) -> Result<SamplePlan> {
    let fwd = forward(ctx, state, noise)?;
    Ok(relevance_and_plan(ctx, &state.streams, state.step, &fwd)?.0)
}

fn norm<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn clip<D: ndarray::Dimension>(g: &mut ndarray::Array<f64, D>, limit: f64) -> (f64, bool) {
    let n = norm(g);
    if limit > 0.0 && n > limit {
        *g *= limit / n;
        (n, true)
    } else {
        (n, false)
    }
}

/// Output of one step besides the state update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: StepRecord,
    pub relevance: Option<StepRelevance>,
}

/// One optimization step; advances `state` in place.
pub fn edit_step(ctx: &EditContext<'_>, state: &mut RunState) -> Result<StepOutput> {
    let step = state.step;
    let weights = schedule_weights(step, ctx.config)?;
    let noise = StepNoise::draw(ctx, &state.streams, step)?;
    let fwd = forward(ctx, state, &noise)?;

    let vinfo = ctx.backends.video.info();
    let ainfo = ctx.backends.audio.info();
    let mut loss_dds_video = 0.0;
    let [c, w, h] = vinfo.latent_shape;
    let mut dds_grids = Array4::zeros((ctx.grid.grids(), c, w, h));
    for (m, pass) in fwd.video.iter().enumerate() {
        loss_dds_video += dds_loss(&pass.eps_target.view(), &pass.eps_source.view())?;
        dds_grids
            .index_axis_mut(Axis(0), m)
            .assign(&dds_gradient(&pass.eps_target.view(), &pass.eps_source.view())?);
    }
    let loss_dds_audio = dds_loss(&fwd.audio.eps_target.view(), &fwd.audio.eps_source.view())?;
    let mut grad_video = unpack_grid(dds_grids.view(), &ctx.grid, &noise.perm)? * (weights.video_scale / vinfo.dds_gradient_divisor);
    let mut grad_audio =
        dds_gradient(&fwd.audio.eps_target.view(), &fwd.audio.eps_source.view())? * (weights.audio_scale / ainfo.dds_gradient_divisor);

    let post_warmup = step >= ctx.config.warmup_steps;
    let mut loss_cmds = None;
    let mut relevance = None;
    let mut maps = None;
    if ctx.uses_probes() && post_warmup {
        let (plan, step_maps, mut rec) = relevance_and_plan(ctx, &state.streams, step, &fwd)?;
        let (loss, degenerate, gv, ga) = cmds_gradients(ctx, &fwd, &noise, &plan)?;
        rec.degenerate_grids = degenerate;
        if weights.cmds_weight != 0.0 {
            grad_video.scaled_add(weights.cmds_weight, &gv);
            grad_audio.scaled_add(weights.cmds_weight, &ga);
        }
        loss_cmds = Some(loss);
        relevance = Some(rec);
        maps = Some(step_maps);
    }
    let loss_total = weights.video_scale * loss_dds_video
        + weights.audio_scale * loss_dds_audio
        + if weights.cmds_weight != 0.0 { weights.cmds_weight * loss_cmds.unwrap_or(0.0) } else { 0.0 };

    let (grad_norm_video, clipped_video) = clip(&mut grad_video, ctx.config.grad_clip_norm);
    let (grad_norm_audio, clipped_audio) = clip(&mut grad_audio, ctx.config.grad_clip_norm);
    let record = StepRecord {
        step,
        weights,
        t_video: noise.t_video,
        t_audio: noise.t_audio,
        perm: noise.perm.order.clone(),
        loss_dds_video,
        loss_dds_audio,
        loss_cmds,
        loss_total,
        relevance,
        grad_norm_video,
        grad_norm_audio,
        clipped_video,
        clipped_audio,
    };
    if !(grad_norm_video.is_finite() && grad_norm_audio.is_finite()) {
        return Err(Error::Diverged {
            step,
            reason: format!("non-finite gradient norm (video {grad_norm_video}, audio {grad_norm_audio})"),
            record: Box::new(record),
        });
    }
    if clipped_video || clipped_audio {
        log::debug!("step {step}: gradient clipped (video {grad_norm_video:.3e}, audio {grad_norm_audio:.3e})");
    }
    state.theta_video.data.scaled_add(-weights.lr, &grad_video);
    state.theta_audio.data.scaled_add(-weights.lr, &grad_audio);
    state.step += 1;
    Ok(StepOutput { record, relevance: maps })
}

/// Final latents and log of a run.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub video: VideoLatent,
    pub audio: AudioLatent,
    pub log: RunLog,
    pub elapsed: Duration,
}

/// Run a full edit. `observer` sees the state after every step and may abort
/// with an error.
pub fn run_edit_with<F>(
    video: &VideoLatent,
    audio: &AudioLatent,
    prompts: &PromptPair,
    backends: &Backends,
    config: &EditConfig,
    mut observer: F,
) -> Result<EditOutcome>
where
    F: FnMut(&RunState, &StepOutput) -> Result<()>,
{
    let start = Instant::now();
    let ctx = EditContext::new(backends, prompts, config, video, audio)?;
    let mut state = RunState::new(video.clone(), audio.clone(), config.seed);
    let mut records = Vec::with_capacity(config.total_steps);
    while state.step < config.total_steps {
        let out = edit_step(&ctx, &mut state)?;
        observer(&state, &out)?;
        records.push(out.record);
    }
    Ok(EditOutcome {
        video: state.theta_video,
        audio: state.theta_audio,
        log: RunLog {
            config: config.clone(),
            records,
        },
        elapsed: start.elapsed(),
    })
}

pub fn run_edit(
    video: &VideoLatent,
    audio: &AudioLatent,
    prompts: &PromptPair,
    backends: &Backends,
    config: &EditConfig,
) -> Result<EditOutcome> {
    run_edit_with(video, audio, prompts, backends, config, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        EditConfig::default().validate().unwrap();
    }

    #[test]
    fn schedule_boundary() {
        let c = EditConfig::default();
        let w14 = schedule_weights(14, &c).unwrap();
        let w15 = schedule_weights(15, &c).unwrap();
        assert_eq!((w14.video_scale, w14.audio_scale, w14.cmds_weight), (2000.0, 1000.0, 0.0));
        assert_eq!((w15.video_scale, w15.audio_scale, w15.cmds_weight), (4000.0, 5000.0, 10.0));
        assert_eq!(schedule_weights(0, &c).unwrap().lr, 1.0);
        assert!(schedule_weights(200, &c).is_err());
    }

    #[test]
    fn invalid_fields_are_named() {
        let c = EditConfig {
            pos_rate: 1.5,
            ..Default::default()
        };
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "pos_rate"),
            other => panic!("{other:?}"),
        }
        let c = EditConfig {
            warmup_steps: 200,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = EditConfig {
            total_steps: 0,
            ..Default::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn objective_parses() {
        assert_eq!("sds-only".parse::<Objective>().unwrap(), Objective::SdsOnly);
        assert!("dds".parse::<Objective>().is_err());
    }
}
