//! Text-conditioned denoisers and the probe contract the editor relies on.
//!
//! A backend exposes noise predictions, the raw cross-attention logits and
//! post-attention hidden states of its probe layers, and a vector-Jacobian
//! product so losses built on those outputs can be differentiated exactly
//! with respect to the noisy latent.

mod codec;
mod descriptor;
mod toy;

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

pub use codec::{AudioCodec, ToyAudioCodec, ToyVideoCodec, VideoCodec};
pub use descriptor::{BackendDescriptor, BackendKind, ScheduleSpec, ToyParams};
pub use toy::ToyDenoiser;

use crate::error::Result;
use crate::latent::{DiffusionTimestep, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    VideoGrid,
    Audio,
}

/// Static properties of a denoiser.
#[derive(Debug, Clone)]
pub struct BackendInfo {
    pub modality: Modality,
    /// `channels × width × height` of one latent image the denoiser accepts.
    pub latent_shape: [usize; 3],
    pub schedule: NoiseSchedule,
    pub probe_layers: Vec<String>,
    /// Default guidance weight for this backend.
    pub guidance: f64,
    /// The delta-denoising gradient is divided by this before scaling.
    pub dds_gradient_divisor: f64,
}

impl BackendInfo {
    pub fn patches(&self) -> usize {
        self.latent_shape[1] * self.latent_shape[2]
    }
}

/// Token embeddings for one prompt, `n_tokens × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Array2<f64>,
}

/// Captured activations of one cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbe {
    pub layer: String,
    /// `n_q × d`
    pub queries: Array2<f64>,
    /// `n_k × d`
    pub keys: Array2<f64>,
    /// Pre-softmax `Q Kᵀ`, `n_q × n_k`.
    pub logits: Array2<f64>,
    /// Row-stochastic attention weights, `n_q × n_k`.
    pub attention: Array2<f64>,
    /// Post-attention hidden states, `n_q × d_h`.
    pub hidden: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeData {
    pub layers: Vec<LayerProbe>,
}

impl ProbeData {
    /// Hidden states used for contrastive sampling: the last probed layer.
    pub fn hidden(&self) -> Option<&Array2<f64>> {
        self.layers.last().map(|l| &l.hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub eps: Array3<f64>,
    pub probes: Option<ProbeData>,
}

/// Upstream gradients for a vector-Jacobian product.
#[derive(Debug, Clone, Default)]
pub struct OutputGrad {
    /// Gradient with respect to the noise prediction.
    pub eps: Option<Array3<f64>>,
    /// Gradients with respect to probe-layer hidden states, by layer position.
    pub hidden: Vec<(usize, Array2<f64>)>,
}

pub trait Denoiser: Send + Sync {
    fn info(&self) -> &BackendInfo;

    fn encode_text(&self, prompt: &str) -> Result<PromptEmbedding>;

    fn predict_noise(
        &self,
        z_t: ArrayView3<'_, f64>,
        prompt: &PromptEmbedding,
        t: &DiffusionTimestep,
        capture_probes: bool,
    ) -> Result<NoisePrediction>;

    /// Gradient of a scalar function of `predict_noise` outputs with respect
    /// to `z_t`, given the upstream gradients.
    fn vjp(
        &self,
        z_t: ArrayView3<'_, f64>,
        prompt: &PromptEmbedding,
        t: &DiffusionTimestep,
        grad: &OutputGrad,
    ) -> Result<Array3<f64>>;
}

/// The four components one edit run consumes.
#[derive(Clone)]
pub struct Backends {
    pub video: Arc<dyn Denoiser>,
    pub audio: Arc<dyn Denoiser>,
    pub video_codec: Arc<dyn VideoCodec>,
    pub audio_codec: Arc<dyn AudioCodec>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("video", &self.video.info().latent_shape)
            .field("audio", &self.audio.info().latent_shape)
            .finish()
    }
}

impl Backends {
    /// Built-in toy pair used by tests, the self-test and desk-scale runs.
    pub fn toy(seed: u64, grid_size: usize) -> Result<Self> {
        let video = BackendDescriptor::toy_video(seed);
        let audio = BackendDescriptor::toy_audio(seed);
        Self::from_descriptors(&video, &audio, grid_size)
    }

    /// Toy pair with explicit latent shapes, for small exact checks.
    pub fn toy_with_shapes(seed: u64, grid_size: usize, video_latent: [usize; 3], audio_latent: [usize; 3]) -> Result<Self> {
        let mut video = BackendDescriptor::toy_video(seed);
        video.latent_shape = video_latent;
        let mut audio = BackendDescriptor::toy_audio(seed);
        audio.latent_shape = audio_latent;
        Self::from_descriptors(&video, &audio, grid_size)
    }

    pub fn from_descriptors(
        video: &BackendDescriptor,
        audio: &BackendDescriptor,
        grid_size: usize,
    ) -> Result<Self> {
        Ok(Self {
            video: video.build_denoiser(Modality::VideoGrid)?,
            audio: audio.build_denoiser(Modality::Audio)?,
            video_codec: video.build_video_codec(grid_size)?,
            audio_codec: audio.build_audio_codec()?,
        })
    }
}
