//! Embedding backends consumed by the metrics. The toy implementations are
//! hand-built feature extractors with no learned weights; they exist so the
//! harness runs end to end without model files.

use image::RgbImage;
use ndarray::Array1;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::media::{mel_spectrogram, MelParams, Waveform};
use crate::latent::gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    ImageText,
    AudioText,
    ImageSelfSup,
    AudioVisualJoint,
}

/// An embedding model. Methods a kind does not support return an error.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> EmbedderKind;
    fn dim(&self) -> usize;

    fn embed_image(&self, _image: &RgbImage) -> Result<Array1<f64>> {
        Err(self.unsupported("images"))
    }
    fn embed_text(&self, _text: &str) -> Result<Array1<f64>> {
        Err(self.unsupported("text"))
    }
    /// One embedding per exposed layer; single-layer models return one.
    fn embed_audio(&self, _audio: &Waveform) -> Result<Vec<Array1<f64>>> {
        Err(self.unsupported("audio"))
    }
    fn embed_video(&self, _frames: &[RgbImage], _fps: f64) -> Result<Array1<f64>> {
        Err(self.unsupported("video"))
    }

    fn unsupported(&self, what: &str) -> Error {
        Error::Backend(format!("embedder `{}` cannot embed {what}", self.name()))
    }
}

/// Open-vocabulary detector: highest confidence for `phrase` in one image.
pub trait ObjectDetector: Send + Sync {
    fn name(&self) -> &str;
    fn max_confidence(&self, image: &RgbImage, phrase: &str) -> Result<f64>;
}

fn text_vector(text: &str, dim: usize, salt: u64) -> Array1<f64> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ salt;
    for b in text.trim().to_lowercase().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    gaussian(&mut rand_chacha::ChaCha8Rng::seed_from_u64(h), ndarray::Ix1(dim))
}

/// Mean colour of each cell of a `cells × cells` partition, centred at mid-grey.
fn pooled_rgb(image: &RgbImage, cells: u32, luma_only: bool) -> Array1<f64> {
    let (w, h) = image.dimensions();
    let ch = if luma_only { 1 } else { 3 };
    let mut out = Vec::with_capacity((cells * cells) as usize * ch);
    for cx in 0..cells {
        for cy in 0..cells {
            let (x0, x1) = (cx * w / cells, ((cx + 1) * w / cells).max(cx * w / cells + 1).min(w));
            let (y0, y1) = (cy * h / cells, ((cy + 1) * h / cells).max(cy * h / cells + 1).min(h));
            let mut acc = [0.0; 3];
            for x in x0..x1 {
                for y in y0..y1 {
                    let p = image.get_pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0)).max(1) as f64;
            let rgb = acc.map(|v| v / n / 127.5 - 1.0);
            if luma_only {
                out.push(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]);
            } else {
                out.extend_from_slice(&rgb);
            }
        }
    }
    Array1::from(out)
}

/// Colour layout for images; hashed random directions for text.
#[derive(Debug, Clone)]
pub struct ToyImageText;

impl Embedder for ToyImageText {
    fn name(&self) -> &str {
        "toy-image-text"
    }
    fn kind(&self) -> EmbedderKind {
        EmbedderKind::ImageText
    }
    fn dim(&self) -> usize {
        12
    }
    fn embed_image(&self, image: &RgbImage) -> Result<Array1<f64>> {
        Ok(pooled_rgb(image, 2, false))
    }
    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        Ok(text_vector(text, self.dim(), 1))
    }
}

/// Luma layout on a 4×4 partition.
#[derive(Debug, Clone)]
pub struct ToyImageSelfSup;

impl Embedder for ToyImageSelfSup {
    fn name(&self) -> &str {
        "toy-image-self-sup"
    }
    fn kind(&self) -> EmbedderKind {
        EmbedderKind::ImageSelfSup
    }
    fn dim(&self) -> usize {
        16
    }
    fn embed_image(&self, image: &RgbImage) -> Result<Array1<f64>> {
        Ok(pooled_rgb(image, 4, true))
    }
}

/// Time-averaged log-mel at three band resolutions (one "layer" each).
#[derive(Debug, Clone)]
#[derive(Default)]
pub struct ToyAudioText {
    pub mel: MelParams,
}


impl Embedder for ToyAudioText {
    fn name(&self) -> &str {
        "toy-audio-text"
    }
    fn kind(&self) -> EmbedderKind {
        EmbedderKind::AudioText
    }
    fn dim(&self) -> usize {
        16
    }
    fn embed_audio(&self, audio: &Waveform) -> Result<Vec<Array1<f64>>> {
        let mel = mel_spectrogram(audio, &self.mel)?;
        let profile = mel.mean_axis(ndarray::Axis(1)).expect("spectrogram has frames");
        let pool = |bins: usize| {
            let per = profile.len() / bins;
            Array1::from_shape_fn(bins, |b| profile.slice(ndarray::s![b * per..(b + 1) * per]).mean().unwrap_or(0.0))
        };
        Ok(vec![pool(16), pool(8), pool(4)])
    }
    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        Ok(text_vector(text, self.dim(), 2))
    }
}

/// Event profiles: frame-difference energy for video and spectral flux for
/// audio, both resampled onto a common time axis.
#[derive(Debug, Clone)]
pub struct ToyAudioVisual {
    pub bins: usize,
}

impl Default for ToyAudioVisual {
    fn default() -> Self {
        Self { bins: 32 }
    }
}

fn to_bins(values: &[f64], dt: f64, duration: f64, bins: usize) -> Array1<f64> {
    let mut out = Array1::zeros(bins);
    for (k, v) in values.iter().enumerate() {
        let b = ((k as f64 * dt / duration) * bins as f64) as usize;
        out[b.min(bins - 1)] += v;
    }
    out
}

impl Embedder for ToyAudioVisual {
    fn name(&self) -> &str {
        "toy-audio-visual"
    }
    fn kind(&self) -> EmbedderKind {
        EmbedderKind::AudioVisualJoint
    }
    fn dim(&self) -> usize {
        self.bins
    }
    fn embed_video(&self, frames: &[RgbImage], fps: f64) -> Result<Array1<f64>> {
        let energy = super::av_align::motion_energy(frames);
        Ok(to_bins(&energy, 1.0 / fps, frames.len() as f64 / fps, self.bins))
    }
    fn embed_audio(&self, audio: &Waveform) -> Result<Vec<Array1<f64>>> {
        let cfg = super::av_align::AvAlignConfig::default();
        let flux = super::av_align::spectral_flux(audio, &cfg);
        let hop = (cfg.hop_seconds * audio.sample_rate as f64).round().max(1.0);
        Ok(vec![to_bins(&flux, hop / audio.sample_rate as f64, audio.duration(), self.bins)])
    }
}
