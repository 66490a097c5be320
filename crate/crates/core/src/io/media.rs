//! Media ingestion: frame directories, WAV audio and log-mel spectrograms.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, rate: u32) -> Waveform {
        if rate == self.sample_rate || self.samples.is_empty() {
            return Waveform {
                samples: self.samples.clone(),
                sample_rate: rate,
            };
        }
        let n_out = ((self.samples.len() as u64 * rate as u64) / self.sample_rate as u64) as usize;
        let ratio = self.sample_rate as f64 / rate as f64;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (pos.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = (pos - i0 as f64) as f32;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        Waveform { samples, sample_rate: rate }
    }
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in &wave.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Spectrogram conventions of an audio backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop_length: 160,
            win_length: 1024,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8_000.0,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.hop_length == 0 || self.n_mels == 0 {
            return Err(Error::config("mel", "n_fft, hop_length and n_mels must be positive"));
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::config("mel.win_length", "must lie in 1..=n_fft"));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::config("mel.f_max", "need 0 <= f_min < f_max <= sample_rate/2"));
        }
        Ok(())
    }

    /// Center frequency of each mel band (HTK scale).
    pub fn band_centers(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        (1..=self.n_mels)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }

    /// Triangular filterbank, `n_mels × (n_fft/2 + 1)`.
    pub fn filterbank(&self) -> Array2<f64> {
        let n_bins = self.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        let edges: Vec<f64> = (0..self.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect();
        let bin_hz = self.sample_rate as f64 / self.n_fft as f64;
        Array2::from_shape_fn((self.n_mels, n_bins), |(m, k)| {
            let f = k as f64 * bin_hz;
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            if f <= l || f >= r {
                0.0
            } else if f <= c {
                (f - l) / (c - l)
            } else {
                (r - f) / (r - c)
            }
        })
    }
}

/// Magnitude STFT with a periodic Hann window, `frames × (n_fft/2 + 1)`.
pub fn magnitude_stft(samples: &[f32], n_fft: usize, hop: usize, win: usize) -> Array2<f64> {
    let frames = if samples.len() < hop { 1 } else { samples.len() / hop + 1 };
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let offset = (n_fft - win) / 2;
    let mut out = Array2::zeros((frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        // centered frames
        let start = (f * hop) as isize - (n_fft / 2) as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(0.0, 0.0);
            if i >= offset && i < offset + win {
                let s = start + i as isize;
                if s >= 0 && (s as usize) < samples.len() {
                    *b = Complex::new(samples[s as usize] as f64 * window[i - offset], 0.0);
                }
            }
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[[f, k]] = buf[k].norm();
        }
    }
    out
}

/// Natural-log mel power spectrogram, `n_mels × frames`.
pub fn mel_spectrogram(wave: &Waveform, params: &MelParams) -> Result<Array2<f64>> {
    params.validate()?;
    let wave = wave.resample(params.sample_rate);
    let mag = magnitude_stft(&wave.samples, params.n_fft, params.hop_length, params.win_length);
    let power = mag.mapv(|m| m * m);
    let mel = params.filterbank().dot(&power.t());
    Ok(mel.mapv(|v| (v + 1e-5).ln()))
}

/// A decoded clip: frames at a fixed rate plus mono audio.
#[derive(Debug, Clone)]
pub struct MediaClip {
    pub frames: Vec<RgbImage>,
    pub fps: f64,
    pub audio: Waveform,
}

impl MediaClip {
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    /// Audio must cover the frame span within one frame period.
    pub fn check_consistent(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Media("clip has no frames".into()));
        }
        let (w, h) = self.frames[0].dimensions();
        if self.frames.iter().any(|f| f.dimensions() != (w, h)) {
            return Err(Error::Media("frames differ in resolution".into()));
        }
        let gap = (self.audio.duration() - self.duration()).abs();
        if gap > 1.0 / self.fps + 1e-9 {
            return Err(Error::Media(format!(
                "audio lasts {:.3} s but frames span {:.3} s",
                self.audio.duration(),
                self.duration()
            )));
        }
        Ok(())
    }

    /// Keep the first `frames` frames and the matching audio prefix.
    pub fn truncated(&self, frames: usize) -> MediaClip {
        let frames = frames.min(self.frames.len());
        let samples = ((frames as f64 / self.fps) * self.audio.sample_rate as f64).round() as usize;
        MediaClip {
            frames: self.frames[..frames].to_vec(),
            fps: self.fps,
            audio: Waveform {
                samples: self.audio.samples[..samples.min(self.audio.samples.len())].to_vec(),
                sample_rate: self.audio.sample_rate,
            },
        }
    }
}

/// Optional `clip.json` next to the frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub fps: f64,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    frames.sort();
    Ok(frames)
}

/// Load a clip directory holding `frames/` (numbered images), `audio.wav`
/// and optionally `clip.json` with the source frame rate.
///
/// Frames are resampled by nearest-time selection to `fps`; audio is
/// resampled to `sample_rate`.
pub fn ingest_media(path: &Path, fps: f64, sample_rate: u32) -> Result<MediaClip> {
    if path.is_file() {
        return Err(Error::Media(format!(
            "{}: video containers are not decoded directly; extract frames into a clip directory \
             (frames/NNNN.png + audio.wav)",
            path.display()
        )));
    }
    let frames_dir = path.join("frames");
    let wav = path.join("audio.wav");
    if !frames_dir.is_dir() || !wav.is_file() {
        return Err(Error::Media(format!(
            "{}: expected frames/ and audio.wav inside the clip directory",
            path.display()
        )));
    }
    let manifest = path.join("clip.json");
    let source_fps = if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        serde_json::from_str::<ClipManifest>(&text)?.fps
    } else {
        fps
    };
    if !(source_fps > 0.0) {
        return Err(Error::Media("clip frame rate must be positive".into()));
    }
    let paths = list_frames(&frames_dir)?;
    if paths.is_empty() {
        return Err(Error::Media(format!("{}: no frames found", frames_dir.display())));
    }
    let decoded: Vec<RgbImage> = paths
        .iter()
        .map(|p| image::open(p).map(|i| i.to_rgb8()))
        .collect::<std::result::Result<_, _>>()?;
    let duration = decoded.len() as f64 / source_fps;
    let n_out = (duration * fps).round().max(1.0) as usize;
    let frames = (0..n_out)
        .map(|i| {
            let src = ((i as f64 / fps) * source_fps).floor() as usize;
            decoded[src.min(decoded.len() - 1)].clone()
        })
        .collect();
    let audio = read_wav(&wav)?.resample(sample_rate);
    let clip = MediaClip { frames, fps, audio };
    clip.check_consistent()?;
    Ok(clip)
}

/// Write a clip directory in the layout [`ingest_media`] reads.
pub fn write_clip(dir: &Path, clip: &MediaClip) -> Result<()> {
    let frames = dir.join("frames");
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    for (i, f) in clip.frames.iter().enumerate() {
        f.save(frames.join(format!("{i:04}.png")))?;
    }
    write_wav(&dir.join("audio.wav"), &clip.audio)?;
    let manifest = dir.join("clip.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&ClipManifest { fps: clip.fps })?)
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

/// Synthetic clip: a square that jumps position on every beat, with a tone
/// burst at the same instants.
pub fn synthetic_clip(seconds: f64, fps: f64, sample_rate: u32, size: u32) -> MediaClip {
    let n_frames = (seconds * fps).round() as usize;
    let beat = 1.0;
    let frames = (0..n_frames)
        .map(|i| {
            let t = i as f64 / fps;
            let k = (t / beat).floor() as u32;
            let side = size / 3;
            let x0 = (k * 7 % 3) * (size - side) / 2;
            let y0 = (k * 5 % 3) * (size - side) / 2;
            RgbImage::from_fn(size, size, |x, y| {
                if x >= x0 && x < x0 + side && y >= y0 && y < y0 + side {
                    image::Rgb([220, 180, 40])
                } else {
                    image::Rgb([30, 60 + (y * 100 / size) as u8, 90])
                }
            })
        })
        .collect();
    let n = (seconds * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let since = t % beat;
            let env = (-since * 12.0).exp();
            (0.6 * env * (2.0 * std::f64::consts::PI * 440.0 * t).sin()
                + 0.05 * (2.0 * std::f64::consts::PI * 110.0 * t).sin()) as f32
        })
        .collect();
    MediaClip {
        frames,
        fps,
        audio: Waveform { samples, sample_rate },
    }
}
