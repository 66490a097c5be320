//! Encoders between media and latents.

use image::RgbImage;
use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4};

use crate::error::{Error, Result};
use crate::io::media::{mel_spectrogram, MelParams, Waveform};

pub trait VideoCodec: Send + Sync {
    /// Per-frame latent shape `channels × width × height`.
    fn frame_latent_shape(&self) -> [usize; 3];
    fn encode(&self, frames: &[RgbImage]) -> Result<Array4<f64>>;
    fn decode(&self, latent: ArrayView4<'_, f64>, width: u32, height: u32) -> Result<Vec<RgbImage>>;
}

pub trait AudioCodec: Send + Sync {
    fn latent_shape(&self) -> [usize; 3];
    fn mel_params(&self) -> &MelParams;
    fn encode(&self, wave: &Waveform) -> Result<Array3<f64>>;
    /// Log-mel spectrogram reconstructed from a latent, `n_mels × frames`.
    fn decode_mel(&self, latent: ArrayView3<'_, f64>, frames: usize) -> Result<Array2<f64>>;
    fn decode_waveform(&self, latent: ArrayView3<'_, f64>, duration: f64) -> Result<Waveform>;
}

/// Area-pooled RGB plus luma.
#[derive(Debug, Clone)]
pub struct ToyVideoCodec {
    pub width: usize,
    pub height: usize,
}

impl ToyVideoCodec {
    pub const CHANNELS: usize = 4;
}

impl VideoCodec for ToyVideoCodec {
    fn frame_latent_shape(&self) -> [usize; 3] {
        [Self::CHANNELS, self.width, self.height]
    }

    fn encode(&self, frames: &[RgbImage]) -> Result<Array4<f64>> {
        let mut out = Array4::zeros((frames.len(), Self::CHANNELS, self.width, self.height));
        for (f, img) in frames.iter().enumerate() {
            let (iw, ih) = (img.width() as usize, img.height() as usize);
            if iw < self.width || ih < self.height {
                return Err(Error::Media(format!(
                    "frame {iw}x{ih} smaller than latent grid {}x{}",
                    self.width, self.height
                )));
            }
            for w in 0..self.width {
                let (x0, x1) = (w * iw / self.width, (w + 1) * iw / self.width);
                for h in 0..self.height {
                    let (y0, y1) = (h * ih / self.height, (h + 1) * ih / self.height);
                    let mut acc = [0.0; 3];
                    for x in x0..x1 {
                        for y in y0..y1 {
                            let p = img.get_pixel(x as u32, y as u32);
                            for c in 0..3 {
                                acc[c] += p[c] as f64;
                            }
                        }
                    }
                    let n = ((x1 - x0) * (y1 - y0)) as f64;
                    let rgb = acc.map(|v| v / n / 127.5 - 1.0);
                    for c in 0..3 {
                        out[[f, c, w, h]] = rgb[c];
                    }
                    out[[f, 3, w, h]] = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, latent: ArrayView4<'_, f64>, width: u32, height: u32) -> Result<Vec<RgbImage>> {
        let [c, lw, lh] = self.frame_latent_shape();
        if latent.shape()[1..] != [c, lw, lh] {
            return Err(Error::Shape {
                context: "toy video decode",
                expected: vec![c, lw, lh],
                found: latent.shape()[1..].to_vec(),
            });
        }
        Ok(latent
            .outer_iter()
            .map(|frame| {
                RgbImage::from_fn(width, height, |x, y| {
                    let w = (x as usize * lw / width as usize).min(lw - 1);
                    let h = (y as usize * lh / height as usize).min(lh - 1);
                    let px = |ch: usize| ((frame[[ch, w, h]] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                    image::Rgb([px(0), px(1), px(2)])
                })
            })
            .collect())
    }
}

/// Pooled log-mel spectrogram with its temporal delta as a second channel.
#[derive(Debug, Clone)]
pub struct ToyAudioCodec {
    /// `time cells × mel cells`.
    pub width: usize,
    pub height: usize,
    pub mel: MelParams,
}

impl ToyAudioCodec {
    const OFFSET: f64 = 5.0;
    const SCALE: f64 = 5.0;
}

impl AudioCodec for ToyAudioCodec {
    fn latent_shape(&self) -> [usize; 3] {
        [2, self.width, self.height]
    }

    fn mel_params(&self) -> &MelParams {
        &self.mel
    }

    fn encode(&self, wave: &Waveform) -> Result<Array3<f64>> {
        let mel = mel_spectrogram(wave, &self.mel)?;
        let (n_mels, frames) = mel.dim();
        if frames < self.width || n_mels < self.height {
            return Err(Error::Media(format!(
                "spectrogram {n_mels}x{frames} smaller than latent grid {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Array3::zeros((2, self.width, self.height));
        for w in 0..self.width {
            let (t0, t1) = (w * frames / self.width, (w + 1) * frames / self.width);
            for h in 0..self.height {
                let (m0, m1) = (h * n_mels / self.height, (h + 1) * n_mels / self.height);
                let cell = mel.slice(ndarray::s![m0..m1, t0..t1]);
                out[[0, w, h]] = (cell.mean().unwrap_or(0.0) + Self::OFFSET) / Self::SCALE;
            }
        }
        for w in 0..self.width {
            for h in 0..self.height {
                out[[1, w, h]] = if w == 0 { 0.0 } else { out[[0, w, h]] - out[[0, w - 1, h]] };
            }
        }
        Ok(out)
    }

    fn decode_mel(&self, latent: ArrayView3<'_, f64>, frames: usize) -> Result<Array2<f64>> {
        if latent.shape() != self.latent_shape() {
            return Err(Error::Shape {
                context: "toy audio decode",
                expected: self.latent_shape().to_vec(),
                found: latent.shape().to_vec(),
            });
        }
        let n_mels = self.mel.n_mels;
        Ok(Array2::from_shape_fn((n_mels, frames.max(1)), |(m, t)| {
            let w = (t * self.width / frames.max(1)).min(self.width - 1);
            let h = (m * self.height / n_mels).min(self.height - 1);
            latent[[0, w, h]] * Self::SCALE - Self::OFFSET
        }))
    }

    fn decode_waveform(&self, latent: ArrayView3<'_, f64>, duration: f64) -> Result<Waveform> {
        let rate = self.mel.sample_rate;
        let n = (duration * rate as f64).round() as usize;
        let frames = n / self.mel.hop_length + 1;
        let mel = self.decode_mel(latent, frames)?;
        let centers = self.mel.band_centers();
        // Oscillator bank: one sinusoid per mel band, amplitude from band energy.
        let amps = mel.mapv(|lm| lm.exp().sqrt());
        let mut samples = vec![0.0f64; n];
        for (b, &f) in centers.iter().enumerate() {
            let omega = 2.0 * std::f64::consts::PI * f / rate as f64;
            for (i, s) in samples.iter_mut().enumerate() {
                let pos = i as f64 / self.mel.hop_length as f64;
                let f0 = (pos.floor() as usize).min(frames - 1);
                let f1 = (f0 + 1).min(frames - 1);
                let frac = pos - f0 as f64;
                let a = amps[[b, f0]] * (1.0 - frac) + amps[[b, f1]] * frac;
                *s += a * (omega * i as f64 + b as f64).sin();
            }
        }
        let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let gain = if peak > 0.0 { 0.9 / peak } else { 0.0 };
        Ok(Waveform {
            samples: samples.into_iter().map(|s| (s * gain) as f32).collect(),
            sample_rate: rate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_roundtrip_of_flat_frames() {
        let codec = ToyVideoCodec { width: 4, height: 4 };
        let frame = RgbImage::from_pixel(16, 16, image::Rgb([255, 0, 127]));
        let z = codec.encode(std::slice::from_ref(&frame)).unwrap();
        assert_eq!(z.shape(), &[1, 4, 4, 4]);
        assert!((z[[0, 0, 1, 2]] - 1.0).abs() < 1e-12);
        let back = codec.decode(z.view(), 16, 16).unwrap();
        assert_eq!(back[0].get_pixel(3, 3), &image::Rgb([255, 0, 127]));
    }

    #[test]
    fn audio_encode_decode_shapes() {
        let codec = ToyAudioCodec {
            width: 8,
            height: 4,
            mel: MelParams::default(),
        };
        let wave = crate::io::media::synthetic_clip(2.0, 4.0, 16_000, 8).audio;
        let z = codec.encode(&wave).unwrap();
        assert_eq!(z.shape(), &[2, 8, 4]);
        let out = codec.decode_waveform(z.view(), 2.0).unwrap();
        assert_eq!(out.samples.len(), 32_000);
        assert!(out.samples.iter().all(|s| s.abs() <= 0.9 + 1e-6));
    }
}
