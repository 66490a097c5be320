//! Audio-visual alignment: audio onsets against visual motion peaks.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::media::{magnitude_stft, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvAlignConfig {
    /// Peaks closer than this many seconds may be matched.
    pub window: f64,
    /// Spectral-flux hop.
    pub hop_seconds: f64,
    pub n_fft: usize,
    /// Minimum peak prominence as a fraction of the curve maximum.
    pub prominence: f64,
}

impl Default for AvAlignConfig {
    fn default() -> Self {
        Self {
            window: 0.25,
            hop_seconds: 0.01,
            n_fft: 1024,
            prominence: 0.3,
        }
    }
}

impl AvAlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window >= 0.0) {
            return Err(Error::config("av_align.window", "must be non-negative"));
        }
        if !(self.hop_seconds > 0.0) {
            return Err(Error::config("av_align.hop_seconds", "must be positive"));
        }
        if self.n_fft < 2 {
            return Err(Error::config("av_align.n_fft", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.prominence) {
            return Err(Error::config("av_align.prominence", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Topographic prominence of `x[i]`: its height above the higher of the two
/// lowest points reached before meeting a strictly higher sample on each side.
fn prominence(x: &[f64], i: usize) -> f64 {
    let side = |iter: &mut dyn Iterator<Item = usize>| {
        let mut low = x[i];
        for j in iter {
            if x[j] > x[i] {
                return low;
            }
            low = low.min(x[j]);
        }
        low
    };
    let left = side(&mut (0..i).rev());
    let right = side(&mut (i + 1..x.len()));
    x[i] - left.max(right)
}

/// Indices of local maxima whose prominence is at least `rel · max(x)`.
/// Plateaus report their first sample. Boundary samples count when they
/// exceed their single neighbour.
pub fn pick_peaks(x: &[f64], rel: f64) -> Vec<usize> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if x.is_empty() || !(max > 0.0) {
        return Vec::new();
    }
    let n = x.len();
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[j + 1] == x[i] {
            j += 1;
        }
        let left_ok = i == 0 || x[i - 1] < x[i];
        let right_ok = j + 1 == n || x[j + 1] < x[i];
        if left_ok && right_ok && x[i] > 0.0 && n > 1 {
            let p = prominence(x, i);
            if p >= rel * max && p > 0.0 {
                peaks.push(i);
            }
        }
        i = j + 1;
    }
    peaks
}

/// Half-wave rectified log-magnitude spectral flux, one value per hop.
pub fn spectral_flux(wave: &Waveform, config: &AvAlignConfig) -> Vec<f64> {
    let hop = ((config.hop_seconds * wave.sample_rate as f64).round() as usize).max(1);
    let mag = magnitude_stft(&wave.samples, config.n_fft, hop, config.n_fft);
    let log = mag.mapv(|m| (1.0 + 100.0 * m).ln());
    let mut flux = vec![0.0; log.nrows()];
    for (k, pair) in log.axis_windows(ndarray::Axis(0), 2).into_iter().enumerate() {
        flux[k + 1] = pair
            .row(1)
            .iter()
            .zip(pair.row(0))
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    flux
}

pub fn audio_onsets(wave: &Waveform, config: &AvAlignConfig) -> Vec<f64> {
    let hop = ((config.hop_seconds * wave.sample_rate as f64).round() as usize).max(1);
    let dt = hop as f64 / wave.sample_rate as f64;
    pick_peaks(&spectral_flux(wave, config), config.prominence)
        .into_iter()
        .map(|k| k as f64 * dt)
        .collect()
}

/// Mean absolute luma change between consecutive frames; entry `k` belongs
/// to the change arriving at frame `k` (entry 0 is zero).
pub fn motion_energy(frames: &[RgbImage]) -> Vec<f64> {
    let luma = |p: &image::Rgb<u8>| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
    let mut out = vec![0.0; frames.len()];
    for k in 1..frames.len() {
        let (a, b) = (&frames[k - 1], &frames[k]);
        let n = (a.width() * a.height()).max(1) as f64;
        out[k] = a.pixels().zip(b.pixels()).map(|(p, q)| (luma(p) - luma(q)).abs()).sum::<f64>() / n / 255.0;
    }
    out
}

pub fn visual_peaks(frames: &[RgbImage], fps: f64, config: &AvAlignConfig) -> Vec<f64> {
    pick_peaks(&motion_energy(frames), config.prominence)
        .into_iter()
        .map(|k| k as f64 / fps)
        .collect()
}

/// Greedy one-to-one matching: candidate pairs within `window` are taken
/// nearest first, ties broken by the earlier and then the later time.
pub fn match_peaks(a: &[f64], b: &[f64], window: f64) -> usize {
    let mut pairs = Vec::new();
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            let d = (x - y).abs();
            if d <= window + 1e-12 {
                pairs.push((d, x.min(y), x.max(y), i, j));
            }
        }
    }
    pairs.sort_by(|p, q| (p.0, p.1, p.2).partial_cmp(&(q.0, q.1, q.2)).expect("finite peak times"));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut matches = 0;
    for (_, _, _, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            matches += 1;
        }
    }
    matches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvAlign {
    pub score: f64,
    pub matches: usize,
    pub audio_peaks: Vec<f64>,
    pub visual_peaks: Vec<f64>,
    /// Neither stream had a peak; the score is defined as 1.
    pub both_empty: bool,
}

/// `matches / (|A| + |V| − matches)`.
pub fn av_align_score(audio_peaks: &[f64], visual_peaks: &[f64], window: f64) -> AvAlign {
    let both_empty = audio_peaks.is_empty() && visual_peaks.is_empty();
    let matches = match_peaks(audio_peaks, visual_peaks, window);
    let union = audio_peaks.len() + visual_peaks.len() - matches;
    let score = if both_empty { 1.0 } else { matches as f64 / union as f64 };
    AvAlign {
        score,
        matches,
        audio_peaks: audio_peaks.to_vec(),
        visual_peaks: visual_peaks.to_vec(),
        both_empty,
    }
}

pub fn av_align(audio: &Waveform, frames: &[RgbImage], fps: f64, config: &AvAlignConfig) -> Result<AvAlign> {
    config.validate()?;
    if frames.is_empty() || audio.samples.is_empty() {
        return Err(Error::Media("av_align needs nonempty audio and frames".into()));
    }
    let span = frames.len() as f64 / fps;
    if (audio.duration() - span).abs() > 1.0 / fps + 1e-9 {
        return Err(Error::Media(format!(
            "audio ({:.3} s) and frames ({span:.3} s) are not aligned",
            audio.duration()
        )));
    }
    Ok(av_align_score(&audio_onsets(audio, config), &visual_peaks(frames, fps, config), config.window))
}
