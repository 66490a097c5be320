//! Output directories: staged writes, decoded media and provenance files.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::media::{write_wav, Waveform};

/// Files are written into a sibling staging directory and moved into place
/// on [`Staging::commit`]. Dropping an uncommitted staging directory deletes
/// it, so failed runs leave nothing behind.
#[derive(Debug)]
pub struct Staging {
    target: PathBuf,
    tmp: PathBuf,
    force: bool,
    committed: bool,
}

fn non_empty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

impl Staging {
    pub fn begin(target: &Path, force: bool) -> Result<Self> {
        if target.is_file() || (target.is_dir() && non_empty(target) && !force) {
            return Err(Error::OutputExists(target.to_path_buf()));
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::config("out", format!("{} has no final component", target.display())))?;
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            tmp,
            force,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.force && non_empty(&self.target) {
                return Err(Error::OutputExists(self.target.clone()));
            }
            std::fs::remove_dir_all(&self.target).map_err(|e| Error::io(&self.target, e))?;
        }
        std::fs::rename(&self.tmp, &self.target).map_err(|e| Error::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

const COLORMAP: [[f64; 3]; 5] = [
    [13.0, 8.0, 135.0],
    [126.0, 3.0, 168.0],
    [204.0, 71.0, 120.0],
    [248.0, 149.0, 64.0],
    [240.0, 249.0, 33.0],
];

fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (v.floor() as usize).min(COLORMAP.len() - 2);
    let f = v - i as f64;
    let c = |k: usize| (COLORMAP[i][k] * (1.0 - f) + COLORMAP[i + 1][k] * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Source spectrogram above the edited one, low frequencies at the bottom of
/// each panel, sharing one colour scale.
pub fn spectrogram_comparison(source: &Array2<f64>, edited: &Array2<f64>) -> RgbImage {
    let (lo, hi) = source
        .iter()
        .chain(edited.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let (bands, frames) = (source.nrows().max(edited.nrows()), source.ncols().max(edited.ncols()));
    let gap = 2;
    let mut img = ImageBuffer::from_pixel(frames as u32, (2 * bands + gap) as u32, Rgb([255, 255, 255]));
    for (panel, spec) in [source, edited].into_iter().enumerate() {
        let top = panel * (bands + gap);
        for ((m, t), v) in spec.indexed_iter() {
            let y = top + (spec.nrows() - 1 - m);
            img.put_pixel(t as u32, y as u32, colormap((v - lo) / range));
        }
    }
    img
}

/// Relevance scores (patch `w·H + h`) as a `W × H` heatmap scaled by `zoom`.
pub fn relevance_heatmap(scores: &[f64], width: usize, height: usize, zoom: u32) -> Result<RgbImage> {
    if scores.len() != width * height {
        return Err(Error::Shape {
            context: "relevance heatmap",
            expected: vec![width * height],
            found: vec![scores.len()],
        });
    }
    Ok(RgbImage::from_fn(width as u32 * zoom, height as u32 * zoom, |x, y| {
        colormap(scores[(x / zoom) as usize * height + (y / zoom) as usize])
    }))
}

pub fn write_gif(path: &Path, frames: &[RgbImage], fps: f64) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GifEncoder::new_with_speed(BufWriter::new(file), 10);
    enc.set_repeat(Repeat::Infinite)?;
    let delay = image::Delay::from_numer_denom_ms((1000.0 / fps).round() as u32, 1);
    for f in frames {
        let rgba = image::DynamicImage::ImageRgb8(f.clone()).to_rgba8();
        enc.encode_frame(image::Frame::from_parts(rgba, 0, 0, delay))?;
    }
    Ok(())
}

/// Run facts that are not needed for replay, including timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub steps: usize,
    pub elapsed_seconds: f64,
    pub frames: usize,
    pub fps: f64,
    pub audio_seconds: f64,
    pub final_loss_dds_video: Option<f64>,
    pub final_loss_dds_audio: Option<f64>,
    pub final_loss_cmds: Option<f64>,
    pub video_backend: String,
    pub audio_backend: String,
}

/// Everything written for one finished edit.
pub struct EditArtifacts<'a> {
    pub frames: &'a [RgbImage],
    pub fps: f64,
    pub audio: &'a Waveform,
    pub source_mel: &'a Array2<f64>,
    pub edited_mel: &'a Array2<f64>,
    pub runlog: &'a str,
    pub config_resolved: &'a str,
    pub summary: &'a Summary,
    /// Extra images by relative path, e.g. relevance heatmaps.
    pub extra_images: &'a [(PathBuf, RgbImage)],
}

pub const FRAMES_DIR: &str = "frames";
pub const VIDEO_FILE: &str = "frames.gif";
pub const AUDIO_FILE: &str = "audio.wav";
pub const SPECTROGRAM_FILE: &str = "spectrogram.png";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const CONFIG_FILE: &str = "config.resolved";
pub const SUMMARY_FILE: &str = "summary.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write decoded media and provenance into `dir` (normally a staging path).
pub fn write_outputs(dir: &Path, a: &EditArtifacts<'_>) -> Result<()> {
    let frames = dir.join(FRAMES_DIR);
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    for (i, f) in a.frames.iter().enumerate() {
        f.save(frames.join(format!("{i:04}.png")))?;
    }
    write_gif(&dir.join(VIDEO_FILE), a.frames, a.fps)?;
    write_wav(&dir.join(AUDIO_FILE), a.audio)?;
    spectrogram_comparison(a.source_mel, a.edited_mel).save(dir.join(SPECTROGRAM_FILE))?;
    write_text(&dir.join(RUNLOG_FILE), a.runlog)?;
    write_text(&dir.join(CONFIG_FILE), a.config_resolved)?;
    write_text(&dir.join(SUMMARY_FILE), &serde_json::to_string_pretty(a.summary)?)?;
    for (rel, img) in a.extra_images {
        let p = dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.save(&p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_non_empty_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        std::fs::create_dir(&out).unwrap();
        std::fs::write(out.join("x"), "1").unwrap();
        assert!(matches!(Staging::begin(&out, false), Err(Error::OutputExists(_))));
        let s = Staging::begin(&out, true).unwrap();
        std::fs::write(s.path().join("y"), "2").unwrap();
        s.commit().unwrap();
        assert!(out.join("y").exists() && !out.join("x").exists());
    }

    #[test]
    fn dropped_staging_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        {
            let s = Staging::begin(&out, false).unwrap();
            std::fs::write(s.path().join("partial"), "1").unwrap();
        }
        assert!(!out.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn heatmap_orientation() {
        let img = relevance_heatmap(&[0.0, 1.0, 0.0, 0.0], 2, 2, 1).unwrap();
        assert_eq!(*img.get_pixel(0, 1), colormap(1.0));
        assert_eq!(*img.get_pixel(1, 0), colormap(0.0));
    }
}
