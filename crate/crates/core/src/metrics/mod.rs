//! Edit-quality metrics and report tables.
//!
//! Video-only: CLIP-F (frame consistency), CLIP-T (text alignment), OBJ
//! (target presence), DINO (structure preservation). Audio-only: CLAP
//! (text alignment), LPAPS (perceptual distance to the source). Joint: IB
//! (audio-visual similarity) and AV-Align (onset synchrony).

pub mod av_align;
pub mod embedders;

use std::sync::Arc;

use image::RgbImage;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

pub use av_align::{av_align, av_align_score, AvAlign, AvAlignConfig};
pub use embedders::{Embedder, EmbedderKind, ObjectDetector, ToyAudioText, ToyAudioVisual, ToyImageSelfSup, ToyImageText};

use crate::error::{Error, Result};
use crate::io::media::{MediaClip, Waveform};

pub fn cosine_similarity(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "cosine similarity",
            expected: vec![a.len()],
            found: vec![b.len()],
        });
    }
    let denom = (a.dot(a) * b.dot(b)).sqrt();
    if !(denom > 0.0) {
        return Err(Error::NonFinite("cosine similarity of a zero embedding".into()));
    }
    Ok((a.dot(b) / denom).clamp(-1.0, 1.0))
}

fn mean(values: impl IntoIterator<Item = Result<f64>>) -> Result<f64> {
    let mut n = 0usize;
    let mut acc = 0.0;
    for v in values {
        acc += v?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::config("metric", "mean over an empty set"));
    }
    Ok(acc / n as f64)
}

/// Mean cosine of consecutive embeddings.
pub fn consecutive_similarity(embeddings: &[Array1<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::config("clip_f", "needs at least two frames"));
    }
    mean(embeddings.windows(2).map(|w| cosine_similarity(&w[0], &w[1])))
}

/// Mean cosine of each embedding against one reference.
pub fn similarity_to(embeddings: &[Array1<f64>], reference: &Array1<f64>) -> Result<f64> {
    mean(embeddings.iter().map(|e| cosine_similarity(e, reference)))
}

/// Mean cosine of index-aligned pairs.
pub fn aligned_similarity(a: &[Array1<f64>], b: &[Array1<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "aligned similarity frame counts",
            expected: vec![a.len()],
            found: vec![b.len()],
        });
    }
    mean(a.iter().zip(b).map(|(x, y)| cosine_similarity(x, y)))
}

/// Unweighted sum over layers of the L2 distance between embeddings.
pub fn layer_distance(a: &[Array1<f64>], b: &[Array1<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            context: "lpaps layer count",
            expected: vec![a.len()],
            found: vec![b.len()],
        });
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::Shape {
                context: "lpaps layer width",
                expected: vec![x.len()],
                found: vec![y.len()],
            });
        }
        total += (x - y).mapv(|d| d * d).sum().sqrt();
    }
    Ok(total)
}

fn embed_frames(frames: &[RgbImage], embedder: &dyn Embedder) -> Result<Vec<Array1<f64>>> {
    frames.iter().map(|f| embedder.embed_image(f)).collect()
}

fn first_layer(mut layers: Vec<Array1<f64>>) -> Result<Array1<f64>> {
    if layers.is_empty() {
        return Err(Error::Backend("audio embedder returned no layers".into()));
    }
    Ok(layers.swap_remove(0))
}

pub fn clip_f(frames: &[RgbImage], embedder: &dyn Embedder) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::config("clip_f", "needs at least two frames"));
    }
    consecutive_similarity(&embed_frames(frames, embedder)?)
}

pub fn clip_t(frames: &[RgbImage], prompt: &str, embedder: &dyn Embedder) -> Result<f64> {
    if prompt.trim().is_empty() {
        return Err(Error::config("clip_t", "empty prompt"));
    }
    if frames.is_empty() {
        return Err(Error::config("clip_t", "needs at least one frame"));
    }
    similarity_to(&embed_frames(frames, embedder)?, &embedder.embed_text(prompt)?)
}

pub fn dino_sim(source: &[RgbImage], edited: &[RgbImage], embedder: &dyn Embedder) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::config("dino", "needs at least one frame"));
    }
    if source.len() != edited.len() {
        return Err(Error::Shape {
            context: "dino frame counts",
            expected: vec![source.len()],
            found: vec![edited.len()],
        });
    }
    aligned_similarity(&embed_frames(source, embedder)?, &embed_frames(edited, embedder)?)
}

pub fn clap_sim(audio: &Waveform, prompt: &str, embedder: &dyn Embedder) -> Result<f64> {
    if audio.samples.is_empty() {
        return Err(Error::Media("clap on empty audio".into()));
    }
    cosine_similarity(&first_layer(embedder.embed_audio(audio)?)?, &embedder.embed_text(prompt)?)
}

pub fn ib_sim(frames: &[RgbImage], fps: f64, audio: &Waveform, embedder: &dyn Embedder) -> Result<f64> {
    if frames.is_empty() || audio.samples.is_empty() {
        return Err(Error::Media("ib needs nonempty video and audio".into()));
    }
    cosine_similarity(&embedder.embed_video(frames, fps)?, &first_layer(embedder.embed_audio(audio)?)?)
}

pub fn lpaps(source: &Waveform, edited: &Waveform, embedder: &dyn Embedder) -> Result<f64> {
    layer_distance(&embedder.embed_audio(source)?, &embedder.embed_audio(edited)?)
}

/// Mean over frames of the best detection confidence; `None` without a
/// detector.
pub fn obj_score(frames: &[RgbImage], target_object: &str, detector: Option<&dyn ObjectDetector>) -> Result<Option<f64>> {
    let Some(detector) = detector else {
        return Ok(None);
    };
    if frames.is_empty() {
        return Err(Error::config("obj", "needs at least one frame"));
    }
    mean(frames.iter().map(|f| detector.max_confidence(f, target_object))).map(Some)
}

/// The backends available to an evaluation; missing ones leave their
/// metrics absent.
#[derive(Clone, Default)]
pub struct MetricSuite {
    pub image_text: Option<Arc<dyn Embedder>>,
    pub image_self_sup: Option<Arc<dyn Embedder>>,
    pub audio_text: Option<Arc<dyn Embedder>>,
    pub audio_visual: Option<Arc<dyn Embedder>>,
    pub detector: Option<Arc<dyn ObjectDetector>>,
    pub av_align: AvAlignConfig,
}

impl MetricSuite {
    pub fn toy() -> Self {
        Self {
            image_text: Some(Arc::new(ToyImageText)),
            image_self_sup: Some(Arc::new(ToyImageSelfSup)),
            audio_text: Some(Arc::new(ToyAudioText::default())),
            audio_visual: Some(Arc::new(ToyAudioVisual::default())),
            detector: None,
            av_align: AvAlignConfig::default(),
        }
    }

    pub fn provenance(&self) -> Provenance {
        let name = |e: &Option<Arc<dyn Embedder>>| e.as_ref().map(|e| e.name().to_string());
        Provenance {
            image_text: name(&self.image_text),
            image_self_sup: name(&self.image_self_sup),
            audio_text: name(&self.audio_text),
            audio_visual: name(&self.audio_visual),
            detector: self.detector.as_ref().map(|d| d.name().to_string()),
            av_align: self.av_align.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_text: Option<String>,
    pub image_self_sup: Option<String>,
    pub audio_text: Option<String>,
    pub audio_visual: Option<String>,
    pub detector: Option<String>,
    pub av_align: AvAlignConfig,
}

/// One row of the report; absent metrics are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub clip_f: Option<f64>,
    pub clip_t: Option<f64>,
    pub obj: Option<f64>,
    pub dino: Option<f64>,
    pub clap: Option<f64>,
    pub lpaps: Option<f64>,
    pub ib: Option<f64>,
    pub av_align: Option<f64>,
}

impl ClipMetrics {
    fn values(&self) -> [Option<f64>; 8] {
        [self.clip_f, self.clip_t, self.obj, self.dino, self.clap, self.lpaps, self.ib, self.av_align]
    }

    fn from_values(clip: String, v: [Option<f64>; 8]) -> Self {
        Self {
            clip,
            clip_f: v[0],
            clip_t: v[1],
            obj: v[2],
            dino: v[3],
            clap: v[4],
            lpaps: v[5],
            ib: v[6],
            av_align: v[7],
        }
    }
}

pub const REPORT_COLUMNS: [&str; 9] = ["clip", "clip_f", "clip_t", "obj", "dino", "clap", "lpaps", "ib", "av_align"];

/// Evaluate one edited clip against its source.
pub fn evaluate_clip(
    name: &str,
    source: &MediaClip,
    edited: &MediaClip,
    target_prompt: &str,
    target_object: Option<&str>,
    suite: &MetricSuite,
) -> Result<ClipMetrics> {
    let mut m = ClipMetrics {
        clip: name.to_string(),
        ..Default::default()
    };
    if let Some(e) = &suite.image_text {
        m.clip_f = Some(clip_f(&edited.frames, e.as_ref())?);
        m.clip_t = Some(clip_t(&edited.frames, target_prompt, e.as_ref())?);
    }
    if let Some(object) = target_object {
        m.obj = obj_score(&edited.frames, object, suite.detector.as_deref())?;
    }
    if let Some(e) = &suite.image_self_sup {
        m.dino = Some(dino_sim(&source.frames, &edited.frames, e.as_ref())?);
    }
    if let Some(e) = &suite.audio_text {
        m.clap = Some(clap_sim(&edited.audio, target_prompt, e.as_ref())?);
        m.lpaps = Some(lpaps(&source.audio, &edited.audio, e.as_ref())?);
    }
    if let Some(e) = &suite.audio_visual {
        m.ib = Some(ib_sim(&edited.frames, edited.fps, &edited.audio, e.as_ref())?);
    }
    m.av_align = Some(av_align(&edited.audio, &edited.frames, edited.fps, &suite.av_align)?.score);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
    /// Per-column arithmetic means over the clips reporting that column.
    pub mean: ClipMetrics,
    pub provenance: Provenance,
}

impl MetricReport {
    pub fn new(clips: Vec<ClipMetrics>, provenance: Provenance) -> Self {
        let mut acc = [(0.0, 0usize); 8];
        for c in &clips {
            for (slot, v) in acc.iter_mut().zip(c.values()) {
                if let Some(v) = v {
                    slot.0 += v;
                    slot.1 += 1;
                }
            }
        }
        let mean = ClipMetrics::from_values("mean".into(), acc.map(|(s, n)| (n > 0).then(|| s / n as f64)));
        Self { clips, mean, provenance }
    }

    /// Table with one row per clip followed by the mean row; absent values
    /// are empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Media(format!("csv: {e}"));
        w.write_record(REPORT_COLUMNS).map_err(io)?;
        for row in self.clips.iter().chain(std::iter::once(&self.mean)) {
            let mut rec = vec![row.clip.clone()];
            rec.extend(row.values().iter().map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()));
            w.write_record(&rec).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Media(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn similarity_helpers() {
        let e = vec![array![1.0, 0.0], array![1.0, 0.0]];
        assert_eq!(consecutive_similarity(&e).unwrap(), 1.0);
        assert_eq!(consecutive_similarity(&[array![1.0, 0.0], array![0.0, 2.0]]).unwrap(), 0.0);
        assert!(consecutive_similarity(&e[..1]).is_err());
        assert_eq!(layer_distance(&[array![1.0, 0.0]], &[array![0.0, 1.0]]).unwrap(), 2f64.sqrt());
        assert!(cosine_similarity(&array![0.0, 0.0], &array![1.0, 0.0]).is_err());
    }

    #[test]
    fn absent_detector_is_not_zero() {
        let clip = crate::io::media::synthetic_clip(1.0, 4.0, 8000, 8);
        assert_eq!(obj_score(&clip.frames, "cat", None).unwrap(), None);
    }

    #[test]
    fn report_means_skip_absent_values() {
        let rows = vec![
            ClipMetrics {
                clip: "a".into(),
                dino: Some(0.5),
                obj: Some(1.0),
                ..Default::default()
            },
            ClipMetrics {
                clip: "b".into(),
                dino: Some(1.0),
                ..Default::default()
            },
        ];
        let r = MetricReport::new(rows, MetricSuite::default().provenance());
        assert_eq!(r.mean.dino, Some(0.75));
        assert_eq!(r.mean.obj, Some(1.0));
        assert_eq!(r.mean.clap, None);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("clip,clip_f,clip_t,obj,dino"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn toy_suite_self_evaluation() {
        let clip = crate::io::media::synthetic_clip(4.0, 4.0, 16_000, 16);
        let m = evaluate_clip("x", &clip, &clip, "a yellow square", None, &MetricSuite::toy()).unwrap();
        assert!((m.dino.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(m.lpaps, Some(0.0));
        assert!(m.av_align.unwrap() > 0.5);
    }
}
