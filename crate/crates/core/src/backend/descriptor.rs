//! JSON adapter descriptors.
//!
//! A descriptor names a backend's modality, latent shape, noise schedule and
//! attention hook points. `kind = "toy"` builds the in-process toy denoiser;
//! `kind = "external"` describes a pretrained model served by an adapter
//! runtime, which this build does not link.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AudioCodec, Denoiser, Modality, ToyAudioCodec, ToyDenoiser, ToyVideoCodec, VideoCodec};
use crate::error::{Error, Result};
use crate::io::media::MelParams;
use crate::latent::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    ScaledLinear { steps: usize, beta_start: f64, beta_end: f64 },
    Table(Vec<f64>),
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleSpec::ScaledLinear {
                steps,
                beta_start,
                beta_end,
            } => NoiseSchedule::scaled_linear(*steps, *beta_start, *beta_end),
            ScheduleSpec::Table(t) => NoiseSchedule::from_table(t.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyParams {
    pub seed: u64,
    pub text_tokens: usize,
    pub hidden_dim: usize,
    pub text_dim: usize,
    pub head_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeHooks {
    pub encode: String,
    pub decode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub name: String,
    pub kind: BackendKind,
    pub modality: Modality,
    /// `channels × width × height`; for video this is one grid image.
    pub latent_shape: [usize; 3],
    pub schedule: ScheduleSpec,
    pub hook_points: Vec<String>,
    #[serde(default)]
    pub guidance: Option<f64>,
    #[serde(default = "default_divisor")]
    pub dds_gradient_divisor: f64,
    #[serde(default)]
    pub mel: Option<MelParams>,
    #[serde(default)]
    pub vae: Option<VaeHooks>,
    #[serde(default)]
    pub toy: Option<ToyParams>,
}

fn default_divisor() -> f64 {
    1.0
}

const TOY_SCHEDULE: ScheduleSpec = ScheduleSpec::ScaledLinear {
    steps: 1000,
    beta_start: 0.00085,
    beta_end: 0.012,
};

impl BackendDescriptor {
    pub fn toy_video(seed: u64) -> Self {
        Self {
            name: "toy-video".into(),
            kind: BackendKind::Toy,
            modality: Modality::VideoGrid,
            latent_shape: [ToyVideoCodec::CHANNELS, 12, 12],
            schedule: TOY_SCHEDULE,
            hook_points: vec![super::toy::TOY_LAYER.into()],
            guidance: Some(7.5),
            dds_gradient_divisor: 2.0e4,
            mel: None,
            vae: None,
            toy: Some(ToyParams {
                seed,
                text_tokens: 4,
                hidden_dim: 6,
                text_dim: 8,
                head_scale: 0.3,
            }),
        }
    }

    pub fn toy_audio(seed: u64) -> Self {
        Self {
            name: "toy-audio".into(),
            kind: BackendKind::Toy,
            modality: Modality::Audio,
            latent_shape: [2, 16, 8],
            schedule: TOY_SCHEDULE,
            hook_points: vec![super::toy::TOY_LAYER.into()],
            guidance: Some(3.5),
            dds_gradient_divisor: 2.0e4,
            mel: Some(MelParams::default()),
            vae: None,
            toy: Some(ToyParams {
                seed,
                text_tokens: 4,
                hidden_dim: 8,
                text_dim: 8,
                head_scale: 0.3,
            }),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let d: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::config(format!("{}:{}", path.display(), e.path()), e.inner().to_string())
        })?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_shape.contains(&0) {
            return Err(Error::config("latent_shape", "dimensions must be positive"));
        }
        if self.hook_points.is_empty() {
            return Err(Error::config("hook_points", "at least one attention hook point is required"));
        }
        if !(self.dds_gradient_divisor > 0.0) {
            return Err(Error::config("dds_gradient_divisor", "must be positive"));
        }
        self.schedule.build()?;
        if self.modality == Modality::Audio {
            match &self.mel {
                Some(m) => m.validate()?,
                None => return Err(Error::config("mel", "audio backends must declare mel parameters")),
            }
        }
        match self.kind {
            BackendKind::Toy if self.toy.is_none() => Err(Error::config("toy", "toy backends need toy parameters")),
            BackendKind::External if self.vae.is_none() => {
                Err(Error::config("vae", "external backends must name their VAE hooks"))
            }
            _ => Ok(()),
        }
    }

    fn unavailable(&self) -> Error {
        Error::Backend(format!(
            "{}: external backends need an adapter runtime, which this build does not include",
            self.name
        ))
    }

    pub fn build_denoiser(&self, expected: Modality) -> Result<Arc<dyn Denoiser>> {
        self.validate()?;
        if self.modality != expected {
            return Err(Error::config(
                "modality",
                format!("{} declares {:?}, expected {:?}", self.name, self.modality, expected),
            ));
        }
        match (&self.kind, &self.toy) {
            (BackendKind::Toy, Some(p)) => {
                let guidance = self.guidance.unwrap_or(match self.modality {
                    Modality::VideoGrid => 7.5,
                    Modality::Audio => 3.5,
                });
                Ok(Arc::new(ToyDenoiser::new(
                    self.modality,
                    self.latent_shape,
                    p.text_tokens,
                    p.hidden_dim,
                    p.text_dim,
                    p.head_scale,
                    p.seed,
                    self.schedule.build()?,
                    guidance,
                    self.dds_gradient_divisor,
                )?))
            }
            _ => Err(self.unavailable()),
        }
    }

    pub fn build_video_codec(&self, grid_size: usize) -> Result<Arc<dyn VideoCodec>> {
        let [c, w, h] = self.latent_shape;
        if grid_size == 0 || w % grid_size != 0 || h % grid_size != 0 {
            return Err(Error::Grid(format!(
                "grid size {grid_size} does not divide the {w}x{h} latent of {}",
                self.name
            )));
        }
        match self.kind {
            BackendKind::Toy if c == ToyVideoCodec::CHANNELS => Ok(Arc::new(ToyVideoCodec {
                width: w / grid_size,
                height: h / grid_size,
            })),
            BackendKind::Toy => Err(Error::config(
                "latent_shape",
                format!("toy video codec produces {} channels", ToyVideoCodec::CHANNELS),
            )),
            BackendKind::External => Err(self.unavailable()),
        }
    }

    pub fn build_audio_codec(&self) -> Result<Arc<dyn AudioCodec>> {
        let [c, w, h] = self.latent_shape;
        match (self.kind, &self.mel) {
            (BackendKind::Toy, Some(mel)) if c == 2 => Ok(Arc::new(ToyAudioCodec {
                width: w,
                height: h,
                mel: mel.clone(),
            })),
            (BackendKind::Toy, _) => Err(Error::config("latent_shape", "toy audio codec produces 2 channels")),
            (BackendKind::External, _) => Err(self.unavailable()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_descriptors_roundtrip_through_json() {
        for d in [BackendDescriptor::toy_video(3), BackendDescriptor::toy_audio(3)] {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.json");
            std::fs::write(&p, d.to_json().unwrap()).unwrap();
            assert_eq!(BackendDescriptor::load(&p).unwrap(), d);
        }
    }

    #[test]
    fn unknown_fields_report_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        let mut v: serde_json::Value = serde_json::from_str(&BackendDescriptor::toy_audio(0).to_json().unwrap()).unwrap();
        v["toy"]["bogus"] = 1.into();
        std::fs::write(&p, v.to_string()).unwrap();
        let err = BackendDescriptor::load(&p).unwrap_err().to_string();
        assert!(err.contains("toy"), "{err}");
    }

    #[test]
    fn external_backends_are_described_but_unavailable() {
        let mut d = BackendDescriptor::toy_video(0);
        d.kind = BackendKind::External;
        d.toy = None;
        d.vae = Some(VaeHooks {
            encode: "vae.encode".into(),
            decode: "vae.decode".into(),
        });
        d.validate().unwrap();
        assert!(matches!(d.build_denoiser(Modality::VideoGrid), Err(Error::Backend(_))));
    }

    #[test]
    fn grid_size_must_divide_latent() {
        let d = BackendDescriptor::toy_video(0);
        assert!(d.build_video_codec(2).is_ok());
        assert!(d.build_video_codec(3).is_ok());
        assert!(d.build_video_codec(5).is_err());
        assert_eq!(d.build_video_codec(4).unwrap().frame_latent_shape(), [4, 3, 3]);
    }
}
