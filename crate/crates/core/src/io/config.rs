//! TOML job files.
//!
//! ```toml
//! [edit]                  # overrides of the edit defaults, shared by all jobs
//! tau_a = 0.7
//!
//! [backends]              # descriptor files; the built-in toy pair when absent
//! video = "backends/video.json"
//! audio = "backends/audio.json"
//!
//! [media]
//! fps = 4.0
//!
//! [[job]]
//! clip = "clips/dog"
//! source_prompt = "a dog barking"
//! target_prompt = "a lion roaring"
//! target_object = "lion"
//! out = "out/lion"
//! edit = { seed = 3 }     # per-job overrides on top of [edit]
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::edit::EditConfig;
use crate::error::{Error, Result};
use crate::latent::PromptPair;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendPaths {
    pub video: Option<PathBuf>,
    pub audio: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediaSettings {
    pub fps: f64,
}

impl Default for MediaSettings {
    fn default() -> Self {
        Self { fps: 4.0 }
    }
}

/// One fully resolved edit job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub clip: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_prompt: Option<String>,
    pub target_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_object: Option<String>,
    pub out: PathBuf,
    #[serde(default)]
    pub edit: EditConfig,
}

impl JobSpec {
    pub fn prompts(&self) -> Result<PromptPair> {
        PromptPair::new(self.source_prompt.clone(), self.target_prompt.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ConfigFile {
    #[serde(default)]
    pub edit: EditConfig,
    #[serde(default)]
    pub backends: BackendPaths,
    #[serde(default)]
    pub media: MediaSettings,
    #[serde(default, rename = "job")]
    pub jobs: Vec<JobSpec>,
}


#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJob {
    clip: PathBuf,
    source_prompt: Option<String>,
    target_prompt: String,
    target_object: Option<String>,
    out: PathBuf,
    #[serde(default)]
    edit: toml::Table,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    edit: toml::Table,
    #[serde(default)]
    backends: BackendPaths,
    #[serde(default)]
    media: MediaSettings,
    #[serde(default)]
    job: Vec<RawJob>,
}

fn located(origin: &str, path: &str, message: impl std::fmt::Display) -> Error {
    let field = if path.is_empty() || path == "." {
        origin.to_string()
    } else {
        format!("{origin}:{path}")
    };
    Error::Config {
        field,
        message: message.to_string(),
    }
}

fn edit_config(table: toml::Table, origin: &str, prefix: &str) -> Result<EditConfig> {
    let config: EditConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
        .map_err(|e| located(origin, &format!("{prefix}.{}", e.path()), e.inner()))?;
    config.validate().map_err(|e| match e {
        Error::Config { field, message } => located(origin, &format!("{prefix}.{field}"), message),
        other => other,
    })?;
    Ok(config)
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Parse a job document. `base` anchors relative paths; `origin` labels
/// diagnostics. Clip paths must exist.
pub fn parse_config(text: &str, base: &Path, origin: &str) -> Result<ConfigFile> {
    let de = toml::Deserializer::parse(text).map_err(|e| located(origin, "", e))?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| located(origin, &e.path().to_string(), e.inner()))?;
    let edit = edit_config(raw.edit.clone(), origin, "edit")?;
    if !(raw.media.fps > 0.0) {
        return Err(located(origin, "media.fps", "must be positive"));
    }
    let mut jobs = Vec::with_capacity(raw.job.len());
    for (i, j) in raw.job.into_iter().enumerate() {
        let mut merged = raw.edit.clone();
        merged.extend(j.edit);
        let job = JobSpec {
            clip: resolve(base, j.clip),
            source_prompt: j.source_prompt,
            target_prompt: j.target_prompt,
            target_object: j.target_object,
            out: resolve(base, j.out),
            edit: edit_config(merged, origin, &format!("job[{i}].edit"))?,
        };
        if !job.clip.exists() {
            return Err(located(origin, &format!("job[{i}].clip"), format!("{} does not exist", job.clip.display())));
        }
        job.prompts().map_err(|e| located(origin, &format!("job[{i}].target_prompt"), e))?;
        jobs.push(job);
    }
    let backends = BackendPaths {
        video: raw.backends.video.map(|p| resolve(base, p)),
        audio: raw.backends.audio.map(|p| resolve(base, p)),
    };
    Ok(ConfigFile {
        edit,
        backends,
        media: raw.media,
        jobs,
    })
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base, &path.display().to_string())
}

/// Serialize with every value explicit; parsing the result reproduces the
/// same configuration.
pub fn emit_config(config: &ConfigFile) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::config("emit", e.to_string()))
}

/// Contents of `config.resolved`: everything needed to replay one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedRun {
    pub job: JobSpec,
    pub media: MediaSettings,
    pub backends: BackendPaths,
}

impl ResolvedRun {
    pub fn emit(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("emit", e.to_string()))
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| located(origin, "", e))?;
        let run: Self = serde_path_to_error::deserialize(de).map_err(|e| located(origin, &e.path().to_string(), e.inner()))?;
        run.job.edit.validate()?;
        Ok(run)
    }
}
