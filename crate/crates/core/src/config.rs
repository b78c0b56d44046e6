//! TOML run configuration. Relative paths resolve against the config file's
//! directory; every seed must be given explicitly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dssd::DssdConfig;
use crate::experts::{QaConfig, SosConfig};
use crate::priors::external::Backend;
use crate::scheduler::{ModeTimetable, TimetableEntry};
use crate::trainer::{AdamConfig, ExpertWeights, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config key `{key}`: {message}")]
    Key { key: String, message: String },
}

fn key_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Key { key: key.into(), message: message.into() }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub ply: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    #[serde(default)]
    pub background: [f64; 3],
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSection {
    pub image: Option<PathBuf>,
    /// Content descriptor of the scene; also the diffusion text condition.
    pub content: Option<String>,
    pub style_text: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub n_opt: u64,
    pub start_view: usize,
    /// Required length of the timetable; defaults to its last entry's end.
    pub total_steps: Option<usize>,
    /// Stop early after this many steps.
    pub max_steps: Option<usize>,
    pub timetable: Option<Vec<TimetableEntry>>,
    pub mask_threshold: Option<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { n_opt: 10, start_view: 0, total_steps: None, max_steps: None, timetable: None, mask_threshold: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    #[serde(default = "default_backend")]
    pub backend: Backend,
    pub seed: Option<u64>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_dim")]
    pub descriptor_dim: usize,
    /// Clean image the toy denoiser pulls toward; defaults to the style image.
    pub target: Option<PathBuf>,
    /// Amplitude of the toy style-branch perturbation.
    pub style_shift: Option<f64>,
}

fn default_backend() -> Backend {
    Backend::Toy
}

fn default_dim() -> usize {
    32
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            backend: Backend::Toy,
            seed: None,
            embedding_dim: 32,
            descriptor_dim: 32,
            target: None,
            style_shift: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Write a checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub style: StyleSection,
    #[serde(default)]
    pub weights: ExpertWeights,
    #[serde(default)]
    pub dssd: DssdConfig,
    #[serde(default)]
    pub sos: SosConfig,
    #[serde(default)]
    pub qa: QaConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub providers: ProviderSection,
}

/// A validated config with absolute paths.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub raw: RunConfig,
    pub ply: PathBuf,
    pub cameras: PathBuf,
    pub style_image: PathBuf,
    pub content: String,
    pub output_dir: PathBuf,
    pub score_target: PathBuf,
    pub provider_seed: u64,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ResolvedConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text)?.resolve(base)
    }

    /// Checks required keys and files and builds the training config.
    pub fn resolve(self, base: &Path) -> Result<ResolvedConfig, ConfigError> {
        let seed = self.seed.ok_or_else(|| key_err("seed", "missing (seeds are mandatory)"))?;
        let provider_seed = self
            .providers
            .seed
            .ok_or_else(|| key_err("providers.seed", "missing (seeds are mandatory)"))?;
        let existing = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf, ConfigError> {
            let p = p.as_ref().ok_or_else(|| key_err(key, "missing"))?;
            let full = base.join(p);
            if !full.is_file() {
                return Err(key_err(key, format!("file not found: {}", full.display())));
            }
            Ok(full)
        };
        let ply = existing(&self.scene.ply, "scene.ply")?;
        let cameras = existing(&self.scene.cameras, "scene.cameras")?;
        let style_image = existing(&self.style.image, "style.image")?;
        let score_target = match &self.providers.target {
            Some(_) => existing(&self.providers.target, "providers.target")?,
            None => style_image.clone(),
        };
        let content = self
            .style
            .content
            .clone()
            .filter(|c| !c.trim().is_empty())
            .ok_or_else(|| key_err("style.content", "missing or empty"))?;
        let output_dir = base.join(self.output_dir.clone().ok_or_else(|| key_err("output_dir", "missing"))?);
        if self.providers.backend != Backend::Toy {
            return Err(key_err(
                "providers.backend",
                "only the toy backend is built in; external backends need an adapter",
            ));
        }
        if self.providers.embedding_dim < 2 || self.providers.descriptor_dim < 2 {
            return Err(key_err("providers", "embedding_dim and descriptor_dim must be >= 2"));
        }
        if let Some(s) = self.providers.style_shift {
            if !s.is_finite() {
                return Err(key_err("providers.style_shift", "must be finite"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(key_err("checkpoint_every", "must be >= 1"));
        }

        let timetable = match &self.schedule.timetable {
            None => ModeTimetable::default_schedule(),
            Some(entries) => {
                ModeTimetable::new(entries.clone()).map_err(|e| key_err("schedule.timetable", e.to_string()))?
            }
        };
        if let Some(total) = self.schedule.total_steps {
            ModeTimetable::covering(timetable.entries().to_vec(), total)
                .map_err(|e| key_err("schedule.timetable", e.to_string()))?;
        }

        let train = TrainConfig {
            weights: self.weights,
            dssd: self.dssd.clone(),
            sos: self.sos.clone(),
            qa: self.qa.clone(),
            adam: self.adam,
            timetable,
            n_opt: self.schedule.n_opt,
            start_view: self.schedule.start_view,
            seed,
            background: self.scene.background,
            max_steps: self.schedule.max_steps,
            mask_threshold: self.schedule.mask_threshold,
        };
        self.weights.validate().map_err(|e| key_err("weights", e.to_string()))?;
        self.dssd.validate().map_err(|e| key_err("dssd", e.to_string()))?;
        self.sos.validate().map_err(|e| key_err("sos", e.to_string()))?;
        self.qa.validate().map_err(|e| key_err("qa", e.to_string()))?;
        train.validate().map_err(|e| key_err("schedule", e.to_string()))?;

        Ok(ResolvedConfig {
            raw: self,
            ply,
            cameras,
            style_image,
            content,
            output_dir,
            score_target,
            provider_seed,
            train,
        })
    }
}
