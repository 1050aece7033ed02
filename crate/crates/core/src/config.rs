//! Run configuration: one TOML file shared by every command.
//!
//! Image size, latent factor and embedding width are stated once and the
//! per-component configurations are derived from them. Unknown keys are
//! rejected and every problem is reported together before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderConfig, AutoencoderTrainConfig};
use crate::backbone::{BackboneConfig, BackboneTrainConfig};
use crate::control::{BranchConfig, SEED_RATIO};
use crate::diffusion::ScheduleConfig;
use crate::emask::EMaskConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::identity::{EncoderConfig, EncoderTrainConfig};
use crate::losses::LossWeights;
use crate::manifest::Region;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub image_size: usize,
    pub latent_factor: usize,
    /// Latent-to-seed-map ratio; fixed.
    pub seed_ratio: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_factor: 4,
            seed_ratio: SEED_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub small_t_fraction: f64,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub regions: Vec<Region>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            steps: t.steps,
            small_t_fraction: t.small_t_fraction,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
            regions: t.regions,
        }
    }
}

/// Frozen artifacts and the dataset. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub autoencoder: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSection {
    pub latent_channels: usize,
    pub widths: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        let a = AutoencoderConfig::default();
        let t = AutoencoderTrainConfig::default();
        Self {
            latent_channels: a.latent_channels,
            widths: a.widths,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            kl_weight: t.kl_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub scale: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        let t = EncoderTrainConfig::default();
        Self {
            widths: e.widths,
            feature_dim: e.feature_dim,
            embedding_dim: e.embedding_dim,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            margin: t.margin,
            scale: t.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub temb_dim: usize,
    pub groups: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let t = BackboneTrainConfig::default();
        Self {
            widths: b.widths,
            time_dim: b.time_dim,
            temb_dim: b.temb_dim,
            groups: b.groups,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchSection {
    pub seed_channels: usize,
    pub block: String,
}

impl Default for BranchSection {
    fn default() -> Self {
        let b = BranchConfig::default();
        Self {
            seed_channels: b.seed_channels,
            block: b.block,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: Geometry,
    pub schedule: ScheduleConfig,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub paths: Paths,
    pub autoencoder: AutoencoderSection,
    pub encoder: EncoderSection,
    pub backbone: BackboneSection,
    pub branch: BranchSection,
    pub eval: EvalConfig,
    pub emask: EMaskConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses, validates and resolves relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.paths.manifest,
            &mut self.paths.autoencoder,
            &mut self.paths.encoder,
            &mut self.paths.backbone,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn latent_size(&self) -> usize {
        self.geometry.image_size / self.geometry.latent_factor.max(1)
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            image_size: self.geometry.image_size,
            latent_factor: self.geometry.latent_factor,
            latent_channels: self.autoencoder.latent_channels,
            widths: self.autoencoder.widths.clone(),
        }
    }

    pub fn autoencoder_train(&self) -> AutoencoderTrainConfig {
        AutoencoderTrainConfig {
            steps: self.autoencoder.steps,
            batch_size: self.autoencoder.batch_size,
            learning_rate: self.autoencoder.learning_rate,
            kl_weight: self.autoencoder.kl_weight,
            seed: self.seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.geometry.image_size,
            widths: self.encoder.widths.clone(),
            feature_dim: self.encoder.feature_dim,
            embedding_dim: self.encoder.embedding_dim,
        }
    }

    pub fn encoder_train(&self) -> EncoderTrainConfig {
        EncoderTrainConfig {
            steps: self.encoder.steps,
            batch_size: self.encoder.batch_size,
            learning_rate: self.encoder.learning_rate,
            margin: self.encoder.margin,
            scale: self.encoder.scale,
            seed: self.seed,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            latent_channels: self.autoencoder.latent_channels,
            latent_size: self.latent_size(),
            widths: self.backbone.widths.clone(),
            time_dim: self.backbone.time_dim,
            temb_dim: self.backbone.temb_dim,
            groups: self.backbone.groups,
        }
    }

    pub fn backbone_train(&self) -> BackboneTrainConfig {
        BackboneTrainConfig {
            steps: self.backbone.steps,
            batch_size: self.backbone.batch_size,
            learning_rate: self.backbone.learning_rate,
            seed: self.seed,
        }
    }

    pub fn branch_config(&self) -> BranchConfig {
        BranchConfig {
            embedding_dim: self.encoder.embedding_dim,
            seed_channels: self.branch.seed_channels,
            block: self.branch.block.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            steps: t.steps,
            seed: self.seed,
            small_t_fraction: t.small_t_fraction,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
            regions: t.regions.clone(),
        }
    }

    /// Every validation problem, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                out.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        };
        let g = &self.geometry;
        if g.seed_ratio != SEED_RATIO {
            check(Err(Error::Config(format!(
                "geometry.seed_ratio is fixed at {SEED_RATIO}, got {}",
                g.seed_ratio
            ))));
        }
        if g.latent_factor == 0 || g.image_size % g.latent_factor.max(1) != 0 {
            check(Err(Error::Config(format!(
                "geometry.image_size {} is not divisible by latent_factor {}",
                g.image_size, g.latent_factor
            ))));
        }
        check(self.schedule_check());
        check(self.loss.validate());
        check(self.autoencoder_config().validate());
        check(self.encoder_config().validate());
        check(self.backbone_config().validate());
        check(self.branch_config().validate());
        check(self.train_config().validate(&self.loss));
        if self.emask.pad_frac < 0.0 || !self.emask.pad_frac.is_finite() {
            check(Err(Error::Config("emask.pad_frac must be >= 0".into())));
        }
        out
    }

    fn schedule_check(&self) -> Result<()> {
        crate::diffusion::NoiseSchedule::from_config(&self.schedule).map(|_| ())
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} configuration problem(s):\n  - {}",
                p.len(),
                p.join("\n  - ")
            )))
        }
    }

    /// Paths that are unset or missing on disk, as `(key, path)` pairs.
    pub fn missing_artifacts(&self, keys: &[&str]) -> Vec<String> {
        let mut out = Vec::new();
        for &k in keys {
            let p = match k {
                "manifest" => &self.paths.manifest,
                "autoencoder" => &self.paths.autoencoder,
                "encoder" => &self.paths.encoder,
                "backbone" => &self.paths.backbone,
                _ => continue,
            };
            match p {
                None => out.push(format!("paths.{k} is not set")),
                Some(p) if !p.is_file() => {
                    out.push(format!("paths.{k}: {} does not exist", p.display()))
                }
                _ => {}
            }
        }
        out
    }

    pub fn require(&self, keys: &[&str]) -> Result<()> {
        let missing = self.missing_artifacts(keys);
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "missing artifacts:\n  - {}",
                missing.join("\n  - ")
            )))
        }
    }
}
