//! End-to-end wiring shared by the command line and the test suites: frozen
//! component loading, training-set assembly, batch inpainting and the
//! cross-identity grid.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::control::{ConditionedDenoiser, ControlBranch};
use crate::diffusion::{sample_inpaint, NoiseSchedule};
use crate::error::{Error, Result};
use crate::identity::{similarity, IdentityEmbedding, IdentityEncoder, RecognitionEncoder};
use crate::manifest::{Manifest, Region};
use crate::trainer::{self, TrainContext, TrainData};

/// The three frozen networks every conditioned run depends on.
pub struct Frozen {
    pub autoencoder: Autoencoder,
    pub encoder: RecognitionEncoder,
    pub backbone: Backbone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenHashes {
    pub autoencoder: String,
    pub encoder: String,
    pub backbone: String,
}

impl Frozen {
    /// Loads the checkpoints named in `cfg.paths`, listing every missing one
    /// at once, and checks them against the configured geometry.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.require(&["autoencoder", "encoder", "backbone"])?;
        let (autoencoder, _) = Autoencoder::load(cfg.paths.autoencoder.as_ref().unwrap())?;
        let encoder = RecognitionEncoder::load(cfg.paths.encoder.as_ref().unwrap())?;
        let (backbone, _) = Backbone::load(cfg.paths.backbone.as_ref().unwrap())?;
        let f = Self {
            autoencoder,
            encoder,
            backbone,
        };
        f.check(cfg)?;
        Ok(f)
    }

    pub fn check(&self, cfg: &RunConfig) -> Result<()> {
        let mut bad = Vec::new();
        if self.autoencoder.config() != &cfg.autoencoder_config() {
            bad.push("autoencoder");
        }
        if self.encoder.config() != &cfg.encoder_config() {
            bad.push("encoder");
        }
        if self.backbone.config() != &cfg.backbone_config() {
            bad.push("backbone");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "checkpoint architecture differs from the configuration for: {}",
                bad.join(", ")
            )))
        }
    }

    pub fn hashes(&self) -> Result<FrozenHashes> {
        Ok(FrozenHashes {
            autoencoder: self.autoencoder.content_hash()?,
            encoder: self.encoder.content_hash()?,
            backbone: self.backbone.content_hash()?,
        })
    }
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::from_config(&cfg.schedule)
}

/// Images, labels and per-region masks of a manifest, precomputed into
/// training tensors.
pub fn training_data(
    manifest: &Manifest,
    regions: &[Region],
    frozen: &Frozen,
) -> Result<TrainData> {
    manifest.validate()?;
    let images = manifest.load_images()?;
    let (labels, _) = manifest.identity_labels();
    let masks = regions
        .iter()
        .map(|&r| Ok((r, manifest.load_masks(r)?)))
        .collect::<Result<Vec<_>>>()?;
    TrainData::new(&images, labels, masks, &frozen.autoencoder, &frozen.encoder)
}

/// Trains (or resumes) the branch described by `cfg` into `out`.
pub fn run_training(cfg: &RunConfig, out: &Path, resume: bool) -> Result<PathBuf> {
    cfg.validate()?;
    cfg.require(&["manifest", "autoencoder", "encoder", "backbone"])?;
    let frozen = Frozen::load(cfg)?;
    let manifest = Manifest::load(cfg.paths.manifest.as_ref().unwrap())?;
    let train = cfg.train_config();
    let data = training_data(&manifest, &train.regions, &frozen)?;
    let sched = schedule(cfg)?;
    let ctx = TrainContext {
        autoencoder: &frozen.autoencoder,
        encoder: &frozen.encoder,
        backbone: &frozen.backbone,
        schedule: &sched,
        data: &data,
        weights: cfg.loss,
    };
    trainer::train(
        &ctx,
        &cfg.branch_config(),
        &train,
        out,
        resume,
        &cfg.to_toml()?,
    )
}

/// `[N, D]` unit embeddings of `[N, 3, H, W]` images.
pub fn embed(encoder: &dyn IdentityEncoder, images: &Tensor) -> Result<Tensor> {
    let n = images.dims4()?.0;
    let mut rows = Vec::new();
    for start in (0..n).step_by(64) {
        let len = (n - start).min(64);
        rows.push(encoder.embed(&images.narrow(0, start, len)?)?.detach());
    }
    Ok(Tensor::cat(&rows, 0)?)
}

/// Inpaints `images` under `masks` conditioned on `e_cond`, in chunks of
/// `chunk` with chunk `c` seeded by `seed + c`.
pub fn inpaint_batch(
    frozen: &Frozen,
    branch: &ControlBranch,
    images: &Tensor,
    masks: &Tensor,
    e_cond: &Tensor,
    sched: &NoiseSchedule,
    seed: u64,
    chunk: usize,
) -> Result<Tensor> {
    let n = images.dims4()?.0;
    if e_cond.dims()[0] != n || masks.dims()[0] != n {
        return Err(Error::Argument(format!(
            "{n} images with {} masks and {} embeddings",
            masks.dims()[0],
            e_cond.dims()[0]
        )));
    }
    let denoiser = ConditionedDenoiser {
        backbone: &frozen.backbone,
        branch,
    };
    let chunk = chunk.max(1);
    let mut out = Vec::new();
    for (c, start) in (0..n).step_by(chunk).enumerate() {
        let len = (n - start).min(chunk);
        out.push(sample_inpaint(
            &denoiser,
            &frozen.autoencoder,
            &images.narrow(0, start, len)?,
            &masks.narrow(0, start, len)?,
            &e_cond.narrow(0, start, len)?,
            sched,
            seed.wrapping_add(c as u64),
        )?);
    }
    Ok(Tensor::cat(&out, 0)?)
}

/// Cross-identity matrix: row `i` is image `i` inpainted with identity `j`'s
/// embedding; each cell holds the similarity to identity `j`'s reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityGrid {
    pub similarity: Vec<Vec<f64>>,
}

impl IdentityGrid {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.similarity.len();
        (0..n).map(|i| self.similarity[i][i]).sum::<f64>() / n as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.similarity.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += self.similarity[i][j];
                }
            }
        }
        acc / (n * (n - 1)) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,identity,similarity\n");
        for (i, row) in self.similarity.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                s.push_str(&format!("{i},{j},{v:.6}\n"));
            }
        }
        s
    }
}

/// Runs every (image, identity) pairing. Returns the `[N*N, 3, H, W]`
/// outputs in row-major order and the similarity matrix.
pub fn identity_grid(
    frozen: &Frozen,
    branch: &ControlBranch,
    images: &Tensor,
    masks: &Tensor,
    references: &Tensor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(Tensor, IdentityGrid)> {
    let n = images.dims4()?.0;
    if n < 2 || references.dims4()?.0 != n || masks.dims4()?.0 != n {
        return Err(Error::Argument(format!(
            "a grid needs matching images, masks and references (n >= 2), got {n}"
        )));
    }
    let e_ref = embed(&frozen.encoder, references)?;
    let rows: Vec<u32> = (0..n * n).map(|k| (k / n) as u32).collect();
    let cols: Vec<u32> = (0..n * n).map(|k| (k % n) as u32).collect();
    let idx = |v: &[u32]| Tensor::from_vec(v.to_vec(), v.len(), images.device());
    let imgs = images.index_select(&idx(&rows)?, 0)?;
    let ms = masks.index_select(&idx(&rows)?, 0)?;
    let es = e_ref.index_select(&idx(&cols)?, 0)?;
    let out = inpaint_batch(frozen, branch, &imgs, &ms, &es, sched, seed, n * n)?;
    let got = IdentityEmbedding::from_rows(&embed(&frozen.encoder, &out)?)?;
    let refs = IdentityEmbedding::from_rows(&e_ref)?;
    let mut sim = vec![vec![0.0; n]; n];
    for k in 0..n * n {
        sim[k / n][k % n] = similarity(&got[k], &refs[k % n])?;
    }
    Ok((out, IdentityGrid { similarity: sim }))
}
