//! Control-branch training: batch assembly with in-batch negatives, the
//! single-step denoising proxy used for embedding supervision, optimizer
//! steps on the branch only, checkpointing and exact resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{gather, Autoencoder};
use crate::backbone::{inpainting_latents, Backbone};
use crate::checkpoint::Checkpoint;
use crate::control::{denoise_conditioned, BranchConfig, ConditionedDenoiser, ControlBranch};
use crate::diffusion::{
    forward_diffuse, predict_x0, LatentCodec, NoisePredictor, NoiseSchedule, Timestep,
};
use crate::error::{Error, Result};
use crate::identity::IdentityEncoder;
use crate::imageio::ensure_parent;
use crate::losses::{
    denoise_loss, id_loss, total_loss_tensor, triplet_loss, LossBreakdown, LossWeights,
};
use crate::manifest::Region;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::random::{self, RngState, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Proxy timesteps are drawn uniformly from `[1, ceil(small_t_fraction * T)]`.
    pub small_t_fraction: f64,
    pub clip_norm: f64,
    /// Steps between checkpoints; the final step is always checkpointed.
    pub checkpoint_every: usize,
    /// Mask regions sampled for each training example.
    pub regions: Vec<Region>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 5e-6,
            steps: 20_000,
            seed: 0,
            small_t_fraction: 0.1,
            clip_norm: 1.0,
            checkpoint_every: 1000,
            regions: vec![Region::Eyes, Region::Nose, Region::Mouth],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, weights: &LossWeights) -> Result<()> {
        weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.batch_size < 2 && weights.lambda_trip > 0.0 {
            return Err(Error::Config(
                "the triplet term needs batch_size >= 2 to draw a negative".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.small_t_fraction > 0.0 && self.small_t_fraction <= 1.0) {
            return Err(Error::Config("small_t_fraction must lie in (0, 1]".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if self.regions.is_empty() {
            return Err(Error::Config(
                "at least one training region is required".into(),
            ));
        }
        Ok(())
    }

    /// Largest proxy timestep for a schedule of `steps` steps.
    pub fn small_t_bound(&self, steps: usize) -> usize {
        ((self.small_t_fraction * steps as f64).ceil() as usize).clamp(1, steps)
    }
}

/// Frozen, precomputed training inputs.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Embeddings of the unmasked images.
    pub e_cond: Tensor,
    pub z0: Tensor,
    /// Per region: masked-image latents and latent masks.
    pub regions: Vec<(Region, Tensor, Tensor)>,
    /// Pixel masks per region.
    pub masks: Vec<Tensor>,
}

impl TrainData {
    pub fn new(
        images: &Tensor,
        labels: Vec<usize>,
        masks: Vec<(Region, Tensor)>,
        ae: &Autoencoder,
        encoder: &dyn IdentityEncoder,
    ) -> Result<Self> {
        let n = images.dims()[0];
        if n == 0 || labels.len() != n {
            return Err(Error::Data(format!(
                "{} labels for {n} training images",
                labels.len()
            )));
        }
        if masks.is_empty() {
            return Err(Error::Config("no training masks".into()));
        }
        let mut e = Vec::new();
        let mut z0 = Vec::new();
        for start in (0..n).step_by(64) {
            let len = (n - start).min(64);
            let x = images.narrow(0, start, len)?;
            e.push(encoder.embed(&x)?.detach());
            z0.push(ae.encode(&x)?.detach());
        }
        let mut regions = Vec::new();
        let mut pixel_masks = Vec::new();
        for (r, m) in masks {
            if m.dims() != [n, 1, images.dims()[2], images.dims()[3]] {
                return Err(Error::Data(format!(
                    "{r} masks {:?} do not match images {:?}",
                    m.dims(),
                    images.dims()
                )));
            }
            let mut zc = Vec::new();
            let mut ml = Vec::new();
            for start in (0..n).step_by(64) {
                let len = (n - start).min(64);
                let (_, c, l) = inpainting_latents(
                    ae,
                    &images.narrow(0, start, len)?,
                    &m.narrow(0, start, len)?,
                )?;
                zc.push(c.detach());
                ml.push(l);
            }
            regions.push((r, Tensor::cat(&zc, 0)?, Tensor::cat(&ml, 0)?));
            pixel_masks.push(m);
        }
        Ok(Self {
            images: images.clone(),
            labels,
            e_cond: Tensor::cat(&e, 0)?,
            z0: Tensor::cat(&z0, 0)?,
            regions,
            masks: pixel_masks,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One assembled batch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub indices: Vec<usize>,
    /// Index into `TrainData::regions` per example.
    pub region: Vec<usize>,
    pub labels: Vec<usize>,
    pub z0: Tensor,
    pub z_cond: Tensor,
    pub mask: Tensor,
    pub e_cond: Tensor,
    pub neg_index: Vec<usize>,
}

/// For each position a uniformly drawn other position with a different
/// identity; falls back to any other position when the batch holds a single
/// identity.
pub fn sample_negatives(labels: &[usize], rng: &mut SeededRng) -> Vec<usize> {
    let b = labels.len();
    if b < 2 {
        return vec![0; b];
    }
    (0..b)
        .map(|i| {
            let diff: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
            if diff.is_empty() {
                log::warn!("batch holds a single identity; negative for {i} is the same identity");
                let j = rng.random_range(0..b - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            } else {
                diff[rng.random_range(0..diff.len())]
            }
        })
        .collect()
}

/// Gathers `indices` from `data`, draws one mask region per example and the
/// in-batch negatives.
pub fn build_batch(data: &TrainData, indices: &[usize], rng: &mut SeededRng) -> Result<TrainBatch> {
    if indices.is_empty() || indices.iter().any(|&i| i >= data.len()) {
        return Err(Error::Argument(format!(
            "batch indices {indices:?} out of range for {} examples",
            data.len()
        )));
    }
    let region: Vec<usize> = indices
        .iter()
        .map(|_| rng.random_range(0..data.regions.len()))
        .collect();
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    let neg_index = sample_negatives(&labels, rng);
    let mut zc = Vec::with_capacity(indices.len());
    let mut ml = Vec::with_capacity(indices.len());
    for (&i, &r) in indices.iter().zip(&region) {
        zc.push(data.regions[r].1.narrow(0, i, 1)?);
        ml.push(data.regions[r].2.narrow(0, i, 1)?);
    }
    Ok(TrainBatch {
        indices: indices.to_vec(),
        region,
        labels,
        z0: gather(&data.z0, indices)?,
        z_cond: Tensor::cat(&zc, 0)?,
        mask: Tensor::cat(&ml, 0)?,
        e_cond: gather(&data.e_cond, indices)?,
        neg_index,
    })
}

/// Single-step denoising proxy: diffuse `z0` to `ts`, predict the noise once,
/// solve for the clean latent and decode it.
#[allow(clippy::too_many_arguments)]
pub fn proxy_generate(
    z0: &Tensor,
    ts: &[Timestep],
    eps: &Tensor,
    mask: &Tensor,
    z_cond: &Tensor,
    e_cond: &Tensor,
    denoiser: &dyn NoisePredictor,
    codec: &dyn LatentCodec,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let zt = forward_diffuse(z0, ts, eps, sched)?;
    let eps_hat = denoiser.predict_noise(&zt, ts, mask, z_cond, e_cond)?;
    let x0 = predict_x0(&zt, &eps_hat, ts, sched)?;
    codec.decode(&x0)
}

/// Frozen components a training run reads.
pub struct TrainContext<'a> {
    pub autoencoder: &'a Autoencoder,
    pub encoder: &'a dyn IdentityEncoder,
    pub backbone: &'a Backbone,
    pub schedule: &'a NoiseSchedule,
    pub data: &'a TrainData,
    pub weights: LossWeights,
}

/// Mutable training state.
pub struct TrainState {
    pub branch: ControlBranch,
    pub optimizer: Adam,
    pub rng: SeededRng,
    pub step: usize,
}

impl TrainState {
    pub fn new(branch: ControlBranch, config: &TrainConfig) -> Result<Self> {
        let optimizer = Adam::new(
            branch.params(),
            AdamConfig {
                clip_norm: Some(config.clip_norm),
                ..AdamConfig::with_lr(config.learning_rate)
            },
        )?;
        Ok(Self {
            branch,
            optimizer,
            rng: random::derived(config.seed, "train"),
            step: 0,
        })
    }

    /// Fresh branch initialized from the run seed.
    pub fn fresh(branch: BranchConfig, ctx: &TrainContext, config: &TrainConfig) -> Result<Self> {
        let seed = config.seed ^ 0xb7a1_c0de;
        Self::new(
            ControlBranch::new(branch, ctx.backbone.config(), seed)?,
            config,
        )
    }
}

fn draw_timesteps(
    rng: &mut SeededRng,
    n: usize,
    max: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<Timestep>> {
    (0..n)
        .map(|_| sched.timestep(rng.random_range(1..=max)))
        .collect()
}

/// Loss tensor and its breakdown for one batch, without updating anything.
pub fn evaluate_losses(
    ctx: &TrainContext,
    branch: &ControlBranch,
    batch: &TrainBatch,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor, LossBreakdown, Vec<usize>)> {
    let sched = ctx.schedule;
    let b = batch.indices.len();
    let ts = draw_timesteps(rng, b, sched.steps(), sched)?;
    let eps = random::normal(rng, batch.z0.shape().clone(), DType::F32)?;
    let zt = forward_diffuse(&batch.z0, &ts, &eps, sched)?;
    let eps_hat = denoise_conditioned(
        &zt,
        &ts,
        &batch.mask,
        &batch.z_cond,
        &batch.e_cond,
        ctx.backbone,
        branch,
    )?;
    let l_dn = denoise_loss(&eps, &eps_hat)?;
    let bound = config.small_t_bound(sched.steps());
    let generated = if ts.iter().all(|t| t.get() <= bound) {
        ctx.autoencoder
            .decode(&predict_x0(&zt, &eps_hat, &ts, sched)?)?
    } else {
        let ts_small = draw_timesteps(rng, b, bound, sched)?;
        let eps_small = random::normal(rng, batch.z0.shape().clone(), DType::F32)?;
        let denoiser = ConditionedDenoiser {
            backbone: ctx.backbone,
            branch,
        };
        proxy_generate(
            &batch.z0,
            &ts_small,
            &eps_small,
            &batch.mask,
            &batch.z_cond,
            &batch.e_cond,
            &denoiser,
            ctx.autoencoder,
            sched,
        )?
    };
    let e_gen = ctx.encoder.embed(&generated)?;
    let l_id = id_loss(&e_gen, &batch.e_cond)?;
    let l_trip = if b >= 2 {
        let e_neg = gather(&batch.e_cond, &batch.neg_index)?;
        Some(triplet_loss(
            &e_gen,
            &batch.e_cond,
            &e_neg,
            ctx.weights.margin,
        )?)
    } else {
        None
    };
    let (total, breakdown) = total_loss_tensor(&l_dn, Some(&l_id), l_trip.as_ref(), &ctx.weights)
        .map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!(
            "{m}; batch indices {:?}, timesteps {:?}, regions {:?}",
            batch.indices,
            ts.iter().map(|t| t.get()).collect::<Vec<_>>(),
            batch.region
        )),
        other => other,
    })?;
    Ok((total, breakdown, ts.iter().map(|t| t.get()).collect()))
}

/// Draws a batch from the state's stream.
pub fn next_batch(
    ctx: &TrainContext,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainBatch> {
    let n = ctx.data.len();
    let b = config.batch_size;
    let indices: Vec<usize> = if b <= n {
        sample_indices(rng, n, b).into_vec()
    } else {
        (0..b).map(|_| rng.random_range(0..n)).collect()
    };
    build_batch(ctx.data, &indices, rng)
}

/// One optimizer update of the branch.
pub fn train_step(
    state: &mut TrainState,
    ctx: &TrainContext,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let batch = next_batch(ctx, config, &mut state.rng)?;
    let (total, breakdown, _) =
        evaluate_losses(ctx, &state.branch, &batch, config, &mut state.rng)?;
    let grads = total.backward()?;
    state.optimizer.step(&grads).map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!(
            "step {}: {m}; losses {breakdown:?}; batch indices {:?}",
            state.step, batch.indices
        )),
        other => other,
    })?;
    state.step += 1;
    Ok(breakdown)
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub denoise: f64,
    pub id: f64,
    pub triplet: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StepState {
    step: usize,
    rng: RngState,
    branch_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
}

pub const BRANCH_FILE: &str = "branch.ckpt";
const OPTIMIZER_FILE: &str = "optimizer.ckpt";
const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

fn step_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:07}"))
}

fn write_checkpoint(out: &Path, state: &TrainState) -> Result<PathBuf> {
    let dir = step_dir(out, state.step);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    state.branch.save(dir.join(BRANCH_FILE))?;
    let (opt_step, entries) = state.optimizer.export()?;
    Checkpoint::new(
        "adam-state",
        &OptimizerHeader { step: opt_step },
        &ParamSet::import(entries)?,
    )?
    .save(dir.join(OPTIMIZER_FILE))?;
    let st = StepState {
        step: state.step,
        rng: RngState::capture(&state.rng),
        branch_hash: state.branch.content_hash()?,
    };
    let p = dir.join(STATE_FILE);
    std::fs::write(&p, serde_json::to_vec_pretty(&st)?).map_err(|e| Error::io(&p, e))?;
    Ok(dir)
}

/// Most recent checkpoint directory under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Result<Option<(usize, PathBuf)>> {
    let root = out.join("checkpoints");
    if !root.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for e in std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let p = e.map_err(|e| Error::io(&root, e))?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(s) = step {
            if p.join(STATE_FILE).is_file() && best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
    }
    Ok(best)
}

fn load_checkpoint(
    dir: &Path,
    ctx: &TrainContext,
    branch_cfg: &BranchConfig,
    config: &TrainConfig,
) -> Result<TrainState> {
    let p = dir.join(STATE_FILE);
    let st: StepState = serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
    let branch = ControlBranch::load(dir.join(BRANCH_FILE), ctx.backbone.config())?;
    if branch.config() != branch_cfg {
        return Err(Error::Checkpoint(
            "checkpointed branch configuration differs from the run configuration".into(),
        ));
    }
    if branch.content_hash()? != st.branch_hash {
        return Err(Error::Checkpoint(format!(
            "branch weights in {} do not match the recorded hash",
            dir.display()
        )));
    }
    let mut state = TrainState::new(branch, config)?;
    let ck = Checkpoint::load_kind(dir.join(OPTIMIZER_FILE), "adam-state")?;
    let header: OptimizerHeader = ck.meta()?;
    state
        .optimizer
        .import(header.step, &ck.params()?.export()?)?;
    state.rng = st.rng.restore();
    state.step = st.step;
    Ok(state)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) training into `out`, returning the final branch
/// checkpoint path. `snapshot` is written verbatim as `config.toml`.
pub fn train(
    ctx: &TrainContext,
    branch_cfg: &BranchConfig,
    config: &TrainConfig,
    out: &Path,
    resume: bool,
    snapshot: &str,
) -> Result<PathBuf> {
    config.validate(&ctx.weights)?;
    let log_path = out.join(LOG_FILE);
    let (mut state, mut rows) = if resume {
        let (step, dir) = latest_checkpoint(out)?.ok_or_else(|| {
            Error::Data(format!(
                "nothing to resume: no checkpoint under {}",
                out.display()
            ))
        })?;
        let state = load_checkpoint(&dir, ctx, branch_cfg, config)?;
        let mut rows = read_log(&log_path)?;
        rows.retain(|r| r.step < step);
        (state, rows)
    } else {
        (
            TrainState::fresh(branch_cfg.clone(), ctx, config)?,
            Vec::new(),
        )
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    ensure_parent(&cfg_path)?;
    std::fs::write(&cfg_path, snapshot).map_err(|e| Error::io(&cfg_path, e))?;
    write_log(&log_path, &rows)?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut checkpointed = false;
    while state.step < config.steps {
        let step = state.step;
        let b = train_step(&mut state, ctx, config)?;
        let row = LogRow {
            step,
            denoise: b.denoise,
            id: b.id,
            triplet: b.triplet,
            total: b.total,
        };
        let mut line = serde_json::to_vec(&row)?;
        line.push(b'\n');
        log.write_all(&line).map_err(|e| Error::io(&log_path, e))?;
        rows.push(row);
        if step % 50 == 0 {
            log::info!(
                "step {step}: total {:.5} denoise {:.5} id {:.4} triplet {:.4}",
                b.total,
                b.denoise,
                b.id,
                b.triplet
            );
        }
        if state.step % config.checkpoint_every == 0 || state.step == config.steps {
            write_checkpoint(out, &state)?;
            checkpointed = true;
        }
    }
    if !checkpointed {
        // Resumed at the final step: still emit the checkpoint.
        write_checkpoint(out, &state)?;
    }
    let final_path = out.join(BRANCH_FILE);
    state.branch.save(&final_path)?;
    Ok(final_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negatives_for_two_identities_are_forced() {
        let mut rng = random::rng(0);
        assert_eq!(sample_negatives(&[3, 7], &mut rng), vec![1, 0]);
    }

    #[test]
    fn negatives_never_share_identity_when_possible() {
        let mut rng = random::rng(1);
        for _ in 0..200 {
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            let neg = sample_negatives(&labels, &mut rng);
            let distinct = labels
                .iter()
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            for (i, &j) in neg.iter().enumerate() {
                assert_ne!(i, j);
                if distinct > 1 {
                    assert_ne!(labels[i], labels[j]);
                }
            }
        }
    }

    #[test]
    fn small_t_bound_rule() {
        let c = TrainConfig::default();
        assert_eq!(c.small_t_bound(1000), 100);
        assert_eq!(c.small_t_bound(7), 1);
        assert_eq!(
            TrainConfig {
                small_t_fraction: 0.15,
                ..c
            }
            .small_t_bound(10),
            2
        );
    }

    #[test]
    fn config_validation() {
        let w = LossWeights::default();
        assert!(TrainConfig::default().validate(&w).is_ok());
        let c = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(c.validate(&w), Err(Error::Config(_))));
        let zero_trip = LossWeights {
            lambda_trip: 0.0,
            ..w
        };
        assert!(c.validate(&zero_trip).is_ok());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate(&w)
        .is_err());
    }
}
