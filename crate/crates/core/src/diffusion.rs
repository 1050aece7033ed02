//! Latent diffusion: noise schedule, closed-form corruption, ancestral
//! reverse steps and the masked inpainting sampler.
//!
//! Latents are batched `[B, C, H, W]` tensors. Timesteps are 1-based.
//! Every function here is pure; noise is always supplied by the caller or
//! drawn from an explicitly seeded stream.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random;

/// Smallest cumulative signal level for which `predict_x0` is defined.
pub const MIN_ALPHA_BAR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Per-step variances `beta_t` and cumulative products `alpha_bar_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config(format!(
                "schedule needs at least one step, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: Timestep) -> f64 {
        self.betas[t.0 - 1]
    }

    pub fn alpha_bar(&self, t: Timestep) -> f64 {
        self.alpha_bars[t.0 - 1]
    }

    pub fn timestep(&self, t: usize) -> Result<Timestep> {
        Timestep::new(t, self)
    }
}

/// A timestep index in `[1, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestep(usize);

impl Timestep {
    pub fn new(t: usize, sched: &NoiseSchedule) -> Result<Self> {
        if t < 1 || t > sched.steps() {
            return Err(Error::Argument(format!(
                "timestep {t} outside [1, {}]",
                sched.steps()
            )));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

pub fn timestep_values(ts: &[Timestep]) -> Vec<usize> {
    ts.iter().map(|t| t.0).collect()
}

/// `[B, 1, 1, 1]` tensor of `f(t_i)` in the dtype of `like`; a single
/// timestep broadcasts over the batch.
fn per_sample(like: &Tensor, ts: &[Timestep], f: impl Fn(Timestep) -> f64) -> Result<Tensor> {
    let b = like.dims()[0];
    let vals: Vec<f64> = match ts.len() {
        1 => vec![f(ts[0]); b],
        n if n == b => ts.iter().map(|t| f(*t)).collect(),
        n => return Err(Error::Argument(format!("{n} timesteps for a batch of {b}"))),
    };
    Ok(Tensor::from_vec(vals, (b, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Argument(format!(
            "{what}: shape {:?} does not match {:?}",
            b.dims(),
            a.dims()
        )));
    }
    Ok(())
}

fn check_batched(z: &Tensor) -> Result<()> {
    if z.rank() != 4 {
        return Err(Error::Argument(format!(
            "latents must be [B, C, H, W], got {:?}",
            z.dims()
        )));
    }
    Ok(())
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_diffuse(
    z0: &Tensor,
    ts: &[Timestep],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_batched(z0)?;
    same_shape(z0, eps, "noise")?;
    let a = per_sample(z0, ts, |t| sched.alpha_bar(t).sqrt())?;
    let s = per_sample(z0, ts, |t| (1.0 - sched.alpha_bar(t)).sqrt())?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Inverts [`forward_diffuse`] given a noise estimate.
pub fn predict_x0(
    zt: &Tensor,
    eps_hat: &Tensor,
    ts: &[Timestep],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_batched(zt)?;
    same_shape(zt, eps_hat, "noise estimate")?;
    for t in ts {
        let ab = sched.alpha_bar(*t);
        if ab <= MIN_ALPHA_BAR {
            return Err(Error::Numerical(format!(
                "alpha_bar at t={} is {ab:e}, too small to invert",
                t.0
            )));
        }
    }
    let s = per_sample(zt, ts, |t| (1.0 - sched.alpha_bar(t)).sqrt())?;
    let inv = per_sample(zt, ts, |t| 1.0 / sched.alpha_bar(t).sqrt())?;
    Ok((zt - eps_hat.broadcast_mul(&s)?)?.broadcast_mul(&inv)?)
}

/// One ancestral step with variance `beta_t`; the noise term is dropped at
/// `t = 1`.
pub fn reverse_step(
    zt: &Tensor,
    eps_hat: &Tensor,
    t: Timestep,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    check_batched(zt)?;
    same_shape(zt, eps_hat, "noise estimate")?;
    same_shape(zt, noise, "noise")?;
    if t.0 > sched.steps() {
        return Err(Error::Argument(format!("timestep {} beyond schedule", t.0)));
    }
    let beta = sched.beta(t);
    let ab = sched.alpha_bar(t);
    let mean = ((zt - (eps_hat * (beta / (1.0 - ab).sqrt()))?)? * (1.0 / (1.0 - beta).sqrt()))?;
    if t.0 == 1 {
        Ok(mean)
    } else {
        Ok((mean + (noise * beta.sqrt())?)?)
    }
}

/// Pixel mask `[B, 1, H, W]` to latent resolution: a latent cell is a hole
/// if any pixel it covers is a hole.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(mask.clone());
    }
    let (_, _, h, w) = mask.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Argument(format!(
            "mask {h}x{w} not divisible by latent factor {factor}"
        )));
    }
    Ok(mask.max_pool2d(factor)?)
}

/// A noise predictor conditioned on the inpainting inputs and an identity
/// embedding.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        zt: &Tensor,
        ts: &[Timestep],
        mask: &Tensor,
        z_cond: &Tensor,
        e_cond: &Tensor,
    ) -> Result<Tensor>;
}

/// Image-to-latent codec.
pub trait LatentCodec {
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
    fn downsample_factor(&self) -> usize;
}

/// Full reverse chain from pure noise at latent resolution.
pub fn sample_latent(
    denoiser: &dyn NoisePredictor,
    mask_latent: &Tensor,
    z_cond: &Tensor,
    e_cond: &Tensor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    check_batched(z_cond)?;
    let (b, _, h, w) = mask_latent.dims4()?;
    let (bz, _, hz, wz) = z_cond.dims4()?;
    if (b, h, w) != (bz, hz, wz) {
        return Err(Error::Argument(format!(
            "latent mask {:?} incompatible with conditioning latent {:?}",
            mask_latent.dims(),
            z_cond.dims()
        )));
    }
    let mut rng = random::rng(seed);
    let dtype = z_cond.dtype();
    let mut z = random::normal(&mut rng, z_cond.shape().clone(), dtype)?;
    for t in (1..=sched.steps()).rev() {
        let ts = Timestep(t);
        let eps_hat = denoiser.predict_noise(&z, &[ts], mask_latent, z_cond, e_cond)?;
        let noise = if t > 1 {
            random::normal(&mut rng, z_cond.shape().clone(), dtype)?
        } else {
            z.zeros_like()?
        };
        z = reverse_step(&z, &eps_hat, ts, sched, &noise)?.detach();
    }
    Ok(z)
}

/// Inpaints the hole (`mask == 1`) of each image.
///
/// The masked image is encoded as the conditioning latent, the reverse chain
/// runs in latent space, and the decoded sample is composited back so that
/// pixels outside the hole are copied from `images` bit for bit.
pub fn sample_inpaint(
    denoiser: &dyn NoisePredictor,
    codec: &dyn LatentCodec,
    images: &Tensor,
    mask: &Tensor,
    e_cond: &Tensor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    let (bm, cm, hm, wm) = mask.dims4()?;
    if (bm, cm, hm, wm) != (b, 1, h, w) {
        return Err(Error::Argument(format!(
            "mask {:?} does not match images {:?}",
            mask.dims(),
            images.dims()
        )));
    }
    if c != 3 {
        return Err(Error::Argument(format!(
            "expected RGB images, got {c} channels"
        )));
    }
    let keep = (1.0 - mask)?;
    let masked = images.broadcast_mul(&keep)?;
    let z_cond = codec.encode(&masked)?;
    let mask_latent = downsample_mask(mask, codec.downsample_factor())?;
    let z = sample_latent(denoiser, &mask_latent, &z_cond, e_cond, sched, seed)?;
    let generated = codec.decode(&z)?;
    composite(&generated, images, mask)
}

/// `mask ? generated : original`, selected per pixel without arithmetic.
pub fn composite(generated: &Tensor, original: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(original, generated, "generated image")?;
    let sel = mask
        .to_dtype(DType::F32)?
        .gt(0.5)?
        .broadcast_as(original.shape())?
        .contiguous()?;
    Ok(sel.where_cond(generated, original)?)
}
