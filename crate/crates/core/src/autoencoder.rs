//! Small convolutional VAE that defines the latent space.

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::LatentCodec;
use crate::error::{Error, Result};
use crate::nn::{scalar, upsample2x, Conv2d};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamBuilder, ParamSet};
use crate::random;

pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    /// Spatial downsampling factor, a power of two >= 2.
    pub latent_factor: usize,
    pub latent_channels: usize,
    /// Channel width per resolution, finest first; one more entry than the
    /// number of downsampling stages.
    pub widths: Vec<usize>,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_factor: 4,
            latent_channels: 4,
            widths: vec![16, 32, 64],
        }
    }
}

impl AutoencoderConfig {
    pub fn stages(&self) -> usize {
        self.latent_factor.trailing_zeros() as usize
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_factor
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.latent_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::Config(format!(
                "latent factor must be a power of two >= 2, got {f}"
            )));
        }
        if self.image_size % f != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by latent factor {f}",
                self.image_size
            )));
        }
        if self.widths.len() != self.stages() + 1 {
            return Err(Error::Config(format!(
                "autoencoder needs {} widths for factor {f}, got {}",
                self.stages() + 1,
                self.widths.len()
            )));
        }
        if self.latent_channels == 0 || self.widths.iter().any(|w| *w == 0) {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 2e-3,
            kl_weight: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Net {
    enc_in: Conv2d,
    enc_blocks: Vec<(Conv2d, Conv2d)>,
    enc_mid: Conv2d,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_blocks: Vec<(Conv2d, Conv2d)>,
    dec_out: Conv2d,
}

impl Net {
    fn build(pb: &ParamBuilder, cfg: &AutoencoderConfig) -> Result<Self> {
        let w = &cfg.widths;
        let k = cfg.stages();
        let e = pb.pp("encoder");
        let d = pb.pp("decoder");
        let mut enc_blocks = Vec::with_capacity(k);
        for i in 0..k {
            let b = e.pp(format!("block{i}"));
            enc_blocks.push((
                Conv2d::new(&b.pp("conv"), w[i], w[i], 3, 1)?,
                Conv2d::new(&b.pp("down"), w[i], w[i + 1], 3, 2)?,
            ));
        }
        let mut dec_blocks = Vec::with_capacity(k);
        for i in (0..k).rev() {
            let b = d.pp(format!("block{i}"));
            dec_blocks.push((
                Conv2d::new(&b.pp("up"), w[i + 1], w[i], 3, 1)?,
                Conv2d::new(&b.pp("conv"), w[i], w[i], 3, 1)?,
            ));
        }
        Ok(Self {
            enc_in: Conv2d::new(&e.pp("conv_in"), 3, w[0], 3, 1)?,
            enc_blocks,
            enc_mid: Conv2d::new(&e.pp("mid"), w[k], w[k], 3, 1)?,
            enc_out: Conv2d::new(&e.pp("conv_out"), w[k], 2 * cfg.latent_channels, 3, 1)?,
            dec_in: Conv2d::new(&d.pp("conv_in"), cfg.latent_channels, w[k], 3, 1)?,
            dec_mid: Conv2d::new(&d.pp("mid"), w[k], w[k], 3, 1)?,
            dec_blocks,
            dec_out: Conv2d::new(&d.pp("conv_out"), w[0], 3, 3, 1)?,
        })
    }

    fn moments(&self, x: &Tensor, c: usize) -> Result<(Tensor, Tensor)> {
        let mut h = self.enc_in.forward(x)?;
        for (conv, down) in &self.enc_blocks {
            h = conv.forward(&h.silu()?)?;
            h = down.forward(&h.silu()?)?;
        }
        h = self.enc_mid.forward(&h.silu()?)?;
        let out = self.enc_out.forward(&h.silu()?)?;
        Ok((
            out.narrow(1, 0, c)?,
            out.narrow(1, c, c)?.clamp(-20f64, 10f64)?,
        ))
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?;
        h = self.dec_mid.forward(&h.silu()?)?;
        for (up, conv) in &self.dec_blocks {
            h = up.forward(&upsample2x(&h.silu()?)?)?;
            h = conv.forward(&h.silu()?)?;
        }
        Ok(self.dec_out.forward(&h.silu()?)?.clamp(-1f64, 1f64)?)
    }
}

/// Encoder and decoder weights plus the latent geometry.
///
/// Latents are the posterior mean multiplied by `latent_scale`, which is
/// fixed after training so that encoded corpus latents have unit variance.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    latent_scale: f64,
    params: ParamSet,
    net: Net,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: AutoencoderConfig,
    latent_scale: f64,
    loss_history: Vec<f64>,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::fresh(seed, true);
        let net = Net::build(&pb, &config)?;
        Ok(Self {
            config,
            latent_scale: 1.0,
            params: pb.params(),
            net,
            frozen: false,
        })
    }

    fn rebuild(
        config: AutoencoderConfig,
        latent_scale: f64,
        params: ParamSet,
        frozen: bool,
    ) -> Result<Self> {
        config.validate()?;
        let net = Net::build(&ParamBuilder::existing(&params, !frozen), &config)?;
        Ok(Self {
            config,
            latent_scale,
            params,
            net,
            frozen,
        })
    }

    /// Same weights with gradient tracking disabled.
    pub fn frozen(&self) -> Result<Self> {
        Self::rebuild(
            self.config.clone(),
            self.latent_scale,
            self.params.clone(),
            true,
        )
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn content_hash(&self) -> Result<String> {
        self.params.content_hash()
    }

    /// Latent shape `[C_lat, H/f, W/f]`.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.config.latent_size();
        (self.config.latent_channels, s, s)
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        match x.dims() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            d => Err(Error::Argument(format!(
                "autoencoder expects [B, 3, {s}, {s}] images, got {d:?}"
            ))),
        }
    }

    /// Unscaled posterior mean and log-variance.
    pub fn moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_images(x)?;
        self.net.moments(x, self.config.latent_channels)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.moments(x)?;
        Ok((mean * self.latent_scale)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.latent_shape();
        match z.dims() {
            [_, zc, zh, zw] if (*zc, *zh, *zw) == (c, h, w) => {}
            d => {
                return Err(Error::Argument(format!(
                    "autoencoder expects [B, {c}, {h}, {w}] latents, got {d:?}"
                )))
            }
        }
        self.net.decode(&(z * (1.0 / self.latent_scale))?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, loss_history: &[f64]) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            latent_scale: self.latent_scale,
            loss_history: loss_history.to_vec(),
        };
        Checkpoint::new(CHECKPOINT_KIND, &header, &self.params)?.save(path)
    }

    /// Loads a checkpoint as a frozen autoencoder.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, Vec<f64>)> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let header: Header = ck.meta()?;
        let params = ck.params()?;
        let reference = Self::new(header.config.clone(), 0)?;
        reference.params.check_layout(&params)?;
        Ok((
            Self::rebuild(header.config, header.latent_scale, params, true)?,
            header.loss_history,
        ))
    }
}

impl LatentCodec for Autoencoder {
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Autoencoder::encode(self, images)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Autoencoder::decode(self, latents)
    }

    fn downsample_factor(&self) -> usize {
        self.config.latent_factor
    }
}

/// Gathers rows `idx` of `x` along the batch axis.
pub(crate) fn gather(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids = Tensor::from_vec(
        idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        idx.len(),
        x.device(),
    )?;
    Ok(x.index_select(&ids, 0)?)
}

/// Trains a VAE on `images` (`[N, 3, H, W]` in `[-1, 1]`) and returns it
/// frozen, with the per-step loss history.
pub fn train_autoencoder(
    images: &Tensor,
    config: AutoencoderConfig,
    train: &AutoencoderTrainConfig,
) -> Result<(Autoencoder, Vec<f64>)> {
    let n = images.dims()[0];
    if n == 0 {
        return Err(Error::Data("autoencoder corpus is empty".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let ae = Autoencoder::new(config, train.seed)?;
    ae.check_images(images)?;
    let mut opt = Adam::new(
        &ae.params,
        AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::with_lr(train.learning_rate)
        },
    )?;
    let mut rng = random::derived(train.seed, "autoencoder-train");
    let mut history = Vec::with_capacity(train.steps);
    let c = ae.config.latent_channels;
    for _ in 0..train.steps {
        let idx: Vec<usize> = (0..train.batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..n))
            .collect();
        let x = gather(images, &idx)?;
        let (mean, logvar) = ae.net.moments(&x, c)?;
        let eps = random::normal(&mut rng, mean.shape().clone(), DType::F32)?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
        let recon = ae.net.decode(&z)?;
        let rec = (recon - &x)?.sqr()?.mean_all()?;
        let kl = ((mean.sqr()? + logvar.exp()? - &logvar)? - 1.0)?
            .mean_all()?
            .affine(0.5, 0.0)?;
        let loss = (rec + (kl * train.kl_weight)?)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "autoencoder loss became {value} at step {}",
                history.len()
            )));
        }
        history.push(value);
        opt.step(&loss.backward()?)?;
    }
    let mut ae = ae.frozen()?;
    ae.latent_scale = fit_latent_scale(&ae, images)?;
    Ok((ae, history))
}

fn fit_latent_scale(ae: &Autoencoder, images: &Tensor) -> Result<f64> {
    let n = images.dims()[0];
    let mut sum = 0f64;
    let mut sq = 0f64;
    let mut count = 0usize;
    for start in (0..n).step_by(64) {
        let len = (n - start).min(64);
        let (mean, _) = ae.moments(&images.narrow(0, start, len)?)?;
        let v = mean.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        count += v.len();
        sum += v.iter().sum::<f64>();
        sq += v.iter().map(|x| x * x).sum::<f64>();
    }
    let mu = sum / count as f64;
    let var = (sq / count as f64 - mu * mu).max(1e-12);
    Ok(1.0 / var.sqrt())
}

/// Mean absolute error of `decode(encode(x))` against `x`.
pub fn reconstruction_mae(ae: &Autoencoder, images: &Tensor) -> Result<f64> {
    let n = images.dims()[0];
    let mut total = 0f64;
    for start in (0..n).step_by(64) {
        let len = (n - start).min(64);
        let x = images.narrow(0, start, len)?;
        let r = ae.decode(&ae.encode(&x)?)?;
        total += scalar(&(r - &x)?.abs()?.sum_all()?)?;
    }
    Ok(total / images.elem_count() as f64)
}
