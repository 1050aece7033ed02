//! Latent inpainting U-Net. Mask and masked-image latent enter as extra input
//! channels; decoder levels expose hooks where control features are added.

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{gather, Autoencoder};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{
    downsample_mask, forward_diffuse, timestep_values, NoisePredictor, NoiseSchedule, Timestep,
};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{group_norm, scalar, upsample2x, Conv2d, ResBlock, TimeMlp};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamBuilder, ParamSet};
use crate::random;

pub const CHECKPOINT_KIND: &str = "backbone";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Channel widths at full, half and quarter latent resolution.
    pub widths: Vec<usize>,
    /// Size of the sinusoidal timestep embedding.
    pub time_dim: usize,
    /// Width of the timestep MLP output.
    pub temb_dim: usize,
    pub groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 16,
            widths: vec![32, 64, 64],
            time_dim: 32,
            temb_dim: 128,
            groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 3 {
            return Err(Error::Config("backbone needs exactly 3 widths".into()));
        }
        if self.latent_size == 0 || self.latent_size % 8 != 0 {
            return Err(Error::Config(format!(
                "latent size {} must be a positive multiple of 8",
                self.latent_size
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        for w in &self.widths {
            if self.groups == 0 || w % self.groups != 0 {
                return Err(Error::Config(format!(
                    "width {w} is not divisible by {} groups",
                    self.groups
                )));
            }
        }
        if self.latent_channels == 0 || self.temb_dim == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        Ok(())
    }

    /// `[C, H, W]` of each decoder injection point, coarsest first.
    pub fn injection_shapes(&self) -> Vec<[usize; 3]> {
        let h = self.latent_size;
        vec![
            [self.widths[2], h / 4, h / 4],
            [self.widths[1], h / 2, h / 2],
            [self.widths[0], h, h],
        ]
    }
}

/// Called with `(level, h)` at each decoder injection point; returns the
/// feature map the decoder continues with.
pub type InjectionHook<'a> = &'a dyn Fn(usize, &Tensor) -> Result<Tensor>;

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub encoder: Vec<Tensor>,
    /// Decoder features before and after the hook, coarsest first.
    pub decoder_pre: Vec<Tensor>,
    pub decoder_post: Vec<Tensor>,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
struct Net {
    time: TimeMlp,
    conv_in: Conv2d,
    enc0: ResBlock,
    down1: Conv2d,
    enc1: ResBlock,
    down2: Conv2d,
    enc2: ResBlock,
    mid: ResBlock,
    dec2: ResBlock,
    up1: Conv2d,
    dec1: ResBlock,
    up0: Conv2d,
    dec0: ResBlock,
    norm_out: candle_nn::GroupNorm,
    conv_out: Conv2d,
}

impl Net {
    fn build(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let [c0, c1, c2] = [cfg.widths[0], cfg.widths[1], cfg.widths[2]];
        let (t, g) = (cfg.temb_dim, cfg.groups);
        let cin = 2 * cfg.latent_channels + 1;
        Ok(Self {
            time: TimeMlp::new(&pb.pp("time"), cfg.time_dim, t)?,
            conv_in: Conv2d::new(&pb.pp("conv_in"), cin, c0, 3, 1)?,
            enc0: ResBlock::new(&pb.pp("enc0"), c0, c0, t, g)?,
            down1: Conv2d::new(&pb.pp("down1"), c0, c0, 3, 2)?,
            enc1: ResBlock::new(&pb.pp("enc1"), c0, c1, t, g)?,
            down2: Conv2d::new(&pb.pp("down2"), c1, c1, 3, 2)?,
            enc2: ResBlock::new(&pb.pp("enc2"), c1, c2, t, g)?,
            mid: ResBlock::new(&pb.pp("mid"), c2, c2, t, g)?,
            dec2: ResBlock::new(&pb.pp("dec2"), 2 * c2, c2, t, g)?,
            up1: Conv2d::new(&pb.pp("up1"), c2, c2, 3, 1)?,
            dec1: ResBlock::new(&pb.pp("dec1"), c2 + c1, c1, t, g)?,
            up0: Conv2d::new(&pb.pp("up0"), c1, c1, 3, 1)?,
            dec0: ResBlock::new(&pb.pp("dec0"), c1 + c0, c0, t, g)?,
            norm_out: group_norm(&pb.pp("norm_out"), c0, g)?,
            conv_out: Conv2d::new(&pb.pp("conv_out"), c0, cfg.latent_channels, 3, 1)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        ts: &[usize],
        hook: Option<InjectionHook>,
        trace: bool,
    ) -> Result<Trace> {
        let temb = self.time.forward(ts, x.device())?;
        let s0 = self.enc0.forward(&self.conv_in.forward(x)?, &temb)?;
        let s1 = self.enc1.forward(&self.down1.forward(&s0)?, &temb)?;
        let s2 = self.enc2.forward(&self.down2.forward(&s1)?, &temb)?;
        let m = self.mid.forward(&s2, &temb)?;
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut apply = |level: usize, h: Tensor| -> Result<Tensor> {
            let out = match hook {
                Some(f) => f(level, &h)?,
                None => h.clone(),
            };
            if trace {
                pre.push(h);
                post.push(out.clone());
            }
            Ok(out)
        };
        let h = self.dec2.forward(&Tensor::cat(&[&m, &s2], 1)?, &temb)?;
        let h = apply(0, h)?;
        let h = self.up1.forward(&upsample2x(&h)?)?;
        let h = self.dec1.forward(&Tensor::cat(&[&h, &s1], 1)?, &temb)?;
        let h = apply(1, h)?;
        let h = self.up0.forward(&upsample2x(&h)?)?;
        let h = self.dec0.forward(&Tensor::cat(&[&h, &s0], 1)?, &temb)?;
        let h = apply(2, h)?;
        let output = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok(Trace {
            encoder: if trace {
                vec![s0, s1, s2, m]
            } else {
                Vec::new()
            },
            decoder_pre: pre,
            decoder_post: post,
            output,
        })
    }
}

/// The noise-prediction network.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamSet,
    net: Net,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    loss_history: Vec<f64>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::fresh(seed, true);
        let net = Net::build(&pb, &config)?;
        Ok(Self {
            config,
            params: pb.params(),
            net,
            frozen: false,
        })
    }

    fn rebuild(config: BackboneConfig, params: ParamSet, frozen: bool) -> Result<Self> {
        let net = Net::build(&ParamBuilder::existing(&params, !frozen), &config)?;
        Ok(Self {
            config,
            params,
            net,
            frozen,
        })
    }

    pub fn frozen(&self) -> Result<Self> {
        Self::rebuild(self.config.clone(), self.params.clone(), true)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn content_hash(&self) -> Result<String> {
        self.params.content_hash()
    }

    fn input(&self, zt: &Tensor, mask: &Tensor, z_cond: &Tensor) -> Result<Tensor> {
        let c = self.config.latent_channels;
        let s = self.config.latent_size;
        let (b, zc, zh, zw) = zt.dims4()?;
        if (zc, zh, zw) != (c, s, s) {
            return Err(Error::Argument(format!(
                "backbone expects [B, {c}, {s}, {s}] latents, got {:?}",
                zt.dims()
            )));
        }
        if z_cond.dims() != zt.dims() {
            return Err(Error::Argument(format!(
                "conditioning latent {:?} does not match {:?}",
                z_cond.dims(),
                zt.dims()
            )));
        }
        if mask.dims() != [b, 1, s, s] {
            return Err(Error::Argument(format!(
                "latent mask {:?} does not match [{b}, 1, {s}, {s}]",
                mask.dims()
            )));
        }
        Ok(Tensor::cat(&[zt, &mask.to_dtype(zt.dtype())?, z_cond], 1)?)
    }

    fn check_ts(&self, zt: &Tensor, ts: &[Timestep]) -> Result<Vec<usize>> {
        let b = zt.dims()[0];
        if ts.len() != 1 && ts.len() != b {
            return Err(Error::Argument(format!(
                "{} timesteps for a batch of {b}",
                ts.len()
            )));
        }
        Ok(timestep_values(ts))
    }

    /// Noise prediction; `hook` is applied at every decoder injection point.
    pub fn forward(
        &self,
        zt: &Tensor,
        ts: &[Timestep],
        mask: &Tensor,
        z_cond: &Tensor,
        hook: Option<InjectionHook>,
    ) -> Result<Tensor> {
        let x = self.input(zt, mask, z_cond)?;
        let ts = self.check_ts(zt, ts)?;
        let out = self.net.forward(&x, &ts, hook, false)?.output;
        ensure_finite(&out, "backbone output")?;
        Ok(out)
    }

    /// Like [`Backbone::forward`] but keeps every intermediate feature map.
    pub fn trace(
        &self,
        zt: &Tensor,
        ts: &[Timestep],
        mask: &Tensor,
        z_cond: &Tensor,
        hook: Option<InjectionHook>,
    ) -> Result<Trace> {
        let x = self.input(zt, mask, z_cond)?;
        let ts = self.check_ts(zt, ts)?;
        self.net.forward(&x, &ts, hook, true)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, loss_history: &[f64]) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            loss_history: loss_history.to_vec(),
        };
        Checkpoint::new(CHECKPOINT_KIND, &header, &self.params)?.save(path)
    }

    /// Loads a frozen backbone and its pretraining loss history.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, Vec<f64>)> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let header: Header = ck.meta()?;
        let params = ck.params()?;
        Self::new(header.config.clone(), 0)?
            .params
            .check_layout(&params)?;
        Ok((
            Self::rebuild(header.config, params, true)?,
            header.loss_history,
        ))
    }
}

/// The backbone alone ignores the identity embedding.
impl NoisePredictor for Backbone {
    fn predict_noise(
        &self,
        zt: &Tensor,
        ts: &[Timestep],
        mask: &Tensor,
        z_cond: &Tensor,
        _e_cond: &Tensor,
    ) -> Result<Tensor> {
        self.forward(zt, ts, mask, z_cond, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Latents shared by backbone pretraining and branch training: clean latent,
/// masked-image latent and latent-resolution mask.
pub fn inpainting_latents(
    ae: &Autoencoder,
    images: &Tensor,
    masks: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let z0 = ae.encode(images)?;
    let keep = (1.0 - masks)?;
    let z_cond = ae.encode(&images.broadcast_mul(&keep)?)?;
    let m = downsample_mask(masks, ae.config().latent_factor)?;
    Ok((z0, z_cond, m))
}

/// Trains an unconditioned inpainting denoiser on pixel masks paired with
/// images (`masks[i]` belongs to `images[i]`) and returns it frozen.
pub fn pretrain_backbone(
    ae: &Autoencoder,
    images: &Tensor,
    masks: &Tensor,
    sched: &NoiseSchedule,
    config: BackboneConfig,
    train: &BackboneTrainConfig,
) -> Result<(Backbone, Vec<f64>)> {
    let n = images.dims()[0];
    if n == 0 {
        return Err(Error::Data("backbone corpus is empty".into()));
    }
    if masks.dims()[0] != n {
        return Err(Error::Argument(format!(
            "{} masks for {n} images",
            masks.dims()[0]
        )));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let (c, s, _) = ae.latent_shape();
    if (c, s) != (config.latent_channels, config.latent_size) {
        return Err(Error::Config(format!(
            "backbone latent geometry {}x{} does not match the autoencoder's {c}x{s}",
            config.latent_channels, config.latent_size
        )));
    }
    let bb = Backbone::new(config, train.seed)?;
    let mut opt = Adam::new(
        &bb.params,
        AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::with_lr(train.learning_rate)
        },
    )?;
    let mut latents = Vec::new();
    for start in (0..n).step_by(64) {
        let len = (n - start).min(64);
        latents.push(inpainting_latents(
            ae,
            &images.narrow(0, start, len)?,
            &masks.narrow(0, start, len)?,
        )?);
    }
    let z0_all = Tensor::cat(&latents.iter().map(|l| &l.0).collect::<Vec<_>>(), 0)?;
    let zc_all = Tensor::cat(&latents.iter().map(|l| &l.1).collect::<Vec<_>>(), 0)?;
    let m_all = Tensor::cat(&latents.iter().map(|l| &l.2).collect::<Vec<_>>(), 0)?;
    let mut rng = random::derived(train.seed, "backbone-train");
    let mut history = Vec::with_capacity(train.steps);
    for _ in 0..train.steps {
        let idx: Vec<usize> = (0..train.batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..n))
            .collect();
        let ts: Vec<Timestep> = (0..train.batch_size)
            .map(|_| sched.timestep(rand::Rng::random_range(&mut rng, 1..=sched.steps())))
            .collect::<Result<_>>()?;
        let z0 = gather(&z0_all, &idx)?;
        let eps = random::normal(&mut rng, z0.shape().clone(), DType::F32)?;
        let zt = forward_diffuse(&z0, &ts, &eps, sched)?;
        let pred = bb.forward(
            &zt,
            &ts,
            &gather(&m_all, &idx)?,
            &gather(&zc_all, &idx)?,
            None,
        )?;
        let loss = (pred - &eps)?.sqr()?.mean_all()?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("backbone loss became {v}")));
        }
        history.push(v);
        opt.step(&loss.backward()?)?;
    }
    Ok((bb.frozen()?, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            latent_channels: 2,
            latent_size: 8,
            widths: vec![8, 8, 16],
            time_dim: 8,
            temb_dim: 16,
            groups: 4,
        }
    }

    fn inputs(b: usize) -> (Tensor, Tensor, Tensor) {
        let d = Device::Cpu;
        (
            Tensor::randn(0f32, 1f32, (b, 2, 8, 8), &d).unwrap(),
            Tensor::ones((b, 1, 8, 8), DType::F32, &d).unwrap(),
            Tensor::randn(0f32, 1f32, (b, 2, 8, 8), &d).unwrap(),
        )
    }

    #[test]
    fn output_matches_latent_shape() {
        let bb = Backbone::new(tiny(), 0).unwrap();
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let (zt, m, zc) = inputs(3);
        let ts = [sched.timestep(4).unwrap()];
        let out = bb.forward(&zt, &ts, &m, &zc, None).unwrap();
        assert_eq!(out.dims(), zt.dims());
        let tr = bb.trace(&zt, &ts, &m, &zc, None).unwrap();
        let shapes: Vec<[usize; 3]> = tr
            .decoder_pre
            .iter()
            .map(|t| {
                let d = t.dims();
                [d[1], d[2], d[3]]
            })
            .collect();
        assert_eq!(shapes, tiny().injection_shapes());
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = tiny();
        cfg.latent_size = 12;
        assert!(matches!(Backbone::new(cfg, 0), Err(Error::Config(_))));
        let bb = Backbone::new(tiny(), 0).unwrap();
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let (zt, m, _) = inputs(2);
        let zc = Tensor::zeros((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let ts = [sched.timestep(1).unwrap()];
        assert!(matches!(
            bb.forward(&zt, &ts, &m, &zc, None),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let bb = Backbone::new(tiny(), 9).unwrap();
        let p = dir.path().join("bb.ckpt");
        bb.save(&p, &[1.0, 0.5]).unwrap();
        let (back, hist) = Backbone::load(&p).unwrap();
        assert!(back.is_frozen());
        assert_eq!(hist, vec![1.0, 0.5]);
        assert_eq!(back.content_hash().unwrap(), bb.content_hash().unwrap());
    }
}
