//! Identity control branch: the embedding is projected to a coarse seed map,
//! upsampled to every decoder resolution of the backbone and added there
//! through zero-initialized 1x1 convolutions.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{timestep_values, NoisePredictor, Timestep};
use crate::error::{ensure_finite, Error, Result};
use crate::identity::IdentityEmbedding;
use crate::nn::{upsample2x, Conv2d, Linear, TimeMlp};
use crate::params::{ParamBuilder, ParamSet};

pub const CHECKPOINT_KIND: &str = "control-branch";

/// Latent size divided by seed size.
pub const SEED_RATIO: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub embedding_dim: usize,
    pub seed_channels: usize,
    /// Recorded for clarity; only purely convolutional blocks are implemented.
    pub block: String,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            seed_channels: 32,
            block: "conv".into(),
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.seed_channels == 0 {
            return Err(Error::Config("branch dimensions must be positive".into()));
        }
        if self.block != "conv" {
            return Err(Error::Config(format!(
                "unsupported branch block type {:?}; only \"conv\" exists",
                self.block
            )));
        }
        Ok(())
    }
}

/// Per-level control features, coarsest first, each `[B, C_l, H_l, W_l]`.
#[derive(Debug, Clone)]
pub struct ControlMaps {
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct Net {
    proj: Linear,
    time: TimeMlp,
    convs: Vec<Conv2d>,
    temb: Vec<Linear>,
    zero: Vec<Conv2d>,
}

impl Net {
    fn build(pb: &ParamBuilder, cfg: &BranchConfig, bb: &BackboneConfig) -> Result<Self> {
        let seed = bb.latent_size / SEED_RATIO;
        let proj = Linear::no_bias(
            &pb.pp("proj"),
            cfg.embedding_dim,
            cfg.seed_channels * seed * seed,
        )?;
        let time = TimeMlp::new(&pb.pp("time"), bb.time_dim, bb.temb_dim)?;
        let mut convs = Vec::new();
        let mut temb = Vec::new();
        let mut zero = Vec::new();
        let mut c_in = cfg.seed_channels;
        for (l, [c, _, _]) in bb.injection_shapes().into_iter().enumerate() {
            convs.push(Conv2d::new(
                &pb.pp(format!("block{l}.conv")),
                c_in,
                c,
                3,
                1,
            )?);
            temb.push(Linear::new(
                &pb.pp(format!("block{l}.temb")),
                bb.temb_dim,
                c,
            )?);
            zero.push(Conv2d::zeros(&pb.pp(format!("zero{l}")), c, c)?);
            c_in = c;
        }
        Ok(Self {
            proj,
            time,
            convs,
            temb,
            zero,
        })
    }
}

/// Trainable identity control branch bound to one backbone geometry.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    config: BranchConfig,
    backbone: BackboneConfig,
    params: ParamSet,
    net: Net,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: BranchConfig,
    backbone: BackboneConfig,
    seed_shape: [usize; 3],
    levels: Vec<[usize; 3]>,
}

fn check_backbone(bb: &BackboneConfig) -> Result<()> {
    bb.validate()?;
    if bb.latent_size % SEED_RATIO != 0 {
        return Err(Error::Config(format!(
            "latent size {} is not divisible by the seed ratio {SEED_RATIO}",
            bb.latent_size
        )));
    }
    Ok(())
}

impl ControlBranch {
    /// Fresh branch; every zero projection starts at exactly zero.
    pub fn new(config: BranchConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        check_backbone(backbone)?;
        let pb = ParamBuilder::fresh(seed, true);
        let net = Net::build(&pb, &config, backbone)?;
        Ok(Self {
            config,
            backbone: backbone.clone(),
            params: pb.params(),
            net,
        })
    }

    /// Rebuilds a branch around existing (trainable) parameters.
    pub fn with_params(
        config: BranchConfig,
        backbone: &BackboneConfig,
        params: ParamSet,
    ) -> Result<Self> {
        config.validate()?;
        check_backbone(backbone)?;
        Self::new(config.clone(), backbone, 0)?
            .params
            .check_layout(&params)?;
        let net = Net::build(&ParamBuilder::existing(&params, true), &config, backbone)?;
        Ok(Self {
            config,
            backbone: backbone.clone(),
            params,
            net,
        })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn content_hash(&self) -> Result<String> {
        self.params.content_hash()
    }

    /// `[C_seed, h_seed, w_seed]`.
    pub fn seed_shape(&self) -> [usize; 3] {
        let s = self.backbone.latent_size / SEED_RATIO;
        [self.config.seed_channels, s, s]
    }

    pub fn level_shapes(&self) -> Vec<[usize; 3]> {
        self.backbone.injection_shapes()
    }

    /// The per-level zero projections `g_l`.
    pub fn zero_projections(&self) -> &[Conv2d] {
        &self.net.zero
    }

    /// Names of the zero-projection parameters.
    pub fn zero_projection_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(k, _)| k.clone())
            .filter(|k| k.starts_with("zero"))
            .collect()
    }

    /// Linear, bias-free projection of `[B, D]` embeddings to `[B, C_seed, h, w]`.
    pub fn project_embedding(&self, e: &Tensor) -> Result<Tensor> {
        let d = self.config.embedding_dim;
        match e.dims() {
            [_, ed] if *ed == d => {}
            dims => {
                return Err(Error::Argument(format!(
                    "branch expects [B, {d}] embeddings, got {dims:?}"
                )))
            }
        }
        let [c, h, w] = self.seed_shape();
        let b = e.dims()[0];
        Ok(self.net.proj.forward(e)?.reshape((b, c, h, w))?)
    }

    /// Seed map of a single embedding, `[C_seed, h, w]`.
    pub fn project(&self, e: &IdentityEmbedding) -> Result<Tensor> {
        let t = IdentityEmbedding::stack(std::slice::from_ref(e))?;
        Ok(self.project_embedding(&t)?.squeeze(0)?)
    }

    /// Timestep-conditioned feature maps for every injection point.
    pub fn control_maps(&self, e: &Tensor, ts: &[Timestep]) -> Result<ControlMaps> {
        let b = e.dims().first().copied().unwrap_or(0);
        if ts.len() != 1 && ts.len() != b {
            return Err(Error::Argument(format!(
                "{} timesteps for {b} embeddings",
                ts.len()
            )));
        }
        let mut h = self.project_embedding(e)?;
        let temb = self
            .net
            .time
            .forward(&timestep_values(ts), e.device())?
            .silu()?;
        let mut levels = Vec::with_capacity(self.net.convs.len());
        for (conv, proj) in self.net.convs.iter().zip(&self.net.temb) {
            let t = proj.forward(&temb)?.unsqueeze(2)?.unsqueeze(3)?;
            h = conv.forward(&upsample2x(&h)?)?.broadcast_add(&t)?.silu()?;
            levels.push(h.clone());
        }
        Ok(ControlMaps { levels })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            seed_shape: self.seed_shape(),
            levels: self.level_shapes(),
        };
        Checkpoint::new(CHECKPOINT_KIND, &header, &self.params)?.save(path)
    }

    /// Loads a branch and checks its recorded injection geometry against
    /// `backbone`.
    pub fn load(path: impl AsRef<std::path::Path>, backbone: &BackboneConfig) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let header: Header = ck.meta()?;
        if header.levels != backbone.injection_shapes() || &header.backbone != backbone {
            return Err(Error::Checkpoint(format!(
                "branch was built for injection shapes {:?}, backbone has {:?}",
                header.levels,
                backbone.injection_shapes()
            )));
        }
        let branch = Self::with_params(header.config, backbone, ck.params()?)?;
        if branch.seed_shape() != header.seed_shape {
            return Err(Error::Checkpoint(
                "branch seed shape is inconsistent".into(),
            ));
        }
        Ok(branch)
    }
}

/// `h + g(c)`: the residual addition at one injection point.
pub fn inject(h: &Tensor, c: &Tensor, g: &Conv2d) -> Result<Tensor> {
    let (hd, cd) = (h.dims(), c.dims());
    let w = g.weight().dims();
    if hd.len() != 4
        || cd.len() != 4
        || hd[0] != cd[0]
        || hd[2..] != cd[2..]
        || w[1] != cd[1]
        || w[0] != hd[1]
    {
        return Err(Error::Argument(format!(
            "cannot inject control {cd:?} through projection {w:?} into {hd:?}"
        )));
    }
    Ok((h + g.forward(c)?)?)
}

/// Noise prediction of the backbone with control features injected at every
/// decoder level.
pub fn denoise_conditioned(
    zt: &Tensor,
    ts: &[Timestep],
    mask: &Tensor,
    z_cond: &Tensor,
    e_cond: &Tensor,
    backbone: &Backbone,
    branch: &ControlBranch,
) -> Result<Tensor> {
    if backbone.config() != branch.backbone_config() {
        return Err(Error::Argument(
            "control branch was built for a different backbone geometry".into(),
        ));
    }
    let b = zt.dims().first().copied().unwrap_or(0);
    if e_cond.dims().first() != Some(&b) {
        return Err(Error::Argument(format!(
            "{:?} embeddings for a batch of {b}",
            e_cond.dims()
        )));
    }
    let maps = branch.control_maps(e_cond, ts)?;
    for level in &maps.levels {
        ensure_finite(level, "control map")?;
    }
    let hook = |l: usize, h: &Tensor| inject(h, &maps.levels[l], &branch.net.zero[l]);
    backbone.forward(zt, ts, mask, z_cond, Some(&hook))
}

/// Backbone plus branch as a single noise predictor.
#[derive(Debug, Clone, Copy)]
pub struct ConditionedDenoiser<'a> {
    pub backbone: &'a Backbone,
    pub branch: &'a ControlBranch,
}

impl NoisePredictor for ConditionedDenoiser<'_> {
    fn predict_noise(
        &self,
        zt: &Tensor,
        ts: &[Timestep],
        mask: &Tensor,
        z_cond: &Tensor,
        e_cond: &Tensor,
    ) -> Result<Tensor> {
        denoise_conditioned(zt, ts, mask, z_cond, e_cond, self.backbone, self.branch)
    }
}
