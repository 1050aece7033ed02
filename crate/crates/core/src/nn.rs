//! Small layer set shared by the autoencoder, recognition encoder, backbone
//! and control branch.

use candle_core::{DType, Device, Module, Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamBuilder};

const WEIGHT_GAIN: f64 = 1.732_050_807_568_877_2; // sqrt(3): unit variance per fan-in
const BIAS_GAIN: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = pb.get(
            &[c_out, c_in, kernel, kernel],
            "weight",
            Init::FanInUniform {
                fan_in,
                gain: WEIGHT_GAIN,
            },
        )?;
        let bias = pb.get(
            &[c_out],
            "bias",
            Init::FanInUniform {
                fan_in,
                gain: BIAS_GAIN,
            },
        )?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// 1x1 convolution whose weight and bias start at exactly zero.
    pub fn zeros(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[c_out, c_in, 1, 1], "weight", Init::Zeros)?,
            bias: pb.get(&[c_out], "bias", Init::Zeros)?,
            stride: 1,
            padding: 0,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims()[0];
        y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = pb.get(
            &[d_out, d_in],
            "weight",
            Init::FanInUniform {
                fan_in: d_in,
                gain: WEIGHT_GAIN,
            },
        )?;
        let bias = pb.get(
            &[d_out],
            "bias",
            Init::FanInUniform {
                fan_in: d_in,
                gain: BIAS_GAIN,
            },
        )?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = pb.get(
            &[d_out, d_in],
            "weight",
            Init::FanInUniform {
                fan_in: d_in,
                gain: WEIGHT_GAIN,
            },
        )?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

pub fn group_norm(
    pb: &ParamBuilder,
    channels: usize,
    groups: usize,
) -> Result<candle_nn::GroupNorm> {
    let weight = pb.get(&[channels], "weight", Init::Ones)?;
    let bias = pb.get(&[channels], "bias", Init::Zeros)?;
    Ok(candle_nn::GroupNorm::new(
        weight,
        bias,
        channels,
        groups.min(channels),
        1e-5,
    )?)
}

/// Nearest-neighbour 2x upsampling built from broadcast + reshape.
///
/// Candle's `upsample_nearest2d` backward overwrites instead of accumulating
/// the input gradient, which breaks any input that has other consumers.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos() as f32);
        }
        for _ in 2 * half..dim {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?)
}

/// Two-layer MLP applied to the sinusoidal timestep embedding.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    fc1: Linear,
    fc2: Linear,
    sin_dim: usize,
}

impl TimeMlp {
    pub fn new(pb: &ParamBuilder, sin_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), sin_dim, out_dim)?,
            fc2: Linear::new(&pb.pp("fc2"), out_dim, out_dim)?,
            sin_dim,
        })
    }

    pub fn forward(&self, ts: &[usize], device: &Device) -> Result<Tensor> {
        let e = timestep_embedding(ts, self.sin_dim, device)?;
        Ok(self.fc2.forward(&self.fc1.forward(&e)?.silu()?)?)
    }
}

/// Residual block with timestep conditioning.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: candle_nn::GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: candle_nn::GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(&pb.pp("norm1"), c_in, groups)?,
            conv1: Conv2d::new(&pb.pp("conv1"), c_in, c_out, 3, 1)?,
            temb: Linear::new(&pb.pp("temb"), temb_dim, c_out)?,
            norm2: group_norm(&pb.pp("norm2"), c_out, groups)?,
            conv2: Conv2d::new(&pb.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&pb.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self
            .temb
            .forward(&temb.silu()?)?
            .unsqueeze(2)?
            .unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Row-wise l2 normalization of a `[B, D]` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm.clamp(1e-12, f64::INFINITY)?)?)
}

/// Scalar value of a single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
