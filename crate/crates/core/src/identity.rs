//! Frozen face-recognition encoder producing unit-norm identity embeddings,
//! and its additive-angular-margin pretraining.

use candle_core::{DType, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::autoencoder::gather;
use crate::checkpoint::Checkpoint;
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{l2_normalize, scalar, Conv2d, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Init, ParamBuilder, ParamSet};
use crate::random;

pub const CHECKPOINT_KIND: &str = "recognition-encoder";

/// Allowed deviation from unit norm when an embedding enters a distance.
pub const UNIT_TOLERANCE: f64 = 1e-4;

/// A unit-norm identity embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding(Vec<f64>);

impl IdentityEmbedding {
    /// Wraps an already unit-norm vector.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || (n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
            return Err(Error::Argument(format!(
                "identity embedding must be unit norm, got norm {n}"
            )));
        }
        Ok(Self(v))
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn normalized(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numerical(format!(
                "cannot normalize vector of norm {n}"
            )));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rows of a `[B, D]` tensor.
    pub fn from_rows(t: &Tensor) -> Result<Vec<Self>> {
        let rows = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        rows.into_iter().map(Self::new).collect()
    }

    /// Stacks embeddings into an f32 `[B, D]` tensor.
    pub fn stack(items: &[Self]) -> Result<Tensor> {
        let d = items.first().map(|e| e.dim()).unwrap_or(0);
        if items.iter().any(|e| e.dim() != d) {
            return Err(Error::Argument("embeddings of different dimension".into()));
        }
        let flat: Vec<f32> = items
            .iter()
            .flat_map(|e| e.0.iter().map(|x| *x as f32))
            .collect();
        Ok(Tensor::from_vec(
            flat,
            (items.len(), d),
            &candle_core::Device::Cpu,
        )?)
    }
}

/// `d(u, v) = 1 - u.v`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &IdentityEmbedding, v: &IdentityEmbedding) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::Argument(format!(
            "embedding dimensions differ: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    for e in [u, v] {
        if (e.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Argument(format!(
                "cosine distance needs unit vectors, got norm {}",
                e.norm()
            )));
        }
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

/// `1 - d(u, v)`; identical embeddings give exactly 1.
pub fn similarity(u: &IdentityEmbedding, v: &IdentityEmbedding) -> Result<f64> {
    if u == v {
        return Ok(1.0);
    }
    Ok(1.0 - cosine_distance(u, v)?)
}

/// Cosine similarity of two arbitrary non-zero vectors, in `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Anything that maps images to unit-norm identity embeddings.
///
/// Real pretrained recognition networks can implement this trait and be used
/// in place of the toy encoder.
pub trait IdentityEncoder {
    /// `[B, 3, H, W]` images in `[-1, 1]` to `[B, D]` unit rows;
    /// differentiable with respect to the input.
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
    fn embedding_dim(&self) -> usize;
    fn input_size(&self) -> usize;
}

/// Frozen feature source for distribution metrics.
pub trait FeatureExtractor {
    /// `[B, F]` global features.
    fn features(&self, images: &Tensor) -> Result<Tensor>;
    /// Intermediate spatial feature maps `[B, C, h, w]`.
    fn feature_maps(&self, images: &Tensor) -> Result<Tensor>;
    fn input_size(&self) -> usize;
    /// Stable identifier (content hash) of the extractor weights.
    fn extractor_id(&self) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    /// Widths of the input conv and the three stride-2 stages.
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            widths: vec![16, 32, 64, 64],
            feature_dim: 128,
            embedding_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 {
            return Err(Error::Config("encoder needs exactly 4 widths".into()));
        }
        if self.image_size % 8 != 0 || self.image_size == 0 {
            return Err(Error::Config(format!(
                "encoder input size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.embedding_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Additive angular margin, radians.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            learning_rate: 2e-3,
            margin: 0.3,
            scale: 16.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Trunk {
    convs: Vec<Conv2d>,
    fc_feat: Linear,
    fc_embed: Linear,
}

impl Trunk {
    fn build(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let w = &cfg.widths;
        let convs = vec![
            Conv2d::new(&pb.pp("conv0"), 3, w[0], 3, 1)?,
            Conv2d::new(&pb.pp("conv1"), w[0], w[1], 3, 2)?,
            Conv2d::new(&pb.pp("conv2"), w[1], w[2], 3, 2)?,
            Conv2d::new(&pb.pp("conv3"), w[2], w[3], 3, 2)?,
        ];
        let s = cfg.image_size / 8;
        Ok(Self {
            convs,
            fc_feat: Linear::new(&pb.pp("fc_feat"), w[3] * s * s, cfg.feature_dim)?,
            fc_embed: Linear::new(&pb.pp("fc_embed"), cfg.feature_dim, cfg.embedding_dim)?,
        })
    }

    /// (quarter-resolution maps, global features)
    fn run(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.convs[0].forward(x)?.silu()?;
        h = self.convs[1].forward(&h)?.silu()?;
        let maps = self.convs[2].forward(&h)?.silu()?;
        let h = self.convs[3].forward(&maps)?.silu()?;
        let feats = self.fc_feat.forward(&h.flatten_from(1)?)?;
        Ok((maps, feats))
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let (_, feats) = self.run(x)?;
        l2_normalize(&self.fc_embed.forward(&feats.silu()?)?)
    }
}

/// CNN trunk of a margin-trained classifier with the classification head
/// removed.
#[derive(Debug, Clone)]
pub struct RecognitionEncoder {
    config: EncoderConfig,
    params: ParamSet,
    trunk: Trunk,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    embedding_dim: usize,
    input_size: usize,
}

impl RecognitionEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::fresh(seed, true);
        let trunk = Trunk::build(&pb.pp("trunk"), &config)?;
        Ok(Self {
            config,
            params: pb.params(),
            trunk,
            frozen: false,
        })
    }

    fn rebuild(config: EncoderConfig, params: ParamSet, frozen: bool) -> Result<Self> {
        let trunk = Trunk::build(
            &ParamBuilder::existing(&params, !frozen).pp("trunk"),
            &config,
        )?;
        Ok(Self {
            config,
            params,
            trunk,
            frozen,
        })
    }

    pub fn frozen(&self) -> Result<Self> {
        Self::rebuild(self.config.clone(), self.params.clone(), true)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn content_hash(&self) -> Result<String> {
        self.params.content_hash()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        match x.dims() {
            [_, 3, h, w] if *h == s && *w == s => {}
            d => {
                return Err(Error::Argument(format!(
                    "encoder expects [B, 3, {s}, {s}] images, got {d:?}"
                )))
            }
        }
        ensure_finite(x, "encoder input")
    }

    /// Embeds `images` and returns one [`IdentityEmbedding`] per row.
    pub fn embed_all(&self, images: &Tensor) -> Result<Vec<IdentityEmbedding>> {
        let n = images.dims()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(64) {
            let len = (n - start).min(64);
            let e = self.embed(&images.narrow(0, start, len)?)?;
            out.extend(IdentityEmbedding::from_rows(&e)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            embedding_dim: self.config.embedding_dim,
            input_size: self.config.image_size,
        };
        Checkpoint::new(CHECKPOINT_KIND, &header, &self.params)?.save(path)
    }

    /// Loads a checkpoint; the result is always frozen.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let header: Header = ck.meta()?;
        header.config.validate()?;
        if header.embedding_dim != header.config.embedding_dim
            || header.input_size != header.config.image_size
        {
            return Err(Error::Checkpoint(
                "encoder header geometry is inconsistent".into(),
            ));
        }
        let params = ck.params()?;
        Self::new(header.config.clone(), 0)?
            .params
            .check_layout(&params)?;
        Self::rebuild(header.config, params, true)
    }
}

impl IdentityEncoder for RecognitionEncoder {
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.check(images)?;
        self.trunk.embed(images)
    }

    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn input_size(&self) -> usize {
        self.config.image_size
    }
}

impl FeatureExtractor for RecognitionEncoder {
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.check(images)?;
        Ok(self.trunk.run(images)?.1)
    }

    fn feature_maps(&self, images: &Tensor) -> Result<Tensor> {
        self.check(images)?;
        Ok(self.trunk.run(images)?.0)
    }

    fn input_size(&self) -> usize {
        self.config.image_size
    }

    fn extractor_id(&self) -> Result<String> {
        self.content_hash()
    }
}

/// Outcome of encoder pretraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderPretrainReport {
    pub loss_history: Vec<f64>,
    /// Closed-set accuracy of the (margin-free) cosine classifier.
    pub train_accuracy: f64,
    pub identities: usize,
}

/// ArcFace logits: `s * cos(theta + m)` on the target class, `s * cos(theta)`
/// elsewhere.
fn arc_margin_logits(
    emb: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    margin: f64,
    scale: f64,
) -> Result<Tensor> {
    let w = l2_normalize(class_weights)?;
    let cos = emb.matmul(&w.t()?)?.clamp(-1.0 + 1e-6, 1.0 - 1e-6)?;
    let (b, k) = cos.dims2()?;
    let mut onehot = vec![0f32; b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, k), cos.device())?;
    let sin = (1.0 - cos.sqr()?)?.sqrt()?;
    let phi = ((&cos * margin.cos())? - (sin * margin.sin())?)?;
    // Past theta = pi - m the margin would make cos(theta + m) increase again.
    let th = (std::f64::consts::PI - margin).cos();
    let mm = (std::f64::consts::PI - margin).sin() * margin;
    let fallback = (&cos - mm)?;
    let phi = cos.gt(th)?.where_cond(&phi, &fallback)?;
    let logits = (&cos + onehot.mul(&(phi - &cos)?)?)?;
    Ok((logits * scale)?)
}

/// Trains the encoder with an additive-angular-margin head on `labels`
/// (dense class ids), discards the head and returns the frozen trunk.
pub fn pretrain_encoder(
    images: &Tensor,
    labels: &[usize],
    config: EncoderConfig,
    train: &EncoderTrainConfig,
) -> Result<(RecognitionEncoder, EncoderPretrainReport)> {
    let n = images.dims()[0];
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "{} labels for {n} images",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|c| **c > 0).count();
    if present < 2 {
        return Err(Error::Data(format!(
            "encoder pretraining needs at least 2 identities, found {present}"
        )));
    }
    if let Some((id, c)) = counts.iter().enumerate().find(|(_, c)| **c == 1) {
        return Err(Error::Data(format!(
            "identity {id} has {c} image; at least 2 per identity are required"
        )));
    }
    let enc = RecognitionEncoder::new(config, train.seed)?;
    enc.check(images)?;
    let head_pb = ParamBuilder::fresh(train.seed ^ 0x5eed, true);
    let head = head_pb.get(
        &[classes, enc.config.embedding_dim],
        "class_weights",
        Init::FanInUniform {
            fan_in: enc.config.embedding_dim,
            gain: 1.732,
        },
    )?;
    let all = enc.params.merged("head", &head_pb.params());
    let mut opt = Adam::new(
        &all,
        AdamConfig {
            clip_norm: Some(5.0),
            ..AdamConfig::with_lr(train.learning_rate)
        },
    )?;
    let mut rng = random::derived(train.seed, "encoder-train");
    let mut history = Vec::with_capacity(train.steps);
    for _ in 0..train.steps {
        let idx: Vec<usize> = (0..train.batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..n))
            .collect();
        let x = gather(images, &idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let emb = enc.trunk.embed(&x)?;
        let logits = arc_margin_logits(&emb, &head, &y, train.margin, train.scale)?;
        let target = Tensor::from_vec(
            y.iter().map(|&l| l as u32).collect::<Vec<_>>(),
            y.len(),
            logits.device(),
        )?;
        let loss = candle_nn::loss::cross_entropy(&logits, &target)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("encoder loss became {v}")));
        }
        history.push(v);
        opt.step(&loss.backward()?)?;
    }
    let enc = enc.frozen()?;
    // Closed-set accuracy with the margin-free cosine classifier.
    let w = l2_normalize(&head.detach())?;
    let mut correct = 0usize;
    for start in (0..n).step_by(64) {
        let len = (n - start).min(64);
        let e = enc.embed(&images.narrow(0, start, len)?)?;
        let pred = e.matmul(&w.t()?)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += pred
            .iter()
            .enumerate()
            .filter(|(i, p)| **p as usize == labels[start + i])
            .count();
    }
    Ok((
        enc,
        EncoderPretrainReport {
            loss_history: history,
            train_accuracy: correct as f64 / n as f64,
            identities: present,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            widths: vec![4, 8, 8, 8],
            feature_dim: 16,
            embedding_dim: 8,
        }
    }

    #[test]
    fn cosine_distance_cases() {
        let u = IdentityEmbedding::new(vec![1.0, 0.0]).unwrap();
        let v = IdentityEmbedding::new(vec![0.0, 1.0]).unwrap();
        let neg = IdentityEmbedding::new(vec![-1.0, 0.0]).unwrap();
        assert_eq!(cosine_distance(&u, &u).unwrap(), 0.0);
        assert_eq!(cosine_distance(&u, &neg).unwrap(), 2.0);
        assert_eq!(cosine_distance(&u, &v).unwrap(), 1.0);
        assert!(IdentityEmbedding::new(vec![2.0, 0.0]).is_err());
        let w = IdentityEmbedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(cosine_distance(&u, &w), Err(Error::Argument(_))));
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let enc = RecognitionEncoder::new(tiny(), 1)
            .unwrap()
            .frozen()
            .unwrap();
        let x = Tensor::rand(-1f32, 1f32, (5, 3, 8, 8), &Device::Cpu).unwrap();
        let a = enc.embed_all(&x).unwrap();
        let b = enc.embed_all(&x).unwrap();
        assert_eq!(a, b);
        for e in &a {
            assert!((e.norm() - 1.0).abs() < 1e-6, "{}", e.norm());
        }
    }

    #[test]
    fn non_finite_input_is_numerical_error() {
        let enc = RecognitionEncoder::new(tiny(), 1).unwrap();
        let mut v = vec![0f32; 3 * 64];
        v[7] = f32::NAN;
        let x = Tensor::from_vec(v, (1, 3, 8, 8), &Device::Cpu).unwrap();
        assert!(matches!(enc.embed(&x), Err(Error::Numerical(_))));
    }

    #[test]
    fn embedding_is_differentiable_in_input() {
        let enc = RecognitionEncoder::new(tiny(), 2)
            .unwrap()
            .frozen()
            .unwrap();
        let x = candle_core::Var::from_tensor(
            &Tensor::rand(-1f32, 1f32, (1, 3, 8, 8), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let target = Tensor::ones((1, 8), DType::F32, &Device::Cpu).unwrap();
        let loss = (enc.embed(x.as_tensor()).unwrap() * target)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(x.as_tensor()).expect("input gradient");
        assert!(scalar(&g.abs().unwrap().sum_all().unwrap()).unwrap() > 0.0);
        // Frozen weights receive nothing.
        for var in enc.params().vars() {
            assert!(grads.get(var.as_tensor()).is_none());
        }
    }

    #[test]
    fn pretraining_rejects_degenerate_corpora() {
        let x = Tensor::zeros((3, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let r = pretrain_encoder(&x, &[0, 0, 0], tiny(), &EncoderTrainConfig::default());
        assert!(matches!(r, Err(Error::Data(_))));
        let r = pretrain_encoder(&x, &[0, 0, 1], tiny(), &EncoderTrainConfig::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let enc = RecognitionEncoder::new(tiny(), 5).unwrap();
        let p = dir.path().join("enc.ckpt");
        enc.save(&p).unwrap();
        let back = RecognitionEncoder::load(&p).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.content_hash().unwrap(), enc.content_hash().unwrap());
    }
}
