//! Small randomly initialized components shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use idpaint_core::autoencoder::{Autoencoder, AutoencoderConfig};
use idpaint_core::backbone::{Backbone, BackboneConfig};
use idpaint_core::control::BranchConfig;
use idpaint_core::diffusion::NoiseSchedule;
use idpaint_core::identity::{EncoderConfig, RecognitionEncoder};
use idpaint_core::losses::LossWeights;
use idpaint_core::random;
use idpaint_core::toyface::{self, ToyFaceConfig};
use idpaint_core::trainer::{TrainConfig, TrainContext, TrainData};

pub const SIZE: usize = 32;

pub fn ae_config() -> AutoencoderConfig {
    AutoencoderConfig {
        image_size: SIZE,
        latent_factor: 4,
        latent_channels: 4,
        widths: vec![8, 8, 8],
    }
}

pub fn encoder_config() -> EncoderConfig {
    EncoderConfig {
        image_size: SIZE,
        widths: vec![8, 8, 8, 8],
        feature_dim: 16,
        embedding_dim: 8,
    }
}

pub fn backbone_config() -> BackboneConfig {
    BackboneConfig {
        latent_channels: 4,
        latent_size: SIZE / 4,
        widths: vec![8, 8, 8],
        time_dim: 8,
        temb_dim: 16,
        groups: 4,
    }
}

pub fn branch_config() -> BranchConfig {
    BranchConfig {
        embedding_dim: 8,
        seed_channels: 8,
        block: "conv".into(),
    }
}

pub struct Fixture {
    pub autoencoder: Autoencoder,
    pub encoder: RecognitionEncoder,
    pub backbone: Backbone,
    pub schedule: NoiseSchedule,
    pub data: TrainData,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Fixture {
    /// `identities` x `per_identity` toy faces with eye masks, frozen
    /// untrained networks and a short schedule.
    pub fn new(identities: usize, per_identity: usize) -> Self {
        let samples = toyface::generate(&ToyFaceConfig {
            identities,
            images_per_identity: per_identity,
            image_size: SIZE,
            identity_seed: 3,
            sample_seed: 4,
        })
        .unwrap();
        let (images, labels) = toyface::to_tensors(&samples, SIZE).unwrap();
        let masks = toyface::region_masks(&samples, SIZE, 0.25).unwrap();
        let autoencoder = Autoencoder::new(ae_config(), 1).unwrap().frozen().unwrap();
        let encoder = RecognitionEncoder::new(encoder_config(), 2)
            .unwrap()
            .frozen()
            .unwrap();
        let backbone = Backbone::new(backbone_config(), 3)
            .unwrap()
            .frozen()
            .unwrap();
        let schedule = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let data = TrainData::new(&images, labels.clone(), masks, &autoencoder, &encoder).unwrap();
        Self {
            autoencoder,
            encoder,
            backbone,
            schedule,
            data,
            images,
            labels,
        }
    }

    pub fn context(&self, weights: LossWeights) -> TrainContext<'_> {
        TrainContext {
            autoencoder: &self.autoencoder,
            encoder: &self.encoder,
            backbone: &self.backbone,
            schedule: &self.schedule,
            data: &self.data,
            weights,
        }
    }
}

pub fn train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        steps,
        seed: 11,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = random::rng(seed);
    random::normal(&mut rng, shape.to_vec(), DType::F32).unwrap()
}

pub fn randn64(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = random::rng(seed);
    random::normal(&mut rng, shape.to_vec(), DType::F64).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

pub fn cpu() -> Device {
    Device::Cpu
}
