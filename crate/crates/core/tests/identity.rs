mod common;

use candle_core::{DType, Tensor};
use common::{flat, SIZE};
use idpaint_core::identity::{
    cosine_distance, cosine_similarity, pretrain_encoder, similarity, EncoderConfig,
    EncoderTrainConfig, IdentityEmbedding, IdentityEncoder, RecognitionEncoder,
};
use idpaint_core::toyface::{self, ToyFaceConfig};
use proptest::prelude::*;
use rand::Rng;

fn unit(rng: &mut impl Rng, d: usize) -> IdentityEmbedding {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    IdentityEmbedding::normalized(v).unwrap()
}

fn corpus(identities: usize, per: usize, sample_seed: u64) -> (Tensor, Vec<usize>) {
    let samples = toyface::generate(&ToyFaceConfig {
        identities,
        images_per_identity: per,
        image_size: SIZE,
        identity_seed: 21,
        sample_seed,
    })
    .unwrap();
    toyface::to_tensors(&samples, SIZE).unwrap()
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: SIZE,
        widths: vec![8, 16, 16, 16],
        feature_dim: 32,
        embedding_dim: 16,
    }
}

fn train_cfg(steps: usize) -> EncoderTrainConfig {
    EncoderTrainConfig {
        steps,
        batch_size: 16,
        learning_rate: 3e-3,
        seed: 5,
        ..EncoderTrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cosine_distance_is_symmetric_and_bounded(seed in any::<u64>(), d in 1usize..32) {
        let mut rng = idpaint_core::random::rng(seed);
        let (u, v) = (unit(&mut rng, d), unit(&mut rng, d));
        let a = cosine_distance(&u, &v).unwrap();
        prop_assert_eq!(a, cosine_distance(&v, &u).unwrap());
        prop_assert!((0.0..=2.0).contains(&a));
        prop_assert_eq!(similarity(&u, &u).unwrap(), 1.0);
    }

    #[test]
    fn cosine_distance_gradient_matches_central_differences(seed in any::<u64>(), d in 2usize..16) {
        let mut rng = idpaint_core::random::rng(seed);
        let (u, v) = (unit(&mut rng, d), unit(&mut rng, d));
        let h = 1e-7;
        for k in 0..d {
            let shift = |s: f64| {
                let mut w = u.as_slice().to_vec();
                w[k] += s;
                // Off-unit by O(h), well inside the accepted tolerance.
                IdentityEmbedding::new(w).unwrap()
            };
            let num = (cosine_distance(&shift(h), &v).unwrap() - cosine_distance(&shift(-h), &v).unwrap()) / (2.0 * h);
            let analytic = -v.as_slice()[k];
            let tol = 1e-4 * analytic.abs().max(1e-2);
            prop_assert!((num - analytic).abs() <= tol, "{} vs {}", num, analytic);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn encoder_outputs_are_unit_norm(seed in any::<u64>()) {
        let enc = RecognitionEncoder::new(small_encoder(), seed % 7).unwrap().frozen().unwrap();
        let x = ((common::randn(seed, &[3, 3, SIZE, SIZE]) * 0.5).unwrap()).clamp(-1f32, 1f32).unwrap();
        let e = enc.embed(&x).unwrap().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
        for row in e {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6, "norm {}", n);
        }
    }
}

#[test]
fn pretraining_is_reproducible() {
    let (x, y) = corpus(3, 4, 1);
    let (a, ra) = pretrain_encoder(&x, &y, small_encoder(), &train_cfg(5)).unwrap();
    let (b, rb) = pretrain_encoder(&x, &y, small_encoder(), &train_cfg(5)).unwrap();
    assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
    assert_eq!(ra.loss_history, rb.loss_history);
    assert!(a.is_frozen());
    assert_eq!(a.embedding_dim(), 16);
}

fn mean_sim(e: &[IdentityEmbedding], y: &[usize], same: bool) -> f64 {
    let mut acc = 0.0;
    let mut n = 0;
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            if (y[i] == y[j]) == same {
                acc += similarity(&e[i], &e[j]).unwrap();
                n += 1;
            }
        }
    }
    acc / n as f64
}

#[test]
fn two_identities_separate_after_pretraining() {
    // Colour nuisance is strong; a few dozen views per identity are needed
    // before the embedding stops memorizing individual images.
    let (x, y) = corpus(2, 32, 1);
    let (enc, report) = pretrain_encoder(&x, &y, small_encoder(), &train_cfg(150)).unwrap();
    assert!(
        report.train_accuracy >= 0.99,
        "accuracy {}",
        report.train_accuracy
    );
    let (xt, yt) = corpus(2, 8, 99);
    let e = enc.embed_all(&xt).unwrap();
    let gap = mean_sim(&e, &yt, true) - mean_sim(&e, &yt, false);
    assert!(gap > 0.3, "intra/inter gap {gap}");
}

#[test]
fn held_out_images_rank_same_identity_first() {
    let (x, y) = corpus(8, 24, 1);
    let (enc, report) = pretrain_encoder(&x, &y, small_encoder(), &train_cfg(400)).unwrap();
    assert!(
        report.train_accuracy >= 0.99,
        "accuracy {}",
        report.train_accuracy
    );
    let (xt, yt) = corpus(8, 4, 77);
    let e = enc.embed_all(&xt).unwrap();

    let mut centroids = vec![vec![0.0; 16]; 8];
    for (v, &l) in enc.embed_all(&x).unwrap().iter().zip(&y) {
        for (c, a) in centroids[l].iter_mut().zip(v.as_slice()) {
            *c += a;
        }
    }
    let nearest = |v: &IdentityEmbedding| {
        (0..8)
            .max_by(|&a, &b| {
                let sa = cosine_similarity(v.as_slice(), &centroids[a]);
                let sb = cosine_similarity(v.as_slice(), &centroids[b]);
                sa.total_cmp(&sb)
            })
            .unwrap()
    };
    let hits = e.iter().zip(&yt).filter(|(v, &l)| nearest(v) == l).count();
    assert!(
        hits as f64 / e.len() as f64 >= 0.9,
        "centroid accuracy {hits}/{}",
        e.len()
    );

    let mut rng = idpaint_core::random::rng(3);
    let (mut ok, trials) = (0, 2000);
    for _ in 0..trials {
        let a = rng.random_range(0..e.len());
        let p = loop {
            let p = rng.random_range(0..e.len());
            if p != a && yt[p] == yt[a] {
                break p;
            }
        };
        let n = loop {
            let n = rng.random_range(0..e.len());
            if yt[n] != yt[a] {
                break n;
            }
        };
        if similarity(&e[a], &e[p]).unwrap() > similarity(&e[a], &e[n]).unwrap() {
            ok += 1;
        }
    }
    let rate = ok as f64 / trials as f64;
    assert!(rate >= 0.95, "triple accuracy {rate}");
}

#[test]
fn frozen_encoder_passes_gradient_to_images_only() {
    let enc = RecognitionEncoder::new(small_encoder(), 1)
        .unwrap()
        .frozen()
        .unwrap();
    let x = candle_core::Var::from_tensor(&common::randn(4, &[2, 3, SIZE, SIZE])).unwrap();
    let e = enc.embed(x.as_tensor()).unwrap();
    let loss = e.sum_all().unwrap();
    let grads = loss.backward().unwrap();
    assert!(flat(grads.get(x.as_tensor()).unwrap())
        .iter()
        .any(|v| *v != 0.0));
    for v in enc.params().vars() {
        assert!(grads.get(v.as_tensor()).is_none());
    }
}
