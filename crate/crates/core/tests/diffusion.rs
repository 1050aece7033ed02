mod common;

use candle_core::{DType, Tensor};
use common::{flat, randn, randn64, Fixture};
use idpaint_core::backbone::Backbone;
use idpaint_core::diffusion::{
    composite, forward_diffuse, predict_x0, reverse_step, sample_inpaint, NoiseSchedule, Timestep,
};
use idpaint_core::random;
use proptest::prelude::*;

fn ts(sched: &NoiseSchedule, t: usize) -> Timestep {
    sched.timestep(t).unwrap()
}

#[test]
fn thousand_step_schedule_matches_product_loop() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut prod = 1.0f64;
    for k in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * k as f64 / 999.0;
        prod *= 1.0 - beta;
    }
    assert!((s.alpha_bars()[999] - prod).abs() < 1e-12);
}

#[test]
fn noiseless_iteration_telescopes() {
    let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
    let z0 = randn64(1, &[2, 3, 4, 4]);
    let mut z = z0.clone();
    for t in 1..=50 {
        z = (&z * (1.0 - s.beta(ts(&s, t))).sqrt()).unwrap();
        let direct = forward_diffuse(&z0, &[ts(&s, t)], &z0.zeros_like().unwrap(), &s).unwrap();
        for (a, b) in flat(&z).iter().zip(flat(&direct)) {
            assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn monte_carlo_moments_match_closed_form() {
    let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let n = 20_000;
    for (t, z) in [(1usize, 0.7f64), (40, -1.3), (100, 2.0)] {
        let z0 = Tensor::full(z, (n, 1, 1, 1), &common::cpu()).unwrap();
        let eps = randn64(t as u64, &[n, 1, 1, 1]);
        let zt = flat(&forward_diffuse(&z0, &[ts(&s, t)], &eps, &s).unwrap());
        let ab = s.alpha_bar(ts(&s, t));
        let mean = zt.iter().sum::<f64>() / n as f64;
        let var = zt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!(
            (mean - ab.sqrt() * z).abs() < 3.0 * se_mean,
            "t={t} mean {mean}"
        );
        assert!((var - want_var).abs() < 3.0 * se_var, "t={t} var {var}");
    }
}

#[test]
fn reverse_step_recovers_z0_on_single_step_schedule() {
    let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
    let z0 = randn64(5, &[1, 2, 3, 3]);
    let eps = randn64(6, &[1, 2, 3, 3]);
    let t = ts(&s, 1);
    let zt = forward_diffuse(&z0, &[t], &eps, &s).unwrap();
    let noise = randn64(7, &[1, 2, 3, 3]);
    let out = reverse_step(&zt, &eps, t, &s, &noise).unwrap();
    for (a, b) in flat(&out).iter().zip(flat(&z0)) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn reverse_step_is_deterministic_without_noise() {
    let s = NoiseSchedule::linear(10, 1e-2, 0.1).unwrap();
    let zt = randn64(1, &[1, 1, 2, 2]);
    let e = randn64(2, &[1, 1, 2, 2]);
    let zero = zt.zeros_like().unwrap();
    let a = reverse_step(&zt, &e, ts(&s, 5), &s, &zero).unwrap();
    let b = reverse_step(&zt, &e, ts(&s, 5), &s, &zero).unwrap();
    assert_eq!(flat(&a), flat(&b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_invariants(steps in 1usize..400, lo in 1e-5f64..0.3, span in 0.0f64..0.6) {
        let hi = (lo + span).min(0.99);
        let s = NoiseSchedule::linear(steps, lo, hi).unwrap();
        let mut prod = 1.0;
        for (k, (&b, &ab)) in s.betas().iter().zip(s.alpha_bars()).enumerate() {
            prop_assert!(b > 0.0 && b < 1.0);
            prod *= 1.0 - b;
            prop_assert!((ab - prod).abs() < 1e-12);
            if k > 0 {
                prop_assert!(ab < s.alpha_bars()[k - 1]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn x0_prediction_inverts_diffusion(seed in any::<u64>(), t in 1usize..=1000) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z0 = randn64(seed, &[1, 4, 4, 4]);
        let eps = randn64(seed.wrapping_add(1), &[1, 4, 4, 4]);
        let t = ts(&s, t);
        let zt = forward_diffuse(&z0, &[t], &eps, &s).unwrap();
        let back = predict_x0(&zt, &eps, &[t], &s).unwrap();
        let (a, b) = (flat(&back), flat(&z0));
        let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-6 * scale, "error {} at scale {}", err, scale);
    }
}

fn random_mask(seed: u64, b: usize, size: usize) -> Tensor {
    let u = randn(seed, &[b, 1, size, size]);
    u.gt(0.3).unwrap().to_dtype(DType::F32).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn inpainting_keeps_known_pixels(seed in any::<u64>()) {
        let fx = Fixture::new(2, 1);
        let sched = NoiseSchedule::linear(4, 1e-3, 0.2).unwrap();
        let mask = random_mask(seed, 2, common::SIZE);
        let out = sample_inpaint(&fx.backbone, &fx.autoencoder, &fx.images, &mask, &fx.data.e_cond, &sched, seed).unwrap();
        let (o, x, m) = (flat(&out), flat(&fx.images), flat(&mask.broadcast_as(fx.images.shape()).unwrap()));
        for k in 0..o.len() {
            if m[k] == 0.0 {
                prop_assert_eq!(o[k].to_bits(), x[k].to_bits());
            }
        }
    }
}

#[test]
fn inpainting_edge_masks_and_determinism() {
    let fx = Fixture::new(2, 1);
    let sched = NoiseSchedule::linear(4, 1e-3, 0.2).unwrap();
    let bb: &Backbone = &fx.backbone;
    let zeros = Tensor::zeros(
        (2, 1, common::SIZE, common::SIZE),
        DType::F32,
        &common::cpu(),
    )
    .unwrap();
    let out = sample_inpaint(
        bb,
        &fx.autoencoder,
        &fx.images,
        &zeros,
        &fx.data.e_cond,
        &sched,
        3,
    )
    .unwrap();
    assert_eq!(flat(&out), flat(&fx.images));

    let ones = zeros.ones_like().unwrap();
    let a = sample_inpaint(
        bb,
        &fx.autoencoder,
        &fx.images,
        &ones,
        &fx.data.e_cond,
        &sched,
        3,
    )
    .unwrap();
    let b = sample_inpaint(
        bb,
        &fx.autoencoder,
        &fx.images,
        &ones,
        &fx.data.e_cond,
        &sched,
        3,
    )
    .unwrap();
    assert_eq!(flat(&a), flat(&b));
    let c = sample_inpaint(
        bb,
        &fx.autoencoder,
        &fx.images,
        &ones,
        &fx.data.e_cond,
        &sched,
        4,
    )
    .unwrap();
    assert_ne!(flat(&a), flat(&c));
    // A full hole copies nothing: the output is the generated image itself.
    let gen = randn(9, &[2, 3, common::SIZE, common::SIZE]);
    assert_eq!(
        flat(&composite(&gen, &fx.images, &ones).unwrap()),
        flat(&gen)
    );
}

#[test]
fn sampler_rng_is_local() {
    // Drawing from one stream does not disturb another with the same seed.
    let mut a = random::rng(1);
    let mut b = random::rng(1);
    let _ = random::normal(&mut a, 10, DType::F32).unwrap();
    let x = random::normal(&mut b, 10, DType::F32).unwrap();
    let mut c = random::rng(1);
    let y = random::normal(&mut c, 10, DType::F32).unwrap();
    assert_eq!(flat(&x), flat(&y));
}
