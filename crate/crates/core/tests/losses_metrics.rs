mod common;

use mcsagan::losses::{self, GeneratorParts, LossWeights, SsimConfig};
use mcsagan::metrics::{self, mfd, FeatureStats};
use mcsagan::networks::{FeatureConfig, FeatureExtractor};
use mcsagan::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn penalty_of_linear_scorers_is_closed_form() {
    for n in [8usize, 16, 64] {
        let want = ((n as f64).sqrt() - 1.0).powi(2);
        assert!((common::penalty_of_sum_scorer(n) - want).abs() < 1e-5, "N = {n}");
    }
}

#[test]
fn penalty_of_weighted_linear_scorer() {
    // score_b = <a, y_b>; the gradient is a for every sample
    let shape = [3, 2, 2, 2, 2];
    let a = common::randn(&shape[1..], 5);
    let norm = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let real = common::randn(&shape, 6);
    let fake = common::randn(&shape, 7);
    let scorer = |y: &Tensor<f64>| y.mul(&a)?.sum_all();
    let gp = losses::gradient_penalty(scorer, &real, &fake, &mut common::rng(1)).unwrap();
    assert!((gp.item().unwrap() - (norm - 1.0).powi(2)).abs() < 1e-9);
}

#[test]
fn penalty_rejects_mismatched_shapes() {
    let real = Tensor::<f64>::zeros(&[2, 1, 2, 2, 2]);
    let fake = Tensor::<f64>::zeros(&[2, 1, 2, 2, 4]);
    assert!(losses::gradient_penalty_at(|y| y.sum_all(), &real, &fake, &[0.5, 0.5]).is_err());
    assert!(losses::gradient_penalty_at(|y| y.sum_all(), &real, &real, &[0.5]).is_err());
}

#[test]
fn generator_total_with_unit_parts() {
    let (total, rebuilt) = common::unit_generator_total();
    assert!((total - 47.8676).abs() < 1e-4);
    assert!((rebuilt - total).abs() <= 1e-6 * total.abs());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loss_report_reconstructs_total(parts in prop::array::uniform6(-5.0f64..5.0), w in prop::array::uniform6(0.0f64..30.0)) {
        let t = |v: f64| Tensor::<f64>::scalar(v);
        let gp = GeneratorParts { adv: t(parts[0]), cls: t(parts[1]), rec: t(parts[2]), seg: t(parts[3]), perc: t(parts[4]), msssim: t(parts[5]) };
        let weights = LossWeights { adv: w[0], cls: w[1], rec: w[2], seg: w[3], perc: w[4], msssim: w[5], ..LossWeights::default() };
        let (total, report) = losses::generator_total(&gp, &weights).unwrap();
        let direct: f64 = parts.iter().zip(&w).map(|(p, q)| p * q).sum();
        let total = total.item().unwrap();
        prop_assert!((total - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        prop_assert!((report.reconstruct() - total).abs() <= 1e-6 * total.abs().max(1e-12));
        prop_assert_eq!(report.terms.len(), 6);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(seed in 0u64..10_000, p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let a = common::binary_mask(&[1, 1, 4, 4, 4], p, seed);
        let b = common::binary_mask(&[1, 1, 4, 4, 4], q, seed + 1);
        let ab = metrics::dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, metrics::dice(&b, &a).unwrap());
    }

    #[test]
    fn ssim_is_symmetric(seed in 0u64..10_000) {
        let a = common::uniform(&[1, 1, 8, 8, 8], -1.0, 1.0, seed);
        let b = common::uniform(&[1, 1, 8, 8, 8], -1.0, 1.0, seed + 7);
        let ab = metrics::ssim(&a, &b).unwrap();
        prop_assert!((ab - metrics::ssim(&b, &a).unwrap()).abs() <= 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}

#[test]
fn critic_total_weights() {
    let t = Tensor::<f64>::scalar;
    let (total, report) = losses::critic_total(&t(-0.5), &t(0.2), &t(1.0), &LossWeights::default()).unwrap();
    assert!((total.item().unwrap() - (-0.5 + 2.0 + 0.4613)).abs() < 1e-12);
    assert_eq!(report.weights["gp"], 10.0);
}

#[test]
fn reconstruction_matches_voxel_loop() {
    let shape = [2, 1, 4, 4, 4];
    let y = common::randn(&shape, 1);
    let y_hat = common::randn(&shape, 2);
    let m = common::binary_mask(&shape, 0.2, 3);
    let got = losses::reconstruction_loss(&y_hat, &y, &m, 4.0).unwrap().item().unwrap();
    let want: f64 = (0..y.numel())
        .map(|i| (1.0 + 4.0 * m.data()[i]) * (y.data()[i] - y_hat.data()[i]).abs())
        .sum::<f64>()
        / y.numel() as f64;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn perceptual_loss_vanishes_on_identity() {
    let fx = FeatureExtractor::<f64>::new(&FeatureConfig::default());
    let y = common::uniform(&[1, 1, 16, 16, 16], -1.0, 1.0, 4);
    let same = losses::perceptual_loss(&y, &y, &fx, &losses::PERCEPTUAL_WEIGHTS).unwrap();
    assert_eq!(same.item().unwrap(), 0.0);
    let other = losses::perceptual_loss(&y.neg().unwrap(), &y, &fx, &losses::PERCEPTUAL_WEIGHTS).unwrap();
    assert!(other.item().unwrap() > 0.0);
}

#[test]
fn msssim_loss_range() {
    let cfg = SsimConfig::default();
    let y = common::uniform(&[2, 1, 16, 16, 16], -1.0, 1.0, 8);
    assert!(losses::msssim_loss(&y, &y, &cfg).unwrap().item().unwrap().abs() < 1e-6);
    let anti = losses::msssim_loss(&y.neg().unwrap(), &y, &cfg).unwrap().item().unwrap();
    assert!(anti > 1.0 && anti <= 2.0, "{anti}");
    let noisy = y.add(&common::randn(&[2, 1, 16, 16, 16], 9).mul_scalar(0.3).unwrap()).unwrap();
    let l = losses::msssim_loss(&noisy, &y, &cfg).unwrap().item().unwrap();
    assert!(l > 0.0 && l < anti);
}

#[test]
fn metric_identities_hold() {
    for (name, got, want) in common::metric_identities() {
        assert!((got - want).abs() <= 1e-6, "{name}: {got}");
    }
}

#[test]
fn mse_and_psnr_against_loops() {
    let a = common::randn(&[3, 5, 7], 1);
    let b = common::randn(&[3, 5, 7], 2);
    let want = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 105.0;
    assert!((metrics::mse(&a, &b).unwrap() - want).abs() < 1e-12);
    let off = a.add_scalar(1.0).unwrap();
    assert!((metrics::mse(&off, &a).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(metrics::psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
    assert!((metrics::psnr(&a.add_scalar(2.0).unwrap(), &a, 2.0).unwrap()).abs() < 1e-9);
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.05, 0.1, 0.5] {
        let p = metrics::psnr(&a.add_scalar(amp).unwrap(), &a, 2.0).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn ssim_decreases_with_noise() {
    let y = Tensor::<f64>::full(&[1, 1, 12, 12, 12], 0.2);
    let mut last = 1.0 + 1e-12;
    for sigma in [0.05, 0.1, 0.3, 0.8] {
        let noisy = y.add(&Tensor::randn(y.shape(), sigma, &mut common::rng(3))).unwrap();
        let s = metrics::ssim(&noisy, &y).unwrap();
        assert!(s < last, "sigma {sigma}: {s} >= {last}");
        last = s;
    }
    assert!(last < 0.5);
}

#[test]
fn dice_hand_counts() {
    let mut a = vec![0.0; 32];
    let mut b = vec![0.0; 32];
    a[..8].iter_mut().for_each(|v| *v = 1.0);
    b[4..12].iter_mut().for_each(|v| *v = 1.0);
    let t = |v: Vec<f64>| Tensor::<f64>::from_vec(v, &[2, 16]).unwrap();
    assert_eq!(metrics::dice(&t(a.clone()), &t(b)).unwrap(), 0.5);
    let mut c = vec![0.0; 32];
    c[20..24].iter_mut().for_each(|v| *v = 1.0);
    assert_eq!(metrics::dice(&t(a), &t(c)).unwrap(), 0.0);
    let z = t(vec![0.0; 32]);
    assert_eq!(metrics::dice(&z, &z).unwrap(), 1.0);
    assert!(metrics::dice(&t(vec![0.5; 32]), &z).is_err());
}

fn spd(n: usize, seed: u64) -> Vec<f64> {
    let a = common::randn(&[n, n], seed).to_vec();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>() / n as f64;
        }
        s[i * n + i] += 0.1;
    }
    s
}

/// tr sqrt(S1 S2) from the eigenvalues of the non-symmetric product.
fn mfd_oracle(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let n = a.mu.len();
    let s1 = DMatrix::from_row_slice(n, n, &a.sigma);
    let s2 = DMatrix::from_row_slice(n, n, &b.sigma);
    let tr_sqrt: f64 = (&s1 * &s2).complex_eigenvalues().iter().map(|z| z.re.max(0.0).sqrt()).sum();
    let dmu: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    dmu + s1.trace() + s2.trace() - 2.0 * tr_sqrt
}

#[test]
fn mfd_matches_general_eigen_oracle() {
    let mut r = common::rng(42);
    for seed in 0..20u64 {
        let n = r.gen_range(2..10);
        let a = FeatureStats { mu: common::randn(&[n], seed).to_vec(), sigma: spd(n, seed + 100), n: 50 };
        let b = FeatureStats { mu: common::randn(&[n], seed + 200).to_vec(), sigma: spd(n, seed + 300), n: 50 };
        let got = mfd(&a, &b).unwrap();
        let want = mfd_oracle(&a, &b);
        assert!((got - want).abs() <= 1e-8 * (1.0 + want), "{got} vs {want}");
        assert!((got - mfd(&b, &a).unwrap()).abs() <= 1e-6);
    }
}

#[test]
fn mfd_rejects_bad_covariances() {
    let asym = FeatureStats { mu: vec![0.0; 2], sigma: vec![1.0, 0.5, 0.0, 1.0], n: 5 };
    let ok = FeatureStats { mu: vec![0.0; 2], sigma: vec![1.0, 0.0, 0.0, 1.0], n: 5 };
    assert!(mfd(&asym, &ok).is_err());
    let indefinite = FeatureStats { mu: vec![0.0; 2], sigma: vec![1.0, 0.0, 0.0, -1.0], n: 5 };
    assert!(mfd(&indefinite, &ok).is_err());
    let nan = FeatureStats { mu: vec![f64::NAN, 0.0], sigma: vec![1.0, 0.0, 0.0, 1.0], n: 5 };
    assert!(mfd(&nan, &ok).is_err());
    assert!(FeatureStats::from_features(&[vec![1.0, 2.0]]).is_err());
}
