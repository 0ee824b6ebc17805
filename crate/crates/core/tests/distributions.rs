mod common;

use common::{
    gamma_log_pdf, kl_weibull_gamma_quadrature, ks_statistic, moments, simpson, simpson_pieces, weibull_log_pdf,
};
use npsa::distributions::*;
use npsa::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use statrs::function::gamma::gamma as gamma_fn;

const KS: [f64; 6] = [0.5, 1.0, 2.0, 10.0, 100.0, 300.0];
const LAMBDAS: [f64; 3] = [0.1, 1.0, 10.0];
const ALPHAS: [f64; 4] = [0.5, 1.0, 2.0, 5.0];

#[test]
fn quadrature_oracle_reproduces_textbook_cases() {
    // exponential pair: βλ − 1 − ln(λβ)
    assert!((kl_weibull_gamma_quadrature(1.0, 2.0, 1.0, 1.0) - (1.0 - 2f64.ln())).abs() < 1e-10);
    assert!(kl_weibull_gamma_quadrature(1.0, 1.0, 1.0, 1.0).abs() < 1e-10);
}

#[test]
fn kl_matches_quadrature_in_x() {
    let f = |x: f64| {
        let lq = weibull_log_pdf(x, 2.0, 1.0);
        lq.exp() * (lq - gamma_log_pdf(x, 2.0, 1.0))
    };
    let mut edges = vec![1e-12];
    edges.extend((1..=200).map(|i| i as f64 * 0.25));
    let oracle = simpson_pieces(&f, &edges, 1e-12);
    let closed = kl_weibull_gamma(2.0, 1.0, 2.0, 1.0).unwrap();
    assert!((closed - oracle).abs() < 1e-6, "{closed} vs {oracle}");
}

#[test]
fn kl_grid_is_nonnegative_and_matches_specialisation() {
    for k in KS {
        for lambda in LAMBDAS {
            for alpha in ALPHAS {
                let kl = kl_weibull_gamma(k, lambda, alpha, 1.0).unwrap();
                assert!(kl >= -1e-9, "{k} {lambda} {alpha}: {kl}");
                let gg = kl_generalized_gamma(GenGamma::weibull(k, lambda), GenGamma::gamma(alpha, 1.0)).unwrap();
                assert!((kl - gg).abs() < 1e-10 * kl.abs().max(1.0));
            }
        }
    }
}

#[test]
fn generalized_gamma_cross_check() {
    let gg = kl_generalized_gamma(GenGamma { a: 2.0, d: 3.0, p: 3.0 }, GenGamma { a: 1.0, d: 2.0, p: 1.0 }).unwrap();
    let wg = kl_weibull_gamma(3.0, 2.0, 2.0, 1.0).unwrap();
    assert!((gg - wg).abs() < 1e-12);
    assert!((gg - kl_weibull_gamma_quadrature(3.0, 2.0, 2.0, 1.0)).abs() < 1e-8);
    let same = GenGamma { a: 0.7, d: 2.5, p: 1.7 };
    assert!(kl_generalized_gamma(same, same).unwrap().abs() < 1e-12);
}

#[test]
fn kl_rejects_non_positive_parameters() {
    assert!(kl_weibull_gamma(0.0, 1.0, 1.0, 1.0).is_err());
    assert!(kl_weibull_gamma(1.0, -1.0, 1.0, 1.0).is_err());
    assert!(kl_generalized_gamma(GenGamma { a: 1.0, d: 0.0, p: 1.0 }, GenGamma::gamma(1.0, 1.0)).is_err());
}

#[test]
fn kl_gradients_match_differences() {
    for (k, lambda, alpha) in [(0.5, 0.3, 0.7), (2.0, 1.5, 2.0), (300.0, 0.05, 0.4)] {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::scalar(lambda));
        let a = tape.param(Tensor::scalar(alpha));
        let kl = kl_weibull_gamma_var(&mut tape, &WeibullParams { k, lambda: l }, &GammaParams { alpha: a, beta: 1.0 }).unwrap();
        let s = tape.sum(kl).unwrap();
        let g = tape.backward(s).unwrap();
        let h = 1e-6;
        let f = |lam: f64, al: f64| kl_weibull_gamma(k, lam, al, 1.0).unwrap();
        let d_lambda = (f(lambda + h, alpha) - f(lambda - h, alpha)) / (2.0 * h);
        let d_alpha = (f(lambda, alpha + h) - f(lambda, alpha - h)) / (2.0 * h);
        let g_lambda = g.get(l).unwrap().item();
        let g_alpha = g.get(a).unwrap().item();
        assert!((g_lambda - d_lambda).abs() <= 1e-5 * d_lambda.abs().max(1e-3), "{g_lambda} vs {d_lambda}");
        assert!((g_alpha - d_alpha).abs() <= 1e-5 * d_alpha.abs().max(1e-3), "{g_alpha} vs {d_alpha}");
    }
}

#[test]
fn weibull_moments_against_independent_gamma() {
    for k in KS {
        let (m, v) = weibull_moments(k, 2.0);
        let g1 = gamma_fn(1.0 + 1.0 / k);
        assert!((m - 2.0 * g1).abs() < 1e-12 * m);
        assert!((v - 4.0 * (gamma_fn(1.0 + 2.0 / k) - g1 * g1)).abs() < 1e-10 * v.max(1e-6));
    }
    let (_, v) = weibull_moments(300.0, 1.0);
    assert!(v < 1e-4);
}

fn weibull_draws(k: f64, lambda: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(Open01)).collect();
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::full(&[1, n], lambda));
    let w = weibull_rsample(&mut tape, &WeibullParams { k, lambda: l }, &Tensor::matrix(1, n, eps).unwrap()).unwrap();
    tape.value(w).data().to_vec()
}

#[test]
fn weibull_sample_mean_k2() {
    let m = moments(&weibull_draws(2.0, 1.0, 1_000_000, 1));
    assert!((m.mean - std::f64::consts::PI.sqrt() / 2.0).abs() < 3.0 * m.se_mean);
}

#[test]
fn weibull_samples_follow_the_cdf() {
    let (k, lambda) = (0.8, 1.7);
    let mut s = weibull_draws(k, lambda, 1_000_000, 2);
    let d = ks_statistic(&mut s, |x| 1.0 - (-(x / lambda).powf(k)).exp());
    assert!(d < 0.002, "{d}");
}

#[test]
fn unnormalised_weights_are_unbiased_around_softmax() {
    // λ = w / Γ(1 + 1/k) makes E[Ŵ] = w
    for k in [1.0, 10.0, 300.0] {
        for w in [0.05, 0.3, 0.9] {
            let lambda = w / gamma_fn(1.0 + 1.0 / k);
            let m = moments(&weibull_draws(k, lambda, 100_000, (k * 10.0 + w * 100.0) as u64));
            assert!((m.mean - w).abs() < 3.0 * m.se_mean.max(1e-15) + 1e-12, "k={k} w={w}: {}", m.mean);
        }
    }
}

#[test]
fn gaussian_sample_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 1_000_000;
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::zeros(&[1, n]));
    let sigma = tape.constant(Tensor::full(&[1, n], 2.0));
    let z = gaussian_rsample(&mut tape, &DiagGaussianParams { mu, sigma }, &Tensor::matrix(1, n, eps).unwrap()).unwrap();
    let m = moments(tape.value(z).data());
    assert!((m.var - 4.0).abs() < 3.0 * m.se_var);
}

#[test]
fn gaussian_kl_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (0..8).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
    let (mq, sq, mp, sp) = (draw(&mut rng, -1.0, 1.0), draw(&mut rng, 0.2, 2.0), draw(&mut rng, -1.0, 1.0), draw(&mut rng, 0.2, 2.0));
    let closed = kl_diag_gaussian(&mq, &sq, &mp, &sp);
    let oracle: f64 = (0..8)
        .map(|d| {
            let f = |y: f64| {
                let lq = gaussian_log_density(y, mq[d], sq[d]);
                lq.exp() * (lq - gaussian_log_density(y, mp[d], sp[d]))
            };
            simpson(&f, mq[d] - 15.0 * sq[d], mq[d] + 15.0 * sq[d], 1e-12)
        })
        .sum();
    assert!((closed - oracle).abs() < 1e-8, "{closed} vs {oracle}");
    assert_eq!(kl_diag_gaussian(&[1.0], &[1.0], &[0.0], &[1.0]), 0.5);
}

#[test]
fn gaussian_density_integrates_to_one() {
    let total = simpson(&|y: f64| gaussian_log_density(y, 0.3, 0.7).exp(), -10.0, 10.0, 1e-10);
    assert!((total - 1.0).abs() < 1e-4);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(k in 0.3f64..400.0, lambda in 1e-3f64..20.0, alpha in 0.05f64..10.0, beta in 0.1f64..5.0) {
        let kl = kl_weibull_gamma(k, lambda, alpha, beta).unwrap();
        prop_assert!(kl >= -1e-9);
        let gg = kl_generalized_gamma(GenGamma::weibull(k, lambda), GenGamma::gamma(alpha, beta)).unwrap();
        prop_assert!((kl - gg).abs() < 1e-9 * kl.abs().max(1.0));
    }

    #[test]
    fn weibull_draws_are_positive_and_monotone(k in 0.2f64..500.0, e1 in 1e-12f64..0.5, e2 in 0.5f64..(1.0 - 1e-12)) {
        let a = weibull_unit_draw(k, e1).unwrap();
        let b = weibull_unit_draw(k, e2).unwrap();
        prop_assert!(a > 0.0 && a <= b);
    }

    #[test]
    fn gaussian_kl_is_nonnegative(mq in -3f64..3.0, sq in 0.05f64..4.0, mp in -3f64..3.0, sp in 0.05f64..4.0) {
        prop_assert!(kl_diag_gaussian(&[mq], &[sq], &[mp], &[sp]) >= -1e-12);
    }
}
