use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use cgsur_core::field::{covariance_matrix, sample_grf, GrfSampler, GrfSpec};
use cgsur_core::inference::{update_precision_gamma, update_qy_closedform};
use cgsur_core::predict::{kde, ks_statistic, logscore, r2_score, silverman_bandwidth};
use cgsur_core::rng;
use cgsur_core::vobs::GAMMA_PRIOR;

#[test]
fn field_sample_covariance_matches_kernel() {
    let spec = GrfSpec::new(4, 0.4, 0.8, 0.15).unwrap();
    let sampler = GrfSampler::new(spec).unwrap();
    let cov = covariance_matrix(&spec);
    let n = 20_000;
    let mut r = rng::stream(5, rng::streams::FIELD);
    let mut mean = vec![0.0; 16];
    let mut second = DMatrix::zeros(16, 16);
    for _ in 0..n {
        let l = DVector::from_vec(sampler.sample(&mut r).lambda);
        for i in 0..16 {
            mean[i] += l[i] / n as f64;
        }
        let c = l.add_scalar(-0.4);
        second += &c * c.transpose() / n as f64;
    }
    // standard error of a covariance entry is at most about σ²·sqrt(2/n)
    let tol = 4.0 * 0.64 * (2.0 / n as f64).sqrt();
    assert!((&second - &cov).amax() < tol, "{}", (&second - &cov).amax());
    assert!(mean.iter().all(|m| (m - 0.4).abs() < 4.0 * 0.8 / (n as f64).sqrt()));
}

#[test]
fn field_samples_are_reproducible_per_seed() {
    let spec = GrfSpec::new(8, 0.4, 0.8, 0.15).unwrap();
    assert_eq!(sample_grf(&spec, 3).unwrap(), sample_grf(&spec, 3).unwrap());
    assert_ne!(sample_grf(&spec, 3).unwrap(), sample_grf(&spec, 4).unwrap());
}

#[test]
fn mixed_exact_and_noisy_rows_match_dense_limit() {
    // exact rows behave like noisy rows whose noise shrinks to zero
    let mut r = rng::stream(8, 0);
    let (n, m) = (20, 5);
    let g = DMatrix::from_fn(m, n, |_, _| r.sample::<f64, _>(StandardNormal));
    let a = DVector::from_fn(m, |_, _| r.sample::<f64, _>(StandardNormal));
    let s_inv: Vec<f64> = (0..n).map(|_| r.random_range(0.5..3.0)).collect();
    let h: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let exact = update_qy_closedform(&g, &a, &[0.0, 0.2, 0.0, 1.0, 0.5], &s_inv, &h, 64).unwrap();
    let near = update_qy_closedform(&g, &a, &[1e-12, 0.2, 1e-12, 1.0, 0.5], &s_inv, &h, 64).unwrap();
    assert!((&exact.mean - &near.mean).amax() < 1e-8);
    assert!((exact.dense_cov() - near.dense_cov()).amax() < 1e-8);
    let fit = &g * &exact.mean - &a;
    assert!(fit[0].abs() < 1e-12 && fit[2].abs() < 1e-12);
}

#[test]
fn gamma_posterior_from_monte_carlo_second_moments() {
    let mut r = rng::stream(9, 0);
    let (n, m) = (12, 4);
    let g = DMatrix::from_fn(m, n, |_, _| r.sample::<f64, _>(StandardNormal));
    let a = DVector::zeros(m);
    let q = update_qy_closedform(&g, &a, &[0.5; 4], &[1.0; 12], &[0.1; 12], 64).unwrap();
    let analytic = q.residual_second_moment(&g, &a);
    let draws = 40_000;
    let v: Vec<f64> = (0..draws).map(|_| (&g * q.sample(&mut r) - &a).norm_squared()).collect();
    let mean = v.iter().sum::<f64>() / draws as f64;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
    assert!((mean - analytic).abs() < 3.0 * sd / (draws as f64).sqrt());
    let post = update_precision_gamma(&[analytic, analytic], &[m, m], &GAMMA_PRIOR).unwrap();
    assert_eq!(post.shape, GAMMA_PRIOR.shape + m as f64);
    assert_eq!(post.rate, GAMMA_PRIOR.rate + analytic);
}

fn rows(max_len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn r2_is_order_and_affine_invariant(truth in rows(12), noise in rows(12), s in 0.1f64..10.0, b in -3.0f64..3.0) {
        let n = truth.len().min(noise.len());
        let truth = &truth[..n];
        let pred: Vec<Vec<f64>> = truth.iter().zip(&noise).map(|(t, e)| t.iter().zip(e).map(|(t, e)| t + 0.1 * e).collect()).collect();
        let Ok(base) = r2_score(truth, &pred) else { return Ok(()) };
        let rev_t: Vec<_> = truth.iter().rev().cloned().collect();
        let rev_p: Vec<_> = pred.iter().rev().cloned().collect();
        prop_assert!((r2_score(&rev_t, &rev_p).unwrap() - base).abs() < 1e-10);
        let map = |v: &[Vec<f64>]| -> Vec<Vec<f64>> { v.iter().map(|r| r.iter().map(|x| s * x + b).collect()).collect() };
        prop_assert!((r2_score(&map(truth), &map(&pred)).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn logscore_is_order_invariant_and_rewards_sharper_correct_means(truth in rows(10), v in 0.1f64..2.0) {
        let vars = vec![vec![v; 3]; truth.len()];
        let ls = logscore(&truth, &truth, &vars).unwrap();
        let rev: Vec<_> = truth.iter().rev().cloned().collect();
        prop_assert!((logscore(&rev, &rev, &vars).unwrap() - ls).abs() < 1e-10);
        let sharper = vec![vec![0.5 * v; 3]; truth.len()];
        prop_assert!(logscore(&truth, &truth, &sharper).unwrap() > ls);
    }

    #[test]
    fn ks_statistic_is_a_symmetric_distance(a in prop::collection::vec(-3.0f64..3.0, 1..40), b in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let d = ks_statistic(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - ks_statistic(&b, &a)).abs() < 1e-15);
        prop_assert_eq!(ks_statistic(&a, &a), 0.0);
    }
}

#[test]
fn kde_integrates_to_one() {
    let s: Vec<f64> = (0..500).map(|i| ((i as f64) * 0.61).sin()).collect();
    let bw = silverman_bandwidth(&s);
    let pts: Vec<f64> = (0..4001).map(|i| -3.0 + 6.0 * i as f64 / 4000.0).collect();
    let dens = kde(&s, &pts, bw);
    let integral: f64 = dens.iter().sum::<f64>() * 6.0 / 4000.0;
    assert!((integral - 1.0).abs() < 1e-3, "{integral}");
}
