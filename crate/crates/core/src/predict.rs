//! Predictive posterior for new inputs, accuracy metrics and propagation of
//! input uncertainty through the trained surrogate.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{FemSystem, Mesh};
use crate::field::{BcScenario, BoundaryCoeffs, FieldSample, GrfSampler};
use crate::genmodel::{gaussian_draw, Model, ModelParams};
use crate::inference::{kl_std_normal, neg_kl_std_normal_grad, Adam, AdamConfig, VariationalState};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian `q*(z)` for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZPosterior {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Estimate of `E_q log p(x|z) - KL(q ‖ p)` at the returned factor.
    pub elbo: f64,
    /// False when the plateau test never fired within the budget.
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InferMode {
    /// Encoder output.
    Amortized,
    /// Adam on the per-input bound with θ fixed.
    Optimize { iterations: usize, learning_rate: f64, mc_samples: usize },
}

impl Default for InferMode {
    fn default() -> Self {
        InferMode::Optimize { iterations: 300, learning_rate: 5e-2, mc_samples: 4 }
    }
}

fn unlabeled_bound(
    model: &Model,
    params: &ModelParams,
    x: &[f64],
    mean: &[f64],
    log_std: &[f64],
    eps: &[Vec<f64>],
    grad: Option<(&mut [f64], &mut [f64])>,
) -> Result<f64> {
    let k = eps.len().max(1) as f64;
    let sd: Vec<f64> = log_std.iter().map(|r| r.exp()).collect();
    let mut v = -kl_std_normal(mean, log_std);
    let (gm, gr) = neg_kl_std_normal_grad(mean, log_std);
    let mut g_mean = gm;
    let mut g_log = gr;
    for e in eps {
        let z: Vec<f64> = (0..mean.len()).map(|j| mean[j] + sd[j] * e[j]).collect();
        let (lx, gz) = model.x_loglik(params, &z, x, 1.0 / k, None)?;
        v += lx / k;
        for j in 0..mean.len() {
            g_mean[j] += gz[j];
            g_log[j] += gz[j] * e[j] * sd[j];
        }
    }
    if let Some((a, b)) = grad {
        a.copy_from_slice(&g_mean);
        b.copy_from_slice(&g_log);
    }
    Ok(v)
}

/// `q*(z)` for a new input. The optimize mode starts from the encoder output
/// when there is one and from the prior otherwise; no fine-grid solves occur.
pub fn infer_z(model: &Model, state: &VariationalState, x: &[f64], mode: InferMode, seed: u64) -> Result<ZPosterior> {
    let dz = model.dim_z();
    if x.len() != model.dim_x() {
        return Err(Error::DimensionMismatch { expected: model.dim_x(), got: x.len() });
    }
    let (mut mean, mut log_std) = match state.encoder() {
        Some(enc) => {
            let out = enc.eval_with(&enc.params, x)?;
            (out[..dz].to_vec(), out[dz..].to_vec())
        }
        None => (vec![0.0; dz], vec![0.0; dz]),
    };
    let mut r_eval = rng::item(seed, rng::streams::EVAL, u64::MAX);
    let draw = |n: usize, r: &mut rng::Rng| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dz).map(|_| r.sample(StandardNormal)).collect()).collect()
    };
    match mode {
        InferMode::Amortized => {
            if state.encoder().is_none() {
                return Err(Error::InvalidParameter("amortized inference needs a trained encoder".into()));
            }
            let eps = draw(16, &mut r_eval);
            let elbo = unlabeled_bound(model, &state.params, x, &mean, &log_std, &eps, None)?;
            Ok(ZPosterior { mean, log_std, elbo, converged: true })
        }
        InferMode::Optimize { iterations, learning_rate, mc_samples } => {
            let mut opt_m = Adam::new(dz, AdamConfig { learning_rate, ..AdamConfig::default() });
            let mut opt_s = Adam::new(dz, AdamConfig { learning_rate, ..AdamConfig::default() });
            let mut gm = vec![0.0; dz];
            let mut gs = vec![0.0; dz];
            let window = 25;
            let mut hist = Vec::with_capacity(iterations);
            let mut converged = false;
            for t in 0..iterations {
                let mut r = rng::item(seed, rng::streams::EVAL, t as u64);
                let eps = draw(mc_samples.max(1), &mut r);
                let v = unlabeled_bound(model, &state.params, x, &mean, &log_std, &eps, Some((&mut gm, &mut gs)))?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { iteration: t, diagnostic: "per-input bound".into() });
                }
                opt_m.step(&mut mean, &gm);
                opt_s.step(&mut log_std, &gs);
                hist.push(v);
                if crate::inference::plateaued(&hist, window, 1e-4) {
                    converged = true;
                    break;
                }
            }
            let eps = draw(16, &mut r_eval);
            let elbo = unlabeled_bound(model, &state.params, x, &mean, &log_std, &eps, None)?;
            Ok(ZPosterior { mean, log_std, elbo, converged })
        }
    }
}

/// Samples from the predictive posterior with their moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSamples {
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Sample variance for two or more samples, otherwise `S_y`.
    pub var: Vec<f64>,
}

/// One draw `z -> X -> Y -> y` through the coarse model.
pub fn predictive_sample<R: Rng + ?Sized>(
    model: &Model,
    params: &ModelParams,
    q: &ZPosterior,
    bc: &BoundaryCoeffs,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let z: Vec<f64> = q
        .mean
        .iter()
        .zip(&q.log_std)
        .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (mc, vc) = model.coarse_map(&z, params)?;
    let xc = gaussian_draw(&mc, &vc, rng);
    let yc = model.cgm_forward(&xc, bc)?.y;
    let (my, vy) = model.output_map(&yc, params)?;
    Ok(gaussian_draw(&my, &vy, rng))
}

/// `k` predictive draws; draw `j` uses its own stream so the result does not
/// depend on scheduling.
pub fn predictive_posterior(
    model: &Model,
    params: &ModelParams,
    q: &ZPosterior,
    bc: &BoundaryCoeffs,
    k: usize,
    seed: u64,
) -> Result<PredictiveSamples> {
    if k == 0 {
        return Err(Error::InvalidParameter("at least one predictive sample".into()));
    }
    let samples: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|j| predictive_sample(model, params, q, bc, &mut rng::item(seed, rng::streams::EVAL, j as u64)))
        .collect::<Result<_>>()?;
    let n = samples[0].len();
    let mut mean = vec![0.0; n];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / k as f64;
        }
    }
    let var = if k >= 2 {
        let mut var = vec![0.0; n];
        for s in &samples {
            for i in 0..n {
                var[i] += (s[i] - mean[i]).powi(2) / (k - 1) as f64;
            }
        }
        var
    } else {
        params.var_y()
    };
    Ok(PredictiveSamples { samples, mean, var })
}

fn check_pairs(truth: &[Vec<f64>], other: &[Vec<f64>]) -> Result<()> {
    if truth.len() != other.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: other.len() });
    }
    for (a, b) in truth.iter().zip(other) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
        }
    }
    Ok(())
}

/// Coefficient of determination of predictive means.
pub fn r2_score(truth: &[Vec<f64>], means: &[Vec<f64>]) -> Result<f64> {
    check_pairs(truth, means)?;
    if truth.len() < 2 {
        return Err(Error::DegenerateValidation);
    }
    let n = truth[0].len();
    let mut avg = vec![0.0; n];
    for y in truth {
        for (a, v) in avg.iter_mut().zip(y) {
            *a += v / truth.len() as f64;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (y, m) in truth.iter().zip(means) {
        for i in 0..n {
            num += (y[i] - m[i]).powi(2);
            den += (y[i] - avg[i]).powi(2);
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateValidation);
    }
    Ok(1.0 - num / den)
}

/// Average Gaussian log-density of each output under the predictive moments.
pub fn logscore(truth: &[Vec<f64>], means: &[Vec<f64>], vars: &[Vec<f64>]) -> Result<f64> {
    check_pairs(truth, means)?;
    check_pairs(truth, vars)?;
    if truth.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut total = 0.0;
    for ((y, m), v) in truth.iter().zip(means).zip(vars) {
        total += datum_logscore(y, m, v)?;
    }
    Ok(total / truth.len() as f64)
}

/// `log N(y | mean, diag var)`.
pub fn datum_logscore(y: &[f64], mean: &[f64], var: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for i in 0..y.len() {
        if !(var[i] > 0.0) {
            return Err(Error::NonPositiveVariance(var[i]));
        }
        s -= 0.5 * (LN_2PI + var[i].ln() + (y[i] - mean[i]).powi(2) / var[i]);
    }
    Ok(s)
}

/// Value at the domain center; a grid node for even grid sizes.
pub fn center_value(mesh: &Mesh, y: &[f64]) -> Result<f64> {
    mesh.center_node()
        .map(|n| y[n])
        .ok_or_else(|| Error::InvalidSize(mesh.grid_size()))
}

/// Binned density over a shared range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

/// Normalized histogram on `[lo, hi]` with `bins` equal bins.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|b| lo + b as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let b = (((s - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let norm = samples.len().max(1) as f64 * width;
    Histogram { edges, density: counts.iter().map(|c| *c as f64 / norm).collect() }
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 1.0;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1.0);
        let (i, f) = (pos.floor() as usize, pos.fract());
        sorted[i] + f * (sorted[(i + 1).min(sorted.len() - 1)] - sorted[i])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-12_f64.max(mean.abs() * 1e-6)
    }
}

/// Gaussian kernel density at `points`.
pub fn kde(samples: &[f64], points: &[f64], bandwidth: f64) -> Vec<f64> {
    let n = samples.len().max(1) as f64;
    let c = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    points
        .iter()
        .map(|p| c * samples.iter().map(|s| (-0.5 * ((p - s) / bandwidth).powi(2)).exp()).sum::<f64>())
        .collect()
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Density summary of a set of QoI samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub histogram: Histogram,
    pub points: Vec<f64>,
    pub kde: Vec<f64>,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqResult {
    pub surrogate: Vec<f64>,
    pub reference: Option<Vec<f64>>,
    pub surrogate_density: Density,
    pub reference_density: Option<Density>,
    pub ks: Option<f64>,
}

pub const UQ_BINS: usize = 64;

fn density(samples: &[f64], lo: f64, hi: f64) -> Density {
    let histogram = histogram(samples, lo, hi, UQ_BINS);
    let points: Vec<f64> = histogram.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let bandwidth = silverman_bandwidth(samples);
    let kde = kde(samples, &points, bandwidth);
    Density { histogram, points, kde, bandwidth }
}

/// Options for [`propagate_uq`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UqOptions {
    pub count: usize,
    pub mode: InferMode,
    pub reference: bool,
    pub seed: u64,
}

/// Pushes input draws, with boundary data from `bc`, through the surrogate
/// (one predictive sample each) and optionally through the fine model.
pub fn propagate_uq(
    model: &Model,
    state: &VariationalState,
    sampler: &GrfSampler,
    bc: BcScenario,
    opts: UqOptions,
) -> Result<UqResult> {
    let fine = model.fine_mesh();
    let draws: Vec<(f64, Option<f64>)> = (0..opts.count)
        .into_par_iter()
        .map(|n| -> Result<(f64, Option<f64>)> {
            let mut r = rng::item(opts.seed, rng::streams::UQ, n as u64);
            let lambda = sampler.sample(&mut r).lambda;
            let bc = bc.sample(&mut r);
            let item_seed = rng::child_seed(opts.seed, n as u64);
            let q = infer_z(model, state, &lambda, opts.mode, item_seed)?;
            let y = predictive_sample(model, &state.params, &q, &bc, &mut r)?;
            let s = center_value(fine, &y)?;
            let reference = if opts.reference {
                let f = FieldSample::from_lambda(lambda);
                let sys = FemSystem::new(fine.clone(), f.kappa, bc, model.source())?;
                Some(center_value(fine, &sys.solve()?.y)?)
            } else {
                None
            };
            Ok((s, reference))
        })
        .collect::<Result<_>>()?;
    let surrogate: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let reference: Option<Vec<f64>> = opts.reference.then(|| draws.iter().filter_map(|d| d.1).collect());
    let pooled = surrogate.iter().chain(reference.iter().flatten());
    let (lo, hi) = pooled.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let surrogate_density = density(&surrogate, lo, hi);
    let reference_density = reference.as_ref().map(|r| density(r, lo, hi));
    let ks = reference.as_ref().map(|r| ks_statistic(&surrogate, r));
    Ok(UqResult { surrogate, reference, surrogate_density, reference_density, ks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_hand_example() {
        let truth = vec![vec![0.0], vec![2.0]];
        let mu = vec![vec![0.0], vec![1.0]];
        assert!((r2_score(&truth, &mu).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(r2_score(&truth, &truth).unwrap(), 1.0);
        assert_eq!(r2_score(&truth, &[vec![1.0], vec![1.0]]).unwrap(), 0.0);
        assert!(matches!(r2_score(&[vec![1.0], vec![1.0]], &truth), Err(Error::DegenerateValidation)));
    }

    #[test]
    fn logscore_unit_variance() {
        let y = vec![vec![1.0, 2.0, 3.0]];
        let ls = logscore(&y, &y, &[vec![1.0; 3]]).unwrap();
        assert!((ls + 1.5 * LN_2PI).abs() < 1e-12);
        assert!(logscore(&y, &y, &[vec![0.5; 3]]).unwrap() > ls);
        assert!(matches!(logscore(&y, &y, &[vec![0.0; 3]]), Err(Error::NonPositiveVariance(_))));
    }

    #[test]
    fn ks_extremes() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        assert_eq!(ks_statistic(&a, &[10.0, 11.0]), 1.0);
        let d = ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[3.5, 4.5]);
        assert!((d - 0.75).abs() < 1e-15);
    }

    #[test]
    fn histogram_integrates_to_one() {
        let s: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let h = histogram(&s, -1.0, 1.0, 64);
        let w = h.edges[1] - h.edges[0];
        assert!((h.density.iter().sum::<f64>() * w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kde_integrates_to_one() {
        let s = [0.0, 0.3, -0.2, 1.0];
        let h = silverman_bandwidth(&s);
        let pts: Vec<f64> = (0..4001).map(|i| -5.0 + i as f64 * 0.0025).collect();
        let total: f64 = kde(&s, &pts, h).iter().sum::<f64>() * 0.0025;
        assert!((total - 1.0).abs() < 1e-6);
    }
}
