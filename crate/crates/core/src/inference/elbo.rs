//! Reparametrized Monte Carlo estimates of the evidence lower bound and its
//! gradient with respect to every optimized quantity.

use rayon::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::BoundaryCoeffs;
use crate::genmodel::{Model, ModelParams};
use crate::rng;
use crate::vobs::Precision;

use super::data::{Datasets, PreparedVirtual};
use super::gaussian::{entropy, kl_std_normal, neg_kl_std_normal_grad};
use super::state::{LocalLayout, UnlabeledFactors, VariationalState};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 8;

/// The ELBO split by data type.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboParts {
    pub unlabeled: f64,
    pub labeled: f64,
    pub virtual_: f64,
    pub prior: f64,
}

impl ElboParts {
    pub fn total(&self) -> f64 {
        self.unlabeled + self.labeled + self.virtual_ + self.prior
    }

    fn add(&mut self, o: &ElboParts) {
        self.unlabeled += o.unlabeled;
        self.labeled += o.labeled;
        self.virtual_ += o.virtual_;
        self.prior += o.prior;
    }
}

/// Gradient of the estimate, laid out like [`VariationalState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub theta: Vec<f64>,
    pub labeled: Vec<f64>,
    pub virtual_: Vec<f64>,
    /// Per-datum blocks, or empty when amortized.
    pub unlabeled: Vec<f64>,
    /// Encoder parameters, or empty when not amortized.
    pub encoder: Vec<f64>,
}

/// Fixed ingredients of the objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub model: &'a Model,
    pub data: &'a Datasets,
    pub prepared: &'a [PreparedVirtual],
    pub mc_samples: usize,
    /// Standard deviation of the isotropic Gaussian prior on θ; infinite for flat.
    pub prior_scale: f64,
    /// Weight of each unlabeled datum in the full objective.
    pub unlabeled_weight: f64,
    pub seed: u64,
}

/// Which terms to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub labeled: bool,
    pub virtual_: bool,
    /// Unlabeled indices in the minibatch (rescaled to the full set).
    pub unlabeled: Vec<usize>,
    pub prior: bool,
}

impl Selection {
    pub fn all(data: &Datasets) -> Self {
        Self { labeled: true, virtual_: true, unlabeled: (0..data.unlabeled.len()).collect(), prior: true }
    }
}

#[derive(Debug, Clone, Copy)]
enum Task {
    Labeled(usize),
    Virtual(usize),
    Unlabeled(usize),
}

enum Target<'a> {
    Observed(&'a [f64]),
    Moments(&'a [f64], &'a [f64]),
}

struct ChunkOut {
    parts: ElboParts,
    theta: Vec<f64>,
    encoder: Vec<f64>,
    locals: Vec<(Task, Vec<f64>)>,
}

/// Noise source for one datum at one step; shared by value and gradient.
pub fn datum_rng(seed: u64, step: u64, index: u64) -> rng::Rng {
    rng::item(rng::child_seed(seed, step), rng::streams::TRAIN, index)
}

fn normals<R: Rng>(n: usize, r: &mut R) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

/// `log p(θ)` and its gradient.
pub fn prior_logpdf_theta(params: &ModelParams, scale: f64) -> (f64, Vec<f64>) {
    if !scale.is_finite() {
        return (0.0, vec![0.0; params.values.len()]);
    }
    let s2 = scale * scale;
    let n = params.values.len() as f64;
    let sq: f64 = params.values.iter().map(|v| v * v).sum();
    let value = -0.5 * sq / s2 - 0.5 * n * (2.0 * std::f64::consts::PI * s2).ln();
    (value, params.values.iter().map(|v| -v / s2).collect())
}

#[allow(clippy::too_many_arguments)]
fn sample_term(
    model: &Model,
    params: &ModelParams,
    lay: &LocalLayout,
    x: &[f64],
    target: &Target,
    bc: &BoundaryCoeffs,
    local: &[f64],
    eps_z: &[f64],
    eps_x: &[f64],
    w: f64,
    theta: &mut [f64],
    g: &mut [f64],
) -> Result<f64> {
    let (zm, zr) = (&local[lay.z_mean()], &local[lay.z_log_std()]);
    let (xm, xr) = (&local[lay.xc_mean()], &local[lay.xc_log_std()]);
    let sz: Vec<f64> = zr.iter().map(|r| r.exp()).collect();
    let z: Vec<f64> = (0..lay.dim_z).map(|j| zm[j] + sz[j] * eps_z[j]).collect();
    let sx: Vec<f64> = xr.iter().map(|r| r.exp()).collect();
    let xc: Vec<f64> = (0..lay.dim_xc).map(|k| xm[k] + sx[k] * eps_x[k]).collect();
    let vx: Vec<f64> = sx.iter().map(|s| s * s).collect();
    let (lx, gz1) = model.x_loglik(params, &z, x, w, Some(&mut *theta))?;
    let (lc, gz2, gxm, gxv) = model.xc_expected_loglik(params, &z, xm, &vx, w, Some(&mut *theta))?;
    let (ly, gxc) = match target {
        Target::Observed(y) => model.y_expected_loglik(params, &xc, bc, y, None, w, Some(&mut *theta))?,
        Target::Moments(m, v) => model.y_expected_loglik(params, &xc, bc, m, Some(v), w, Some(&mut *theta))?,
    };
    for j in 0..lay.dim_z {
        let gz = gz1[j] + gz2[j];
        g[lay.z_mean().start + j] += gz;
        g[lay.z_log_std().start + j] += gz * eps_z[j] * sz[j];
    }
    for k in 0..lay.dim_xc {
        g[lay.xc_mean().start + k] += gxm[k] + gxc[k];
        g[lay.xc_log_std().start + k] += gxv[k] * 2.0 * vx[k] + gxc[k] * eps_x[k] * sx[k];
    }
    Ok(w * (lx + lc + ly))
}

/// `-KL(q(z) ‖ p(z))` and, for full blocks, the entropy of `q(X)`.
fn closed_terms(lay: &LocalLayout, local: &[f64], with_xc: bool, w: f64, g: &mut [f64]) -> f64 {
    let (zm, zr) = (&local[lay.z_mean()], &local[lay.z_log_std()]);
    let mut v = -kl_std_normal(zm, zr);
    let (gm, gr) = neg_kl_std_normal_grad(zm, zr);
    for j in 0..lay.dim_z {
        g[lay.z_mean().start + j] += w * gm[j];
        g[lay.z_log_std().start + j] += w * gr[j];
    }
    if with_xc {
        v += entropy(&local[lay.xc_log_std()]);
        for k in lay.xc_log_std() {
            g[k] += w;
        }
    }
    w * v
}

/// Terms of a virtual datum that depend only on `q(y)` and the precisions.
pub fn virtual_output_terms(state: &VariationalState, prepared: &PreparedVirtual, index: usize) -> Result<f64> {
    let f = state.output_factors.get(index).and_then(|f| f.as_ref()).ok_or_else(|| {
        Error::InvalidParameter(format!("output factor of virtual datum {index} not initialized"))
    })?;
    let mut v = f.entropy.unwrap_or(0.0);
    if let super::state::OutputFactorKind::Constrained(q) = &f.kind {
        for g in &prepared.groups {
            let m = g.gamma.nrows() as f64;
            match &g.precision {
                Precision::Exact => {}
                Precision::Fixed(l) => {
                    let r = &g.gamma * &q.mean - &g.alpha;
                    for (k, lk) in l.iter().enumerate() {
                        let row = g.gamma.rows(k, 1).clone_owned();
                        let e2 = r[k] * r[k] + q.trace_quadratic(&row);
                        v -= 0.5 * (LN_2PI - lk.ln() + lk * e2);
                    }
                }
                Precision::Learned(_) => {
                    let gp = state.gamma(g.kind).copied().ok_or_else(|| {
                        Error::InvalidParameter(format!("no precision posterior for {:?}", g.kind))
                    })?;
                    let e2 = q.residual_second_moment(&g.gamma, &g.alpha);
                    v -= 0.5 * (m * LN_2PI - m * gp.mean_log() + gp.mean() * e2);
                }
            }
        }
    }
    if let (Some(e), super::state::OutputFactorKind::Diagonal(_)) = (&prepared.energy, &f.kind) {
        // E[-τV(y)] for a diagonal q: -τ(V(μ) + ½ Σ K_ii σ_i²)
        let k = e.system.stiffness();
        let mut tr = 0.0;
        for (i, j, val) in k.triplet_iter() {
            if i == j {
                tr += val * f.var[i];
            }
        }
        v -= e.tau * (e.system.energy(&f.mean) + 0.5 * tr);
    }
    Ok(v)
}

/// ELBO estimate and gradient at `step`. Noise depends only on
/// `(seed, step, datum)`, so repeated calls see the same draws.
pub fn estimate(obj: &Objective, state: &VariationalState, step: u64, sel: &Selection) -> Result<(ElboParts, ElboGradient)> {
    let model = obj.model;
    let data = obj.data;
    let lay = LocalLayout::for_model(model);
    let k_mc = obj.mc_samples.max(1);
    let n_l = data.labeled.len();
    let n_o = data.virtual_.len();
    let n_u = data.unlabeled.len();
    let p = model.num_params();

    let mut tasks = Vec::new();
    if sel.labeled {
        tasks.extend((0..n_l).map(Task::Labeled));
    }
    if sel.virtual_ {
        tasks.extend((0..n_o).map(Task::Virtual));
    }
    tasks.extend(sel.unlabeled.iter().map(|&i| Task::Unlabeled(i)));
    let batch_scale = if sel.unlabeled.is_empty() {
        0.0
    } else {
        obj.unlabeled_weight * n_u as f64 / sel.unlabeled.len() as f64
    };
    let encoder = state.encoder();
    let enc_len = encoder.map_or(0, |e| e.num_params());

    let run_chunk = |chunk: &[Task]| -> Result<ChunkOut> {
        let mut out = ChunkOut {
            parts: ElboParts::default(),
            theta: vec![0.0; p],
            encoder: vec![0.0; enc_len],
            locals: Vec::with_capacity(chunk.len()),
        };
        for &task in chunk {
            match task {
                Task::Labeled(i) => {
                    let d = &data.labeled[i];
                    let local = &state.labeled[i * lay.full()..(i + 1) * lay.full()];
                    let mut g = vec![0.0; lay.full()];
                    let mut r = datum_rng(obj.seed, step, i as u64);
                    let mut v = 0.0;
                    for _ in 0..k_mc {
                        let ez = normals(lay.dim_z, &mut r);
                        let ex = normals(lay.dim_xc, &mut r);
                        v += sample_term(
                            model,
                            &state.params,
                            &lay,
                            &d.x,
                            &Target::Observed(&d.y),
                            &d.bc,
                            local,
                            &ez,
                            &ex,
                            1.0 / k_mc as f64,
                            &mut out.theta,
                            &mut g,
                        )?;
                    }
                    v += closed_terms(&lay, local, true, 1.0, &mut g);
                    out.parts.labeled += v;
                    out.locals.push((task, g));
                }
                Task::Virtual(i) => {
                    let d = &data.virtual_[i];
                    let qy = state.output_factors.get(i).and_then(|f| f.as_ref()).ok_or_else(|| {
                        Error::InvalidParameter(format!("output factor of virtual datum {i} not initialized"))
                    })?;
                    let local = &state.virtual_[i * lay.full()..(i + 1) * lay.full()];
                    let mut g = vec![0.0; lay.full()];
                    let mut r = datum_rng(obj.seed, step, (n_l + i) as u64);
                    let mut v = 0.0;
                    for _ in 0..k_mc {
                        let ez = normals(lay.dim_z, &mut r);
                        let ex = normals(lay.dim_xc, &mut r);
                        v += sample_term(
                            model,
                            &state.params,
                            &lay,
                            &d.x,
                            &Target::Moments(&qy.mean, &qy.var),
                            &d.bc,
                            local,
                            &ez,
                            &ex,
                            1.0 / k_mc as f64,
                            &mut out.theta,
                            &mut g,
                        )?;
                    }
                    v += closed_terms(&lay, local, true, 1.0, &mut g);
                    v += virtual_output_terms(state, &obj.prepared[i], i)?;
                    out.parts.virtual_ += v;
                    out.locals.push((task, g));
                }
                Task::Unlabeled(i) => {
                    let d = &data.unlabeled[i];
                    let mut r = datum_rng(obj.seed, step, (n_l + n_o + i) as u64);
                    let (local, tape) = match &state.unlabeled {
                        UnlabeledFactors::PerDatum(v) => (v[i * lay.latent()..(i + 1) * lay.latent()].to_vec(), None),
                        UnlabeledFactors::Amortized(enc) => {
                            let (o, t) = enc.forward(&d.x)?;
                            (o, Some(t))
                        }
                    };
                    let mut g = vec![0.0; lay.latent()];
                    let sz: Vec<f64> = local[lay.z_log_std()].iter().map(|r| r.exp()).collect();
                    let mut v = 0.0;
                    let w = batch_scale / k_mc as f64;
                    for _ in 0..k_mc {
                        let ez = normals(lay.dim_z, &mut r);
                        let z: Vec<f64> = (0..lay.dim_z).map(|j| local[j] + sz[j] * ez[j]).collect();
                        let (lx, gz) = model.x_loglik(&state.params, &z, &d.x, w, Some(&mut out.theta))?;
                        v += w * lx;
                        for j in 0..lay.dim_z {
                            g[j] += gz[j];
                            g[lay.dim_z + j] += gz[j] * ez[j] * sz[j];
                        }
                    }
                    v += closed_terms(&lay, &local, false, batch_scale, &mut g);
                    out.parts.unlabeled += v;
                    match (tape, encoder) {
                        (Some(t), Some(enc)) => {
                            enc.backward_into(&enc.params, t, &g, &mut out.encoder)?;
                        }
                        _ => out.locals.push((task, g)),
                    }
                }
            }
        }
        Ok(out)
    };

    let chunks: Vec<ChunkOut> = tasks.par_chunks(CHUNK).map(run_chunk).collect::<Result<_>>()?;

    let mut parts = ElboParts::default();
    let mut grad = ElboGradient {
        theta: vec![0.0; p],
        labeled: vec![0.0; state.labeled.len()],
        virtual_: vec![0.0; state.virtual_.len()],
        unlabeled: match &state.unlabeled {
            UnlabeledFactors::PerDatum(v) => vec![0.0; v.len()],
            UnlabeledFactors::Amortized(_) => Vec::new(),
        },
        encoder: vec![0.0; enc_len],
    };
    for c in chunks {
        parts.add(&c.parts);
        for (a, b) in grad.theta.iter_mut().zip(&c.theta) {
            *a += b;
        }
        for (a, b) in grad.encoder.iter_mut().zip(&c.encoder) {
            *a += b;
        }
        for (task, g) in c.locals {
            let (dst, at) = match task {
                Task::Labeled(i) => (&mut grad.labeled, i * lay.full()),
                Task::Virtual(i) => (&mut grad.virtual_, i * lay.full()),
                Task::Unlabeled(i) => (&mut grad.unlabeled, i * lay.latent()),
            };
            for (a, b) in dst[at..at + g.len()].iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    if sel.prior {
        let (v, g) = prior_logpdf_theta(&state.params, obj.prior_scale);
        parts.prior = v;
        for (a, b) in grad.theta.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((parts, grad))
}
