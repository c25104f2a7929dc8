//! Stochastic variational training with periodic closed-form output updates.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::approximators::{Activation, Approximator, Architecture};
use crate::error::{Error, Result};
use crate::genmodel::{gaussian_draw, Model};
use crate::rng;
use crate::vobs::{ConstraintKind, GammaPosterior, Precision, GAMMA_PRIOR};

use super::adam::{Adam, AdamConfig};
use super::closed_form::{update_precision_gamma, update_qy_closedform, DEFAULT_CONSTRAINT_CAP};
use super::data::{Datasets, PreparedVirtual};
use super::elbo::{estimate, ElboParts, Objective, Selection};
use super::energy::{update_qy_energy, DEFAULT_BLOCK};
use super::gaussian::entropy_var;
use super::state::{LocalLayout, OutputFactor, OutputFactorKind, UnlabeledFactors, VariationalState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Learning rate for per-datum variational parameters.
    pub local_learning_rate: f64,
    pub mc_samples: usize,
    pub iterations: usize,
    /// Unlabeled inputs per step; `0` uses all of them.
    pub unlabeled_batch: usize,
    /// Weight of each unlabeled datum; defaults to `N_l / N_u`.
    pub unlabeled_weight: Option<f64>,
    /// Scale of the Gaussian prior on θ; `None` is flat.
    pub prior_scale: Option<f64>,
    /// Energy temperature schedule `(start, end)`, log-linear in the step.
    pub tau_schedule: Option<(f64, f64)>,
    /// Steps between output-factor and precision updates.
    pub update_every: usize,
    /// Draws of `X` averaged to form the prior mean of `q(y)`.
    pub h_samples: usize,
    pub energy_sweeps: usize,
    pub energy_block: usize,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Use an encoder for unlabeled `q(z)` instead of per-datum factors.
    pub amortized: bool,
    pub encoder_hidden: Vec<usize>,
    pub constraint_cap: usize,
    pub init_log_std_z: f64,
    pub init_log_std_xc: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            local_learning_rate: 1e-2,
            mc_samples: 1,
            iterations: 20_000,
            unlabeled_batch: 0,
            unlabeled_weight: None,
            prior_scale: Some(10.0),
            tau_schedule: Some((1.0, 1e4)),
            update_every: 50,
            h_samples: 4,
            energy_sweeps: 50,
            energy_block: DEFAULT_BLOCK,
            plateau_window: 500,
            plateau_tol: 1e-4,
            amortized: false,
            encoder_hidden: vec![64],
            constraint_cap: DEFAULT_CONSTRAINT_CAP,
            init_log_std_z: -1.0,
            init_log_std_xc: -2.0,
            log_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub elbo: f64,
    pub parts: LogParts,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogParts {
    pub unlabeled: f64,
    pub labeled: f64,
    pub virtual_: f64,
    pub prior: f64,
}

impl From<ElboParts> for LogParts {
    fn from(p: ElboParts) -> Self {
        Self { unlabeled: p.unlabeled, labeled: p.labeled, virtual_: p.virtual_, prior: p.prior }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Iterations,
    Plateau,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: VariationalState,
    pub log: Vec<LogEntry>,
    pub stop: StopReason,
}

/// Input moments over all pixels of all inputs.
fn input_moments(data: &Datasets) -> (f64, f64) {
    let mut n = 0usize;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for x in data.all_inputs() {
        for v in x {
            n += 1;
            s += v;
            s2 += v * v;
        }
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let m = s / n as f64;
    (m, (s2 / n as f64 - m * m).max(1e-6))
}

/// Mean of a fine input over each coarse cell.
pub fn coarse_average(model: &Model, x: &[f64]) -> Vec<f64> {
    let df = model.fine_mesh().grid_size();
    let dc = model.coarse_mesh().grid_size();
    let mut sum = vec![0.0; dc * dc];
    let mut cnt = vec![0usize; dc * dc];
    for row in 0..df {
        for col in 0..df {
            let k = (row * dc / df) * dc + col * dc / df;
            sum[k] += x[row * df + col];
            cnt[k] += 1;
        }
    }
    sum.iter().zip(&cnt).map(|(s, c)| s / (*c).max(1) as f64).collect()
}

fn full_block(model: &Model, x: &[f64], cfg: &TrainConfig) -> Vec<f64> {
    let lay = LocalLayout::for_model(model);
    let mut b = vec![0.0; lay.full()];
    b[lay.z_log_std()].fill(cfg.init_log_std_z);
    b[lay.xc_mean()].copy_from_slice(&coarse_average(model, x));
    b[lay.xc_log_std()].fill(cfg.init_log_std_xc);
    b
}

/// Encoder `x -> [μ_z, log σ_z]`.
pub fn encoder_architecture(model: &Model, hidden: &[usize]) -> Architecture {
    Architecture::mlp(model.dim_x(), hidden, 2 * model.dim_z(), Activation::Tanh)
}

/// Fresh variational state for `data`.
pub fn init_state(model: &Model, data: &Datasets, cfg: &TrainConfig) -> Result<VariationalState> {
    let (xm, xv) = input_moments(data);
    let mut r = rng::stream(cfg.seed, rng::streams::INIT);
    let params = model.init_params(&mut r, xm, xv);
    let lay = LocalLayout::for_model(model);
    let labeled = data.labeled.iter().flat_map(|d| full_block(model, &d.x, cfg)).collect();
    let virtual_ = data.virtual_.iter().flat_map(|d| full_block(model, &d.x, cfg)).collect();
    let unlabeled = if cfg.amortized {
        UnlabeledFactors::Amortized(Approximator::init(encoder_architecture(model, &cfg.encoder_hidden), &mut r)?)
    } else {
        let mut v = vec![0.0; data.unlabeled.len() * lay.latent()];
        for b in v.chunks_mut(lay.latent()) {
            b[lay.z_log_std()].fill(cfg.init_log_std_z);
        }
        UnlabeledFactors::PerDatum(v)
    };
    let mut gammas: Vec<(ConstraintKind, GammaPosterior)> = Vec::new();
    for d in &data.virtual_ {
        if let super::data::VirtualObservation::Linear(b) = &d.obs {
            for g in &b.groups {
                if let Precision::Learned(init) = &g.precision {
                    if !gammas.iter().any(|(k, _)| *k == g.kind) {
                        gammas.push((g.kind, *init));
                    }
                }
            }
        }
    }
    Ok(VariationalState {
        params,
        labeled,
        virtual_,
        unlabeled,
        gammas,
        output_factors: vec![None; data.virtual_.len()],
        iteration: 0,
    })
}

/// Temperature at `step` of `total`.
pub fn tau_at(schedule: (f64, f64), step: usize, total: usize) -> f64 {
    let t = if total <= 1 { 1.0 } else { (step as f64 / (total - 1) as f64).min(1.0) };
    (schedule.0.ln() + t * (schedule.1.ln() - schedule.0.ln())).exp()
}

/// Recomputes every `q(y)` from the current `q(X)` and θ, with current precisions.
pub fn update_output_factors(
    model: &Model,
    data: &Datasets,
    prepared: &[PreparedVirtual],
    state: &mut VariationalState,
    cfg: &TrainConfig,
    step: u64,
) -> Result<()> {
    let lay = LocalLayout::for_model(model);
    let mesh = model.fine_mesh();
    let free = mesh.free_nodes();
    let var_y = state.params.var_y();
    let s_inv: Vec<f64> = free.iter().map(|&i| 1.0 / var_y[i]).collect();
    let n_samples = cfg.h_samples.max(1);
    let factors: Vec<OutputFactor> = (0..data.virtual_.len())
        .map(|i| -> Result<OutputFactor> {
            let d = &data.virtual_[i];
            let p = &prepared[i];
            let block = &state.virtual_[i * lay.full()..(i + 1) * lay.full()];
            let xm = &block[lay.xc_mean()];
            let xv: Vec<f64> = block[lay.xc_log_std()].iter().map(|r| (2.0 * r).exp()).collect();
            let mut r = rng::item(rng::child_seed(cfg.seed, step), rng::streams::CONSTRAINTS, i as u64);
            let mut h = vec![0.0; mesh.num_nodes()];
            for _ in 0..n_samples {
                let xc = gaussian_draw(xm, &xv, &mut r);
                for (a, b) in h.iter_mut().zip(model.predict_mean(&state.params, &xc, &d.bc)?) {
                    *a += b / n_samples as f64;
                }
            }
            let h_free: Vec<f64> = free.iter().map(|&j| h[j]).collect();
            let mut mean = p.dirichlet.clone();
            let mut var = vec![0.0; mesh.num_nodes()];
            if let Some(e) = &p.energy {
                let init = state.output_factors[i]
                    .as_ref()
                    .and_then(|f| match &f.kind {
                        OutputFactorKind::Diagonal(q) => Some(q.mean.clone()),
                        OutputFactorKind::Constrained(_) => None,
                    });
                let q = update_qy_energy(e, &s_inv, &h_free, init.as_deref(), cfg.energy_sweeps, cfg.energy_block, &mut r)?;
                for (k, &j) in free.iter().enumerate() {
                    mean[j] = q.mean[k];
                    var[j] = q.var[k];
                }
                let entropy = Some(entropy_var(&q.var));
                return Ok(OutputFactor { mean, var, entropy, kind: OutputFactorKind::Diagonal(q) });
            }
            let m = p.num_constraints();
            let mut gamma = DMatrix::zeros(m, free.len());
            let mut alpha = DVector::zeros(m);
            let mut inv = Vec::with_capacity(m);
            let mut at = 0;
            for g in &p.groups {
                let rows = g.gamma.nrows();
                gamma.rows_mut(at, rows).copy_from(&g.gamma);
                alpha.rows_mut(at, rows).copy_from(&g.alpha);
                match &g.precision {
                    Precision::Exact => inv.extend(std::iter::repeat_n(0.0, rows)),
                    Precision::Fixed(l) => inv.extend(l.iter().map(|v| 1.0 / v)),
                    Precision::Learned(_) => {
                        let lam = state.gamma(g.kind).map_or(1.0, |gp| gp.mean());
                        inv.extend(std::iter::repeat_n(1.0 / lam, rows));
                    }
                }
                at += rows;
            }
            let q = update_qy_closedform(&gamma, &alpha, &inv, &s_inv, &h_free, cfg.constraint_cap)?;
            for (k, (&j, v)) in free.iter().zip(q.diag()).enumerate() {
                mean[j] = q.mean[k];
                var[j] = v;
            }
            Ok(OutputFactor { mean, var, entropy: q.entropy(), kind: OutputFactorKind::Constrained(q) })
        })
        .collect::<Result<_>>()?;
    state.output_factors = factors.into_iter().map(Some).collect();
    Ok(())
}

/// Conjugate update of every learned precision from the current `q(y)`.
pub fn update_precisions(prepared: &[PreparedVirtual], state: &mut VariationalState) -> Result<()> {
    let kinds: Vec<ConstraintKind> = state.gammas.iter().map(|(k, _)| *k).collect();
    for kind in kinds {
        let mut moments = Vec::new();
        let mut rows = Vec::new();
        for (i, p) in prepared.iter().enumerate() {
            let Some(OutputFactor { kind: OutputFactorKind::Constrained(q), .. }) = &state.output_factors[i] else {
                continue;
            };
            for g in p.groups.iter().filter(|g| g.kind == kind && matches!(g.precision, Precision::Learned(_))) {
                moments.push(q.residual_second_moment(&g.gamma, &g.alpha));
                rows.push(g.gamma.nrows());
            }
        }
        if rows.is_empty() {
            continue;
        }
        let g = update_precision_gamma(&moments, &rows, &GAMMA_PRIOR)?;
        state.set_gamma(kind, g);
    }
    Ok(())
}

fn refresh_outputs(
    model: &Model,
    data: &Datasets,
    prepared: &mut [PreparedVirtual],
    state: &mut VariationalState,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    if prepared.is_empty() {
        return Ok(());
    }
    if let Some(schedule) = cfg.tau_schedule {
        let tau = tau_at(schedule, step, cfg.iterations);
        for p in prepared.iter_mut() {
            if let Some(e) = p.energy.as_mut() {
                e.tau = tau;
            }
        }
    }
    update_output_factors(model, data, prepared, state, cfg, step as u64)?;
    if !state.gammas.is_empty() {
        update_precisions(prepared, state)?;
        update_output_factors(model, data, prepared, state, cfg, step as u64)?;
    }
    Ok(())
}

/// Sum of `KL(q(λ) ‖ p(λ))` over learned precisions.
pub fn precision_kl(state: &VariationalState) -> f64 {
    state.gammas.iter().map(|(_, g)| g.kl(&GAMMA_PRIOR)).sum()
}

/// Default weight of an unlabeled datum.
pub fn default_unlabeled_weight(data: &Datasets) -> f64 {
    if data.unlabeled.is_empty() {
        0.0
    } else if data.labeled.is_empty() {
        1.0
    } else {
        data.labeled.len() as f64 / data.unlabeled.len() as f64
    }
}

/// Maximizes the ELBO. With `resume`, continues from its iteration counter
/// with fresh optimizer moments.
pub fn train(model: &Model, data: &Datasets, cfg: &TrainConfig, resume: Option<VariationalState>) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut state = match resume {
        Some(s) => s,
        None => init_state(model, data, cfg)?,
    };
    let lay = LocalLayout::for_model(model);
    if state.params.values.len() != model.num_params()
        || state.labeled.len() != data.labeled.len() * lay.full()
        || state.virtual_.len() != data.virtual_.len() * lay.full()
    {
        return Err(Error::DimensionMismatch { expected: model.num_params(), got: state.params.values.len() });
    }
    let mut prepared = data
        .virtual_
        .iter()
        .map(|d| PreparedVirtual::new(model.fine_mesh(), d))
        .collect::<Result<Vec<_>>>()?;
    let local_cfg = AdamConfig { learning_rate: cfg.local_learning_rate, ..cfg.adam };
    let mut opt_theta = Adam::new(model.num_params(), cfg.adam);
    let mut opt_labeled = Adam::new(state.labeled.len(), local_cfg);
    let mut opt_virtual = Adam::new(state.virtual_.len(), local_cfg);
    let mut opt_unlabeled: Vec<Adam> = match &state.unlabeled {
        UnlabeledFactors::PerDatum(_) => (0..data.unlabeled.len()).map(|_| Adam::new(lay.latent(), local_cfg)).collect(),
        UnlabeledFactors::Amortized(e) => vec![Adam::new(e.num_params(), cfg.adam)],
    };
    let n_u = data.unlabeled.len();
    let batch = if cfg.unlabeled_batch == 0 { n_u } else { cfg.unlabeled_batch.min(n_u) };
    let w_u = cfg.unlabeled_weight.unwrap_or_else(|| default_unlabeled_weight(data));
    let start = state.iteration;
    let every = cfg.update_every.max(1);
    if start < cfg.iterations || state.output_factors.iter().any(|f| f.is_none()) {
        refresh_outputs(model, data, &mut prepared, &mut state, cfg, start)?;
    }
    let clock = Instant::now();
    let mut log = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut stop = StopReason::Iterations;
    for t in start..cfg.iterations {
        if t > start && t % every == 0 {
            refresh_outputs(model, data, &mut prepared, &mut state, cfg, t)?;
        }
        let unl: Vec<usize> = if batch == n_u {
            (0..n_u).collect()
        } else {
            let mut r = rng::item(cfg.seed, rng::streams::TRAIN, t as u64);
            let mut v = sample_indices(&mut r, n_u, batch).into_vec();
            v.sort_unstable();
            v
        };
        let obj = Objective {
            model,
            data,
            prepared: &prepared,
            mc_samples: cfg.mc_samples,
            prior_scale: cfg.prior_scale.unwrap_or(f64::INFINITY),
            unlabeled_weight: w_u,
            seed: cfg.seed,
        };
        let sel = Selection { labeled: true, virtual_: true, unlabeled: unl.clone(), prior: true };
        let (parts, grad) = estimate(&obj, &state, t as u64, &sel)?;
        let elbo = parts.total() - precision_kl(&state);
        if !elbo.is_finite() || grad.theta.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                diagnostic: format!(
                    "unlabeled {} labeled {} virtual {} prior {}",
                    parts.unlabeled, parts.labeled, parts.virtual_, parts.prior
                ),
            });
        }
        opt_theta.step(&mut state.params.values, &grad.theta);
        opt_labeled.step(&mut state.labeled, &grad.labeled);
        opt_virtual.step(&mut state.virtual_, &grad.virtual_);
        match &mut state.unlabeled {
            UnlabeledFactors::PerDatum(v) => {
                for &i in &unl {
                    let r = i * lay.latent()..(i + 1) * lay.latent();
                    opt_unlabeled[i].step(&mut v[r.clone()], &grad.unlabeled[r]);
                }
            }
            UnlabeledFactors::Amortized(e) => opt_unlabeled[0].step(&mut e.params, &grad.encoder),
        }
        state.iteration = t + 1;
        history.push(elbo);
        if cfg.log_every > 0 && (t % cfg.log_every == 0 || t + 1 == cfg.iterations) {
            log.push(LogEntry { iteration: t, elbo, parts: parts.into(), seconds: clock.elapsed().as_secs_f64() });
        }
        if plateaued(&history, cfg.plateau_window, cfg.plateau_tol) {
            stop = StopReason::Plateau;
            log.push(LogEntry { iteration: t, elbo, parts: parts.into(), seconds: clock.elapsed().as_secs_f64() });
            break;
        }
    }
    if !prepared.is_empty() {
        let last = state.iteration.min(cfg.iterations);
        refresh_outputs(model, data, &mut prepared, &mut state, cfg, last)?;
    }
    Ok(TrainOutcome { state, log, stop })
}

/// True when the mean of the last `window` values moved by less than `tol`
/// relative to the previous window.
pub fn plateaued(history: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || history.len() < 2 * window || history.len() % window != 0 {
        return false;
    }
    let n = history.len();
    let last: f64 = history[n - window..].iter().sum::<f64>() / window as f64;
    let prev: f64 = history[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
    (last - prev).abs() <= tol * prev.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_schedule_endpoints() {
        assert!((tau_at((1.0, 1e4), 0, 101) - 1.0).abs() < 1e-12);
        assert!((tau_at((1.0, 1e4), 100, 101) - 1e4).abs() < 1e-6);
        assert!((tau_at((1.0, 1e4), 50, 101) - 100.0).abs() < 1e-8);
    }

    #[test]
    fn plateau_detection() {
        let flat = vec![5.0; 20];
        assert!(plateaued(&flat, 10, 1e-4));
        let rising: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(!plateaued(&rising, 10, 1e-4));
        assert!(!plateaued(&flat[..15], 10, 1e-4));
    }
}
