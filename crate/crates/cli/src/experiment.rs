//! In-memory experiment pipeline: generate, train, evaluate, repeat.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cgsur_core::fem::solve_count;
use cgsur_core::field::{BcScenario, GrfSampler};
use cgsur_core::genmodel::Model;
use cgsur_core::inference::{train, Datasets, LabeledDatum, LogEntry, StopReason, TrainConfig, VariationalState};
use cgsur_core::predict::{
    datum_logscore, infer_z, logscore, predictive_posterior, propagate_uq, r2_score, InferMode, UqOptions, UqResult,
};
use cgsur_core::rng::{child_seed, streams};

use crate::config::ExperimentConfig;
use crate::data::{generate, labeled_set, Generated};
use crate::CliError;

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model, CliError> {
    Ok(Model::new(cfg.model_config())?)
}

/// Training settings with the optimizer seed derived from the root seed.
pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig { seed: child_seed(cfg.seed, streams::TRAIN), ..cfg.train.clone() }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub state: VariationalState,
    pub log: Vec<LogEntry>,
    pub stop: StopReason,
}

pub fn fit(
    cfg: &ExperimentConfig,
    model: &Model,
    data: &Datasets,
    resume: Option<VariationalState>,
) -> Result<Trained, CliError> {
    let out = train(model, data, &train_config(cfg), resume)?;
    Ok(Trained { state: out.state, log: out.log, stop: out.stop })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatumScore {
    pub index: usize,
    pub mse: f64,
    pub logscore: f64,
    pub center_error: f64,
    pub z_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(rename = "R2")]
    pub r2: f64,
    #[serde(rename = "LS")]
    pub ls: f64,
    #[serde(rename = "N_v")]
    pub n_v: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Fine-grid solves counted while predicting; always zero.
    pub fine_solves: u64,
    #[serde(skip)]
    pub per_datum: Vec<DatumScore>,
}

/// Predictive moments on every validation input and the resulting scores.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &Model,
    state: &VariationalState,
    validation: &[LabeledDatum],
) -> Result<Evaluation, CliError> {
    let k = cfg.eval.samples;
    let mode = infer_mode(cfg.eval.infer, state);
    let seed = child_seed(cfg.seed, streams::EVAL);
    let fine = model.fine_mesh();
    let before = solve_count(model.config().fine_grid);
    let preds = validation
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let q = infer_z(model, state, &v.x, mode, child_seed(seed, 2 * i as u64))?;
            let p = predictive_posterior(model, &state.params, &q, &v.bc, k, child_seed(seed, 2 * i as u64 + 1))?;
            Ok((p.mean, p.var, q.converged))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let fine_solves = solve_count(model.config().fine_grid) - before;
    let truth: Vec<Vec<f64>> = validation.iter().map(|v| v.y.clone()).collect();
    let means: Vec<Vec<f64>> = preds.iter().map(|p| p.0.clone()).collect();
    let vars: Vec<Vec<f64>> = preds.iter().map(|p| p.1.clone()).collect();
    let center = fine.center_node();
    let per_datum = validation
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(index, (v, (m, s, conv)))| {
            let mse = v.y.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m.len() as f64;
            Ok(DatumScore {
                index,
                mse,
                logscore: datum_logscore(&v.y, m, s)?,
                center_error: center.map_or(f64::NAN, |c| m[c] - v.y[c]),
                z_converged: *conv,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(Evaluation {
        r2: r2_score(&truth, &means)?,
        ls: logscore(&truth, &means, &vars)?,
        n_v: validation.len(),
        k,
        fine_solves,
        per_datum,
    })
}

/// Amortized inference needs an encoder; fall back to optimization without one.
fn infer_mode(mode: InferMode, state: &VariationalState) -> InferMode {
    match (mode, state.encoder()) {
        (InferMode::Amortized, None) => InferMode::Optimize { iterations: 1000, learning_rate: 1e-2, mc_samples: 4 },
        (m, _) => m,
    }
}

/// Generate, train and evaluate in one go.
pub fn run(cfg: &ExperimentConfig) -> Result<(Generated, Trained, Evaluation), CliError> {
    let model = build_model(cfg)?;
    let g = generate(cfg, &model)?;
    let t = fit(cfg, &model, &g.datasets, None)?;
    let e = evaluate(cfg, &model, &t.state, &g.validation)?;
    Ok((g, t, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub seeds: Vec<u64>,
    pub runs: Vec<Evaluation>,
    pub mean_r2: f64,
    pub mean_ls: f64,
}

/// Repeat `r` retrains on data resampled with root seed `seed + r`.
pub fn run_repeats(cfg: &ExperimentConfig, repeats: usize) -> Result<RepeatSummary, CliError> {
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| cfg.seed.wrapping_add(r)).collect();
    let runs = seeds
        .iter()
        .map(|&s| run(&cfg.with_seed(s)).map(|r| r.2))
        .collect::<Result<Vec<_>, CliError>>()?;
    let n = runs.len().max(1) as f64;
    Ok(RepeatSummary {
        mean_r2: runs.iter().map(|e| e.r2).sum::<f64>() / n,
        mean_ls: runs.iter().map(|e| e.ls).sum::<f64>() / n,
        seeds,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossBcGrid {
    pub scenarios: Vec<BcScenario>,
    /// `r2[t][e]`: trained under scenario `t`, evaluated under `e`.
    pub r2: Vec<Vec<f64>>,
    pub ls: Vec<Vec<f64>>,
}

/// Trains once per scenario and evaluates each model on validation sets from
/// every scenario. Validation fields are shared across scenarios.
pub fn cross_bc(cfg: &ExperimentConfig) -> Result<CrossBcGrid, CliError> {
    let model = build_model(cfg)?;
    let sampler = GrfSampler::new(cfg.grf()?)?;
    let scenarios = BcScenario::CROSS.to_vec();
    let validation = scenarios
        .iter()
        .map(|&s| labeled_set(cfg, &model, &sampler, streams::VALIDATION, s, cfg.data.validation))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut r2 = Vec::new();
    let mut ls = Vec::new();
    for &s in &scenarios {
        let mut c = cfg.clone();
        c.data.bc = s;
        c.data.validation = 0;
        let g = generate(&c, &model)?;
        let t = fit(&c, &model, &g.datasets, None)?;
        let evals = validation
            .iter()
            .map(|v| evaluate(&c, &model, &t.state, v))
            .collect::<Result<Vec<_>, CliError>>()?;
        r2.push(evals.iter().map(|e| e.r2).collect());
        ls.push(evals.iter().map(|e| e.ls).collect());
    }
    Ok(CrossBcGrid { scenarios, r2, ls })
}

/// Propagates `count` input draws through the surrogate, and through the fine
/// model when `reference` is set.
pub fn uncertainty(
    cfg: &ExperimentConfig,
    model: &Model,
    state: &VariationalState,
    count: usize,
    reference: bool,
) -> Result<UqResult, CliError> {
    let sampler = GrfSampler::new(cfg.grf()?)?;
    let mode = if cfg.uq.amortized && state.encoder().is_some() { InferMode::Amortized } else { infer_mode(cfg.eval.infer, state) };
    let opts = UqOptions { count, mode, reference, seed: child_seed(cfg.seed, streams::UQ) };
    Ok(propagate_uq(model, state, &sampler, cfg.uq.bc.unwrap_or(cfg.data.bc), opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.field.grid_size = 8;
        c.model.coarse_grid = 2;
        c.data.labeled = 8;
        c.data.validation = 16;
        c.train.iterations = 300;
        c.train.adam.learning_rate = 3e-3;
        c.eval.samples = 16;
        c.eval.infer = InferMode::Optimize { iterations: 100, learning_rate: 1e-2, mc_samples: 2 };
        c
    }

    #[test]
    fn smoke_run_predicts_without_fine_solves() {
        let (_, t, e) = run(&smoke()).unwrap();
        assert_eq!(e.fine_solves, 0);
        assert_eq!(e.n_v, 16);
        assert_eq!(e.per_datum.len(), 16);
        assert!(e.r2 > 0.5, "R2 {}", e.r2);
        assert!(t.log.last().unwrap().elbo > t.log[0].elbo);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let c = smoke();
        let model = build_model(&c).unwrap();
        let g = generate(&c, &model).unwrap();
        let mut short = c.clone();
        short.train.iterations = 50;
        let t = fit(&short, &model, &g.datasets, None).unwrap();
        let a = evaluate(&c, &model, &t.state, &g.validation).unwrap();
        let b = evaluate(&c, &model, &t.state, &g.validation).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_datum, b.per_datum);
    }

    #[test]
    fn cross_bc_fills_a_four_by_four_grid() {
        let mut c = smoke();
        c.data.labeled = 4;
        c.data.validation = 6;
        c.train.iterations = 60;
        c.eval.samples = 4;
        c.eval.infer = InferMode::Optimize { iterations: 20, learning_rate: 1e-2, mc_samples: 1 };
        let g = cross_bc(&c).unwrap();
        assert_eq!(g.scenarios, BcScenario::CROSS.to_vec());
        for m in [&g.r2, &g.ls] {
            assert_eq!(m.len(), 4);
            assert!(m.iter().all(|row| row.len() == 4 && row.iter().all(|v| v.is_finite())));
        }
    }
}
