//! The four commands. Every artifact lives under the output directory and is
//! recorded in its manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use cgsur_core::fem::solve_count;
use cgsur_core::genmodel::Model;
use cgsur_core::io::{load_checkpoint, save_checkpoint};
use cgsur_core::inference::{LogEntry, VariationalState};
use cgsur_core::predict::Density;

use crate::config::ExperimentConfig;
use crate::data;
use crate::experiment::{build_model, cross_bc, evaluate, fit, run_repeats, uncertainty, Evaluation};
use crate::manifest::Manifest;
use crate::CliError;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_DATA: &str = "eval_per_datum.csv";
pub const QUICK_UQ: usize = 1024;
pub const FULL_UQ: usize = 8192;

/// Output directory: the flag, else the config, else `out`.
pub fn output_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_manifest(out: &Path) -> Result<Manifest, CliError> {
    Manifest::load(out)?.ok_or_else(|| CliError::Missing(out.join(crate::manifest::FILE_NAME).display().to_string()))
}

pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, CliError> {
    let model = build_model(cfg)?;
    let before = solve_count(cfg.field.grid_size);
    let g = data::generate(cfg, &model)?;
    let solves = solve_count(cfg.field.grid_size) - before;
    let mut m = Manifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        data_hash: cfg.data_hash(),
        ..Default::default()
    };
    data::write(out, &g, &model, &mut m)?;
    m.sections.insert("gen".into(), json!({ "fine_solves": solves }));
    m.save(out)?;
    Ok(m)
}

fn log_csv(log: &[LogEntry], header: bool) -> String {
    let mut s = String::new();
    if header {
        s.push_str("iter,F,F_u,F_l,F_O,wallclock\n");
    }
    for e in log {
        let p = &e.parts;
        let _ = writeln!(s, "{},{},{},{},{},{:.3}", e.iteration, e.elbo, p.unlabeled, p.labeled, p.virtual_, e.seconds);
    }
    s
}

/// Trains on the stored datasets. With `resume`, continues from the stored
/// checkpoint and appends to the log.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<Manifest, CliError> {
    let mut m = load_manifest(out)?;
    let model = build_model(cfg)?;
    let g = data::read(out, cfg, &model, &m)?;
    let start = if resume {
        m.verify(out, CHECKPOINT)?;
        let c = load_checkpoint(&out.join(CHECKPOINT))?;
        if c.model != *model.config() {
            return Err(CliError::Config("model settings differ from the checkpoint being resumed".into()));
        }
        Some(c.state)
    } else {
        None
    };
    let t = fit(cfg, &model, &g.datasets, start)?;
    let final_elbo = t.log.last().map(|e| e.elbo);
    let meta = json!({
        "final_elbo": final_elbo,
        "iteration": t.state.iteration,
        "stop": t.stop,
        "model_hash": cfg.model_hash(),
        "config_hash": cfg.hash(),
    });
    save_checkpoint(&out.join(CHECKPOINT), model.config(), &t.state, meta.clone())?;
    let log_path = out.join(TRAIN_LOG);
    if resume && log_path.exists() {
        let mut s = std::fs::read_to_string(&log_path)?;
        s.push_str(&log_csv(&t.log, false));
        std::fs::write(&log_path, s)?;
    } else {
        std::fs::write(&log_path, log_csv(&t.log, true))?;
    }
    m.record(out, CHECKPOINT)?;
    m.record(out, TRAIN_LOG)?;
    m.config_hash = cfg.hash();
    m.model_hash = Some(cfg.model_hash());
    m.sections.insert("train".into(), meta);
    m.save(out)?;
    Ok(m)
}

fn load_trained(cfg: &ExperimentConfig, out: &Path, m: &Manifest) -> Result<(Model, VariationalState), CliError> {
    m.expect_model_hash(&cfg.model_hash())?;
    m.verify(out, CHECKPOINT)?;
    let c = load_checkpoint(&out.join(CHECKPOINT))?;
    Ok((Model::new(c.model)?, c.state))
}

pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<Evaluation, CliError> {
    let mut m = load_manifest(out)?;
    let (model, state) = load_trained(cfg, out, &m)?;
    let g = data::read(out, cfg, &model, &m)?;
    let e = evaluate(cfg, &model, &state, &g.validation)?;
    let mut report = serde_json::to_value(&e)?;
    report["config_hash"] = json!(cfg.hash());
    report["model_hash"] = json!(cfg.model_hash());
    std::fs::write(out.join(EVAL_REPORT), serde_json::to_vec_pretty(&report)?)?;
    let mut csv = String::from("index,mse,logscore,center_error,z_converged\n");
    for d in &e.per_datum {
        let _ = writeln!(csv, "{},{},{},{},{}", d.index, d.mse, d.logscore, d.center_error, d.z_converged);
    }
    std::fs::write(out.join(EVAL_DATA), csv)?;
    m.record(out, EVAL_REPORT)?;
    m.record(out, EVAL_DATA)?;
    m.sections.insert("eval".into(), report);
    m.save(out)?;
    Ok(e)
}

/// Full retrain-and-evaluate cycles on resampled data; needs no stored artifacts.
pub fn cmd_eval_repeats(cfg: &ExperimentConfig, out: &Path, repeats: usize) -> Result<(), CliError> {
    let s = run_repeats(cfg, repeats)?;
    std::fs::create_dir_all(out)?;
    let mut v = serde_json::to_value(&s)?;
    v["config_hash"] = json!(cfg.hash());
    std::fs::write(out.join("eval_repeats.json"), serde_json::to_vec_pretty(&v)?)?;
    update_manifest(cfg, out, "eval_repeats", "eval_repeats.json", v)
}

/// Train-scenario by eval-scenario grid of scores.
pub fn cmd_cross_bc(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let grid = cross_bc(cfg)?;
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("train_bc,eval_bc,R2,LS\n");
    for (t, st) in grid.scenarios.iter().enumerate() {
        for (e, se) in grid.scenarios.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{},{}", st.name(), se.name(), grid.r2[t][e], grid.ls[t][e]);
        }
    }
    std::fs::write(out.join("cross_bc.csv"), csv)?;
    let mut v = serde_json::to_value(&grid)?;
    v["config_hash"] = json!(cfg.hash());
    update_manifest(cfg, out, "cross_bc", "cross_bc.csv", v)
}

fn update_manifest(cfg: &ExperimentConfig, out: &Path, key: &str, file: &str, v: serde_json::Value) -> Result<(), CliError> {
    let mut m = Manifest::load(out)?.unwrap_or_else(|| Manifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        data_hash: cfg.data_hash(),
        ..Default::default()
    });
    m.record(out, file)?;
    m.sections.insert(key.into(), v);
    m.save(out)
}

fn density_csv(s: &Density, r: Option<&Density>) -> String {
    let mut csv = String::from("kind,x,surrogate,reference\n");
    let h = &s.histogram;
    for b in 0..h.density.len() {
        let mid = 0.5 * (h.edges[b] + h.edges[b + 1]);
        let rv = r.map_or(String::new(), |r| r.histogram.density[b].to_string());
        let _ = writeln!(csv, "histogram,{mid},{},{rv}", h.density[b]);
    }
    for (j, x) in s.points.iter().enumerate() {
        let rv = r.map_or(String::new(), |r| r.kde[j].to_string());
        let _ = writeln!(csv, "kde,{x},{},{rv}", s.kde[j]);
    }
    csv
}

fn samples_csv(v: &[f64]) -> String {
    let mut s = String::from("qoi\n");
    for x in v {
        let _ = writeln!(s, "{x}");
    }
    s
}

/// Quantity-of-interest samples from the surrogate and the fine model.
pub fn cmd_uq(cfg: &ExperimentConfig, out: &Path, count: usize) -> Result<serde_json::Value, CliError> {
    let mut m = load_manifest(out)?;
    let (model, state) = load_trained(cfg, out, &m)?;
    let r = uncertainty(cfg, &model, &state, count, cfg.uq.reference)?;
    std::fs::write(out.join("uq_surrogate.csv"), samples_csv(&r.surrogate))?;
    m.record(out, "uq_surrogate.csv")?;
    if let Some(refs) = &r.reference {
        std::fs::write(out.join("uq_reference.csv"), samples_csv(refs))?;
        m.record(out, "uq_reference.csv")?;
    }
    std::fs::write(out.join("uq_density.csv"), density_csv(&r.surrogate_density, r.reference_density.as_ref()))?;
    m.record(out, "uq_density.csv")?;
    let report = json!({
        "count": count,
        "ks": r.ks,
        "bandwidth": r.surrogate_density.bandwidth,
        "config_hash": cfg.hash(),
    });
    m.sections.insert("uq".into(), report.clone());
    m.save(out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cgsur_core::predict::InferMode;

    fn smoke() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.field.grid_size = 8;
        c.model.coarse_grid = 2;
        c.data.labeled = 8;
        c.data.virtual_ = 2;
        c.data.validation = 8;
        c.train.iterations = 120;
        c.train.log_every = 20;
        c.eval.samples = 8;
        c.eval.infer = InferMode::Optimize { iterations: 50, learning_rate: 1e-2, mc_samples: 2 };
        c
    }

    #[test]
    fn gen_is_byte_identical_across_runs() {
        let c = smoke();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = cmd_gen(&c, a.path()).unwrap();
        let mb = cmd_gen(&c, b.path()).unwrap();
        assert_eq!(ma.files, mb.files);
        assert_eq!(ma.sections["gen"]["fine_solves"], json!(16));
        for (rel, e) in &ma.files {
            assert_eq!(std::fs::metadata(a.path().join(rel)).unwrap().len(), e.bytes);
        }
    }

    #[test]
    fn train_resume_eval_uq() {
        let c = smoke();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        assert!(matches!(cmd_train(&c, out, false), Err(CliError::Missing(_))));
        cmd_gen(&c, out).unwrap();
        let m = cmd_train(&c, out, false).unwrap();
        let ck = load_checkpoint(&out.join(CHECKPOINT)).unwrap();
        assert_eq!(ck.state.iteration, 120);
        let log = std::fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
        let last: f64 = log.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(ck.meta["final_elbo"].as_f64().unwrap(), last);
        assert_eq!(m.sections["train"]["final_elbo"].as_f64().unwrap(), last);

        let mut more = c.clone();
        more.train.iterations = 160;
        cmd_train(&more, out, true).unwrap();
        assert_eq!(load_checkpoint(&out.join(CHECKPOINT)).unwrap().state.iteration, 160);
        let log = std::fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
        assert!(log.lines().last().unwrap().starts_with("159,"));

        assert!(matches!(cmd_eval(&c, out), Err(CliError::HashMismatch { .. })));
        let e1 = cmd_eval(&more, out).unwrap();
        let e2 = cmd_eval(&more, out).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.fine_solves, 0);

        let report = cmd_uq(&more, out, 32).unwrap();
        let ks = report["ks"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ks));
        let s = std::fs::read_to_string(out.join("uq_surrogate.csv")).unwrap();
        assert_eq!(s.lines().count(), 33);
    }

    #[test]
    fn tampered_data_is_rejected() {
        let c = smoke();
        let dir = tempfile::tempdir().unwrap();
        cmd_gen(&c, dir.path()).unwrap();
        std::fs::write(dir.path().join("data/labeled_y.f64"), [0u8; 8]).unwrap();
        let e = cmd_train(&c, dir.path(), false).unwrap_err();
        assert!(matches!(e, CliError::HashMismatch { .. }));
        assert_eq!(e.exit_code(), 2);
    }
}
