//! Dataset generation and storage.
//!
//! Item `i` of every set draws its field, then its boundary data, then any
//! random constraint weights from its own generator, so sets can grow without
//! changing existing items and generation parallelizes freely.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cgsur_core::fem::{FemSystem, Mesh};
use cgsur_core::field::{BcScenario, BoundaryCoeffs, FieldSample, GrfSampler};
use cgsur_core::genmodel::Model;
use cgsur_core::inference::{Datasets, LabeledDatum, UnlabeledDatum, VirtualDatum, VirtualObservation};
use cgsur_core::io::{read_constraints, read_matrix, write_constraints, write_matrix, GroupHeader};
use cgsur_core::rng::{self, streams};
use cgsur_core::vobs::{build_cgr, build_flux_constant, build_randomized, ConstraintBundle, EnergyObservable};

use crate::config::{ExperimentConfig, VirtualType};
use crate::manifest::Manifest;
use crate::CliError;

pub const DIR: &str = "data";

/// Everything `gen` produces.
#[derive(Debug, Clone)]
pub struct Generated {
    pub datasets: Datasets,
    pub unlabeled_bc: Vec<BoundaryCoeffs>,
    pub validation: Vec<LabeledDatum>,
}

/// Draws one field and its boundary data.
fn draw<R: rand::Rng>(sampler: &GrfSampler, bc: BcScenario, rng: &mut R) -> (FieldSample, BoundaryCoeffs) {
    let f = sampler.sample(rng);
    let b = bc.sample(rng);
    (f, b)
}

fn fine_system(model: &Model, kappa: Vec<f64>, bc: BoundaryCoeffs) -> Result<FemSystem, CliError> {
    Ok(FemSystem::new(model.fine_mesh().clone(), kappa, bc, model.source())?)
}

/// `n` fine-model solves on inputs from `stream`.
pub fn labeled_set(
    cfg: &ExperimentConfig,
    model: &Model,
    sampler: &GrfSampler,
    stream: u64,
    bc: BcScenario,
    n: usize,
) -> Result<Vec<LabeledDatum>, CliError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::item(cfg.seed, stream, i as u64);
            let (f, b) = draw(sampler, bc, &mut r);
            let y = fine_system(model, f.kappa, b)?.solve()?.y;
            Ok(LabeledDatum { x: f.lambda, y, bc: b })
        })
        .collect()
}

/// Constraint observations at one query input.
fn observation<R: rand::Rng>(
    cfg: &ExperimentConfig,
    model: &Model,
    sys: FemSystem,
    rng: &mut R,
) -> Result<VirtualObservation, CliError> {
    let coarse: &Mesh = model.coarse_mesh();
    let d = &cfg.data;
    let groups = match d.virtual_type {
        VirtualType::Energy => {
            let tau = cfg.train.tau_schedule.map_or(1.0, |s| s.0);
            return Ok(VirtualObservation::Energy(EnergyObservable::new(Arc::new(sys), tau)?));
        }
        VirtualType::Cgr => vec![build_cgr(&sys, coarse)?],
        VirtualType::Randomized => vec![build_randomized(&sys, d.randomized_count, d.randomized_scale, rng)?],
        VirtualType::Flux => vec![build_flux_constant(&sys, coarse, cfg.model.source)?],
        VirtualType::Hybrid => vec![
            build_cgr(&sys, coarse)?,
            build_randomized(&sys, d.randomized_count, d.randomized_scale, rng)?,
            build_flux_constant(&sys, coarse, cfg.model.source)?,
        ],
    };
    Ok(VirtualObservation::Linear(ConstraintBundle { groups }))
}

pub fn generate(cfg: &ExperimentConfig, model: &Model) -> Result<Generated, CliError> {
    let sampler = GrfSampler::new(cfg.grf()?)?;
    let d = &cfg.data;
    let labeled = labeled_set(cfg, model, &sampler, streams::LABELED, d.bc, d.labeled)?;
    let validation = labeled_set(cfg, model, &sampler, streams::VALIDATION, d.bc, d.validation)?;
    let (unlabeled, unlabeled_bc): (Vec<_>, Vec<_>) = (0..d.unlabeled)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::item(cfg.seed, streams::UNLABELED, i as u64);
            let (f, b) = draw(&sampler, d.bc, &mut r);
            (UnlabeledDatum { x: f.lambda }, b)
        })
        .unzip();
    let virtual_ = (0..d.virtual_)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::item(cfg.seed, streams::QUERY, i as u64);
            let (f, b) = draw(&sampler, d.bc, &mut r);
            let obs = observation(cfg, model, fine_system(model, f.kappa, b)?, &mut r)?;
            Ok(VirtualDatum { x: f.lambda, bc: b, obs })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(Generated { datasets: Datasets { labeled, unlabeled, virtual_ }, unlabeled_bc, validation })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub streams: serde_json::Value,
    pub labeled: usize,
    pub unlabeled: usize,
    #[serde(rename = "virtual")]
    pub virtual_: usize,
    pub validation: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    /// Constraint group headers per query; empty for energy observations.
    pub constraints: Vec<Vec<GroupHeader>>,
}

fn bc_rows(b: &[BoundaryCoeffs]) -> Vec<Vec<f64>> {
    b.iter().map(|c| c.a.to_vec()).collect()
}

fn bcs_from(rows: Vec<Vec<f64>>) -> Vec<BoundaryCoeffs> {
    rows.into_iter().map(|r| BoundaryCoeffs::new(r[0], r[1], r[2], r[3])).collect()
}

const FILES: [&str; 10] = [
    "labeled_x.f64",
    "labeled_y.f64",
    "labeled_bc.f64",
    "unlabeled_x.f64",
    "unlabeled_bc.f64",
    "virtual_x.f64",
    "virtual_bc.f64",
    "validation_x.f64",
    "validation_y.f64",
    "validation_bc.f64",
];
const CONSTRAINTS: &str = "virtual_constraints.f64";

/// Writes every set under `out/data` and records it in `manifest`.
pub fn write(out: &Path, g: &Generated, model: &Model, manifest: &mut Manifest) -> Result<(), CliError> {
    let dir = out.join(DIR);
    std::fs::create_dir_all(&dir)?;
    let ds = &g.datasets;
    let rows = |v: Vec<&Vec<f64>>| v.into_iter().cloned().collect::<Vec<_>>();
    let p = |f: &str| dir.join(f);
    write_matrix(&p(FILES[0]), &rows(ds.labeled.iter().map(|d| &d.x).collect()))?;
    write_matrix(&p(FILES[1]), &rows(ds.labeled.iter().map(|d| &d.y).collect()))?;
    write_matrix(&p(FILES[2]), &bc_rows(&ds.labeled.iter().map(|d| d.bc).collect::<Vec<_>>()))?;
    write_matrix(&p(FILES[3]), &rows(ds.unlabeled.iter().map(|d| &d.x).collect()))?;
    write_matrix(&p(FILES[4]), &bc_rows(&g.unlabeled_bc))?;
    write_matrix(&p(FILES[5]), &rows(ds.virtual_.iter().map(|d| &d.x).collect()))?;
    write_matrix(&p(FILES[6]), &bc_rows(&ds.virtual_.iter().map(|d| d.bc).collect::<Vec<_>>()))?;
    write_matrix(&p(FILES[7]), &rows(g.validation.iter().map(|d| &d.x).collect()))?;
    write_matrix(&p(FILES[8]), &rows(g.validation.iter().map(|d| &d.y).collect()))?;
    write_matrix(&p(FILES[9]), &bc_rows(&g.validation.iter().map(|d| d.bc).collect::<Vec<_>>()))?;
    let bundles: Vec<ConstraintBundle> = ds
        .virtual_
        .iter()
        .filter_map(|d| match &d.obs {
            VirtualObservation::Linear(b) => Some(b.clone()),
            VirtualObservation::Energy(_) => None,
        })
        .collect();
    let constraints = write_constraints(&p(CONSTRAINTS), &bundles)?;
    for f in FILES.iter().chain([&CONSTRAINTS]) {
        manifest.record(out, &format!("{DIR}/{f}"))?;
    }
    let section = DataSection {
        streams: serde_json::json!({
            "labeled": streams::LABELED,
            "unlabeled": streams::UNLABELED,
            "virtual": streams::QUERY,
            "validation": streams::VALIDATION,
        }),
        labeled: ds.labeled.len(),
        unlabeled: ds.unlabeled.len(),
        virtual_: ds.virtual_.len(),
        validation: g.validation.len(),
        dim_x: model.dim_x(),
        dim_y: model.dim_y(),
        constraints,
    };
    manifest.sections.insert("data".into(), serde_json::to_value(section)?);
    Ok(())
}

/// Reads the sets written by [`write`] after checking their hashes.
pub fn read(out: &Path, cfg: &ExperimentConfig, model: &Model, manifest: &Manifest) -> Result<Generated, CliError> {
    manifest.expect_data_hash(&cfg.data_hash())?;
    for f in FILES.iter().chain([&CONSTRAINTS]) {
        manifest.verify(out, &format!("{DIR}/{f}"))?;
    }
    let s: DataSection = serde_json::from_value(
        manifest.sections.get("data").cloned().ok_or_else(|| CliError::Missing("data section of the manifest".into()))?,
    )?;
    let dir = out.join(DIR);
    let p = |f: &str| dir.join(f);
    let (dx, dy) = (s.dim_x, s.dim_y);
    let lx = read_matrix(&p(FILES[0]), s.labeled, dx)?;
    let ly = read_matrix(&p(FILES[1]), s.labeled, dy)?;
    let lb = bcs_from(read_matrix(&p(FILES[2]), s.labeled, 4)?);
    let ux = read_matrix(&p(FILES[3]), s.unlabeled, dx)?;
    let ub = bcs_from(read_matrix(&p(FILES[4]), s.unlabeled, 4)?);
    let vx = read_matrix(&p(FILES[5]), s.virtual_, dx)?;
    let vb = bcs_from(read_matrix(&p(FILES[6]), s.virtual_, 4)?);
    let wx = read_matrix(&p(FILES[7]), s.validation, dx)?;
    let wy = read_matrix(&p(FILES[8]), s.validation, dy)?;
    let wb = bcs_from(read_matrix(&p(FILES[9]), s.validation, 4)?);
    let pair = |x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, b: Vec<BoundaryCoeffs>| -> Vec<LabeledDatum> {
        x.into_iter().zip(y).zip(b).map(|((x, y), bc)| LabeledDatum { x, y, bc }).collect()
    };
    let virtual_ = if matches!(cfg.data.virtual_type, VirtualType::Energy) {
        let tau = cfg.train.tau_schedule.map_or(1.0, |s| s.0);
        vx.into_iter()
            .zip(vb)
            .map(|(x, bc)| {
                let sys = fine_system(model, FieldSample::from_lambda(x.clone()).kappa, bc)?;
                Ok(VirtualDatum { x, bc, obs: VirtualObservation::Energy(EnergyObservable::new(Arc::new(sys), tau)?) })
            })
            .collect::<Result<Vec<_>, CliError>>()?
    } else {
        let bundles = read_constraints(&p(CONSTRAINTS), &s.constraints)?;
        vx.into_iter()
            .zip(vb)
            .zip(bundles)
            .map(|((x, bc), b)| VirtualDatum { x, bc, obs: VirtualObservation::Linear(b) })
            .collect()
    };
    Ok(Generated {
        datasets: Datasets {
            labeled: pair(lx, ly, lb),
            unlabeled: ux.into_iter().map(|x| UnlabeledDatum { x }).collect(),
            virtual_,
        },
        unlabeled_bc: ub,
        validation: pair(wx, wy, wb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cgsur_core::vobs::{eval_residual, ConstraintKind, Precision};

    fn small(virtual_type: VirtualType) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.field.grid_size = 8;
        c.model.coarse_grid = 2;
        c.data.labeled = 3;
        c.data.unlabeled = 2;
        c.data.virtual_ = 2;
        c.data.validation = 4;
        c.data.virtual_type = virtual_type;
        c.data.randomized_count = 5;
        c
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let c = small(VirtualType::Cgr);
        let m = Model::new(c.model_config()).unwrap();
        let a = generate(&c, &m).unwrap();
        let b = generate(&c, &m).unwrap();
        assert_eq!(a.datasets.labeled, b.datasets.labeled);
        assert_eq!(a.validation, b.validation);
        let mut bigger = c.clone();
        bigger.data.labeled = 5;
        let g = generate(&bigger, &m).unwrap();
        assert_eq!(g.datasets.labeled[..3], a.datasets.labeled[..]);
        assert_ne!(a.datasets.labeled[0].x, a.validation[0].x);
    }

    #[test]
    fn hybrid_constraints_vanish_at_fine_solutions() {
        let c = small(VirtualType::Hybrid);
        let m = Model::new(c.model_config()).unwrap();
        let g = generate(&c, &m).unwrap();
        for d in &g.datasets.virtual_ {
            let VirtualObservation::Linear(b) = &d.obs else { panic!("linear expected") };
            assert_eq!(b.groups.len(), 3);
            assert_eq!(b.groups[1].len(), 5);
            assert!(matches!(b.groups[2].precision, Precision::Learned(_)));
            let y = fine_system(&m, FieldSample::from_lambda(d.x.clone()).kappa, d.bc).unwrap().solve().unwrap().y;
            for grp in b.groups.iter().filter(|g| g.kind != ConstraintKind::Flux) {
                let r = eval_residual(grp, &y).unwrap();
                assert!(r.iter().all(|v| v.abs() < 1e-9), "{r:?}");
            }
        }
    }

    #[test]
    fn round_trip_through_files() {
        for vt in [VirtualType::Hybrid, VirtualType::Energy] {
            let c = small(vt);
            let m = Model::new(c.model_config()).unwrap();
            let g = generate(&c, &m).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let mut man = Manifest { data_hash: c.data_hash(), ..Default::default() };
            write(dir.path(), &g, &m, &mut man).unwrap();
            let r = read(dir.path(), &c, &m, &man).unwrap();
            assert_eq!(r.datasets.labeled, g.datasets.labeled);
            assert_eq!(r.validation, g.validation);
            assert_eq!(r.unlabeled_bc, g.unlabeled_bc);
            assert_eq!(r.datasets.unlabeled, g.datasets.unlabeled);
            for (a, b) in r.datasets.virtual_.iter().zip(&g.datasets.virtual_) {
                assert_eq!(a.x, b.x);
                match (&a.obs, &b.obs) {
                    (VirtualObservation::Linear(p), VirtualObservation::Linear(q)) => assert_eq!(p, q),
                    (VirtualObservation::Energy(p), VirtualObservation::Energy(q)) => {
                        assert_eq!(p.tau, q.tau);
                        assert_eq!(p.system.kappa(), q.system.kappa());
                    }
                    _ => panic!("observation type changed"),
                }
            }
            let mut other = c.clone();
            other.data.labeled = 4;
            assert!(matches!(read(dir.path(), &other, &m, &man), Err(CliError::HashMismatch { .. })));
        }
    }
}
