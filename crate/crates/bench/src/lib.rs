//! Fixtures shared by the benchmarks.

use cgsur_core::fem::{FemSystem, Source};
use cgsur_core::field::{BcScenario, GrfSampler, GrfSpec};
use cgsur_core::genmodel::Model;
use cgsur_core::inference::{Datasets, LabeledDatum, UnlabeledDatum};
use cgsur_core::rng;

/// Default field statistics on a `d × d` grid.
pub fn sampler(d: usize) -> GrfSampler {
    GrfSampler::new(GrfSpec::new(d, 0.4, 0.8, 0.15).expect("valid spec")).expect("positive definite")
}

/// A fine system for field `index` under the default boundary distribution.
pub fn fine_system(model: &Model, index: u64) -> FemSystem {
    let mut r = rng::item(0, rng::streams::LABELED, index);
    let f = sampler(model.config().fine_grid).sample(&mut r);
    let bc = BcScenario::UniformDefault.sample(&mut r);
    FemSystem::new(model.fine_mesh().clone(), f.kappa, bc, &Source::Zero).expect("valid system")
}

/// `labeled` solved pairs followed by `unlabeled` bare inputs.
pub fn datasets(model: &Model, labeled: usize, unlabeled: usize) -> Datasets {
    let s = sampler(model.config().fine_grid);
    let mut d = Datasets::default();
    for i in 0..labeled + unlabeled {
        let mut r = rng::item(0, rng::streams::LABELED, i as u64);
        let f = s.sample(&mut r);
        let bc = BcScenario::UniformDefault.sample(&mut r);
        if i < labeled {
            let y = FemSystem::new(model.fine_mesh().clone(), f.kappa, bc, model.source())
                .and_then(|sys| sys.solve())
                .expect("solvable")
                .y;
            d.labeled.push(LabeledDatum { x: f.lambda, y, bc });
        } else {
            d.unlabeled.push(UnlabeledDatum { x: f.lambda });
        }
    }
    d
}
