use std::sync::Arc;

use crate::fem::FemSystem;
use crate::field::{sample_grf, BcScenario, GrfSpec};
use crate::genmodel::{Model, ModelConfig};
use crate::rng;
use crate::vobs::{build_cgr, ConstraintBundle, EnergyObservable, Precision};

use super::data::{Datasets, LabeledDatum, UnlabeledDatum, VirtualDatum, VirtualObservation};

pub fn small_model() -> Model {
    Model::new(ModelConfig::new(4, 2).with_decoder_widths(&[6])).unwrap()
}

/// Two labeled, two unlabeled, one constrained and one energy query.
pub fn small_data(model: &Model, precision: Precision) -> Datasets {
    let spec = GrfSpec::new(4, 0.0, 1.0, 0.3).unwrap();
    let mut bcr = rng::stream(9, rng::streams::BC);
    let mut draw = |seed: u64| {
        let f = sample_grf(&spec, seed).unwrap();
        let bc = BcScenario::C.sample(&mut bcr);
        let sys = FemSystem::new(model.fine_mesh().clone(), f.kappa.clone(), bc, model.source()).unwrap();
        (f, bc, sys)
    };
    let mut data = Datasets::default();
    for s in 0..2 {
        let (f, bc, sys) = draw(s);
        data.labeled.push(LabeledDatum { x: f.lambda, y: sys.solve().unwrap().y, bc });
    }
    for s in 2..4 {
        data.unlabeled.push(UnlabeledDatum { x: draw(s).0.lambda });
    }
    let (f, bc, sys) = draw(4);
    let cs = build_cgr(&sys, model.coarse_mesh()).unwrap();
    let cs = match precision {
        Precision::Fixed(_) => {
            let n = cs.len();
            cs.with_precision(Precision::Fixed(vec![50.0; n]))
        }
        p => cs.with_precision(p),
    };
    data.virtual_.push(VirtualDatum { x: f.lambda, bc, obs: VirtualObservation::Linear(ConstraintBundle { groups: vec![cs] }) });
    let (f, bc, sys) = draw(5);
    let obs = EnergyObservable::new(Arc::new(sys), 10.0).unwrap();
    data.virtual_.push(VirtualDatum { x: f.lambda, bc, obs: VirtualObservation::Energy(obs) });
    data
}
