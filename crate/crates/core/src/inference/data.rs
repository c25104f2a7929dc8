use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::Mesh;
use crate::field::BoundaryCoeffs;
use crate::vobs::{ConstraintBundle, ConstraintKind, EnergyObservable, Precision};

/// Input with its fine-model output.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDatum {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub bc: BoundaryCoeffs,
}

/// Input only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDatum {
    pub x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum VirtualObservation {
    Linear(ConstraintBundle),
    Energy(EnergyObservable),
}

/// Input at which physics constraints are imposed on the output.
#[derive(Debug, Clone)]
pub struct VirtualDatum {
    pub x: Vec<f64>,
    pub bc: BoundaryCoeffs,
    pub obs: VirtualObservation,
}

#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub labeled: Vec<LabeledDatum>,
    pub unlabeled: Vec<UnlabeledDatum>,
    pub virtual_: Vec<VirtualDatum>,
}

impl Datasets {
    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty() && self.unlabeled.is_empty() && self.virtual_.is_empty()
    }

    pub fn all_inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.labeled
            .iter()
            .map(|d| d.x.as_slice())
            .chain(self.unlabeled.iter().map(|d| d.x.as_slice()))
            .chain(self.virtual_.iter().map(|d| d.x.as_slice()))
    }
}

/// One constraint group restricted to the free nodes: `Γ_f y_f = α - Γ_c y_c`.
#[derive(Debug, Clone)]
pub struct ReducedGroup {
    pub kind: ConstraintKind,
    pub gamma: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub precision: Precision,
}

/// Per-query data derived once before training.
#[derive(Debug, Clone)]
pub struct PreparedVirtual {
    /// Known Dirichlet values, zero at free nodes.
    pub dirichlet: Vec<f64>,
    pub groups: Vec<ReducedGroup>,
    pub energy: Option<EnergyObservable>,
}

impl PreparedVirtual {
    pub fn new(mesh: &Mesh, datum: &VirtualDatum) -> Result<Self> {
        let n = mesh.num_nodes();
        if datum.x.len() != mesh.num_pixels() {
            return Err(Error::DimensionMismatch { expected: mesh.num_pixels(), got: datum.x.len() });
        }
        let mut dirichlet = vec![0.0; n];
        for &d in mesh.dirichlet_nodes() {
            dirichlet[d] = datum.bc.value_at(mesh.node(d));
        }
        let free = mesh.free_nodes();
        let mut groups = Vec::new();
        let mut energy = None;
        match &datum.obs {
            VirtualObservation::Linear(bundle) => {
                for g in &bundle.groups {
                    if g.gamma.ncols() != n {
                        return Err(Error::DimensionMismatch { expected: n, got: g.gamma.ncols() });
                    }
                    let alpha = &g.alpha - &g.gamma * DVector::from_column_slice(&dirichlet);
                    let gamma = g.gamma.select_columns(free.iter());
                    groups.push(ReducedGroup { kind: g.kind, gamma, alpha, precision: g.precision.clone() });
                }
            }
            VirtualObservation::Energy(e) => {
                if e.system.mesh().num_nodes() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: e.system.mesh().num_nodes() });
                }
                energy = Some(e.clone());
            }
        }
        Ok(Self { dirichlet, groups, energy })
    }

    pub fn num_constraints(&self) -> usize {
        self.groups.iter().map(|g| g.gamma.nrows()).sum()
    }
}
