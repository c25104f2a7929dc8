use std::ops::Range;

use crate::approximators::Approximator;
use crate::genmodel::{Model, ModelParams};
use crate::vobs::{ConstraintKind, GammaPosterior};

use super::closed_form::ConstrainedGaussian;
use super::energy::DiagonalQ;

/// Offsets inside one per-datum block `[μ_z, log σ_z, μ_X, log σ_X]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalLayout {
    pub dim_z: usize,
    pub dim_xc: usize,
}

impl LocalLayout {
    pub fn for_model(model: &Model) -> Self {
        Self { dim_z: model.dim_z(), dim_xc: model.dim_xc() }
    }
    /// Block length with coarse factors.
    pub fn full(&self) -> usize {
        2 * self.dim_z + 2 * self.dim_xc
    }
    /// Block length for latent-only factors.
    pub fn latent(&self) -> usize {
        2 * self.dim_z
    }
    pub fn z_mean(&self) -> Range<usize> {
        0..self.dim_z
    }
    pub fn z_log_std(&self) -> Range<usize> {
        self.dim_z..2 * self.dim_z
    }
    pub fn xc_mean(&self) -> Range<usize> {
        2 * self.dim_z..2 * self.dim_z + self.dim_xc
    }
    pub fn xc_log_std(&self) -> Range<usize> {
        2 * self.dim_z + self.dim_xc..self.full()
    }
}

/// `q(z)` for inputs without outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum UnlabeledFactors {
    /// `[μ_z, log σ_z]` per datum, stacked.
    PerDatum(Vec<f64>),
    /// Shared encoder `x -> [μ_z, log σ_z]`.
    Amortized(Approximator),
}

/// `q(y)` at a query point, with full-length moments (Dirichlet entries exact).
#[derive(Debug, Clone)]
pub struct OutputFactor {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub entropy: Option<f64>,
    pub kind: OutputFactorKind,
}

#[derive(Debug, Clone)]
pub enum OutputFactorKind {
    Constrained(ConstrainedGaussian),
    Diagonal(DiagonalQ),
}

/// Everything optimized during training.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub params: ModelParams,
    /// One full block per labeled datum.
    pub labeled: Vec<f64>,
    /// One full block per virtual query.
    pub virtual_: Vec<f64>,
    pub unlabeled: UnlabeledFactors,
    pub gammas: Vec<(ConstraintKind, GammaPosterior)>,
    pub output_factors: Vec<Option<OutputFactor>>,
    pub iteration: usize,
}

impl VariationalState {
    pub fn gamma(&self, kind: ConstraintKind) -> Option<&GammaPosterior> {
        self.gammas.iter().find(|(k, _)| *k == kind).map(|(_, g)| g)
    }

    pub fn set_gamma(&mut self, kind: ConstraintKind, g: GammaPosterior) {
        match self.gammas.iter_mut().find(|(k, _)| *k == kind) {
            Some(slot) => slot.1 = g,
            None => self.gammas.push((kind, g)),
        }
    }

    pub fn encoder(&self) -> Option<&Approximator> {
        match &self.unlabeled {
            UnlabeledFactors::Amortized(a) => Some(a),
            UnlabeledFactors::PerDatum(_) => None,
        }
    }
}
