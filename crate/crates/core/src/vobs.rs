//! Virtual observables: linear constraints `Γ y = α` on the fine nodal output
//! that the exact discrete solution satisfies (or nearly satisfies), plus the
//! potential-energy observable.
//!
//! `Γ` acts on the full nodal vector, Dirichlet entries included. Weight
//! functions are fine-mesh nodal interpolants set to zero on Dirichlet nodes,
//! so each weighted-residual row is a combination of Galerkin rows and
//! vanishes at the discrete solution.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::fem::{FemSystem, Mesh, Prolongation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Weighted residuals with the coarse shape functions as weights.
    Cgr,
    /// Weighted residuals with Gaussian bumps at random centers.
    Randomized,
    /// Flux balance over each coarse cell.
    Flux,
}

/// Gamma distribution over a shared constraint precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPosterior {
    pub shape: f64,
    pub rate: f64,
}

pub const GAMMA_PRIOR: GammaPosterior = GammaPosterior { shape: 1e-6, rate: 1e-6 };

impl GammaPosterior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) {
            return Err(Error::InvalidParameter(format!("gamma needs shape, rate > 0, got {shape}, {rate}")));
        }
        Ok(Self { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// `E[ln λ]`.
    pub fn mean_log(&self) -> f64 {
        digamma(self.shape) - self.rate.ln()
    }

    /// `KL(self ‖ prior)`.
    pub fn kl(&self, prior: &GammaPosterior) -> f64 {
        let (a, b) = (self.shape, self.rate);
        let (a0, b0) = (prior.shape, prior.rate);
        (a - a0) * digamma(a) - ln_gamma(a) + ln_gamma(a0) + a0 * (b.ln() - b0.ln()) + a * (b0 - b) / b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Precision {
    /// Enforced with infinite precision.
    Exact,
    /// Known per-row precisions.
    Fixed(Vec<f64>),
    /// One shared precision with a Gamma posterior.
    Learned(GammaPosterior),
}

/// `M` linear constraints `Γ y - α = 0` at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraintSet {
    pub kind: ConstraintKind,
    pub gamma: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub precision: Precision,
}

impl LinearConstraintSet {
    pub fn new(kind: ConstraintKind, gamma: DMatrix<f64>, alpha: DVector<f64>, precision: Precision) -> Result<Self> {
        if gamma.nrows() != alpha.len() {
            return Err(Error::DimensionMismatch { expected: gamma.nrows(), got: alpha.len() });
        }
        if let Precision::Fixed(l) = &precision {
            if l.len() != gamma.nrows() {
                return Err(Error::DimensionMismatch { expected: gamma.nrows(), got: l.len() });
            }
            if l.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidParameter("fixed precisions must be positive".into()));
            }
        }
        Ok(Self { kind, gamma, alpha, precision })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    /// Per-row `1/λ` (zero for exact rows) used by the conditioning update.
    pub fn inverse_precision(&self) -> Vec<f64> {
        match &self.precision {
            Precision::Exact => vec![0.0; self.len()],
            Precision::Fixed(l) => l.iter().map(|v| 1.0 / v).collect(),
            Precision::Learned(g) => vec![1.0 / g.mean(); self.len()],
        }
    }

    /// Sparse `(row, col, value)` encoding of `Γ`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::new();
        for r in 0..self.gamma.nrows() {
            for c in 0..self.gamma.ncols() {
                let v = self.gamma[(r, c)];
                if v != 0.0 {
                    t.push((r, c, v));
                }
            }
        }
        t
    }

    pub fn from_triplets(
        kind: ConstraintKind,
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
        alpha: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        let mut gamma = DMatrix::zeros(rows, cols);
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::Format(format!("triplet ({r}, {c}) outside {rows}x{cols}")));
            }
            gamma[(r, c)] += v;
        }
        Self::new(kind, gamma, DVector::from_vec(alpha), precision)
    }
}

/// `Γ y - α`.
pub fn eval_residual(cs: &LinearConstraintSet, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != cs.gamma.ncols() {
        return Err(Error::DimensionMismatch { expected: cs.gamma.ncols(), got: y.len() });
    }
    let r = &cs.gamma * DVector::from_column_slice(y) - &cs.alpha;
    Ok(r.as_slice().to_vec())
}

fn weighted_rows(sys: &FemSystem, weights: &[Vec<f64>], kind: ConstraintKind) -> Result<LinearConstraintSet> {
    let mesh = sys.mesh();
    let n = mesh.num_nodes();
    let mut gamma = DMatrix::zeros(weights.len(), n);
    let mut alpha = DVector::zeros(weights.len());
    for (m, w) in weights.iter().enumerate() {
        let mut w = w.clone();
        for &d in mesh.dirichlet_nodes() {
            w[d] = 0.0;
        }
        let kw = sys.apply_stiffness(&w);
        for c in 0..n {
            gamma[(m, c)] = kw[c];
        }
        alpha[m] = w.iter().zip(sys.load()).map(|(a, b)| a * b).sum();
    }
    LinearConstraintSet::new(kind, gamma, alpha, Precision::Exact)
}

/// Weighted residuals with the coarse-mesh shape functions as weights, one per
/// coarse node. Rows for coarse Dirichlet nodes are kept with their weights
/// zeroed at the fine Dirichlet nodes.
pub fn build_cgr(sys: &FemSystem, coarse: &Mesh) -> Result<LinearConstraintSet> {
    let prolong = Prolongation::new(sys.mesh(), coarse)?;
    let weights: Vec<Vec<f64>> = (0..coarse.num_nodes()).map(|m| prolong.column(m)).collect();
    weighted_rows(sys, &weights, ConstraintKind::Cgr)
}

/// Weighted residuals with weights `exp(-‖s - c‖²/ℓ²)` at uniformly drawn centers.
pub fn build_randomized<R: Rng + ?Sized>(sys: &FemSystem, count: usize, scale: f64, rng: &mut R) -> Result<LinearConstraintSet> {
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter(format!("radial weight scale must be positive, got {scale}")));
    }
    let nodes = sys.mesh().nodes();
    let inv = 1.0 / (scale * scale);
    let weights: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let c: [f64; 2] = [rng.random(), rng.random()];
            nodes
                .iter()
                .map(|s| (-((s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2)) * inv).exp())
                .collect()
        })
        .collect();
    weighted_rows(sys, &weights, ConstraintKind::Randomized)
}

/// Outward flux of `-κ∇u` across the boundary of each coarse cell, minus the
/// source integrated over the cell. Each boundary edge uses the discrete flux
/// of the fine element inside the cell.
pub fn build_flux(sys: &FemSystem, coarse: &Mesh, source_integral: impl Fn(usize) -> f64) -> Result<LinearConstraintSet> {
    let mesh = sys.mesh();
    let df = mesh.grid_size();
    let dc = coarse.grid_size();
    if df % dc != 0 {
        return Err(Error::GridMismatch { fine: df, coarse: dc });
    }
    let r = df / dc;
    let h = mesh.spacing();
    let kappa = sys.kappa();
    let mut gamma = DMatrix::zeros(coarse.num_pixels(), mesh.num_nodes());
    let mut alpha = DVector::zeros(coarse.num_pixels());
    for cell in 0..coarse.num_pixels() {
        let (crow, ccol) = (cell / dc, cell % dc);
        let mut add_edge = |pixel: usize, upper: bool, normal: [f64; 2]| {
            let e = 2 * pixel + usize::from(upper);
            let g = mesh.element_gradients(e);
            let c = kappa[pixel];
            for (a, &node) in mesh.element(e).iter().enumerate() {
                gamma[(cell, node)] -= c * h * (normal[0] * g[a][0] + normal[1] * g[a][1]);
            }
        };
        for k in 0..r {
            let bottom = (crow * r) * df + ccol * r + k;
            let top = (crow * r + r - 1) * df + ccol * r + k;
            let left = (crow * r + k) * df + ccol * r;
            let right = (crow * r + k) * df + ccol * r + r - 1;
            add_edge(bottom, false, [0.0, -1.0]);
            add_edge(top, true, [0.0, 1.0]);
            add_edge(left, true, [-1.0, 0.0]);
            add_edge(right, false, [1.0, 0.0]);
        }
        alpha[cell] = source_integral(cell);
    }
    LinearConstraintSet::new(
        ConstraintKind::Flux,
        gamma,
        alpha,
        Precision::Learned(GammaPosterior { shape: 1.0, rate: 1.0 }),
    )
}

/// Flux rows for a constant source `f`: each cell integrates to `f` times its area.
pub fn build_flux_constant(sys: &FemSystem, coarse: &Mesh, source: f64) -> Result<LinearConstraintSet> {
    let area = 1.0 / coarse.num_pixels() as f64;
    build_flux(sys, coarse, |_| source * area)
}

/// Virtual likelihood `exp(-τ V(y))` of the discrete potential energy.
#[derive(Debug, Clone)]
pub struct EnergyObservable {
    pub system: Arc<FemSystem>,
    pub tau: f64,
}

impl EnergyObservable {
    pub fn new(system: Arc<FemSystem>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tempering must be positive, got {tau}")));
        }
        Ok(Self { system, tau })
    }
}

/// `-τ V(y)`, dropping terms independent of `y` and the model.
pub fn energy_logpdf(obs: &EnergyObservable, y: &[f64]) -> Result<f64> {
    let n = obs.system.mesh().num_nodes();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    Ok(-obs.tau * obs.system.energy(y))
}

pub fn energy_logpdf_gradient(obs: &EnergyObservable, y: &[f64]) -> Vec<f64> {
    obs.system.energy_gradient(y).into_iter().map(|g| -obs.tau * g).collect()
}

/// A bundle of constraint groups imposed at one query point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintBundle {
    pub groups: Vec<LinearConstraintSet>,
}

impl ConstraintBundle {
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All groups stacked into one `Γ`, `α`, and per-row `1/λ`.
    pub fn stacked(&self, cols: usize) -> (DMatrix<f64>, DVector<f64>, Vec<f64>) {
        let m = self.len();
        let mut gamma = DMatrix::zeros(m, cols);
        let mut alpha = DVector::zeros(m);
        let mut inv = Vec::with_capacity(m);
        let mut at = 0;
        for g in &self.groups {
            gamma.rows_mut(at, g.len()).copy_from(&g.gamma);
            alpha.rows_mut(at, g.len()).copy_from(&g.alpha);
            inv.extend(g.inverse_precision());
            at += g.len();
        }
        (gamma, alpha, inv)
    }
}
