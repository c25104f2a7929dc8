//! Diagonal `q(y)` for the energy observable via randomized block Newton sweeps.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CscMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::vobs::EnergyObservable;

pub const DEFAULT_BLOCK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockNewtonResult {
    pub x: Vec<f64>,
    /// `½xᵀAx - bᵀx` after each sweep, starting with the initial value.
    pub objective: Vec<f64>,
}

fn matvec(a: &CscMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for (j, col) in a.col_iter().enumerate() {
        let xj = x[j];
        for (&i, v) in col.row_indices().iter().zip(col.values()) {
            out[i] += v * xj;
        }
    }
    out
}

fn objective(a: &CscMatrix<f64>, b: &[f64], x: &[f64]) -> f64 {
    let ax = matvec(a, x);
    x.iter().zip(&ax).zip(b).map(|((x, ax), b)| 0.5 * x * ax - b * x).sum()
}

/// Minimizes `½xᵀAx - bᵀx` for symmetric positive definite `A` by sweeps over
/// a random partition of the coordinates into blocks, each block minimized exactly.
pub fn block_newton<R: Rng + ?Sized>(
    a: &CscMatrix<f64>,
    b: &[f64],
    x0: &[f64],
    block: usize,
    max_sweeps: usize,
    tol: f64,
    rng: &mut R,
) -> Result<BlockNewtonResult> {
    let n = a.nrows();
    for len in [a.ncols(), b.len(), x0.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    let block = block.max(1);
    let mut x = x0.to_vec();
    let mut history = vec![objective(a, b, &x)];
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = vec![usize::MAX; n];
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..max_sweeps {
        order.shuffle(rng);
        for chunk in order.chunks(block) {
            for (k, &i) in chunk.iter().enumerate() {
                pos[i] = k;
            }
            let m = chunk.len();
            let mut abb = DMatrix::zeros(m, m);
            let mut r = DVector::zeros(m);
            for (k, &i) in chunk.iter().enumerate() {
                r[k] = b[i];
            }
            // residual b - A x on the block and the block matrix, read by columns
            for (j, col) in a.col_iter().enumerate() {
                let xj = x[j];
                let pj = pos[j];
                for (&i, v) in col.row_indices().iter().zip(col.values()) {
                    let pi = pos[i];
                    if pi == usize::MAX {
                        continue;
                    }
                    r[pi] -= v * xj;
                    if pj != usize::MAX {
                        abb[(pi, pj)] += v;
                    }
                }
            }
            let chol = abb.cholesky().ok_or(Error::SingularSystem)?;
            let d = chol.solve(&r);
            for (k, &i) in chunk.iter().enumerate() {
                x[i] += d[k];
                pos[i] = usize::MAX;
            }
        }
        let f = objective(a, b, &x);
        let prev = *history.last().expect("non-empty");
        if f > prev + 1e-12 * prev.abs().max(1.0) {
            return Err(Error::Divergence { before: prev, after: f });
        }
        history.push(f);
        let ax = matvec(a, &x);
        let rnorm = ax.iter().zip(b).map(|(ax, b)| (b - ax) * (b - ax)).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            break;
        }
    }
    Ok(BlockNewtonResult { x, objective: history })
}

/// Diagonal Gaussian over the free nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalQ {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Optimal diagonal `q(y)` on free nodes for the energy likelihood with
/// prior-like term `N(h, diag(1/s_inv))`: mean solves
/// `(diag s_inv + τK_ff) μ = τ(f_f - K_fc y_c) + s_inv ⊙ h`, variances are
/// inverse diagonal precisions.
pub fn update_qy_energy<R: Rng + ?Sized>(
    obs: &EnergyObservable,
    s_inv: &[f64],
    h_mean: &[f64],
    init: Option<&[f64]>,
    sweeps: usize,
    block: usize,
    rng: &mut R,
) -> Result<DiagonalQ> {
    let sys = &obs.system;
    let nf = sys.mesh().free_nodes().len();
    for len in [s_inv.len(), h_mean.len()] {
        if len != nf {
            return Err(Error::DimensionMismatch { expected: nf, got: len });
        }
    }
    let mut a = sys.reduced_csc();
    for v in a.values_mut() {
        *v *= obs.tau;
    }
    let diag_pattern = CscMatrix::try_from_csc_data(
        nf,
        nf,
        (0..=nf).collect(),
        (0..nf).collect(),
        s_inv.to_vec(),
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    let a = &a + &diag_pattern;
    let rhs = sys.reduced_rhs();
    let b: Vec<f64> = rhs.iter().zip(s_inv).zip(h_mean).map(|((r, s), h)| obs.tau * r + s * h).collect();
    let x0 = init.map_or_else(|| h_mean.to_vec(), |v| v.to_vec());
    let res = block_newton(&a, &b, &x0, block, sweeps, 1e-12, rng)?;
    let mut var = vec![0.0; nf];
    for (j, col) in a.col_iter().enumerate() {
        for (&i, v) in col.row_indices().iter().zip(col.values()) {
            if i == j {
                var[j] = 1.0 / v;
            }
        }
    }
    Ok(DiagonalQ { mean: res.x, var })
}
