//! Gaussian `q(y)` conditioned on linear constraints, kept in low-rank form,
//! and the conjugate Gamma update for shared constraint precisions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::vobs::GammaPosterior;

/// Largest number of constraint rows accepted by the conditioning update.
pub const DEFAULT_CONSTRAINT_CAP: usize = 512;

/// `N(μ, Σ)` with `Σ = S - S Γᵀ Ξ⁻¹ Γ S`, `Ξ = Γ S Γᵀ + Λ⁻¹`, `S` diagonal.
#[derive(Debug, Clone)]
pub struct ConstrainedGaussian {
    pub mean: DVector<f64>,
    pub prior_var: DVector<f64>,
    gamma: DMatrix<f64>,
    inv_precision: Vec<f64>,
    xi: Option<Cholesky<f64, Dyn>>,
    /// `L⁻¹ Γ S` with `Ξ = L Lᵀ`; `Σ = S - BᵀB`.
    b: DMatrix<f64>,
}

/// Conditions `N(h, diag(1/s_inv))` on `Γ y = α + noise(Λ⁻¹)`.
///
/// `inv_precision[m]` is `1/λ_m`; zero enforces row `m` exactly.
pub fn update_qy_closedform(
    gamma: &DMatrix<f64>,
    alpha: &DVector<f64>,
    inv_precision: &[f64],
    s_inv: &[f64],
    h_mean: &[f64],
    cap: usize,
) -> Result<ConstrainedGaussian> {
    let (m, n) = gamma.shape();
    if m > cap {
        return Err(Error::TooManyConstraints { got: m, cap });
    }
    for len in [s_inv.len(), h_mean.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    for len in [alpha.len(), inv_precision.len()] {
        if len != m {
            return Err(Error::DimensionMismatch { expected: m, got: len });
        }
    }
    if let Some(v) = s_inv.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::NonPositiveVariance(1.0 / v));
    }
    let s = DVector::from_iterator(n, s_inv.iter().map(|v| 1.0 / v));
    let h = DVector::from_column_slice(h_mean);
    if m == 0 {
        return Ok(ConstrainedGaussian {
            mean: h,
            prior_var: s,
            gamma: gamma.clone(),
            inv_precision: Vec::new(),
            xi: None,
            b: DMatrix::zeros(0, n),
        });
    }
    // Γ S, scaled column-wise
    let mut gs = gamma.clone();
    for (j, mut col) in gs.column_iter_mut().enumerate() {
        col *= s[j];
    }
    let mut xi = &gs * gamma.transpose();
    for (k, v) in inv_precision.iter().enumerate() {
        xi[(k, k)] += v;
    }
    let chol = factor_with_jitter(xi).ok_or(Error::IllConditioned(m))?;
    let b = chol.l().solve_lower_triangular(&gs).ok_or(Error::IllConditioned(m))?;
    let resid = alpha - gamma * &h;
    let w = chol.solve(&resid);
    let mean = &h + gs.transpose() * w;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned(m));
    }
    Ok(ConstrainedGaussian {
        mean,
        prior_var: s,
        gamma: gamma.clone(),
        inv_precision: inv_precision.to_vec(),
        xi: Some(chol),
        b,
    })
}

fn factor_with_jitter(mut xi: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = xi.clone().cholesky() {
        return Some(c);
    }
    let scale = xi.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut jitter = 1e-14 * scale;
    let n = xi.nrows();
    while jitter <= 1e-8 * scale {
        for k in 0..n {
            xi[(k, k)] += jitter;
        }
        if let Some(c) = xi.clone().cholesky() {
            return Some(c);
        }
        for k in 0..n {
            xi[(k, k)] -= jitter;
        }
        jitter *= 10.0;
    }
    None
}

impl ConstrainedGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn has_exact_rows(&self) -> bool {
        self.inv_precision.iter().any(|v| *v == 0.0)
    }

    /// Marginal variances `diag Σ`, clipped at zero.
    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let c = self.b.column(j);
                (self.prior_var[j] - c.dot(&c)).max(0.0)
            })
            .collect()
    }

    pub fn dense_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.prior_var) - self.b.transpose() * &self.b
    }

    /// `tr(G Σ Gᵀ)` for a matrix `G` acting on this space.
    pub fn trace_quadratic(&self, g: &DMatrix<f64>) -> f64 {
        let mut t = 0.0;
        for r in 0..g.nrows() {
            for j in 0..g.ncols() {
                t += g[(r, j)] * g[(r, j)] * self.prior_var[j];
            }
        }
        if self.b.nrows() > 0 {
            let bg = &self.b * g.transpose();
            t -= bg.norm_squared();
        }
        t.max(0.0)
    }

    /// `E‖G y - a‖²` under this distribution.
    pub fn residual_second_moment(&self, g: &DMatrix<f64>, a: &DVector<f64>) -> f64 {
        (g * &self.mean - a).norm_squared() + self.trace_quadratic(g)
    }

    /// `log det Σ`; `None` when some row is exact (Σ singular).
    pub fn log_det(&self) -> Option<f64> {
        if self.has_exact_rows() {
            return None;
        }
        let mut ld: f64 = self.prior_var.iter().map(|v| v.ln()).sum();
        ld += self.inv_precision.iter().map(|v| v.ln()).sum::<f64>();
        if let Some(c) = &self.xi {
            ld -= 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        }
        Some(ld)
    }

    pub fn entropy(&self) -> Option<f64> {
        self.log_det().map(|ld| 0.5 * (self.dim() as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + ld))
    }

    /// Draw by conditioning a prior draw on noisy constraints.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let u = DVector::from_fn(n, |j, _| self.prior_var[j].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let Some(chol) = &self.xi else {
            return &self.mean + u;
        };
        let v = DVector::from_fn(self.num_constraints(), |k, _| {
            self.inv_precision[k].sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        let w = chol.solve(&(&self.gamma * &u + v));
        let mut corr = self.gamma.transpose() * w;
        for j in 0..n {
            corr[j] *= self.prior_var[j];
        }
        &self.mean + u - corr
    }
}

/// Conjugate update `shape = Σ M_i/2 + a₀`, `rate = ½ Σ E‖o_i‖² + b₀`.
pub fn update_precision_gamma(second_moments: &[f64], rows_per_query: &[usize], prior: &GammaPosterior) -> Result<GammaPosterior> {
    if second_moments.len() != rows_per_query.len() {
        return Err(Error::DimensionMismatch { expected: rows_per_query.len(), got: second_moments.len() });
    }
    if let Some(v) = second_moments.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidParameter(format!("residual second moment must be non-negative, got {v}")));
    }
    let shape = prior.shape + rows_per_query.iter().map(|m| *m as f64 / 2.0).sum::<f64>();
    let rate = prior.rate + 0.5 * second_moments.iter().sum::<f64>();
    Ok(GammaPosterior { shape, rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::vobs::GAMMA_PRIOR;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, 0);
        DMatrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn no_constraints_returns_prior() {
        let q = update_qy_closedform(&DMatrix::zeros(0, 3), &DVector::zeros(0), &[], &[2.0, 4.0, 1.0], &[1.0, 2.0, 3.0], 10)
            .unwrap();
        assert_eq!(q.mean.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(q.diag(), vec![0.5, 0.25, 1.0]);
    }

    #[test]
    fn exact_single_constraint() {
        let g = random(1, 5, 3);
        let a = DVector::from_element(1, 0.7);
        let q = update_qy_closedform(&g, &a, &[0.0], &[1.0, 2.0, 0.5, 3.0, 1.5], &[0.1, 0.2, 0.3, 0.4, 0.5], 10).unwrap();
        let gm = (&g * &q.mean)[0];
        assert!((gm - 0.7).abs() < 1e-12);
        let gsg = (&g * q.dense_cov() * g.transpose())[(0, 0)];
        assert!(gsg.abs() < 1e-12);
        assert!(q.log_det().is_none());
    }

    #[test]
    fn cap_enforced() {
        let g = random(3, 4, 1);
        let e = update_qy_closedform(&g, &DVector::zeros(3), &[0.0; 3], &[1.0; 4], &[0.0; 4], 2).unwrap_err();
        assert!(matches!(e, Error::TooManyConstraints { got: 3, cap: 2 }));
    }

    #[test]
    fn non_finite_capacitance_is_ill_conditioned() {
        let mut g = random(2, 4, 2);
        g[(1, 2)] = f64::NAN;
        let e = update_qy_closedform(&g, &DVector::zeros(2), &[0.0, 0.0], &[1.0; 4], &[0.0; 4], 8).unwrap_err();
        assert!(matches!(e, Error::IllConditioned(2)));
    }

    #[test]
    fn gamma_formula() {
        let g = update_precision_gamma(&[0.5], &[2], &GAMMA_PRIOR).unwrap();
        assert_eq!(g.shape, 1.0 + 1e-6);
        assert_eq!(g.rate, 0.25 + 1e-6);
    }
}
