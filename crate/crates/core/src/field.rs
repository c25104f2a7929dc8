//! Lognormal conductivity fields on the pixel grid and randomized Dirichlet data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Squared-exponential Gaussian field for the log-conductivity on `[0,1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    /// Pixels per side.
    pub grid_size: usize,
    pub mean: f64,
    pub std_dev: f64,
    /// Correlation length as a fraction of the domain width.
    pub length_scale: f64,
}

impl GrfSpec {
    pub fn new(grid_size: usize, mean: f64, std_dev: f64, length_scale: f64) -> Result<Self> {
        let spec = Self { grid_size, mean, std_dev, length_scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 1 {
            return Err(Error::InvalidSize(self.grid_size));
        }
        if !(self.std_dev > 0.0) || !(self.length_scale > 0.0) || !self.mean.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "field needs std_dev > 0 and length_scale > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Centroid of pixel `index` (row-major, `row = index / grid_size`).
    pub fn centroid(&self, index: usize) -> [f64; 2] {
        pixel_centroid(self.grid_size, index)
    }
}

pub fn pixel_centroid(grid_size: usize, index: usize) -> [f64; 2] {
    let d = grid_size as f64;
    let row = index / grid_size;
    let col = index % grid_size;
    [(col as f64 + 0.5) / d, (row as f64 + 0.5) / d]
}

/// One realization of the field: log-conductivity and conductivity per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub lambda: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl FieldSample {
    pub fn from_lambda(lambda: Vec<f64>) -> Self {
        let kappa = lambda.iter().map(|l| l.exp()).collect();
        Self { lambda, kappa }
    }
}

/// Dense covariance between pixel centroids.
pub fn covariance_matrix(spec: &GrfSpec) -> DMatrix<f64> {
    let n = spec.num_pixels();
    let var = spec.std_dev * spec.std_dev;
    let inv_l2 = 1.0 / (spec.length_scale * spec.length_scale);
    let centroids: Vec<[f64; 2]> = (0..n).map(|i| spec.centroid(i)).collect();
    DMatrix::from_fn(n, n, |i, j| {
        let dx = centroids[i][0] - centroids[j][0];
        let dy = centroids[i][1] - centroids[j][1];
        var * (-0.5 * (dx * dx + dy * dy) * inv_l2).exp()
    })
}

/// Cached Cholesky factor of the field covariance.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    spec: GrfSpec,
    factor: DMatrix<f64>,
    jitter: f64,
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

impl GrfSampler {
    pub fn new(spec: GrfSpec) -> Result<Self> {
        spec.validate()?;
        // Factor the correlation matrix and rescale, so the jitter schedule is
        // relative to the variance.
        let unit = GrfSpec { std_dev: 1.0, ..spec };
        let corr = covariance_matrix(&unit);
        let n = corr.nrows();
        let mut jitter = JITTER_START;
        loop {
            let mut m = corr.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = m.cholesky() {
                let factor = chol.unpack() * spec.std_dev;
                return Ok(Self { spec, factor, jitter: jitter * spec.std_dev * spec.std_dev });
            }
            jitter *= 2.0;
            if jitter > JITTER_MAX {
                return Err(Error::Factorization { jitter: jitter * spec.std_dev * spec.std_dev });
            }
        }
    }

    pub fn spec(&self) -> &GrfSpec {
        &self.spec
    }

    /// Absolute diagonal jitter that made the covariance factorizable.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldSample {
        let n = self.spec.num_pixels();
        let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let corr = &self.factor * eps;
        let lambda = corr.iter().map(|v| v + self.spec.mean).collect();
        FieldSample::from_lambda(lambda)
    }
}

/// Draws one field with a generator seeded from `seed`.
pub fn sample_grf(spec: &GrfSpec, seed: u64) -> Result<FieldSample> {
    let sampler = GrfSampler::new(*spec)?;
    let mut rng = rng::stream(seed, rng::streams::FIELD);
    Ok(sampler.sample(&mut rng))
}

/// Coefficients of the linear Dirichlet data on the left (`a0`, `a1`) and
/// right (`a2`, `a3`) edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCoeffs {
    pub a: [f64; 4],
}

impl BoundaryCoeffs {
    pub fn new(a0: f64, a1: f64, a2: f64, a3: f64) -> Self {
        Self { a: [a0, a1, a2, a3] }
    }

    pub fn constant(c: f64) -> Self {
        Self { a: [c; 4] }
    }

    /// Prescribed value at a point of the Dirichlet boundary (`s1 = 0` or `s1 = 1`).
    pub fn value_at(&self, s: [f64; 2]) -> f64 {
        let [a0, a1, a2, a3] = self.a;
        if s[0] < 0.5 {
            a0 * s[1] + a1 * (1.0 - s[1])
        } else {
            a2 * s[1] + a3 * (1.0 - s[1])
        }
    }
}

/// Boundary-condition families used for training and extrapolation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BcScenario {
    /// Every coefficient uniform on `[-0.5, 0.5]`.
    #[default]
    UniformDefault,
    A,
    B,
    C,
    D,
}

impl BcScenario {
    pub const CROSS: [BcScenario; 4] = [BcScenario::A, BcScenario::B, BcScenario::C, BcScenario::D];

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BoundaryCoeffs {
        let uniform = Uniform::new_inclusive(-0.5, 0.5).expect("valid range");
        match self {
            BcScenario::UniformDefault => BoundaryCoeffs {
                a: [0; 4].map(|_| uniform.sample(rng)),
            },
            BcScenario::A => BoundaryCoeffs::new(0.0, 0.0, 1.0, 1.0),
            BcScenario::B => BoundaryCoeffs::new(1.0, 1.0, 0.0, 0.0),
            BcScenario::C => {
                let a0 = uniform.sample(rng);
                let a3 = uniform.sample(rng);
                BoundaryCoeffs::new(a0, 0.0, 0.0, a3)
            }
            BcScenario::D => {
                let beta = Beta::new(2.0, 5.0).expect("valid shape");
                let a1 = beta.sample(rng);
                let a2 = -beta.sample(rng);
                BoundaryCoeffs::new(0.0, a1, a2, 0.0)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BcScenario::UniformDefault => "uniform_default",
            BcScenario::A => "a",
            BcScenario::B => "b",
            BcScenario::C => "c",
            BcScenario::D => "d",
        }
    }
}

/// Default randomized boundary data: all four coefficients i.i.d. `U[-0.5, 0.5]`.
pub fn sample_bc<R: Rng + ?Sized>(rng: &mut R) -> BoundaryCoeffs {
    BcScenario::UniformDefault.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_spec(d: usize) -> GrfSpec {
        GrfSpec::new(d, 0.4, 0.8, 0.15).unwrap()
    }

    #[test]
    fn covariance_diagonal_is_variance() {
        let c = covariance_matrix(&paper_spec(4));
        for i in 0..16 {
            assert!((c[(i, i)] - 0.64).abs() < 1e-15);
        }
    }

    #[test]
    fn covariance_two_by_two_matches_kernel() {
        let c = covariance_matrix(&paper_spec(2));
        // centroids (0.25,0.25) and (0.75,0.25)
        let expected = 0.64 * (-0.25f64 / (2.0 * 0.0225)).exp();
        assert!((c[(0, 1)] - expected).abs() < 1e-15);
        assert!((c[(1, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn covariance_decays_with_distance() {
        let spec = GrfSpec::new(64, 0.0, 1.0, 0.04).unwrap();
        let c = covariance_matrix(&spec);
        // opposite corners are ~1.4 apart, 35 length scales
        assert!(c[(0, 64 * 64 - 1)] < 1e-200);
    }

    #[test]
    fn centroid_ordering_is_row_major() {
        assert_eq!(pixel_centroid(4, 0), [0.125, 0.125]);
        assert_eq!(pixel_centroid(4, 1), [0.375, 0.125]);
        assert_eq!(pixel_centroid(4, 4), [0.125, 0.375]);
    }

    #[test]
    fn fixed_seed_reproduces() {
        let spec = paper_spec(8);
        let a = sample_grf(&spec, 11).unwrap();
        let b = sample_grf(&spec, 11).unwrap();
        let c = sample_grf(&spec, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_variance_collapses_to_mean() {
        let spec = GrfSpec::new(6, 0.4, 1e-12, 0.15).unwrap();
        let s = sample_grf(&spec, 3).unwrap();
        for l in &s.lambda {
            assert!((l - 0.4).abs() < 1e-9);
        }
    }

    #[test]
    fn kappa_is_exp_lambda() {
        let s = sample_grf(&paper_spec(8), 5).unwrap();
        for (l, k) in s.lambda.iter().zip(&s.kappa) {
            assert!(*k > 0.0);
            assert!((k.ln() - l).abs() <= 4.0 * f64::EPSILON * l.abs().max(1.0));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(matches!(GrfSpec::new(0, 0.0, 1.0, 0.1), Err(Error::InvalidSize(0))));
        assert!(GrfSpec::new(4, 0.0, 0.0, 0.1).is_err());
        assert!(GrfSpec::new(4, 0.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn fixed_scenarios() {
        let mut r = rng::stream(0, 0);
        assert_eq!(BcScenario::A.sample(&mut r).a, [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(BcScenario::B.sample(&mut r).a, [1.0, 1.0, 0.0, 0.0]);
        for _ in 0..200 {
            let c = BcScenario::C.sample(&mut r);
            assert_eq!((c.a[1], c.a[2]), (0.0, 0.0));
            assert!(c.a[0].abs() <= 0.5 && c.a[3].abs() <= 0.5);
            let d = BcScenario::D.sample(&mut r);
            assert_eq!((d.a[0], d.a[3]), (0.0, 0.0));
            assert!((0.0..=1.0).contains(&d.a[1]) && (-1.0..=0.0).contains(&d.a[2]));
        }
    }

    #[test]
    fn default_bc_support() {
        let mut r = rng::stream(1, 2);
        for _ in 0..1000 {
            let bc = sample_bc(&mut r);
            assert!(bc.a.iter().all(|a| a.abs() <= 0.5));
        }
    }

    #[test]
    fn boundary_value_interpolates_corners() {
        let bc = BoundaryCoeffs::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(bc.value_at([0.0, 0.0]), 2.0);
        assert_eq!(bc.value_at([0.0, 1.0]), 1.0);
        assert_eq!(bc.value_at([1.0, 0.0]), 4.0);
        assert_eq!(bc.value_at([1.0, 1.0]), 3.0);
    }
}
