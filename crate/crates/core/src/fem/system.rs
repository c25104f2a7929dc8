use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use super::mesh::{Mesh, NOT_FREE};
use crate::error::{Error, Result};
use crate::field::BoundaryCoeffs;

/// Right-hand side `f` of `-∇·(κ∇u) = f`.
#[derive(Clone, Default)]
pub enum Source {
    #[default]
    Zero,
    Constant(f64),
    /// Integrated with the edge-midpoint rule on each triangle.
    Function(Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>),
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Zero => write!(f, "Zero"),
            Source::Constant(c) => write!(f, "Constant({c})"),
            Source::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl Source {
    pub fn is_zero(&self) -> bool {
        matches!(self, Source::Zero) || matches!(self, Source::Constant(c) if *c == 0.0)
    }
}

static SOLVE_COUNTS: Mutex<BTreeMap<usize, u64>> = Mutex::new(BTreeMap::new());

/// Number of forward solves performed so far on grids of size `d`, process-wide.
pub fn solve_count(grid_size: usize) -> u64 {
    SOLVE_COUNTS.lock().map(|m| m.get(&grid_size).copied().unwrap_or(0)).unwrap_or(0)
}

fn record_solve(grid_size: usize) {
    if let Ok(mut m) = SOLVE_COUNTS.lock() {
        *m.entry(grid_size).or_insert(0) += 1;
    }
}

// Below this many free unknowns a dense factorization beats the sparse one.
const DENSE_LIMIT: usize = 96;

enum Factor {
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Sparse(CscCholesky<f64>),
}

impl Factor {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        match self {
            Factor::Dense(c) => c.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec(),
            Factor::Sparse(c) => {
                let mut b = DMatrix::from_column_slice(rhs.len(), 1, rhs);
                c.solve_mut(&mut b);
                b.as_slice().to_vec()
            }
        }
    }
}

/// Assembled linear system for one conductivity field and one set of boundary data.
pub struct FemSystem {
    mesh: Arc<Mesh>,
    kappa: Vec<f64>,
    bc: BoundaryCoeffs,
    stiffness: OnceLock<CscMatrix<f64>>,
    load: Vec<f64>,
    dirichlet_values: Vec<f64>,
    factor: OnceLock<Result<Factor, ()>>,
}

impl fmt::Debug for FemSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FemSystem")
            .field("grid_size", &self.mesh.grid_size())
            .field("bc", &self.bc)
            .finish_non_exhaustive()
    }
}

/// Nodal solution on every node, Dirichlet entries included.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub y: Vec<f64>,
}

pub fn assemble(mesh: &Arc<Mesh>, kappa: &[f64], bc: &BoundaryCoeffs, source: &Source) -> Result<FemSystem> {
    FemSystem::new(mesh.clone(), kappa.to_vec(), *bc, source)
}

impl FemSystem {
    pub fn new(mesh: Arc<Mesh>, kappa: Vec<f64>, bc: BoundaryCoeffs, source: &Source) -> Result<Self> {
        if kappa.len() != mesh.num_pixels() {
            return Err(Error::DimensionMismatch { expected: mesh.num_pixels(), got: kappa.len() });
        }
        if let Some((pixel, &value)) = kappa.iter().enumerate().find(|(_, k)| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::NonPositiveConductivity { pixel, value });
        }
        let load = load_vector(&mesh, source);
        let mut dirichlet_values = vec![0.0; mesh.num_nodes()];
        for &n in mesh.dirichlet_nodes() {
            dirichlet_values[n] = bc.value_at(mesh.node(n));
        }
        Ok(Self {
            mesh,
            kappa,
            bc,
            stiffness: OnceLock::new(),
            load,
            dirichlet_values,
            factor: OnceLock::new(),
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn bc(&self) -> &BoundaryCoeffs {
        &self.bc
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    /// Prescribed values at Dirichlet nodes, zero elsewhere.
    pub fn dirichlet_values(&self) -> &[f64] {
        &self.dirichlet_values
    }

    /// Full stiffness matrix over all nodes.
    pub fn stiffness(&self) -> &CscMatrix<f64> {
        self.stiffness.get_or_init(|| {
            let n = self.mesh.num_nodes();
            let mut coo = CooMatrix::new(n, n);
            for (e, nodes) in self.mesh.elements().iter().enumerate() {
                let k = self.mesh.unit_stiffness(e);
                let c = self.kappa[self.mesh.pixel_of_element(e)];
                for a in 0..3 {
                    for b in 0..3 {
                        coo.push(nodes[a], nodes[b], c * k[a][b]);
                    }
                }
            }
            CscMatrix::from(&coo)
        })
    }

    /// `K v` computed element by element.
    pub fn apply_stiffness(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mesh.num_nodes()];
        for (e, nodes) in self.mesh.elements().iter().enumerate() {
            let k = self.mesh.unit_stiffness(e);
            let c = self.kappa[self.mesh.pixel_of_element(e)];
            for a in 0..3 {
                let mut s = 0.0;
                for b in 0..3 {
                    s += k[a][b] * v[nodes[b]];
                }
                out[nodes[a]] += c * s;
            }
        }
        out
    }

    /// Reduced right-hand side `f_f - K_fc y_c`, ordered like [`Mesh::free_nodes`].
    pub fn reduced_rhs(&self) -> Vec<f64> {
        let lifted = self.apply_stiffness(&self.dirichlet_values);
        self.mesh.free_nodes().iter().map(|&n| self.load[n] - lifted[n]).collect()
    }

    /// Stiffness restricted to free nodes, dense.
    pub fn reduced_dense(&self) -> DMatrix<f64> {
        let nf = self.mesh.free_nodes().len();
        let mut m = DMatrix::zeros(nf, nf);
        self.for_each_free_entry(|i, j, v| m[(i, j)] += v);
        m
    }

    /// Stiffness restricted to free nodes, sparse.
    pub fn reduced_csc(&self) -> CscMatrix<f64> {
        let nf = self.mesh.free_nodes().len();
        let mut coo = CooMatrix::new(nf, nf);
        self.for_each_free_entry(|i, j, v| coo.push(i, j, v));
        CscMatrix::from(&coo)
    }

    fn for_each_free_entry(&self, mut f: impl FnMut(usize, usize, f64)) {
        for (e, nodes) in self.mesh.elements().iter().enumerate() {
            let k = self.mesh.unit_stiffness(e);
            let c = self.kappa[self.mesh.pixel_of_element(e)];
            let idx = nodes.map(|n| self.mesh.free_index(n));
            for a in 0..3 {
                if idx[a] == NOT_FREE {
                    continue;
                }
                for b in 0..3 {
                    if idx[b] != NOT_FREE {
                        f(idx[a], idx[b], c * k[a][b]);
                    }
                }
            }
        }
    }

    fn factor(&self) -> Result<&Factor> {
        let f = self.factor.get_or_init(|| {
            let nf = self.mesh.free_nodes().len();
            if nf <= DENSE_LIMIT {
                self.reduced_dense().cholesky().map(Factor::Dense).ok_or(())
            } else {
                CscCholesky::factor(&self.reduced_csc()).map(Factor::Sparse).map_err(|_| ())
            }
        });
        f.as_ref().map_err(|_| Error::SingularSystem)
    }

    /// Solves `K_ff v = rhs` on the free nodes with the cached factorization.
    pub fn solve_free(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let nf = self.mesh.free_nodes().len();
        if rhs.len() != nf {
            return Err(Error::DimensionMismatch { expected: nf, got: rhs.len() });
        }
        if nf == 0 {
            return Ok(Vec::new());
        }
        Ok(self.factor()?.solve(rhs))
    }

    pub fn solve(&self) -> Result<Solution> {
        record_solve(self.mesh.grid_size());
        let yf = self.solve_free(&self.reduced_rhs())?;
        let mut y = self.dirichlet_values.clone();
        for (&n, v) in self.mesh.free_nodes().iter().zip(yf) {
            y[n] = v;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem);
        }
        Ok(Solution { y })
    }

    /// Gradient of `cotangent·y(κ)` with respect to the pixel conductivities,
    /// given the solution `y` of this system. Uses one adjoint solve.
    pub fn solve_vjp(&self, y: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let n = self.mesh.num_nodes();
        for len in [y.len(), cotangent.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        let mut grad = vec![0.0; self.mesh.num_pixels()];
        let cf: Vec<f64> = self.mesh.free_nodes().iter().map(|&i| cotangent[i]).collect();
        if cf.iter().all(|c| *c == 0.0) {
            return Ok(grad);
        }
        let adj = self.solve_free(&cf)?;
        let mut adj_full = vec![0.0; n];
        for (&i, v) in self.mesh.free_nodes().iter().zip(adj) {
            adj_full[i] = v;
        }
        for (e, nodes) in self.mesh.elements().iter().enumerate() {
            let k = self.mesh.unit_stiffness(e);
            let mut s = 0.0;
            for a in 0..3 {
                let ma = adj_full[nodes[a]];
                if ma == 0.0 {
                    continue;
                }
                for b in 0..3 {
                    s += ma * k[a][b] * y[nodes[b]];
                }
            }
            grad[self.mesh.pixel_of_element(e)] -= s;
        }
        Ok(grad)
    }

    /// `½ yᵀK y - fᵀy` over the full nodal vector.
    pub fn energy(&self, y: &[f64]) -> f64 {
        let ky = self.apply_stiffness(y);
        y.iter().zip(&ky).zip(&self.load).map(|((yi, ki), fi)| 0.5 * yi * ki - fi * yi).sum()
    }

    /// `K y - f`, the gradient of [`FemSystem::energy`].
    pub fn energy_gradient(&self, y: &[f64]) -> Vec<f64> {
        let mut g = self.apply_stiffness(y);
        for (gi, fi) in g.iter_mut().zip(&self.load) {
            *gi -= fi;
        }
        g
    }
}

pub fn solve(sys: &FemSystem) -> Result<Solution> {
    sys.solve()
}

pub fn solve_vjp(sys: &FemSystem, sol: &Solution, cotangent: &[f64]) -> Result<Vec<f64>> {
    sys.solve_vjp(&sol.y, cotangent)
}

pub fn energy(sys: &FemSystem, sol: &Solution) -> f64 {
    sys.energy(&sol.y)
}

fn load_vector(mesh: &Mesh, source: &Source) -> Vec<f64> {
    let mut f = vec![0.0; mesh.num_nodes()];
    match source {
        Source::Zero => {}
        Source::Constant(c) => {
            for (e, nodes) in mesh.elements().iter().enumerate() {
                let w = c * mesh.element_area(e) / 3.0;
                for &n in nodes {
                    f[n] += w;
                }
            }
        }
        Source::Function(func) => {
            for (e, nodes) in mesh.elements().iter().enumerate() {
                let p = nodes.map(|n| mesh.node(n));
                let w = mesh.element_area(e) / 3.0;
                for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                    let mid = [0.5 * (p[a][0] + p[b][0]), 0.5 * (p[a][1] + p[b][1])];
                    // basis values at an edge midpoint: ½ on its two end nodes
                    let v = w * func(mid) * 0.5;
                    f[nodes[a]] += v;
                    f[nodes[b]] += v;
                }
            }
        }
    }
    f
}

/// Element-wise constant flux `-κ ∇u`.
pub fn element_flux(mesh: &Mesh, kappa: &[f64], y: &[f64]) -> Vec<[f64; 2]> {
    mesh.elements()
        .iter()
        .enumerate()
        .map(|(e, nodes)| {
            let g = mesh.element_gradients(e);
            let c = kappa[mesh.pixel_of_element(e)];
            let mut j = [0.0; 2];
            for a in 0..3 {
                j[0] -= c * g[a][0] * y[nodes[a]];
                j[1] -= c * g[a][1] * y[nodes[a]];
            }
            j
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_mesh;

    fn mesh(d: usize) -> Arc<Mesh> {
        Arc::new(build_mesh(d).unwrap())
    }

    fn linear_bc() -> BoundaryCoeffs {
        BoundaryCoeffs::new(0.0, 0.0, 1.0, 1.0)
    }

    #[test]
    fn row_sums_vanish_for_constant_field() {
        let m = mesh(3);
        let sys = assemble(&m, &vec![1.0; 9], &linear_bc(), &Source::Zero).unwrap();
        let k = sys.stiffness();
        let mut sums = vec![0.0; m.num_nodes()];
        for (i, _, v) in k.triplet_iter() {
            sums[i] += v;
        }
        assert!(sums.iter().all(|s| s.abs() < 1e-13));
        assert!(sys.load().iter().all(|f| *f == 0.0));
    }

    #[test]
    fn stiffness_scales_with_conductivity() {
        let m = mesh(2);
        let a = assemble(&m, &[1.0, 2.0, 3.0, 4.0], &linear_bc(), &Source::Zero).unwrap();
        let b = assemble(&m, &[2.5, 5.0, 7.5, 10.0], &linear_bc(), &Source::Zero).unwrap();
        let da = nalgebra::DMatrix::from(a.stiffness());
        let db = nalgebra::DMatrix::from(b.stiffness());
        assert!((da * 2.5 - db).abs().max() < 1e-13);
    }

    #[test]
    fn linear_solution_is_exact() {
        let m = mesh(4);
        let sys = assemble(&m, &vec![1.0; 16], &linear_bc(), &Source::Zero).unwrap();
        let sol = sys.solve().unwrap();
        for (n, y) in sol.y.iter().enumerate() {
            assert!((y - m.node(n)[0]).abs() < 1e-12);
        }
        assert!((sys.energy(&sol.y) - 0.5).abs() < 1e-12);
        for j in element_flux(&m, sys.kappa(), &sol.y) {
            assert!((j[0] + 1.0).abs() < 1e-12 && j[1].abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_conductivity() {
        let m = mesh(2);
        let err = assemble(&m, &[1.0, 0.0, 1.0, 1.0], &linear_bc(), &Source::Zero).unwrap_err();
        assert!(matches!(err, Error::NonPositiveConductivity { pixel: 1, .. }));
        assert!(assemble(&m, &[1.0; 3], &linear_bc(), &Source::Zero).is_err());
    }

    #[test]
    fn constant_source_load_integrates_source() {
        let m = mesh(3);
        let sys = assemble(&m, &vec![1.0; 9], &linear_bc(), &Source::Constant(2.0)).unwrap();
        let total: f64 = sys.load().iter().sum();
        assert!((total - 2.0).abs() < 1e-13);
    }

    #[test]
    fn function_source_matches_constant() {
        let m = mesh(3);
        let a = assemble(&m, &vec![1.0; 9], &linear_bc(), &Source::Constant(1.5)).unwrap();
        let b = assemble(&m, &vec![1.0; 9], &linear_bc(), &Source::Function(Arc::new(|_| 1.5))).unwrap();
        for (x, y) in a.load().iter().zip(b.load()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn large_grid_uses_sparse_path() {
        let m = mesh(16);
        let kappa: Vec<f64> = (0..256).map(|i| 1.0 + 0.5 * ((i as f64) * 0.37).sin()).collect();
        let sys = assemble(&m, &kappa, &BoundaryCoeffs::new(0.3, -0.2, 0.1, 0.4), &Source::Zero).unwrap();
        let sol = sys.solve().unwrap();
        let r = sys.energy_gradient(&sol.y);
        let rhs = sys.reduced_rhs();
        let norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        for &n in m.free_nodes() {
            assert!(r[n].abs() <= 1e-10 * norm);
        }
    }

    #[test]
    fn solve_counter_tracks_grid() {
        let m = mesh(13);
        let before = solve_count(13);
        let sys = assemble(&m, &vec![1.0; 169], &linear_bc(), &Source::Zero).unwrap();
        sys.solve().unwrap();
        sys.solve().unwrap();
        assert_eq!(solve_count(13) - before, 2);
    }
}
