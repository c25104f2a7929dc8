use nalgebra::DMatrix;

use super::mesh::Mesh;
use crate::error::{Error, Result};

/// Interpolation of coarse P1 fields onto the nodes of a nested fine mesh.
///
/// Row `n` holds the coarse basis values at fine node `n`; at most three are
/// nonzero. Because the coarse triangles are unions of fine ones, the image
/// of a coarse field is that same field, not an approximation of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prolongation {
    fine_nodes: usize,
    coarse_nodes: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Prolongation {
    pub fn new(fine: &Mesh, coarse: &Mesh) -> Result<Self> {
        let df = fine.grid_size();
        let dc = coarse.grid_size();
        if df % dc != 0 {
            return Err(Error::GridMismatch { fine: df, coarse: dc });
        }
        let r = df / dc;
        let rf = r as f64;
        let mut rows = Vec::with_capacity(fine.num_nodes());
        for j in 0..=df {
            for i in 0..=df {
                let col = (i / r).min(dc - 1);
                let row = (j / r).min(dc - 1);
                let xi = (i - col * r) as f64 / rf;
                let eta = (j - row * r) as f64 / rf;
                let n00 = coarse.node_index(col, row);
                let n10 = n00 + 1;
                let n01 = coarse.node_index(col, row + 1);
                let n11 = n01 + 1;
                let weights = if xi >= eta {
                    [(n00, 1.0 - xi), (n10, xi - eta), (n11, eta)]
                } else {
                    [(n00, 1.0 - eta), (n11, xi), (n01, eta - xi)]
                };
                rows.push(weights.into_iter().filter(|(_, w)| *w != 0.0).collect());
            }
        }
        Ok(Self { fine_nodes: fine.num_nodes(), coarse_nodes: coarse.num_nodes(), rows })
    }

    pub fn fine_len(&self) -> usize {
        self.fine_nodes
    }

    pub fn coarse_len(&self) -> usize {
        self.coarse_nodes
    }

    pub fn row(&self, n: usize) -> &[(usize, f64)] {
        &self.rows[n]
    }

    pub fn apply(&self, coarse: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|(c, w)| w * coarse[*c]).sum()).collect()
    }

    pub fn apply_transpose(&self, fine: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.coarse_nodes];
        for (r, v) in self.rows.iter().zip(fine) {
            for (c, w) in r {
                out[*c] += w * v;
            }
        }
        out
    }

    /// Fine-mesh nodal values of the coarse basis function of node `m`.
    pub fn column(&self, m: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().find(|(c, _)| *c == m).map_or(0.0, |(_, w)| *w))
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.fine_nodes, self.coarse_nodes);
        for (n, r) in self.rows.iter().enumerate() {
            for (c, w) in r {
                p[(n, *c)] = *w;
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_mesh;

    #[test]
    fn partition_of_unity_and_linear_exactness() {
        let f = build_mesh(8).unwrap();
        let c = build_mesh(2).unwrap();
        let p = Prolongation::new(&f, &c).unwrap();
        let ones = p.apply(&vec![1.0; c.num_nodes()]);
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let lin: Vec<f64> = c.nodes().iter().map(|s| 0.3 + 2.0 * s[0] - s[1]).collect();
        let out = p.apply(&lin);
        for (n, v) in out.iter().enumerate() {
            let s = f.node(n);
            assert!((v - (0.3 + 2.0 * s[0] - s[1])).abs() < 1e-13);
        }
    }

    #[test]
    fn coarse_nodes_are_injected() {
        let f = build_mesh(6).unwrap();
        let c = build_mesh(3).unwrap();
        let p = Prolongation::new(&f, &c).unwrap();
        for m in 0..c.num_nodes() {
            let s = c.node(m);
            let n = f.node_index((s[0] * 6.0).round() as usize, (s[1] * 6.0).round() as usize);
            assert_eq!(p.row(n), &[(m, 1.0)]);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let f = build_mesh(4).unwrap();
        let c = build_mesh(2).unwrap();
        let p = Prolongation::new(&f, &c).unwrap();
        let u: Vec<f64> = (0..9).map(|i| (i as f64).cos()).collect();
        let v: Vec<f64> = (0..25).map(|i| (i as f64 * 0.7).sin()).collect();
        let lhs: f64 = p.apply(&u).iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = p.apply_transpose(&v).iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-13);
        let dense = p.to_dense();
        assert_eq!(dense.column(4).iter().copied().collect::<Vec<_>>(), p.column(4));
    }

    #[test]
    fn rejects_non_nested() {
        let f = build_mesh(6).unwrap();
        let c = build_mesh(4).unwrap();
        assert!(matches!(Prolongation::new(&f, &c), Err(Error::GridMismatch { fine: 6, coarse: 4 })));
    }
}
