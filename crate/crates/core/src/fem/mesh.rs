use crate::error::{Error, Result};

/// Structured P1 triangulation of the unit square.
///
/// Node `(i, j)` sits at `(i/d, j/d)` with index `j*(d+1) + i`. Pixel `p`
/// (row-major, `row = p / d`) is split along its lower-left to upper-right
/// diagonal into elements `2p` and `2p+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    grid_size: usize,
    elements: Vec<[usize; 3]>,
    free: Vec<usize>,
    dirichlet: Vec<usize>,
    free_index: Vec<usize>,
    /// Basis gradients for the two element shapes (lower and upper triangle).
    gradients: [[[f64; 2]; 3]; 2],
    unit_stiffness: [[[f64; 3]; 3]; 2],
}

pub const NOT_FREE: usize = usize::MAX;

impl Mesh {
    pub fn new(d: usize) -> Result<Self> {
        if d < 1 {
            return Err(Error::InvalidSize(d));
        }
        let n1 = d + 1;
        let mut elements = Vec::with_capacity(2 * d * d);
        for row in 0..d {
            for col in 0..d {
                let n00 = row * n1 + col;
                let n10 = n00 + 1;
                let n01 = n00 + n1;
                let n11 = n01 + 1;
                elements.push([n00, n10, n11]);
                elements.push([n00, n11, n01]);
            }
        }
        let mut free = Vec::new();
        let mut dirichlet = Vec::new();
        let mut free_index = vec![NOT_FREE; n1 * n1];
        for j in 0..n1 {
            for i in 0..n1 {
                let n = j * n1 + i;
                if i == 0 || i == d {
                    dirichlet.push(n);
                } else {
                    free_index[n] = free.len();
                    free.push(n);
                }
            }
        }
        let h = 1.0 / d as f64;
        let lower = [[0.0, 0.0], [h, 0.0], [h, h]];
        let upper = [[0.0, 0.0], [h, h], [0.0, h]];
        let gradients = [p1_gradients(&lower), p1_gradients(&upper)];
        let area = 0.5 * h * h;
        let unit_stiffness = gradients.map(|g| {
            let mut k = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    k[a][b] = area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                }
            }
            k
        });
        Ok(Self { grid_size: d, elements, free, dirichlet, free_index, gradients, unit_stiffness })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.grid_size as f64
    }

    pub fn num_nodes(&self) -> usize {
        (self.grid_size + 1) * (self.grid_size + 1)
    }

    pub fn num_pixels(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.grid_size + 1) + i
    }

    pub fn node(&self, n: usize) -> [f64; 2] {
        let n1 = self.grid_size + 1;
        let h = self.spacing();
        [(n % n1) as f64 * h, (n / n1) as f64 * h]
    }

    pub fn nodes(&self) -> Vec<[f64; 2]> {
        (0..self.num_nodes()).map(|n| self.node(n)).collect()
    }

    pub fn element(&self, e: usize) -> [usize; 3] {
        self.elements[e]
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn pixel_of_element(&self, e: usize) -> usize {
        e / 2
    }

    pub fn element_area(&self, _e: usize) -> f64 {
        0.5 * self.spacing() * self.spacing()
    }

    /// Gradients of the three local basis functions on element `e`.
    pub fn element_gradients(&self, e: usize) -> &[[f64; 2]; 3] {
        &self.gradients[e % 2]
    }

    /// `∫_e ∇φ_a·∇φ_b` for the local nodes of `e`.
    pub fn unit_stiffness(&self, e: usize) -> &[[f64; 3]; 3] {
        &self.unit_stiffness[e % 2]
    }

    pub fn element_centroid(&self, e: usize) -> [f64; 2] {
        let [a, b, c] = self.elements[e];
        let (pa, pb, pc) = (self.node(a), self.node(b), self.node(c));
        [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0]
    }

    pub fn is_dirichlet(&self, n: usize) -> bool {
        self.free_index[n] == NOT_FREE
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    pub fn dirichlet_nodes(&self) -> &[usize] {
        &self.dirichlet
    }

    /// Position of node `n` among the free nodes, or [`NOT_FREE`].
    pub fn free_index(&self, n: usize) -> usize {
        self.free_index[n]
    }

    /// Node sitting at `(0.5, 0.5)` when the grid size is even.
    pub fn center_node(&self) -> Option<usize> {
        (self.grid_size % 2 == 0).then(|| self.node_index(self.grid_size / 2, self.grid_size / 2))
    }
}

/// Constant gradients of the linear basis functions of a triangle.
pub fn p1_gradients(p: &[[f64; 2]; 3]) -> [[f64; 2]; 3] {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut g = [[0.0; 2]; 3];
    for a in 0..3 {
        let b = (a + 1) % 3;
        let c = (a + 2) % 3;
        g[a] = [(p[b][1] - p[c][1]) / det, (p[c][0] - p[b][0]) / det];
    }
    g
}

pub fn build_mesh(d: usize) -> Result<Mesh> {
    Mesh::new(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let m = build_mesh(1).unwrap();
        assert_eq!((m.num_nodes(), m.num_elements()), (4, 2));
        let m = build_mesh(2).unwrap();
        assert_eq!((m.num_nodes(), m.num_elements()), (9, 8));
        assert_eq!(build_mesh(32).unwrap().num_nodes(), 1089);
        assert!(matches!(build_mesh(0), Err(Error::InvalidSize(0))));
    }

    #[test]
    fn areas_sum_to_one_and_nodes_distinct() {
        let m = build_mesh(5).unwrap();
        let total: f64 = (0..m.num_elements()).map(|e| m.element_area(e)).sum();
        assert!((total - 1.0).abs() < 1e-14);
        for e in m.elements() {
            assert!(e[0] != e[1] && e[1] != e[2] && e[0] != e[2]);
            assert!(e.iter().all(|&n| n < m.num_nodes()));
        }
        let mut owned = vec![0; m.num_pixels()];
        for e in 0..m.num_elements() {
            owned[m.pixel_of_element(e)] += 1;
        }
        assert!(owned.iter().all(|&c| c == 2));
    }

    #[test]
    fn orientation_is_positive() {
        let m = build_mesh(3).unwrap();
        for e in m.elements() {
            let [a, b, c] = e.map(|n| m.node(n));
            let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
            assert!(det > 0.0);
        }
    }

    #[test]
    fn gradients_reproduce_linear_functions() {
        let m = build_mesh(4).unwrap();
        for e in 0..m.num_elements() {
            let g = m.element_gradients(e);
            let nodes = m.element(e).map(|n| m.node(n));
            let mut grad = [0.0; 2];
            for a in 0..3 {
                let u = 2.0 * nodes[a][0] - 3.0 * nodes[a][1];
                grad[0] += u * g[a][0];
                grad[1] += u * g[a][1];
            }
            assert!((grad[0] - 2.0).abs() < 1e-12 && (grad[1] + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_right_triangle_stencil() {
        let m = build_mesh(1).unwrap();
        let k = m.unit_stiffness(0);
        let expected = [[0.5, -0.5, 0.0], [-0.5, 1.0, -0.5], [0.0, -0.5, 0.5]];
        for a in 0..3 {
            for b in 0..3 {
                assert!((k[a][b] - expected[a][b]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn boundary_partition() {
        let m = build_mesh(4).unwrap();
        assert_eq!(m.dirichlet_nodes().len(), 10);
        assert_eq!(m.free_nodes().len(), 15);
        for &n in m.dirichlet_nodes() {
            let s = m.node(n);
            assert!(s[0] == 0.0 || s[0] == 1.0);
        }
        assert_eq!(m.center_node(), Some(12));
        assert_eq!(m.node(12), [0.5, 0.5]);
    }
}
