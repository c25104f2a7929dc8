//! P1 finite elements for `-∇·(κ∇u) = f` on the unit square, Dirichlet data on
//! the left and right edges and zero flux on the top and bottom.

mod mesh;
mod prolong;
mod system;

pub use mesh::{build_mesh, p1_gradients, Mesh, NOT_FREE};
pub use prolong::Prolongation;
pub use system::{assemble, element_flux, energy, solve, solve_count, solve_vjp, FemSystem, Solution, Source};
