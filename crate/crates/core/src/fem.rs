//! Conforming Q1 finite elements on the fine grid.
//!
//! Local vertex order on a cell is `(0,0), (1,0), (0,1), (1,1)`.

use crate::coefficient::CoefficientField;
use crate::error::Result;
use crate::linalg::{KktSolver, SparseCholesky, SparseMatrix};
use crate::mesh::MeshHierarchy;

pub type ElementMatrix = [[f64; 4]; 4];

/// Exact stiffness and mass matrices of a square Q1 cell with constant
/// coefficient `a_cell`.
pub fn q1_element_matrices(cell_size: f64, a_cell: f64) -> (ElementMatrix, ElementMatrix) {
    // local vertices i and k share an edge iff their bit patterns differ in one bit
    let mut stiffness = [[0.0; 4]; 4];
    let mut mass = [[0.0; 4]; 4];
    let h2 = cell_size * cell_size;
    for i in 0..4usize {
        for k in 0..4usize {
            let (s, m) = match (i ^ k).count_ones() {
                0 => (2.0 / 3.0, 4.0),
                1 => (-1.0 / 6.0, 2.0),
                _ => (-1.0 / 3.0, 1.0),
            };
            stiffness[i][k] = a_cell * s;
            mass[i][k] = h2 * m / 36.0;
        }
    }
    (stiffness, mass)
}

/// Fine vertices of cell `(cx, cy)` in local order.
pub fn cell_vertices(cx: usize, cy: usize) -> [(usize, usize); 4] {
    [(cx, cy), (cx + 1, cy), (cx, cy + 1), (cx + 1, cy + 1)]
}

/// Assembled fine matrices.
#[derive(Clone, Debug)]
pub struct FineSystem {
    mesh: MeshHierarchy,
    /// `S_h` on interior dofs.
    pub stiffness: SparseMatrix,
    /// `M_h` on interior dofs.
    pub mass: SparseMatrix,
    /// Stiffness on all vertices, before Dirichlet elimination.
    pub stiffness_full: SparseMatrix,
    /// Mass on all vertices, before Dirichlet elimination.
    pub mass_full: SparseMatrix,
}

fn cell_row_triplets(
    mesh: &MeshHierarchy,
    cy: usize,
    coefficient: &[f64],
    full: bool,
    stiffness: bool,
) -> Vec<(usize, usize, f64)> {
    let nf = mesh.fine_cells_per_dim();
    let h = mesh.fine_size();
    let mut out = Vec::with_capacity(nf * 16);
    for cx in 0..nf {
        let (ke, me) = q1_element_matrices(h, coefficient[cy * nf + cx]);
        let local = if stiffness { ke } else { me };
        let verts = cell_vertices(cx, cy);
        let ids: [Option<usize>; 4] = verts.map(|(ix, iy)| {
            if full {
                Some(mesh.vertex_index(ix, iy))
            } else {
                mesh.dof_of_vertex(ix, iy)
            }
        });
        for i in 0..4 {
            let Some(gi) = ids[i] else { continue };
            for k in 0..4 {
                if let Some(gk) = ids[k] {
                    out.push((gi, gk, local[i][k]));
                }
            }
        }
    }
    out
}

fn assemble_one(mesh: &MeshHierarchy, coefficient: &[f64], full: bool, stiffness: bool) -> SparseMatrix {
    let nf = mesh.fine_cells_per_dim();
    let rows: Vec<Vec<(usize, usize, f64)>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..nf)
                .into_par_iter()
                .map(|cy| cell_row_triplets(mesh, cy, coefficient, full, stiffness))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..nf)
                .map(|cy| cell_row_triplets(mesh, cy, coefficient, full, stiffness))
                .collect()
        }
    };
    // concatenation in cell order keeps the summation order fixed
    let triplets: Vec<_> = rows.into_iter().flatten().collect();
    let n = if full { mesh.n_fine_vertices() } else { mesh.n_fine_dofs() };
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// Stiffness on interior dofs for an arbitrary per-cell coefficient.
pub fn assemble_stiffness(mesh: &MeshHierarchy, coefficient: &[f64]) -> SparseMatrix {
    assert_eq!(coefficient.len(), mesh.n_fine_cells());
    assemble_one(mesh, coefficient, false, true)
}

pub fn assemble(mesh: &MeshHierarchy, coefficient: &CoefficientField) -> FineSystem {
    let a = coefficient.values();
    assert_eq!(a.len(), mesh.n_fine_cells());
    let ones = vec![1.0; a.len()];
    FineSystem {
        mesh: *mesh,
        stiffness: assemble_one(mesh, a, false, true),
        mass: assemble_one(mesh, &ones, false, false),
        stiffness_full: assemble_one(mesh, a, true, true),
        mass_full: assemble_one(mesh, &ones, true, false),
    }
}

impl FineSystem {
    pub fn mesh(&self) -> &MeshHierarchy {
        &self.mesh
    }

    pub fn n_dofs(&self) -> usize {
        self.stiffness.nrows()
    }

    pub fn energy_norm(&self, v: &[f64]) -> f64 {
        self.stiffness.quad_form(v).max(0.0).sqrt()
    }

    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        self.mass.quad_form(v).max(0.0).sqrt()
    }
}

/// Cell-restricted stiffness action `a|_T(v, φ_i)` over the fine cells of the
/// coarse element `element`. `v` is given per fine vertex; the result lists
/// `(vertex, value)` for the `(r+1)²` vertices of the element closure,
/// row-major.
pub fn element_stiffness_action(
    mesh: &MeshHierarchy,
    coefficient: &CoefficientField,
    element: usize,
    v: impl Fn(usize, usize) -> f64,
) -> Vec<(usize, f64)> {
    let r = mesh.fine_per_coarse();
    let nf = mesh.fine_cells_per_dim();
    let (x0, y0) = mesh.element_fine_origin(element);
    let mut acc = vec![0.0; (r + 1) * (r + 1)];
    for ly in 0..r {
        for lx in 0..r {
            let (cx, cy) = (x0 + lx, y0 + ly);
            let (ke, _) = q1_element_matrices(mesh.fine_size(), coefficient.value(cy * nf + cx));
            let verts = cell_vertices(cx, cy);
            let vals = verts.map(|(ix, iy)| v(ix, iy));
            let local = cell_vertices(lx, ly);
            for i in 0..4 {
                let s: f64 = (0..4).map(|k| ke[i][k] * vals[k]).sum();
                acc[local[i].1 * (r + 1) + local[i].0] += s;
            }
        }
    }
    let mut out = Vec::with_capacity(acc.len());
    for ly in 0..=r {
        for lx in 0..=r {
            out.push((mesh.vertex_index(x0 + lx, y0 + ly), acc[ly * (r + 1) + lx]));
        }
    }
    out
}

/// Nodal interpolant on interior dofs.
pub fn interpolate(mesh: &MeshHierarchy, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    (0..mesh.n_fine_dofs())
        .map(|d| {
            let (ix, iy) = mesh.vertex_of_dof(d);
            let (x, y) = mesh.vertex_point(ix, iy);
            f(x, y)
        })
        .collect()
}

/// Nodal interpolant on every fine vertex.
pub fn interpolate_full(mesh: &MeshHierarchy, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    (0..mesh.n_fine_vertices())
        .map(|v| {
            let (ix, iy) = mesh.vertex_coords(v);
            let (x, y) = mesh.vertex_point(ix, iy);
            f(x, y)
        })
        .collect()
}

/// Extends an interior-dof vector by zero boundary values.
pub fn embed(mesh: &MeshHierarchy, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_fine_vertices()];
    for (d, &x) in v.iter().enumerate() {
        let (ix, iy) = mesh.vertex_of_dof(d);
        out[mesh.vertex_index(ix, iy)] = x;
    }
    out
}

pub fn solve_spd(matrix: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    SparseCholesky::new(matrix)?.solve(rhs)
}

pub fn solve_kkt(
    stiffness_block: &SparseMatrix,
    constraints: &SparseMatrix,
    rhs_primal: &[f64],
    rhs_multiplier: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    KktSolver::new(stiffness_block, constraints)?.solve(rhs_primal, rhs_multiplier)
}
