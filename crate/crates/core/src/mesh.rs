//! Nested dyadic meshes of the unit square.
//!
//! Three uniform Cartesian grids share the domain (0,1)²: the coarse grid of
//! the multiscale space, the grid on which the coefficient oscillates and the
//! fine grid carrying the Q1 discretization. All indexing is row-major with
//! `x` running fastest:
//!
//! - coarse element `(i, j)` has flat index `j * n_coarse + i`,
//! - fine vertex `(ix, iy)` has flat index `iy * (n_fine + 1) + ix`,
//! - interior fine dof `(ix, iy)` (with `1 <= ix, iy < n_fine`) has flat
//!   index `(iy - 1) * (n_fine - 1) + (ix - 1)`.

use crate::error::{Error, Result};

/// Three nested uniform meshes with `2^exp` cells per dimension each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MeshHierarchy {
    coarse_exp: u32,
    eps_exp: u32,
    fine_exp: u32,
}

/// Inclusive rectangle of coarse elements `[i0, i1] x [j0, j1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementRect {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl ElementRect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.i0..=self.i1).contains(&i) && (self.j0..=self.j1).contains(&j)
    }

    pub fn width(&self) -> usize {
        self.i1 - self.i0 + 1
    }

    pub fn height(&self) -> usize {
        self.j1 - self.j0 + 1
    }
}

/// Element patch `N^ℓ(K)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub center: usize,
    pub radius: usize,
    pub rect: ElementRect,
    /// Coarse elements of the patch, row-major.
    pub elements: Vec<usize>,
    /// Interior fine dofs strictly inside the patch, row-major.
    pub fine_interior_dofs: Vec<usize>,
}

impl MeshHierarchy {
    pub fn new(coarse_exp: u32, eps_exp: u32, fine_exp: u32) -> Result<Self> {
        if coarse_exp > eps_exp || eps_exp > fine_exp || fine_exp > 14 {
            return Err(Error::NonNestedMesh {
                coarse: coarse_exp,
                eps: eps_exp,
                fine: fine_exp,
            });
        }
        Ok(Self {
            coarse_exp,
            eps_exp,
            fine_exp,
        })
    }

    pub fn coarse_exp(&self) -> u32 {
        self.coarse_exp
    }

    pub fn eps_exp(&self) -> u32 {
        self.eps_exp
    }

    pub fn fine_exp(&self) -> u32 {
        self.fine_exp
    }

    pub fn coarse_cells_per_dim(&self) -> usize {
        1 << self.coarse_exp
    }

    pub fn eps_cells_per_dim(&self) -> usize {
        1 << self.eps_exp
    }

    pub fn fine_cells_per_dim(&self) -> usize {
        1 << self.fine_exp
    }

    /// Coarse mesh size `H`.
    pub fn coarse_size(&self) -> f64 {
        1.0 / self.coarse_cells_per_dim() as f64
    }

    /// Fine mesh size `h`.
    pub fn fine_size(&self) -> f64 {
        1.0 / self.fine_cells_per_dim() as f64
    }

    /// Fine cells along one edge of a coarse element.
    pub fn fine_per_coarse(&self) -> usize {
        1 << (self.fine_exp - self.coarse_exp)
    }

    pub fn n_elements(&self) -> usize {
        let n = self.coarse_cells_per_dim();
        n * n
    }

    pub fn n_fine_cells(&self) -> usize {
        let n = self.fine_cells_per_dim();
        n * n
    }

    pub fn n_fine_vertices(&self) -> usize {
        let n = self.fine_cells_per_dim() + 1;
        n * n
    }

    /// Number of fine dofs after eliminating the Dirichlet boundary.
    pub fn n_fine_dofs(&self) -> usize {
        let n = self.fine_cells_per_dim() - 1;
        n * n
    }

    pub fn element_index(&self, i: usize, j: usize) -> usize {
        j * self.coarse_cells_per_dim() + i
    }

    pub fn element_coords(&self, element: usize) -> (usize, usize) {
        let n = self.coarse_cells_per_dim();
        (element % n, element / n)
    }

    pub fn vertex_index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.fine_cells_per_dim() + 1) + ix
    }

    pub fn vertex_coords(&self, vertex: usize) -> (usize, usize) {
        let n = self.fine_cells_per_dim() + 1;
        (vertex % n, vertex / n)
    }

    /// Interior dof of a fine vertex, `None` on the boundary.
    pub fn dof_of_vertex(&self, ix: usize, iy: usize) -> Option<usize> {
        let n = self.fine_cells_per_dim();
        if ix == 0 || iy == 0 || ix >= n || iy >= n {
            None
        } else {
            Some((iy - 1) * (n - 1) + (ix - 1))
        }
    }

    pub fn vertex_of_dof(&self, dof: usize) -> (usize, usize) {
        let m = self.fine_cells_per_dim() - 1;
        (dof % m + 1, dof / m + 1)
    }

    /// Physical coordinates of a fine vertex.
    pub fn vertex_point(&self, ix: usize, iy: usize) -> (f64, f64) {
        let h = self.fine_size();
        (ix as f64 * h, iy as f64 * h)
    }

    /// Lower-left corner of a coarse element.
    pub fn element_corner(&self, element: usize) -> (f64, f64) {
        let (i, j) = self.element_coords(element);
        let big_h = self.coarse_size();
        (i as f64 * big_h, j as f64 * big_h)
    }

    /// First fine vertex index (per dimension) of coarse element `(i, j)`.
    pub fn element_fine_origin(&self, element: usize) -> (usize, usize) {
        let (i, j) = self.element_coords(element);
        let r = self.fine_per_coarse();
        (i * r, j * r)
    }

    /// Parent ε-cell of a fine cell.
    pub fn eps_cell_of_fine_cell(&self, cell: usize) -> usize {
        let nf = self.fine_cells_per_dim();
        let ne = self.eps_cells_per_dim();
        let shift = self.fine_exp - self.eps_exp;
        let (cx, cy) = (cell % nf, cell / nf);
        (cy >> shift) * ne + (cx >> shift)
    }

    /// Coarse element containing a fine cell.
    pub fn element_of_fine_cell(&self, cell: usize) -> usize {
        let nf = self.fine_cells_per_dim();
        let shift = self.fine_exp - self.coarse_exp;
        let (cx, cy) = (cell % nf, cell / nf);
        self.element_index(cx >> shift, cy >> shift)
    }

    /// Rectangle of `Patch(K, ℓ)`, clipped at the domain boundary.
    pub fn patch_rect(&self, element: usize, radius: usize) -> ElementRect {
        let n = self.coarse_cells_per_dim();
        let (i, j) = self.element_coords(element);
        ElementRect {
            i0: i.saturating_sub(radius),
            i1: (i + radius).min(n - 1),
            j0: j.saturating_sub(radius),
            j1: (j + radius).min(n - 1),
        }
    }

    pub fn patch(&self, element: usize, radius: usize) -> Patch {
        let rect = self.patch_rect(element, radius);
        Patch {
            center: element,
            radius,
            rect,
            elements: self.rect_elements(&rect),
            fine_interior_dofs: self.rect_interior_dofs(&rect),
        }
    }

    pub fn rect_elements(&self, rect: &ElementRect) -> Vec<usize> {
        let mut out = Vec::with_capacity(rect.width() * rect.height());
        for j in rect.j0..=rect.j1 {
            for i in rect.i0..=rect.i1 {
                out.push(self.element_index(i, j));
            }
        }
        out
    }

    /// Fine vertex index ranges (inclusive) spanned by a rectangle.
    pub fn rect_vertex_range(&self, rect: &ElementRect) -> ((usize, usize), (usize, usize)) {
        let r = self.fine_per_coarse();
        ((rect.i0 * r, (rect.i1 + 1) * r), (rect.j0 * r, (rect.j1 + 1) * r))
    }

    /// Interior dofs of the fine vertices strictly inside `rect`.
    pub fn rect_interior_dofs(&self, rect: &ElementRect) -> Vec<usize> {
        let ((x0, x1), (y0, y1)) = self.rect_vertex_range(rect);
        let mut out = Vec::with_capacity((x1 - x0).saturating_sub(1) * (y1 - y0).saturating_sub(1));
        for iy in y0 + 1..y1 {
            for ix in x0 + 1..x1 {
                // strict interior of a rectangle inside [0, 1]² never touches ∂Ω
                out.push(self.dof_of_vertex(ix, iy).expect("interior vertex"));
            }
        }
        out
    }

    pub fn whole_domain(&self) -> ElementRect {
        let n = self.coarse_cells_per_dim();
        ElementRect {
            i0: 0,
            i1: n - 1,
            j0: 0,
            j1: n - 1,
        }
    }
}
