//! The corrected coarse space.
//!
//! Every coarse mode `(K, j)` gets a fine function whose element-wise L²
//! projection is `Λ_{K,j}`: a bubble inside `K` for `j >= 1` and the extended
//! bubble `ι_K + ν_K` on the one-layer patch for the constant mode. Each of
//! them is corrected by subtracting the patch-local energy projection onto the
//! kernel of the projection (the element correctors), which yields the basis
//! columns `b̃_{K,j}`.
//!
//! Corrector problems are solved as saddle-point systems on element patches.
//! Elements whose patches cover the same rectangle share one factorization.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use faer::Mat;

use crate::coarse::{mode_multi_index, MomentMap};
use crate::coefficient::CoefficientField;
use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, element_stiffness_action, FineSystem};
use crate::linalg::{DenseCholesky, KktSolver, SparseMatrix};
use crate::mesh::{ElementRect, MeshHierarchy};
use crate::par_map;

/// Residual allowed in `Π_H b̃ = Λ`.
pub const MOMENT_TOLERANCE: f64 = 1e-9;

/// Bubbles of a single element, shared by all elements through translation.
///
/// Each bubble minimizes the Laplace energy among fine functions vanishing on
/// `∂K` with prescribed moments, so it does not depend on the coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceBubbles {
    r: usize,
    modes: usize,
    /// `values[j * (r-1)² + (b-1)(r-1) + (a-1)]` at local vertex `(a, b)`.
    values: Vec<f64>,
}

fn check_ratio(mesh: &MeshHierarchy, degree: usize) -> Result<()> {
    let r = mesh.fine_per_coarse();
    if r < degree + 2 {
        return Err(Error::MeshTooCoarse {
            fine_per_coarse: r,
            degree,
            required: degree + 2,
        });
    }
    Ok(())
}

/// Row scaling that brings the moment constraints to the size of the
/// stiffness entries.
fn constraint_scale(mesh: &MeshHierarchy) -> f64 {
    let h = mesh.fine_size();
    mesh.coarse_size() / (h * h)
}

impl ReferenceBubbles {
    pub fn new(moments: &MomentMap) -> Result<Self> {
        let mesh = moments.mesh();
        check_ratio(mesh, moments.degree())?;
        let r = mesh.fine_per_coarse();
        let m = moments.modes();
        let local = MeshHierarchy::new(0, 0, r.trailing_zeros())?;
        let stiffness = assemble_stiffness(&local, &vec![1.0; local.n_fine_cells()]);
        let s = constraint_scale(mesh);
        let mut triplets = Vec::new();
        for j in 0..m {
            for d in 0..local.n_fine_dofs() {
                let (a, b) = local.vertex_of_dof(d);
                triplets.push((j, d, s * moments.local_moment(a, b, j)));
            }
        }
        let c = SparseMatrix::from_triplets(m, local.n_fine_dofs(), &triplets);
        let kkt = KktSolver::new(&stiffness, &c)?;
        let n = local.n_fine_dofs();
        let mut rhs = Mat::<f64>::zeros(n + m, m);
        for j in 0..m {
            rhs[(n + j, j)] = s;
        }
        kkt.solve_mat(rhs.as_mut())?;
        let mut values = Vec::with_capacity(n * m);
        for j in 0..m {
            values.extend((0..n).map(|i| rhs[(i, j)]));
        }
        Ok(Self { r, modes: m, values })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Value at local vertex `(a, b)`, `0 <= a, b <= r`.
    pub fn value(&self, j: usize, a: usize, b: usize) -> f64 {
        if a == 0 || b == 0 || a >= self.r || b >= self.r {
            return 0.0;
        }
        let n = (self.r - 1) * (self.r - 1);
        self.values[j * n + (b - 1) * (self.r - 1) + (a - 1)]
    }

    /// Bubble `b_{K,j}` placed on `element`, as an interior-dof vector.
    pub fn on_element(&self, mesh: &MeshHierarchy, element: usize, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; mesh.n_fine_dofs()];
        let (x0, y0) = mesh.element_fine_origin(element);
        for b in 1..self.r {
            for a in 1..self.r {
                let d = mesh.dof_of_vertex(x0 + a, y0 + b).expect("element interior vertex");
                out[d] = self.value(j, a, b);
            }
        }
        out
    }
}

/// Coarse vertex `(zi, zj)` hat function at fine vertex `(ix, iy)`.
fn coarse_hat(r: usize, zi: usize, zj: usize, ix: usize, iy: usize) -> f64 {
    let f = |z: usize, i: usize| {
        let d = (i as f64 - (z * r) as f64).abs() / r as f64;
        (1.0 - d).max(0.0)
    };
    f(zi, ix) * f(zj, iy)
}

/// Coarse vertices of an element in local order.
fn element_coarse_vertices(mesh: &MeshHierarchy, element: usize) -> [(usize, usize); 4] {
    let (i, j) = mesh.element_coords(element);
    [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)]
}

fn coarse_vertex_interior(mesh: &MeshHierarchy, z: (usize, usize)) -> bool {
    let n = mesh.coarse_cells_per_dim();
    z.0 > 0 && z.1 > 0 && z.0 < n && z.1 < n
}

/// Vertex value of `ι_K`: a quarter of the value of `Λ_{K,0}` on `K`, so
/// that `Σ_K Λ_{K,0}`-coefficients times `ι_K` reproduce constants.
pub fn iota_level(mesh: &MeshHierarchy) -> f64 {
    0.25 / mesh.coarse_size()
}

/// `ι_K(z)` at a coarse vertex.
pub fn iota_vertex_value(mesh: &MeshHierarchy, element: usize, z: (usize, usize)) -> f64 {
    if coarse_vertex_interior(mesh, z) && element_coarse_vertices(mesh, element).contains(&z) {
        iota_level(mesh)
    } else {
        0.0
    }
}

/// `ι_K` at a fine vertex.
pub fn iota_at(mesh: &MeshHierarchy, element: usize, ix: usize, iy: usize) -> f64 {
    let r = mesh.fine_per_coarse();
    let level = iota_level(mesh);
    element_coarse_vertices(mesh, element)
        .iter()
        .filter(|z| coarse_vertex_interior(mesh, **z))
        .map(|&(zi, zj)| level * coarse_hat(r, zi, zj, ix, iy))
        .sum()
}

/// `ι_K` as an interior-dof vector.
pub fn compute_iota(mesh: &MeshHierarchy, element: usize) -> Vec<f64> {
    (0..mesh.n_fine_dofs())
        .map(|d| {
            let (ix, iy) = mesh.vertex_of_dof(d);
            iota_at(mesh, element, ix, iy)
        })
        .collect()
}

/// Coefficients `c_{K,G,j}` of `ν_K` for the nine neighbor slots of `K`.
#[derive(Clone, Debug)]
pub struct NuCoefficients {
    modes: usize,
    /// `values[slot * M + j]`, slot `(di + 1) + 3 (dj + 1)`.
    values: Vec<f64>,
}

impl NuCoefficients {
    /// Coefficient for neighbor `g` of `element`; zero outside `N¹(K)`.
    pub fn get(&self, mesh: &MeshHierarchy, element: usize, g: usize, j: usize) -> f64 {
        match neighbor_slot(mesh, element, g) {
            Some(slot) => self.values[slot * self.modes + j],
            None => 0.0,
        }
    }
}

fn neighbor_slot(mesh: &MeshHierarchy, element: usize, g: usize) -> Option<usize> {
    let (ki, kj) = mesh.element_coords(element);
    let (gi, gj) = mesh.element_coords(g);
    let di = gi as isize - ki as isize;
    let dj = gj as isize - kj as isize;
    if di.abs() <= 1 && dj.abs() <= 1 {
        Some(((di + 1) + 3 * (dj + 1)) as usize)
    } else {
        None
    }
}

/// `c_{K,G,j} = δ_{GK} δ_{j0} − (ι_K, Λ_{G,j})`.
pub fn compute_nu_coefficients(moments: &MomentMap, element: usize) -> NuCoefficients {
    let mesh = moments.mesh();
    let m = moments.modes();
    let mut values = vec![0.0; 9 * m];
    let mut buf = vec![0.0; m];
    for g in mesh.rect_elements(&mesh.patch_rect(element, 1)) {
        let slot = neighbor_slot(mesh, element, g).expect("neighbor");
        moments.project_element_into(g, &|ix, iy| iota_at(mesh, element, ix, iy), &mut buf);
        for j in 0..m {
            let delta = if g == element && j == 0 { 1.0 } else { 0.0 };
            values[slot * m + j] = delta - buf[j];
        }
    }
    NuCoefficients { modes: m, values }
}

/// `ν_K` as an interior-dof vector together with its coefficients.
pub fn compute_nu(moments: &MomentMap, bubbles: &ReferenceBubbles, element: usize) -> (Vec<f64>, NuCoefficients) {
    let mesh = moments.mesh();
    let c = compute_nu_coefficients(moments, element);
    let mut nu = vec![0.0; mesh.n_fine_dofs()];
    for g in mesh.rect_elements(&mesh.patch_rect(element, 1)) {
        for j in 0..moments.modes() {
            let w = c.get(mesh, element, g, j);
            for (d, v) in bubbles.on_element(mesh, g, j).iter().enumerate() {
                nu[d] += w * v;
            }
        }
    }
    (nu, c)
}

/// Dense values on the interior fine vertices of an element rectangle.
#[derive(Clone, Debug)]
struct Window {
    rect: ElementRect,
    x0: usize,
    y0: usize,
    nx: usize,
    values: Vec<f64>,
}

impl Window {
    fn new(mesh: &MeshHierarchy, rect: ElementRect) -> Self {
        let ((x0, x1), (y0, y1)) = mesh.rect_vertex_range(&rect);
        let nx = x1 - x0 - 1;
        let ny = y1 - y0 - 1;
        Self {
            rect,
            x0,
            y0,
            nx,
            values: vec![0.0; nx * ny],
        }
    }

    fn index(&self, ix: usize, iy: usize) -> Option<usize> {
        let ny = self.values.len() / self.nx.max(1);
        if ix > self.x0 && iy > self.y0 && ix - self.x0 - 1 < self.nx && iy - self.y0 - 1 < ny {
            Some((iy - self.y0 - 1) * self.nx + (ix - self.x0 - 1))
        } else {
            None
        }
    }

    fn vertex(&self, k: usize) -> (usize, usize) {
        (self.x0 + 1 + k % self.nx, self.y0 + 1 + k / self.nx)
    }

    fn get(&self, ix: usize, iy: usize) -> f64 {
        self.index(ix, iy).map_or(0.0, |k| self.values[k])
    }
}

/// A basis column stored on the interior dofs of a rectangle.
#[derive(Clone, Debug)]
pub struct BasisColumn {
    pub element: usize,
    pub mode: usize,
    window: Window,
}

impl BasisColumn {
    pub fn support(&self) -> ElementRect {
        self.window.rect
    }

    /// Global interior dof indices and values, ascending.
    pub fn entries(&self, mesh: &MeshHierarchy) -> impl Iterator<Item = (usize, f64)> + '_ {
        let mesh = *mesh;
        self.window.values.iter().enumerate().map(move |(k, &v)| {
            let (ix, iy) = self.window.vertex(k);
            (mesh.dof_of_vertex(ix, iy).expect("window vertices are interior"), v)
        })
    }

    pub fn to_dense(&self, mesh: &MeshHierarchy) -> Vec<f64> {
        let mut out = vec![0.0; mesh.n_fine_dofs()];
        for (d, v) in self.entries(mesh) {
            out[d] = v;
        }
        out
    }

    /// Largest deviation of the column's moments from the unit vector at
    /// `(element, mode)`.
    pub fn moment_residual(&self, moments: &MomentMap) -> f64 {
        let mesh = moments.mesh();
        let m = moments.modes();
        let mut buf = vec![0.0; m];
        let mut worst = 0.0f64;
        for g in mesh.rect_elements(&self.window.rect) {
            moments.project_element_into(g, &|ix, iy| self.window.get(ix, iy), &mut buf);
            for (j, v) in buf.iter().enumerate() {
                let target = if g == self.element && j == self.mode { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// The element correctors `C_T` of all bubbles of `T` and of the coarse hats
/// of the interior vertices of `T`.
struct ElementCorrectors {
    element: usize,
    window: Window,
    /// `M` bubble correctors followed by one corrector per hat.
    columns: Vec<Vec<f64>>,
    hats: Vec<(usize, usize)>,
}

struct PatchSystem {
    window: Window,
    kkt: KktSolver,
}

/// Shared state of the corrector computations.
pub struct CorrectorContext<'a> {
    mesh: MeshHierarchy,
    coefficient: &'a CoefficientField,
    stiffness: &'a SparseMatrix,
    moments: &'a MomentMap,
    bubbles: ReferenceBubbles,
}

/// Right-hand sides solved per factorization at once.
const RHS_BATCH: usize = 64;
/// Independent patches handed to the worker pool at once.
const PATCH_BATCH: usize = 16;

impl<'a> CorrectorContext<'a> {
    pub fn new(
        coefficient: &'a CoefficientField,
        fine: &'a FineSystem,
        moments: &'a MomentMap,
    ) -> Result<Self> {
        Ok(Self {
            mesh: *moments.mesh(),
            coefficient,
            stiffness: &fine.stiffness,
            moments,
            bubbles: ReferenceBubbles::new(moments)?,
        })
    }

    pub fn bubbles(&self) -> &ReferenceBubbles {
        &self.bubbles
    }

    fn patch_system(&self, rect: ElementRect) -> Result<PatchSystem> {
        let mesh = &self.mesh;
        let window = Window::new(mesh, rect);
        let dofs = mesh.rect_interior_dofs(&rect);
        let a = self.stiffness.submatrix(&dofs, &dofs);
        let elements = mesh.rect_elements(&rect);
        let m = self.moments.modes();
        let r = mesh.fine_per_coarse();
        let s = constraint_scale(mesh);
        let mut triplets = Vec::with_capacity(elements.len() * m * (r + 1) * (r + 1));
        for (e, &g) in elements.iter().enumerate() {
            let (x0, y0) = mesh.element_fine_origin(g);
            for j in 0..m {
                for b in 0..=r {
                    for a_ in 0..=r {
                        if let Some(k) = window.index(x0 + a_, y0 + b) {
                            triplets.push((e * m + j, k, s * self.moments.local_moment(a_, b, j)));
                        }
                    }
                }
            }
        }
        let c = SparseMatrix::from_triplets(elements.len() * m, dofs.len(), &triplets);
        let kkt = KktSolver::new(&a, &c)?;
        Ok(PatchSystem { window, kkt })
    }

    fn hats_of(&self, element: usize) -> Vec<(usize, usize)> {
        element_coarse_vertices(&self.mesh, element)
            .into_iter()
            .filter(|&z| coarse_vertex_interior(&self.mesh, z))
            .collect()
    }

    /// Writes `a|_T(v, φ_i)` into column `col` of `rhs` (patch-local rows).
    fn fill_rhs(&self, sys: &PatchSystem, element: usize, v: impl Fn(usize, usize) -> f64, rhs: &mut Mat<f64>, col: usize) {
        for (vertex, val) in element_stiffness_action(&self.mesh, self.coefficient, element, v) {
            let (ix, iy) = self.mesh.vertex_coords(vertex);
            if let Some(k) = sys.window.index(ix, iy) {
                rhs[(k, col)] += val;
            }
        }
    }

    fn solve_elements(&self, sys: &PatchSystem, elements: &[usize]) -> Result<Vec<ElementCorrectors>> {
        let m = self.moments.modes();
        let n = sys.kkt.n_primal();
        let total = n + sys.kkt.n_dual();
        let plan: Vec<(usize, Vec<(usize, usize)>)> = elements.iter().map(|&t| (t, self.hats_of(t))).collect();
        let ncols: usize = plan.iter().map(|(_, h)| m + h.len()).sum();
        let mut rhs = Mat::<f64>::zeros(total, ncols);
        let mut col = 0;
        for (t, hats) in &plan {
            let (x0, y0) = self.mesh.element_fine_origin(*t);
            let r = self.mesh.fine_per_coarse();
            for j in 0..m {
                let bubble = |ix: usize, iy: usize| {
                    if ix < x0 || iy < y0 || ix > x0 + r || iy > y0 + r {
                        0.0
                    } else {
                        self.bubbles.value(j, ix - x0, iy - y0)
                    }
                };
                self.fill_rhs(sys, *t, bubble, &mut rhs, col);
                col += 1;
            }
            for &(zi, zj) in hats {
                self.fill_rhs(sys, *t, |ix, iy| coarse_hat(r, zi, zj, ix, iy), &mut rhs, col);
                col += 1;
            }
        }
        sys.kkt.solve_mat(rhs.as_mut())?;
        let mut out = Vec::with_capacity(plan.len());
        let mut col = 0;
        for (t, hats) in plan {
            let k = m + hats.len();
            let columns = (col..col + k).map(|c| (0..n).map(|i| rhs[(i, c)]).collect()).collect();
            col += k;
            out.push(ElementCorrectors {
                element: t,
                window: sys.window.clone(),
                columns,
                hats,
            });
        }
        Ok(out)
    }

    /// Computes correctors for `elements` at radius `ell` and feeds them to
    /// `sink` in a fixed order: by patch rectangle, then by element.
    fn for_each_corrector(
        &self,
        elements: &[usize],
        ell: usize,
        mut sink: impl FnMut(ElementCorrectors) -> Result<()>,
    ) -> Result<()> {
        let mut groups: BTreeMap<ElementRect, Vec<usize>> = BTreeMap::new();
        for &t in elements {
            groups.entry(self.mesh.patch_rect(t, ell)).or_default().push(t);
        }
        let m = self.moments.modes();
        let per_solve = (RHS_BATCH / (m + 4)).max(1);
        let mut singles: Vec<(ElementRect, Vec<usize>)> = Vec::new();
        let flush = |singles: &mut Vec<(ElementRect, Vec<usize>)>,
                     sink: &mut dyn FnMut(ElementCorrectors) -> Result<()>|
         -> Result<()> {
            let results = par_map(singles, |(rect, ts)| {
                let sys = self.patch_system(*rect)?;
                self.solve_elements(&sys, ts)
            });
            singles.clear();
            for res in results {
                for ec in res? {
                    sink(ec)?;
                }
            }
            Ok(())
        };
        for (rect, ts) in groups {
            if ts.len() <= per_solve {
                singles.push((rect, ts));
                if singles.len() >= PATCH_BATCH {
                    flush(&mut singles, &mut sink)?;
                }
                continue;
            }
            flush(&mut singles, &mut sink)?;
            let sys = self.patch_system(rect)?;
            let chunks: Vec<&[usize]> = ts.chunks(per_solve).collect();
            for wave in chunks.chunks(PATCH_BATCH) {
                let results = par_map(wave, |chunk| self.solve_elements(&sys, chunk));
                for res in results {
                    for ec in res? {
                        sink(ec)?;
                    }
                }
            }
        }
        flush(&mut singles, &mut sink)
    }

    /// `C^ℓ_T v` for a function given on fine vertices.
    pub fn element_corrector(&self, element: usize, v: &[f64], ell: usize) -> Result<Vec<f64>> {
        assert_eq!(v.len(), self.mesh.n_fine_vertices());
        let sys = self.patch_system(self.mesh.patch_rect(element, ell))?;
        let n = sys.kkt.n_primal();
        let mut rhs = Mat::<f64>::zeros(n + sys.kkt.n_dual(), 1);
        self.fill_rhs(&sys, element, |ix, iy| v[self.mesh.vertex_index(ix, iy)], &mut rhs, 0);
        sys.kkt.solve_mat(rhs.as_mut())?;
        let mut out = vec![0.0; self.mesh.n_fine_dofs()];
        for k in 0..n {
            let (ix, iy) = sys.window.vertex(k);
            out[self.mesh.dof_of_vertex(ix, iy).expect("interior")] = rhs[(k, 0)];
        }
        Ok(out)
    }

    /// Basis columns of the listed elements. Column order is element-major.
    pub fn columns(&self, elements: &[usize], ell: usize) -> Result<Vec<BasisColumn>> {
        let mesh = self.mesh;
        let m = self.moments.modes();
        let mut slot = vec![usize::MAX; mesh.n_elements()];
        for (k, &e) in elements.iter().enumerate() {
            slot[e] = k;
        }
        let mut windows: Vec<Window> =
            elements.iter().map(|&k| Window::new(&mesh, mesh.patch_rect(k, ell + 1))).collect();
        let nus: Vec<NuCoefficients> = elements.iter().map(|&k| compute_nu_coefficients(self.moments, k)).collect();
        let mut bubble_cols: Vec<Option<BasisColumn>> = vec![None; elements.len() * m];

        // every T that touches some requested K
        let mut needed = vec![false; mesh.n_elements()];
        for &k in elements {
            for t in mesh.rect_elements(&mesh.patch_rect(k, 1)) {
                needed[t] = true;
            }
        }
        let ts: Vec<usize> = (0..mesh.n_elements()).filter(|&t| needed[t]).collect();
        let r = mesh.fine_per_coarse();

        self.for_each_corrector(&ts, ell, |ec| {
            let t = ec.element;
            if slot[t] != usize::MAX {
                let (x0, y0) = mesh.element_fine_origin(t);
                for j in 1..m {
                    let mut w = ec.window.clone();
                    for (k, val) in w.values.iter_mut().enumerate() {
                        let (ix, iy) = ec.window.vertex(k);
                        let b = if ix > x0 && iy > y0 && ix < x0 + r && iy < y0 + r {
                            self.bubbles.value(j, ix - x0, iy - y0)
                        } else {
                            0.0
                        };
                        *val = b - ec.columns[j][k];
                    }
                    bubble_cols[slot[t] * m + j] = Some(BasisColumn {
                        element: t,
                        mode: j,
                        window: w,
                    });
                }
            }
            for k in mesh.rect_elements(&mesh.patch_rect(t, 1)) {
                let s = slot[k];
                if s == usize::MAX {
                    continue;
                }
                let mut weights: Vec<f64> = (0..m).map(|j| nus[s].get(&mesh, k, t, j)).collect();
                weights.extend(ec.hats.iter().map(|&z| iota_vertex_value(&mesh, k, z)));
                let win = &mut windows[s];
                for (c, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (p, &val) in ec.columns[c].iter().enumerate() {
                        let (ix, iy) = ec.window.vertex(p);
                        let q = win.index(ix, iy).expect("corrector patch inside the extended patch");
                        win.values[q] -= w * val;
                    }
                }
            }
            Ok(())
        })?;

        let mut out = Vec::with_capacity(elements.len() * m);
        for (s, &k) in elements.iter().enumerate() {
            let mut win = std::mem::replace(&mut windows[s], Window::new(&mesh, ElementRect { i0: 0, i1: 0, j0: 0, j1: 0 }));
            // add ι_K + ν_K
            let nu_rect = mesh.patch_rect(k, 1);
            for p in 0..win.values.len() {
                let (ix, iy) = win.vertex(p);
                let mut v = iota_at(&mesh, k, ix, iy);
                for g in mesh.rect_elements(&nu_rect) {
                    let (gx, gy) = mesh.element_fine_origin(g);
                    if ix > gx && iy > gy && ix < gx + r && iy < gy + r {
                        for j in 0..m {
                            v += nus[s].get(&mesh, k, g, j) * self.bubbles.value(j, ix - gx, iy - gy);
                        }
                    }
                }
                win.values[p] += v;
            }
            out.push(BasisColumn {
                element: k,
                mode: 0,
                window: win,
            });
            for j in 1..m {
                out.push(bubble_cols[s * m + j].take().expect("bubble column computed"));
            }
        }
        Ok(out)
    }
}

/// Columns `b̃^ℓ_{K,j}` assembled into a fine-by-coarse matrix, coarse index
/// `K * M + j`.
#[derive(Clone, Debug)]
pub struct MultiscaleBasis {
    pub mesh: MeshHierarchy,
    pub degree: usize,
    pub ell: usize,
    pub coefficient_hash: u64,
    /// Fine interior dofs by coarse modes.
    pub matrix: SparseMatrix,
}

pub fn build_basis(
    coefficient: &CoefficientField,
    fine: &FineSystem,
    moments: &MomentMap,
    ell: usize,
) -> Result<MultiscaleBasis> {
    let ctx = CorrectorContext::new(coefficient, fine, moments)?;
    let mesh = *moments.mesh();
    let m = moments.modes();
    let all: Vec<usize> = (0..mesh.n_elements()).collect();
    let columns = ctx.columns(&all, ell)?;
    let residuals = par_map(&columns, |c| c.moment_residual(moments));
    for (c, res) in columns.iter().zip(residuals) {
        if !(res <= MOMENT_TOLERANCE) {
            return Err(Error::MomentIdentity {
                element: c.element,
                mode: c.mode,
                residual: res,
            });
        }
    }
    // transpose the columns into CSR
    let n_h = mesh.n_fine_dofs();
    let n_c = mesh.n_elements() * m;
    let mut counts = vec![0usize; n_h + 1];
    for c in &columns {
        for (d, _) in c.entries(&mesh) {
            counts[d + 1] += 1;
        }
    }
    for i in 0..n_h {
        counts[i + 1] += counts[i];
    }
    let nnz = counts[n_h];
    let mut next = counts.clone();
    let mut col_idx = vec![0usize; nnz];
    let mut values = vec![0.0; nnz];
    for (ci, c) in columns.iter().enumerate() {
        debug_assert_eq!(ci, c.element * m + c.mode);
        for (d, v) in c.entries(&mesh) {
            col_idx[next[d]] = ci;
            values[next[d]] = v;
            next[d] += 1;
        }
    }
    drop(columns);
    Ok(MultiscaleBasis {
        mesh,
        degree: moments.degree(),
        ell,
        coefficient_hash: coefficient.descriptor().hash(),
        matrix: SparseMatrix::from_csr(n_h, n_c, counts, col_idx, values),
    })
}

/// Decay of the localization error for a set of probe elements: for each `ℓ`
/// the energy norm of the difference between the columns at `ℓ` and at the
/// last (saturating) entry of `ells`, relative to the latter.
pub fn localization_decay(
    coefficient: &CoefficientField,
    fine: &FineSystem,
    moments: &MomentMap,
    ells: &[usize],
    probes: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let ctx = CorrectorContext::new(coefficient, fine, moments)?;
    let mesh = *moments.mesh();
    let reference: Vec<Vec<f64>> = ctx
        .columns(probes, *ells.last().expect("non-empty ℓ list"))?
        .iter()
        .map(|c| c.to_dense(&mesh))
        .collect();
    let ref_norm: f64 = reference.iter().map(|c| fine.stiffness.quad_form(c)).sum();
    let mut out = Vec::with_capacity(ells.len());
    for &ell in ells {
        let cols = ctx.columns(probes, ell)?;
        let mut err = 0.0;
        for (c, r) in cols.iter().zip(&reference) {
            let d: Vec<f64> = c.to_dense(&mesh).iter().zip(r).map(|(a, b)| a - b).collect();
            err += fine.stiffness.quad_form(&d);
        }
        out.push((ell, (err / ref_norm).sqrt()));
    }
    Ok(out)
}

/// `Bᵀ A B` for each `A` in `ops`, as dense, exactly symmetric matrices.
pub fn galerkin_products(b: &SparseMatrix, ops: &[&SparseMatrix]) -> Vec<Mat<f64>> {
    let (n_h, n_c) = (b.nrows(), b.ncols());
    let density = b.nnz() as f64 / (n_h as f64 * n_c as f64);
    let mut out: Vec<Mat<f64>> = if density > 0.25 {
        galerkin_blocked(b, ops)
    } else {
        ops.iter().map(|a| galerkin_sparse(b, a)).collect()
    };
    for m in &mut out {
        for j in 0..n_c {
            for i in 0..j {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    out
}

/// `Bᵀ A B` for a single `A`.
pub fn galerkin_product(b: &SparseMatrix, a: &SparseMatrix) -> Mat<f64> {
    galerkin_products(b, &[a]).pop().expect("one product")
}

/// Dense accumulation over blocks of fine rows, `Σ_R B_Rᵀ (A B)_R`, so that
/// only a few rows of `B` are ever held densely.
fn galerkin_blocked(b: &SparseMatrix, ops: &[&SparseMatrix]) -> Vec<Mat<f64>> {
    const ROWS: usize = 256;
    let (n_h, n_c) = (b.nrows(), b.ncols());
    let mut out: Vec<Mat<f64>> = ops.iter().map(|_| Mat::zeros(n_c, n_c)).collect();
    let mut bt = Mat::<f64>::zeros(n_c, ROWS);
    let mut abt = Mat::<f64>::zeros(n_c, ROWS);
    for r0 in (0..n_h).step_by(ROWS) {
        let len = ROWS.min(n_h - r0);
        bt.fill(0.0);
        for k in 0..len {
            let (cols, vals) = b.row(r0 + k);
            let col = bt.col_mut(k).try_as_col_major_mut().expect("contiguous").as_slice_mut();
            for (&c, &v) in cols.iter().zip(vals) {
                col[c] = v;
            }
        }
        for (a, dst) in ops.iter().zip(&mut out) {
            abt.fill(0.0);
            for k in 0..len {
                let col = abt.col_mut(k).try_as_col_major_mut().expect("contiguous").as_slice_mut();
                let (acols, avals) = a.row(r0 + k);
                for (&i, &aik) in acols.iter().zip(avals) {
                    let (cols, vals) = b.row(i);
                    for (&c, &v) in cols.iter().zip(vals) {
                        col[c] += aik * v;
                    }
                }
            }
            faer::linalg::matmul::matmul(
                dst.as_mut(),
                faer::Accum::Add,
                bt.as_ref().subcols(0, len),
                abt.as_ref().subcols(0, len).transpose(),
                1.0,
                crate::linalg::gemm_par(),
            );
        }
    }
    out
}

/// Row-wise outer-product accumulation of the lower triangle.
fn galerkin_sparse(b: &SparseMatrix, a: &SparseMatrix) -> Mat<f64> {
    let (n_h, n_c) = (b.nrows(), b.ncols());
    let mut out = Mat::<f64>::zeros(n_c, n_c);
    let mut acc = vec![0.0; n_c];
    let mut marker = vec![usize::MAX; n_c];
    let mut pattern: Vec<usize> = Vec::new();
    for i in 0..n_h {
        // row i of A B
        pattern.clear();
        let (acols, avals) = a.row(i);
        for (&k, &akv) in acols.iter().zip(avals) {
            let (bc, bv) = b.row(k);
            for (&c, &v) in bc.iter().zip(bv) {
                if marker[c] != i {
                    marker[c] = i;
                    acc[c] = 0.0;
                    pattern.push(c);
                }
                acc[c] += akv * v;
            }
        }
        pattern.sort_unstable();
        let (bc, bv) = b.row(i);
        for (&k, &bik) in bc.iter().zip(bv) {
            let col = out.col_mut(k).try_as_col_major_mut().expect("contiguous").as_slice_mut();
            let start = pattern.partition_point(|&c| c < k);
            for &l in &pattern[start..] {
                col[l] += bik * acc[l];
            }
        }
    }
    for j in 0..n_c {
        for i in 0..j {
            out[(i, j)] = out[(j, i)];
        }
    }
    out
}

/// How initial data are mapped into a coarse space.
#[derive(Clone, Debug)]
pub enum InitialMap {
    /// Coarse coefficients are the moments of the fine function.
    Moments(MomentMap),
    /// Coarse coefficients of the L² projection.
    L2,
}

/// A Galerkin subspace of the fine space with its dense coarse matrices.
#[derive(Clone, Debug)]
pub struct GalerkinSpace {
    /// Fine interior dofs by coarse dofs.
    pub basis: SparseMatrix,
    pub stiffness: Mat<f64>,
    pub mass: Mat<f64>,
    pub initial_map: InitialMap,
}

impl GalerkinSpace {
    pub fn new(basis: SparseMatrix, fine: &FineSystem, initial_map: InitialMap) -> Self {
        let mut products = galerkin_products(&basis, &[&fine.stiffness, &fine.mass]);
        let mass = products.pop().expect("mass");
        let stiffness = products.pop().expect("stiffness");
        Self {
            basis,
            stiffness,
            mass,
            initial_map,
        }
    }

    pub fn from_multiscale(basis: MultiscaleBasis, fine: &FineSystem, moments: &MomentMap) -> Self {
        Self::new(basis.matrix, fine, InitialMap::Moments(moments.clone()))
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Fine interior-dof vector of a coarse coefficient vector.
    pub fn lift(&self, c: &[f64]) -> Vec<f64> {
        self.basis.mul_vec(c)
    }

    /// `Bᵀ M_h g` for a fine interior-dof vector `g`.
    pub fn load(&self, fine: &FineSystem, g: &[f64]) -> Vec<f64> {
        self.basis.mul_transpose(&fine.mass.mul_vec(g))
    }

    /// Coarse coefficients representing the fine function `u`.
    pub fn coefficients_of(&self, fine: &FineSystem, u: &[f64]) -> Result<Vec<f64>> {
        match &self.initial_map {
            InitialMap::Moments(mm) => Ok(mm.project(u)),
            InitialMap::L2 => {
                let rhs = self.load(fine, u);
                Ok(DenseCholesky::new(self.mass.clone())?.solve(&rhs))
            }
        }
    }
}

/// Standard Q1 finite elements on the coarse mesh, expressed in fine dofs.
pub fn coarse_fem_basis(mesh: &MeshHierarchy) -> SparseMatrix {
    let n = mesh.coarse_cells_per_dim();
    let r = mesh.fine_per_coarse();
    let mut triplets = Vec::new();
    let mut col = 0;
    for zj in 1..n {
        for zi in 1..n {
            for iy in (zj - 1) * r + 1..(zj + 1) * r {
                for ix in (zi - 1) * r + 1..(zi + 1) * r {
                    let d = mesh.dof_of_vertex(ix, iy).expect("interior");
                    triplets.push((d, col, coarse_hat(r, zi, zj, ix, iy)));
                }
            }
            col += 1;
        }
    }
    let nc = (n - 1) * (n - 1);
    SparseMatrix::from_triplets(mesh.n_fine_dofs(), nc, &triplets)
}

/// Identifies a cached basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheKey {
    pub coarse_exp: u32,
    pub eps_exp: u32,
    pub fine_exp: u32,
    pub coefficient_hash: u64,
    pub degree: u32,
    pub ell: u32,
}

const CACHE_MAGIC: &[u8; 8] = b"PLODBAS\0";
const CACHE_VERSION: u32 = 1;

impl CacheKey {
    pub fn file_name(&self) -> String {
        format!(
            "basis_H{}_e{}_h{}_p{}_l{}_{:016x}.bin",
            self.coarse_exp, self.eps_exp, self.fine_exp, self.degree, self.ell, self.coefficient_hash
        )
    }
}

impl MultiscaleBasis {
    pub fn key(&self) -> CacheKey {
        CacheKey {
            coarse_exp: self.mesh.coarse_exp(),
            eps_exp: self.mesh.eps_exp(),
            fine_exp: self.mesh.fine_exp(),
            coefficient_hash: self.coefficient_hash,
            degree: self.degree as u32,
            ell: self.ell as u32,
        }
    }

    /// Writes header and compressed sparse columns, little-endian.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let key = self.key();
        let csc = self.matrix.transpose();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        for v in [CACHE_VERSION, key.coarse_exp, key.eps_exp, key.fine_exp, key.degree, key.ell] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&key.coefficient_hash.to_le_bytes())?;
        for v in [self.matrix.nrows(), self.matrix.ncols(), self.matrix.nnz()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &p in csc.row_ptr() {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for &i in csc.col_idx() {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
        for &v in csc.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a cache file; `Ok(None)` if it belongs to a different key.
    pub fn read_cache(path: &Path, expected: &CacheKey) -> Result<Option<Self>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != CACHE_MAGIC {
            return Err(Error::Cache("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Cache(format!("unsupported version {version}")));
        }
        let key = CacheKey {
            coarse_exp: cur.u32()?,
            eps_exp: cur.u32()?,
            fine_exp: cur.u32()?,
            degree: cur.u32()?,
            ell: cur.u32()?,
            coefficient_hash: cur.u64()?,
        };
        if key != *expected {
            return Ok(None);
        }
        let nrows = cur.u64()? as usize;
        let ncols = cur.u64()? as usize;
        let nnz = cur.u64()? as usize;
        let col_ptr = (0..=ncols).map(|_| cur.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let row_idx = (0..nnz).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let values = (0..nnz).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        if col_ptr[ncols] != nnz || row_idx.iter().any(|&r| r >= nrows) {
            return Err(Error::Cache("inconsistent sparse structure".into()));
        }
        let csc = SparseMatrix::from_csr(ncols, nrows, col_ptr, row_idx, values);
        let mesh = MeshHierarchy::new(key.coarse_exp, key.eps_exp, key.fine_exp)?;
        Ok(Some(Self {
            mesh,
            degree: key.degree as usize,
            ell: key.ell as usize,
            coefficient_hash: key.coefficient_hash,
            matrix: csc.transpose(),
        }))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Cache("truncated file".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Number of mode `j` in multi-index notation, for labels.
pub fn mode_label(degree: usize, j: usize) -> String {
    let (a, b) = mode_multi_index(degree, j);
    format!("({a},{b})")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble, embed};

    fn setup(ce: u32, fe: u32, p: usize) -> (MeshHierarchy, CoefficientField, FineSystem, MomentMap) {
        let mesh = MeshHierarchy::new(ce, fe.min(ce + 2), fe).unwrap();
        let a = CoefficientField::checkerboard(&mesh, 3, 1.0, 10.0).unwrap();
        let fine = assemble(&mesh, &a);
        let mm = MomentMap::new(&mesh, p);
        (mesh, a, fine, mm)
    }

    #[test]
    fn bubbles_have_unit_moments() {
        let (mesh, _, _, mm) = setup(2, 5, 2);
        let b = ReferenceBubbles::new(&mm).unwrap();
        for k in [0, 5, 15] {
            for j in 0..mm.modes() {
                let v = b.on_element(&mesh, k, j);
                let c = mm.project(&v);
                for (i, x) in c.iter().enumerate() {
                    let t = if i == k * mm.modes() + j { 1.0 } else { 0.0 };
                    assert!((x - t).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn refuses_too_coarse_fine_mesh() {
        let mesh = MeshHierarchy::new(2, 3, 3).unwrap();
        let mm = MomentMap::new(&mesh, 1);
        assert!(matches!(ReferenceBubbles::new(&mm), Err(Error::MeshTooCoarse { .. })));
    }

    #[test]
    fn iota_values() {
        let mesh = MeshHierarchy::new(2, 2, 4).unwrap();
        let level = iota_level(&mesh);
        assert_eq!(level, 1.0);
        let k = mesh.element_index(1, 1);
        let (x0, y0) = mesh.element_fine_origin(k);
        for b in 1..4 {
            for a in 1..4 {
                assert!((iota_at(&mesh, k, x0 + a, y0 + b) - level).abs() < 1e-15);
            }
        }
        // patch boundary
        assert_eq!(iota_at(&mesh, k, 0, 6), 0.0);
        assert_eq!(iota_at(&mesh, k, 12, 6), 0.0);
        let corner = mesh.element_index(0, 0);
        assert_eq!(iota_at(&mesh, corner, 0, 0), 0.0);
        assert!((iota_at(&mesh, corner, 4, 4) - level).abs() < 1e-15);
        assert!(iota_at(&mesh, corner, 2, 2) < level);
    }

    #[test]
    fn iota_sum_is_constant_away_from_boundary() {
        let mesh = MeshHierarchy::new(3, 3, 5).unwrap();
        let n = mesh.coarse_cells_per_dim();
        let r = mesh.fine_per_coarse();
        for iy in r..=(n - 1) * r {
            for ix in r..=(n - 1) * r {
                let s: f64 = (0..mesh.n_elements()).map(|k| iota_at(&mesh, k, ix, iy)).sum();
                assert!((s - 1.0 / mesh.coarse_size()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nu_coefficient_of_interior_element() {
        let (mesh, _, _, mm) = setup(2, 4, 1);
        let k = mesh.element_index(1, 2);
        let c = compute_nu_coefficients(&mm, k);
        let big_h = mesh.coarse_size();
        // ι_K ≡ 1/(4H) on K against Λ_{K,0} ≡ 1/H over |K| = H²
        let own = iota_level(&mesh) * big_h;
        assert!((own - 0.25).abs() < 1e-15);
        assert!((c.get(&mesh, k, k, 0) - 0.75).abs() < 1e-14);
        let far = mesh.element_index(3, 0);
        assert_eq!(c.get(&mesh, k, far, 0), 0.0);
        let b = ReferenceBubbles::new(&mm).unwrap();
        let (nu, _) = compute_nu(&mm, &b, k);
        let total: Vec<f64> = compute_iota(&mesh, k).iter().zip(&nu).map(|(a, b)| a + b).collect();
        let moments = mm.project(&total);
        for (i, x) in moments.iter().enumerate() {
            let t = if i == k * mm.modes() { 1.0 } else { 0.0 };
            assert!((x - t).abs() < 1e-10);
        }
    }

    #[test]
    fn columns_reproduce_moments_and_support() {
        let (mesh, a, fine, mm) = setup(3, 5, 1);
        let basis = build_basis(&a, &fine, &mm, 1).unwrap();
        assert_eq!(basis.matrix.ncols(), 4 * 64);
        for c in 0..basis.matrix.ncols() {
            let mut e = vec![0.0; basis.matrix.ncols()];
            e[c] = 1.0;
            let col = basis.matrix.mul_vec(&e);
            let mom = mm.project(&col);
            for (i, x) in mom.iter().enumerate() {
                let t = if i == c { 1.0 } else { 0.0 };
                assert!((x - t).abs() < 1e-9);
            }
            let (k, j) = (c / 4, c % 4);
            let radius = if j == 0 { 2 } else { 1 };
            let rect = mesh.patch_rect(k, radius);
            let ((x0, x1), (y0, y1)) = mesh.rect_vertex_range(&rect);
            for (d, v) in col.iter().enumerate() {
                if *v != 0.0 {
                    let (ix, iy) = mesh.vertex_of_dof(d);
                    assert!(ix > x0 && ix < x1 && iy > y0 && iy < y1);
                }
            }
        }
    }

    #[test]
    fn corrector_lies_in_kernel() {
        let (mesh, a, fine, mm) = setup(2, 4, 1);
        let ctx = CorrectorContext::new(&a, &fine, &mm).unwrap();
        let v: Vec<f64> = (0..mesh.n_fine_vertices()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let w = ctx.element_corrector(5, &v, 1).unwrap();
        assert!(mm.project(&w).iter().all(|x| x.abs() < 1e-10));
        let zero = ctx.element_corrector(5, &vec![0.0; mesh.n_fine_vertices()], 1).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        let _ = embed(&mesh, &w);
    }

    #[test]
    fn galerkin_routes_agree() {
        let (mesh, a, fine, mm) = setup(2, 4, 1);
        let basis = build_basis(&a, &fine, &mm, 1).unwrap();
        let sparse = galerkin_sparse(&basis.matrix, &fine.stiffness);
        let blocked = galerkin_blocked(&basis.matrix, &[&fine.stiffness]).pop().unwrap();
        let bd = basis.matrix.to_dense();
        let dense = bd.transpose() * fine.stiffness.mul_mat(bd.as_ref());
        let n = basis.matrix.ncols();
        for i in 0..n {
            for j in 0..n {
                assert!((sparse[(i, j)] - dense[(i, j)]).abs() < 1e-10 * dense[(i, i)].abs().max(1.0));
                assert!((blocked[(i, j)] - dense[(i, j)]).abs() < 1e-10 * dense[(i, i)].abs().max(1.0));
            }
        }
        let _ = mesh;
    }

    #[test]
    fn cache_roundtrip() {
        let (_, a, fine, mm) = setup(2, 4, 0);
        let basis = build_basis(&a, &fine, &mm, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(basis.key().file_name());
        basis.write_cache(&path).unwrap();
        let back = MultiscaleBasis::read_cache(&path, &basis.key()).unwrap().unwrap();
        assert_eq!(back.matrix, basis.matrix);
        let mut other = basis.key();
        other.ell = 3;
        assert!(MultiscaleBasis::read_cache(&path, &other).unwrap().is_none());
    }
}
