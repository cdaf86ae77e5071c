//! Discontinuous coarse polynomials and the element-wise L² projection.
//!
//! On each coarse element `K` the basis functions are tensor products of
//! shifted Legendre polynomials scaled to be L²(K)-orthonormal:
//!
//! ```text
//! Λ_{K,(q1,q2)}(x) = H⁻¹ √(2q1+1)(2q2+1) L_q1(2x̂1 − 1) L_q2(2x̂2 − 1)
//! ```
//!
//! Flat mode indices are zero-based here, `j = q2 (p+1) + q1`, so `j = 0` is
//! the constant mode.

use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use crate::mesh::MeshHierarchy;

/// Legendre polynomial `L_p(t)` by the three-term recurrence.
pub fn legendre(p: usize, t: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, t);
    if p == 0 {
        return prev;
    }
    for n in 1..p {
        let n = n as f64;
        let next = ((2.0 * n + 1.0) * t * cur - n * prev) / (n + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

fn legendre_with_derivative(n: usize, t: f64) -> (f64, f64) {
    let p = legendre(n, t);
    let q = if n == 0 { 0.0 } else { legendre(n - 1, t) };
    // (1 - t²) L_n' = n (L_{n-1} - t L_n)
    (p, n as f64 * (q - t * p) / (1.0 - t * t))
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, t);
            let dt = p / dp;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, t);
        nodes[n - 1 - i] = t;
        weights[n - 1 - i] = 2.0 / ((1.0 - t * t) * dp * dp);
    }
    (nodes, weights)
}

/// Number of coarse modes per element, `(p+1)²`.
pub fn modes_per_element(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Multi-index `(q1, q2)` of a flat mode index.
pub fn mode_multi_index(degree: usize, j: usize) -> (usize, usize) {
    (j % (degree + 1), j / (degree + 1))
}

/// Evaluates `Λ_{K,j}` at a point of the closed element.
pub fn lambda_eval(mesh: &MeshHierarchy, degree: usize, element: usize, j: usize, x: f64, y: f64) -> Result<f64> {
    let big_h = mesh.coarse_size();
    let (cx, cy) = mesh.element_corner(element);
    let (xh, yh) = ((x - cx) / big_h, (y - cy) / big_h);
    let slack = 1e-12;
    if !(-slack..=1.0 + slack).contains(&xh) || !(-slack..=1.0 + slack).contains(&yh) {
        return Err(Error::PointOutsideElement { element, x, y });
    }
    let (q1, q2) = mode_multi_index(degree, j);
    Ok(lambda_1d(q1, xh) * lambda_1d(q2, yh) / big_h)
}

/// `√(2q+1) L_q(2t − 1)` on the unit interval.
fn lambda_1d(q: usize, t: f64) -> f64 {
    ((2 * q + 1) as f64).sqrt() * legendre(q, 2.0 * t - 1.0)
}

/// The linear map from fine Q1 functions to coarse Legendre coefficients.
///
/// A fine hat function restricted to a coarse element is a tensor product of
/// 1D hats, so every moment factorizes into two 1D integrals that are the
/// same on every element.
#[derive(Clone, Debug)]
pub struct MomentMap {
    mesh: MeshHierarchy,
    degree: usize,
    /// `table[a * (p+1) + q] = ∫₀^H ψ_a λ_q dx`, `λ_q = H^{-1/2} √(2q+1) L_q(2x/H − 1)`.
    table: Vec<f64>,
}

impl MomentMap {
    pub fn new(mesh: &MeshHierarchy, degree: usize) -> Self {
        let r = mesh.fine_per_coarse();
        let big_h = mesh.coarse_size();
        let n_gauss = (degree + 2).div_ceil(2) + 1;
        let (nodes, weights) = gauss_legendre(n_gauss);
        let mut table = vec![0.0; (r + 1) * (degree + 1)];
        let hh = 1.0 / r as f64;
        for cell in 0..r {
            for (t, w) in nodes.iter().zip(&weights) {
                let s = (t + 1.0) / 2.0;
                let xh = (cell as f64 + s) * hh;
                let weight = w * 0.5 * hh * big_h;
                for q in 0..=degree {
                    let lam = lambda_1d(q, xh) / big_h.sqrt();
                    // left and right hats of this cell
                    table[cell * (degree + 1) + q] += weight * (1.0 - s) * lam;
                    table[(cell + 1) * (degree + 1) + q] += weight * s * lam;
                }
            }
        }
        Self {
            mesh: *mesh,
            degree,
            table,
        }
    }

    pub fn mesh(&self) -> &MeshHierarchy {
        &self.mesh
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn modes(&self) -> usize {
        modes_per_element(self.degree)
    }

    pub fn n_coarse(&self) -> usize {
        self.mesh.n_elements() * self.modes()
    }

    /// `∫_K φ_{(a,b)} Λ_{K,j}` for the local vertex `(a, b)` of an element.
    pub fn local_moment(&self, a: usize, b: usize, j: usize) -> f64 {
        let (q1, q2) = mode_multi_index(self.degree, j);
        let d = self.degree + 1;
        self.table[a * d + q1] * self.table[b * d + q2]
    }

    /// Moments of a function given on every fine vertex.
    pub fn project_full(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.mesh.n_fine_vertices());
        self.project_with(|ix, iy| v[self.mesh.vertex_index(ix, iy)])
    }

    /// Moments of an interior-dof vector (zero boundary values).
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.mesh.n_fine_dofs());
        self.project_with(|ix, iy| self.mesh.dof_of_vertex(ix, iy).map_or(0.0, |d| v[d]))
    }

    pub fn project_with(&self, v: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let m = self.modes();
        let mut out = vec![0.0; self.n_coarse()];
        for k in 0..self.mesh.n_elements() {
            self.project_element_into(k, &v, &mut out[k * m..(k + 1) * m]);
        }
        out
    }

    /// Moments of one element.
    pub fn project_element_into(&self, element: usize, v: &impl Fn(usize, usize) -> f64, out: &mut [f64]) {
        let r = self.mesh.fine_per_coarse();
        let d = self.degree + 1;
        let (x0, y0) = self.mesh.element_fine_origin(element);
        // separable contraction: first along x, then along y
        let mut tmp = vec![0.0; (r + 1) * d];
        for b in 0..=r {
            for a in 0..=r {
                let val = v(x0 + a, y0 + b);
                if val != 0.0 {
                    for q1 in 0..d {
                        tmp[b * d + q1] += val * self.table[a * d + q1];
                    }
                }
            }
        }
        out.fill(0.0);
        for b in 0..=r {
            for q2 in 0..d {
                let w = self.table[b * d + q2];
                for q1 in 0..d {
                    out[q2 * d + q1] += w * tmp[b * d + q1];
                }
            }
        }
    }

    /// The sparse matrix `P` (coarse rows, interior fine dof columns).
    pub fn matrix(&self) -> SparseMatrix {
        let rows: Vec<usize> = (0..self.n_coarse()).collect();
        self.rows_for_elements(&(0..self.mesh.n_elements()).collect::<Vec<_>>(), None, &rows)
    }

    /// Moment rows of the listed elements restricted to `dofs` (local
    /// numbering by position). With `dofs = None` all interior dofs are used
    /// in global numbering. `_rows` only fixes the capacity estimate.
    pub fn rows_for_elements(&self, elements: &[usize], dofs: Option<&[usize]>, _rows: &[usize]) -> SparseMatrix {
        let r = self.mesh.fine_per_coarse();
        let m = self.modes();
        let ncols = dofs.map_or(self.mesh.n_fine_dofs(), |d| d.len());
        let local: Option<std::collections::HashMap<usize, usize>> =
            dofs.map(|d| d.iter().enumerate().map(|(k, &g)| (g, k)).collect());
        let mut triplets = Vec::with_capacity(elements.len() * m * (r + 1) * (r + 1));
        for (e, &k) in elements.iter().enumerate() {
            let (x0, y0) = self.mesh.element_fine_origin(k);
            for j in 0..m {
                for b in 0..=r {
                    for a in 0..=r {
                        let Some(g) = self.mesh.dof_of_vertex(x0 + a, y0 + b) else {
                            continue;
                        };
                        let col = match &local {
                            None => Some(g),
                            Some(map) => map.get(&g).copied(),
                        };
                        if let Some(c) = col {
                            triplets.push((e * m + j, c, self.local_moment(a, b, j)));
                        }
                    }
                }
            }
        }
        SparseMatrix::from_triplets(elements.len() * m, ncols, &triplets)
    }

    /// Evaluates the coarse function with coefficients `c` at a point. Points
    /// on element interfaces take the element with the larger index.
    pub fn eval(&self, c: &[f64], x: f64, y: f64) -> f64 {
        let n = self.mesh.coarse_cells_per_dim();
        let big_h = self.mesh.coarse_size();
        let i = ((x / big_h) as usize).min(n - 1);
        let j = ((y / big_h) as usize).min(n - 1);
        let k = self.mesh.element_index(i, j);
        let m = self.modes();
        (0..m)
            .map(|q| c[k * m + q] * lambda_eval(&self.mesh, self.degree, k, q, x, y).unwrap_or(0.0))
            .sum()
    }
}

/// L² norm of a coarse function; the basis is orthonormal.
pub fn coarse_l2_norm(c: &[f64]) -> f64 {
    c.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{interpolate_full, FineSystem};
    use approx::assert_relative_eq;

    #[test]
    fn legendre_basics() {
        for p in 0..=6 {
            assert_relative_eq!(legendre(p, 1.0), 1.0, epsilon = 1e-14);
        }
        assert_eq!(legendre(0, 0.3), 1.0);
        assert_relative_eq!(legendre(2, 0.5), -0.125, epsilon = 1e-15);
        let (t, w) = gauss_legendre(10);
        let integral: f64 = t.iter().zip(&w).map(|(&t, &w)| w * legendre(2, t) * legendre(3, t)).sum();
        assert!(integral.abs() <= 1e-14);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn lambda_is_orthonormal() {
        let mesh = MeshHierarchy::new(2, 2, 4).unwrap();
        let p = 3;
        let k = 5;
        let (cx, cy) = mesh.element_corner(k);
        let big_h = mesh.coarse_size();
        let (t, w) = gauss_legendre(8);
        for i in 0..modes_per_element(p) {
            for j in 0..modes_per_element(p) {
                let mut s = 0.0;
                for (a, wa) in t.iter().zip(&w) {
                    for (b, wb) in t.iter().zip(&w) {
                        let x = cx + big_h * (a + 1.0) / 2.0;
                        let y = cy + big_h * (b + 1.0) / 2.0;
                        let jac = big_h * big_h / 4.0;
                        s += wa * wb * jac
                            * lambda_eval(&mesh, p, k, i, x, y).unwrap()
                            * lambda_eval(&mesh, p, k, j, x, y).unwrap();
                    }
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((s - expected).abs() <= 1e-13, "({i},{j}) -> {s}");
            }
        }
        assert_relative_eq!(lambda_eval(&mesh, p, k, 0, cx, cy).unwrap(), 1.0 / big_h);
        assert!(lambda_eval(&mesh, 1, k, 1, cx + big_h / 2.0, cy + 0.1 * big_h).unwrap().abs() < 1e-14);
        assert!(lambda_eval(&mesh, 1, k, 1, cx - big_h / 2.0, cy).is_err());
    }

    #[test]
    fn constant_function_moments() {
        let mesh = MeshHierarchy::new(2, 2, 5).unwrap();
        let mm = MomentMap::new(&mesh, 2);
        let c = mm.project_full(&vec![1.0; mesh.n_fine_vertices()]);
        let big_h = mesh.coarse_size();
        for k in 0..mesh.n_elements() {
            assert_relative_eq!(c[k * 9], big_h, epsilon = 1e-15);
            for j in 1..9 {
                assert!(c[k * 9 + j].abs() < 1e-15);
            }
        }
        assert!(mm.project(&vec![0.0; mesh.n_fine_dofs()]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_modes_are_reproduced() {
        // Λ with q ≤ 1 is bilinear on K, so its fine interpolant is exact on K
        let mesh = MeshHierarchy::new(1, 1, 4).unwrap();
        let mm = MomentMap::new(&mesh, 1);
        let k = 2;
        for j in 0..4 {
            let c = mm.project_with(|ix, iy| {
                let (x, y) = mesh.vertex_point(ix, iy);
                lambda_eval(&mesh, 1, k, j, x, y).unwrap_or(0.0)
            });
            for q in 0..4 {
                let expected = if q == j { 1.0 } else { 0.0 };
                assert!((c[k * 4 + q] - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn matrix_agrees_with_project() {
        let mesh = MeshHierarchy::new(1, 2, 3).unwrap();
        let mm = MomentMap::new(&mesh, 1);
        let v: Vec<f64> = (0..mesh.n_fine_dofs()).map(|i| (i as f64 * 0.7).sin()).collect();
        let a = mm.matrix().mul_vec(&v);
        let b = mm.project(&v);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn projection_is_stable() {
        let mesh = MeshHierarchy::new(2, 2, 5).unwrap();
        let sys: FineSystem = crate::fem::assemble(&mesh, &crate::coefficient::CoefficientField::constant(&mesh, 1.0).unwrap());
        let mm = MomentMap::new(&mesh, 2);
        let v = interpolate_full(&mesh, |x, y| (7.0 * x).sin() * (3.0 * y + x).cos());
        let c = mm.project_full(&v);
        assert!(coarse_l2_norm(&c) <= sys.mass_full.quad_form(&v).sqrt());
    }
}
