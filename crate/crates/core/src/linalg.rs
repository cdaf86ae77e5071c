//! Sparse matrices and the direct solvers built on top of faer.
//!
//! Factorizations always run sequentially inside faer; parallelism lives one
//! level up (independent patches), which keeps every result bit-identical
//! regardless of the thread count.

use faer::dyn_stack::{MemBuffer, MemStack, StackReq};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::linalg::cholesky::llt::factor::LltRegularization;
use faer::sparse::linalg::cholesky::{factorize_symbolic_cholesky, SymbolicCholesky, SymmetricOrdering};
use faer::sparse::SymbolicSparseColMatRef;
use faer::sparse::SparseColMatRef;
use faer::reborrow::{Reborrow, ReborrowMut};
use faer::{Conj, Mat, MatMut, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed
    /// in input order, so the result does not depend on anything but the
    /// triplet sequence.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        // bucket by row, keeping input order inside each row
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for i in 0..nrows {
            let (s, e) = (counts[i], counts[i + 1]);
            order.clear();
            order.extend(s..e);
            order.sort_by_key(|&k| cols[k]);
            for &k in &order {
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == cols[k] {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    col_idx.push(cols[k]);
                    values.push(vals[k]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Takes raw CSR arrays. Column indices must be sorted and unique per row.
    pub fn from_csr(nrows: usize, ncols: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(row_ptr.len(), nrows + 1);
        assert_eq!(col_idx.len(), values.len());
        assert_eq!(row_ptr[nrows], col_idx.len());
        debug_assert!((0..nrows).all(|i| col_idx[row_ptr[i]..row_ptr[i + 1]].windows(2).all(|w| w[0] < w[1])));
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
        }
    }

    /// `y += alpha * A^T x`
    pub fn mul_transpose_acc(&self, x: &[f64], alpha: f64, y: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += alpha * v * xi;
            }
        }
    }

    pub fn mul_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.mul_transpose_acc(x, 1.0, &mut y);
        y
    }

    /// `xᵀ A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nrows);
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                x[i] * cols.iter().zip(vals).map(|(&c, &v)| v * y[c]).sum::<f64>()
            })
            .sum()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    /// `A X` for a dense block `X`.
    pub fn mul_mat(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut y = Mat::<f64>::zeros(self.nrows, x.ncols());
        for k in 0..x.ncols() {
            let xk = x.col(k);
            for i in 0..self.nrows {
                let (cols, vals) = self.row(i);
                y[(i, k)] = cols.iter().zip(vals).map(|(&c, &v)| v * xk[c]).sum();
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                col_idx[next[c]] = i;
                values[next[c]] = v;
                next[c] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr: counts,
            col_idx,
            values,
        }
    }

    /// Principal-style submatrix `A[rows, cols]` with local renumbering.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut local = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            local[c] = k;
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut buf: Vec<(usize, f64)> = Vec::new();
        row_ptr.push(0);
        for &r in rows {
            let (rc, rv) = self.row(r);
            buf.clear();
            buf.extend(rc.iter().zip(rv).filter(|(c, _)| local[**c] != usize::MAX).map(|(c, v)| (local[*c], *v)));
            buf.sort_by_key(|e| e.0);
            for &(c, v) in &buf {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            nrows: rows.len(),
            ncols: cols.len(),
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `self + alpha * other` on the union pattern.
    pub fn add_scaled(&self, other: &Self, alpha: f64) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut values = Vec::with_capacity(self.nnz().max(other.nnz()));
        row_ptr.push(0);
        for i in 0..self.nrows {
            let (ac, av) = self.row(i);
            let (bc, bv) = other.row(i);
            let (mut p, mut q) = (0, 0);
            while p < ac.len() || q < bc.len() {
                let ca = ac.get(p).copied().unwrap_or(usize::MAX);
                let cb = bc.get(q).copied().unwrap_or(usize::MAX);
                if ca == cb {
                    col_idx.push(ca);
                    values.push(av[p] + alpha * bv[q]);
                    p += 1;
                    q += 1;
                } else if ca < cb {
                    col_idx.push(ca);
                    values.push(av[p]);
                    p += 1;
                } else {
                    col_idx.push(cb);
                    values.push(alpha * bv[q]);
                    q += 1;
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.nrows == self.ncols
            && (0..self.nrows).all(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).all(|(&j, &v)| (v - self.get(j, i)).abs() <= tol * v.abs().max(1.0))
            })
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut out = Mat::<f64>::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out[(i, c)] = v;
            }
        }
        out
    }

    /// Largest absolute row sum, an upper bound for the spectral norm of a
    /// symmetric matrix.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows)
            .map(|i| self.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// CSR arrays of a symmetric matrix read as CSC arrays of the same matrix.
    fn as_faer_symmetric(&self) -> SparseColMatRef<'_, usize, f64> {
        let symbolic = SymbolicSparseColMatRef::new_checked(self.nrows, self.ncols, &self.row_ptr, None, &self.col_idx);
        SparseColMatRef::new(symbolic, &self.values)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Relative residual target of every direct solve.
pub const SOLVE_TOLERANCE: f64 = 1e-10;
const REFINEMENT_STEPS: usize = 10;

/// Sparse Cholesky factorization with fill-reducing ordering.
pub struct SparseCholesky {
    matrix: SparseMatrix,
    symbolic: SymbolicCholesky<usize>,
    factor: Vec<f64>,
}

impl std::fmt::Debug for SparseCholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseCholesky")
            .field("n", &self.matrix.nrows())
            .field("factor_nnz", &self.factor.len())
            .finish()
    }
}

impl SparseCholesky {
    pub fn new(matrix: &SparseMatrix) -> Result<Self> {
        assert_eq!(matrix.nrows(), matrix.ncols());
        let a = matrix.as_faer_symmetric();
        let symbolic = factorize_symbolic_cholesky(a.symbolic(), Side::Lower, SymmetricOrdering::Amd, Default::default())
            .map_err(|e| Error::FactorizationBreakdown(format!("{e:?}")))?;
        let mut factor = vec![0.0; symbolic.len_val()];
        let req = symbolic.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default());
        let mut buf = MemBuffer::new(req);
        symbolic
            .factorize_numeric_llt(
                &mut factor,
                a,
                Side::Lower,
                LltRegularization::default(),
                Par::Seq,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| match e {
                faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index } => {
                    Error::NotPositiveDefinite { index }
                }
            })?;
        Ok(Self {
            matrix: matrix.clone(),
            symbolic,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    fn apply_inverse(&self, rhs: MatMut<'_, f64>) {
        let req = self.symbolic.solve_in_place_scratch::<f64>(rhs.ncols(), Par::Seq);
        let mut buf = MemBuffer::new(req);
        faer::sparse::linalg::cholesky::LltRef::new(&self.symbolic, &self.factor).solve_in_place_with_conj(
            Conj::No,
            rhs,
            Par::Seq,
            MemStack::new(&mut buf),
        );
    }

    /// Solves `A x = b`, refining until the relative residual is below
    /// [`SOLVE_TOLERANCE`].
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut m = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.solve_mat(m.as_mut())?;
        Ok(m.col(0).iter().copied().collect())
    }

    /// Solves in place for every column of `rhs`.
    pub fn solve_mat(&self, mut rhs: MatMut<'_, f64>) -> Result<()> {
        let b = rhs.to_owned();
        self.apply_inverse(rhs.rb_mut());
        refine(&self.matrix, &b, rhs, |r| self.apply_inverse(r), SOLVE_TOLERANCE)
            .map_err(|residual| Error::ToleranceNotReached {
                residual,
                tolerance: SOLVE_TOLERANCE,
            })
    }
}

/// Iterative refinement `x += K⁻¹ (b - A x)` column by column. Returns the
/// worst relative residual on failure.
fn refine(
    a: &SparseMatrix,
    b: &Mat<f64>,
    mut x: MatMut<'_, f64>,
    apply: impl Fn(MatMut<'_, f64>),
    tol: f64,
) -> std::result::Result<(), f64> {
    let n = a.nrows();
    let bnorms: Vec<f64> = (0..b.ncols()).map(|k| b.col(k).norm_l2()).collect();
    let mut worst = 0.0;
    for step in 0..=REFINEMENT_STEPS {
        let mut r = Mat::<f64>::zeros(n, x.ncols());
        let mut active = Vec::new();
        worst = 0.0f64;
        for k in 0..x.ncols() {
            let xk: Vec<f64> = x.rb().col(k).iter().copied().collect();
            let ax = a.mul_vec(&xk);
            let mut rn = 0.0;
            for i in 0..n {
                let ri = b[(i, k)] - ax[i];
                r[(i, k)] = ri;
                rn += ri * ri;
            }
            let rel = if bnorms[k] > 0.0 { rn.sqrt() / bnorms[k] } else { rn.sqrt() };
            worst = worst.max(rel);
            // refine past the target so multi-rhs solves agree to rounding
            if rel > tol * 1e-1 {
                active.push(k);
            }
        }
        if active.is_empty() || step == REFINEMENT_STEPS {
            break;
        }
        let mut ra = Mat::<f64>::from_fn(n, active.len(), |i, c| r[(i, active[c])]);
        apply(ra.as_mut());
        for (c, &k) in active.iter().enumerate() {
            for i in 0..n {
                x[(i, k)] += ra[(i, c)];
            }
        }
    }
    if worst <= tol {
        Ok(())
    } else {
        Err(worst)
    }
}

/// Factorization of the saddle-point matrix `[A Cᵀ; C 0]`.
///
/// The factor is computed for `[A Cᵀ; C -δI]` with a tiny `δ`, which is
/// quasi-definite and therefore factorizable under any symmetric ordering.
/// Solves refine against the unregularized matrix.
pub struct KktSolver {
    n_primal: usize,
    n_dual: usize,
    kkt: SparseMatrix,
    symbolic: SymbolicCholesky<usize>,
    factor: Vec<f64>,
}

impl std::fmt::Debug for KktSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KktSolver")
            .field("n_primal", &self.n_primal)
            .field("n_dual", &self.n_dual)
            .finish()
    }
}

const KKT_DELTA: f64 = 1e-10;

impl KktSolver {
    /// `a` is the SPD primal block, `c` holds one constraint per row.
    pub fn new(a: &SparseMatrix, c: &SparseMatrix) -> Result<Self> {
        let (n, m) = (a.nrows(), c.nrows());
        assert_eq!(a.ncols(), n);
        assert_eq!(c.ncols(), n);
        if m > n {
            return Err(Error::RankDeficient { rows: m, dofs: n });
        }
        let ct = c.transpose();
        let mut triplets = Vec::with_capacity(a.nnz() + 2 * c.nnz() + m);
        let mut reg = Vec::with_capacity(a.nnz() + 2 * c.nnz() + m);
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                triplets.push((i, j, v));
            }
            let (cols, vals) = ct.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                triplets.push((i, n + j, v));
            }
        }
        for i in 0..m {
            let (cols, vals) = c.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                triplets.push((n + i, j, v));
            }
        }
        reg.extend_from_slice(&triplets);
        let scale = a.norm_inf().max(1e-300);
        for i in 0..m {
            triplets.push((n + i, n + i, 0.0));
            reg.push((n + i, n + i, -KKT_DELTA * scale));
        }
        let kkt = SparseMatrix::from_triplets(n + m, n + m, &triplets);
        let regularized = SparseMatrix::from_triplets(n + m, n + m, &reg);
        let view = regularized.as_faer_symmetric();
        let symbolic =
            factorize_symbolic_cholesky(view.symbolic(), Side::Lower, SymmetricOrdering::Amd, Default::default())
                .map_err(|e| Error::FactorizationBreakdown(format!("{e:?}")))?;
        let mut factor = vec![0.0; symbolic.len_val()];
        let signs: Vec<i8> = (0..n + m).map(|i| if i < n { 1 } else { -1 }).collect();
        let req = symbolic.factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default());
        let mut buf = MemBuffer::new(req);
        symbolic
            .factorize_numeric_ldlt(
                &mut factor,
                view,
                Side::Lower,
                LdltRegularization {
                    dynamic_regularization_signs: Some(&signs),
                    dynamic_regularization_delta: KKT_DELTA * scale,
                    dynamic_regularization_epsilon: f64::EPSILON * scale,
                },
                Par::Seq,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| Error::FactorizationBreakdown(format!("{e:?}")))?;
        Ok(Self {
            n_primal: n,
            n_dual: m,
            kkt,
            symbolic,
            factor,
        })
    }

    pub fn n_primal(&self) -> usize {
        self.n_primal
    }

    pub fn n_dual(&self) -> usize {
        self.n_dual
    }

    fn apply_inverse(&self, rhs: MatMut<'_, f64>) {
        let req = self.symbolic.solve_in_place_scratch::<f64>(rhs.ncols(), Par::Seq);
        let mut buf = MemBuffer::new(req);
        faer::sparse::linalg::cholesky::LdltRef::new(&self.symbolic, &self.factor).solve_in_place_with_conj(
            Conj::No,
            rhs,
            Par::Seq,
            MemStack::new(&mut buf),
        );
    }

    /// Solves for every column of `rhs`, laid out as `[primal; multiplier]`.
    pub fn solve_mat(&self, mut rhs: MatMut<'_, f64>) -> Result<()> {
        assert_eq!(rhs.nrows(), self.n_primal + self.n_dual);
        let b = rhs.to_owned();
        self.apply_inverse(rhs.rb_mut());
        refine(&self.kkt, &b, rhs, |r| self.apply_inverse(r), SOLVE_TOLERANCE).map_err(|residual| {
            if self.n_dual > 0 && residual > 1e-6 {
                Error::RankDeficient {
                    rows: self.n_dual,
                    dofs: self.n_primal,
                }
            } else {
                Error::ToleranceNotReached {
                    residual,
                    tolerance: SOLVE_TOLERANCE,
                }
            }
        })
    }

    pub fn solve(&self, rhs_primal: &[f64], rhs_dual: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.n_primal;
        let mut m = Mat::<f64>::from_fn(n + self.n_dual, 1, |i, _| if i < n { rhs_primal[i] } else { rhs_dual[i - n] });
        self.solve_mat(m.as_mut())?;
        let x: Vec<f64> = m.col(0).iter().copied().collect();
        Ok((x[..n].to_vec(), x[n..].to_vec()))
    }
}

/// Dense Cholesky factor of an SPD matrix.
/// Parallelism for dense products: the rayon pool when enabled.
pub fn gemm_par() -> Par {
    #[cfg(feature = "parallel")]
    {
        Par::rayon(rayon::current_num_threads())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Par::Seq
    }
}

#[derive(Clone, Debug)]
pub struct DenseCholesky {
    factor: Mat<f64>,
}

impl DenseCholesky {
    /// Factors `a`, consuming it; only its lower triangle is read.
    pub fn new(mut a: Mat<f64>) -> Result<Self> {
        let n = a.nrows();
        let req = faer::linalg::cholesky::llt::factor::cholesky_in_place_scratch::<f64>(n, Par::Seq, Default::default());
        let mut buf = MemBuffer::new(req);
        faer::linalg::cholesky::llt::factor::cholesky_in_place(
            a.as_mut(),
            LltRegularization::default(),
            Par::Seq,
            MemStack::new(&mut buf),
            Default::default(),
        )
        .map_err(|faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index }| {
            Error::NotPositiveDefinite { index }
        })?;
        Ok(Self { factor: a })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn solve_in_place(&self, rhs: MatMut<'_, f64>) {
        let req = StackReq::EMPTY;
        let mut buf = MemBuffer::new(req);
        faer::linalg::cholesky::llt::solve::solve_in_place(
            self.factor.as_ref(),
            rhs,
            Par::Seq,
            MemStack::new(&mut buf),
        );
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut m = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.solve_in_place(m.as_mut());
        m.col(0).iter().copied().collect()
    }
}

/// `y = A x` for a dense symmetric matrix.
pub fn dense_mul_vec(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    let xm = MatRef::from_column_major_slice(x, x.len(), 1);
    let y = a * xm;
    y.col(0).iter().copied().collect()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    norm(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        SparseMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = SparseMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 0.5), (1, 1, -1.0)]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 2), 1.5);
        assert_eq!(m.get(1, 0), 0.0);
        assert_eq!(m.mul_vec(&[1.0, 1.0, 2.0]), vec![5.0, -1.0]);
        assert_eq!(m.transpose().mul_vec(&[1.0, 1.0]), vec![2.0, -1.0, 1.5]);
    }

    #[test]
    fn submatrix_and_add() {
        let a = laplace_1d(5);
        let s = a.submatrix(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(s, laplace_1d(3));
        let d = a.add_scaled(&SparseMatrix::identity(5), 3.0);
        assert_eq!(d.get(2, 2), 5.0);
        assert_eq!(d.get(2, 3), -1.0);
        assert!(d.is_symmetric(0.0));
    }

    #[test]
    fn cholesky_identity_returns_rhs() {
        let c = SparseCholesky::new(&SparseMatrix::identity(4)).unwrap();
        assert_eq!(c.solve(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn cholesky_recovers_manufactured_solution() {
        let a = laplace_1d(50);
        let u: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.mul_vec(&u);
        let x = SparseCholesky::new(&a).unwrap().solve(&b).unwrap();
        let err: f64 = x.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-9 * l2_norm(&u));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = laplace_1d(4).add_scaled(&SparseMatrix::identity(4), -5.0);
        assert!(matches!(SparseCholesky::new(&a), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn kkt_zero_rhs_gives_zero() {
        let a = laplace_1d(6);
        let c = SparseMatrix::from_triplets(2, 6, &[(0, 0, 1.0), (0, 1, 1.0), (1, 4, 1.0), (1, 5, 2.0)]);
        let k = KktSolver::new(&a, &c).unwrap();
        let (x, y) = k.solve(&[0.0; 6], &[0.0; 2]).unwrap();
        assert!(x.iter().chain(&y).all(|&v| v == 0.0));
    }

    #[test]
    fn kkt_without_constraints_matches_spd() {
        let a = laplace_1d(8);
        let b: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let k = KktSolver::new(&a, &SparseMatrix::zeros(0, 8)).unwrap();
        let (x, _) = k.solve(&b, &[]).unwrap();
        let y = SparseCholesky::new(&a).unwrap().solve(&b).unwrap();
        assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn kkt_satisfies_constraints() {
        let a = laplace_1d(10);
        let c = SparseMatrix::from_triplets(
            3,
            10,
            &[(0, 0, 1.0), (0, 1, 1.0), (0, 2, 1.0), (1, 3, 0.5), (1, 7, -1.0), (2, 9, 1.0)],
        );
        let b: Vec<f64> = (0..10).map(|i| (i as f64).cos()).collect();
        let d = [0.3, -0.2, 1.0];
        let (x, y) = KktSolver::new(&a, &c).unwrap().solve(&b, &d).unwrap();
        let cx = c.mul_vec(&x);
        for (p, q) in cx.iter().zip(&d) {
            assert!((p - q).abs() < 1e-10);
        }
        let mut r = a.mul_vec(&x);
        c.mul_transpose_acc(&y, 1.0, &mut r);
        for (p, q) in r.iter().zip(&b) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn kkt_detects_dependent_rows() {
        let a = laplace_1d(6);
        let c = SparseMatrix::from_triplets(2, 6, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 2.0), (1, 1, 2.0)]);
        let k = KktSolver::new(&a, &c);
        let res = k.and_then(|k| k.solve(&[1.0; 6], &[1.0, 0.0]));
        assert!(matches!(res, Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn dense_cholesky_solves() {
        let a = laplace_1d(6).to_dense();
        let c = DenseCholesky::new(a.clone()).unwrap();
        let x = c.solve(&[1.0; 6]);
        let r = dense_mul_vec(&a, &x);
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(DenseCholesky::new(-a).is_err());
    }
}
