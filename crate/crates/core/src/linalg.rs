//! Small dense/sparse helpers shared by the solvers.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::sparse::linalg::solvers::{Lu as SparseLu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::traits::ComplexField;
use faer::{Mat, MatMut, MatRef};
use num_complex::Complex64;

use crate::error::{FloquetError, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Scalars the factorizations work with.
pub trait Scalar: ComplexField + Copy {
    fn modulus(self) -> f64;
}

impl Scalar for f64 {
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl Scalar for C64 {
    fn modulus(self) -> f64 {
        self.norm()
    }
}

/// Column-major block of `cols` state vectors, each of length `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct States {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
}

impl States {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        States {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn from_vec(v: Vec<C64>) -> Self {
        States {
            rows: v.len(),
            cols: 1,
            data: v,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut s = States::zeros(n, n);
        for i in 0..n {
            s.data[i * n + i] = ONE;
        }
        s
    }

    pub fn from_mat(m: MatRef<'_, C64>) -> Self {
        let mut s = States::zeros(m.nrows(), m.ncols());
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                s.data[c * m.nrows() + r] = m[(r, c)];
            }
        }
        s
    }

    pub fn col(&self, c: usize) -> &[C64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn col_mut(&mut self, c: usize) -> &mut [C64] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: C64, other: &States) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: C64) -> States {
        States {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = ZERO);
    }

    pub fn as_mat(&self) -> MatRef<'_, C64> {
        MatRef::from_column_major_slice(&self.data, self.rows, self.cols)
    }

    pub fn as_mat_mut(&mut self) -> MatMut<'_, C64> {
        MatMut::from_column_major_slice_mut(&mut self.data, self.rows, self.cols)
    }

    pub fn to_mat(&self) -> Mat<C64> {
        self.as_mat().to_owned()
    }

    /// Reinterprets as `rows_new x (len / rows_new)`, used to treat a stack
    /// of blocks as one wide matrix.
    pub fn as_wide_mut(&mut self, rows_new: usize) -> MatMut<'_, C64> {
        let cols = self.data.len() / rows_new;
        MatMut::from_column_major_slice_mut(&mut self.data, rows_new, cols)
    }
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// `a^* b`
pub fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn scale_to_unit(v: &mut [C64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Sparsity pattern with a reusable symbolic factorization.
pub struct SparsePattern {
    dim: usize,
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    lu: SymbolicLu<usize>,
}

impl SparsePattern {
    /// `indices` lists `(row, col)` in the order values will be supplied;
    /// repeated positions are summed.
    pub fn new(dim: usize, indices: &[(usize, usize)]) -> Result<Self> {
        let pairs: Vec<Pair<usize, usize>> = indices.iter().map(|&(row, col)| Pair { row, col }).collect();
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(dim, dim, &pairs)
            .map_err(|e| FloquetError::Linalg(format!("{:?}", e)))?;
        let lu = SymbolicLu::try_new(symbolic.as_ref()).map_err(|e| FloquetError::Linalg(format!("{:?}", e)))?;
        Ok(SparsePattern {
            dim,
            symbolic,
            argsort,
            lu,
        })
    }

    pub fn factor<T: Scalar>(&self, values: &[T]) -> Result<SquareSolver<T>> {
        let m = SparseColMat::new_from_argsort(self.symbolic.clone(), &self.argsort, values)
            .map_err(|e| FloquetError::Linalg(format!("{:?}", e)))?;
        let lu = SparseLu::try_new_with_symbolic(self.lu.clone(), m.as_ref())
            .map_err(|e| FloquetError::SingularMatrix(format!("{:?}", e)))?;
        Ok(SquareSolver::Sparse { dim: self.dim, lu })
    }
}

/// Factorized square matrix.
pub enum SquareSolver<T = C64> {
    Dense { lu: PartialPivLu<T> },
    Sparse { dim: usize, lu: SparseLu<usize, T> },
}

impl<T: Scalar> SquareSolver<T> {
    /// Dense LU; fails when a pivot is tiny relative to the largest one.
    pub fn dense(m: MatRef<'_, T>) -> Result<Self> {
        let lu = m.partial_piv_lu();
        let u = lu.U();
        let mut max = 0.0f64;
        let mut min = f64::INFINITY;
        for i in 0..u.nrows() {
            let a = u[(i, i)].modulus();
            max = max.max(a);
            min = min.min(a);
        }
        if !(min > 1e-15 * max) || !min.is_finite() {
            return Err(FloquetError::SingularMatrix(format!(
                "pivot ratio {:e}",
                min / max
            )));
        }
        Ok(SquareSolver::Dense { lu })
    }

    pub fn dim(&self) -> usize {
        match self {
            SquareSolver::Dense { lu } => lu.U().nrows(),
            SquareSolver::Sparse { dim, .. } => *dim,
        }
    }

    pub fn solve_in_place(&self, rhs: MatMut<'_, T>) {
        match self {
            SquareSolver::Dense { lu } => lu.solve_in_place(rhs),
            SquareSolver::Sparse { lu, .. } => lu.solve_in_place(rhs),
        }
    }

    /// Solves with the plain (unconjugated) transpose.
    pub fn solve_transpose_in_place(&self, rhs: MatMut<'_, T>) {
        match self {
            SquareSolver::Dense { lu } => lu.solve_transpose_in_place(rhs),
            SquareSolver::Sparse { lu, .. } => lu.solve_transpose_in_place(rhs),
        }
    }

    pub fn solve_vec(&self, v: &mut [T]) {
        let n = v.len();
        self.solve_in_place(MatMut::from_column_major_slice_mut(v, n, 1));
    }
}

/// Real-to-complex dense copy.
pub fn complexify(m: MatRef<'_, f64>) -> Mat<C64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| C64::new(m[(i, j)], 0.0))
}

/// Eigenvalues and right eigenvectors of a real matrix.
pub fn eig_real(m: MatRef<'_, f64>) -> Result<(Vec<C64>, Mat<C64>)> {
    let e = m.eigen().map_err(|e| FloquetError::Linalg(format!("{:?}", e)))?;
    let vals = (0..m.nrows()).map(|i| e.S()[i]).collect();
    Ok((vals, e.U().to_owned()))
}

/// Eigenvalues of a real matrix.
pub fn eigvals_real(m: MatRef<'_, f64>) -> Result<Vec<C64>> {
    m.eigenvalues().map_err(|e| FloquetError::Linalg(format!("{:?}", e)))
}

/// Eigenvalues of a real matrix after repeatedly splitting off its numerical
/// null space: in an orthonormal basis `[R, Z]` with `A Z ~ 0` the matrix is
/// block triangular, so the spectrum is `eig(R^T A R)` plus exact zeros.
/// A defective zero eigenvalue then stays zero instead of spreading into a
/// cloud of radius `eps^(1/k)`.
pub fn eigvals_real_deflated(m: MatRef<'_, f64>, rel_tol: f64) -> Result<Vec<C64>> {
    let mut a = m.to_owned();
    let mut zeros = 0;
    loop {
        let n = a.nrows();
        if n == 0 {
            break;
        }
        let svd = a.svd().map_err(|e| FloquetError::Linalg(format!("{:?}", e)))?;
        let s = svd.S();
        let top = s[0];
        let rank = (0..n).filter(|&i| s[i] > rel_tol * top).count();
        if rank == n || top == 0.0 {
            if top == 0.0 {
                zeros += n;
                break;
            }
            let mut vals = eigvals_real(a.as_ref())?;
            vals.extend(std::iter::repeat_n(ZERO, zeros));
            return Ok(vals);
        }
        zeros += n - rank;
        let r = svd.V().subcols(0, rank);
        a = r.transpose() * &a * r;
    }
    Ok(vec![ZERO; zeros])
}

/// Order by decreasing modulus, ties broken by imaginary part so that
/// `x + iy` precedes `x - iy`.
pub fn by_modulus_desc(a: &C64, b: &C64) -> std::cmp::Ordering {
    b.norm().total_cmp(&a.norm()).then(b.im.total_cmp(&a.im))
}
