//! Sparse storage, direct factorization and small dense eigen checks.
//!
//! Assembly produces triplets which are compressed into row-major storage.
//! Factorizations are delegated to faer's sparse Cholesky/LU; every solve is
//! finished with one step of iterative refinement and verified against a
//! residual contract.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative residual every direct solve must meet.
pub const SOLVE_RESIDUAL_LIMIT: f64 = 1e-12;

/// Unstructured triplet accumulator (duplicates add).
#[derive(Debug, Clone)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Triplets { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    pub fn to_csr(&self, symmetric: bool) -> SparseMatrix {
        let mut sorted = self.entries.clone();
        sorted.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(sorted.len());
        for (r, c, v) in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut row_ptr = vec![0usize; self.nrows + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = merged.iter().map(|e| e.1).collect();
        let values = merged.iter().map(|e| e.2).collect();
        SparseMatrix { nrows: self.nrows, ncols: self.ncols, row_ptr, col_idx, values, symmetric }
    }
}

/// Compressed-row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    /// Set by the assembler; verified on demand by [`SparseMatrix::symmetry_error`].
    pub symmetric: bool,
}

impl SparseMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            y[r] = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
        }
    }

    pub fn matvec_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let s: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
            y[r] += alpha * s;
        }
    }

    /// y += alpha * A^T x
    pub fn matvec_transpose_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += alpha * v * x[r];
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// max |A - A^T| entry, for symmetry verification.
    pub fn symmetry_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                err = err.max((v - self.get(c, r)).abs());
            }
        }
        err
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// Coordinate-format text dump: one `row col value` line per entry.
    pub fn write_coordinate(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                writeln!(w, "{} {} {:.16e}", r, c, v)?;
            }
        }
        Ok(())
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                triplets.push(Triplet::new(r, c, v));
            }
        }
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &triplets)
            .map_err(|e| Error::SingularSystem(format!("sparse conversion failed: {e:?}")))
    }
}

enum Factorization {
    Llt(faer::sparse::linalg::solvers::Llt<usize, f64>),
    Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
}

impl Factorization {
    fn solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = faer::Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        match self {
            Factorization::Llt(f) => f.solve_in_place(x.as_mut()),
            Factorization::Lu(f) => f.solve_in_place(x.as_mut()),
        }
        (0..rhs.len()).map(|i| x[(i, 0)]).collect()
    }
}

/// Direct factorization of a square sparse matrix, reusable across several
/// right-hand sides. Cholesky when the symmetry flag is set (with LU as
/// fallback if the matrix turns out indefinite), LU with partial pivoting
/// otherwise.
pub struct Factorized<'a> {
    matrix: &'a SparseMatrix,
    factor: Factorization,
}

impl<'a> Factorized<'a> {
    pub fn new(matrix: &'a SparseMatrix) -> Result<Self> {
        if matrix.nrows != matrix.ncols {
            return Err(Error::SingularSystem(format!(
                "matrix is {}x{}, not square",
                matrix.nrows, matrix.ncols
            )));
        }
        let faer_mat = matrix.to_faer()?;
        let factor = if matrix.symmetric {
            match faer_mat.sp_cholesky(faer::Side::Lower) {
                Ok(llt) => Factorization::Llt(llt),
                Err(_) => Factorization::Lu(faer_mat.sp_lu().map_err(lu_error)?),
            }
        } else {
            Factorization::Lu(faer_mat.sp_lu().map_err(lu_error)?)
        };
        Ok(Factorized { matrix, factor })
    }

    /// Solves to the residual contract, with one step of iterative refinement.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = rhs.len();
        let mut x = self.factor.solve_vec(rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem(
                "factorization produced non-finite values (numerically singular)".into(),
            ));
        }
        // One refinement step.
        let mut residual = vec![0.0; n];
        self.matrix.matvec(&x, &mut residual);
        for (r, b) in residual.iter_mut().zip(rhs) {
            *r = b - *r;
        }
        let correction = self.factor.solve_vec(&residual);
        for (xi, ci) in x.iter_mut().zip(&correction) {
            *xi += ci;
        }

        let rhs_norm = norm2(rhs);
        self.matrix.matvec(&x, &mut residual);
        for (r, b) in residual.iter_mut().zip(rhs) {
            *r = b - *r;
        }
        let rel = if rhs_norm > 0.0 { norm2(&residual) / rhs_norm } else { norm2(&residual) };
        if !rel.is_finite() || rel > SOLVE_RESIDUAL_LIMIT {
            return Err(Error::ResidualTooLarge { residual: rel, limit: SOLVE_RESIDUAL_LIMIT });
        }
        Ok(x)
    }
}

fn lu_error(e: faer::sparse::linalg::LuError) -> Error {
    match e {
        faer::sparse::linalg::LuError::SymbolicSingular { index } => {
            Error::SingularSystem(format!("no pivot found at elimination step {index}"))
        }
        other => Error::SingularSystem(format!("{other:?}")),
    }
}

/// Factorizes and solves in one call.
pub fn factor_solve(matrix: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    Factorized::new(matrix)?.solve(rhs)
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Smallest eigenvalue of a symmetric dense matrix by shifted inverse power
/// iteration. The Gershgorin lower bound provides the initial shift; a final
/// Rayleigh-quotient polish sharpens the estimate.
pub fn smallest_eigenvalue_dense(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::SingularSystem("eigenvalue check needs a square matrix".into()));
    }
    if n > 500 {
        return Err(Error::SingularSystem(
            "dense eigenvalue check capped at dimension 500".into(),
        ));
    }
    let sym_err = (m - m.transpose()).abs().max();
    if sym_err > 1e-10 * (1.0 + m.abs().max()) {
        return Err(Error::SingularSystem(format!(
            "matrix is not symmetric, max |A - A^T| = {sym_err:.3e}"
        )));
    }
    // Gershgorin lower bound, strictly below every eigenvalue.
    let mut lower = f64::INFINITY;
    for i in 0..n {
        let radius: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
        lower = lower.min(m[(i, i)] - radius);
    }
    let scale = m.abs().max().max(1e-300);
    let mut shift = lower - 1e-8 * scale;

    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut rayleigh = f64::NAN;
    // Outer loop updates the shift, never past the eigenvalue the iterate is
    // locked on; inner loop reuses a single factorization.
    for _ in 0..16 {
        let shifted = m.clone() - DMatrix::identity(n, n) * shift;
        let Some(lu) = shifted.lu().try_inverse() else {
            shift -= 1e-6 * scale;
            continue;
        };
        let mut residual = f64::INFINITY;
        for _ in 0..500 {
            let w = &lu * &v;
            let norm = w.norm();
            if !norm.is_finite() || norm == 0.0 {
                break;
            }
            let w = w / norm;
            rayleigh = (w.transpose() * m * &w)[(0, 0)];
            residual = (m * &w - &w * rayleigh).norm();
            v = w;
            if residual <= 1e-10 * rayleigh.abs().max(1e-3 * scale) {
                return Ok(rayleigh);
            }
            // Aligned well enough that the Rayleigh quotient sits within
            // `residual` of the locked eigenvalue; safe to move the shift.
            if residual < 0.01 * (rayleigh - shift).abs() {
                break;
            }
        }
        shift = rayleigh - 2.0 * residual.max(1e-14 * scale);
    }
    Ok(rayleigh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn csr_from(entries: &[(usize, usize, f64)], n: usize, symmetric: bool) -> SparseMatrix {
        let mut t = Triplets::new(n, n);
        for &(r, c, v) in entries {
            t.push(r, c, v);
        }
        t.to_csr(symmetric)
    }

    #[test]
    fn csr_sorts_and_sums_duplicates() {
        let m = csr_from(&[(1, 1, 2.0), (0, 1, 3.0), (0, 0, 1.0), (0, 1, -1.0)], 2, false);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 1), 2.0);
        let (cols, _) = m.row(0);
        assert_eq!(cols, &[0, 1]);
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let m = csr_from(&[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)], 3, true);
        let x = factor_solve(&m, &[3.0, -1.0, 0.5]).unwrap();
        assert_eq!(x, vec![3.0, -1.0, 0.5]);
    }

    #[test]
    fn spd_2x2_hand_inverse() {
        let m = csr_from(&[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)], 2, true);
        let x = factor_solve(&m, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(x[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[1], 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn random_spd_meets_residual_contract() {
        let n = 50;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let spd = r.transpose() * &r + DMatrix::identity(n, n);
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            for j in 0..n {
                t.push(i, j, spd[(i, j)]);
            }
        }
        let m = t.to_csr(true);
        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = factor_solve(&m, &rhs).unwrap();
        let mut res = vec![0.0; n];
        m.matvec(&x, &mut res);
        for (r, b) in res.iter_mut().zip(&rhs) {
            *r -= b;
        }
        assert!(norm2(&res) / norm2(&rhs) <= 1e-12);
    }

    #[test]
    fn transpose_solve_agrees() {
        // Solving A^T y = b via the transposed CSR must agree with solving
        // the explicitly transposed matrix.
        let n = 20;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, 4.0 + rng.random_range(0.0..1.0));
            for _ in 0..3 {
                let j = rng.random_range(0..n);
                t.push(i, j, rng.random_range(-1.0..1.0));
            }
        }
        let mut tt = Triplets::new(n, n);
        for &(r, c, v) in &t.entries {
            tt.push(c, r, v);
        }
        let a = t.to_csr(false);
        let at = tt.to_csr(false);
        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y1 = factor_solve(&at, &rhs).unwrap();
        // residual of A^T y = rhs using a's transpose-matvec
        let mut res = vec![0.0; n];
        a.matvec_transpose_add(1.0, &y1, &mut res);
        for (r, b) in res.iter_mut().zip(&rhs) {
            *r -= b;
        }
        assert!(norm2(&res) / norm2(&rhs) <= 1e-12);
    }

    #[test]
    fn structurally_singular_reports_pivot() {
        let m = csr_from(&[(0, 0, 1.0), (1, 1, 0.0)], 2, false);
        match factor_solve(&m, &[1.0, 1.0]) {
            Err(Error::SingularSystem(_)) | Err(Error::ResidualTooLarge { .. }) => {}
            other => panic!("expected singular system, got {other:?}"),
        }
    }

    #[test]
    fn coordinate_dump_format() {
        let m = csr_from(&[(0, 0, 1.5), (1, 0, -2.0), (1, 1, 3.0)], 2, false);
        let mut buf = Vec::new();
        m.write_coordinate(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "2 2 3");
        assert!(lines.next().unwrap().starts_with("0 0 1.5"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn eigen_identity_and_diag() {
        let id = DMatrix::<f64>::identity(4, 4);
        assert_abs_diff_eq!(smallest_eigenvalue_dense(&id).unwrap(), 1.0, epsilon = 1e-8);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![7.0, 3.0]));
        assert_abs_diff_eq!(smallest_eigenvalue_dense(&d).unwrap(), 3.0, epsilon = 1e-8);
    }

    #[test]
    fn eigen_known_spectrum() {
        // Conjugate a known diagonal spectrum by a random orthogonal matrix.
        let n = 30;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let qr = a.qr();
        let q = qr.q();
        let spectrum: Vec<f64> = (0..n).map(|i| 0.37 + i as f64).collect();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(spectrum));
        let m = &q * d * q.transpose();
        let lambda = smallest_eigenvalue_dense(&m).unwrap();
        assert_abs_diff_eq!(lambda, 0.37, epsilon = 1e-8 * 0.37);
    }

    #[test]
    fn eigen_rejects_nonsymmetric() {
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(0, 1)] = 1.0;
        assert!(smallest_eigenvalue_dense(&m).is_err());
    }
}
