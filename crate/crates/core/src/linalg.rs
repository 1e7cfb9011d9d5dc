//! Dense linear-algebra helpers shared by the kernel and estimator modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU, SVD};

use crate::error::{KprError, Result};

/// Relative jitter added to the diagonal of a rank-deficient kernel.
pub const JITTER: f64 = 1e-8;

/// Smallest acceptable squared Cholesky pivot, relative to the mean diagonal.
const PIVOT_FLOOR: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix with eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen(m: &DMatrix<f64>) -> SortedEigen {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(m.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    SortedEigen { values, vectors }
}

/// Flips `v` so that its entry of largest magnitude is positive (ties go to the lowest index).
/// Returns whether a flip happened.
pub fn fix_sign(v: &mut DVector<f64>) -> bool {
    let mut best = 0;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        // Entries equal up to rounding count as ties.
        if x.abs() > best_abs * (1.0 + 1e-12) + 1e-300 {
            best = i;
            best_abs = x.abs();
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
        return true;
    }
    false
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Thin SVD with singular values sorted in descending order.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let svd = SVD::new(m.clone(), true, true);
        let u = svd.u.expect("u requested");
        let v = svd.v_t.expect("v requested").transpose();
        let mut out = ThinSvd {
            u,
            singular_values: svd.singular_values,
            v,
        };
        for j in 0..out.singular_values.len() {
            let mut col = out.v.column(j).into_owned();
            if fix_sign(&mut col) {
                out.v.set_column(j, &col);
                let flipped = -out.u.column(j).into_owned();
                out.u.set_column(j, &flipped);
            }
        }
        out
    }

    /// Numerical rank using the usual `max(n, p) * eps * sigma_max` cut-off.
    pub fn rank(&self) -> usize {
        let smax = self.singular_values.iter().cloned().fold(0.0, f64::max);
        let dim = self.u.nrows().max(self.v.nrows()) as f64;
        let tol = dim * f64::EPSILON * smax;
        self.singular_values.iter().filter(|&&s| s > tol).count()
    }

    /// `sum_{j<k} (u_j'y / s_j) v_j`.
    pub fn truncated_solve(&self, y: &DVector<f64>, k: usize) -> DVector<f64> {
        let mut beta = DVector::zeros(self.v.nrows());
        for j in 0..k {
            let coef = self.u.column(j).dot(y) / self.singular_values[j];
            beta.axpy(coef, &self.v.column(j), 1.0);
        }
        beta
    }
}

/// Cholesky factor of `m` if it is numerically positive definite.
pub fn cholesky_pd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return None;
    }
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let chol = Cholesky::new(symmetrize(m))?;
    let l = chol.l();
    let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !min_pivot.is_finite() || min_pivot < PIVOT_FLOOR * scale {
        return None;
    }
    Some(l)
}

/// A positive-definite version of a kernel together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct PdKernel {
    pub matrix: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub jittered: bool,
}

/// Returns `m` unchanged if it is positive definite, otherwise `m + eps * tr(m)/m * I`.
pub fn regularize_pd(m: &DMatrix<f64>, what: &str) -> Result<PdKernel> {
    if let Some(chol) = cholesky_pd(m) {
        return Ok(PdKernel {
            matrix: m.clone(),
            chol,
            jittered: false,
        });
    }
    let n = m.nrows();
    let tr = m.trace();
    if n == 0 || !(tr > 0.0) {
        return Err(KprError::SingularKernel(format!("{what} has non-positive trace {tr:e}")));
    }
    let jittered = m + DMatrix::identity(n, n) * (JITTER * tr / n as f64);
    match cholesky_pd(&jittered) {
        Some(chol) => Ok(PdKernel {
            matrix: jittered,
            chol,
            jittered: true,
        }),
        None => Err(KprError::SingularKernel(format!(
            "{what} is not positive definite after adding relative jitter {JITTER:e}"
        ))),
    }
}

/// Solves `(a + shift I) x = b` for symmetric positive semi-definite `a` and `shift > 0`.
pub fn solve_shifted_spd(a: &DMatrix<f64>, shift: f64, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    let m = symmetrize(a) + DMatrix::identity(n, n) * shift;
    match Cholesky::new(m.clone()) {
        Some(chol) => Ok(chol.solve(b)),
        None => solve_general(&m, b),
    }
}

pub fn solve_spd_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match Cholesky::new(symmetrize(a)) {
        Some(chol) => Ok(chol.solve(b)),
        None => {
            let lu = LU::new(a.clone());
            lu.solve(b)
                .ok_or_else(|| KprError::SingularSystem("symmetric system has no solution".into()))
        }
    }
}

/// LU solve with partial pivoting; rejects systems whose pivots fall to rounding level.
pub fn solve_general(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let lu: LU<f64, Dyn, Dyn> = LU::new(a.clone());
    let u = lu.u();
    let min_pivot = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-14 * scale * n as f64) {
        return Err(KprError::SingularSystem(format!(
            "smallest LU pivot {min_pivot:e} relative to scale {scale:e}"
        )));
    }
    lu.solve(b)
        .ok_or_else(|| KprError::SingularSystem("LU solve failed".into()))
}

pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

/// `J m J` with `J = I - 11'/n`.
pub fn double_center_raw(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| m.column(j).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    DMatrix::from_fn(n, n, |i, j| m[(i, j)] - row_means[i] - col_means[j] + grand)
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn principal_submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

/// Sample variance with denominator `n - 1`.
pub fn sample_variance(v: &DVector<f64>) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.mean();
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}
