//! Primal and dual penalized estimators.
//!
//! All kernel-penalized fits are computed in the `n x n` sample space through the
//! push-through identities, so no `p x p` inverse is ever formed. A taxon kernel `Q`
//! that is only positive semi-definite (double-centered kernels always are) gets a
//! relative diagonal jitter before any path that needs its Cholesky factor.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::compositional::{aitchison_covariance, clr_transform, variation_matrix, VariationMatrix};
use crate::error::{KprError, Result};
use crate::kernels::Kernel;
use crate::linalg::{self, ThinSvd};
use crate::matio::{center_columns, AbundanceTable, ResponseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pcr,
    Ridge,
    Gridge,
    Dpcr,
    Dpcoa,
    Franklin,
    Kpr2,
    Lasso,
    CompKpr,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Pcr,
        Method::Ridge,
        Method::Gridge,
        Method::Dpcr,
        Method::Dpcoa,
        Method::Franklin,
        Method::Kpr2,
        Method::Lasso,
        Method::CompKpr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pcr => "pcr",
            Method::Ridge => "ridge",
            Method::Gridge => "gridge",
            Method::Dpcr => "dpcr",
            Method::Dpcoa => "dpcoa",
            Method::Franklin => "franklin",
            Method::Kpr2 => "kpr2",
            Method::Lasso => "lasso",
            Method::CompKpr => "comp_kpr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = KprError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| KprError::Usage(format!("unknown method '{s}'")))
    }
}

/// Output of any estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Coefficients in the fitted design's coordinates (`XL` for DPCoA/DPCR, `X` otherwise).
    pub beta: DVector<f64>,
    pub gamma: Option<DVector<f64>>,
    /// Penalty weight; for truncated fits (PCR, DPCR) this is the number of components.
    pub lambda: f64,
    pub method: Method,
}

impl FitResult {
    pub fn predict_matrix(&self, x_new: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x_new.ncols() != self.beta.len() {
            return Err(KprError::Schema(format!(
                "design has {} columns but the fit has {} coefficients",
                x_new.ncols(),
                self.beta.len()
            )));
        }
        Ok(x_new * &self.beta)
    }
}

/// `y_hat = X_new beta`, keeping the sample ids of `x_new`.
pub fn predict(fit: &FitResult, x_new: &AbundanceTable) -> Result<ResponseVector> {
    let y = fit.predict_matrix(x_new.values())?;
    ResponseVector::new(x_new.sample_ids().to_vec(), y)
}

fn check_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(KprError::Schema(format!("design has {} rows but y has {} entries", x.nrows(), y.len())));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(KprError::Domain(format!("lambda must be positive and finite, got {lambda}")));
    }
    Ok(())
}

fn check_square(m: &DMatrix<f64>, dim: usize, what: &str) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(KprError::Schema(format!(
            "{what} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn truncated_fit(z: &DMatrix<f64>, y: &DVector<f64>, k: usize, method: Method) -> Result<FitResult> {
    check_xy(z, y)?;
    let svd = ThinSvd::new(z);
    let rank = svd.rank();
    if k == 0 || k > rank {
        return Err(KprError::Domain(format!("requested {k} components but the design has rank {rank}")));
    }
    Ok(FitResult {
        beta: svd.truncated_solve(y, k),
        gamma: None,
        lambda: k as f64,
        method,
    })
}

/// Principal component regression on the top `k` singular triplets of `X`.
pub fn pcr_estimate(x: &DMatrix<f64>, y: &DVector<f64>, k: usize) -> Result<FitResult> {
    truncated_fit(x, y, k, Method::Pcr)
}

/// `(X'X + lambda I)^{-1} X'y`, solved in whichever of the two spaces is smaller.
pub fn ridge_estimate(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<FitResult> {
    check_xy(x, y)?;
    check_lambda(lambda)?;
    let (n, p) = x.shape();
    let beta = if p <= n {
        linalg::solve_shifted_spd(&(x.transpose() * x), lambda, &(x.transpose() * y))?
    } else {
        let gamma = linalg::solve_shifted_spd(&(x * x.transpose()), lambda, y)?;
        x.transpose() * gamma
    };
    Ok(FitResult {
        beta,
        gamma: None,
        lambda,
        method: Method::Ridge,
    })
}

/// Validated positive-definite taxon kernel (jittered if needed) with its Cholesky factor.
pub fn prepare_taxon_kernel(q: &DMatrix<f64>, p: usize) -> Result<linalg::PdKernel> {
    check_square(q, p, "taxon kernel Q")?;
    linalg::regularize_pd(q, "taxon kernel Q")
}

/// Generalized ridge `argmin ||y - X b||^2 + lambda b'Q^{-1}b`, computed as `QX'(XQX' + lambda I)^{-1} y`.
pub fn gridge_estimate(x: &DMatrix<f64>, y: &DVector<f64>, q: &DMatrix<f64>, lambda: f64) -> Result<FitResult> {
    check_xy(x, y)?;
    check_lambda(lambda)?;
    let q = prepare_taxon_kernel(q, x.ncols())?.matrix;
    let qxt = &q * x.transpose();
    let kq = x * &qxt;
    let gamma = linalg::solve_shifted_spd(&kq, lambda, y)?;
    Ok(FitResult {
        beta: qxt * &gamma,
        gamma: Some(gamma),
        lambda,
        method: Method::Gridge,
    })
}

/// Truncated regression on the top `k` singular triplets of `XL`, `Q = LL'`.
pub fn dpcr_estimate(x: &DMatrix<f64>, y: &DVector<f64>, q: &DMatrix<f64>, k: usize) -> Result<FitResult> {
    let l = prepare_taxon_kernel(q, x.ncols())?.chol;
    truncated_fit(&(x * l), y, k, Method::Dpcr)
}

/// Primal DPCoA estimate `L'X'(XQX' + lambda I)^{-1} y`; coefficients live in `XL` coordinates.
pub fn dpcoa_estimate(x: &DMatrix<f64>, y: &DVector<f64>, q: &DMatrix<f64>, lambda: f64) -> Result<FitResult> {
    check_xy(x, y)?;
    check_lambda(lambda)?;
    let l = prepare_taxon_kernel(q, x.ncols())?.chol;
    let z = x * l;
    let gamma = linalg::solve_shifted_spd(&(&z * z.transpose()), lambda, y)?;
    Ok(FitResult {
        beta: z.transpose() * &gamma,
        gamma: Some(gamma),
        lambda,
        method: Method::Dpcoa,
    })
}

/// Franklin dual estimate `(K + lambda H^{-1})^{-1} y`, computed as `(HK + lambda I)^{-1} H y`
/// so that `H` is never inverted.
pub fn franklin_dual(k: &DMatrix<f64>, h: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    check_lambda(lambda)?;
    let n = y.len();
    check_square(k, n, "sample kernel K")?;
    check_square(h, n, "sample kernel H")?;
    let mut a = h * k;
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    linalg::solve_general(&a, &(h * y))
}

/// Id-checked wrapper over [`franklin_dual`] for two sample kernels.
pub fn franklin_dual_kernels(k: &Kernel, h: &Kernel, y: &ResponseVector, lambda: f64) -> Result<DVector<f64>> {
    k.check_ids(y.sample_ids(), "kernel K")?;
    h.check_ids(y.sample_ids(), "kernel H")?;
    franklin_dual(k.values(), h.values(), y.values(), lambda)
}

/// Two-kernel estimate `argmin ||y - Xb||_H^2 + lambda ||b||_{Q^{-1}}^2 = QX' gamma(H, XQX')`.
pub fn kpr_two_kernel(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    q: &DMatrix<f64>,
    h: &DMatrix<f64>,
    lambda: f64,
) -> Result<FitResult> {
    check_xy(x, y)?;
    check_lambda(lambda)?;
    let q = prepare_taxon_kernel(q, x.ncols())?.matrix;
    let qxt = &q * x.transpose();
    let kq = linalg::symmetrize(&(x * &qxt));
    let gamma = franklin_dual(&kq, h, y, lambda)?;
    Ok(FitResult {
        beta: qxt * &gamma,
        gamma: Some(gamma),
        lambda,
        method: Method::Kpr2,
    })
}

/// Franklin estimate with the linear kernel `K = XX'`, mapped back to taxa as `X' gamma`.
pub fn franklin_estimate(x: &DMatrix<f64>, y: &DVector<f64>, h: &DMatrix<f64>, lambda: f64) -> Result<FitResult> {
    check_xy(x, y)?;
    let k = x * x.transpose();
    let gamma = franklin_dual(&k, h, y, lambda)?;
    Ok(FitResult {
        beta: x.transpose() * &gamma,
        gamma: Some(gamma),
        lambda,
        method: Method::Franklin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    pub max_sweeps: usize,
    /// Stop when no coordinate moves the fit by more than this in a full sweep (a step is
    /// measured as `|d beta_j| * ||x_j|| / sqrt(n)`, relative to `max(1, rms(y))`)...
    pub coordinate_tol: f64,
    /// ...and the KKT conditions hold to this tolerance.
    pub kkt_tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            max_sweeps: 10_000,
            coordinate_tol: 1e-9,
            kkt_tol: 1e-7,
        }
    }
}

/// Lasso `argmin (1/2n)||y - Xb||^2 + lambda ||b||_1` by cyclic coordinate descent.
pub fn lasso_cd(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<FitResult> {
    lasso_cd_with(x, y, lambda, None, &LassoOptions::default())
}

/// Coordinate descent with an optional warm start.
pub fn lasso_cd_with(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    warm: Option<&DVector<f64>>,
    opts: &LassoOptions,
) -> Result<FitResult> {
    check_xy(x, y)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(KprError::Domain(format!("lasso lambda must be nonnegative, got {lambda}")));
    }
    let (n, p) = x.shape();
    let nf = n as f64;
    let col_sq: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared() / nf).collect();
    let col_norm: Vec<f64> = col_sq.iter().map(|c| c.sqrt()).collect();
    let step_tol = opts.coordinate_tol * (y.norm() / nf.sqrt()).max(1.0);
    let mut beta = match warm {
        Some(b) if b.len() == p => b.clone(),
        _ => DVector::zeros(p),
    };
    let mut resid = y - x * &beta;
    let mut max_change = f64::INFINITY;
    let mut kkt = f64::INFINITY;
    for sweep in 0..opts.max_sweeps {
        max_change = 0.0;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let old = beta[j];
            let rho = x.column(j).dot(&resid) / nf + col_sq[j] * old;
            let new = soft_threshold(rho, lambda) / col_sq[j];
            if new != old {
                resid.axpy(old - new, &x.column(j), 1.0);
                beta[j] = new;
                max_change = max_change.max((new - old).abs() * col_norm[j]);
            }
        }
        let small_step = max_change <= step_tol;
        if small_step || sweep % KKT_CHECK_EVERY == KKT_CHECK_EVERY - 1 {
            // refresh the residual to shed accumulated rounding before judging optimality
            resid = y - x * &beta;
            kkt = lasso_kkt_residual(x, y, &beta, lambda);
            // ill-conditioned designs (centered compositions have X1 = 0) creep along their
            // weak directions long after optimality; a strict KKT certificate ends the run
            let last = sweep + 1 == opts.max_sweeps;
            if kkt <= opts.kkt_tol && (small_step || last || kkt <= KKT_STRICT * opts.kkt_tol) {
                return Ok(FitResult {
                    beta,
                    gamma: None,
                    lambda,
                    method: Method::Lasso,
                });
            }
        }
    }
    Err(KprError::Convergence {
        sweeps: opts.max_sweeps,
        max_change,
        kkt,
    })
}

const KKT_CHECK_EVERY: usize = 10;
const KKT_STRICT: f64 = 0.1;

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Largest violation of the lasso optimality conditions at `beta`.
pub fn lasso_kkt_residual(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    let n = x.nrows() as f64;
    let grad = x.transpose() * (y - x * beta) / n;
    grad.iter()
        .zip(beta.iter())
        .map(|(g, b)| {
            if *b != 0.0 {
                (g - lambda * b.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Smallest lambda for which the lasso solution is identically zero.
pub fn lasso_lambda_max(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    // same arithmetic as the first coordinate update, so beta = 0 exactly at lambda_max
    let n = x.nrows() as f64;
    x.column_iter().map(|c| (c.dot(y) / n).abs()).fold(0.0, f64::max)
}

/// CLR-transformed, column-centered design with its variation matrix and log-ratio covariance.
#[derive(Debug, Clone)]
pub struct CompositionalDesign {
    pub design: AbundanceTable,
    pub variation: VariationMatrix,
    pub covariance: Kernel,
}

impl CompositionalDesign {
    pub fn prepare(x_raw: &AbundanceTable, zero_replacement: f64) -> Result<Self> {
        let clr = clr_transform(x_raw, zero_replacement)?;
        // T is computed from the zero-replaced proportions, which is what the CLR saw.
        let positive = crate::compositional::replace_zeros(x_raw, zero_replacement)?;
        let variation = variation_matrix(&positive)?;
        let covariance = aitchison_covariance(&variation)?;
        Ok(CompositionalDesign {
            design: center_columns(&clr),
            variation,
            covariance,
        })
    }
}

/// Compositional KPR: generalized ridge on centered CLR data with `Q = C`.
pub fn comp_kpr(x_raw: &AbundanceTable, y: &ResponseVector, lambda: f64, zero_replacement: f64) -> Result<FitResult> {
    let y = y.aligned_to(x_raw)?;
    let prepared = CompositionalDesign::prepare(x_raw, zero_replacement)?;
    let mut fit = gridge_estimate(
        prepared.design.values(),
        y.values(),
        prepared.covariance.values(),
        lambda,
    )?;
    fit.method = Method::CompKpr;
    Ok(fit)
}
