//! K-fold cross-validation over a descending penalty grid.
//!
//! Every method is reduced to a coefficient path on a working design `D`: `D = X` for
//! ridge, lasso and Franklin, `D = XL` (with `Q = LL'`) for the taxon-kernel methods.
//! Within a fold the training design and response are centered on their training means,
//! and the test predictions carry that intercept.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KprError, Result};
use crate::estimators::{self, FitResult, LassoOptions};
use crate::linalg::{self, ThinSvd};

pub const DEFAULT_GRID_LEN: usize = 50;
/// Smallest lasso penalty on the default grid, relative to the null threshold.
pub const LASSO_MIN_RATIO: f64 = 1e-2;

/// Balanced fold labels `0..k`, one per sample, from a seeded shuffle.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(KprError::Domain(format!("need 2 <= folds <= n, got k={k}, n={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuningRule {
    #[serde(rename = "cv_min", alias = "min")]
    CvMin,
    #[serde(rename = "cv_1se", alias = "1se")]
    Cv1se,
}

impl FromStr for TuningRule {
    type Err = KprError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "min" | "cv_min" => Ok(TuningRule::CvMin),
            "1se" | "cv_1se" => Ok(TuningRule::Cv1se),
            _ => Err(KprError::Usage(format!("unknown tuning rule '{s}' (expected min or 1se)"))),
        }
    }
}

impl fmt::Display for TuningRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TuningRule::CvMin => "cv_min",
            TuningRule::Cv1se => "cv_1se",
        })
    }
}

/// Estimator under tuning together with its fixed kernels.
#[derive(Debug, Clone, Copy)]
pub enum CvMethod<'a> {
    Ridge,
    Lasso,
    Gridge { q: &'a DMatrix<f64> },
    Dpcoa { q: &'a DMatrix<f64> },
    Franklin { h: &'a DMatrix<f64> },
    Kpr2 { q: &'a DMatrix<f64>, h: &'a DMatrix<f64> },
}

impl CvMethod<'_> {
    fn taxon_kernel(&self) -> Option<&DMatrix<f64>> {
        match self {
            CvMethod::Gridge { q } | CvMethod::Dpcoa { q } | CvMethod::Kpr2 { q, .. } => Some(q),
            _ => None,
        }
    }

    fn sample_kernel(&self) -> Option<&DMatrix<f64>> {
        match self {
            CvMethod::Franklin { h } | CvMethod::Kpr2 { h, .. } => Some(h),
            _ => None,
        }
    }

    /// Refit on the full data at one penalty value.
    pub fn fit(&self, x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<FitResult> {
        match *self {
            CvMethod::Ridge => estimators::ridge_estimate(x, y, lambda),
            CvMethod::Lasso => estimators::lasso_cd(x, y, lambda),
            CvMethod::Gridge { q } => estimators::gridge_estimate(x, y, q, lambda),
            CvMethod::Dpcoa { q } => estimators::dpcoa_estimate(x, y, q, lambda),
            CvMethod::Franklin { h } => estimators::franklin_estimate(x, y, h, lambda),
            CvMethod::Kpr2 { q, h } => estimators::kpr_two_kernel(x, y, q, h, lambda),
        }
    }

    fn working_design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.taxon_kernel() {
            Some(q) => Ok(x * estimators::prepare_taxon_kernel(q, x.ncols())?.chol),
            None => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_grid: Vec<f64>,
    pub mean_error: Vec<f64>,
    pub se_error: Vec<f64>,
    /// `fold_errors[i][f]` is the held-out error at `lambda_grid[i]` on fold `f`.
    pub fold_errors: Vec<Vec<f64>>,
    pub lambda_min: f64,
    pub lambda_1se: f64,
    pub fold_assignment: Vec<usize>,
}

impl CvResult {
    pub fn selected(&self, rule: TuningRule) -> f64 {
        match rule {
            TuningRule::CvMin => self.lambda_min,
            TuningRule::Cv1se => self.lambda_1se,
        }
    }
}

/// `n` log-spaced values from `hi` down to `lo`.
pub fn log_grid(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    let mut grid: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    grid[0] = hi;
    grid[n - 1] = lo;
    grid
}

/// Fifty values log-spaced over `[1e-4, 1e4] * scale`, descending.
pub fn default_grid(scale: f64) -> Vec<f64> {
    log_grid(1e4 * scale, 1e-4 * scale, DEFAULT_GRID_LEN)
}

/// Default grid for a method, scaled by its working design (and sample kernel, if any).
/// Lasso uses `[1e-2, 1] * lambda_max` instead, since its penalty is on the `1/2n` scale.
pub fn default_grid_for(method: &CvMethod, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
    let d = method.working_design(x)?;
    let (n, p) = d.shape();
    if let CvMethod::Lasso = method {
        let (dc, _) = center(&d);
        let yc = y.add_scalar(-y.mean());
        let lmax = estimators::lasso_lambda_max(&dc, &yc);
        if !(lmax > 0.0) {
            return Err(KprError::Domain("lasso grid undefined: X'y is zero".into()));
        }
        return Ok(log_grid(lmax, LASSO_MIN_RATIO * lmax, DEFAULT_GRID_LEN));
    }
    let mut scale = d.norm_squared() / (n * p) as f64;
    if let Some(h) = method.sample_kernel() {
        scale *= h.trace() / n as f64;
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(KprError::Domain("grid scale is not positive; design or kernel is zero".into()));
    }
    Ok(default_grid(scale))
}

fn center(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let means = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()));
    let mut out = m.clone();
    for (j, mut c) in out.column_iter_mut().enumerate() {
        c.add_scalar_mut(-means[j]);
    }
    (out, means)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(KprError::Domain("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(KprError::Domain("lambda grid values must be positive and finite".into()));
    }
    if grid.windows(2).any(|w| w[1] > w[0]) {
        return Err(KprError::Domain("lambda grid must be sorted descending".into()));
    }
    Ok(())
}

/// Cross-validate with a seeded `k`-fold split.
pub fn cross_validate(
    method: &CvMethod,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda_grid: &[f64],
    k: usize,
    seed: u64,
    weight: Option<&DMatrix<f64>>,
) -> Result<CvResult> {
    let folds = kfold_split(y.len(), k, seed)?;
    cross_validate_folds(method, x, y, lambda_grid, &folds, weight)
}

/// Cross-validate with an explicit fold assignment (labels `0..k`).
pub fn cross_validate_folds(
    method: &CvMethod,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda_grid: &[f64],
    folds: &[usize],
    weight: Option<&DMatrix<f64>>,
) -> Result<CvResult> {
    let n = y.len();
    if x.nrows() != n || folds.len() != n {
        return Err(KprError::Schema(format!(
            "design has {} rows, y has {n} entries, fold map has {}",
            x.nrows(),
            folds.len()
        )));
    }
    for m in [weight, method.sample_kernel()].into_iter().flatten() {
        if m.nrows() != n || m.ncols() != n {
            return Err(KprError::Schema(format!("sample kernel must be {n}x{n}")));
        }
    }
    validate_grid(lambda_grid)?;
    let k = folds.iter().max().map_or(0, |m| m + 1);
    if k < 2 || (0..k).any(|f| !folds.contains(&f)) {
        return Err(KprError::Domain("fold labels must cover 0..k with k >= 2".into()));
    }
    let design = method.working_design(x)?;

    let per_fold: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|f| {
            fold_errors(method, &design, y, lambda_grid, folds, f, weight).map_err(|e| KprError::Fold {
                fold: f,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let kf = k as f64;
    let mut mean_error = Vec::with_capacity(lambda_grid.len());
    let mut se_error = Vec::with_capacity(lambda_grid.len());
    let mut fold_errs = Vec::with_capacity(lambda_grid.len());
    for i in 0..lambda_grid.len() {
        let errs: Vec<f64> = per_fold.iter().map(|e| e[i]).collect();
        let sd = linalg::sample_variance(&DVector::from_vec(errs.clone())).sqrt();
        mean_error.push(errs.iter().sum::<f64>() / kf);
        se_error.push(sd / kf.sqrt());
        fold_errs.push(errs);
    }
    // grid is descending, so a strict comparison keeps the larger lambda on ties
    let mut imin = 0;
    for i in 1..mean_error.len() {
        if mean_error[i] < mean_error[imin] {
            imin = i;
        }
    }
    let bound = mean_error[imin] + se_error[imin];
    let i1se = (0..=imin).find(|&i| mean_error[i] <= bound).unwrap_or(imin);
    Ok(CvResult {
        lambda_grid: lambda_grid.to_vec(),
        mean_error,
        se_error,
        fold_errors: fold_errs,
        lambda_min: lambda_grid[imin],
        lambda_1se: lambda_grid[i1se],
        fold_assignment: folds.to_vec(),
    })
}

fn fold_errors(
    method: &CvMethod,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &[f64],
    folds: &[usize],
    f: usize,
    weight: Option<&DMatrix<f64>>,
) -> Result<Vec<f64>> {
    let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
    let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
    let (d_tr, means) = center(&linalg::select_rows(design, &train));
    let y_tr_raw = linalg::select_entries(y, &train);
    let y_mean = y_tr_raw.mean();
    let y_tr = y_tr_raw.add_scalar(-y_mean);
    let mut d_te = linalg::select_rows(design, &test);
    for (j, mut c) in d_te.column_iter_mut().enumerate() {
        c.add_scalar_mut(-means[j]);
    }
    let y_te = linalg::select_entries(y, &test);
    let w = weight.map(|h| linalg::principal_submatrix(h, &test));

    let path = coefficient_path(method, &d_tr, &y_tr, grid, &train)?;
    Ok(path
        .iter()
        .map(|beta| {
            let r = &y_te - (&d_te * beta).add_scalar(y_mean);
            match &w {
                Some(w) => r.dot(&(w * &r)),
                None => r.norm_squared(),
            }
        })
        .collect())
}

fn coefficient_path(
    method: &CvMethod,
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    grid: &[f64],
    train: &[usize],
) -> Result<Vec<DVector<f64>>> {
    match method {
        CvMethod::Ridge | CvMethod::Gridge { .. } | CvMethod::Dpcoa { .. } => {
            let svd = ThinSvd::new(d);
            let uty = svd.u.transpose() * y;
            Ok(grid
                .iter()
                .map(|&lam| {
                    let coef = DVector::from_iterator(
                        uty.len(),
                        svd.singular_values.iter().zip(uty.iter()).map(|(s, c)| s * c / (s * s + lam)),
                    );
                    &svd.v * coef
                })
                .collect())
        }
        CvMethod::Franklin { h } | CvMethod::Kpr2 { h, .. } => {
            let h_tr = linalg::principal_submatrix(h, train);
            let k_tr = d * d.transpose();
            grid.iter()
                .map(|&lam| Ok(d.transpose() * estimators::franklin_dual(&k_tr, &h_tr, y, lam)?))
                .collect()
        }
        CvMethod::Lasso => {
            let opts = LassoOptions::default();
            let mut warm: Option<DVector<f64>> = None;
            let mut out = Vec::with_capacity(grid.len());
            for &lam in grid {
                let fit = estimators::lasso_cd_with(d, y, lam, warm.as_ref(), &opts)?;
                warm = Some(fit.beta.clone());
                out.push(fit.beta);
            }
            Ok(out)
        }
    }
}
