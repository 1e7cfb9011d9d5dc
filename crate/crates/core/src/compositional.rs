//! Centered log-ratio geometry for relative-abundance tables.

use nalgebra::{DMatrix, DVector};

use crate::error::{KprError, Result};
use crate::kernels::{psd_project, Kernel, Provenance, SquareMatrix, PSD_TOL};
use crate::linalg;
use crate::matio::AbundanceTable;

/// A strictly positive vector closed to sum 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition(DVector<f64>);

impl Composition {
    /// Closes `parts` to unit sum; every part must be strictly positive.
    pub fn new(parts: DVector<f64>) -> Result<Self> {
        if parts.is_empty() {
            return Err(KprError::Domain("composition needs at least one part".into()));
        }
        if parts.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(KprError::Domain("composition parts must be finite and strictly positive".into()));
        }
        let total = parts.sum();
        Ok(Composition(parts / total))
    }

    pub fn parts(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn clr(&self) -> DVector<f64> {
        clr_row(self.0.as_slice())
    }
}

/// Normalized variation matrix over taxa: `T[k,l] = var(log(x_k / x_l) / sqrt 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationMatrix {
    taxon_ids: Vec<String>,
    values: DMatrix<f64>,
}

impl VariationMatrix {
    pub fn taxon_ids(&self) -> &[String] {
        &self.taxon_ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn from_values(taxon_ids: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        let sq = SquareMatrix::new(taxon_ids, values)?;
        if sq.values().iter().any(|v| *v < 0.0) {
            return Err(KprError::Domain("variation matrix entries must be nonnegative".into()));
        }
        Ok(VariationMatrix {
            taxon_ids: sq.ids().to_vec(),
            values: sq.values().clone(),
        })
    }
}

fn clr_row(row: &[f64]) -> DVector<f64> {
    let logs: Vec<f64> = row.iter().map(|v| v.ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    DVector::from_iterator(logs.len(), logs.iter().map(|l| l - mean))
}

/// Half the smallest positive proportion in the table (after closing rows).
pub fn default_zero_replacement(x: &AbundanceTable) -> Option<f64> {
    let closed = close_rows(x.values());
    closed
        .iter()
        .filter(|v| **v > 0.0)
        .cloned()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
        .map(|m| 0.5 * m)
}

fn close_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    out
}

fn validate_nonnegative(x: &AbundanceTable) -> Result<()> {
    if x.values().iter().any(|v| *v < 0.0) {
        return Err(KprError::Domain("compositional entries must be nonnegative".into()));
    }
    for i in 0..x.n_samples() {
        if x.values().row(i).iter().all(|v| *v <= 0.0) {
            return Err(KprError::Domain(format!("sample '{}' has no positive entry", x.sample_ids()[i])));
        }
    }
    Ok(())
}

/// Closes rows, replaces zeros by `zero_replacement`, and re-closes.
pub fn replace_zeros(x: &AbundanceTable, zero_replacement: f64) -> Result<AbundanceTable> {
    validate_nonnegative(x)?;
    let closed = close_rows(x.values());
    let has_zero = closed.iter().any(|v| *v == 0.0);
    if has_zero && !(zero_replacement > 0.0 && zero_replacement.is_finite()) {
        return Err(KprError::Domain(format!(
            "zeros present but zero replacement {zero_replacement} is not positive"
        )));
    }
    let replaced = closed.map(|v| if v == 0.0 { zero_replacement } else { v });
    x.with_values(close_rows(&replaced))
}

/// Centered log-ratio transform of every row; output rows sum to zero.
pub fn clr_transform(x: &AbundanceTable, zero_replacement: f64) -> Result<AbundanceTable> {
    let positive = replace_zeros(x, zero_replacement)?;
    let m = positive.values();
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        out.set_row(i, &clr_row(&row).transpose());
    }
    x.with_values(out)
}

/// Normalized variation matrix (sample variance, denominator `n - 1`).
pub fn variation_matrix(x: &AbundanceTable) -> Result<VariationMatrix> {
    let n = x.n_samples();
    if n < 2 {
        return Err(KprError::Domain("variation matrix needs at least two samples".into()));
    }
    let m = x.values();
    if m.iter().any(|v| !(*v > 0.0)) {
        return Err(KprError::Domain(
            "variation matrix needs strictly positive entries; replace zeros first".into(),
        ));
    }
    let logs = m.map(f64::ln);
    let p = m.ncols();
    let mut t = DMatrix::zeros(p, p);
    for k in 0..p {
        for l in (k + 1)..p {
            let ratio = (logs.column(k) - logs.column(l)) / std::f64::consts::SQRT_2;
            let v = linalg::sample_variance(&ratio);
            t[(k, l)] = v;
            t[(l, k)] = v;
        }
    }
    Ok(VariationMatrix {
        taxon_ids: x.taxon_ids().to_vec(),
        values: t,
    })
}

/// Log-ratio covariance `C` recovered from the variation matrix by double centering.
///
/// `T` is normalized by `1/sqrt 2`, so the unnormalized variation matrix `2T` satisfies
/// `2T = v1' + 1v' - 2C` and `C = -1/2 J (2T) J = -J T J`. This `C` equals the sample
/// covariance of the CLR coordinates.
pub fn aitchison_covariance(t: &VariationMatrix) -> Result<Kernel> {
    let c = linalg::double_center_raw(&t.values) * -1.0;
    let sq = SquareMatrix::new(t.taxon_ids.clone(), linalg::symmetrize(&c))?;
    psd_project(&sq, PSD_TOL, Provenance::AitchisonCov)
}

/// `sqrt( (1/2p) sum_{k,l} log(x_k/x_l)^2 )`, computed from the pairwise log-ratios.
pub fn aitchison_norm(x: &Composition) -> f64 {
    let logs: Vec<f64> = x.0.iter().map(|v| v.ln()).collect();
    let p = logs.len() as f64;
    let mut acc = 0.0;
    for a in &logs {
        for b in &logs {
            acc += (a - b).powi(2);
        }
    }
    (acc / (2.0 * p)).sqrt()
}
