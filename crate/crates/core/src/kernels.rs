//! Similarity kernels built from dissimilarities or feature matrices, PSD repair,
//! principal coordinates and the empirical HSIC.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KprError, Result};
use crate::linalg;
use crate::matio::{ensure_unique, AbundanceTable};

/// Relative PSD tolerance used when repairing double-centered matrices.
pub const PSD_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-10;

/// A symmetric matrix indexed by samples or taxa (distances, squared distances...).
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    ids: Vec<String>,
    values: DMatrix<f64>,
}

impl SquareMatrix {
    pub fn new(ids: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() || values.nrows() != ids.len() {
            return Err(KprError::Schema(format!(
                "square matrix is {}x{} with {} ids",
                values.nrows(),
                values.ncols(),
                ids.len()
            )));
        }
        ensure_unique(&ids, "matrix")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KprError::Domain("square matrix has non-finite entries".into()));
        }
        let asym = linalg::relative_asymmetry(&values);
        if asym > SYMMETRY_TOL {
            return Err(KprError::Domain(format!("matrix is not symmetric (relative asymmetry {asym:e})")));
        }
        Ok(SquareMatrix { ids, values })
    }

    pub fn with_generated_ids(values: DMatrix<f64>) -> Result<Self> {
        let ids = (0..values.nrows()).map(|i| format!("i{i}")).collect();
        SquareMatrix::new(ids, values)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.ids.len()
    }

    /// Entry-wise square, for turning distances into squared dissimilarities.
    pub fn squared(&self) -> SquareMatrix {
        SquareMatrix {
            ids: self.ids.clone(),
            values: self.values.map(|v| v * v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Euclidean,
    GramQ,
    DoubleCentered,
    AitchisonCov,
    Edge,
    Custom,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Euclidean => "euclidean",
            Provenance::GramQ => "gram_q",
            Provenance::DoubleCentered => "double_centered",
            Provenance::AitchisonCov => "aitchison_cov",
            Provenance::Edge => "edge",
            Provenance::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Symmetric similarity matrix with ids and a record of how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    ids: Vec<String>,
    values: DMatrix<f64>,
    provenance: Provenance,
}

impl Kernel {
    pub fn new(ids: Vec<String>, values: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        let sq = SquareMatrix::new(ids, values)?;
        Ok(Kernel {
            ids: sq.ids,
            values: linalg::symmetrize(&sq.values),
            provenance,
        })
    }

    pub fn from_square(m: SquareMatrix, provenance: Provenance) -> Kernel {
        Kernel {
            ids: m.ids,
            values: m.values,
            provenance,
        }
    }

    pub fn identity(ids: Vec<String>) -> Result<Kernel> {
        let n = ids.len();
        Kernel::new(ids, DMatrix::identity(n, n), Provenance::Custom)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dim(&self) -> usize {
        self.ids.len()
    }

    pub fn as_square(&self) -> SquareMatrix {
        SquareMatrix {
            ids: self.ids.clone(),
            values: self.values.clone(),
        }
    }

    /// Reorders the kernel to follow `order`, which must be a permutation of a subset of its ids.
    pub fn reordered(&self, order: &[String]) -> Result<Kernel> {
        let idx = crate::matio::index_of_all(&self.ids, order, "kernel")?;
        Ok(Kernel {
            ids: order.to_vec(),
            values: linalg::principal_submatrix(&self.values, &idx),
            provenance: self.provenance,
        })
    }

    pub(crate) fn check_ids(&self, expected: &[String], what: &str) -> Result<()> {
        if self.ids != expected {
            return Err(KprError::Schema(format!(
                "{what} ids do not match ({} kernel ids vs {} expected)",
                self.ids.len(),
                expected.len()
            )));
        }
        Ok(())
    }
}

/// Gower double-centering `-1/2 J D J` of a matrix of squared dissimilarities.
///
/// The result is not PSD-checked; pass it through [`psd_project`] when the input is not
/// known to be a squared Euclidean distance matrix.
pub fn double_center(d: &SquareMatrix) -> Result<Kernel> {
    let scale = d.values.amax().max(1.0);
    for i in 0..d.dim() {
        if d.values[(i, i)].abs() > 1e-12 * scale {
            return Err(KprError::Domain(format!(
                "dissimilarity diagonal must be zero; entry {} is {}",
                d.ids[i],
                d.values[(i, i)]
            )));
        }
    }
    if let Some(v) = d.values.iter().find(|v| **v < 0.0) {
        return Err(KprError::Domain(format!("dissimilarities must be nonnegative, found {v}")));
    }
    let values = linalg::double_center_raw(&d.values) * -0.5;
    Ok(Kernel {
        ids: d.ids.clone(),
        values: linalg::symmetrize(&values),
        provenance: Provenance::DoubleCentered,
    })
}

/// Squared Euclidean distances between the rows of a table.
pub fn squared_euclidean_distances(x: &AbundanceTable) -> SquareMatrix {
    let m = x.values();
    let n = m.nrows();
    let values = DMatrix::from_fn(n, n, |i, j| (m.row(i) - m.row(j)).norm_squared());
    SquareMatrix {
        ids: x.sample_ids().to_vec(),
        values,
    }
}

/// `X X'` for a (column-centered) table.
pub fn linear_kernel(x: &AbundanceTable) -> Kernel {
    let m = x.values();
    Kernel {
        ids: x.sample_ids().to_vec(),
        values: linalg::symmetrize(&(m * m.transpose())),
        provenance: Provenance::Euclidean,
    }
}

/// `X Q X'` where `Q` is a kernel over the taxa of `X`.
pub fn gram_kernel(x: &AbundanceTable, q: &Kernel) -> Result<Kernel> {
    q.check_ids(x.taxon_ids(), "taxon kernel Q")?;
    let m = x.values();
    let values = m * q.values() * m.transpose();
    Ok(Kernel {
        ids: x.sample_ids().to_vec(),
        values: linalg::symmetrize(&values),
        provenance: Provenance::GramQ,
    })
}

/// Clips rounding-level negative eigenvalues to zero.
///
/// Eigenvalues in `[-tol * lambda_max, 0)` are set to zero and the matrix rebuilt; anything
/// more negative is rejected. Matrices that are already PSD are returned unchanged.
pub fn psd_project(m: &SquareMatrix, tol: f64, provenance: Provenance) -> Result<Kernel> {
    let eig = linalg::sym_eigen(&m.values);
    let lmax = eig.values.iter().cloned().fold(0.0, f64::max);
    let lmin = eig.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let bound = -tol * lmax;
    if lmin >= 0.0 || m.dim() == 0 {
        return Ok(Kernel {
            ids: m.ids.clone(),
            values: m.values.clone(),
            provenance,
        });
    }
    if lmin < bound {
        return Err(KprError::NotPsd {
            min_eigenvalue: lmin,
            bound,
        });
    }
    let clipped = eig.values.map(|v| v.max(0.0));
    let values = &eig.vectors * DMatrix::from_diagonal(&clipped) * eig.vectors.transpose();
    Ok(Kernel {
        ids: m.ids.clone(),
        values: linalg::symmetrize(&values),
        provenance,
    })
}

/// Principal coordinates: `sigma_j u_j` for the top `k` eigenpairs of `K`.
///
/// Eigenvectors are oriented so their largest-magnitude entry is positive.
pub fn pcoa_coordinates(k: &Kernel, n_axes: usize) -> Result<DMatrix<f64>> {
    let eig = linalg::sym_eigen(&k.values);
    let lmax = eig.values.iter().cloned().fold(0.0, f64::max);
    let positive = eig.values.iter().filter(|&&v| v > PSD_TOL * lmax && v > 0.0).count();
    if n_axes > positive {
        return Err(KprError::Domain(format!(
            "requested {n_axes} axes but the kernel has only {positive} positive eigenvalues"
        )));
    }
    let n = k.dim();
    let mut coords = DMatrix::zeros(n, n_axes);
    for j in 0..n_axes {
        let col = eig.vectors.column(j) * eig.values[j].sqrt();
        coords.set_column(j, &col);
    }
    Ok(coords)
}

/// Empirical HSIC, `trace(H K)`.
pub fn hsic(h: &Kernel, k: &Kernel) -> Result<f64> {
    if h.dim() != k.dim() {
        return Err(KprError::Schema(format!("kernel dimensions differ: {} vs {}", h.dim(), k.dim())));
    }
    k.check_ids(&h.ids, "HSIC kernel")?;
    // trace(HK) = sum_ij H_ij K_ji
    Ok(h.values.component_mul(&k.values.transpose()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(rows: usize, data: &[f64]) -> SquareMatrix {
        SquareMatrix::with_generated_ids(DMatrix::from_row_slice(rows, rows, data)).unwrap()
    }

    fn kern(rows: usize, data: &[f64]) -> Kernel {
        Kernel::from_square(sq(rows, data), Provenance::Custom)
    }

    #[test]
    fn double_center_two_points() {
        let k = double_center(&sq(2, &[0.0, 4.0, 4.0, 0.0])).unwrap();
        assert_eq!(k.values(), &DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let z = double_center(&sq(3, &[0.0; 9])).unwrap();
        assert_eq!(z.values().amax(), 0.0);
    }

    #[test]
    fn double_center_three_points_matches_outer_product() {
        // X = (-1, 0, 1)' is already centered; oracle is XX'.
        let x = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let oracle = &x * x.transpose();
        let table = AbundanceTable::from_matrix(x).unwrap();
        let d = squared_euclidean_distances(&table);
        assert_eq!(d.values()[(0, 2)], 4.0);
        let k = double_center(&d).unwrap();
        assert!((k.values() - oracle).amax() < 1e-12);
        for i in 0..3 {
            assert!(k.values().row(i).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn double_center_rejects_nonzero_diagonal() {
        assert!(matches!(double_center(&sq(2, &[1.0, 2.0, 2.0, 0.0])), Err(KprError::Domain(_))));
    }

    #[test]
    fn gram_kernel_identity_scaling_and_ids() {
        let table = AbundanceTable::from_matrix(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 2.0, 0.0, -2.0])).unwrap();
        let m = table.values();
        let xx = m * m.transpose();
        let id = Kernel::identity(table.taxon_ids().to_vec()).unwrap();
        assert!((gram_kernel(&table, &id).unwrap().values() - &xx).amax() < 1e-14);
        let two = Kernel::new(table.taxon_ids().to_vec(), DMatrix::identity(2, 2) * 2.0, Provenance::Custom).unwrap();
        assert!((gram_kernel(&table, &two).unwrap().values() - &xx * 2.0).amax() < 1e-14);
        let wrong = Kernel::identity(vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(gram_kernel(&table, &wrong), Err(KprError::Schema(_))));
    }

    #[test]
    fn psd_project_cases() {
        let pd = sq(2, &[2.0, 1.0, 1.0, 2.0]);
        let k = psd_project(&pd, PSD_TOL, Provenance::Custom).unwrap();
        assert!((k.values() - pd.values()).amax() < 1e-12);

        let clip = psd_project(&sq(2, &[1.0, 0.0, 0.0, -1e-12]), 1e-8, Provenance::Custom).unwrap();
        assert!((clip.values() - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).amax() < 1e-15);

        assert!(matches!(
            psd_project(&sq(2, &[1.0, 0.0, 0.0, -0.5]), 1e-8, Provenance::Custom),
            Err(KprError::NotPsd { .. })
        ));
    }

    #[test]
    fn pcoa_two_point_sign_rule() {
        let k = kern(2, &[1.0, -1.0, -1.0, 1.0]);
        let c = pcoa_coordinates(&k, 1).unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((c[(1, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pcoa_identity_and_rank_errors() {
        let k = kern(3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let c = pcoa_coordinates(&k, 3).unwrap();
        for j in 0..3 {
            let col = c.column(j);
            assert!((col.norm() - 1.0).abs() < 1e-12);
            assert!((col.amax() - 1.0).abs() < 1e-12);
            assert!(col.iter().all(|v| *v >= -1e-12));
        }
        let rank1 = kern(2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(pcoa_coordinates(&rank1, 2), Err(KprError::Domain(_))));
    }

    #[test]
    fn hsic_examples() {
        let h = kern(2, &[2.0, 0.0, 0.0, 1.0]);
        let k = kern(2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(hsic(&h, &k).unwrap(), 3.0);
        let id = kern(2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(hsic(&id, &h).unwrap(), 3.0);
        let zero = kern(2, &[0.0; 4]);
        assert_eq!(hsic(&h, &zero).unwrap(), 0.0);
        let big = kern(3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(hsic(&h, &big), Err(KprError::Schema(_))));
    }
}
