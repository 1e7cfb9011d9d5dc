//! Regression on relative abundances through the centered log-ratio geometry.

use kpr::compositional::{aitchison_covariance, clr_transform, default_zero_replacement, replace_zeros, variation_matrix};
use kpr::estimators::comp_kpr;
use kpr::{AbundanceTable, ResponseVector};
use nalgebra::{DMatrix, DVector};

pub fn run_example() -> kpr::Result<()> {
    let x = AbundanceTable::new(
        (1..=6).map(|i| format!("s{i}")).collect(),
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        DMatrix::from_row_slice(6, 4, &[
            10.0, 20.0, 5.0, 0.0,
            3.0, 30.0, 8.0, 2.0,
            12.0, 12.0, 12.0, 12.0,
            40.0, 5.0, 1.0, 1.0,
            7.0, 9.0, 22.0, 3.0,
            1.0, 2.0, 3.0, 30.0,
        ]),
    )?;
    let y = ResponseVector::new(x.sample_ids().to_vec(), DVector::from_vec(vec![0.5, -0.2, 0.0, 1.7, -0.6, -1.1]))?;
    let zr = default_zero_replacement(&x).unwrap_or(1e-6);

    let clr = clr_transform(&x, zr)?;
    for row in clr.values().row_iter() {
        assert!(row.sum().abs() < 1e-10);
    }
    let c = aitchison_covariance(&variation_matrix(&replace_zeros(&x, zr)?)?)?;
    println!("log-ratio covariance C:\n{:.4}", c.values());

    let fit = comp_kpr(&x, &y, 0.1, zr)?;
    // coefficients live in the CLR space and sum to zero
    println!("beta = {:.4?} (sum {:.1e})", fit.beta.as_slice(), fit.beta.sum());
    assert!(fit.beta.sum().abs() < 1e-8);
    Ok(())
}

fn main() -> kpr::Result<()> {
    run_example()
}
