//! The two-kernel estimator: sample kernel H and taxon kernel Q together.

use kpr::estimators::{franklin_dual, kpr_two_kernel};
use kpr::matio::center_matrix_columns;
use nalgebra::{DMatrix, DVector};

pub fn run_example() -> kpr::Result<()> {
    let x = center_matrix_columns(&DMatrix::from_fn(6, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0));
    let y = DVector::from_vec(vec![0.3, -1.0, 0.8, 0.1, -0.5, 1.4]);
    let q = DMatrix::from_fn(4, 4, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()));
    // samples 1-3 and 4-6 form two similar groups
    let h = DMatrix::from_fn(6, 6, |i, j| if i == j { 1.0 } else if i / 3 == j / 3 { 0.4 } else { 0.0 });
    let lambda = 0.2;

    let fit = kpr_two_kernel(&x, &y, &q, &h, lambda)?;
    let gamma = fit.gamma.clone().expect("two-kernel fit carries dual coefficients");

    // gamma solves (H K_Q + lambda I) gamma = H y; beta = Q X' gamma
    let k = &x * &q * x.transpose();
    let direct = franklin_dual(&k, &h, &y, lambda)?;
    assert!((&direct - &gamma).amax() < 1e-10);
    assert!((&q * x.transpose() * &gamma - &fit.beta).amax() < 1e-10);
    println!("gamma = {:.4?}", gamma.as_slice());
    println!("beta  = {:.4?}", fit.beta.as_slice());
    Ok(())
}

fn main() -> kpr::Result<()> {
    run_example()
}
