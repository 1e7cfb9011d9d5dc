//! Generalized ridge with a phylogenetic taxon kernel, and its DPCoA reparametrization.

use kpr::estimators::{dpcoa_estimate, gridge_estimate, prepare_taxon_kernel, ridge_estimate};
use kpr::matio::center_matrix_columns;
use nalgebra::{DMatrix, DVector};

pub fn run_example() -> kpr::Result<()> {
    let x = center_matrix_columns(&DMatrix::from_row_slice(5, 3, &[
        0.5, 0.3, 0.2,
        0.1, 0.6, 0.3,
        0.3, 0.3, 0.4,
        0.7, 0.2, 0.1,
        0.2, 0.2, 0.6,
    ]));
    let y = DVector::from_vec(vec![1.2, -0.4, 0.1, 1.9, -0.8]);
    // taxa 1 and 2 are close relatives, taxon 3 is distant
    let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.8, 0.0, 0.8, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let lambda = 0.05;

    let plain = ridge_estimate(&x, &y, lambda)?;
    let structured = gridge_estimate(&x, &y, &q, lambda)?;
    println!("ridge  beta = {:.4?}", plain.beta.as_slice());
    println!("gridge beta = {:.4?}", structured.beta.as_slice());

    // beta_Q = L beta_DPCoA with Q = L L'
    let dpcoa = dpcoa_estimate(&x, &y, &q, lambda)?;
    let l = prepare_taxon_kernel(&q, 3)?.chol;
    let mapped = &l * &dpcoa.beta;
    assert!((&mapped - &structured.beta).amax() < 1e-10);
    println!("L * beta_dpcoa matches beta_Q to {:.1e}", (&mapped - &structured.beta).amax());
    Ok(())
}

fn main() -> kpr::Result<()> {
    run_example()
}
