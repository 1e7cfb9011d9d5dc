//! Principal coordinates of a small squared-distance matrix.
//!
//! Euclidean distances between samples are double centered into a Gram matrix, whose
//! top eigenvectors give the ordination.

use kpr::kernels::{double_center, pcoa_coordinates, psd_project, squared_euclidean_distances, Provenance, PSD_TOL};
use kpr::AbundanceTable;
use nalgebra::DMatrix;

pub fn run_example() -> kpr::Result<()> {
    let x = AbundanceTable::new(
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        vec!["t1".into(), "t2".into()],
        DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 3.0, 0.0, 3.0, 4.0, 0.0, 4.0]),
    )?;
    let d = squared_euclidean_distances(&x);
    let g = double_center(&d)?;
    let k = psd_project(&g.as_square(), PSD_TOL, Provenance::DoubleCentered)?;
    let coords = pcoa_coordinates(&k, 2)?;

    // the ordination reproduces every pairwise distance of the rectangle
    for i in 0..4 {
        for j in 0..4 {
            let diff = coords.row(i) - coords.row(j);
            assert!((diff.norm_squared() - d.values()[(i, j)]).abs() < 1e-9);
        }
    }
    println!("PCoA coordinates:");
    for (id, row) in k.ids().iter().zip(coords.row_iter()) {
        println!("  {id}: {:>8.4} {:>8.4}", row[0], row[1]);
    }
    Ok(())
}

fn main() -> kpr::Result<()> {
    run_example()
}
