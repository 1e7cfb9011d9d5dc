//! Distances and kernels derived from a phylogeny: patristic, UniFrac and edge mass.

use kpr::kernels::{double_center, hsic, psd_project, Provenance, PSD_TOL};
use kpr::phylo::{edge_kernel, parse_newick, patristic_distances, unifrac_unweighted};
use kpr::AbundanceTable;
use nalgebra::DMatrix;

pub fn run_example() -> kpr::Result<()> {
    let tree = parse_newick("((A:1,B:1):1,(C:0.5,D:0.5):1.5);")?;
    let delta = patristic_distances(&tree, true);
    println!("squared patristic distances over {:?}:\n{}", delta.ids(), delta.values());

    // taxon kernel Q from the squared distances
    let q = psd_project(&double_center(&delta)?.as_square(), PSD_TOL, Provenance::DoubleCentered)?;
    println!("taxon kernel Q has trace {:.4}", q.values().trace());

    let x = AbundanceTable::new(
        (1..=4).map(|i| format!("s{i}")).collect(),
        tree.leaf_labels(),
        DMatrix::from_row_slice(4, 4, &[
            0.5, 0.5, 0.0, 0.0,
            0.4, 0.6, 0.0, 0.0,
            0.0, 0.0, 0.7, 0.3,
            0.25, 0.25, 0.25, 0.25,
        ]),
    )?;
    let u = unifrac_unweighted(&tree, &x)?;
    assert_eq!(u.values()[(0, 1)], 0.0);
    assert_eq!(u.values()[(0, 2)], 1.0);
    println!("unweighted UniFrac:\n{}", u.values());

    let h_unifrac = psd_project(&double_center(&u)?.as_square(), PSD_TOL, Provenance::DoubleCentered)?;
    let h_edge = edge_kernel(&tree, &x)?;
    println!("HSIC between the UniFrac and edge kernels: {:.4}", hsic(&h_unifrac, &h_edge)?);
    Ok(())
}

fn main() -> kpr::Result<()> {
    run_example()
}
