use kpr::compositional::{aitchison_norm, clr_transform, Composition};
use kpr::estimators::{franklin_dual, gridge_estimate, kpr_two_kernel, lasso_cd, lasso_kkt_residual, lasso_lambda_max};
use kpr::kernels::{double_center, pcoa_coordinates, psd_project, squared_euclidean_distances, Provenance, SquareMatrix, PSD_TOL};
use kpr::matio::{center_columns, load_abundance, load_square, save_abundance, save_square};
use kpr::phylo::{parse_newick, patristic_distances, unifrac_unweighted};
use kpr::simulation::{perturb_kernel, random_ultrametric_newick, tree_compositions};
use kpr::tuning::{cross_validate, kfold_split, log_grid, CvMethod, TuningRule};
use kpr::AbundanceTable;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
}

fn spd(seed: u64, m: usize) -> DMatrix<f64> {
    let a = gaussian(seed, m, m);
    let s = &a * a.transpose() / m as f64 + DMatrix::identity(m, m) * 0.1;
    (&s + s.transpose()) * 0.5
}

fn positive_table(seed: u64, n: usize, p: usize) -> AbundanceTable {
    AbundanceTable::from_matrix(gaussian(seed, n, p).map(|v| (1.5 * v).exp())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>(), n in 2usize..8, p in 1usize..6) {
        let dir = tempfile::tempdir().unwrap();
        let x = AbundanceTable::from_matrix(gaussian(seed, n, p).map(|v| v * 1e3f64.powf(v))).unwrap();
        save_abundance(dir.path().join("x.csv"), &x, &["round trip".into()]).unwrap();
        prop_assert_eq!(load_abundance(dir.path().join("x.csv")).unwrap(), x);
        let k = spd(seed, n);
        let ids: Vec<String> = (0..n).map(|i| format!("k{i}")).collect();
        save_square(dir.path().join("k.csv"), &ids, &k, &[]).unwrap();
        let back = load_square(dir.path().join("k.csv")).unwrap();
        prop_assert_eq!(back.values(), &k);
    }

    #[test]
    fn centering_is_idempotent_and_keeps_distances(seed in any::<u64>(), n in 2usize..10, p in 1usize..6) {
        let x = AbundanceTable::from_matrix(gaussian(seed, n, p).add_scalar(3.0)).unwrap();
        let c = center_columns(&x);
        for col in c.values().column_iter() {
            prop_assert!(col.sum().abs() < 1e-12 * n as f64);
        }
        prop_assert!((center_columns(&c).values() - c.values()).amax() < 1e-12);
        let d0 = squared_euclidean_distances(&x);
        let d1 = squared_euclidean_distances(&c);
        prop_assert!((d0.values() - d1.values()).amax() < 1e-10);
    }

    #[test]
    fn pcoa_reproduces_euclidean_distances(seed in any::<u64>(), n in 3usize..10, p in 1usize..4) {
        let x = AbundanceTable::from_matrix(gaussian(seed, n, p)).unwrap();
        let d = squared_euclidean_distances(&x);
        let k = psd_project(&double_center(&d).unwrap().as_square(), PSD_TOL, Provenance::DoubleCentered).unwrap();
        let axes = p.min(n - 1);
        let z = pcoa_coordinates(&k, axes).unwrap();
        for i in 0..n {
            for j in 0..n {
                let dz = (z.row(i) - z.row(j)).norm_squared();
                prop_assert!((dz - d.values()[(i, j)]).abs() < 1e-8 * (1.0 + d.values()[(i, j)]));
            }
        }
    }

    #[test]
    fn psd_projection_is_psd(seed in any::<u64>(), m in 2usize..9) {
        let a = gaussian(seed, m, m);
        let k = spd(seed ^ 1, m) + (&a + a.transpose()) * 1e-10;
        let sq = SquareMatrix::with_generated_ids(k).unwrap();
        let out = psd_project(&sq, PSD_TOL, Provenance::Custom).unwrap();
        let eig = SymmetricEigen::new(out.values().clone()).eigenvalues;
        prop_assert!(eig.iter().all(|e| *e >= 0.0));
    }

    #[test]
    fn clr_is_centered_equivariant_and_scale_free(seed in any::<u64>(), n in 2usize..6, p in 2usize..10, shift in 0usize..10) {
        let x = positive_table(seed, n, p);
        let c = clr_transform(&x, 1e-6).unwrap();
        for row in c.values().row_iter() {
            prop_assert!(row.sum().abs() < 1e-10);
        }
        let scaled = x.with_values(x.values() * 7.5).unwrap();
        prop_assert!((clr_transform(&scaled, 1e-6).unwrap().values() - c.values()).amax() < 1e-12);
        let order: Vec<String> = (0..p).map(|j| x.taxon_ids()[(j + shift) % p].clone()).collect();
        let permuted = clr_transform(&x.select_taxa(&order).unwrap(), 1e-6).unwrap();
        for j in 0..p {
            prop_assert!((permuted.values().column(j) - c.values().column((j + shift) % p)).amax() < 1e-12);
        }
        let comp = Composition::new(x.values().row(0).transpose()).unwrap();
        prop_assert!((aitchison_norm(&comp) - c.values().row(0).norm()).abs() < 1e-10);
    }

    #[test]
    fn two_kernel_primal_dual_identity(seed in any::<u64>(), n in 4usize..10, p in 2usize..7, log_lambda in -2.0f64..2.0) {
        let lambda = 10f64.powf(log_lambda);
        let x = gaussian(seed, n, p);
        let y = gaussian(seed ^ 7, n, 1).column(0).into_owned();
        let q = spd(seed ^ 11, p);
        let h = spd(seed ^ 13, n);
        let fit = kpr_two_kernel(&x, &y, &q, &h, lambda).unwrap();
        let gamma = franklin_dual(&(&x * &q * x.transpose()), &h, &y, lambda).unwrap();
        let via_dual = &q * x.transpose() * gamma;
        prop_assert!((&fit.beta - &via_dual).norm() <= 1e-8 * via_dual.norm().max(1e-12));
        // with H = I the two-kernel estimate reduces to generalized ridge
        let g = gridge_estimate(&x, &y, &q, lambda).unwrap().beta;
        let k2 = kpr_two_kernel(&x, &y, &q, &DMatrix::identity(n, n), lambda).unwrap().beta;
        prop_assert!((&g - &k2).norm() <= 1e-9 * g.norm().max(1e-12));
    }

    #[test]
    fn lasso_solutions_satisfy_kkt(seed in any::<u64>(), n in 5usize..30, p in 2usize..30, frac in 0.05f64..1.2) {
        let x = gaussian(seed, n, p);
        let y = gaussian(seed ^ 3, n, 1).column(0).into_owned();
        let lambda = frac * lasso_lambda_max(&x, &y);
        let fit = lasso_cd(&x, &y, lambda).unwrap();
        prop_assert!(lasso_kkt_residual(&x, &y, &fit.beta, lambda) <= 1e-7);
        if frac >= 1.0 {
            prop_assert!(fit.beta.iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn folds_are_balanced_and_seeded(n in 2usize..60, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let f = kfold_split(n, k, seed).unwrap();
        let mut sizes = vec![0usize; k];
        for &i in &f {
            sizes[i] += 1;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(f, kfold_split(n, k, seed).unwrap());
    }

    #[test]
    fn one_se_rule_never_picks_a_smaller_lambda(seed in any::<u64>(), n in 12usize..30, p in 2usize..10) {
        let x = gaussian(seed, n, p);
        let y = gaussian(seed ^ 5, n, 1).column(0).into_owned() + x.column(0);
        let grid = log_grid(100.0, 1e-3, 12);
        let cv = cross_validate(&CvMethod::Ridge, &x, &y, &grid, 4, seed, None).unwrap();
        prop_assert!(cv.selected(TuningRule::Cv1se) >= cv.selected(TuningRule::CvMin));
        let i = grid.iter().position(|l| *l == cv.lambda_min).unwrap();
        prop_assert!(cv.mean_error.iter().all(|e| *e >= cv.mean_error[i]));
    }

    #[test]
    fn perturbation_keeps_spectrum(seed in any::<u64>(), m in 3usize..12, target in 0.05f64..0.6) {
        let k = spd(seed, m);
        let kt = perturb_kernel(&k, target, seed).unwrap();
        let mut a: Vec<f64> = SymmetricEigen::new(k.clone()).eigenvalues.iter().copied().collect();
        let mut b: Vec<f64> = SymmetricEigen::new(kt.clone()).eigenvalues.iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-9 * a.last().unwrap().max(1.0));
        }
        let ratio = (&kt - &k).norm() / k.norm();
        prop_assert!((ratio - target).abs() <= 0.01);
    }

    #[test]
    fn newick_round_trip_and_unifrac_range(seed in any::<u64>(), leaves in 2usize..12, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = parse_newick(&random_ultrametric_newick(leaves, &mut rng)).unwrap();
        let again = parse_newick(&tree.to_newick()).unwrap();
        let d0 = patristic_distances(&tree, false);
        let d1 = patristic_distances(&again, false);
        prop_assert_eq!(d0.ids(), d1.ids());
        prop_assert!((d0.values() - d1.values()).amax() < 1e-12);
        let x = tree_compositions(&tree, n, 0.4, &mut rng).unwrap();
        let u = unifrac_unweighted(&tree, &x).unwrap();
        for i in 0..n {
            prop_assert_eq!(u.values()[(i, i)], 0.0);
            for j in 0..n {
                prop_assert!((0.0..=1.0).contains(&u.values()[(i, j)]));
                prop_assert_eq!(u.values()[(i, j)], u.values()[(j, i)]);
            }
        }
    }
}

#[test]
fn franklin_gamma_solves_its_normal_equations() {
    let (n, lambda) = (7, 0.3);
    let k = spd(1, n);
    let h = spd(2, n);
    let y = DVector::from_fn(n, |i, _| (i as f64).sin());
    let g = franklin_dual(&k, &h, &y, lambda).unwrap();
    let residual = (&h * &k + DMatrix::identity(n, n) * lambda) * &g - &h * &y;
    assert!(residual.norm() < 1e-12);
}
