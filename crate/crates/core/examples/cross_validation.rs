//! Ten-fold tuning of ridge and lasso penalties with the minimum and one-standard-error rules.

use kpr::tuning::{cross_validate, default_grid_for, CvMethod, TuningRule};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn run_example() -> kpr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, p) = (40, 12);
    let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let beta = DVector::from_fn(p, |j, _| if j < 3 { 1.5 } else { 0.0 });
    let noise = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let y = &x * &beta + noise;

    for method in [CvMethod::Ridge, CvMethod::Lasso] {
        let grid = default_grid_for(&method, &x, &y)?;
        let cv = cross_validate(&method, &x, &y, &grid, 10, 7, None)?;
        let (lmin, l1se) = (cv.selected(TuningRule::CvMin), cv.selected(TuningRule::Cv1se));
        assert!(l1se >= lmin);
        let fit = method.fit(&x, &y, l1se)?;
        let nonzero = fit.beta.iter().filter(|b| b.abs() > 1e-12).count();
        println!("{method:?}: lambda_min = {lmin:.4}, lambda_1se = {l1se:.4}, nonzero = {nonzero}/{p}");
    }
    Ok(())
}

fn main() -> kpr::Result<()> {
    run_example()
}
