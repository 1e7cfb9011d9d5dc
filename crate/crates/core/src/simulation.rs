//! Monte-Carlo harness for the DPCoA, UniFrac and edge-kernel protocols.
//!
//! Each cell `(r2, perturbation, sparsity, replication)` owns an RNG stream seeded from a
//! hash of its coordinates, so the record list does not depend on thread count or order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KprError, Result};
use crate::estimators;
use crate::kernels::{double_center, psd_project, Provenance, SquareMatrix, PSD_TOL};
use crate::linalg::{self, ThinSvd};
use crate::matio::{center_matrix_columns, AbundanceTable};
use crate::phylo::{edge_kernel, parse_newick, patristic_distances, unifrac_unweighted, PhyloTree};
use crate::tuning::{self, CvMethod, TuningRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Dpcoa,
    Unifrac,
    Edge,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Dpcoa => "dpcoa",
            Scenario::Unifrac => "unifrac",
            Scenario::Edge => "edge",
        }
    }

    /// Name of the prediction metric: PSSE without a sample kernel, HPSSE with one.
    pub fn prediction_metric(&self) -> &'static str {
        match self {
            Scenario::Dpcoa => "psse",
            _ => "hpsse",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = KprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpcoa" => Ok(Scenario::Dpcoa),
            "unifrac" => Ok(Scenario::Unifrac),
            "edge" => Ok(Scenario::Edge),
            _ => Err(KprError::Usage(format!("unknown scenario '{s}' (expected dpcoa, unifrac or edge)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMethod {
    Kpr,
    Ridge,
    Lasso,
}

impl SimMethod {
    pub const ALL: [SimMethod; 3] = [SimMethod::Kpr, SimMethod::Ridge, SimMethod::Lasso];

    pub fn as_str(&self) -> &'static str {
        match self {
            SimMethod::Kpr => "kpr",
            SimMethod::Ridge => "ridge",
            SimMethod::Lasso => "lasso",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub r2_grid: Vec<f64>,
    pub perturbation_levels: Vec<f64>,
    /// Fractions of `p` kept nonzero in the true coefficients (dpcoa only).
    pub sparsity_levels: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub tuning_rule: TuningRule,
    pub folds: usize,
    /// Explicit descending grid; when absent each method uses its default grid.
    pub lambda_grid: Option<Vec<f64>>,
    /// Worker threads; absent means the global pool.
    pub threads: Option<usize>,
    /// Synthetic data size when no input files are given.
    pub samples: usize,
    pub taxa: usize,
    /// Per-entry probability of a structural zero in synthetic tables.
    pub dropout: f64,
    /// Test hook: draw no noise, so `y_obs = y_true`.
    pub noise_free: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::Dpcoa,
            r2_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            perturbation_levels: vec![0.0, 0.25, 0.5],
            sparsity_levels: vec![1.0],
            replications: 50,
            seed: 0,
            tuning_rule: TuningRule::Cv1se,
            folds: 10,
            lambda_grid: None,
            threads: None,
            samples: 60,
            taxa: 40,
            dropout: 0.2,
            noise_free: false,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            KprError::Parse {
                context: "config".into(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KprError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KprError::Domain(m));
        if self.r2_grid.is_empty() || self.r2_grid.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return bad("r2 values must lie in (0, 1)".into());
        }
        if self.perturbation_levels.is_empty() || self.perturbation_levels.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return bad("perturbation levels must be finite and nonnegative".into());
        }
        // a zero-signal truth leaves the noise level for a target R^2 undefined
        if self.sparsity_levels.is_empty() || self.sparsity_levels.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return bad("sparsity levels are fractions of p in (0, 1]".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    fn sparsity_counts(&self, p: usize) -> Vec<Option<usize>> {
        match self.scenario {
            Scenario::Dpcoa => self
                .sparsity_levels
                .iter()
                .map(|f| Some((f * p as f64 + 1e-9).floor() as usize))
                .collect(),
            _ => vec![None],
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

/// One method's result in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub scenario: Scenario,
    pub replication: usize,
    pub r2: f64,
    pub perturbation: f64,
    pub sparsity: Option<usize>,
    pub method: SimMethod,
    pub esse: Option<f64>,
    pub psse_or_hpsse: f64,
    pub lambda_selected: f64,
}

/// Inputs shared by every replication of a scenario.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub scenario: Scenario,
    /// Column-centered relative abundances.
    pub x: DMatrix<f64>,
    pub y_seed: DVector<f64>,
    /// Taxon kernel (dpcoa).
    pub q: Option<DMatrix<f64>>,
    /// Sample kernel (unifrac, edge).
    pub h: Option<DMatrix<f64>>,
}

fn closed_rows(x: &AbundanceTable) -> Result<DMatrix<f64>> {
    let mut m = x.values().clone();
    if m.iter().any(|v| *v < 0.0) {
        return Err(KprError::Domain("abundances must be nonnegative".into()));
    }
    for (i, mut row) in m.row_iter_mut().enumerate() {
        let s = row.sum();
        if !(s > 0.0) {
            return Err(KprError::Domain(format!("sample '{}' has zero total abundance", x.sample_ids()[i])));
        }
        row /= s;
    }
    Ok(m)
}

fn sub_square(m: &SquareMatrix, ids: &[String]) -> Result<SquareMatrix> {
    let idx = crate::matio::index_of_all(m.ids(), ids, "tree leaf")?;
    SquareMatrix::new(ids.to_vec(), linalg::principal_submatrix(m.values(), &idx))
}

impl DataBundle {
    /// Builds the scenario kernels from a tree, a raw abundance table and a seed response.
    pub fn from_tree(scenario: Scenario, tree: &PhyloTree, table: &AbundanceTable, y_seed: &DVector<f64>) -> Result<Self> {
        if y_seed.len() != table.n_samples() {
            return Err(KprError::Schema(format!(
                "seed response has {} entries but the table has {} samples",
                y_seed.len(),
                table.n_samples()
            )));
        }
        let props = table.with_values(closed_rows(table)?)?;
        let x = center_matrix_columns(props.values());
        let (q, h) = match scenario {
            Scenario::Dpcoa => {
                let delta = sub_square(&patristic_distances(tree, true), table.taxon_ids())?;
                let q = psd_project(&double_center(&delta)?.as_square(), PSD_TOL, Provenance::DoubleCentered)?;
                (Some(q.into_values()), None)
            }
            Scenario::Unifrac => {
                let delta = unifrac_unweighted(tree, table)?;
                let h = psd_project(&double_center(&delta)?.as_square(), PSD_TOL, Provenance::DoubleCentered)?;
                (None, Some(h.into_values()))
            }
            Scenario::Edge => (None, Some(edge_kernel(tree, &props)?.into_values())),
        };
        Ok(DataBundle {
            scenario,
            x,
            y_seed: y_seed.clone(),
            q,
            h,
        })
    }

    /// Random ultrametric tree, tree-structured compositions and a seed response.
    pub fn synthetic(scenario: Scenario, n: usize, p: usize, dropout: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = parse_newick(&random_ultrametric_newick(p, &mut rng))?;
        let table = tree_compositions(&tree, n, dropout, &mut rng)?;
        let y_seed = synthetic_response(&table, &mut rng);
        Self::from_tree(scenario, &tree, &table, &y_seed)
    }

    fn require_q(&self) -> Result<&DMatrix<f64>> {
        self.q
            .as_ref()
            .ok_or_else(|| KprError::Usage("dpcoa scenario needs a taxon kernel Q".into()))
    }

    fn require_h(&self) -> Result<&DMatrix<f64>> {
        self.h
            .as_ref()
            .ok_or_else(|| KprError::Usage(format!("{} scenario needs a sample kernel H", self.scenario)))
    }
}

fn top_two(svd: &ThinSvd, what: &str) -> Result<()> {
    if svd.rank() < 2 {
        return Err(KprError::Domain(format!("{what} has rank {} but the truth needs 2", svd.rank())));
    }
    Ok(())
}

/// Hard-thresholded two-component DPCR coefficients and the signal they generate.
/// Returns `(beta_true, y_true)` with `beta_true` in `XL` coordinates.
pub fn make_true_dpcoa(
    x: &DMatrix<f64>,
    y_seed: &DVector<f64>,
    q: &DMatrix<f64>,
    sparsity: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let p = x.ncols();
    if sparsity > p {
        return Err(KprError::Domain(format!("sparsity {sparsity} exceeds p = {p}")));
    }
    let l = estimators::prepare_taxon_kernel(q, p)?.chol;
    let z = x * l;
    let svd = ThinSvd::new(&z);
    top_two(&svd, "XL")?;
    let full = svd.truncated_solve(y_seed, 2);
    // keep the `sparsity` largest magnitudes; a stable sort breaks ties toward lower index
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| full[b].abs().total_cmp(&full[a].abs()));
    let mut beta = DVector::zeros(p);
    for &j in &order[..sparsity] {
        beta[j] = full[j];
    }
    let u2 = svd.u.columns(0, 2);
    let v2 = svd.v.columns(0, 2);
    let s2 = DMatrix::from_diagonal(&svd.singular_values.rows(0, 2).into_owned());
    let y_true = u2 * s2 * (v2.transpose() * &beta);
    Ok((beta, y_true))
}

/// Projection of `y_seed` onto the first two principal coordinates of `H`.
/// Returns `(gamma_true, y_true)`.
pub fn make_true_unifrac(h: &DMatrix<f64>, y_seed: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let eig = linalg::sym_eigen(h);
    let top = eig.values.iter().cloned().fold(0.0, f64::max);
    let positive = eig.values.iter().filter(|v| **v > PSD_TOL * top).count();
    if positive < 2 {
        return Err(KprError::Domain(format!("H has {positive} positive eigenvalues but the truth needs 2")));
    }
    let u2 = eig.vectors.columns(0, 2);
    let s = [eig.values[0].sqrt(), eig.values[1].sqrt()];
    let uty = u2.transpose() * y_seed;
    let gamma = DVector::from_vec(vec![uty[0] / s[0], uty[1] / s[1]]);
    let y_true = u2 * DVector::from_vec(vec![gamma[0] * s[0], gamma[1] * s[1]]);
    Ok((gamma, y_true))
}

/// Two-component PCR truth from the SVD of `X`. Returns `(beta_true, y_true)`.
pub fn make_true_edge(x: &DMatrix<f64>, y_seed: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let svd = ThinSvd::new(x);
    top_two(&svd, "X")?;
    let u2 = svd.u.columns(0, 2);
    let y_true = u2 * (u2.transpose() * y_seed);
    let beta = svd.truncated_solve(&y_true, 2);
    Ok((beta, y_true))
}

/// Noise variance giving `R^2 = var / (var + sigma^2)`.
pub fn noise_for_r2(var_y_true: f64, r2: f64) -> Result<f64> {
    if !(r2 > 0.0 && r2 < 1.0) {
        return Err(KprError::Domain(format!("r2 must lie in (0, 1), got {r2}")));
    }
    if !(var_y_true > 0.0 && var_y_true.is_finite()) {
        return Err(KprError::Domain(format!("var(y_true) must be positive, got {var_y_true}")));
    }
    Ok(var_y_true * (1.0 - r2) / r2)
}

const CALIBRATION_ITERS: usize = 100;
const CALIBRATION_AIM: f64 = 1e-3;
const CALIBRATION_TOL: f64 = 0.01;
const CALIBRATION_DRAWS: usize = 5;

/// Gaussian perturbation of a PSD matrix with its spectrum restored, calibrated so that
/// `||M - M_obs||_F / ||M||_F` is within 0.01 of `target_ratio`.
pub fn perturb_kernel(m: &DMatrix<f64>, target_ratio: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(target_ratio >= 0.0 && target_ratio.is_finite()) {
        return Err(KprError::Domain(format!("target ratio must be nonnegative, got {target_ratio}")));
    }
    if target_ratio == 0.0 {
        return Ok(m.clone());
    }
    let d = m.nrows();
    if m.ncols() != d || d == 0 {
        return Err(KprError::Schema("perturb_kernel needs a nonempty square matrix".into()));
    }
    let norm = m.norm();
    if norm == 0.0 {
        return Err(KprError::Calibration("cannot perturb a zero matrix to a relative target".into()));
    }
    let spectrum = linalg::sym_eigen(m).values;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = String::new();
    for _ in 0..CALIBRATION_DRAWS {
        let g = symmetric_noise(d, &mut rng);
        match calibrate(m, &spectrum, &g, norm, target_ratio) {
            Ok(out) => return Ok(out),
            Err(msg) => last = msg,
        }
    }
    Err(KprError::Calibration(last))
}

fn symmetric_noise(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v: f64 = StandardNormal.sample(rng);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

fn respectrum(m: &DMatrix<f64>, spectrum: &DVector<f64>, g: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let eig = linalg::sym_eigen(&(m + g * scale));
    let w = &eig.vectors;
    linalg::symmetrize(&(w * DMatrix::from_diagonal(spectrum) * w.transpose()))
}

fn calibrate(
    m: &DMatrix<f64>,
    spectrum: &DVector<f64>,
    g: &DMatrix<f64>,
    norm: f64,
    target: f64,
) -> std::result::Result<DMatrix<f64>, String> {
    let eval = |s: f64| {
        let out = respectrum(m, spectrum, g, s);
        let ratio = (m - &out).norm() / norm;
        (out, ratio)
    };
    let mut lo = 0.0;
    let mut hi = target * norm / g.norm().max(f64::MIN_POSITIVE);
    let mut bracket = None;
    for _ in 0..CALIBRATION_ITERS {
        let (out, r) = eval(hi);
        if (r - target).abs() <= CALIBRATION_AIM {
            return Ok(out);
        }
        if r > target {
            bracket = Some(out);
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    let Some(mut best) = bracket else {
        return Err(format!("could not bracket Frobenius ratio {target} in {CALIBRATION_ITERS} doublings"));
    };
    let mut best_gap = f64::INFINITY;
    for _ in 0..CALIBRATION_ITERS {
        let mid = 0.5 * (lo + hi);
        let (out, r) = eval(mid);
        let gap = (r - target).abs();
        if gap < best_gap {
            best_gap = gap;
            best = out;
        }
        if gap <= CALIBRATION_AIM {
            break;
        }
        if r > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if best_gap <= CALIBRATION_TOL {
        Ok(best)
    } else {
        Err(format!("bisection ended {best_gap:.4} away from Frobenius ratio {target}"))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the RNG stream owned by one replication cell.
pub fn cell_seed(seed: u64, scenario: Scenario, r2: f64, perturbation: f64, sparsity: Option<usize>, replication: usize) -> u64 {
    let words = [
        scenario as u64,
        r2.to_bits(),
        perturbation.to_bits(),
        sparsity.map_or(u64::MAX, |s| s as u64),
        replication as u64,
    ];
    words.iter().fold(splitmix(seed), |h, w| splitmix(h ^ w))
}

/// Coordinates of one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub r2: f64,
    pub perturbation: f64,
    pub sparsity: Option<usize>,
    pub replication: usize,
}

/// True signal of a scenario at one sparsity level.
#[derive(Debug, Clone)]
pub struct Truth {
    /// True coefficients (absent for unifrac, where no meaningful beta exists).
    pub beta: Option<DVector<f64>>,
    pub y: DVector<f64>,
}

pub fn make_truth(data: &DataBundle, sparsity: Option<usize>) -> Result<Truth> {
    match data.scenario {
        Scenario::Dpcoa => {
            let s = sparsity.unwrap_or(data.x.ncols());
            let (beta, y) = make_true_dpcoa(&data.x, &data.y_seed, data.require_q()?, s)?;
            Ok(Truth { beta: Some(beta), y })
        }
        Scenario::Unifrac => {
            let (_, y) = make_true_unifrac(data.require_h()?, &data.y_seed)?;
            Ok(Truth { beta: None, y })
        }
        Scenario::Edge => {
            let (beta, y) = make_true_edge(&data.x, &data.y_seed)?;
            Ok(Truth { beta: Some(beta), y })
        }
    }
}

/// A fitted method in one replication, with the quantities its metrics came from.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub record: SimulationRecord,
    pub beta: DVector<f64>,
    pub y_hat: DVector<f64>,
}

/// Runs one replication: perturb, add noise, tune and fit every method.
pub fn run_cell(config: &ScenarioConfig, data: &DataBundle, truth: &Truth, cell: Cell) -> Result<Vec<MethodOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(
        config.seed,
        data.scenario,
        cell.r2,
        cell.perturbation,
        cell.sparsity,
        cell.replication,
    ));
    let x = &data.x;
    let n = x.nrows();

    // the observed kernel: Q for dpcoa, H otherwise
    let true_kernel = match data.scenario {
        Scenario::Dpcoa => data.require_q()?,
        _ => data.require_h()?,
    };
    let observed = perturb_kernel(true_kernel, cell.perturbation, rng.next_u64())?;

    let sigma2 = noise_for_r2(linalg::sample_variance(&truth.y), cell.r2)?;
    let sigma = sigma2.sqrt();
    let noise = DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * sigma
    });
    let y_obs = if config.noise_free { truth.y.clone() } else { &truth.y + noise };
    let fold_seed = rng.next_u64();

    let weight = match data.scenario {
        Scenario::Dpcoa => None,
        _ => Some(&observed),
    };
    let kpr = match data.scenario {
        Scenario::Dpcoa => CvMethod::Dpcoa { q: &observed },
        _ => CvMethod::Franklin { h: &observed },
    };
    let kpr_design = match data.scenario {
        Scenario::Dpcoa => Some(x * estimators::prepare_taxon_kernel(&observed, x.ncols())?.chol),
        _ => None,
    };

    let mut out = Vec::with_capacity(3);
    for method in SimMethod::ALL {
        let cv_method = match method {
            SimMethod::Kpr => kpr,
            SimMethod::Ridge => CvMethod::Ridge,
            SimMethod::Lasso => CvMethod::Lasso,
        };
        let grid = match &config.lambda_grid {
            Some(g) => g.clone(),
            None => tuning::default_grid_for(&cv_method, x, &y_obs)?,
        };
        let cv = tuning::cross_validate(&cv_method, x, &y_obs, &grid, config.folds, fold_seed, weight)?;
        let lambda = cv.selected(config.tuning_rule);
        let fit = cv_method.fit(x, &y_obs, lambda)?;
        let y_hat = match (method, &kpr_design) {
            (SimMethod::Kpr, Some(z)) => z * &fit.beta,
            _ => x * &fit.beta,
        };
        let resid = &y_hat - &truth.y;
        let pred = match &data.h {
            Some(h) => resid.dot(&(h * &resid)),
            None => resid.norm_squared(),
        };
        let esse = truth.beta.as_ref().map(|b| (&fit.beta - b).norm_squared());
        out.push(MethodOutcome {
            record: SimulationRecord {
                scenario: data.scenario,
                replication: cell.replication,
                r2: cell.r2,
                perturbation: cell.perturbation,
                sparsity: cell.sparsity,
                method,
                esse,
                psse_or_hpsse: pred,
                lambda_selected: lambda,
            },
            beta: fit.beta,
            y_hat,
        });
    }
    Ok(out)
}

fn record_order(a: &SimulationRecord, b: &SimulationRecord) -> std::cmp::Ordering {
    a.scenario
        .cmp(&b.scenario)
        .then(a.r2.total_cmp(&b.r2))
        .then(a.perturbation.total_cmp(&b.perturbation))
        .then(a.sparsity.cmp(&b.sparsity))
        .then(a.replication.cmp(&b.replication))
        .then(a.method.cmp(&b.method))
}

/// All replications of a scenario, sorted by coordinates.
pub fn run_scenario(config: &ScenarioConfig, data: &DataBundle) -> Result<Vec<SimulationRecord>> {
    config.validate()?;
    if config.scenario != data.scenario {
        return Err(KprError::Schema(format!(
            "config is for the {} scenario but the data bundle is for {}",
            config.scenario, data.scenario
        )));
    }
    let sparsities = config.sparsity_counts(data.x.ncols());
    let truths: Vec<(Option<usize>, Truth)> = sparsities
        .iter()
        .map(|&s| Ok((s, make_truth(data, s)?)))
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for &r2 in &config.r2_grid {
        for &perturbation in &config.perturbation_levels {
            for (ti, (sparsity, _)) in truths.iter().enumerate() {
                for replication in 0..config.replications {
                    jobs.push((
                        ti,
                        Cell {
                            r2,
                            perturbation,
                            sparsity: *sparsity,
                            replication,
                        },
                    ));
                }
            }
        }
    }

    let work = || -> Result<Vec<SimulationRecord>> {
        let nested: Vec<Vec<MethodOutcome>> = jobs
            .par_iter()
            .map(|(ti, cell)| {
                run_cell(config, data, &truths[*ti].1, *cell).map_err(|e| KprError::Replication {
                    scenario: data.scenario.to_string(),
                    r2: cell.r2,
                    perturbation: cell.perturbation,
                    sparsity: cell.sparsity,
                    replication: cell.replication,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let mut records: Vec<SimulationRecord> = nested.into_iter().flatten().map(|o| o.record).collect();
        records.sort_by(record_order);
        Ok(records)
    };
    match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| KprError::Usage(format!("cannot build a {t}-thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Mean and standard error of each metric per `(r2, perturbation, sparsity, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: Scenario,
    pub r2: f64,
    pub perturbation: f64,
    pub sparsity: Option<usize>,
    pub method: SimMethod,
    pub replications: usize,
    pub esse_mean: Option<f64>,
    pub esse_se: Option<f64>,
    pub pred_mean: f64,
    pub pred_se: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(records: &[SimulationRecord]) -> Vec<SummaryRow> {
    type Key = (Scenario, u64, u64, Option<usize>, SimMethod);
    let mut groups: BTreeMap<Key, Vec<&SimulationRecord>> = BTreeMap::new();
    for r in records {
        // bit patterns of nonnegative floats sort like the floats themselves
        let key = (r.scenario, r.r2.to_bits(), r.perturbation.to_bits(), r.sparsity, r.method);
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rs| {
            let first = rs[0];
            let pred: Vec<f64> = rs.iter().map(|r| r.psse_or_hpsse).collect();
            let esse: Option<Vec<f64>> = rs.iter().map(|r| r.esse).collect();
            let (pred_mean, pred_se) = mean_se(&pred);
            let (esse_mean, esse_se) = match esse {
                Some(e) => {
                    let (m, s) = mean_se(&e);
                    (Some(m), Some(s))
                }
                None => (None, None),
            };
            SummaryRow {
                scenario: first.scenario,
                r2: first.r2,
                perturbation: first.perturbation,
                sparsity: first.sparsity,
                method: first.method,
                replications: rs.len(),
                esse_mean,
                esse_se,
                pred_mean,
                pred_se,
            }
        })
        .collect()
}

/// Kingman-coalescent ultrametric tree on `p` leaves `t1..tp`, as Newick text.
pub fn random_ultrametric_newick<R: Rng>(p: usize, rng: &mut R) -> String {
    assert!(p >= 2, "a tree needs at least two leaves");
    // (newick fragment, height of its root)
    let mut lineages: Vec<(String, f64)> = (1..=p).map(|i| (format!("t{i}"), 0.0)).collect();
    let mut t = 0.0;
    while lineages.len() > 1 {
        let k = lineages.len() as f64;
        let rate = k * (k - 1.0) / 2.0;
        t += Exp::new(rate).expect("positive rate").sample(rng);
        let a = lineages.swap_remove(rng.random_range(0..lineages.len()));
        let b = lineages.swap_remove(rng.random_range(0..lineages.len()));
        let node = format!("({}:{},{}:{})", a.0, t - a.1, b.0, t - b.1);
        lineages.push((node, t));
    }
    format!("{};", lineages.pop().expect("one lineage left").0)
}

/// Log-normal compositions whose log-abundances follow Brownian motion on the tree,
/// with entries dropped to zero at rate `dropout` (the largest entry of a row is kept).
pub fn tree_compositions<R: Rng>(tree: &PhyloTree, n: usize, dropout: f64, rng: &mut R) -> Result<AbundanceTable> {
    let nodes = tree.nodes();
    let leaves = tree.leaf_labels();
    let leaf_nodes: Vec<usize> = (0..nodes.len()).filter(|&i| tree.is_leaf(i)).collect();
    let mut order = tree.postorder();
    order.reverse();
    let mut values = DMatrix::zeros(n, leaves.len());
    for i in 0..n {
        let mut level = vec![0.0; nodes.len()];
        for &node in &order {
            if let Some(parent) = nodes[node].parent {
                let z: f64 = StandardNormal.sample(rng);
                level[node] = level[parent] + z * nodes[node].length.sqrt() * 2.0;
            }
        }
        let logs: Vec<f64> = leaf_nodes.iter().map(|&l| level[l]).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let keep = logs.iter().position(|v| *v == top).expect("nonempty row");
        let mut row: Vec<f64> = logs.iter().map(|v| (v - top).exp()).collect();
        for (j, v) in row.iter_mut().enumerate() {
            if j != keep && rng.random::<f64>() < dropout {
                *v = 0.0;
            }
        }
        let s: f64 = row.iter().sum();
        for (j, v) in row.iter().enumerate() {
            values[(i, j)] = v / s;
        }
    }
    // leaf_labels() and leaf node order agree: both follow Newick appearance
    let sample_ids = (1..=n).map(|i| format!("s{i}")).collect();
    AbundanceTable::new(sample_ids, leaves, values)
}

/// Standardized linear response in the abundances plus unit-variance noise.
pub fn synthetic_response<R: Rng>(table: &AbundanceTable, rng: &mut R) -> DVector<f64> {
    let x = center_matrix_columns(table.values());
    let b = DVector::from_fn(x.ncols(), |_, _| StandardNormal.sample(rng));
    let signal = &x * b;
    let sd = linalg::sample_variance(&signal).sqrt().max(f64::MIN_POSITIVE);
    DVector::from_fn(x.nrows(), |i, _| {
        let z: f64 = StandardNormal.sample(rng);
        2.0 * signal[i] / sd + z
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn noise_examples() {
        assert_eq!(noise_for_r2(1.0, 0.5).unwrap(), 1.0);
        assert!((noise_for_r2(2.0, 0.2).unwrap() - 8.0).abs() < 1e-12);
        assert!((noise_for_r2(1.0, 0.9).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert!(noise_for_r2(1.0, 1.0).is_err());
        assert!(noise_for_r2(0.0, 0.5).is_err());
    }

    #[test]
    fn perturb_examples() {
        let m = spd(10, 1);
        assert_eq!(perturb_kernel(&m, 0.0, 3).unwrap(), m);
        let spectrum = linalg::sym_eigen(&m).values;
        for (seed, target) in [(5, 0.25), (6, 0.5)] {
            let out = perturb_kernel(&m, target, seed).unwrap();
            let ratio = (&m - &out).norm() / m.norm();
            assert!((ratio - target).abs() <= 0.01, "ratio {ratio}");
            let s = linalg::sym_eigen(&out).values;
            assert!((s - &spectrum).amax() < 1e-9);
        }
        assert_eq!(perturb_kernel(&m, 0.25, 9).unwrap(), perturb_kernel(&m, 0.25, 9).unwrap());
    }

    #[test]
    fn dpcoa_truth_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = center_matrix_columns(&DMatrix::from_fn(6, 4, |_, _| rng.random_range(0.0..1.0)));
        let y = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let q = spd(4, 3);
        let (b0, y0) = make_true_dpcoa(&x, &y, &q, 0).unwrap();
        assert_eq!(b0.amax(), 0.0);
        assert_eq!(y0.amax(), 0.0);

        // oracle: explicit Cholesky and SVD of XL through nalgebra directly
        let l = q.clone().cholesky().unwrap().l();
        let z = &x * &l;
        let svd = z.clone().svd(true, true);
        let mut idx: Vec<usize> = (0..4).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut full = DVector::zeros(4);
        let mut proj = DMatrix::zeros(6, 4);
        for &k in &idx[..2] {
            let uk = u.column(k);
            let vk = vt.row(k).transpose();
            let sk = svd.singular_values[k];
            full += &vk * (uk.dot(&y) / sk);
            proj += uk * vk.transpose() * sk;
        }
        let (bp, yp) = make_true_dpcoa(&x, &y, &q, 4).unwrap();
        assert!((&bp - &full).amax() < 1e-10);
        assert!((&yp - &proj * &full).amax() < 1e-10);

        let (b2, _) = make_true_dpcoa(&x, &y, &q, 2).unwrap();
        assert_eq!(b2.iter().filter(|v| **v != 0.0).count(), 2);
        let mut mags: Vec<f64> = full.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        for v in b2.iter().filter(|v| **v != 0.0) {
            assert!(v.abs() >= mags[1]);
        }
        assert!(make_true_dpcoa(&x, &y, &q, 5).is_err());
    }

    #[test]
    fn unifrac_truth_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let h = &a * a.transpose();
        let eig = linalg::sym_eigen(&h);
        let in_span = eig.vectors.column(0) * 2.0 - eig.vectors.column(1) * 0.5;
        let (_, y) = make_true_unifrac(&h, &in_span).unwrap();
        assert!((y - &in_span).amax() < 1e-9);
        let (_, y0) = make_true_unifrac(&h, &eig.vectors.column(2).into_owned()).unwrap();
        assert!(y0.amax() < 1e-9);

        let seed = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let (g, yt) = make_true_unifrac(&h, &seed).unwrap();
        let e = nalgebra::SymmetricEigen::new(h.clone());
        let mut idx: Vec<usize> = (0..5).collect();
        idx.sort_by(|&i, &j| e.eigenvalues[j].total_cmp(&e.eigenvalues[i]));
        let mut oracle = DVector::zeros(5);
        for (k, &i) in idx[..2].iter().enumerate() {
            let u = e.eigenvectors.column(i);
            oracle += u * u.dot(&seed);
            assert!((g[k].abs() - u.dot(&seed).abs() / e.eigenvalues[i].sqrt()).abs() < 1e-10);
        }
        assert!((yt - oracle).amax() < 1e-10);
        let rank1 = a.column(0) * a.column(0).transpose();
        assert!(matches!(make_true_unifrac(&rank1, &seed), Err(KprError::Domain(_))));
    }

    #[test]
    fn edge_truth_examples() {
        // orthonormal columns: e1, e2, e3 scaled
        let mut x = DMatrix::zeros(5, 3);
        x[(0, 0)] = 3.0;
        x[(1, 1)] = 2.0;
        x[(2, 2)] = 1.0;
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let (b, yt) = make_true_edge(&x, &y).unwrap();
        assert!((b - DVector::from_vec(vec![1.0 / 3.0, 1.0, 0.0])).amax() < 1e-12);
        assert!((yt - DVector::from_vec(vec![1.0, 2.0, 0.0, 0.0, 0.0])).amax() < 1e-12);
        let in_span = DVector::from_vec(vec![0.5, -1.0, 0.0, 0.0, 0.0]);
        let (b, _) = make_true_edge(&x, &in_span).unwrap();
        assert!((&x * b - in_span).amax() < 1e-9);
    }

    #[test]
    fn cell_seeds_differ_by_coordinate() {
        let base = cell_seed(1, Scenario::Dpcoa, 0.5, 0.0, Some(4), 0);
        assert_ne!(base, cell_seed(1, Scenario::Dpcoa, 0.5, 0.0, Some(4), 1));
        assert_ne!(base, cell_seed(1, Scenario::Unifrac, 0.5, 0.0, Some(4), 0));
        assert_ne!(base, cell_seed(1, Scenario::Dpcoa, 0.5, 0.25, Some(4), 0));
        assert_ne!(base, cell_seed(2, Scenario::Dpcoa, 0.5, 0.0, Some(4), 0));
        assert_eq!(base, cell_seed(1, Scenario::Dpcoa, 0.5, 0.0, Some(4), 0));
    }

    #[test]
    fn smoke_run_and_determinism() {
        let cfg = ScenarioConfig {
            r2_grid: vec![0.5],
            perturbation_levels: vec![0.0],
            replications: 1,
            folds: 3,
            ..ScenarioConfig::default()
        };
        let data = DataBundle::synthetic(Scenario::Dpcoa, 10, 6, 0.1, 1).unwrap();
        let recs = run_scenario(&cfg, &data).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.psse_or_hpsse.is_finite() && r.esse.unwrap().is_finite()));
        assert_eq!(recs, run_scenario(&cfg, &data).unwrap());
    }

    #[test]
    fn noise_free_kpr_recovers_signal() {
        let cfg = ScenarioConfig {
            r2_grid: vec![0.5],
            perturbation_levels: vec![0.0],
            replications: 1,
            folds: 5,
            tuning_rule: TuningRule::CvMin,
            noise_free: true,
            ..ScenarioConfig::default()
        };
        let data = DataBundle::synthetic(Scenario::Dpcoa, 30, 8, 0.1, 2).unwrap();
        let recs = run_scenario(&cfg, &data).unwrap();
        let kpr = recs.iter().find(|r| r.method == SimMethod::Kpr).unwrap();
        assert!(kpr.psse_or_hpsse <= 1e-6, "psse {}", kpr.psse_or_hpsse);
    }

    #[test]
    fn metrics_match_recomputation() {
        let cfg = ScenarioConfig {
            scenario: Scenario::Edge,
            r2_grid: vec![0.5],
            perturbation_levels: vec![0.25],
            replications: 1,
            folds: 3,
            ..ScenarioConfig::default()
        };
        let data = DataBundle::synthetic(Scenario::Edge, 12, 6, 0.1, 3).unwrap();
        let truth = make_truth(&data, None).unwrap();
        let cell = Cell {
            r2: 0.5,
            perturbation: 0.25,
            sparsity: None,
            replication: 0,
        };
        let h = data.h.as_ref().unwrap();
        for o in run_cell(&cfg, &data, &truth, cell).unwrap() {
            let r = &o.y_hat - &truth.y;
            assert!((o.record.psse_or_hpsse - r.dot(&(h * &r))).abs() <= 1e-12 * (1.0 + o.record.psse_or_hpsse));
            let e = (&o.beta - truth.beta.as_ref().unwrap()).norm_squared();
            assert!((o.record.esse.unwrap() - e).abs() <= 1e-12 * (1.0 + e));
            assert!((&data.x * &o.beta - &o.y_hat).amax() < 1e-12);
        }
    }

    #[test]
    fn config_toml_round_trip_and_errors() {
        let cfg = ScenarioConfig::from_toml_str("scenario = \"unifrac\"\nr2_grid = [0.3]\nreplications = 2\n").unwrap();
        assert_eq!(cfg.scenario, Scenario::Unifrac);
        assert_eq!(cfg.folds, 10);
        assert_eq!(ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        let err = ScenarioConfig::from_toml_str("scenario = \"dpcoa\"\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, KprError::Parse { line: 2, .. }), "{err:?}");
        assert!(matches!(ScenarioConfig::from_toml_str("r2_grid = [1.5]"), Err(KprError::Domain(_))));
    }

    #[test]
    fn synthetic_tree_is_ultrametric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tree = parse_newick(&random_ultrametric_newick(9, &mut rng)).unwrap();
        assert_eq!(tree.n_leaves(), 9);
        let nodes = tree.nodes();
        let depth = |mut i: usize| {
            let mut d = 0.0;
            while let Some(p) = nodes[i].parent {
                d += nodes[i].length;
                i = p;
            }
            d
        };
        let leaves: Vec<usize> = (0..nodes.len()).filter(|&i| tree.is_leaf(i)).collect();
        let d0 = depth(leaves[0]);
        assert!(leaves.iter().all(|&l| (depth(l) - d0).abs() < 1e-9 * d0.max(1.0)));
        let table = tree_compositions(&tree, 5, 0.3, &mut rng).unwrap();
        for i in 0..5 {
            assert!((table.values().row(i).sum() - 1.0).abs() < 1e-12);
        }
    }
}
