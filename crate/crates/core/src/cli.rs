//! Command-line front end: `kpr kernel|pcoa|clr|fit|cv|simulate`.
//!
//! Every CSV written here starts with `#` comment lines that record the subcommand and
//! its resolved settings; the loaders skip them.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compositional::{
    aitchison_covariance, clr_transform, default_zero_replacement, replace_zeros, variation_matrix,
};
use crate::error::{KprError, Result};
use crate::estimators::{self, CompositionalDesign, FitResult, Method};
use crate::kernels::{
    double_center, gram_kernel, pcoa_coordinates, psd_project, squared_euclidean_distances, Kernel, Provenance,
    PSD_TOL,
};
use crate::matio::{
    self, center_columns, format_real, load_abundance, load_response, load_square, AbundanceTable, ResponseVector,
};
use crate::phylo::{edge_kernel, parse_newick, patristic_distances, unifrac_unweighted, PhyloTree};
use crate::simulation::{run_scenario, summarize, synthetic_response, DataBundle, Scenario, ScenarioConfig};
use crate::tuning::{self, CvMethod, TuningRule};

#[derive(Debug, Parser)]
#[command(name = "kpr", version, about = "Kernel-penalized regression for structured predictors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a distance or kernel matrix
    Kernel(KernelArgs),
    /// Principal coordinates of a kernel or squared-distance matrix
    Pcoa(PcoaArgs),
    /// Centered log-ratio transform of a compositional table
    Clr(ClrArgs),
    /// Fit one estimator at a fixed penalty
    Fit(FitArgs),
    /// Cross-validate an estimator over a penalty grid
    Cv(CvArgs),
    /// Run a Monte-Carlo scenario
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelFrom {
    Euclidean,
    Gram,
    DoubleCenter,
    Unifrac,
    Patristic,
    Edge,
    Aitchison,
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    #[arg(long, value_enum)]
    pub from: KernelFrom,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// Squared-distance matrix (for double-center)
    #[arg(long)]
    pub distance: Option<PathBuf>,
    /// Taxon kernel CSV, or `identity`
    #[arg(long = "q-kernel", alias = "q")]
    pub q_kernel: Option<String>,
    /// Square the patristic distances
    #[arg(long)]
    pub squared: bool,
    #[arg(long = "zero-replacement")]
    pub zero_replacement: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PcoaArgs {
    #[arg(long, conflicts_with = "distance", required_unless_present = "distance")]
    pub kernel: Option<PathBuf>,
    #[arg(long)]
    pub distance: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub axes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClrArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long = "zero-replacement")]
    pub zero_replacement: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the variation matrix T
    #[arg(long = "variation-out")]
    pub variation_out: Option<PathBuf>,
    /// Also write the log-ratio covariance C
    #[arg(long = "covariance-out")]
    pub covariance_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub method: Method,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub response: PathBuf,
    /// Taxon kernel CSV, or `identity`
    #[arg(long = "q-kernel")]
    pub q_kernel: Option<String>,
    #[arg(long = "h-kernel")]
    pub h_kernel: Option<PathBuf>,
    #[arg(long = "zero-replacement")]
    pub zero_replacement: Option<f64>,
    /// Use the table as given instead of column-centering it
    #[arg(long = "no-center")]
    pub no_center: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of components (pcr, dpcr)
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated descending grid; the default is scaled to the design
    #[arg(long = "lambda-grid")]
    pub lambda_grid: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value = "1se")]
    pub rule: TuningRule,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight held-out errors by the H kernel
    #[arg(long)]
    pub weighted: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML scenario file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long = "r2-grid")]
    pub r2_grid: Option<String>,
    #[arg(long)]
    pub perturbation: Option<String>,
    #[arg(long)]
    pub sparsity: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rule: Option<TuningRule>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long = "lambda-grid")]
    pub lambda_grid: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub taxa: Option<usize>,
    /// Observed abundance table (with --tree); synthetic data otherwise
    #[arg(long, requires = "tree")]
    pub table: Option<PathBuf>,
    #[arg(long, requires = "table")]
    pub tree: Option<PathBuf>,
    /// Seed response for the true signal; synthetic if absent
    #[arg(long, requires = "table")]
    pub response: Option<PathBuf>,
    /// Record file (one JSON object per line)
    #[arg(long)]
    pub out: PathBuf,
    /// Summary CSV; defaults to `<out stem>.summary.csv`
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Kernel(a) => cmd_kernel(&a),
        Command::Pcoa(a) => cmd_pcoa(&a),
        Command::Clr(a) => cmd_clr(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Cv(a) => cmd_cv(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    }
}

/// Resolved settings echoed into output headers.
struct Echo(Vec<String>);

impl Echo {
    fn new(subcommand: &str) -> Self {
        Echo(vec![format!("kpr {subcommand}")])
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.0.push(format!("{key} = {value}"));
        self
    }

    fn path(&mut self, key: &str, value: &Option<PathBuf>) -> &mut Self {
        if let Some(p) = value {
            self.set(key, p.display());
        }
        self
    }

    fn lines(&self) -> &[String] {
        &self.0
    }
}

fn need<'a, T>(v: &'a Option<T>, flag: &str, why: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| KprError::Usage(format!("{why} requires --{flag}")))
}

fn read_tree(path: &Path) -> Result<PhyloTree> {
    let text = fs::read_to_string(path).map_err(|e| KprError::io(path, e))?;
    parse_newick(&text)
}

fn resolve_zero_replacement(x: &AbundanceTable, given: Option<f64>) -> f64 {
    // without zeros the value is never used
    given.or_else(|| default_zero_replacement(x)).unwrap_or(0.0)
}

/// Taxon kernel from a CSV path (reordered to `taxa`) or the literal `identity`.
fn load_q(spec: &str, taxa: &[String]) -> Result<Kernel> {
    if spec == "identity" {
        return Kernel::identity(taxa.to_vec());
    }
    Kernel::from_square(load_square(spec)?, Provenance::Custom).reordered(taxa)
}

fn load_h(path: &Path, samples: &[String]) -> Result<Kernel> {
    Kernel::from_square(load_square(path)?, Provenance::Custom).reordered(samples)
}

fn cmd_kernel(a: &KernelArgs) -> Result<()> {
    let from = a.from.to_possible_value().map(|v| v.get_name().to_owned()).unwrap_or_default();
    let mut echo = Echo::new("kernel");
    echo.set("from", &from)
        .path("table", &a.table)
        .path("tree", &a.tree)
        .path("distance", &a.distance);
    let what = format!("--from {from}");
    let (ids, values, provenance): (Vec<String>, DMatrix<f64>, String) = match a.from {
        KernelFrom::Euclidean => {
            let x = load_abundance(need(&a.table, "table", &what)?)?;
            let d = squared_euclidean_distances(&x);
            (d.ids().to_vec(), d.values().clone(), "squared_euclidean_distance".into())
        }
        KernelFrom::Gram => {
            let x = load_abundance(need(&a.table, "table", &what)?)?;
            let spec = need(&a.q_kernel, "q-kernel", &what)?;
            echo.set("q_kernel", spec);
            let k = gram_kernel(&x, &load_q(spec, x.taxon_ids())?)?;
            (k.ids().to_vec(), k.values().clone(), k.provenance().to_string())
        }
        KernelFrom::DoubleCenter => {
            let d = load_square(need(&a.distance, "distance", &what)?)?;
            let k = double_center(&d)?;
            (k.ids().to_vec(), k.values().clone(), k.provenance().to_string())
        }
        KernelFrom::Unifrac => {
            let tree = read_tree(need(&a.tree, "tree", &what)?)?;
            let x = load_abundance(need(&a.table, "table", &what)?)?;
            let d = unifrac_unweighted(&tree, &x)?;
            (d.ids().to_vec(), d.values().clone(), "unifrac_unweighted".into())
        }
        KernelFrom::Patristic => {
            let tree = read_tree(need(&a.tree, "tree", &what)?)?;
            echo.set("squared", a.squared);
            let d = patristic_distances(&tree, a.squared);
            let name = if a.squared { "squared_patristic_distance" } else { "patristic_distance" };
            (d.ids().to_vec(), d.values().clone(), name.into())
        }
        KernelFrom::Edge => {
            let tree = read_tree(need(&a.tree, "tree", &what)?)?;
            let x = load_abundance(need(&a.table, "table", &what)?)?;
            let k = edge_kernel(&tree, &close_rows(&x)?)?;
            (k.ids().to_vec(), k.values().clone(), k.provenance().to_string())
        }
        KernelFrom::Aitchison => {
            let x = load_abundance(need(&a.table, "table", &what)?)?;
            let zr = resolve_zero_replacement(&x, a.zero_replacement);
            echo.set("zero_replacement", format_real(zr));
            let c = aitchison_covariance(&variation_matrix(&replace_zeros(&x, zr)?)?)?;
            (c.ids().to_vec(), c.values().clone(), c.provenance().to_string())
        }
    };
    echo.set("provenance", provenance);
    matio::save_square(&a.out, &ids, &values, echo.lines())
}

fn close_rows(x: &AbundanceTable) -> Result<AbundanceTable> {
    let mut m = x.values().clone();
    for (i, mut row) in m.row_iter_mut().enumerate() {
        let s = row.sum();
        if !(s > 0.0) || row.iter().any(|v| *v < 0.0) {
            return Err(KprError::Domain(format!(
                "sample '{}' is not a nonnegative table row with positive total",
                x.sample_ids()[i]
            )));
        }
        row /= s;
    }
    x.with_values(m)
}

fn cmd_pcoa(a: &PcoaArgs) -> Result<()> {
    let mut echo = Echo::new("pcoa");
    echo.path("kernel", &a.kernel).path("distance", &a.distance).set("axes", a.axes);
    let kernel = match (&a.kernel, &a.distance) {
        (Some(k), _) => Kernel::from_square(load_square(k)?, Provenance::Custom),
        (None, Some(d)) => {
            let centered = double_center(&load_square(d)?)?;
            psd_project(&centered.as_square(), PSD_TOL, Provenance::DoubleCentered)?
        }
        (None, None) => return Err(KprError::Usage("pcoa requires --kernel or --distance".into())),
    };
    let coords = pcoa_coordinates(&kernel, a.axes)?;
    let axes: Vec<String> = (1..=a.axes).map(|i| format!("axis{i}")).collect();
    matio::save_matrix(&a.out, kernel.ids(), &axes, &coords, echo.lines())
}

fn cmd_clr(a: &ClrArgs) -> Result<()> {
    let x = load_abundance(&a.table)?;
    let zr = resolve_zero_replacement(&x, a.zero_replacement);
    let mut echo = Echo::new("clr");
    echo.set("table", a.table.display()).set("zero_replacement", format_real(zr));
    let clr = clr_transform(&x, zr)?;
    matio::save_abundance(&a.out, &clr, echo.lines())?;
    if a.variation_out.is_some() || a.covariance_out.is_some() {
        let t = variation_matrix(&replace_zeros(&x, zr)?)?;
        if let Some(p) = &a.variation_out {
            matio::save_square(p, t.taxon_ids(), t.values(), echo.lines())?;
        }
        if let Some(p) = &a.covariance_out {
            let c = aitchison_covariance(&t)?;
            matio::save_square(p, c.ids(), c.values(), echo.lines())?;
        }
    }
    Ok(())
}

/// Design, response and kernels for `fit` and `cv`, aligned by id.
struct Model {
    x: AbundanceTable,
    y: ResponseVector,
    q: Option<Kernel>,
    h: Option<Kernel>,
}

fn needs_q(m: Method) -> bool {
    matches!(m, Method::Gridge | Method::Dpcr | Method::Dpcoa | Method::Kpr2)
}

fn needs_h(m: Method) -> bool {
    matches!(m, Method::Franklin | Method::Kpr2)
}

fn load_model(a: &ModelArgs, echo: &mut Echo) -> Result<Model> {
    echo.set("method", a.method)
        .set("table", a.table.display())
        .set("response", a.response.display());
    let raw = load_abundance(&a.table)?;
    let y = load_response(&a.response)?.aligned_to(&raw)?;
    let what = format!("method {}", a.method);
    let q = if needs_q(a.method) {
        let spec = need(&a.q_kernel, "q-kernel", &what)?;
        echo.set("q_kernel", spec);
        Some(load_q(spec, raw.taxon_ids())?)
    } else {
        None
    };
    let h = match (&a.h_kernel, needs_h(a.method)) {
        (Some(p), _) => {
            echo.set("h_kernel", p.display());
            Some(load_h(p, raw.sample_ids())?)
        }
        (None, true) => return Err(KprError::Usage(format!("{what} requires --h-kernel"))),
        (None, false) => None,
    };
    let x = if a.method == Method::CompKpr {
        let zr = resolve_zero_replacement(&raw, a.zero_replacement);
        echo.set("zero_replacement", format_real(zr));
        CompositionalDesign::prepare(&raw, zr)?.design
    } else if a.no_center {
        echo.set("center", false);
        raw
    } else {
        echo.set("center", true);
        center_columns(&raw)
    };
    Ok(Model { x, y, q, h })
}

/// `comp-kpr` tunes and fits generalized ridge on the CLR design with `Q = C`.
fn compositional_q(a: &ModelArgs, m: &Model) -> Result<Option<DMatrix<f64>>> {
    if a.method != Method::CompKpr {
        return Ok(None);
    }
    let raw = load_abundance(&a.table)?;
    let zr = resolve_zero_replacement(&raw, a.zero_replacement);
    let prepared = CompositionalDesign::prepare(&raw, zr)?;
    debug_assert_eq!(prepared.design.values(), m.x.values());
    Ok(Some(prepared.covariance.into_values()))
}

#[derive(Serialize)]
struct Coefficient<'a> {
    id: &'a str,
    value: f64,
}

#[derive(Serialize)]
struct FitRecord<'a> {
    method: Method,
    lambda: f64,
    /// `taxa` for coefficients on X, `xl` for coefficients on XL (dpcoa, dpcr).
    coordinates: &'static str,
    beta: Vec<Coefficient<'a>>,
    gamma: Option<Vec<Coefficient<'a>>>,
    config: &'a [String],
}

fn coefficients<'a>(ids: &'a [String], v: &DVector<f64>) -> Vec<Coefficient<'a>> {
    ids.iter().zip(v.iter()).map(|(id, value)| Coefficient { id, value: *value }).collect()
}

fn fit_record<'a>(fit: &FitResult, m: &'a Model, config: &'a [String]) -> FitRecord<'a> {
    FitRecord {
        method: fit.method,
        lambda: fit.lambda,
        coordinates: if matches!(fit.method, Method::Dpcoa | Method::Dpcr) { "xl" } else { "taxa" },
        beta: coefficients(m.x.taxon_ids(), &fit.beta),
        gamma: fit.gamma.as_ref().map(|g| coefficients(m.y.sample_ids(), g)),
        config,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| KprError::Schema(format!("cannot serialize output: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| KprError::io(path, e))
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let mut echo = Echo::new("fit");
    let m = load_model(&a.model, &mut echo)?;
    let method = a.model.method;
    let (x, y) = (m.x.values(), m.y.values());
    let q = m.q.as_ref().map(|k| k.values());
    let h = m.h.as_ref().map(|k| k.values());
    let what = format!("method {method}");
    let fit = match method {
        Method::Pcr | Method::Dpcr => {
            let k = *need(&a.components, "components", &what)?;
            echo.set("components", k);
            if method == Method::Pcr {
                estimators::pcr_estimate(x, y, k)?
            } else {
                estimators::dpcr_estimate(x, y, q.expect("checked"), k)?
            }
        }
        _ => {
            let lambda = *need(&a.lambda, "lambda", &what)?;
            echo.set("lambda", format_real(lambda));
            match method {
                Method::Ridge => estimators::ridge_estimate(x, y, lambda)?,
                Method::Gridge => estimators::gridge_estimate(x, y, q.expect("checked"), lambda)?,
                Method::Dpcoa => estimators::dpcoa_estimate(x, y, q.expect("checked"), lambda)?,
                Method::Franklin => estimators::franklin_estimate(x, y, h.expect("checked"), lambda)?,
                Method::Kpr2 => estimators::kpr_two_kernel(x, y, q.expect("checked"), h.expect("checked"), lambda)?,
                Method::Lasso => estimators::lasso_cd(x, y, lambda)?,
                Method::CompKpr => {
                    let c = compositional_q(&a.model, &m)?.expect("comp-kpr");
                    let mut fit = estimators::gridge_estimate(x, y, &c, lambda)?;
                    fit.method = Method::CompKpr;
                    fit
                }
                Method::Pcr | Method::Dpcr => unreachable!(),
            }
        }
    };
    write_json(&a.out, &fit_record(&fit, &m, echo.lines()))
}

fn parse_list(flag: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| KprError::Usage(format!("--{flag}: '{s}' is not a number")))
        })
        .collect()
}

#[derive(Serialize)]
struct CvRecord<'a> {
    rule: TuningRule,
    selected_lambda: f64,
    cv: &'a tuning::CvResult,
    fit: FitRecord<'a>,
}

fn cmd_cv(a: &CvArgs) -> Result<()> {
    let mut echo = Echo::new("cv");
    let m = load_model(&a.model, &mut echo)?;
    let method = a.model.method;
    let (x, y) = (m.x.values(), m.y.values());
    let c = compositional_q(&a.model, &m)?;
    let q = m.q.as_ref().map(|k| k.values());
    let h = m.h.as_ref().map(|k| k.values());
    let cv_method = match method {
        Method::Ridge => CvMethod::Ridge,
        Method::Lasso => CvMethod::Lasso,
        Method::Gridge => CvMethod::Gridge { q: q.expect("checked") },
        Method::Dpcoa => CvMethod::Dpcoa { q: q.expect("checked") },
        Method::Franklin => CvMethod::Franklin { h: h.expect("checked") },
        Method::Kpr2 => CvMethod::Kpr2 {
            q: q.expect("checked"),
            h: h.expect("checked"),
        },
        Method::CompKpr => CvMethod::Gridge {
            q: c.as_ref().expect("comp-kpr"),
        },
        Method::Pcr | Method::Dpcr => {
            return Err(KprError::Usage(format!("cv needs a penalized method; {method} is truncated")));
        }
    };
    let weight = if a.weighted {
        Some(h.ok_or_else(|| KprError::Usage("--weighted requires --h-kernel".into()))?)
    } else {
        None
    };
    let grid = match &a.lambda_grid {
        Some(text) => parse_list("lambda-grid", text)?,
        None => tuning::default_grid_for(&cv_method, x, y)?,
    };
    echo.set("folds", a.folds)
        .set("rule", a.rule)
        .set("seed", a.seed)
        .set("weighted", a.weighted)
        .set("lambda_grid", grid.iter().map(|l| format_real(*l)).collect::<Vec<_>>().join(","));
    let cv = tuning::cross_validate(&cv_method, x, y, &grid, a.folds, a.seed, weight)?;
    let lambda = cv.selected(a.rule);
    let mut fit = cv_method.fit(x, y, lambda)?;
    fit.method = method;

    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "lambda,mean_error,se_error");
    for i in 0..grid.len() {
        let _ = writeln!(
            stdout,
            "{},{},{}",
            format_real(cv.lambda_grid[i]),
            format_real(cv.mean_error[i]),
            format_real(cv.se_error[i])
        );
    }
    let record = CvRecord {
        rule: a.rule,
        selected_lambda: lambda,
        cv: &cv,
        fit: fit_record(&fit, &m, echo.lines()),
    };
    write_json(&a.out, &record)
}

fn resolve_config(a: &SimulateArgs) -> Result<ScenarioConfig> {
    let mut cfg = match &a.config {
        Some(p) => ScenarioConfig::from_file(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = a.scenario {
        cfg.scenario = s;
    }
    if let Some(t) = &a.r2_grid {
        cfg.r2_grid = parse_list("r2-grid", t)?;
    }
    if let Some(t) = &a.perturbation {
        cfg.perturbation_levels = parse_list("perturbation", t)?;
    }
    if let Some(t) = &a.sparsity {
        cfg.sparsity_levels = parse_list("sparsity", t)?;
    }
    if let Some(t) = &a.lambda_grid {
        cfg.lambda_grid = Some(parse_list("lambda-grid", t)?);
    }
    macro_rules! take {
        ($flag:ident => $field:ident) => {
            if let Some(v) = a.$flag {
                cfg.$field = v;
            }
        };
    }
    take!(reps => replications);
    take!(seed => seed);
    take!(rule => tuning_rule);
    take!(folds => folds);
    take!(samples => samples);
    take!(taxa => taxa);
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summary_path(a: &SimulateArgs) -> PathBuf {
    a.summary.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map_or("records".into(), |s| s.to_string_lossy().into_owned());
        a.out.with_file_name(format!("{stem}.summary.csv"))
    })
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let data = match (&a.table, &a.tree) {
        (Some(table), Some(tree)) => {
            let x = load_abundance(table)?;
            let tree = read_tree(tree)?;
            let y_seed = match &a.response {
                Some(p) => load_response(p)?.aligned_to(&x)?.values().clone(),
                None => synthetic_response(&x, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
            };
            DataBundle::from_tree(cfg.scenario, &tree, &x, &y_seed)?
        }
        _ => DataBundle::synthetic(cfg.scenario, cfg.samples, cfg.taxa, cfg.dropout, cfg.seed)?,
    };
    let records = run_scenario(&cfg, &data)?;
    matio::save_records(&records, &a.out)?;

    let mut echo = Echo::new("simulate");
    echo.path("table", &a.table).path("tree", &a.tree).path("response", &a.response);
    echo.0.extend(cfg.to_toml_string().lines().map(str::to_string));
    write_summary(&summary_path(a), &records, cfg.scenario, echo.lines())
}

fn write_summary(
    path: &Path,
    records: &[crate::simulation::SimulationRecord],
    scenario: Scenario,
    comments: &[String],
) -> Result<()> {
    let opt = |v: Option<f64>| v.map(format_real).unwrap_or_default();
    let mut text = String::new();
    for c in comments {
        text.push_str(&format!("# {c}\n"));
    }
    let metric = scenario.prediction_metric();
    text.push_str(&format!(
        "scenario,r2,perturbation,sparsity,method,replications,esse_mean,esse_se,{metric}_mean,{metric}_se\n"
    ));
    for r in summarize(records) {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.scenario,
            format_real(r.r2),
            format_real(r.perturbation),
            r.sparsity.map(|s| s.to_string()).unwrap_or_default(),
            r.method.as_str(),
            r.replications,
            opt(r.esse_mean),
            opt(r.esse_se),
            format_real(r.pred_mean),
            format_real(r.pred_se),
        ));
    }
    fs::write(path, text).map_err(|e| KprError::io(path, e))
}
