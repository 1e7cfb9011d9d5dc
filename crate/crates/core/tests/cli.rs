use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kpr::matio::{load_records, load_square};
use kpr::simulation::summarize;
use kpr::SimulationRecord;
use nalgebra::DMatrix;
use tempfile::TempDir;

const TREE: &str = "((A:1,B:1):1,(C:0.5,D:0.5):1.5);\n";
const TABLE: &str = "\
sample,A,B,C,D
s1,0.5,0.5,0,0
s2,0.2,0.3,0.4,0.1
s3,0,0.4,0.6,0
s4,0.7,0.1,0.1,0.1
s5,0.3,0.3,0.2,0.2
s6,0.1,0,0.8,0.1
";
const RESPONSE: &str = "sample,y\ns3,0.3\ns1,1.0\ns2,-0.5\ns4,2.0\ns5,0.1\ns6,-1.2\n";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t.nwk"), TREE).unwrap();
        fs::write(dir.path().join("X.csv"), TABLE).unwrap();
        fs::write(dir.path().join("y.csv"), RESPONSE).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn kpr(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_kpr")).current_dir(self.dir.path()).args(args).output().unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn unifrac_kernel_is_in_unit_range_with_header() {
    let f = Fixture::new();
    let o = f.kpr(&["kernel", "--from", "unifrac", "--tree", "t.nwk", "--table", "X.csv", "--out", "U.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(&f.path("U.csv"));
    assert!(text.starts_with("# kpr kernel\n"));
    assert!(text.contains("# provenance = unifrac_unweighted"));
    let u = load_square(f.path("U.csv")).unwrap();
    assert_eq!(u.dim(), 6);
    assert!(u.values().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn double_center_rejects_nonzero_diagonal() {
    let f = Fixture::new();
    fs::write(f.path("D.csv"), "id,a,b\na,1,2\nb,2,0\n").unwrap();
    let o = f.kpr(&["kernel", "--from", "double-center", "--distance", "D.csv", "--out", "K.csv"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("domain error"));
}

#[test]
fn gram_with_identity_is_xxt() {
    let f = Fixture::new();
    let o = f.kpr(&["kernel", "--from", "gram", "--q", "identity", "--table", "X.csv", "--out", "G.csv"]);
    assert_eq!(code(&o), 0);
    let g = load_square(f.path("G.csv")).unwrap();
    let x = kpr::matio::load_abundance(f.path("X.csv")).unwrap();
    let xxt: DMatrix<f64> = x.values() * x.values().transpose();
    assert!((g.values() - xxt).amax() < 1e-15);
}

#[test]
fn kernel_variants_run() {
    let f = Fixture::new();
    for args in [
        vec!["--from", "euclidean", "--table", "X.csv"],
        vec!["--from", "patristic", "--tree", "t.nwk", "--squared"],
        vec!["--from", "edge", "--tree", "t.nwk", "--table", "X.csv"],
        vec!["--from", "aitchison", "--table", "X.csv"],
    ] {
        let mut full = vec!["kernel"];
        full.extend(args.iter());
        full.extend(["--out", "K.csv"]);
        let o = f.kpr(&full);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(load_square(f.path("K.csv")).is_ok());
    }
    // a missing input is a usage error
    assert_eq!(code(&f.kpr(&["kernel", "--from", "unifrac", "--table", "X.csv", "--out", "K.csv"])), 2);
}

#[test]
fn pcoa_and_clr_write_tables() {
    let f = Fixture::new();
    assert_eq!(code(&f.kpr(&["kernel", "--from", "euclidean", "--table", "X.csv", "--out", "D.csv"])), 0);
    assert_eq!(code(&f.kpr(&["pcoa", "--distance", "D.csv", "--axes", "2", "--out", "P.csv"])), 0);
    let text = read(&f.path("P.csv"));
    assert!(text.lines().any(|l| l == "id,axis1,axis2"));
    let o = f.kpr(&["clr", "--table", "X.csv", "--out", "C.csv", "--covariance-out", "CC.csv"]);
    assert_eq!(code(&o), 0);
    let clr = kpr::matio::load_abundance(f.path("C.csv")).unwrap();
    for row in clr.values().row_iter() {
        assert!(row.sum().abs() < 1e-10);
    }
}

#[test]
fn ridge_fit_writes_p_coefficients_deterministically() {
    let f = Fixture::new();
    let args = ["fit", "--method", "ridge", "--table", "X.csv", "--response", "y.csv", "--lambda", "0.1", "--out", "f1.json"];
    assert_eq!(code(&f.kpr(&args)), 0);
    let mut again = args;
    again[10] = "f2.json";
    assert_eq!(code(&f.kpr(&again)), 0);
    let a = read(&f.path("f1.json"));
    assert_eq!(a, read(&f.path("f2.json")));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["method"], "ridge");
    assert_eq!(v["beta"].as_array().unwrap().len(), 4);
    assert_eq!(v["beta"][0]["id"], "A");
}

#[test]
fn fit_requires_kernels_and_known_method() {
    let f = Fixture::new();
    let o = f.kpr(&["fit", "--method", "kpr2", "--table", "X.csv", "--response", "y.csv", "--q-kernel", "identity", "--lambda", "1", "--out", "f.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--h-kernel"));
    let o = f.kpr(&["fit", "--method", "nope", "--table", "X.csv", "--response", "y.csv", "--out", "f.json"]);
    assert_eq!(code(&o), 2);
    let o = f.kpr(&["fit", "--method", "ridge", "--table", "X.csv", "--response", "y.csv", "--out", "f.json", "--unknown"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn every_method_fits() {
    let f = Fixture::new();
    assert_eq!(code(&f.kpr(&["kernel", "--from", "edge", "--tree", "t.nwk", "--table", "X.csv", "--out", "H.csv"])), 0);
    assert_eq!(code(&f.kpr(&["kernel", "--from", "aitchison", "--table", "X.csv", "--out", "Q.csv"])), 0);
    for method in ["pcr", "ridge", "gridge", "dpcr", "dpcoa", "franklin", "kpr2", "lasso", "comp-kpr"] {
        let o = f.kpr(&[
            "fit", "--method", method, "--table", "X.csv", "--response", "y.csv", "--q-kernel", "Q.csv",
            "--h-kernel", "H.csv", "--lambda", "0.05", "--components", "2", "--out", "f.json",
        ]);
        assert_eq!(code(&o), 0, "{method}: {}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_str(&read(&f.path("f.json"))).unwrap();
        assert_eq!(v["method"], method.replace('-', "_"));
    }
}

#[test]
fn cv_prints_path_and_selects_from_grid() {
    let f = Fixture::new();
    let o = f.kpr(&[
        "cv", "--method", "ridge", "--table", "X.csv", "--response", "y.csv", "--lambda-grid", "10,1,0.1,0.01",
        "--folds", "3", "--rule", "min", "--seed", "4", "--out", "cv.json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 5);
    let v: serde_json::Value = serde_json::from_str(&read(&f.path("cv.json"))).unwrap();
    let chosen = v["selected_lambda"].as_f64().unwrap();
    assert!([10.0, 1.0, 0.1, 0.01].contains(&chosen));
    assert_eq!(v["cv"]["lambda_min"].as_f64().unwrap(), chosen);
    let o = f.kpr(&["cv", "--method", "pcr", "--table", "X.csv", "--response", "y.csv", "--out", "cv.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_smoke_and_summary_reaggregation() {
    let f = Fixture::new();
    fs::write(
        f.path("sim.toml"),
        "scenario = \"dpcoa\"\nr2_grid = [0.5]\nperturbation_levels = [0.0]\nreplications = 1\nsamples = 20\ntaxa = 8\nfolds = 4\n",
    )
    .unwrap();
    let o = f.kpr(&["simulate", "--config", "sim.toml", "--seed", "5", "--out", "r.jsonl", "--summary", "s.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let records: Vec<SimulationRecord> = load_records(f.path("r.jsonl")).unwrap();
    assert!(records.len() >= 3);
    let summary = read(&f.path("s.csv"));
    assert!(summary.contains("# seed = 5"));
    // independent aggregation: each row's psse mean is the mean of its records
    let rows: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), summarize(&records).len());
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let method = cols[4];
        let vals: Vec<f64> = records.iter().filter(|r| r.method.as_str() == method).map(|r| r.psse_or_hpsse).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let reported: f64 = cols[8].parse().unwrap();
        assert!((reported - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    }
    // unknown keys in the config are schema errors
    fs::write(f.path("bad.toml"), "scenario = \"dpcoa\"\nwhatever = 1\n").unwrap();
    assert_eq!(code(&f.kpr(&["simulate", "--config", "bad.toml", "--out", "r.jsonl"])), 2);
}

#[test]
fn simulate_from_observed_table() {
    let f = Fixture::new();
    let o = f.kpr(&[
        "simulate", "--scenario", "edge", "--table", "X.csv", "--tree", "t.nwk", "--response", "y.csv", "--reps", "1",
        "--r2-grid", "0.5", "--perturbation", "0", "--folds", "3", "--out", "r.jsonl",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(f.path("r.summary.csv").exists());
    let records: Vec<SimulationRecord> = load_records(f.path("r.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
}
