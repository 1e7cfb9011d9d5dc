//! A few replications of the DPCoA scenario on a synthetic tree, summarized per cell.

use kpr::simulation::{run_scenario, summarize, DataBundle, Scenario, ScenarioConfig};

pub fn run_example() -> kpr::Result<()> {
    let config = ScenarioConfig::from_toml_str(
        r#"
        scenario = "dpcoa"
        r2_grid = [0.5]
        perturbation_levels = [0.0]
        replications = 3
        samples = 30
        taxa = 12
        folds = 5
        seed = 2
        "#,
    )?;
    let data = DataBundle::synthetic(Scenario::Dpcoa, config.samples, config.taxa, config.dropout, config.seed)?;
    let records = run_scenario(&config, &data)?;
    assert_eq!(records.len(), 3 * 3);
    println!("{:<6} {:>10} {:>10}", "method", "ESSE", "PSSE");
    for row in summarize(&records) {
        println!("{:<6} {:>10.3} {:>10.3}", row.method.as_str(), row.esse_mean.unwrap_or(f64::NAN), row.pred_mean);
    }
    Ok(())
}

fn main() -> kpr::Result<()> {
    run_example()
}
