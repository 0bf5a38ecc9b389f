//! Trains the autoencoder on benign flows only and scores the test windows by
//! reconstruction error computed inside the pipeline.

use matnet::harness::{run_experiment, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let config = ExperimentConfig {
        model: "zoo:autoencoder".into(),
        ..ExperimentConfig::default()
    };
    let (_, build, report) = run_experiment(&config)?;
    println!(
        "threshold: reference {:.4}, pipeline raw {:?}",
        build.reference_threshold.unwrap_or(f64::NAN),
        build.program.threshold_raw
    );
    println!(
        "AUROC pipeline {:.4} reference {:.4}",
        report.auroc.unwrap_or(f64::NAN),
        report.reference_auroc.unwrap_or(f64::NAN)
    );
    print!("{}", report.to_text());
    Ok(())
}
