//! Trains, compiles and evaluates every bundled model on synthetic data and
//! prints one summary line per model.

use matnet::harness::experiment::ZOO;
use matnet::harness::{run_experiment, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    for (name, _) in ZOO {
        let config = ExperimentConfig {
            model: format!("zoo:{name}"),
            ..ExperimentConfig::default()
        };
        let (_, build, report) = run_experiment(&config)?;
        println!(
            "{name:<12} lookups {:>3} -> {:<3} stages {:>2}  macro-F1 {:.3} (ref {:.3})  agreement {:.3}{}  flow bits {}",
            report.fusion.lookups_before,
            report.fusion.lookups_after,
            build.program.stages_used(),
            report.pipeline.macro_f1,
            report.reference.macro_f1,
            report.agreement,
            report.auroc.map(|a| format!("  AUROC {a:.3}")).unwrap_or_default(),
            report.resources.stateful_bits_per_flow,
        );
    }
    Ok(())
}
