//! Schedules the same network under shrinking stage budgets and prints the
//! per-stage resource table for the tightest budget that still fits.

use matnet::harness::{run_experiment, ExperimentConfig};
use matnet::pipeline::{account, schedule, ResourceModel};

fn main() -> anyhow::Result<()> {
    let config = ExperimentConfig {
        model: "zoo:cnn_b".into(),
        ..ExperimentConfig::default()
    };
    let (_, build, _) = run_experiment(&config)?;
    let mut tightest = None;
    for stages in (1..=4).rev() {
        let budget = ResourceModel { stages, ..ResourceModel::default() };
        match schedule(&build.compiled, &budget, None) {
            Ok(p) => {
                println!("{stages} stages: fits in {}", p.stages_used());
                tightest = Some((p, budget));
            }
            Err(e) => println!("{stages} stages: {e}"),
        }
    }
    let narrow = ResourceModel { sram_bits_per_stage: 1 << 12, ..ResourceModel::default() };
    if let Err(e) = schedule(&build.compiled, &narrow, None) {
        println!("4 Kb of SRAM: {e}");
    }
    if let Some((p, budget)) = tightest {
        print!("{}", account(&p, &budget).to_table());
    }
    Ok(())
}
