//! Describes a small network in the model language, trains it on Gaussian
//! blobs and compiles it with a hand-picked key width.

use matnet::harness::dsl::parse_model_dsl;
use matnet::harness::{run_experiment, ExperimentConfig};

const MODEL: &str = "
model tiny {
  fusion basic;
  partition {
    input x[6];
    segment 3;
  }
  map hidden { depth 7; min_leaf 2; fc 8; relu; }
  map out { depth 7; min_leaf 2; fc 3; }
  reduce { sum; }
}
";

fn main() -> anyhow::Result<()> {
    let spec = parse_model_dsl(MODEL)?;
    println!("{} map blocks, skeleton with {} layers", spec.maps.len(), spec.skeleton()?.layers.len());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("tiny.dsl");
    std::fs::write(&path, MODEL)?;
    let mut config = ExperimentConfig {
        model: path.display().to_string(),
        ..ExperimentConfig::default()
    };
    config.data.samples = 2000;
    config.quant.key_bits = 6;
    let (_, build, report) = run_experiment(&config)?;
    println!(
        "lookups {} -> {}, {} stages, macro-F1 {:.3} (reference {:.3})",
        report.fusion.lookups_before,
        report.fusion.lookups_after,
        build.program.stages_used(),
        report.pipeline.macro_f1,
        report.reference.macro_f1
    );
    Ok(())
}
