//! Compiles the windowed CNN that keeps per-packet tree indexes in flow
//! state, then replays the test packets through the stateful simulator.

use matnet::harness::experiment::Splits;
use matnet::harness::{run_experiment, ExperimentConfig};
use matnet::sim::run_stream;

fn main() -> anyhow::Result<()> {
    let config = ExperimentConfig {
        model: "zoo:cnn_l".into(),
        ..ExperimentConfig::default()
    };
    let (exp, build, report) = run_experiment(&config)?;
    let layout = build.resources.flow_layout.as_ref().expect("stream model");
    for f in &layout.fields {
        println!("flow field {:<16} {:>3} bits", f.name, f.bits);
    }
    println!("{} bits per flow", layout.bits_per_flow());

    let Splits::Flows { packets, .. } = &exp.splits else { unreachable!() };
    let out = run_stream(&build.program, &packets[2], false)?;
    println!("{} packets -> {} decisions", packets[2].len(), out.decisions.len());
    for d in out.decisions.iter().take(5) {
        println!("  flow {} packet {}: class {} after {} lookups", d.flow_id, d.packet_index, d.decision, d.lookups);
    }
    print!("{}", report.to_text());
    Ok(())
}
