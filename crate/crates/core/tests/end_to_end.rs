use matnet::harness::experiment::Splits;
use matnet::harness::{run_experiment, ExperimentConfig};
use matnet::model::Head;
use matnet::pipeline::PipelineProgram;
use matnet::sim::{load_packets, run_stream, write_packets_jsonl};

fn zoo(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        model: format!("zoo:{name}"),
        ..ExperimentConfig::default()
    }
}

#[test]
fn stream_program_survives_json_and_packet_files() {
    let (exp, build, report) = run_experiment(&zoo("cnn_l")).unwrap();
    assert!(report.agreement > 0.9, "agreement {}", report.agreement);
    let Splits::Flows { packets, windows } = &exp.splits else { panic!("cnn_l reads packets") };

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.jsonl");
    write_packets_jsonl(&path, &packets[2]).unwrap();
    let reloaded = load_packets(&path).unwrap();
    let program = PipelineProgram::from_json(&build.program.to_json().unwrap()).unwrap();

    let a = run_stream(&build.program, &packets[2], false).unwrap();
    let b = run_stream(&program, &reloaded, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.decisions.len(), windows[2].rows.len());
    // One decision per packet once the window is full.
    for d in &a.decisions {
        assert!(d.packet_index >= 8, "{} decided at packet {}", d.flow_id, d.packet_index);
    }
}

#[test]
fn recurrent_model_keeps_indexes_in_flow_state() {
    let (_, build, report) = run_experiment(&zoo("rnn_b")).unwrap();
    let layout = build.resources.flow_layout.as_ref().unwrap();
    assert_eq!(layout.bits_per_flow(), 48);
    assert!(report.agreement > 0.85, "agreement {}", report.agreement);
}

#[test]
fn autoencoder_flags_scores_above_its_threshold() {
    let (_, build, report) = run_experiment(&zoo("autoencoder")).unwrap();
    assert_eq!(build.program.head, Head::Autoencoder);
    let t = build.program.threshold_raw.unwrap();
    let max = build.program.output_q[0].max_raw();
    assert!(t < max, "threshold {t} must leave saturated scores anomalous");
    assert!(report.auroc.unwrap() > 0.85);
    assert_eq!(report.pipeline.per_class.len(), 2);
}

#[test]
fn saved_build_reloads_identically() {
    let (_, build, _) = run_experiment(&zoo("mlp_b")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = build.save(dir.path()).unwrap();
    assert!(written.len() >= 8);
    let text = std::fs::read_to_string(dir.path().join("program.json")).unwrap();
    assert_eq!(PipelineProgram::from_json(&text).unwrap(), build.program);
}
