use super::*;
use crate::compile::TableStrategy;

fn quick(model: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        model: model.into(),
        ..ExperimentConfig::default()
    };
    c.data.samples = 600;
    c.data.flows.flows = 60;
    c.train.epochs = 40;
    c
}

#[test]
fn every_zoo_model_parses_and_builds_a_skeleton() {
    for (name, _) in ZOO {
        let spec = load_model_spec(&format!("zoo:{name}")).unwrap();
        assert_eq!(&spec.name, name);
        spec.skeleton().unwrap();
    }
    assert!(load_model_spec("zoo:nope").is_err());
}

#[test]
fn mlp_runs_end_to_end() {
    let (_, build, report) = run_experiment(&quick("zoo:mlp_b")).unwrap();
    assert_eq!(report.samples, 90);
    assert!(report.reference.macro_f1 > 0.8, "{}", report.to_text());
    assert!(report.agreement > 0.8, "{}", report.to_text());
    assert_eq!(report.lookups_per_decision, build.program.map_count());
    assert!(report.timings_ms.contains_key("compile"));
    let s = report.pipeline.per_class.iter().map(|m| m.f1).sum::<f64>() / 3.0;
    assert!((s - report.pipeline.macro_f1).abs() < 1e-12);
}

#[test]
fn exact_wide_pipeline_agrees_with_reference() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lin.dsl");
    std::fs::write(
        &path,
        "model lin { fusion basic; partition { input x[2]; segment 1; } map out { depth 2; fc 3; } reduce { sum; } }",
    )
    .unwrap();
    let mut c = quick(path.to_str().unwrap());
    c.data.separation = 8.0;
    c.quant.strategy = TableStrategy::Exact;
    c.quant.key_bits = 12;
    c.quant.value_bits = 24;
    let (_, _, report) = run_experiment(&c).unwrap();
    assert_eq!(report.agreement, 1.0, "{}", report.to_text());
    assert_eq!(report.macro_f1_delta, 0.0);
}

#[test]
fn one_stage_is_not_enough_for_two_levels() {
    let mut c = quick("zoo:mlp_b");
    c.resources.stages = 1;
    let mut exp = Experiment::prepare(&c).unwrap();
    let m = exp.fit().unwrap();
    let err = exp.compile(m).unwrap_err();
    assert!(matches!(err.root(), Error::InsufficientStages { .. }), "{err}");
    assert!(err.to_string().starts_with("schedule: insufficient stages"), "{err}");
}

#[test]
fn same_config_same_program_bytes() {
    let c = quick("zoo:mlp_b");
    let a = run_experiment(&c).unwrap().1.program.to_json().unwrap();
    let b = run_experiment(&c).unwrap().1.program.to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_test_split_is_an_argument_error() {
    let mut c = quick("zoo:mlp_b");
    c.split = [0.9, 0.1, 0.0];
    let mut exp = Experiment::prepare(&c).unwrap();
    let m = exp.fit().unwrap();
    let b = exp.compile(m).unwrap();
    assert!(matches!(exp.evaluate(&b).unwrap_err().root(), Error::Argument(_)));
}

#[test]
fn overrides_apply() {
    let mut c = quick("zoo:cnn_b");
    c.depth = Some(3);
    c.window = Some(4);
    c.fusion = Some(FusionChoice::None);
    let spec = c.model_spec().unwrap();
    assert!(spec.maps.iter().all(|b| b.depth == 3));
    assert_eq!(spec.dims, vec![4, 2]);
    assert_eq!(spec.fusion, FusionChoice::None);
    c.model = "zoo:mlp_b".into();
    assert!(c.model_spec().is_err());
    c.window = None;
    c.split = [0.5, 0.5, 0.5];
    assert!(c.validate().is_err());
}

#[test]
fn config_loads_from_toml_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("c.toml");
    std::fs::write(&t, "model = \"zoo:cnn_m\"\nseed = 9\n[resources]\nstages = 12\n[quant]\nkey_bits = 6\n").unwrap();
    let c = ExperimentConfig::from_file(&t).unwrap();
    assert_eq!((c.model.as_str(), c.seed, c.resources.stages, c.quant.key_bits), ("zoo:cnn_m", 9, 12, 6));
    assert_eq!(c.resources.phv_bits, ResourceModel::default().phv_bits);
    let j = dir.path().join("c.json");
    std::fs::write(&j, serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::from_file(&j).unwrap(), c);
}
