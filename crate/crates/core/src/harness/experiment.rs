//! Experiment orchestration: model text and data in, trained model,
//! compiled pipeline program and evaluation report out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{self, FlowConfig, Windows};
use super::dsl::{parse_model_dsl, FusionChoice, LayerDecl, ModelSpec, SegmentClass, SegmentRule, TokenGranularity};
use super::metrics::{agreement, auroc, quantile, scores, Scores};
use super::tokens::{rewrite_to_tokens, TokenTrees};
use super::train::{fit_model, TrainConfig};
use crate::compile::{compile_graph, CompiledGraph, QuantConfig};
use crate::error::{Error, PhaseExt, Result};
use crate::fusion::{fuse_advanced, fuse_basic, FusionMode, FusionReport};
use crate::lower::{lower, PrimitiveGraph};
use crate::model::{load_dataset_csv, reference_infer, Dataset, Head, ModelGraph, Range};
use crate::pipeline::{account, schedule, FlowStore, PipelineProgram, ResourceModel, ResourceReport, StreamSpec};
use crate::sim::{decide, execute, load_packets, run_stream, PacketRecord};

/// Bundled model definitions, addressed as `zoo:<name>`.
pub const ZOO: &[(&str, &str)] = &[
    ("mlp_b", include_str!("../../zoo/mlp_b.dsl")),
    ("rnn_b", include_str!("../../zoo/rnn_b.dsl")),
    ("cnn_b", include_str!("../../zoo/cnn_b.dsl")),
    ("cnn_m", include_str!("../../zoo/cnn_m.dsl")),
    ("cnn_l", include_str!("../../zoo/cnn_l.dsl")),
    ("autoencoder", include_str!("../../zoo/autoencoder.dsl")),
];

pub fn zoo_text(name: &str) -> Option<&'static str> {
    ZOO.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Parses `zoo:<name>` or a DSL file path.
pub fn load_model_spec(source: &str) -> Result<ModelSpec> {
    let text = match source.strip_prefix("zoo:") {
        Some(name) => zoo_text(name)
            .ok_or_else(|| {
                let known: Vec<&str> = ZOO.iter().map(|(n, _)| *n).collect();
                Error::Argument(format!("unknown zoo model `{name}` (known: {})", known.join(", ")))
            })?
            .to_string(),
        None => std::fs::read_to_string(source)?,
    };
    parse_model_dsl(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// A single dataset (rows CSV, or packets CSV/JSONL for windowed
    /// models) split by the experiment fractions.
    pub path: Option<PathBuf>,
    /// Pre-split files; all three must be given together.
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Synthetic rows when no files are given.
    pub samples: usize,
    pub separation: f64,
    /// Synthetic flows when no files are given.
    pub flows: FlowConfig,
    /// Share of anomalous samples generated for autoencoder models.
    pub anomaly_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            train: None,
            validation: None,
            test: None,
            samples: 3000,
            separation: 3.0,
            flows: FlowConfig::default(),
            anomaly_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// `zoo:<name>` or a DSL file.
    pub model: String,
    /// Already trained model JSON; skips fitting.
    pub trained: Option<PathBuf>,
    pub data: DataConfig,
    /// Overrides every segment rule with one uniform size.
    pub segment: Option<usize>,
    /// Overrides every map block's tree depth.
    pub depth: Option<usize>,
    pub fusion: Option<FusionChoice>,
    pub window: Option<usize>,
    pub quant: QuantConfig,
    pub resources: ResourceModel,
    pub train: TrainConfig,
    pub split: [f64; 3],
    /// Seeds data generation and splitting.
    pub seed: u64,
    /// Share of benign validation scores below the anomaly threshold.
    pub anomaly_quantile: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "zoo:mlp_b".into(),
            trained: None,
            data: DataConfig::default(),
            segment: None,
            depth: None,
            fusion: None,
            window: None,
            quant: QuantConfig::default(),
            resources: ResourceModel::default(),
            train: TrainConfig::default(),
            split: [0.75, 0.10, 0.15],
            seed: 1,
            anomaly_quantile: 0.95,
        }
    }
}

impl ExperimentConfig {
    /// Reads JSON or TOML, by extension.
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Argument(format!("{}: {e}", path.display()))),
            _ => Ok(serde_json::from_str(&text)?),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("split fractions {:?} must be non-negative and sum to 1", self.split)));
        }
        if self.depth == Some(0) {
            return Err(Error::Argument("tree depth must be at least 1".into()));
        }
        if self.segment == Some(0) || self.window == Some(0) {
            return Err(Error::Argument("segment size and window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_quantile) {
            return Err(Error::Argument("anomaly quantile must lie in [0, 1]".into()));
        }
        let files = [&self.data.train, &self.data.validation, &self.data.test];
        let given = files.iter().filter(|f| f.is_some()).count();
        if given != 0 && given != 3 {
            return Err(Error::Argument("train, validation and test files must be given together".into()));
        }
        self.resources.validate()
    }

    /// The model definition with every override applied.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = load_model_spec(&self.model)?;
        if let Some(d) = self.depth {
            spec = spec.with_depth(d);
        }
        if let Some(s) = self.segment {
            spec.segments = vec![SegmentRule {
                class: SegmentClass::All,
                size: s,
            }];
            for b in &mut spec.maps {
                b.segment = None;
            }
        }
        if let Some(f) = self.fusion {
            spec.fusion = f;
        }
        if let Some(w) = self.window {
            let stream = spec
                .stream
                .as_mut()
                .ok_or_else(|| Error::Argument(format!("model `{}` is not windowed", spec.name)))?;
            stream.window = w;
            spec.dims[0] = w;
        }
        Ok(spec)
    }
}

/// Train, validation and test data.
#[derive(Debug, Clone)]
pub enum Splits {
    Rows([Dataset; 3]),
    Flows {
        packets: [Vec<PacketRecord>; 3],
        windows: [Windows; 3],
    },
}

impl Splits {
    pub fn len(&self, k: usize) -> usize {
        match self {
            Splits::Rows(d) => d[k].len(),
            Splits::Flows { windows, .. } => windows[k].rows.len(),
        }
    }

    pub fn is_empty(&self, k: usize) -> bool {
        self.len(k) == 0
    }
}

/// Everything `compile` produces.
#[derive(Debug, Clone)]
pub struct Build {
    pub spec: ModelSpec,
    pub model: ModelGraph,
    pub lowered: PrimitiveGraph,
    pub fused: PrimitiveGraph,
    pub fusion: FusionReport,
    pub compiled: CompiledGraph,
    pub program: PipelineProgram,
    pub resources: ResourceReport,
    /// Anomaly threshold on reference scores.
    pub reference_threshold: Option<f64>,
}

impl Build {
    /// Writes every intermediate artifact into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text)?;
            written.push(p);
            Ok(())
        };
        put("model.dsl", self.spec.to_text())?;
        put("model.json", self.model.to_json()?)?;
        put("lowered.json", serde_json::to_string_pretty(&self.lowered)?)?;
        put("fused.json", serde_json::to_string_pretty(&self.fused)?)?;
        put("fusion.json", serde_json::to_string_pretty(&self.fusion)?)?;
        put("compiled.json", serde_json::to_string(&self.compiled)?)?;
        put("program.json", self.program.to_json()?)?;
        put("resources.json", self.resources.to_json()?)?;
        put(
            "threshold.json",
            serde_json::to_string_pretty(&serde_json::json!({ "reference": self.reference_threshold }))?,
        )?;
        Ok(written)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub head: Head,
    pub samples: usize,
    pub pipeline: Scores,
    pub reference: Scores,
    /// Reference macro-F1 minus pipeline macro-F1.
    pub macro_f1_delta: f64,
    pub agreement: f64,
    pub auroc: Option<f64>,
    pub reference_auroc: Option<f64>,
    pub lookups_per_decision: usize,
    pub resources: ResourceReport,
    pub fusion: FusionReport,
    /// Wall-clock milliseconds per phase.
    pub timings_ms: BTreeMap<String, f64>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "model {} ({:?}), {} test samples\n\
             macro-F1 pipeline {:.4} reference {:.4} delta {:+.4}\n\
             precision {:.4} recall {:.4} accuracy {:.4} agreement {:.4}\n",
            self.model,
            self.head,
            self.samples,
            self.pipeline.macro_f1,
            self.reference.macro_f1,
            self.macro_f1_delta,
            self.pipeline.macro_precision,
            self.pipeline.macro_recall,
            self.pipeline.accuracy,
            self.agreement,
        );
        if let Some(a) = self.auroc {
            s += &format!("AUROC pipeline {a:.4} reference {:.4}\n", self.reference_auroc.unwrap_or(f64::NAN));
        }
        s += "class  support  precision  recall  f1\n";
        for m in &self.pipeline.per_class {
            s += &format!("{:>5}  {:>7}  {:>9.4}  {:>6.4}  {:.4}\n", m.class, m.support, m.precision, m.recall, m.f1);
        }
        s += &format!(
            "lookups {} -> {} ({:?}), {} per decision\n",
            self.fusion.lookups_before, self.fusion.lookups_after, self.fusion.mode, self.lookups_per_decision
        );
        s += &self.resources.to_table();
        s += "phase timings (ms):";
        for (k, v) in &self.timings_ms {
            s += &format!(" {k}={v:.1}");
        }
        s.push('\n');
        s
    }
}

/// A prepared experiment: parsed model, loaded or generated data and, for
/// windowed models that store indexes, fitted tokenizer trees.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub splits: Splits,
    pub tokens: Option<TokenTrees>,
    /// The model reads packet tokens rather than packet features.
    pub token_input: bool,
    pub timings_ms: BTreeMap<String, f64>,
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, phase: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f().phase(phase);
    *timings.entry(phase.to_string()).or_default() += t.elapsed().as_secs_f64() * 1e3;
    out
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Experiment> {
        let mut timings = BTreeMap::new();
        config.validate().phase("config")?;
        let spec = timed(&mut timings, "parse", || config.model_spec())?;
        let token_input = matches!(
            spec.maps.first().and_then(|b| b.layers.first()),
            Some(LayerDecl::Embedding { .. })
        );
        let splits = timed(&mut timings, "data", || load_splits(config, &spec))?;
        let tokens = timed(&mut timings, "tokenize", || check_stream(&spec, &splits, token_input))?;
        Ok(Experiment {
            config: config.clone(),
            spec,
            splits,
            tokens,
            token_input,
            timings_ms: timings,
        })
    }

    /// Inputs and labels the model sees for split `k`.
    pub fn model_rows(&self, k: usize) -> Dataset {
        match &self.splits {
            Splits::Rows(d) => d[k].clone(),
            Splits::Flows { windows, .. } => {
                let w = &windows[k];
                let rows = match (&self.tokens, self.token_input) {
                    (Some(t), true) => t.tokenize_rows(&w.rows, self.per_packet_features()),
                    _ => w.rows.clone(),
                };
                Dataset::new(rows, Some(w.labels.clone()))
            }
        }
    }

    fn per_packet_features(&self) -> usize {
        self.spec.stream.as_ref().map(|s| s.features.len()).unwrap_or(0)
    }

    /// Training data: benign rows only for autoencoders.
    pub fn training_rows(&self) -> Dataset {
        let d = self.model_rows(0);
        if self.spec.head() == Head::Autoencoder {
            if let Some(labels) = &d.labels {
                let keep: Vec<usize> = (0..d.len()).filter(|&i| labels[i] == 0).collect();
                return d.select(&keep);
            }
        }
        d
    }

    pub fn fit(&mut self) -> Result<ModelGraph> {
        let skeleton = self.spec.skeleton().phase("fit")?;
        let rows = self.training_rows();
        let cfg = self.config.train;
        match &self.config.trained {
            Some(path) => timed(&mut self.timings_ms, "fit", || {
                let m = ModelGraph::from_json(&std::fs::read_to_string(path)?)?;
                if m.input_len() != skeleton.input_len() || m.output_len() != skeleton.output_len() {
                    return Err(Error::Argument(format!(
                        "trained model {} does not match the model definition's shape",
                        path.display()
                    )));
                }
                Ok(m)
            }),
            None => timed(&mut self.timings_ms, "fit", || fit_model(&skeleton, &rows, &cfg)),
        }
    }

    /// Lowers, fuses, quantizes and schedules a trained model.
    pub fn compile(&mut self, model: ModelGraph) -> Result<Build> {
        let spec = self.spec.clone();
        let policy = spec.policy();
        let lowered = timed(&mut self.timings_ms, "lower", || lower(&model, &policy))?;
        let (fused, fusion) = timed(&mut self.timings_ms, "fuse", || match spec.fusion {
            FusionChoice::None => Ok((
                lowered.clone(),
                FusionReport {
                    mode: FusionMode::None,
                    lookups_before: lowered.map_count(),
                    lookups_after: lowered.map_count(),
                    passes: Vec::new(),
                },
            )),
            FusionChoice::Basic => Ok(fuse_basic(&lowered)),
            adv => fuse_advanced(&lowered, adv.advanced().expect("advanced mode")),
        })?;

        let mut quant = self.config.quant.clone();
        for (k, v) in spec.tree_configs() {
            quant.trees.entry(k).or_insert(v);
        }
        let train = self.training_rows();
        let mut graph = fused.clone();
        let mut rows = train.rows.clone();
        if let Some(stream) = &spec.stream {
            let c = stream.features.len();
            match (stream.store, &self.tokens) {
                (FlowStore::Raw, _) => quant.input_period = Some(c),
                (FlowStore::Index, Some(tok)) => {
                    let per = tok.trees.len();
                    if !self.token_input {
                        let centroids = tok.centroid_table()?;
                        graph = timed(&mut self.timings_ms, "tokenize", || rewrite_to_tokens(&fused, c, &centroids))?;
                        rows = tok.tokenize_rows(&rows, c);
                    }
                    quant.input_period = Some(per);
                    let ranges: Vec<Range> = (0..graph.input_len)
                        .map(|i| {
                            let t = i % per;
                            let lo = tok.offsets[t] as f64;
                            Range {
                                min: lo,
                                max: lo + (tok.trees[t].leaves - 1) as f64,
                            }
                        })
                        .collect();
                    quant.input_ranges = Some(ranges);
                }
                (FlowStore::Index, None) => unreachable!("index storage always has tokenizers"),
            }
        }
        let compiled = timed(&mut self.timings_ms, "compile", || compile_graph(&graph, &rows, &quant))?;
        let stream = match (&spec.stream, &self.splits) {
            (Some(s), Splits::Flows { windows, .. }) => Some(timed(&mut self.timings_ms, "tokenize", || {
                let c = s.features.len();
                Ok(match &self.tokens {
                    None => StreamSpec {
                        window: s.window,
                        features: s.features.clone(),
                        feature_q: compiled.input_q[..c].to_vec(),
                        store: FlowStore::Raw,
                        tokenizers: Vec::new(),
                    },
                    Some(tok) => {
                        let per = tok.trees.len();
                        let (feature_q, tokenizers) = tok.tables(
                            &windows[0].packet_features,
                            quant.value_bits,
                            quant.key_bits,
                            quant.margin,
                            &compiled.input_q[..per],
                            quant.rule_cap,
                        )?;
                        StreamSpec {
                            window: s.window,
                            features: s.features.clone(),
                            feature_q,
                            store: FlowStore::Index,
                            tokenizers,
                        }
                    }
                })
            })?),
            _ => None,
        };
        let res = self.config.resources;
        let mut program = timed(&mut self.timings_ms, "schedule", || schedule(&compiled, &res, stream))?;
        program.head = spec.head();
        let resources = account(&program, &res);
        let mut build = Build {
            spec,
            model,
            lowered,
            fused,
            fusion,
            compiled,
            program,
            resources,
            reference_threshold: None,
        };
        if build.spec.head() == Head::Autoencoder {
            let start = Instant::now();
            self.set_thresholds(&mut build).phase("threshold")?;
            self.timings_ms.insert("threshold".into(), start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(build)
    }

    /// Thresholds at the configured quantile of benign validation scores,
    /// separately for the reference and the pipeline.
    fn set_thresholds(&self, build: &mut Build) -> Result<()> {
        let k = if self.splits.is_empty(1) { 0 } else { 1 };
        let labels = self.model_rows(k).labels.unwrap_or_else(|| vec![0; self.splits.len(k)]);
        let benign = |v: Vec<f64>| -> Vec<f64> { v.into_iter().zip(&labels).filter(|(_, &l)| l == 0).map(|(s, _)| s).collect() };
        let q = self.config.anomaly_quantile;
        let reference = benign(self.reference_outputs(build, k)?.into_iter().map(|o| o[0]).collect());
        let pipe_raw = self.pipeline_outputs(build, k)?;
        let oq = build.program.output_q[0];
        let pipeline = benign(pipe_raw.iter().map(|r| oq.dequantize(r[0])).collect());
        build.reference_threshold = Some(quantile(&reference, q));
        // A saturated score is at least the largest code, so it must count
        // as anomalous.
        build.program.threshold_raw = Some(oq.quantize(quantile(&pipeline, q)).min(oq.max_raw() - 1));
        Ok(())
    }

    /// Full-precision outputs on split `k`.
    pub fn reference_outputs(&self, build: &Build, k: usize) -> Result<Vec<Vec<f64>>> {
        self.model_rows(k).rows.iter().map(|x| reference_infer(&build.model, x)).collect()
    }

    /// Raw pipeline outputs on split `k`, from the simulator.
    pub fn pipeline_outputs(&self, build: &Build, k: usize) -> Result<Vec<Vec<i64>>> {
        match &self.splits {
            Splits::Rows(d) => d[k]
                .rows
                .iter()
                .map(|x| execute(&build.program, &build.compiled.quantize_input(x)))
                .collect(),
            Splits::Flows { packets, windows } => {
                let out = run_stream(&build.program, &packets[k], false)?;
                let w = &windows[k];
                let aligned = out.decisions.len() == w.rows.len()
                    && out
                        .decisions
                        .iter()
                        .zip(w.flow_ids.iter().zip(&w.packet_index))
                        .all(|(d, (f, &i))| &d.flow_id == f && d.packet_index == i);
                if !aligned {
                    return Err(Error::SimFault("stream decisions do not line up with the reference windows".into()));
                }
                Ok(out.decisions.into_iter().map(|d| d.raw_output).collect())
            }
        }
    }

    /// Scores the pipeline and the reference on the test split.
    pub fn evaluate(&mut self, build: &Build) -> Result<Report> {
        if self.splits.is_empty(2) {
            return Err(Error::Argument("test set is empty".into()).in_phase("evaluate"));
        }
        let start = Instant::now();
        let report = self.evaluate_inner(build).phase("evaluate");
        self.timings_ms.insert("evaluate".into(), start.elapsed().as_secs_f64() * 1e3);
        let mut report = report?;
        report.timings_ms = self.timings_ms.clone();
        Ok(report)
    }

    fn evaluate_inner(&self, build: &Build) -> Result<Report> {
        let head = build.spec.head();
        let truth = self.model_rows(2).labels.unwrap_or_else(|| vec![0; self.splits.len(2)]);
        let reference = self.reference_outputs(build, 2)?;
        let raw = self.pipeline_outputs(build, 2)?;
        let pipe_dec: Vec<usize> = raw.iter().map(|r| decide(&build.program, r)).collect();
        let (ref_dec, classes, auc, ref_auc): (Vec<usize>, usize, _, _) = match head {
            Head::Classifier => {
                let dec = reference.iter().map(|o| argmax(o)).collect();
                (dec, build.model.output_len(), None, None)
            }
            Head::Autoencoder => {
                let thr = build.reference_threshold.unwrap_or(f64::INFINITY);
                let dec = reference.iter().map(|o| usize::from(o[0] > thr)).collect();
                let oq = build.program.output_q[0];
                let pipe_scores: Vec<f64> = raw.iter().map(|r| oq.dequantize(r[0])).collect();
                let ref_scores: Vec<f64> = reference.iter().map(|o| o[0]).collect();
                (dec, 2, auroc(&truth, &pipe_scores), auroc(&truth, &ref_scores))
            }
        };
        let pipeline = scores(&truth, &pipe_dec, classes);
        let reference_scores = scores(&truth, &ref_dec, classes);
        let tokenizers = build.program.stream.as_ref().map(|s| s.tokenizers.len()).unwrap_or(0);
        Ok(Report {
            model: build.spec.name.clone(),
            head,
            samples: truth.len(),
            macro_f1_delta: reference_scores.macro_f1 - pipeline.macro_f1,
            agreement: agreement(&pipe_dec, &ref_dec),
            pipeline,
            reference: reference_scores,
            auroc: auc,
            reference_auroc: ref_auc,
            lookups_per_decision: build.program.map_count() + tokenizers,
            resources: build.resources.clone(),
            fusion: build.fusion.clone(),
            timings_ms: BTreeMap::new(),
        })
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Prepares, fits, compiles and evaluates in one go.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Experiment, Build, Report)> {
    let mut exp = Experiment::prepare(config)?;
    let model = exp.fit()?;
    let build = exp.compile(model)?;
    let report = exp.evaluate(&build)?;
    Ok((exp, build, report))
}

fn load_splits(config: &ExperimentConfig, spec: &ModelSpec) -> Result<Splits> {
    let d = &config.data;
    let head = spec.head();
    let out_len = spec.skeleton()?.output_len();
    let split_seed = config.seed.wrapping_add(1);
    match &spec.stream {
        None => {
            let parts = if let (Some(a), Some(b), Some(c)) = (&d.train, &d.validation, &d.test) {
                [load_dataset_csv(a)?, load_dataset_csv(b)?, load_dataset_csv(c)?]
            } else {
                let all = match &d.path {
                    Some(p) => load_dataset_csv(p)?,
                    None => synthetic_rows(config, spec, head, out_len)?,
                };
                data::split_dataset(&all, config.split, split_seed)?
            };
            let dim: usize = spec.dims.iter().product();
            for p in &parts {
                if p.rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Argument(format!("dataset rows must have {dim} values")));
                }
            }
            Ok(Splits::Rows(parts))
        }
        Some(stream) => {
            let packets = if let (Some(a), Some(b), Some(c)) = (&d.train, &d.validation, &d.test) {
                [load_packets(a)?, load_packets(b)?, load_packets(c)?]
            } else {
                let all = match &d.path {
                    Some(p) => load_packets(p)?,
                    None => {
                        let mut fc = d.flows.clone();
                        fc.seed = config.seed;
                        fc.bytes = fc.bytes.max(max_byte(stream));
                        if head == Head::Autoencoder {
                            fc.classes = 1;
                            fc.anomaly_fraction = d.anomaly_fraction;
                        } else {
                            fc.classes = out_len;
                        }
                        data::generate_flows(&fc)?
                    }
                };
                data::split_flows(&all, config.split, split_seed)?
            };
            let mut windows: [Windows; 3] = Default::default();
            for k in 0..3 {
                windows[k] = data::windows(&packets[k], &stream.features, stream.window)?;
            }
            if windows[0].rows.is_empty() {
                return Err(Error::Argument(format!(
                    "no training flow reaches the {}-packet window",
                    stream.window
                )));
            }
            Ok(Splits::Flows { packets, windows })
        }
    }
}

fn max_byte(stream: &super::dsl::StreamDecl) -> usize {
    stream
        .features
        .iter()
        .filter_map(|f| match f {
            crate::pipeline::PacketFeature::Byte(i) => Some(i + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

fn synthetic_rows(config: &ExperimentConfig, spec: &ModelSpec, head: Head, out_len: usize) -> Result<Dataset> {
    let d = &config.data;
    let dim: usize = spec.dims.iter().product();
    match head {
        Head::Classifier => Ok(data::gaussian_blobs(d.samples, out_len, dim, d.separation, config.seed)),
        Head::Autoencoder => {
            // Benign rows from one cluster; anomalies are scaled-out copies.
            let base = data::gaussian_blobs(d.samples, 1, dim, 0.0, config.seed);
            let cut = ((d.samples as f64) * (1.0 - d.anomaly_fraction)).round() as usize;
            let rows: Vec<Vec<f64>> = base
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| if i >= cut { r.iter().map(|v| v * 4.0).collect() } else { r.clone() })
                .collect();
            let labels = (0..rows.len()).map(|i| usize::from(i >= cut)).collect();
            Ok(Dataset::new(rows, Some(labels)))
        }
    }
}

/// Checks the windowed input shape against the packet features and fits
/// tokenizer trees for index storage.
fn check_stream(spec: &ModelSpec, splits: &Splits, token_input: bool) -> Result<Option<TokenTrees>> {
    let Some(stream) = &spec.stream else {
        return Ok(None);
    };
    let c = stream.features.len();
    let per = spec.dims[1..].iter().product::<usize>();
    let Splits::Flows { windows, .. } = splits else {
        unreachable!("windowed models load flows")
    };
    match stream.store {
        FlowStore::Raw => {
            if token_input {
                return Err(Error::Argument("token inputs need `store index`".into()));
            }
            if per != c {
                return Err(Error::Argument(format!("input has {per} channels but packets have {c} features")));
            }
            Ok(None)
        }
        FlowStore::Index => {
            if stream.token_depth == 0 {
                return Err(Error::Argument("index storage needs a tokenizer depth of at least 1".into()));
            }
            if spec.head() == Head::Autoencoder {
                return Err(Error::UnsupportedTopology("autoencoders reconstruct raw features; use `store raw`".into()));
            }
            let tok = TokenTrees::fit(&windows[0].packet_features, stream, 1)?;
            if token_input {
                let want = tok.trees.len();
                if per != want {
                    return Err(Error::Argument(format!("token input needs {want} channels, found {per}")));
                }
                if let Some(LayerDecl::Embedding { lo, hi, .. }) = spec.maps[0].layers.first() {
                    if *lo > 0 || *hi < tok.domain() as i64 - 1 {
                        return Err(Error::Argument(format!(
                            "embedding range {lo}..{hi} does not cover tokens 0..{}",
                            tok.domain() - 1
                        )));
                    }
                }
            } else {
                if stream.tokens == TokenGranularity::PerFeature {
                    return Err(Error::UnsupportedTopology(
                        "raw-feature models need `tokens per_packet` with index storage".into(),
                    ));
                }
                if per != c {
                    return Err(Error::Argument(format!("input has {per} channels but packets have {c} features")));
                }
            }
            Ok(Some(tok))
        }
    }
}

#[cfg(test)]
mod tests;
