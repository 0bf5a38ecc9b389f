use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use matnet::harness::data::{gaussian_blobs, generate_flows, FlowConfig};
use matnet::harness::{Experiment, ExperimentConfig, Report};
use matnet::model::{load_dataset_csv, write_dataset_csv};
use matnet::pipeline::{account, PipelineProgram};
use matnet::sim::{decide, execute, load_packets, run_stream, write_decisions_jsonl, write_packets_csv, write_packets_jsonl};
use matnet::Error;

#[derive(Parser)]
#[command(name = "matnet", version, about = "Compile small neural networks into match-action pipelines")]
struct Cli {
    /// Directory for artifacts.
    #[arg(long, global = true, env = "MATNET_OUT", default_value = "matnet-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model and write model.json.
    Fit(ExperimentArgs),
    /// Train (or load) the model and compile it; writes every artifact.
    Compile(ExperimentArgs),
    /// Run a compiled program over rows or a packet stream.
    Simulate(SimulateArgs),
    /// Compile and score the pipeline against the full-precision model.
    Evaluate(ExperimentArgs),
    /// Print a saved report, or the resource usage of a saved program.
    Report(ReportArgs),
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
}

#[derive(Args, Default)]
struct ExperimentArgs {
    /// JSON or TOML experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `zoo:<name>` or a model DSL file.
    #[arg(long)]
    model: Option<String>,
    /// Trained model JSON to compile instead of fitting.
    #[arg(long)]
    trained: Option<PathBuf>,
    /// Single dataset to split (rows CSV, or packets CSV/JSONL).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    validation_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Synthetic row count.
    #[arg(long)]
    samples: Option<usize>,
    /// Synthetic flow count.
    #[arg(long)]
    flows: Option<usize>,
    #[arg(long)]
    anomaly_fraction: Option<f64>,
    #[arg(long)]
    segment: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// none, basic, drop_nonlinear or nam.
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    value_bits: Option<u32>,
    #[arg(long)]
    key_bits: Option<u32>,
    /// auto, exact or fuzzy.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rule_cap: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    sram_bits: Option<u64>,
    #[arg(long)]
    tcam_bits: Option<u64>,
    #[arg(long)]
    bus_bits: Option<u64>,
    #[arg(long)]
    phv_bits: Option<u64>,
    #[arg(long)]
    table_limit: Option<usize>,
    #[arg(long)]
    stateful_bits: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
    /// Train, validation and test fractions.
    #[arg(long, num_args = 3, value_delimiter = ',')]
    split: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    anomaly_quantile: Option<f64>,
}

fn enum_arg<T: DeserializeOwned>(flag: &str, v: &str) -> matnet::Result<T> {
    serde_json::from_value(json!(v)).map_err(|_| Error::Argument(format!("--{flag}: unknown value `{v}`")))
}

impl ExperimentArgs {
    fn resolve(&self) -> matnet::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(c.model, self.model);
        if self.trained.is_some() {
            c.trained = self.trained.clone();
        }
        if self.data.is_some() {
            c.data.path = self.data.clone();
        }
        if self.train_data.is_some() || self.validation_data.is_some() || self.test_data.is_some() {
            c.data.train = self.train_data.clone();
            c.data.validation = self.validation_data.clone();
            c.data.test = self.test_data.clone();
        }
        set!(c.data.samples, self.samples);
        set!(c.data.flows.flows, self.flows);
        set!(c.data.anomaly_fraction, self.anomaly_fraction);
        if self.segment.is_some() {
            c.segment = self.segment;
        }
        if self.depth.is_some() {
            c.depth = self.depth;
        }
        if let Some(f) = &self.fusion {
            c.fusion = Some(enum_arg("fusion", f)?);
        }
        if self.window.is_some() {
            c.window = self.window;
        }
        set!(c.quant.value_bits, self.value_bits);
        set!(c.quant.key_bits, self.key_bits);
        if let Some(s) = &self.strategy {
            c.quant.strategy = enum_arg("strategy", s)?;
        }
        set!(c.quant.rule_cap, self.rule_cap);
        set!(c.resources.stages, self.stages);
        set!(c.resources.sram_bits_per_stage, self.sram_bits);
        set!(c.resources.tcam_bits_per_stage, self.tcam_bits);
        set!(c.resources.action_bus_bits, self.bus_bits);
        set!(c.resources.phv_bits, self.phv_bits);
        set!(c.resources.per_stage_table_limit, self.table_limit);
        set!(c.resources.stateful_sram_bits, self.stateful_bits);
        set!(c.train.epochs, self.epochs);
        set!(c.train.learning_rate, self.learning_rate);
        set!(c.train.seed, self.train_seed);
        if let Some(s) = &self.split {
            c.split = [s[0], s[1], s[2]];
        }
        set!(c.seed, self.seed);
        set!(c.anomaly_quantile, self.anomaly_quantile);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Compiled program JSON (defaults to <out>/program.json).
    #[arg(long)]
    program: Option<PathBuf>,
    /// Rows CSV, or packets CSV/JSONL for windowed programs.
    #[arg(long)]
    input: PathBuf,
    /// Decisions JSONL (defaults to <out>/decisions.jsonl; `-` for stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json or program.json (defaults to <out>/report.json).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// blobs, flows or anomaly-flows.
    #[arg(long, default_value = "blobs")]
    kind: String,
    /// Output file; `.csv`, or `.jsonl` for packets.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 3000)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 300)]
    flows: usize,
    /// Feature bytes per packet.
    #[arg(long, default_value_t = 0)]
    bytes: usize,
    #[arg(long, default_value_t = 0.2)]
    anomaly_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn note(msg: String) {
    eprintln!("{msg}");
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> matnet::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn fit(out: &Path, args: &ExperimentArgs) -> matnet::Result<()> {
    let config = args.resolve()?;
    let mut exp = Experiment::prepare(&config)?;
    let model = exp.fit()?;
    std::fs::create_dir_all(out)?;
    let path = out.join("model.json");
    std::fs::write(&path, model.to_json()?)?;
    write_json(&out.join("config.json"), &config)?;
    note(format!("wrote {}", path.display()));
    Ok(())
}

fn compile(out: &Path, args: &ExperimentArgs, evaluate: bool) -> matnet::Result<()> {
    let config = args.resolve()?;
    let mut exp = Experiment::prepare(&config)?;
    let model = exp.fit()?;
    let build = exp.compile(model)?;
    let written = build.save(out)?;
    write_json(&out.join("config.json"), &config)?;
    note(format!("wrote {} artifacts to {}", written.len() + 1, out.display()));
    if evaluate {
        let report = exp.evaluate(&build)?;
        std::fs::write(out.join("report.json"), report.to_json()?)?;
        print!("{}", report.to_text());
    } else {
        print!("{}", build.resources.to_table());
    }
    Ok(())
}

fn simulate(out: &Path, args: &SimulateArgs) -> matnet::Result<()> {
    let program_path = args.program.clone().unwrap_or_else(|| out.join("program.json"));
    let program = PipelineProgram::from_json(&std::fs::read_to_string(&program_path)?)?;
    let mut lines = Vec::new();
    match &program.stream {
        Some(_) => {
            let packets = load_packets(&args.input)?;
            let out = run_stream(&program, &packets, false)?;
            write_decisions_jsonl(&mut lines, &out.decisions)?;
        }
        None => {
            let data = load_dataset_csv(&args.input)?;
            for (i, row) in data.rows.iter().enumerate() {
                if row.len() != program.input_q.len() {
                    return Err(Error::Argument(format!(
                        "row {i} has {} values, the program expects {}",
                        row.len(),
                        program.input_q.len()
                    )));
                }
                let raw: Vec<i64> = row.iter().zip(&program.input_q).map(|(&v, q)| q.quantize(v)).collect();
                let y = execute(&program, &raw)?;
                let rec = json!({
                    "row": i,
                    "decision": decide(&program, &y),
                    "raw_output": y,
                    "lookups": program.map_count(),
                });
                writeln!(lines, "{rec}")?;
            }
        }
    }
    match args.output.as_deref() {
        Some(p) if p == Path::new("-") => std::io::stdout().write_all(&lines)?,
        other => {
            let path = other.map(Path::to_path_buf).unwrap_or_else(|| out.join("decisions.jsonl"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&path, &lines)?;
            note(format!("wrote {}", path.display()));
        }
    }
    Ok(())
}

fn report(out: &Path, args: &ReportArgs) -> matnet::Result<()> {
    let path = args.from.clone().unwrap_or_else(|| out.join("report.json"));
    let text = std::fs::read_to_string(&path)?;
    if let Ok(r) = serde_json::from_str::<Report>(&text) {
        if args.json {
            println!("{}", r.to_json()?);
        } else {
            print!("{}", r.to_text());
        }
        return Ok(());
    }
    let program = PipelineProgram::from_json(&text)
        .map_err(|_| Error::Argument(format!("{} is neither a report nor a program", path.display())))?;
    let usage = account(&program, &program.resources);
    if args.json {
        println!("{}", usage.to_json()?);
    } else {
        print!("{}", usage.to_table());
    }
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> matnet::Result<()> {
    let jsonl = args.output.extension().is_some_and(|e| e == "jsonl");
    match args.kind.as_str() {
        "blobs" => {
            let d = gaussian_blobs(args.samples, args.classes, args.dim, args.separation, args.seed);
            write_dataset_csv(&args.output, &d)?;
        }
        "flows" | "anomaly-flows" => {
            let anomalies = args.kind == "anomaly-flows";
            let cfg = FlowConfig {
                flows: args.flows,
                classes: if anomalies { 1 } else { args.classes },
                bytes: args.bytes,
                anomaly_fraction: if anomalies { args.anomaly_fraction } else { 0.0 },
                seed: args.seed,
                ..FlowConfig::default()
            };
            let packets = generate_flows(&cfg)?;
            if jsonl {
                write_packets_jsonl(&args.output, &packets)?;
            } else {
                write_packets_csv(&args.output, &packets)?;
            }
        }
        other => return Err(Error::Argument(format!("unknown data kind `{other}` (blobs, flows, anomaly-flows)"))),
    }
    note(format!("wrote {}", args.output.display()));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => fit(&cli.out, a),
        Command::Compile(a) => compile(&cli.out, a, false),
        Command::Evaluate(a) => compile(&cli.out, a, true),
        Command::Simulate(a) => simulate(&cli.out, a),
        Command::Report(a) => report(&cli.out, a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let diag = json!({
                "error": {
                    "kind": e.kind(),
                    "phases": e.phases(),
                    "message": e.root().to_string(),
                }
            });
            eprintln!("{diag}");
            ExitCode::FAILURE
        }
    }
}
