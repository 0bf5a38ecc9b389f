use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid model: {}", .0.join("; "))]
    InvalidModel(Vec<String>),

    #[error("lowering error in layer `{layer}`: {reason}")]
    Lowering { layer: String, reason: String },

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("table too large: {0}")]
    TableTooLarge(String),

    #[error("insufficient stages: node {node} needs stage {needed} but only {available} stages exist")]
    InsufficientStages {
        node: usize,
        needed: usize,
        available: usize,
    },

    #[error("{resource} budget exceeded in stage {stage}: {used} > {limit} ({detail})")]
    Budget {
        resource: &'static str,
        stage: usize,
        used: u64,
        limit: u64,
        detail: String,
    },

    #[error("simulation fault: {0}")]
    SimFault(String),

    #[error("stream error: {0}")]
    Stream(String),

    #[error("{}", format_parse(.line, .column, .message))]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_parse(line: &usize, column: &usize, message: &str) -> String {
    format!("parse error at {line}:{column}: {message}")
}

impl Error {
    /// Wraps the error with the name of the compile phase it came from.
    pub fn in_phase(self, phase: &'static str) -> Error {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// Stable machine-readable name of the innermost error.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::Argument(_) => "argument",
            Error::Domain(_) => "domain",
            Error::InvalidModel(_) => "invalid_model",
            Error::Lowering { .. } => "lowering",
            Error::UnsupportedTopology(_) => "unsupported_topology",
            Error::TableTooLarge(_) => "table_too_large",
            Error::InsufficientStages { .. } => "insufficient_stages",
            Error::Budget { .. } => "budget",
            Error::SimFault(_) => "sim_fault",
            Error::Stream(_) => "stream",
            Error::Parse { .. } => "parse",
            Error::TrainingDiverged(_) => "training_diverged",
            Error::Phase { .. } => "phase",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Phase labels from outermost to innermost.
    pub fn phases(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut e = self;
        while let Error::Phase { phase, source } = e {
            out.push(*phase);
            e = source;
        }
        out
    }

    /// Innermost error, looking through phase labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait PhaseExt<T> {
    fn phase(self, phase: &'static str) -> Result<T>;
}

impl<T> PhaseExt<T> for Result<T> {
    fn phase(self, phase: &'static str) -> Result<T> {
        self.map_err(|e| e.in_phase(phase))
    }
}
