//! Annotator-aware text classification: per-annotator embeddings added to a
//! shared text representation, single-task and multi-task baselines, and the
//! metrics used to compare them.

pub mod analysis;
pub mod corpus;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod repro;
pub mod trainer;

/// Version stamped into every artifact the tool writes.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Coarse failure category; the command-line tool maps each to an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }
}

pub trait Classify {
    fn class(&self) -> ErrorClass;
}

impl Classify for corpus::CorpusError {
    fn class(&self) -> ErrorClass {
        match self {
            corpus::CorpusError::Config(_) => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }
}

impl Classify for encoder::EncoderError {
    fn class(&self) -> ErrorClass {
        ErrorClass::Data
    }
}

impl Classify for model::ModelError {
    fn class(&self) -> ErrorClass {
        ErrorClass::Data
    }
}

impl Classify for objective::ObjectiveError {
    fn class(&self) -> ErrorClass {
        match self {
            objective::ObjectiveError::Numerical(_) => ErrorClass::Numerical,
            objective::ObjectiveError::Config(_) => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }
}

impl Classify for trainer::TrainError {
    fn class(&self) -> ErrorClass {
        match self {
            trainer::TrainError::Config(_) => ErrorClass::Config,
            trainer::TrainError::Numerical { .. } => ErrorClass::Numerical,
            trainer::TrainError::Objective(e) => e.class(),
            _ => ErrorClass::Data,
        }
    }
}

impl Classify for metrics::MetricsError {
    fn class(&self) -> ErrorClass {
        ErrorClass::Data
    }
}

impl Classify for analysis::AnalysisError {
    fn class(&self) -> ErrorClass {
        match self {
            analysis::AnalysisError::DegenerateInput(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
