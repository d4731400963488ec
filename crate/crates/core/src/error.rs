use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage an error originated from. Used for CLI exit codes and
/// stage-labelled messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Network,
    Simulation,
    Steady,
    Excitation,
    Estimation,
    Output,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Network => 3,
            Stage::Simulation => 4,
            Stage::Steady => 5,
            Stage::Excitation => 6,
            Stage::Estimation => 7,
            Stage::Output => 8,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Network => "network",
            Stage::Simulation => "simulation",
            Stage::Steady => "steady-inference",
            Stage::Excitation => "excitation",
            Stage::Estimation => "topology-estimation",
            Stage::Output => "output",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("control period {period} exceeds 1/max degree (period * max degree = {product:.6})")]
    ControlPeriodTooLarge { period: f64, product: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("trace is empty")]
    EmptyTrace,

    #[error("final observable set is empty")]
    EmptyObservableSet,

    #[error("not enough frames: need {needed}, have {available}")]
    InsufficientFrames { needed: usize, available: usize },

    #[error("robot {robot} missing from frame {step}")]
    MissingObservation { robot: usize, step: usize },

    #[error("no complete window satisfies the steady-time criterion")]
    NeverSteady,

    #[error("excitation target {target} never reacted within {budget} steps")]
    ReactionNotDetected { target: usize, budget: usize },

    #[error("no out-neighbour detected after trying {tried} target(s)")]
    NoOutNeighbors { tried: usize },

    #[error("least-squares regressor is rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("auxiliary inference set is empty (R_f - R_c^ub = {radius:.3} m)")]
    EmptyAuxiliarySet { radius: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("corrupt binary trace: {0}")]
    CorruptTrace(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// An error tagged with the pipeline stage that produced it.
#[derive(Debug, Error)]
#[error("[{}] {source}", stage.label())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}
