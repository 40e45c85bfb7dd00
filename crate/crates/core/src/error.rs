use thiserror::Error;

use crate::controller::FeasibilityReport;
use crate::integrator::Constraint;

/// Failures when evaluating a funnel or reference signal.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignalError {
    #[error("funnel table lookup at t = {t} outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("invalid funnel table: {0}")]
    BadTable(String),
    #[error("funnel rejected: {0}")]
    Rejected(String),
}

/// Failures raised while evaluating the plant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("operator `{name}` produced a non-finite value at t = {t}")]
    NonFiniteOperator { name: String, t: f64 },
    #[error("nonlinearity `{name}` produced a non-finite value at t = {t}")]
    NonFiniteNonlinearity { name: String, t: f64 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("input gain has no positive definite symmetric part (smallest eigenvalue {lambda_min:e})")]
    GainNotPositive { lambda_min: f64 },
    #[error("order must be at least 2, got {0}")]
    Order(usize),
    #[error("{0}")]
    Invalid(String),
}

/// The state left the open set on which the closed-loop vector field is
/// defined. Level 0 is the funnel itself, level `i` is the ball for `θ_i`.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("domain exit at level {level} (normalized denominator {margin:e})")]
pub struct DomainExit {
    pub level: usize,
    pub margin: f64,
}

#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error("initial data violate the feasibility conditions")]
    InfeasibleStart(Box<FeasibilityReport>),
    #[error("step size underflow at t = {t:.6} (h = {h:e}); nearest constraint: {constraint} (margin {margin:e})")]
    StepUnderflow {
        t: f64,
        h: f64,
        constraint: Constraint,
        margin: f64,
    },
    #[error("step limit of {steps} reached at t = {t:.6}")]
    StepLimit { t: f64, steps: usize },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("invalid integrator configuration: {0}")]
    Config(String),
}

impl SimError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::StepUnderflow { .. } | SimError::StepLimit { .. } => 2,
            SimError::InfeasibleStart(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("coefficient index ({i}, {j}) outside the admissible range for r = {r}")]
    IndexRange { i: usize, j: usize, r: usize },
    #[error("reconstruction order k = {k} outside 2..={max}")]
    Order { k: usize, max: usize },
    #[error("{0}")]
    Input(String),
}

/// One validation problem, tagged with the offending key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("TOML syntax error: {0}")]
    Syntax(String),
    #[error("{} validation error(s):\n{}", .0.len(), render_issues(.0))]
    Invalid(Vec<ConfigIssue>),
}

fn render_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl ConfigError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}
