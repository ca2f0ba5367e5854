use std::fmt;

use hetplan_core::domain::DomainError;
use hetplan_core::oracle::OracleError;
use hetplan_core::planner::{PlanError, Rejection};
use hetplan_core::profiles::ProfileError;
use hetplan_core::simulator::SimError;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    MissingData,
    Infeasible,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 2,
            ErrorKind::MissingData => 3,
            ErrorKind::Infeasible => 4,
            ErrorKind::Internal => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::MissingData => "missing-data",
            ErrorKind::Infeasible => "infeasible",
            ErrorKind::Internal => "internal",
        }
    }
}

/// Failure of a command. Printed as one JSON object on stderr.
#[derive(Debug, Clone)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    pub details: Value,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), details: Value::Null }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Validation, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Internal, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "error": self.kind.name(),
            "exit_code": self.exit_code(),
            "message": self.message,
        });
        if !self.details.is_null() {
            v["details"] = self.details.clone();
        }
        v
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        let message = e.to_string();
        match e {
            ProfileError::Io { path, .. } => {
                CliError::new(ErrorKind::MissingData, message).with_details(json!({ "path": path }))
            }
            ProfileError::Parse { line, column, .. } => {
                CliError::validation(message).with_details(json!({ "line": line, "column": column }))
            }
            ProfileError::Schema { path, .. } => CliError::validation(message).with_details(json!({ "path": path })),
            ProfileError::MissingProfile { layer, gpu_type, tp, mbs } => CliError::new(ErrorKind::MissingData, message)
                .with_details(json!({ "layer": layer, "gpu_type": gpu_type, "tp": tp, "mbs": mbs })),
            ProfileError::Consistency(_) | ProfileError::DegenerateFit(_) | ProfileError::Domain(_) => {
                CliError::validation(message)
            }
        }
    }
}

impl From<DomainError> for CliError {
    fn from(e: DomainError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidPlan(v) => {
                let list: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                CliError::validation(format!("invalid plan ({} violations)", list.len()))
                    .with_details(json!({ "violations": list }))
            }
            SimError::Profile(p) => p.into(),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        let message = e.to_string();
        match e {
            PlanError::NoFeasiblePlan { reason } => {
                let kind = if reason == Rejection::MissingProfiles { ErrorKind::MissingData } else { ErrorKind::Infeasible };
                CliError::new(kind, message).with_details(json!({ "reason": reason }))
            }
            PlanError::DeadlineExceeded { elapsed } => CliError::internal(message)
                .with_details(json!({ "reason": "deadline", "elapsed_seconds": elapsed.as_secs_f64() })),
            PlanError::Internal(_) => CliError::internal(message),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::internal(format!("serialization failed: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::internal(format!("i/o failed: {e}"))
    }
}
