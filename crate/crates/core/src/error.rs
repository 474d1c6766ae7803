use thiserror::Error;

/// Failure classes map onto the CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    Config,
    Assumption,
    BlowUp,
    Verification,
}

impl FailureClass {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureClass::Config => 1,
            FailureClass::Assumption => 2,
            FailureClass::BlowUp => 3,
            FailureClass::Verification => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum SlqError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry in {0}")]
    NonFinite(String),
    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error("A3.2 violated: N1 + D1'P1 D1 singular at t={t} (cond {cond:.3e})")]
    SingularNtilde1 { t: f64, cond: f64 },
    #[error("A3.2 violated at t={t}: min eigenvalue {min_eig:.3e}")]
    AssumptionA32Violated { t: f64, min_eig: f64 },
    #[error("assumption(s) violated: {0}")]
    AssumptionViolated(String),
    #[error("A3.4 violated: N2 singular at t={t}")]
    SingularN2 { t: f64 },
    #[error("A3.5 violated at t={t} (cond {cond:.3e})")]
    AssumptionA35Violated { t: f64, cond: f64 },
    #[error("A3.6 violated at t={t} (cond {cond:.3e})")]
    AssumptionA36Violated { t: f64, cond: f64 },
    #[error("singular gain matrix {which} at t={t}")]
    SingularGainMatrix { t: f64, which: &'static str },
    #[error("dimension defect: {0}")]
    DimensionDefect(String),
    #[error("Riccati blow-up at t={t} (norm {norm:.3e})")]
    BlowUp { t: f64, norm: f64 },
    #[error("leader Riccati blow-up at t={t}")]
    LeaderBlowUp {
        t: f64,
        partial: Box<crate::riccati::LeaderRiccatiSolution>,
    },
    #[error("regression ill-conditioned at step {step} (cond {cond:.3e})")]
    RegressionIllConditioned { step: usize, cond: f64 },
    #[error("control process is not observation-adapted: {0}")]
    NotObservationAdapted(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SlqError {
    pub fn class(&self) -> FailureClass {
        use SlqError::*;
        match self {
            SingularNtilde1 { .. }
            | AssumptionA32Violated { .. }
            | SingularN2 { .. }
            | AssumptionViolated(_)
            | AssumptionA35Violated { .. }
            | AssumptionA36Violated { .. }
            | SingularGainMatrix { .. } => FailureClass::Assumption,
            BlowUp { .. } | LeaderBlowUp { .. } => FailureClass::BlowUp,
            Verification(_) | RegressionIllConditioned { .. } => FailureClass::Verification,
            _ => FailureClass::Config,
        }
    }
}

pub type Result<T> = std::result::Result<T, SlqError>;
