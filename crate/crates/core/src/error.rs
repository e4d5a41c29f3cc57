use thiserror::Error;

/// Errors raised by the testers, the ledger and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("memory budget m={m} is below the regime floor {floor} (max of log n, log k, log 1/eps)")]
    RegimeTooSmall { m: u64, floor: u64 },

    #[error("memory budget m={m} exceeds the regime ceiling {ceiling} (min of k log n, n log k)")]
    RegimeTooLarge { m: u64, ceiling: u64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("symbol {symbol} outside the domain [0, {k})")]
    SymbolOutOfRange { symbol: usize, k: usize },

    #[error("sample total mismatch: expected {expected}, got {actual}")]
    TotalMismatch { expected: u64, actual: u64 },

    #[error("bit budget exceeded while charging `{label}`: over by {overshoot} bits")]
    BudgetExceeded { label: String, overshoot: u64 },

    #[error("ledger label `{0}` is not currently charged")]
    UnknownLabel(String),

    #[error("ledger label `{0}` is already charged")]
    LabelInUse(String),

    #[error("stream exhausted: needed {needed} samples, {available} available")]
    StreamExhausted { needed: u64, available: u64 },

    #[error("no amplification gap: delta={delta} must be below c2/(1+c2) for c2={c2}")]
    NoAmplificationGap { delta: f64, c2: f64 },

    #[error("calibration missing: {0}")]
    CalibrationMissing(String),

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("family `{family}` is not usable with algorithm `{algo}`: {reason}")]
    FamilyMismatch { family: String, algo: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = core::result::Result<T, Error>;
