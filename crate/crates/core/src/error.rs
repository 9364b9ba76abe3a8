use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrapError {
    #[error("evaluation point must lie above the electrode plane, got y = {0} m")]
    BelowPlane(f64),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid drive: {0}")]
    InvalidDrive(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no interior AC null found below {0} m")]
    NoNull(f64),

    #[error("fit did not converge: {0}")]
    FitFailed(String),

    #[error("micromotion minimum not crossed: amplitude is monotone in voltage")]
    NullNotCrossed,

    #[error("simulation diverged at t = {t:.6} s: {reason}")]
    Divergence { t: f64, reason: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrapError>;
