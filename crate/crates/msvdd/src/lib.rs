//! Unsupervised anomaly detection for fused audio + IMU windows.
//!
//! The pipeline encodes binaural audio and single-axis IMU windows with
//! CRNN/LSTM encoders, fuses them with cross-attention, and fits a minimal
//! enclosing ellipsoid in latent space using the Mahalanobis distance under
//! a robust (minimum covariance determinant) mean/covariance estimate. A
//! reconstruction branch keeps the latent representation from collapsing.
//! Everything is trained on normal data only; at inference a window is
//! flagged when its composite score exceeds the 95th-percentile training
//! threshold.

pub mod datapipe;
pub mod model;
pub mod ndcompute;
pub mod robust;
pub mod scoring;
pub mod trainer;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes do not conform for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A precondition of an operation was violated.
    #[error("contract error: {0}")]
    Contract(String),
    /// A file or byte stream is not in the expected format.
    #[error("format error: {0}")]
    Format(String),
    /// Text that should be numeric (or otherwise well-formed) is not.
    #[error("parse error: {0}")]
    Parse(String),
    /// A numerical routine failed (non-finite values, failed factorization).
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
