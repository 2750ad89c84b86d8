//! Std side of split adaptation: transports, files, configuration and the
//! experiment driver behind the `splitadapt` binary.

pub use splitadapt_core as core;

pub mod config;
pub mod experiment;
pub mod files;
pub mod session;
pub mod transport;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] splitadapt_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(#[from] config::ConfigError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("session aborted: {0}")]
    Session(String),
}

/// Output directory: `SA_OUTPUT_DIR` when set, otherwise the configured one.
pub fn output_dir(configured: &std::path::Path) -> std::path::PathBuf {
    match std::env::var_os("SA_OUTPUT_DIR") {
        Some(d) if !d.is_empty() => d.into(),
        _ => configured.to_path_buf(),
    }
}
