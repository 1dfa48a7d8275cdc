//! Command-line front end and HTTP service for FlexLoG.

pub mod commands;
pub mod config;
pub mod server;

use thiserror::Error;

/// Failures that map to distinct process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("no scenes")]
    NoScenes,
    #[error("guidance produced zero regions: {0}")]
    NoRegions(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NoScenes => 2,
            CliError::NoRegions(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

/// Sizes the global worker pool from `FLEXLOG_THREADS` when it is set.
pub fn init_thread_pool() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("FLEXLOG_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("FLEXLOG_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}
