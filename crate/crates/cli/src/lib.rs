//! Command-line interface and live session service for the vibrotactile
//! feedback twin.

pub mod cli;
pub mod service;
pub mod store;

/// Errors surfaced by the CLI and the service.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] vibrotwin::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("bad log {0}: {1}")]
    BadLog(String, String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
}
