use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("decode error at byte {offset}: {message}")]
    Decode { offset: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate kernel bandwidth: {0}")]
    DegenerateBandwidth(String),

    #[error("training diverged at iteration {iteration}: non-finite {term}")]
    Diverged { iteration: usize, term: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("ingestion failed for {} file(s): {}", .files.len(), format_files(.files))]
    Ingestion { files: Vec<(PathBuf, String)> },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_files(files: &[(PathBuf, String)]) -> String {
    files
        .iter()
        .map(|(p, why)| format!("{} ({why})", p.display()))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn csv(path: &std::path::Path, e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::io(path, source),
            other => Error::format(path.display().to_string(), format!("{other:?}")),
        }
    }

    /// Wrap an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input (paths, files, config)
    /// rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Decode { .. }
            | Error::Config(_)
            | Error::Ingestion { .. }
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Protocol(_) => true,
            Error::Stage { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}
