use std::path::PathBuf;

use serde_json::{json, Value};

/// Failure reported by the CLI as a JSON object on stderr.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0:#}")]
    Config(anyhow::Error),

    #[error("missing {what}: {}", path.display())]
    MissingFile { what: &'static str, path: PathBuf },

    #[error("{} of {} runs failed; partial report at {}", failed.len(), total, report.display())]
    RunsFailed {
        failed: Vec<String>,
        total: usize,
        report: PathBuf,
    },

    #[error("gradient check failed for {}", failed.join(", "))]
    Gradcheck { failed: Vec<String> },

    #[error("{0:#}")]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "invalid_config",
            CliError::MissingFile { .. } => "missing_file",
            CliError::RunsFailed { .. } => "runs_failed",
            CliError::Gradcheck { .. } => "gradcheck_failed",
            CliError::Other(_) => "error",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::RunsFailed { .. } | CliError::Gradcheck { .. } => 3,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        let e = &mut v["error"];
        match self {
            CliError::MissingFile { path, .. } => e["path"] = json!(path),
            CliError::RunsFailed { failed, report, .. } => {
                e["failed_runs"] = json!(failed);
                e["report"] = json!(report);
            }
            CliError::Gradcheck { failed } => e["failed_targets"] = json!(failed),
            _ => {}
        }
        v
    }
}

pub type CliResult<T> = Result<T, CliError>;
