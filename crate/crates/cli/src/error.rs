use serde_json::json;
use thiserror::Error;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error{}{}: {message}", key.as_ref().map(|k| format!(" at `{k}`")).unwrap_or_default(), line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        key: Option<String>,
        line: Option<usize>,
        message: String,
    },

    #[error(transparent)]
    Core(#[from] pdemap::Error),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn missing_block(block: &str, command: &str) -> Self {
        CliError::Config {
            key: Some(block.to_string()),
            line: None,
            message: format!("`{command}` requires the `{block}` block"),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. }
            | CliError::Core(pdemap::Error::InvalidArgument(_) | pdemap::Error::InvalidGrid(_)) => EXIT_CONFIG,
            CliError::Core(pdemap::Error::Io(_)) | CliError::Io(_) => EXIT_FAILURE,
            CliError::Core(_) => EXIT_NUMERICAL,
        }
    }

    /// Structured report for stderr and the summary file.
    pub fn report(&self) -> serde_json::Value {
        let kind = match self {
            CliError::Config { .. } => "config",
            CliError::Core(pdemap::Error::InvalidArgument(_) | pdemap::Error::InvalidGrid(_)) => "config",
            CliError::Core(pdemap::Error::Io(_)) | CliError::Io(_) => "io",
            CliError::Core(_) => "numerical",
        };
        let mut v = json!({
            "status": "error",
            "kind": kind,
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Config { key, line, .. } = self {
            v["key"] = json!(key);
            v["line"] = json!(line);
        }
        v
    }
}
