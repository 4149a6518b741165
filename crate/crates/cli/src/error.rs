use portfolio_core::ErrorKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{message}")]
    Core {
        message: String,
        kind: ErrorKind,
    },
}

impl From<portfolio_core::Error> for CliError {
    fn from(e: portfolio_core::Error) -> Self {
        CliError::Core {
            message: e.to_string(),
            kind: e.kind(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core {
            message: e.to_string(),
            kind: ErrorKind::Data,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        portfolio_core::Error::from(e).into()
    }
}

impl CliError {
    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        portfolio_core::Error::io(path, e).into()
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core { kind, .. } => match kind {
                ErrorKind::Config => "config",
                ErrorKind::Data => "data",
                ErrorKind::Io => "io",
                ErrorKind::Numerical => "numerical",
            },
        }
    }

    /// 2 config, 3 data (including file access), 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "numerical" => 4,
            _ => 3,
        }
    }

    /// One-line JSON record for stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "error": self.category(),
            "code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

pub type CliResult<T> = Result<T, CliError>;
