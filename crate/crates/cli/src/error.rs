use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] roct_core::Error),

    #[error("unknown config key {0:?}")]
    UnknownKey(String),

    #[error("config key {key:?}: {reason}")]
    BadValue { key: String, reason: String },

    #[error("config file {path:?}: {source}")]
    ConfigSyntax {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("{path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::UnknownKey(_) => "unknown_config_key",
            CliError::BadValue { .. } => "config_value",
            CliError::ConfigSyntax { .. } => "config_syntax",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
        }
    }

    /// `error: kind=<kind> message=<text>` on one line.
    pub fn one_line(&self) -> String {
        let msg: String = self
            .to_string()
            .chars()
            .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        format!("error: kind={} message={}", self.kind(), msg.trim())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> CliResult<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> CliResult<T> {
        self.map_err(|source| CliError::Io {
            path: path.into(),
            source,
        })
    }
}
