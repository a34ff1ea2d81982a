use std::path::{Path, PathBuf};

use aftercast_core::feedback::LlmConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid value for {key}: {message}")]
    Env { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Deployment settings. Loaded from TOML, then overridden by `AFTERCAST_*`
/// environment variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Optimization runs that may execute at the same time.
    pub workers: usize,
    pub store: PathBuf,
    /// Shared bearer token; `None` disables the check.
    pub token: Option<String>,
    pub max_upload_mb: usize,
    pub llm: LlmConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            workers: 2,
            store: PathBuf::from("aftercast-store"),
            token: None,
            max_upload_mb: 64,
            llm: LlmConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// File (if any) plus process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        base.with_env(std::env::vars())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn with_env<I>(mut self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e: T::Err| ConfigError::Env {
                key: key.into(),
                message: e.to_string(),
            })
        }
        for (key, v) in vars {
            match key.as_str() {
                "AFTERCAST_LISTEN" => self.listen = v,
                "AFTERCAST_WORKERS" => self.workers = num(&key, &v)?,
                "AFTERCAST_STORE" => self.store = PathBuf::from(v),
                "AFTERCAST_TOKEN" => self.token = Some(v).filter(|t| !t.is_empty()),
                "AFTERCAST_MAX_UPLOAD_MB" => self.max_upload_mb = num(&key, &v)?,
                "AFTERCAST_LLM_ENDPOINT" => self.llm.endpoint = Some(v).filter(|t| !t.is_empty()),
                "AFTERCAST_LLM_MODEL" => self.llm.model = v,
                "AFTERCAST_LLM_TIMEOUT_SECS" => self.llm.timeout_secs = num(&key, &v)?,
                "AFTERCAST_LLM_MAX_RETRIES" => self.llm.max_retries = num(&key, &v)?,
                _ => {}
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.max_upload_mb == 0 {
            return Err(ConfigError::Invalid("max_upload_mb must be at least 1".into()));
        }
        if self.llm.timeout_secs == 0 {
            return Err(ConfigError::Invalid("llm.timeout_secs must be at least 1".into()));
        }
        Ok(())
    }
}
