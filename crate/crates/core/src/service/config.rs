use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::event::DEFAULT_DEDUP_CAPACITY;
use crate::kernel::{KernelConfig, DEFAULT_CASCADE_LIMIT};

pub const ROOT_ENV: &str = "TRIGGERFLOW_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config {path}: {reason}")]
    Parse { path: String, reason: String },
}

/// Service settings. Without a storage root everything lives in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub storage_root: Option<PathBuf>,
    pub poll_interval_ms: u64,
    pub idle_grace_s: f64,
    pub batch_size: usize,
    pub max_workers: usize,
    pub dedup_capacity: usize,
    /// Seeds the local executor's fault and latency draws.
    pub seed: u64,
    /// fsync the event log on every publish.
    pub fsync: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            storage_root: None,
            poll_interval_ms: 100,
            idle_grace_s: 10.0,
            batch_size: 500,
            max_workers: 64,
            dedup_capacity: DEFAULT_DEDUP_CAPACITY,
            seed: 0,
            fsync: false,
        }
    }
}

impl ServiceConfig {
    /// Reads a JSON config file (if given), then applies `TRIGGERFLOW_ROOT`.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
                Self::from_json(&text).map_err(|reason| ConfigError::Parse { path: p.display().to_string(), reason })?
            }
            None => ServiceConfig::default(),
        };
        config.apply_env(std::env::var_os(ROOT_ENV).map(PathBuf::from));
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn apply_env(&mut self, root: Option<PathBuf>) {
        if let Some(root) = root.filter(|r| !r.as_os_str().is_empty()) {
            self.storage_root = Some(root);
        }
    }

    pub fn in_memory() -> Self {
        ServiceConfig::default()
    }

    pub fn poll_interval(&self) -> Duration {
        Duration::from_millis(self.poll_interval_ms.max(1))
    }

    pub fn idle_grace(&self) -> Duration {
        Duration::from_secs_f64(self.idle_grace_s.max(0.0))
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig { batch_size: self.batch_size.max(1), dedup_capacity: self.dedup_capacity, cascade_limit: DEFAULT_CASCADE_LIMIT }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ServiceConfig::default();
        assert_eq!(c.poll_interval(), Duration::from_millis(100));
        assert_eq!(c.idle_grace(), Duration::from_secs(10));
        assert_eq!(c.batch_size, 500);
    }

    #[test]
    fn partial_file_and_env_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tf.json");
        std::fs::write(&path, r#"{"storage_root": "/data/a", "idle_grace_s": 0.5}"#).unwrap();
        let mut c = ServiceConfig::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(c.idle_grace(), Duration::from_millis(500));
        assert_eq!(c.batch_size, 500);
        c.apply_env(Some("/data/b".into()));
        assert_eq!(c.storage_root, Some(PathBuf::from("/data/b")));
        c.apply_env(None);
        assert_eq!(c.storage_root, Some(PathBuf::from("/data/b")));
        assert!(ServiceConfig::from_json(r#"{"batch_size": "x"}"#).is_err());
    }
}
