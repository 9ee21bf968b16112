//! `key = value` run configuration shared by `train` and `eval`.

use std::fs;
use std::path::Path;

use flowmamba_core::pipeline::{NetworkConfig, TrainConfig};

use crate::error::{CliError, Result};

/// Network, optimizer and step budget of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if key == "steps" {
            self.train.total_steps = value
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid value `{value}` for `steps`")))?;
            return Ok(());
        }
        if NetworkConfig::KEYS.contains(&key) {
            self.network.set(key, value)?;
        } else if TrainConfig::KEYS.contains(&key) {
            self.train.set(key, value)?;
        } else {
            return Err(CliError::Usage(format!("unknown configuration key `{key}`")));
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Reads a config file; blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::format(path, format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                CliError::Usage(m) | CliError::Core(flowmamba_core::Error::Config(m)) => {
                    CliError::Usage(format!("{}:{}: {m}", path.display(), n + 1))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Every option in file syntax, loadable with [`RunConfig::apply_file`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.network.entries().into_iter().chain(self.train.entries()) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("steps = {}\n", self.train.total_steps));
        out
    }
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::files::write_bytes(path, text.as_bytes())
}
