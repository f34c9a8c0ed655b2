//! `tinker.conf` defaults: `key=value` lines read from the working
//! directory, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use crate::commands::CliError;

#[derive(Debug, Default, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &["schema", "namespace", "aliases", "rules", "workers", "patterns"];

impl Config {
    /// Loads `tinker.conf` from the current directory when present.
    pub fn load_default() -> Result<Config, CliError> {
        let path = Path::new("tinker.conf");
        if !path.is_file() {
            return Ok(Config::default());
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("tinker.conf: {}", e)))?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config, CliError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("tinker.conf line {}: expected key=value", idx + 1))
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Usage(format!(
                    "tinker.conf line {}: unknown key {:?}",
                    idx + 1,
                    key
                )));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}
