//! Plain-text key=value config files, merged under explicit flags:
//! a value set on the command line always wins, then the file, then the
//! built-in default. Unknown keys are errors, not warnings.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

pub struct FileOverrides {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl FileOverrides {
    pub fn empty() -> Self {
        FileOverrides { values: BTreeMap::new(), consumed: Default::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {}: expected key=value, got '{raw}'", lineno + 1);
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileOverrides { values, consumed: Default::default() })
    }

    /// Value for `key` parsed as `T`, if the file provides one.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.consumed.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => match raw.parse::<T>() {
                Ok(v) => Ok(Some(v)),
                Err(e) => bail!("config key '{key}': cannot parse '{raw}': {e}"),
            },
        }
    }

    /// Error out if the file holds keys this subcommand never asked about.
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self.values.keys().filter(|k| !consumed.contains(*k)).collect();
        if !unknown.is_empty() {
            bail!(
                "unknown config key(s): {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            );
        }
        Ok(())
    }
}

/// One resolved setting, for the config echo every run prints.
pub fn echo_line(key: &str, value: impl std::fmt::Display) {
    println!("{key} = {value}");
}
