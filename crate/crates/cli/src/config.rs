//! Flat `key = value` config files and flag resolution.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are ignored.
//! Keys use the long flag names (`lr`, `per-class`, ...). A value given on the
//! command line wins over the file, which wins over the built-in default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;

use crate::UsageError;

#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn from_file(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Ok(Self {
            file: parse(&text)?,
            resolved: BTreeMap::new(),
        })
    }

    /// Resolves `key` from the flag, the file, then `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(raw)) => raw
                .parse()
                .map_err(|e| UsageError(format!("config key `{key}`: cannot parse `{raw}`: {e}")))?,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`get`](Self::get) for settings without a default.
    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> anyhow::Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.opt(key, flag)? {
            Some(v) => Ok(v),
            None => Err(UsageError(format!("missing required setting --{key}")).into()),
        }
    }

    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> anyhow::Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => Some(v),
            (None, Some(raw)) => Some(
                raw.parse()
                    .map_err(|e| UsageError(format!("config key `{key}`: cannot parse `{raw}`: {e}")))?,
            ),
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
        self.require(key, flag.map(|p| p.display().to_string()))
            .map(PathBuf::from)
    }

    pub fn opt_path(&mut self, key: &str, flag: Option<PathBuf>) -> anyhow::Result<Option<PathBuf>> {
        Ok(self.opt(key, flag.map(|p| p.display().to_string()))?.map(PathBuf::from))
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn parse(text: &str) -> Result<BTreeMap<String, String>, UsageError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(UsageError(format!("config line {}: expected key = value", i + 1)));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Comma-separated list value, e.g. `--holdout gravel,turf`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}
