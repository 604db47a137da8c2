//! Flat `key = value` run configuration.
//!
//! Every command resolves each of its parameters as flag, else config-file
//! entry, else built-in default, and records the winning value. The recorded
//! map is written next to the outputs as `config.txt`, which can be passed
//! back through `--config` to repeat the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Bad flags, bad config entries or an invalid combination of them (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, UsageError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(UsageError(format!("config line {}: expected key = value", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(UsageError(format!("config line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(UsageError(format!("config line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

pub fn render_config(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// A float that also accepts `a/b`, so budgets can be written as `1/255`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl FromStr for Num {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("invalid number {s:?}");
        let v = match s.split_once('/') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                a / b
            }
            None => s.trim().parse().map_err(|_| bad())?,
        };
        if v.is_finite() {
            Ok(Num(v))
        } else {
            Err(bad())
        }
    }
}

impl fmt::Display for Num {
    // shortest representation that parses back to the same bits
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Comma-separated list.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items = s
            .split(',')
            .map(|x| x.trim().parse::<T>().map_err(|_| format!("invalid list item {x:?}")))
            .collect::<Result<Vec<T>, String>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// `--x` / `--no-x` pair to an optional override.
pub fn switch(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

pub struct Resolver {
    root: PathBuf,
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(root: PathBuf, file: BTreeMap<String, String>) -> Self {
        Self {
            root,
            file,
            used: BTreeSet::new(),
            resolved: BTreeMap::new(),
        }
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        self.used.insert(key.to_string());
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(s)) => s
                .parse::<T>()
                .map_err(|e| usage(format!("config key {key}: {e}")))?,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// A path parameter; relative values are taken under the output root.
    pub fn path(&mut self, key: &str, flag: Option<PathBuf>, default: &str) -> anyhow::Result<PathBuf> {
        let p = self.get(key, flag.map(|p| p.display().to_string()), default.to_string())?;
        Ok(self.root.join(p))
    }

    /// Fails on config keys the command never asked for.
    pub fn finish(self) -> anyhow::Result<BTreeMap<String, String>> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.used.contains(*k)).collect();
        if !unknown.is_empty() {
            let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            return Err(usage(format!("unknown config keys: {}", names.join(", "))));
        }
        Ok(self.resolved)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}
