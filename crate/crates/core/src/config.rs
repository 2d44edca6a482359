//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key must be consumed by
//! the reader; leftovers are reported as unknown keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl FlatConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::parse(path, line, "expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(path, line, "empty key"));
            }
            if entries
                .insert(key.to_string(), (line, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::parse(path, line, format!("duplicate key `{key}`")));
            }
        }
        Ok(FlatConfig {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        FlatConfig {
            path: PathBuf::from("<inline>"),
            entries: pairs
                .into_iter()
                .enumerate()
                .map(|(i, (k, v))| (k.to_string(), (i + 1, v.to_string())))
                .collect(),
        }
    }

    /// Overrides (or adds) a key, e.g. from a command-line flag.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    /// Removes and parses `key`, leaving `target` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, value)) = self.entries.remove(key) {
            *target = value.parse().map_err(|e: T::Err| {
                Error::parse(&self.path, line, format!("bad value for `{key}`: {e}"))
            })?;
        }
        Ok(())
    }

    pub fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .remove(key)
            .map(|(line, value)| {
                value.parse().map_err(|e: T::Err| {
                    Error::parse(&self.path, line, format!("bad value for `{key}`: {e}"))
                })
            })
            .transpose()
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::parse(
                &self.path,
                line,
                format!("unknown configuration key `{key}`"),
            )),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
