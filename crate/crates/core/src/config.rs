//! Key-value configuration text files.
//!
//! One `key = value` pair per line. Blank lines and lines starting with `#`
//! are ignored, and a key may repeat (e.g. one `source = ...` line per
//! source). List values are separated by commas and/or whitespace.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}` (line {line}): {message}")]
    Value { key: String, line: usize, message: String },
    #[error("unknown key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parsed key-value document, preserving order and duplicates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<Entry>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("expected `key = value`, found `{trimmed}`"),
                });
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("invalid key `{key}`"),
                });
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.key == key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|e| e.value.as_str())
    }

    pub fn require_str(&self, key: &str) -> Result<&str, ConfigError> {
        self.get_str(key)
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e.parse().map(Some),
        }
    }

    pub fn require<T>(&self, key: &str) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require_list<T>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.entry(key)
            .ok_or_else(|| ConfigError::Missing(key.to_string()))?
            .parse_list()
    }

    /// Rejects keys outside `known`, catching typos in hand-edited files.
    pub fn check_keys(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(ConfigError::UnknownKey {
                key: e.key.clone(),
                line: e.line,
            }),
            None => Ok(()),
        }
    }
}

impl Entry {
    pub fn parse<T>(&self) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| self.error(e.to_string()))
    }

    pub fn parse_list<T>(&self) -> Result<Vec<T>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        split_list(&self.value)
            .map(|item| item.parse().map_err(|e: T::Err| self.error(format!("`{item}`: {e}"))))
            .collect()
    }

    pub fn error(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            key: self.key.clone(),
            line: self.line,
            message: message.into(),
        }
    }
}

pub fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
}
