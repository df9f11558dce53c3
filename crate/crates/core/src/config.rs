//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Keys are
//! case-sensitive and may appear once.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("bad value for {key}: {message}")]
    Value { key: String, message: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

pub fn parse_key_values(text: &str) -> Result<KeyValues, ConfigError> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let syntax = |message: &str| ConfigError::Syntax {
            line: i + 1,
            message: message.to_string(),
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| syntax("expected key = value"))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(syntax("empty key"));
        }
        if entries
            .insert(key.to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(syntax(&format!("{key} given twice")));
        }
    }
    Ok(KeyValues { entries })
}

impl KeyValues {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn parse<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    message: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn flag(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        self.get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" | "on" => Ok(true),
                "0" | "false" | "no" | "off" => Ok(false),
                _ => Err(ConfigError::Value {
                    key: key.to_string(),
                    message: format!("{v:?} is not a boolean"),
                }),
            })
            .transpose()
    }

    /// Comma-separated list.
    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key).map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
    }

    /// Fails on any key outside `known`.
    pub fn expect_only(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }
}
