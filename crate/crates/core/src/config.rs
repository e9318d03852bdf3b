//! Flat `key=value` configuration files.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Later assignments (including command-line overrides) win.
//! Every key must be consumed by the reader, so typos are reported.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            kv.set_assignment(line).map_err(|message| Error::Parse {
                line: n + 1,
                message,
            })?;
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set_assignment(&mut self, line: &str) -> std::result::Result<(), String> {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got '{line}'"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(format!("empty key in '{line}'"));
        }
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value` overrides on top of the file contents.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            self.set_assignment(o.as_ref())
                .map_err(|m| Error::Config(format!("override: {m}")))?;
        }
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Removes and parses `key`; `Ok(None)` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value '{raw}' for '{key}'"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Errors if any key was left unread.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<_> = self.entries.keys().cloned().collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut kv = KeyValues::parse("# header\n\na = 1\nb=two\n").unwrap();
        kv.apply_overrides(&["a=5"]).unwrap();
        assert_eq!(kv.take::<u32>("a").unwrap(), Some(5));
        assert_eq!(kv.take::<String>("b").unwrap().as_deref(), Some("two"));
        assert_eq!(kv.take::<u32>("c").unwrap(), None);
        kv.finish().unwrap();
    }

    #[test]
    fn reports_line_of_bad_assignment() {
        match KeyValues::parse("a=1\nnonsense\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut kv = KeyValues::parse("a=1\ntypo=3\n").unwrap();
        kv.take::<u32>("a").unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("typo"));
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut kv = KeyValues::parse("a=x\n").unwrap();
        assert!(kv.take::<u32>("a").is_err());
    }
}
