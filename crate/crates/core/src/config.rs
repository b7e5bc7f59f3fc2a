//! `key = value` text with `[section]` headers.
//!
//! Used for run configuration files and for the network description stored
//! in checkpoints. Serialisation is canonical: sections and keys come out in
//! insertion order, one `key = value` per line, numbers printed with Rust's
//! shortest round-trip formatting, so parse → print is byte-stable.

use std::fmt::{self, Display};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Doc {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Doc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Doc::new();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {}: empty section name", lineno + 1)));
                }
                doc.section_mut(name);
                current = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            let Some(section) = current.as_deref() else {
                return Err(Error::Config(format!("line {}: key outside of any [section]", lineno + 1)));
            };
            let key = key.trim();
            if doc.get(section, key).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {section}.{key}", lineno + 1)));
            }
            doc.set(section, key, value.trim());
        }
        Ok(doc)
    }

    fn section_mut(&mut self, name: &str) -> &mut Vec<(String, String)> {
        let idx = match self.sections.iter().position(|(n, _)| n == name) {
            Some(i) => i,
            None => {
                self.sections.push((name.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        &mut self.sections[idx].1
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Display) {
        let value = value.to_string();
        let entries = self.section_mut(section);
        match entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)?
            .1
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Remove and return a value.
    pub fn take(&mut self, section: &str, key: &str) -> Option<String> {
        let entries = &mut self.sections.iter_mut().find(|(n, _)| n == section)?.1;
        let idx = entries.iter().position(|(k, _)| k == key)?;
        Some(entries.remove(idx).1)
    }

    /// Remove a value and parse it into `slot` if present.
    pub fn take_parse<V: FromStr>(&mut self, section: &str, key: &str, slot: &mut V) -> Result<()> {
        if let Some(v) = self.take(section, key) {
            *slot = parse_value(&v, &format!("{section}.{key}"))?;
        }
        Ok(())
    }

    /// Overlay every entry of `other` onto `self`.
    pub fn merge(&mut self, other: &Doc) {
        for (section, entries) in &other.sections {
            for (k, v) in entries {
                self.set(section, k, v);
            }
        }
    }

    /// Error naming every entry still present; call after all known keys
    /// were taken.
    pub fn ensure_consumed(&self) -> Result<()> {
        let left: Vec<String> = self
            .sections
            .iter()
            .flat_map(|(s, e)| e.iter().map(move |(k, _)| format!("{s}.{k}")))
            .collect();
        if left.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", left.join(", "))))
        }
    }
}

impl Display for Doc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (name, entries) in &self.sections {
            if entries.is_empty() {
                continue;
            }
            if !first {
                writeln!(f)?;
            }
            first = false;
            writeln!(f, "[{name}]")?;
            for (k, v) in entries {
                writeln!(f, "{k} = {v}")?;
            }
        }
        Ok(())
    }
}

pub fn parse_value<V: FromStr>(text: &str, what: &str) -> Result<V> {
    text.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{what}: cannot parse `{text}`")))
}

pub fn join<V: Display>(values: &[V]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn split<V: FromStr>(text: &str, what: &str) -> Result<Vec<V>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',').map(|t| parse_value(t, what)).collect()
}
