//! Named parameter vectors, one per line: `name v1 v2 ...`.

use std::fmt::Write as _;
use std::path::Path;

use super::{parse_err, parse_f64, read_text, write_text};
use crate::error::{Error, Result};

/// Insertion-ordered map of named parameter vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamMap {
    entries: Vec<(String, Vec<f64>)>,
}

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>) {
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "bad parameter name '{name}'"
        );
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(e) => e.1 = values,
            None => self.entries.push((name.to_string(), values)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// The named vector, which must have exactly `len` entries.
    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let v = self
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter '{name}'")))?;
        if v.len() != len {
            return Err(Error::InvalidInput(format!(
                "parameter '{name}' has {} values, expected {len}",
                v.len()
            )));
        }
        Ok(v.to_vec())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.vector(name, 1)?[0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, values) in &self.entries {
            s.push_str(name);
            for v in values {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = ParamMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut toks = line.split_whitespace();
            let name = toks.next().unwrap_or_default();
            if m.get(name).is_some() {
                return Err(parse_err(path, i + 1, format!("duplicate parameter '{name}'")));
            }
            let values = toks
                .map(|t| parse_f64(t, path, i + 1))
                .collect::<Result<Vec<f64>>>()?;
            m.insert(name, values);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }
}
