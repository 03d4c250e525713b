//! `key=value` report records and tab-separated tables.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An ordered list of `key=value` fields, printed space-separated on one line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    fields: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.push(key, value);
        self
    }

    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        let value = value.to_string();
        debug_assert!(!key.contains([' ', '=', '\n']), "bad report key {key:?}");
        match self.fields.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    /// Parses a line written by `Display`. Values must not contain spaces.
    pub fn parse(line: &str) -> Result<Self> {
        let mut r = Record::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::format("report", format!("field {part:?} lacks '='")))?;
            r.push(k, v);
        }
        Ok(r)
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn records_to_text(records: &[Record]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, records_to_text(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(Record::parse)
        .collect()
}

/// Tab-separated table with a header row; columns are the union of keys in
/// first-seen order.
pub fn to_tsv(records: &[Record]) -> String {
    let mut columns: Vec<&str> = Vec::new();
    for r in records {
        for (k, _) in r.fields() {
            if !columns.contains(&k.as_str()) {
                columns.push(k);
            }
        }
    }
    let mut out = columns.join("\t");
    out.push('\n');
    for r in records {
        let row: Vec<&str> = columns.iter().map(|c| r.get(c).unwrap_or("")).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}
