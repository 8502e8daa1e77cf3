//! Plain-text table shared by step traces and metric reports.
//!
//! ```text
//! # key=value          (zero or more header lines)
//! col_a col_b col_c    (column names)
//! v v v                (one whitespace-separated row per record)
//! ```

use std::fmt::Write as _;
use std::io::{self, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextTable {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Fixed float formatting used in every table cell.
pub fn fmt_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.9e}")
    }
}

impl TextTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            meta: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push_row(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        if let Some(cell) = row.iter().find(|c| c.is_empty() || c.contains(char::is_whitespace)) {
            return Err(Error::invalid(format!("cell {cell:?} is empty or contains whitespace")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "{}", self.columns.join(" "));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(self.render().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = TextTable::default();
        let mut have_columns = false;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("header line without '=': {line:?}")))?;
                table.meta.push((k.to_string(), v.to_string()));
            } else if line.trim().is_empty() {
                continue;
            } else if !have_columns {
                table.columns = line.split_whitespace().map(str::to_string).collect();
                have_columns = true;
            } else {
                let row: Vec<String> = line.split_whitespace().map(str::to_string).collect();
                if row.len() != table.columns.len() {
                    return Err(Error::Format(format!("row width {} != {}", row.len(), table.columns.len())));
                }
                table.rows.push(row);
            }
        }
        if !have_columns {
            return Err(Error::Format("table has no column header".into()));
        }
        Ok(table)
    }
}
