//! Plain CSV: header row, UTF-8, '.' decimal separator, '\n' line endings.
//! Floats print in Rust's shortest round-trip form so reruns are
//! byte-identical.

use crate::CliError;
use std::fs;
use std::path::Path;

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| CliError::Module(format!("creating {}: {e}", parent.display())))?;
            }
        }
        let mut text = String::new();
        text.push_str(&self.header.join(","));
        text.push('\n');
        for row in &self.rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(path, text)
            .map_err(|e| CliError::Module(format!("writing {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| CliError::Config(format!("{}: empty file", path.display())))?
            .split(',')
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(|s| s.to_string()).collect())
            .collect();
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("missing CSV column {name:?}")))
    }

    pub fn float(&self, row: &[String], col: usize) -> Result<f64, CliError> {
        row[col]
            .parse::<f64>()
            .map_err(|e| CliError::Config(format!("bad float {:?}: {e}", row[col])))
    }
}

pub fn f(v: f64) -> String {
    format!("{v}")
}
