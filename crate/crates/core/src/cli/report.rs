use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::CliError;

/// One CSV file: header plus rows of already formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file_stem: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file_stem: impl Into<String>, header: &[&str]) -> Self {
        Self {
            file_stem: file_stem.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl Verdict {
    /// Passes when `value ≤ tolerance`.
    pub fn at_most(check: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            passed: value <= tolerance,
            value,
            tolerance,
        }
    }

    /// Passes when `value ≥ bound`.
    pub fn at_least(check: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            check: check.into(),
            passed: value >= bound,
            value,
            tolerance: bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub params_hash: String,
    pub verdicts: Vec<Verdict>,
    pub max_residuals: BTreeMap<String, f64>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_csv(path: &Path, table: &Table) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    writer.write_record(&table.header).map_err(io)?;
    for row in &table.rows {
        writer.write_record(row).map_err(io)?;
    }
    writer.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes every table as `<dir>/<stem>.csv` and the summary as
/// `<dir>/summary.json` with sorted keys.
pub fn emit_report(dir: &Path, tables: &[Table], summary: &Summary) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::with_capacity(tables.len() + 1);
    for table in tables {
        let path = dir.join(format!("{}.csv", table.file_stem));
        write_csv(&path, table)?;
        written.push(path);
    }
    let path = dir.join("summary.json");
    let value = serde_json::to_value(summary).expect("summary serializes");
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let table = Table::new("empty", &["n", "value"]);
        let path = dir.path().join("empty.csv");
        write_csv(&path, &table).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "n,value\n");
    }

    #[test]
    fn quoting_follows_rfc4180() {
        let dir = tempfile::tempdir().unwrap();
        let mut table = Table::new("q", &["window"]);
        table.push(vec!["{-1..1}x{0,1}".into()]);
        table.push(vec!["say \"hi\"".into()]);
        let path = dir.path().join("q.csv");
        write_csv(&path, &table).unwrap();
        assert_eq!(
            std::fs::read_to_string(path).unwrap(),
            "window\n\"{-1..1}x{0,1}\"\n\"say \"\"hi\"\"\"\n"
        );
    }

    #[test]
    fn summary_keys_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let summary = Summary {
            experiment: "evolve".into(),
            params_hash: "00".into(),
            verdicts: vec![Verdict::at_most("x", 0.0, 1.0)],
            max_residuals: BTreeMap::from([("b".into(), 1.0), ("a".into(), 2.0)]),
        };
        emit_report(dir.path(), &[], &summary).unwrap();
        let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        let keys: Vec<usize> = ["experiment", "max_residuals", "params_hash", "verdicts"]
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert!(text.find("\"a\"").unwrap() < text.find("\"b\"").unwrap());
    }
}
