//! Plain-text tabular records.
//!
//! All run artifacts (training reports, baseline results, metric tables)
//! share one line format: a `# <title> v1` line, a `# columns: ...` line,
//! then one whitespace-separated row per record. A file may hold several
//! sections; timing data lives in its own section so the main section
//! stays byte-reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, columns: &[&str]) -> Self {
        Table {
            title: title.to_string(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {} v1\n", self.title));
        out.push_str(&format!("# columns: {}\n", self.columns.join(" ")));
        for row in &self.rows {
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn render_sections(tables: &[&Table]) -> String {
    tables.iter().map(|t| t.render()).collect::<Vec<_>>().join("")
}

pub fn parse_sections(text: &str) -> Result<Vec<Table>> {
    let mut tables: Vec<Table> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# columns: ") {
            let t = tables
                .last_mut()
                .ok_or_else(|| Error::format(lineno as u64, "columns line before any section title"))?;
            t.columns = rest.split_whitespace().map(|s| s.to_string()).collect();
        } else if let Some(rest) = line.strip_prefix("# ") {
            let title = rest.strip_suffix(" v1").ok_or_else(|| {
                Error::format(lineno as u64, format!("section {rest:?} lacks a version suffix"))
            })?;
            tables.push(Table { title: title.to_string(), columns: Vec::new(), rows: Vec::new() });
        } else {
            let t = tables
                .last_mut()
                .ok_or_else(|| Error::format(lineno as u64, "data row before any section title"))?;
            let cells: Vec<String> = line.split_whitespace().map(|s| s.to_string()).collect();
            if cells.len() != t.columns.len() {
                return Err(Error::format(
                    lineno as u64,
                    format!("row has {} cells, section {:?} declares {} columns", cells.len(), t.title, t.columns.len()),
                ));
            }
            t.rows.push(cells);
        }
    }
    Ok(tables)
}

/// Shortest round-trip decimal form of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let mut a = Table::new("crgat-train-report", &["epoch", "loss"]);
        a.push_row(vec!["0".into(), fmt_f64(-1.25)]);
        a.push_row(vec!["1".into(), fmt_f64(-2.5e-3)]);
        let mut b = Table::new("timing", &["sample", "seconds"]);
        b.push_row(vec!["0".into(), fmt_f64(0.125)]);
        let text = render_sections(&[&a, &b]);
        let parsed = parse_sections(&text).unwrap();
        assert_eq!(parsed, vec![a, b]);
    }

    #[test]
    fn row_width_mismatch_is_format_error() {
        let text = "# t v1\n# columns: a b\n1 2 3\n";
        assert!(matches!(parse_sections(text), Err(Error::Format { .. })));
    }

    #[test]
    fn f64_formatting_round_trips() {
        for v in [0.1, -3.25, 1e-17, 12345.6789, f64::MAX] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
