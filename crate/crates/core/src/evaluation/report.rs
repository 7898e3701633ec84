//! WER grids: rows are training runs, columns are test sets.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{slug, NormalizationPolicy, WerResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowKey {
    pub train_corpus: String,
    pub hours: f64,
    /// Pretraining chain, e.g. "Scratch" or "en-train→".
    pub provenance: String,
}

impl RowKey {
    pub fn label(&self) -> String {
        format!(
            "{} ({:.3} h) [{}]",
            self.train_corpus, self.hours, self.provenance
        )
    }

    pub(crate) fn slug(&self) -> String {
        slug(&format!(
            "{}_{}h_{}",
            self.train_corpus, self.hours, self.provenance
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnKey {
    pub test_corpus: String,
    pub domain: String,
}

impl ColumnKey {
    pub fn label(&self) -> String {
        format!("{} ({})", self.test_corpus, self.domain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Percentage.
    pub wer: f64,
    pub errors: usize,
    pub n_ref_words: usize,
    pub results_file: Option<String>,
}

impl Cell {
    pub fn from_wer(w: &WerResult, results_file: Option<String>) -> Self {
        Self {
            wer: 100.0 * w.wer,
            errors: w.errors(),
            n_ref_words: w.n_ref_words,
            results_file,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub rows: Vec<RowKey>,
    pub columns: Vec<ColumnKey>,
    /// `(row index, column index, cell)`.
    pub cells: Vec<(usize, usize, Cell)>,
    pub normalization: NormalizationPolicy,
    /// Warnings such as skipped budgets.
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(title: impl Into<String>, normalization: NormalizationPolicy) -> Self {
        Self {
            title: title.into(),
            normalization,
            ..Default::default()
        }
    }

    fn row_index(&mut self, row: RowKey) -> usize {
        match self.rows.iter().position(|r| *r == row) {
            Some(i) => i,
            None => {
                self.rows.push(row);
                self.rows.len() - 1
            }
        }
    }

    fn column_index(&mut self, col: ColumnKey) -> usize {
        match self.columns.iter().position(|c| *c == col) {
            Some(i) => i,
            None => {
                self.columns.push(col);
                self.columns.len() - 1
            }
        }
    }

    pub fn set(&mut self, row: RowKey, col: ColumnKey, cell: Cell) {
        let r = self.row_index(row);
        let c = self.column_index(col);
        self.cells.retain(|(a, b, _)| (*a, *b) != (r, c));
        self.cells.push((r, c, cell));
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|(r, c, _)| (*r, *c) == (row, col))
            .map(|(_, _, cell)| cell)
    }

    pub fn find(&self, row: &RowKey, col: &ColumnKey) -> Option<&Cell> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|x| x == col)?;
        self.get(r, c)
    }

    /// Merges another report's rows into this one.
    pub fn absorb(&mut self, other: &EvalReport) {
        for (r, c, cell) in &other.cells {
            self.set(
                other.rows[*r].clone(),
                other.columns[*c].clone(),
                cell.clone(),
            );
        }
        self.notes.extend(other.notes.iter().cloned());
    }

    pub fn footer(&self) -> String {
        format!(
            "WER in %, micro-averaged over utterances; normalization: {}",
            self.normalization.describe()
        )
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "train_corpus".to_string(),
            "hours".into(),
            "provenance".into(),
        ];
        header.extend(self.columns.iter().map(ColumnKey::label));
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![
                row.train_corpus.clone(),
                format!("{}", row.hours),
                row.provenance.clone(),
            ];
            for j in 0..self.columns.len() {
                rec.push(
                    self.get(i, j)
                        .map_or(String::new(), |c| format!("{:.1}", c.wer)),
                );
            }
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut head = vec!["training run".to_string()];
        head.extend(self.columns.iter().map(ColumnKey::label));
        let mut lines = vec![head];
        for (i, row) in self.rows.iter().enumerate() {
            let mut l = vec![row.label()];
            for j in 0..self.columns.len() {
                l.push(
                    self.get(i, j)
                        .map_or("-".into(), |c| format!("{:.1}", c.wer)),
                );
            }
            lines.push(l);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| {
                lines
                    .iter()
                    .map(|l| l[j].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        for (n, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    if j == 0 {
                        format!("{s:<w$}", w = widths[j])
                    } else {
                        format!("{s:>w$}", w = widths[j])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if n == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        let _ = writeln!(out, "{}", self.footer());
        out
    }

    /// Writes `report.csv`, `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.write_as(dir, "report")
    }

    /// Writes `<stem>.csv`, `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write_as(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let put = |ext: &str, body: String| {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put("csv", self.to_csv()?)?;
        put("txt", self.to_text())?;
        put("json", serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
