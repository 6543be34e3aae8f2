//! Per-step training metrics as CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fmt::sig10;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
    /// Per-level loss contributions; empty except for the DDM objective.
    pub levels: Vec<f64>,
}

pub fn header(levels: usize) -> String {
    let mut h = String::from("step,loss,lr,seconds");
    for l in 1..=levels {
        h.push_str(&format!(",level_{l}"));
    }
    h
}

pub fn format_row(row: &MetricsRow) -> String {
    let mut s = format!(
        "{},{},{},{}",
        row.step,
        sig10(row.loss),
        sig10(row.lr),
        sig10(row.seconds)
    );
    for v in &row.levels {
        s.push(',');
        s.push_str(&sig10(*v));
    }
    s
}

/// Writes `rows` under a header sized by the first row.
pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::invalid("no metrics rows to write"));
    };
    let mut w = MetricsWriter::create(path, first.levels.len())?;
    for r in rows {
        w.push(r)?;
    }
    w.finish()
}

/// Streams rows to disk as training proceeds.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    levels: usize,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path, levels: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            levels,
            last_step: None,
        };
        w.line(&header(levels))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        if row.levels.len() != self.levels {
            return Err(Error::shape(format!(
                "{} level values for {} columns",
                row.levels.len(),
                self.levels
            )));
        }
        if self.last_step.is_some_and(|s| row.step <= s) {
            return Err(Error::invalid(format!("metrics step {} is not increasing", row.step)));
        }
        self.last_step = Some(row.step);
        self.line(&format_row(row))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
