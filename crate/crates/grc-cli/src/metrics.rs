//! Metrics CSV: append-only writer and a strict reader.
//!
//! Columns are `step,split,loss,accuracy` followed by one `lambda.{i}`
//! column per cached layer. Accuracy is blank when a batch had no labeled
//! targets; floats are written with `{:?}` so a file parses back to the
//! same bits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use grc_core::trainer::MetricsRecord;
use grc_core::{Error, Result};

use crate::error::{CliError, CliResult};

pub struct MetricsWriter {
    out: BufWriter<File>,
    lambda_layers: usize,
}

impl MetricsWriter {
    /// Creates (or truncates) the file and writes a header for a model
    /// with `lambda_layers` cached layers.
    pub fn create(path: &Path, lambda_layers: usize) -> CliResult<MetricsWriter> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = MetricsWriter { out: BufWriter::new(file), lambda_layers };
        let mut header = String::from("step,split,loss,accuracy");
        for i in 0..lambda_layers {
            header.push_str(&format!(",lambda.{i}"));
        }
        w.raw_line(&header)?;
        Ok(w)
    }

    fn raw_line(&mut self, line: &str) -> CliResult<()> {
        writeln!(self.out, "{line}").map_err(|e| CliError::Io(format!("metrics write: {e}")))
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> CliResult<()> {
        let mut line = format!(
            "{},{},{:?},{}",
            rec.step,
            rec.split.as_str(),
            rec.loss,
            rec.accuracy.map(|a| format!("{a:?}")).unwrap_or_default(),
        );
        debug_assert_eq!(rec.lambda_mean.len(), self.lambda_layers);
        for v in &rec.lambda_mean {
            line.push_str(&format!(",{v:?}"));
        }
        self.raw_line(&line)
    }

    pub fn flush(&mut self) -> CliResult<()> {
        self.out
            .flush()
            .map_err(|e| CliError::Io(format!("metrics flush: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lambda: Vec<f64>,
}

fn field<T: std::str::FromStr>(raw: &str, what: &str, line_no: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::data(format!("metrics line {line_no}: bad {what} '{raw}'")))
}

/// Parses a metrics file back into rows, validating the header and every
/// line's arity. Errors carry 1-based line numbers.
pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data("metrics line 1: empty file, expected a header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..4] != ["step", "split", "loss", "accuracy"] {
        return Err(Error::data(format!("metrics line 1: unexpected header '{header}'")).into());
    }
    let lambda_cols = cols.len() - 4;

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != cols.len() {
            return Err(Error::data(format!(
                "metrics line {line_no}: {} fields, header has {}",
                parts.len(),
                cols.len()
            ))
            .into());
        }
        let accuracy = if parts[3].is_empty() {
            None
        } else {
            Some(field(parts[3], "accuracy", line_no)?)
        };
        let lambda = parts[4..]
            .iter()
            .map(|raw| field(raw, "lambda", line_no))
            .collect::<Result<Vec<f64>>>()?;
        debug_assert_eq!(lambda.len(), lambda_cols);
        rows.push(MetricsRow {
            step: field(parts[0], "step", line_no)?,
            split: parts[1].to_string(),
            loss: field(parts[2], "loss", line_no)?,
            accuracy,
            lambda,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use grc_core::trainer::Split;

    fn record(step: u64, loss: f64, acc: Option<f64>, lambda: Vec<f64>) -> MetricsRecord {
        MetricsRecord { step, split: Split::Train, loss, accuracy: acc, lambda_mean: lambda }
    }

    #[test]
    fn rows_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path, 2).unwrap();
        w.append(&record(1, 0.1 + 0.2, Some(2.0 / 3.0), vec![0.5, 0.25])).unwrap();
        w.append(&record(2, f64::MIN_POSITIVE, None, vec![0.49999999999, 1.0])).unwrap();
        w.flush().unwrap();

        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].loss.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(rows[0].accuracy.unwrap().to_bits(), (2.0f64 / 3.0).to_bits());
        assert_eq!(rows[1].accuracy, None);
        assert_eq!(rows[1].lambda[0].to_bits(), 0.49999999999f64.to_bits());
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        std::fs::write(&path, "step,split,loss,accuracy\n1,train,0.5,\nx,train,0.5,\n").unwrap();
        let msg = format!("{}", read_metrics(&path).unwrap_err());
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("bad step 'x'"), "{msg}");
    }

    #[test]
    fn wrong_arity_and_header_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        std::fs::write(&path, "step,split,loss,accuracy\n1,train,0.5\n").unwrap();
        let msg = format!("{}", read_metrics(&path).unwrap_err());
        assert!(msg.contains("line 2"), "{msg}");

        std::fs::write(&path, "loss,step\n").unwrap();
        let msg = format!("{}", read_metrics(&path).unwrap_err());
        assert!(msg.contains("header"), "{msg}");
    }

    #[test]
    fn missing_file_is_an_io_failure() {
        let err = read_metrics(Path::new("/nonexistent/metrics.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
