//! Per-iteration metrics as CSV.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::meta::MetricRecord;
use crate::objective::ElboBreakdown;

pub const METRICS_HEADER: &str = "iter,elbo_total,likelihood,kl_xi,kl_w,eval_metric,wallclock_ms";

pub fn format_record(r: &MetricRecord) -> String {
    let eval = r.eval_metric.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{:.3}",
        r.iter, r.elbo.total, r.elbo.likelihood_term, r.elbo.kl_xi, r.elbo.kl_w, eval, r.wallclock_ms
    )
}

pub fn parse_record(line: &str) -> Result<MetricRecord> {
    let f: Vec<&str> = line.trim_end().split(',').collect();
    if f.len() != 7 {
        return Err(Error::Data(format!("metrics row has {} fields, expected 7", f.len())));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Data(format!("metrics field '{s}' is not a number")))
    };
    Ok(MetricRecord {
        iter: f[0]
            .parse()
            .map_err(|_| Error::Data(format!("metrics iter '{}' is not an integer", f[0])))?,
        elbo: ElboBreakdown {
            total: num(f[1])?,
            likelihood_term: num(f[2])?,
            kl_xi: num(f[3])?,
            kl_w: num(f[4])?,
        },
        eval_metric: if f[5].is_empty() { None } else { Some(num(f[5])?) },
        wallclock_ms: num(f[6])?,
    })
}

/// Appends rows; writes the header only when the file starts empty.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let empty = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if empty {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        writeln!(self.out, "{}", format_record(r))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(METRICS_HEADER) => {}
        other => return Err(Error::Data(format!("unexpected metrics header {other:?}"))),
    }
    lines.filter(|l| !l.is_empty()).map(parse_record).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iter: u64, eval: Option<f64>) -> MetricRecord {
        MetricRecord {
            iter,
            elbo: ElboBreakdown {
                likelihood_term: -1.25,
                kl_xi: 0.5,
                kl_w: 3.0,
                total: -4.75,
            },
            eval_metric: eval,
            wallclock_ms: 12.5,
        }
    }

    #[test]
    fn rows_round_trip() {
        for r in [record(0, None), record(9, Some(0.8125))] {
            assert_eq!(parse_record(&format_record(&r)).unwrap(), r);
        }
    }

    #[test]
    fn append_keeps_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        for iter in 0..2 {
            let mut w = MetricsWriter::append(&path).unwrap();
            w.write(&record(iter, None)).unwrap();
            w.flush().unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("iter,").count(), 1);
        assert_eq!(read_metrics(&path).unwrap().len(), 2);
    }

    #[test]
    fn bad_rows_are_data_errors() {
        assert!(matches!(parse_record("1,2,3"), Err(Error::Data(_))));
        assert!(matches!(parse_record("x,1,1,1,1,,1"), Err(Error::Data(_))));
    }
}
