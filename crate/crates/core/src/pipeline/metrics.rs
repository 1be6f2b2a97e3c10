use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,split,metric,value";

/// Formats `v` with 9 significant digits, `%g` style.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..9).contains(&exp) {
        let s = format!("{v:.8e}");
        let (mantissa, e) = s.split_once('e').expect("exponent");
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{mantissa}e{e}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.split, self.metric, fmt_sig(self.value))
    }
}

/// Metric rows kept in memory and, optionally, appended to a CSV file one
/// batch at a time.
#[derive(Debug, Default)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
    path: Option<PathBuf>,
    flushed: usize,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Starts a fresh CSV file at `path` holding only the header.
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        std::fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsLog {
            rows: Vec::new(),
            path: Some(path),
            flushed: 0,
        })
    }

    pub fn push(&mut self, step: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            step,
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Values of one `(split, metric)` series with their steps.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    /// Appends every row not yet written with a single write call.
    pub fn flush(&mut self) -> Result<()> {
        let Some(path) = &self.path else {
            self.flushed = self.rows.len();
            return Ok(());
        };
        if self.flushed == self.rows.len() {
            return Ok(());
        }
        let mut chunk = String::new();
        for r in &self.rows[self.flushed..] {
            chunk.push_str(&r.csv());
            chunk.push('\n');
        }
        let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        f.write_all(chunk.as_bytes()).map_err(|e| Error::io(path, e))?;
        self.flushed = self.rows.len();
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }
}

/// Parses a metrics CSV written by [`MetricsLog`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{} lacks the header {METRICS_HEADER}", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = || Error::Format(format!("{}:{}: malformed row {l:?}", path.display(), i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricRow {
                step: f[0].parse().map_err(|_| bad())?,
                split: f[1].into(),
                metric: f[2].into(),
                value: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(123456.7891234), "123456.789");
        assert_eq!(fmt_sig(-2.5), "-2.5");
        assert_eq!(fmt_sig(1.234e-7), "1.234e-7");
        assert_eq!(fmt_sig(2.0e12), "2e12");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = MetricsLog::create(&path).unwrap();
        log.push(1, "train", "loss", 2.0);
        log.flush().unwrap();
        log.push(2, "valid", "gleu", 0.25);
        log.flush().unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows, log.rows());
        assert_eq!(std::fs::read_to_string(&path).unwrap(), log.to_csv());
    }
}
