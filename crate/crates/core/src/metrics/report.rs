//! Metrics report CSV: `split,metric,bin,value,status`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    pub metric: String,
    /// Empty for unbinned metrics, otherwise `lo-hi`.
    pub bin: String,
    pub value: Option<f64>,
    /// `ok`, or `undefined: <reason>` / `error: <reason>` with an empty value.
    pub status: String,
}

impl MetricRow {
    pub fn new(split: &str, metric: &str, bin: &str, value: Result<f64>) -> Self {
        let (value, status) = match value {
            Ok(v) => (Some(v), "ok".to_string()),
            Err(Error::Undefined(why)) => (None, format!("undefined: {why}")),
            Err(e) => (None, format!("error: {e}")),
        };
        MetricRow {
            split: split.to_string(),
            metric: metric.to_string(),
            bin: bin.to_string(),
            value,
            status,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn bin_label(lo: f64, hi: f64) -> String {
    format!("{lo}-{hi}")
}

pub fn write_rows<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &std::path::Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_serialize_with_status() {
        let rows = vec![
            MetricRow::new("test", "hybrid:AP", "", Ok(0.5)),
            MetricRow::new(
                "test",
                "hybrid:AP",
                "5-10",
                Err(Error::Undefined("no positive pixels".into())),
            ),
        ];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "split,metric,bin,value,status\ntest,hybrid:AP,,0.5,ok\ntest,hybrid:AP,5-10,,undefined: no positive pixels\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, text).unwrap();
        assert_eq!(read_rows(&p).unwrap(), rows);
    }
}
