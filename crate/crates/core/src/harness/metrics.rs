//! Per-round metrics and their CSV form.
//!
//! Columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `round` | 1-based round index |
//! | `train_loss` | mean over clients of the post-training batch loss |
//! | `eval_loss` | mean over clients and layers of `\|W - W*_i\|_F^2` for the server's global pair |
//! | `sync_eval_loss` | the same for the pair the clients hold after the download |
//! | `upload_bytes` | encoded bytes sent by all clients this round |
//! | `download_bytes` | encoded broadcast bytes times the number of recipients |
//! | `cumulative_bytes` | running total of both directions |
//! | `rho_b_mean`, `rho_a_mean` | mean realized upload drop ratio |
//! | `residual` | mean decomposition residual `\|w_diff - B dA\|_F` or `\|w_diff - dB A\|_F` |
//! | `ratio_a`, `ratio_b` | mean `\|dA\|/\|A_prev\|` and `\|dB\|/\|B_prev\|` of the global update |
//! | `omitted_norm` | mean `\|dB_i dA_i\|_F` of the clients' local deltas |
//! | `client_losses` | per-client train loss, `;`-separated |
//! | `rho_b_layers`, `rho_a_layers` | per-layer mean drop ratio, `;`-separated |
//!
//! Floats are printed with 9 significant digits. `NaN` marks a value that
//! does not apply: no decomposition under FedAvg, a factor that was not
//! updated this round, or a ratio against a zero factor.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 16] = [
    "round",
    "train_loss",
    "eval_loss",
    "sync_eval_loss",
    "upload_bytes",
    "download_bytes",
    "cumulative_bytes",
    "rho_b_mean",
    "rho_a_mean",
    "residual",
    "ratio_a",
    "ratio_b",
    "omitted_norm",
    "client_losses",
    "rho_b_layers",
    "rho_a_layers",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub sync_eval_loss: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub cumulative_bytes: u64,
    pub rho_b_mean: f64,
    pub rho_a_mean: f64,
    pub residual: f64,
    pub ratio_a: f64,
    pub ratio_b: f64,
    pub omitted_norm: f64,
    pub client_losses: Vec<f64>,
    pub rho_b_layers: Vec<f64>,
    pub rho_a_layers: Vec<f64>,
}

pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        x.to_string()
    }
}

fn format_list(xs: &[f64]) -> String {
    xs.iter().map(|&x| format_float(x)).collect::<Vec<_>>().join(";")
}

fn parse_float(field: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("bad float {field:?}")))
}

fn parse_int(field: &str) -> Result<u64> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("bad integer {field:?}")))
}

fn parse_list(field: &str) -> Result<Vec<f64>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field.split(';').map(parse_float).collect()
}

impl RoundMetrics {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.round.to_string(),
            format_float(self.train_loss),
            format_float(self.eval_loss),
            format_float(self.sync_eval_loss),
            self.upload_bytes.to_string(),
            self.download_bytes.to_string(),
            self.cumulative_bytes.to_string(),
            format_float(self.rho_b_mean),
            format_float(self.rho_a_mean),
            format_float(self.residual),
            format_float(self.ratio_a),
            format_float(self.ratio_b),
            format_float(self.omitted_norm),
            format_list(&self.client_losses),
            format_list(&self.rho_b_layers),
            format_list(&self.rho_a_layers),
        ]
    }

    pub fn from_record(record: &csv::StringRecord) -> Result<Self> {
        if record.len() != COLUMNS.len() {
            return Err(Error::Format(format!(
                "expected {} columns, found {}",
                COLUMNS.len(),
                record.len()
            )));
        }
        let f = |i: usize| parse_float(&record[i]);
        let n = |i: usize| parse_int(&record[i]);
        Ok(Self {
            round: n(0)?,
            train_loss: f(1)?,
            eval_loss: f(2)?,
            sync_eval_loss: f(3)?,
            upload_bytes: n(4)?,
            download_bytes: n(5)?,
            cumulative_bytes: n(6)?,
            rho_b_mean: f(7)?,
            rho_a_mean: f(8)?,
            residual: f(9)?,
            ratio_a: f(10)?,
            ratio_b: f(11)?,
            omitted_norm: f(12)?,
            client_losses: parse_list(&record[13])?,
            rho_b_layers: parse_list(&record[14])?,
            rho_a_layers: parse_list(&record[15])?,
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Streams rows to any writer, flushing after each one.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(COLUMNS).map_err(csv_error)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &RoundMetrics) -> Result<()> {
        self.inner.write_record(row.to_record()).map_err(csv_error)?;
        self.inner.flush()?;
        Ok(())
    }
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

pub fn emit_metrics(metrics: &[RoundMetrics], path: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for row in metrics {
        w.write(row)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?;
    if header.iter().ne(COLUMNS) {
        return Err(Error::Format(format!("unexpected header {header:?}")));
    }
    reader
        .records()
        .map(|r| RoundMetrics::from_record(&r.map_err(csv_error)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(round: u64) -> RoundMetrics {
        RoundMetrics {
            round,
            train_loss: 1.0 / 3.0,
            eval_loss: 2.5e-7,
            sync_eval_loss: 12345.678901234,
            upload_bytes: 100,
            download_bytes: 7,
            cumulative_bytes: 107 * round,
            rho_b_mean: 0.99,
            rho_a_mean: 0.0,
            residual: f64::NAN,
            ratio_a: f64::NAN,
            ratio_b: 0.05,
            omitted_norm: 1e-300,
            client_losses: vec![0.1, 0.2, std::f64::consts::PI],
            rho_b_layers: vec![0.99],
            rho_a_layers: vec![],
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-8 * a.abs().max(b.abs())
    }

    #[test]
    fn csv_round_trip_within_print_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows: Vec<_> = (1..=3).map(sample).collect();
        emit_metrics(&rows, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), COLUMNS.join(","));
        assert_eq!(text.lines().count(), 4);

        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.round, b.round);
            assert_eq!(a.cumulative_bytes, b.cumulative_bytes);
            for (x, y) in a.to_record().iter().zip(b.to_record()) {
                assert_eq!(*x, y);
            }
            assert!(close(a.train_loss, b.train_loss));
            assert!(close(a.sync_eval_loss, b.sync_eval_loss));
            assert!(close(a.residual, b.residual));
            assert!(a.client_losses.iter().zip(&b.client_losses).all(|(x, y)| close(*x, *y)));
            assert!(b.rho_a_layers.is_empty());
        }
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_float(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(format_float(f64::NAN), "NaN");
    }

    #[test]
    fn io_errors_surface() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_metrics(&[sample(1)], &dir.path().join("missing/m.csv")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
