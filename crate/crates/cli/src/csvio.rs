//! CSV output. Floats use Rust's shortest round-trip formatting; every
//! file begins with a header row and is written atomically.

use anyhow::Result;
use std::fmt::Write as _;
use std::path::Path;

pub struct Csv {
    buf: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Csv {
        Csv {
            buf: format!("{}\n", header.join(",")),
            columns: header.len(),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "column count mismatch");
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    pub fn contents(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.buf.as_bytes())
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// log10 of a nonnegative loss; zero maps to -inf, which round-trips.
pub fn log10_loss(loss: f64) -> f64 {
    if loss > 0.0 {
        loss.log10()
    } else if loss == 0.0 {
        f64::NEG_INFINITY
    } else {
        f64::NAN
    }
}
