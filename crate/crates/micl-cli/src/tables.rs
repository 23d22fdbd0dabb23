//! Deterministic CSV emission. Bodies carry no timestamps, so reruns of the
//! same manifest produce byte-identical tables in single-threaded mode.

use std::io::Write;
use std::path::Path;

use micl_core::Result;

pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { buf: format!("{}\n", header.join(",")) }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.buf.as_bytes())?;
        Ok(())
    }
}

pub fn f(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:.12e}")
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value).map_err(micl_core::Error::from)?)?;
    Ok(())
}
