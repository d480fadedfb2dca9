//! Deterministic file emission: CSV tables with full-precision floats,
//! written atomically (temp file + rename), plus the provenance record.

use std::path::{Path, PathBuf};

use inla_core::{Error, Result};

/// 17 significant digits; round-trips every f64 exactly.
pub fn fmt_float(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Write atomically: the content lands under its final name only complete.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct CsvBuilder {
    out: String,
    columns: usize,
}

impl CsvBuilder {
    pub fn new(header: &[&str]) -> Self {
        CsvBuilder { out: format!("{}\n", header.join(",")), columns: header.len() }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "csv row width mismatch");
        self.out.push_str(&fields.join(","));
        self.out.push('\n');
    }

    pub fn finish(self) -> String {
        self.out
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Input(format!("cannot create output directory {}: {e}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for v in [0.1, -3.25e-7, 123456.789, 1.0 / 3.0, f64::MIN_POSITIVE] {
            let s = fmt_float(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(fmt_float(0.0), "0");
    }

    #[test]
    fn csv_builder_produces_lf_lines() {
        let mut b = CsvBuilder::new(&["a", "b"]);
        b.row(&["1".into(), "2".into()]);
        let s = b.finish();
        assert_eq!(s, "a,b\n1,2\n");
        assert!(!s.contains('\r'));
    }
}
