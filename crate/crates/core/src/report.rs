//! Output helpers: deterministic number formatting, CSV and JSON writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Round to 9 significant digits, then print the shortest decimal string that
/// round-trips to that rounded value. Negative zero prints as `0`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    if rounded == 0.0 {
        return "0".into();
    }
    format!("{rounded}")
}

/// Shortest decimal string that round-trips to `x` exactly. Used for
/// intermediate tables that are read back.
pub fn fmt_f64_exact(x: f64) -> String {
    if x.is_finite() {
        if x == 0.0 {
            "0".into()
        } else {
            format!("{x}")
        }
    } else {
        fmt_f64(x)
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Write rows as CSV with a fixed header.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Pretty JSON with a trailing newline. Struct fields serialize in
/// declaration order and maps are BTreeMaps, so output is stable.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_f64(0.1 + 0.2), "0.3");
        assert_eq!(fmt_f64(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_f64(12345.678901234), "12345.6789");
        assert_eq!(fmt_f64(-0.0), "0");
        assert_eq!(fmt_f64(100.0), "100");
        assert_eq!(fmt_f64(2.0f64.sqrt() * 1e-7), "0.000000141421356");
    }

    #[test]
    fn formatting_is_idempotent() {
        for &x in &[0.123456789123, 98765.4321987, -3.3e-5, 1e12 / 7.0] {
            let once = fmt_f64(x);
            let twice = fmt_f64(once.parse().unwrap());
            assert_eq!(once, twice);
        }
    }
}
