//! File-output helpers shared by the artifact writers: atomic writes and
//! float formatting with 17 significant digits (lossless f64 round trip).

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Formats a double with 17 significant digits, enough to round-trip any
/// finite f64 exactly.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a file atomically: contents go to a sibling temp file which is
/// then renamed over the target.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// serde_json formatter that renders every float with 17 significant digits.
#[derive(Default)]
struct Float17Formatter;

impl serde_json::ser::Formatter for Float17Formatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes a value to JSON with all floats at 17 significant digits.
pub fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Float17Formatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Parse(format!("json serialization: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Parse(format!("json utf8: {e}")))
}

/// Writes a JSON artifact atomically with 17-digit floats.
pub fn write_json_17<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = to_json_17(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

/// Reads a whole numeric CSV with a header line; returns the header and the
/// parsed rows.
pub fn read_numeric_csv(path: &Path) -> Result<(String, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?
        .to_string();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|tok| tok.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 2))
        })?);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_round_trips_exactly() {
        for x in [1.0 / 3.0, std::f64::consts::PI, 1e-300, -2.5e17, 0.1 + 0.2] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }

    #[test]
    fn json_floats_use_17_digits() {
        #[derive(Serialize)]
        struct Payload {
            x: f64,
        }
        let s = to_json_17(&Payload { x: 0.1 }).unwrap();
        assert_eq!(s, "{\"x\":1.0000000000000001e-1}");
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["x"].as_f64().unwrap(), 0.1);
    }

    #[test]
    fn csv_reader_reports_bad_rows_with_location() {
        let dir = std::env::temp_dir().join("stochinf_ioutil_badcsv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "a,b\n1.0,2.0\n1.0,oops\n").unwrap();
        let err = read_numeric_csv(&path).unwrap_err();
        assert!(err.to_string().contains("bad.csv:3"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = std::env::temp_dir().join("stochinf_ioutil_test");
        let path = dir.join("out.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        std::fs::remove_dir_all(&dir).ok();
    }
}
