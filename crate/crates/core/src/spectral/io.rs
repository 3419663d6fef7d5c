//! Matrix fixture formats.
//!
//! Binary (`.tsdw`): the magic `TSDW`, `rows` and `cols` as little-endian
//! `u32`, then `rows*cols` little-endian `f64` in row-major order.
//!
//! CSV: a `rows,cols` header line followed by one comma-separated row per
//! line, each value printed with 17 significant digits.

use std::fs;
use std::path::Path;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSDW";

pub fn encode_tsdw(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tsdw(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("missing TSDW header".into());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 8 {
        return Err(format!(
            "{rows}x{cols} payload needs {} bytes, found {}",
            rows * cols * 8,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(rows, cols, data).map_err(|e| e.to_string())
}

pub fn encode_csv(m: &Matrix) -> String {
    let mut out = format!("{},{}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str) -> std::result::Result<Matrix, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty file")?;
    let (r, c) = header.split_once(',').ok_or("header must be `rows,cols`")?;
    let rows: usize = r
        .trim()
        .parse()
        .map_err(|_| format!("bad row count {r:?}"))?;
    let cols: usize = c
        .trim()
        .parse()
        .map_err(|_| format!("bad column count {c:?}"))?;
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format!("row {i}: bad value {field:?}"))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(format!(
                "row {i} has {} values, expected {cols}",
                data.len() - before
            ));
        }
    }
    Matrix::new(rows, cols, data).map_err(|e| e.to_string())
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads either format; files starting with the TSDW magic are binary,
/// anything else is parsed as CSV.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = if bytes.starts_with(MAGIC) {
        decode_tsdw(&bytes)
    } else {
        std::str::from_utf8(&bytes)
            .map_err(|_| "not UTF-8 and no TSDW header".to_string())
            .and_then(decode_csv)
    };
    parsed.map_err(|message| Error::Format {
        what: "matrix",
        path: path.to_path_buf(),
        message,
    })
}

/// Writes CSV when the extension is `.csv`, TSDW otherwise.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = if is_csv(path) {
        encode_csv(m).into_bytes()
    } else {
        encode_tsdw(m)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsdw_layout_is_exact() {
        let m = Matrix::new(1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = encode_tsdw(&m);
        assert_eq!(&bytes[..4], b"TSDW");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 28);
        assert_eq!(decode_tsdw(&bytes).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        let mut bytes = encode_tsdw(&m);
        bytes.pop();
        assert!(decode_tsdw(&bytes).is_err());
        assert!(decode_tsdw(b"TSD").is_err());
        assert!(decode_csv("2,2\n1,2\n3\n").is_err());
        assert!(decode_csv("2,2\n1,2\n").is_err());
        assert!(decode_csv("1,1\nNaN\n").is_err());
    }

    #[test]
    fn csv_uses_seventeen_digits() {
        let m = Matrix::new(1, 1, vec![0.1]).unwrap();
        let text = encode_csv(&m);
        assert_eq!(text, "1,1\n1.0000000000000001e-1\n");
        assert_eq!(
            decode_csv(&text).unwrap().as_slice()[0].to_bits(),
            0.1f64.to_bits()
        );
    }
}
