//! Matrix files for inspecting alignments.
//!
//! CSV: first line `rows,cols`, then one line per row of comma-separated
//! values printed with Rust's shortest round-trip float formatting.
//!
//! PGM: binary greyscale (`P5`), one pixel per entry, `cols` wide and `rows`
//! tall, values min-max scaled to 0..=255 (a constant matrix is all black).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn matrix_to_csv(m: &Tensor) -> String {
    let mut out = format!("{},{}\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let (rows, cols) = header
        .split_once(',')
        .and_then(|(r, c)| Some((r.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
        .ok_or_else(|| parse_err(1, "header must be 'rows,cols'"))?;
    let mut data = Vec::with_capacity(rows * cols);
    for (n, line) in lines.enumerate() {
        let before = data.len();
        for field in line.split(',') {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(n + 2, &format!("'{field}': {e}")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(n + 2, &format!("expected {cols} values")));
        }
    }
    if data.len() != rows * cols {
        return Err(parse_err(rows + 1, &format!("expected {rows} rows")));
    }
    Tensor::matrix(rows, cols, data)
}

fn parse_err(line: usize, message: &str) -> Error {
    Error::Parse {
        line,
        message: message.to_string(),
    }
}

pub fn matrix_to_pgm(m: &Tensor) -> Vec<u8> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    out.extend(m.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_csv(m: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, matrix_to_csv(m)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(m: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, matrix_to_pgm(m)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_exactly() {
        let m = Tensor::matrix(2, 3, vec![0.1, -2.5e-300, 1.0 / 3.0, 0.0, 7.0, f64::MIN_POSITIVE]).unwrap();
        let text = matrix_to_csv(&m);
        assert!(text.starts_with("2,3\n"));
        assert_eq!(matrix_from_csv(&text).unwrap(), m);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        assert!(matrix_from_csv("2,2\n1,2\n3\n").is_err());
        assert!(matrix_from_csv("2,2\n1,2\n").is_err());
    }

    #[test]
    fn pgm_is_cols_wide_rows_tall() {
        let m = Tensor::matrix(2, 3, vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0]).unwrap();
        let bytes = matrix_to_pgm(&m);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 128, 0]);
    }
}
