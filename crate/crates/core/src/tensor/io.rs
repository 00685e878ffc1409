//! Tensor serialization.
//!
//! Both encodings start with an ASCII header line `shape: d1 d2 ...\n`
//! (a scalar has no dimensions after the colon). The text encoding follows
//! the header with one value per line in row-major order, printed in Rust's
//! shortest round-trip form. The binary encoding follows the header with
//! `8 * numel` bytes of little-endian IEEE-754 doubles. Binary records can be
//! concatenated in one file and read back sequentially.

use std::io::{BufRead, Write};

use super::Tensor;
use crate::error::{Error, Result};

fn header(t: &Tensor) -> String {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    if dims.is_empty() {
        "shape:\n".to_string()
    } else {
        format!("shape: {}\n", dims.join(" "))
    }
}

pub(crate) fn parse_header(line: &str) -> std::result::Result<Vec<usize>, String> {
    let rest = line
        .trim_end()
        .strip_prefix("shape:")
        .ok_or_else(|| format!("expected `shape:` header, found {line:?}"))?;
    rest.split_whitespace()
        .map(|d| {
            d.parse::<usize>()
                .map_err(|e| format!("bad dimension {d:?}: {e}"))
        })
        .collect()
}

pub fn write_text<W: Write>(t: &Tensor, mut w: W) -> std::io::Result<()> {
    w.write_all(header(t).as_bytes())?;
    for v in t.data() {
        writeln!(w, "{v:?}")?;
    }
    Ok(())
}

pub fn read_text<R: BufRead>(r: R) -> std::result::Result<Tensor, String> {
    let mut lines = r.lines();
    let head = lines
        .next()
        .ok_or("empty input")?
        .map_err(|e| e.to_string())?;
    let shape = parse_header(&head)?;
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|e| format!("line {}: {e}", i + 2))?,
            );
        }
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_binary<W: Write>(t: &Tensor, mut w: W) -> std::io::Result<()> {
    w.write_all(header(t).as_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one binary record; `Ok(None)` at a clean end of stream.
pub fn read_binary<R: BufRead>(r: &mut R) -> std::result::Result<Option<Tensor>, String> {
    let mut head = String::new();
    let n = r.read_line(&mut head).map_err(|e| e.to_string())?;
    if n == 0 {
        return Ok(None);
    }
    let shape = parse_header(&head)?;
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 8];
    r.read_exact(&mut buf)
        .map_err(|e| format!("truncated payload: {e}"))?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
        .map(Some)
        .map_err(|e| e.to_string())
}

pub fn save_text(t: &Tensor, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_text(t, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_text(path: &std::path::Path) -> Result<Tensor> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_text(std::io::BufReader::new(f)).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_layout_is_header_then_values() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.5, -3.0, 0.1]).unwrap();
        let mut out = Vec::new();
        write_text(&t, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "shape: 2 2\n1.0\n2.5\n-3.0\n0.1\n"
        );
    }

    #[test]
    fn binary_records_concatenate() {
        let a = Tensor::vector(vec![1.0, f64::MIN_POSITIVE, -0.0]);
        let b = Tensor::scalar(std::f64::consts::PI);
        let mut buf = Vec::new();
        write_binary(&a, &mut buf).unwrap();
        write_binary(&b, &mut buf).unwrap();
        let mut r = std::io::Cursor::new(buf);
        assert_eq!(read_binary(&mut r).unwrap().unwrap(), a);
        assert_eq!(read_binary(&mut r).unwrap().unwrap(), b);
        assert!(read_binary(&mut r).unwrap().is_none());
    }

    #[test]
    fn bad_header_rejected() {
        let err = read_text(std::io::Cursor::new("dims: 2\n1\n2\n")).unwrap_err();
        assert!(err.contains("shape:"));
        let err = read_text(std::io::Cursor::new("shape: 3\n1\n2\n")).unwrap_err();
        assert!(err.contains("3 values"));
    }
}
