//! Binary PGM (P5) heatmap export, plus a reader for round-trip tests.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Linear min-max scaling of f32 values to 8-bit gray. A constant map
/// scales to all zeros. Returns the bytes and the header comment that
/// documents the applied scale.
pub fn scale_to_gray(values: &[f32]) -> (Vec<u8>, String) {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > min) {
        return (
            vec![0u8; values.len()],
            format!("# linear scale degenerate (min = max = {min}); all pixels 0"),
        );
    }
    let scale = 255.0 / (max - min);
    let bytes = values
        .iter()
        .map(|&v| ((v - min) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let comment = format!("# linear scale min={min} max={max} gray=round(255*(v-min)/(max-min))");
    (bytes, comment)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8], comment: &str) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::invalid(format!(
            "pgm payload is {} bytes for {width}x{height}",
            gray.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{comment}\n{width} {height}\n255\n")?;
    w.write_all(gray)?;
    w.flush()?;
    Ok(())
}

/// Scale an f32 map and write it in one step.
pub fn write_heatmap(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let (gray, comment) = scale_to_gray(values);
    write_pgm(path, width, height, &gray, &comment)
}

/// Minimal P5 reader (single comment line tolerated after the magic).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let err = |d: &str| Error::format("PGM", d.to_string());
    if !buf.starts_with(b"P5") {
        return Err(err("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let text = std::str::from_utf8(&buf[start..pos]).map_err(|_| err("non-ascii header"))?;
        fields.push(text.parse::<usize>().map_err(|_| err("bad header field"))?);
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    if buf.len() < pos + width * height {
        return Err(err("truncated payload"));
    }
    Ok((width, height, buf[pos..pos + width * height].to_vec()))
}
