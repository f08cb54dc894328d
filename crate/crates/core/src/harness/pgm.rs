//! Plain-text greyscale images (`P2`, maxval 255).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Pixel value for `v` in `[0, 1]`, rounding halves up.
pub fn to_pixel(v: f64) -> u8 {
    (255.0 * v + 0.5).floor() as u8
}

pub fn encode_pgm(values: &[f64], height: usize, width: usize) -> Result<String> {
    if values.len() != height * width {
        return Err(Error::Shape(format!(
            "{} values for a {height}x{width} image",
            values.len()
        )));
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange { index, value });
    }
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width.max(1)).take(height) {
        let line: Vec<String> = row.iter().map(|&v| to_pixel(v).to_string()).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    Ok(out)
}

pub fn dump_pgm(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(values, height, width)?)?;
    Ok(())
}

/// Parses a `P2` image into `(height, width, pixels)`.
pub fn decode_pgm(text: &str) -> Result<(usize, usize, Vec<u16>)> {
    let bad = |detail: &str| Error::Parse {
        what: "pgm",
        detail: detail.to_string(),
    };
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut header = [0usize; 3];
    for h in &mut header {
        *h = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("incomplete header"))?;
    }
    let [width, height, maxval] = header;
    let pixels = tokens
        .map(|t| t.parse::<u16>().map_err(|_| bad(t)))
        .collect::<Result<Vec<_>>>()?;
    if pixels.len() != width * height || pixels.iter().any(|&p| p as usize > maxval) {
        return Err(bad("pixel count or range does not match the header"));
    }
    Ok((height, width, pixels))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    decode_pgm(&fs::read_to_string(path)?)
}
