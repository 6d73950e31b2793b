//! Artifact output: image montages (binary PGM/PPM) and CSV tables.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GUTTER: usize = 2;

/// Tiles `images (n, c, h, w)` row-major, `cols` per row, with 2-pixel black
/// gutters between tiles. One channel is written as P5, three as P6.
pub fn montage_bytes(images: &Tensor, cols: usize) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim("montage", format!("expected (n, c, h, w), got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::dim("montage", format!("{c} channels; only 1 or 3 can be written"))),
    };
    if n == 0 || cols == 0 {
        return Err(Error::Validation("montage needs at least one image and one column".into()));
    }
    if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("pixel value {bad} outside [0, 1]")));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1) * GUTTER;
    let height = rows * h + (rows - 1) * GUTTER;
    let mut canvas = vec![0u8; width * height * c];
    let data = images.data();
    for k in 0..n {
        let (oy, ox) = ((k / cols) * (h + GUTTER), (k % cols) * (w + GUTTER));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = data[((k * c + ch) * h + y) * w + x];
                    canvas[((oy + y) * width + ox + x) * c + ch] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&canvas);
    Ok(out)
}

pub fn write_montage(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    let bytes = montage_bytes(images, cols)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Shortest decimal form of `x` rounded to 6 significant digits.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().unwrap();
    rounded.to_string()
}

/// Comma-separated table, header first, every line newline-terminated.
pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(header: &[&str], rows: &[Vec<String>], path: &Path) -> Result<()> {
    if let Some(row) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(Error::Validation(format!("CSV row has {} fields, header has {}", row.len(), header.len())));
    }
    fs::write(path, csv_text(header, rows)).map_err(|e| Error::io(path, e))
}
