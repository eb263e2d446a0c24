//! Point clouds from grayscale images.
//!
//! Pixel `(r, c)` of an `H×W` grid maps to `((c + 0.5)/W, 1 − (r + 0.5)/H)`,
//! so clouds plot in the usual image orientation inside the unit square.

use std::fs;
use std::path::Path;

use super::DiscreteMeasure;
use crate::error::{Error, Result};

fn check_rectangular<T>(grid: &[Vec<T>]) -> Result<(usize, usize)> {
    let h = grid.len();
    let w = grid.first().map(Vec::len).unwrap_or(0);
    if h == 0 || w == 0 {
        return Err(Error::validation("image must have at least one pixel"));
    }
    if let Some(r) = grid.iter().position(|row| row.len() != w) {
        return Err(Error::validation(format!(
            "image row {r} has {} pixels, expected {w}",
            grid[r].len()
        )));
    }
    Ok((h, w))
}

/// Turns pixel intensities into a weighted cloud, optionally after a
/// centered `crop×crop` crop.
pub fn image_to_cloud(intensities: &[Vec<f64>], crop: Option<usize>) -> Result<DiscreteMeasure> {
    let (h, w) = check_rectangular(intensities)?;
    let (r0, c0, hh, ww) = match crop {
        None => (0, 0, h, w),
        Some(s) => {
            if s == 0 || s > h || s > w {
                return Err(Error::validation(format!(
                    "crop {s} does not fit a {h}×{w} image"
                )));
            }
            ((h - s) / 2, (w - s) / 2, s, s)
        }
    };
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for r in 0..hh {
        for c in 0..ww {
            let v = intensities[r0 + r][c0 + c];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!(
                    "pixel ({}, {}) has invalid intensity {v}",
                    r0 + r,
                    c0 + c
                )));
            }
            if v > 0.0 {
                points.push((c as f64 + 0.5) / ww as f64);
                points.push(1.0 - (r as f64 + 0.5) / hh as f64);
                weights.push(v);
            }
        }
    }
    DiscreteMeasure::new(points, 2, weights)
}

fn cooccurrence_counts(image: &[Vec<u32>], levels: u32, offset: (i64, i64)) -> Result<Vec<f64>> {
    let (h, w) = check_rectangular(image)?;
    if levels == 0 {
        return Err(Error::validation("GLCM needs at least one gray level"));
    }
    let (dr, dc) = offset;
    if dr == 0 && dc == 0 {
        return Err(Error::validation("GLCM offset must be nonzero"));
    }
    if dr.unsigned_abs() as usize >= h || dc.unsigned_abs() as usize >= w {
        return Err(Error::validation(format!(
            "offset ({dr}, {dc}) does not fit a {h}×{w} image"
        )));
    }
    let l = levels as usize;
    let mut counts = vec![0.0; l * l];
    for (r, row) in image.iter().enumerate() {
        for (c, &a) in row.iter().enumerate() {
            if a >= levels {
                return Err(Error::validation(format!(
                    "pixel ({r}, {c}) has level {a} outside [0, {levels})"
                )));
            }
            let (r2, c2) = (r as i64 + dr, c as i64 + dc);
            if r2 < 0 || c2 < 0 || r2 >= h as i64 || c2 >= w as i64 {
                continue;
            }
            let b = image[r2 as usize][c2 as usize];
            if b >= levels {
                return Err(Error::validation(format!(
                    "pixel ({r2}, {c2}) has level {b} outside [0, {levels})"
                )));
            }
            counts[a as usize * l + b as usize] += 1.0;
        }
    }
    Ok(counts)
}

fn counts_to_measure(counts: &[f64], levels: u32) -> Result<DiscreteMeasure> {
    let l = levels as usize;
    let scale = if l > 1 { (l - 1) as f64 } else { 1.0 };
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for a in 0..l {
        for b in 0..l {
            let c = counts[a * l + b];
            if c > 0.0 {
                points.push(a as f64 / scale);
                points.push(b as f64 / scale);
                weights.push(c);
            }
        }
    }
    DiscreteMeasure::new(points, 2, weights)
}

/// Gray-level co-occurrence matrix for one offset `(dr, dc)`, as a measure
/// on the level grid `{0..L-1}²` scaled to `[0,1]²`.
pub fn glcm(image: &[Vec<u32>], levels: u32, offset: (i64, i64)) -> Result<DiscreteMeasure> {
    counts_to_measure(&cooccurrence_counts(image, levels, offset)?, levels)
}

/// Average of the normalized co-occurrence matrices over several offsets.
pub fn glcm_averaged(image: &[Vec<u32>], levels: u32, offsets: &[(i64, i64)]) -> Result<DiscreteMeasure> {
    if offsets.is_empty() {
        return Err(Error::validation("at least one GLCM offset is required"));
    }
    let l = levels as usize;
    let mut acc = vec![0.0; l * l];
    for &o in offsets {
        let counts = cooccurrence_counts(image, levels, o)?;
        let total: f64 = counts.iter().sum();
        if total > 0.0 {
            for (a, c) in acc.iter_mut().zip(&counts) {
                *a += c / total;
            }
        }
    }
    counts_to_measure(&acc, levels)
}

/// Reads a grayscale grid from a plain/binary PGM (`P2`/`P5`) or a
/// headerless CSV grid.
pub fn read_gray_grid(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        parse_pgm(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::validation(format!("{} is not UTF-8", path.display())))?;
        parse_csv_grid(&text)
    }
}

fn parse_csv_grid(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut grid = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row: i + 1,
                    message: format!("{f:?} is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        grid.push(row);
    }
    check_rectangular(&grid)?;
    Ok(grid)
}

fn parse_pgm(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let binary = bytes.starts_with(b"P5");
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in header.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::validation("malformed PGM header"))?;
    }
    let [w, h, maxval] = header;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::validation("malformed PGM header"));
    }
    let values: Vec<f64> = if binary {
        pos += 1;
        let data = &bytes[pos.min(bytes.len())..];
        if maxval < 256 {
            data.iter().map(|&b| b as f64).collect()
        } else {
            data.chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                .collect()
        }
    } else {
        std::str::from_utf8(&bytes[pos..])
            .map_err(|_| Error::validation("PGM body is not ASCII"))?
            .split_ascii_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::validation(format!("bad PGM sample {t:?}")))
            })
            .collect::<Result<_>>()?
    };
    if values.len() < w * h {
        return Err(Error::validation(format!(
            "PGM has {} samples, expected {}",
            values.len(),
            w * h
        )));
    }
    Ok(values[..w * h].chunks(w).map(<[f64]>::to_vec).collect())
}
