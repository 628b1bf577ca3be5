//! Temporal trend images: one binary line graph per variable over the
//! look-back window, tiled into a single grayscale raster, plus PGM I/O.

use std::path::Path;

use thiserror::Error;

use crate::dataset::{NormStats, WindowBundle};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster config: {0}")]
    Config(String),
    #[error("malformed PGM: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Values beyond this many standard deviations are clamped.
pub const CLAMP_SIGMA: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterConfig {
    pub cell_w: usize,
    pub cell_h: usize,
    /// Grid columns; defaults to `ceil(sqrt(K+1))`.
    pub cols: Option<usize>,
    /// Grid rows; defaults to `ceil((K+1)/cols)`.
    pub rows: Option<usize>,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            cell_w: 64,
            cell_h: 64,
            cols: None,
            rows: None,
        }
    }
}

impl RasterConfig {
    pub fn with_cell(cell: usize) -> Self {
        Self {
            cell_w: cell,
            cell_h: cell,
            ..Self::default()
        }
    }

    /// `(cols, rows)` for `n` subimages.
    pub fn grid(&self, n: usize) -> Result<(usize, usize)> {
        if self.cell_w < 2 || self.cell_h < 2 {
            return Err(RasterError::Config(format!(
                "cells must be at least 2x2, got {}x{}",
                self.cell_w, self.cell_h
            )));
        }
        let cols = self.cols.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).max(1);
        let rows = self.rows.unwrap_or_else(|| n.div_ceil(cols));
        if rows * cols < n {
            return Err(RasterError::Config(format!(
                "{cols}x{rows} grid cannot hold {n} subimages"
            )));
        }
        Ok((cols, rows))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendImage {
    pub width: usize,
    pub height: usize,
    pub cell_w: usize,
    pub cell_h: usize,
    pub cols: usize,
    /// Row-major grayscale in [0, 1].
    pub pixels: Vec<f64>,
}

impl TrendImage {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cell_w: width,
            cell_h: height,
            cols: 1,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize) {
        self.pixels[y * self.width + x] = 1.0;
    }

    /// Pixels of subimage `v` as a row-major `cell_h × cell_w` copy.
    pub fn cell(&self, v: usize) -> Vec<f64> {
        let (ox, oy) = ((v % self.cols) * self.cell_w, (v / self.cols) * self.cell_h);
        let mut out = Vec::with_capacity(self.cell_w * self.cell_h);
        for y in 0..self.cell_h {
            let row = (oy + y) * self.width + ox;
            out.extend_from_slice(&self.pixels[row..row + self.cell_w]);
        }
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(RasterError::Malformed("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(RasterError::Malformed(format!("magic {:?}", fields[0])));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| RasterError::Malformed(format!("bad header number {s:?}")))
        };
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(RasterError::Malformed(format!("maxval {maxval}, expected 255")));
        }
        if w == 0 || h == 0 {
            return Err(RasterError::Malformed("zero dimension".into()));
        }
        // Exactly one whitespace byte separates the header from the payload.
        pos += 1;
        let payload = bytes.get(pos..).unwrap_or(&[]);
        if payload.len() != w * h {
            return Err(RasterError::Malformed(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                w * h
            )));
        }
        let mut img = Self::blank(w, h);
        img.pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(img)
    }
}

pub fn write_pgm(img: &TrendImage, path: &Path) -> Result<()> {
    std::fs::write(path, img.to_pgm())?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<TrendImage> {
    TrendImage::from_pgm(&std::fs::read(path)?)
}

/// Fills gaps: interior by linear interpolation between the nearest present
/// neighbours, edges by the nearest present value, all-absent as zeros.
pub fn interpolate_missing(series: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<(usize, f64)> = series
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    if known.is_empty() {
        return vec![0.0; series.len()];
    }
    let mut out = vec![0.0; series.len()];
    let (first, last) = (known[0], known[known.len() - 1]);
    for (i, o) in out.iter_mut().enumerate() {
        *o = if i <= first.0 {
            first.1
        } else if i >= last.0 {
            last.1
        } else {
            let right = known.partition_point(|(j, _)| *j < i);
            let (j1, y1) = known[right];
            if j1 == i {
                y1
            } else {
                let (j0, y0) = known[right - 1];
                y0 + (y1 - y0) * (i - j0) as f64 / (j1 - j0) as f64
            }
        };
    }
    out
}

/// Pixel row for a normalized value: +3σ maps to the top row, -3σ to the bottom.
pub fn value_row(v: f64, cell_h: usize) -> usize {
    let c = v.clamp(-CLAMP_SIGMA, CLAMP_SIGMA);
    (((CLAMP_SIGMA - c) / (2.0 * CLAMP_SIGMA)) * (cell_h - 1) as f64).floor() as usize
}

/// Pixel column for chronological index `j` of `beta` points.
pub fn day_column(j: usize, beta: usize, cell_w: usize) -> usize {
    if beta <= 1 {
        return 0;
    }
    ((j as f64 / (beta - 1) as f64) * (cell_w - 1) as f64).floor() as usize
}

fn draw_line(img: &mut TrendImage, ox: usize, oy: usize, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        img.set(ox + x as usize, oy + y as usize);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Chronological (oldest first) raw series of variable `v` over the image
/// window; `v == K` is the target history.
pub fn window_series(bundle: &WindowBundle, v: usize) -> Vec<Option<f64>> {
    bundle
        .image_window
        .iter()
        .rev()
        .map(|r| {
            if v == r.features.len() {
                r.target
            } else {
                r.feature(v)
            }
        })
        .collect()
}

/// Renders features (schema order) then target history into a tiled image.
/// Present values are Z-normalized with the given statistics before gaps are
/// interpolated, so a fully absent series sits on the mean line.
pub fn rasterize(bundle: &WindowBundle, stats: &NormStats, config: &RasterConfig) -> Result<TrendImage> {
    let k = bundle.current.features.len();
    let n_vars = k + 1;
    if stats.features.len() != k {
        return Err(RasterError::Config(format!(
            "statistics cover {} features, bundle has {k}",
            stats.features.len()
        )));
    }
    let (cols, rows) = config.grid(n_vars)?;
    let (cw, ch) = (config.cell_w, config.cell_h);
    let mut img = TrendImage {
        width: cols * cw,
        height: rows * ch,
        cell_w: cw,
        cell_h: ch,
        cols,
        pixels: vec![0.0; cols * cw * rows * ch],
    };
    let beta = bundle.image_window.len();
    if beta == 0 {
        return Ok(img);
    }
    for v in 0..n_vars {
        let st = stats.var(v);
        let raw = window_series(bundle, v);
        let normalized: Vec<Option<f64>> = raw.iter().map(|x| x.map(|x| st.normalize(x))).collect();
        let series = interpolate_missing(&normalized);
        let (ox, oy) = ((v % cols) * cw, (v / cols) * ch);
        let points: Vec<(i64, i64)> = series
            .iter()
            .enumerate()
            .map(|(j, &val)| (day_column(j, beta, cw) as i64, value_row(val, ch) as i64))
            .collect();
        if points.len() == 1 {
            img.set(ox + points[0].0 as usize, oy + points[0].1 as usize);
        }
        for w in points.windows(2) {
            draw_line(&mut img, ox, oy, w[0], w[1]);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_cases() {
        assert_eq!(interpolate_missing(&[Some(1.0), None, None, Some(4.0)]), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(interpolate_missing(&[None, Some(2.0), Some(3.0)]), vec![2.0, 2.0, 3.0]);
        assert_eq!(interpolate_missing(&[None; 5]), vec![0.0; 5]);
        assert_eq!(interpolate_missing(&[Some(1.0), None, Some(2.0), None]), vec![1.0, 1.5, 2.0, 2.0]);
    }

    #[test]
    fn row_and_column_mapping() {
        assert_eq!(value_row(3.0, 64), 0);
        assert_eq!(value_row(-3.0, 64), 63);
        assert_eq!(value_row(10.0, 64), 0);
        assert_eq!(value_row(0.0, 65), 32);
        assert_eq!(day_column(0, 30, 64), 0);
        assert_eq!(day_column(29, 30, 64), 63);
        assert_eq!(day_column(0, 1, 64), 0);
    }

    #[test]
    fn default_grid_for_eight_features() {
        let cfg = RasterConfig::default();
        assert_eq!(cfg.grid(9).unwrap(), (3, 3));
        let bad = RasterConfig {
            cols: Some(2),
            rows: Some(2),
            ..RasterConfig::default()
        };
        assert!(bad.grid(9).is_err());
    }

    #[test]
    fn pgm_payload_bytes() {
        let mut img = TrendImage::blank(2, 2);
        img.pixels = vec![0.0, 1.0, 1.0, 0.0];
        let bytes = img.to_pgm();
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0xFF, 0xFF, 0x00]);
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        let back = TrendImage::from_pgm(&bytes).unwrap();
        assert_eq!(back.pixels, img.pixels);
        assert!(TrendImage::from_pgm(b"P5\n2 2\n15\n\x00\x01\x01\x00").is_err());
        assert!(TrendImage::from_pgm(b"P2\n2 2\n255\n0 0 0 0").is_err());
        assert!(TrendImage::from_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }
}
