//! Minimal raster plots written as PNG. No text rendering; colors encode
//! the series (red CBCT, blue SynPlanCT, green planning CT).

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

use super::Histogram;
use crate::error::{Error, Result};

pub const RED: [u8; 3] = [214, 39, 40];
pub const BLUE: [u8; 3] = [31, 119, 180];
pub const GREEN: [u8; 3] = [44, 160, 44];
const AXIS: [u8; 3] = [60, 60, 60];
const MARGIN: i64 = 12;

pub struct Plot {
    img: RgbImage,
}

impl Plot {
    pub fn new(width: u32, height: u32) -> Self {
        Plot {
            img: RgbImage::from_pixel(width, height, Rgb([255, 255, 255])),
        }
    }

    pub fn image(&self) -> &RgbImage {
        &self.img
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
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

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, color);
            }
        }
    }

    fn axes(&mut self) {
        let (w, h) = (self.img.width() as i64, self.img.height() as i64);
        self.line((MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), AXIS);
        self.line((MARGIN, MARGIN), (MARGIN, h - MARGIN), AXIS);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.img.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }

    /// Overlaid histogram outlines. End bins are left out because they also
    /// hold everything outside the histogram range.
    pub fn histogram_overlay(series: &[(&Histogram, [u8; 3])], width: u32, height: u32) -> Self {
        let mut plot = Plot::new(width, height);
        plot.axes();
        let inner = |h: &Histogram| -> Vec<u64> {
            let n = h.counts.len();
            if n > 2 {
                h.counts[1..n - 1].to_vec()
            } else {
                h.counts.clone()
            }
        };
        let peak = series.iter().flat_map(|(h, _)| inner(h)).max().unwrap_or(1).max(1) as f64;
        let (w, h) = (width as i64 - 2 * MARGIN, height as i64 - 2 * MARGIN);
        for (hist, color) in series {
            let counts = inner(hist);
            let n = counts.len().max(1) as i64;
            let mut prev = None;
            for (i, &c) in counts.iter().enumerate() {
                let x = MARGIN + (2 * i as i64 + 1) * w / (2 * n);
                let y = MARGIN + h - ((c as f64 / peak) * h as f64).round() as i64;
                if let Some(p) = prev {
                    plot.line(p, (x, y), *color);
                }
                prev = Some((x, y));
            }
        }
        plot
    }

    /// Mirrored density strips ("violins"), one column per series, grouped.
    ///
    /// `groups` holds, per group, a list of `(color, values)`; the vertical
    /// axis spans `range`.
    pub fn violins(groups: &[Vec<([u8; 3], Vec<f64>)>], range: (f64, f64), width: u32, height: u32) -> Self {
        let mut plot = Plot::new(width, height);
        plot.axes();
        let columns: usize = groups.iter().map(|g| g.len() + 1).sum::<usize>().max(1);
        let col_w = (width as i64 - 2 * MARGIN) / columns as i64;
        let h = height as i64 - 2 * MARGIN;
        let bins = (h / 3).max(4) as usize;
        let mut col = 0i64;
        for group in groups {
            for (color, values) in group {
                let Ok(hist) = super::histogram(values.iter().copied(), bins, range) else {
                    col += 1;
                    continue;
                };
                let peak = hist.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
                let cx = MARGIN + col * col_w + col_w / 2;
                for (b, &c) in hist.counts.iter().enumerate() {
                    if c == 0 {
                        continue;
                    }
                    let half = ((c as f64 / peak) * (col_w as f64 * 0.45)).round().max(1.0) as i64;
                    let y1 = MARGIN + h - (b as i64 * h / bins as i64);
                    let y0 = MARGIN + h - ((b as i64 + 1) * h / bins as i64);
                    plot.fill_rect(cx - half, y0, 2 * half, (y1 - y0).max(1), *color);
                }
                col += 1;
            }
            col += 1;
        }
        plot
    }

    /// Grayscale rendering of `img` with window `[lo, hi]`, each pixel
    /// drawn as a `scale x scale` block.
    pub fn grayscale(img: ArrayView2<f64>, lo: f64, hi: f64, scale: u32) -> Self {
        let (h, w) = img.dim();
        let mut plot = Plot::new(w as u32 * scale, h as u32 * scale);
        for ((r, c), &v) in img.indexed_iter() {
            let g = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
            let s = scale as i64;
            plot.fill_rect(c as i64 * s, r as i64 * s, s, s, [g, g, g]);
        }
        plot
    }

    /// Blue-white-red rendering of a signed map saturating at `±limit`.
    pub fn diverging(map: ArrayView2<f64>, limit: f64, scale: u32) -> Self {
        let (h, w) = map.dim();
        let mut plot = Plot::new(w as u32 * scale, h as u32 * scale);
        let limit = if limit > 0.0 { limit } else { 1.0 };
        for ((r, c), &v) in map.indexed_iter() {
            let t = (v / limit).clamp(-1.0, 1.0);
            let fade = |full: u8| (255.0 - (255.0 - full as f64) * t.abs()).round() as u8;
            let color = if t >= 0.0 {
                [fade(RED[0]), fade(RED[1]), fade(RED[2])]
            } else {
                [fade(BLUE[0]), fade(BLUE[1]), fade(BLUE[2])]
            };
            let s = scale as i64;
            plot.fill_rect(c as i64 * s, r as i64 * s, s, s, color);
        }
        plot
    }
}

/// Interleaves two images in `tile x tile` squares: tile `(i, j)` comes from
/// `a` when `i + j` is even and from `b` otherwise.
pub fn checkerboard(a: ArrayView2<f64>, b: ArrayView2<f64>, tile: usize) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    if tile == 0 {
        return Err(Error::invalid("tile", "must be positive"));
    }
    Ok(Array2::from_shape_fn(a.dim(), |(r, c)| {
        if (r / tile + c / tile) % 2 == 0 {
            a[[r, c]]
        } else {
            b[[r, c]]
        }
    }))
}
