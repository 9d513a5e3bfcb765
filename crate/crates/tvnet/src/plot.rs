//! Minimal raster line plots, enough for loss curves and threshold sweeps.
//!
//! Everything is drawn by hand onto an RGB buffer: axes, linear or decade
//! ticks, polylines, and numeric labels in a tiny built-in digit font. No
//! plotting backend, so the output is identical across machines.

use std::path::Path;

use crate::error::{Error, Result};

const COLORS: [[u8; 3]; 5] =
    [[200, 60, 60], [50, 110, 200], [50, 150, 80], [210, 140, 30], [130, 80, 180]];

/// 3x5 glyphs for tick labels, row-major bits, msb left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' => [0b000, 0b111, 0b110, 0b100, 0b111],
        ' ' => [0; 5],
        _ => return None,
    })
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Canvas {
        Canvas { w, h, px: vec![255; w * h * 3] }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.px[i..i + 3].copy_from_slice(&c);
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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

    /// Digits and signs only; anything else renders as a blank column.
    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(rows) = glyph(ch) {
                for (ry, row) in rows.iter().enumerate() {
                    for rx in 0..3 {
                        if row >> (2 - rx) & 1 == 1 {
                            self.set(cx + rx as i64, y + ry as i64, c);
                        }
                    }
                }
            }
            cx += 4;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, self.px.clone())
            .expect("buffer sized to dimensions");
        img.save(path)?;
        Ok(())
    }
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
}

pub struct PlotOptions {
    pub width: usize,
    pub height: usize,
    /// Decade scale on y. Requires strictly positive y values.
    pub y_log: bool,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions { width: 640, height: 440, y_log: false }
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 0.01 && a < 10000.0 {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() { "0".into() } else { s }
    } else {
        format!("{v:.0e}")
    }
}

/// Draws every series over shared axes and writes a PNG.
pub fn line_plot(path: &Path, series: &[Series], opts: &PlotOptions) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::data("nothing to plot"));
    }
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::data("plot data holds a non-finite value"));
        }
        if opts.y_log && y <= 0.0 {
            return Err(Error::data("log-scale plot needs positive values"));
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let map_y = |y: f64| if opts.y_log { y.log10() } else { y };
    let (mut ly0, mut ly1) = (map_y(y0), map_y(y1));
    if ly1 - ly0 < 1e-12 {
        ly0 -= 0.5;
        ly1 += 0.5;
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }

    let (w, h) = (opts.width as i64, opts.height as i64);
    let (ml, mr, mt, mb) = (52i64, 14i64, 14i64, 30i64);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let mut cv = Canvas::new(opts.width, opts.height);
    let to_px = |x: f64, ly: f64| -> (i64, i64) {
        let fx = (x - x0) / (x1 - x0);
        let fy = (ly - ly0) / (ly1 - ly0);
        (ml + (fx * pw as f64).round() as i64, mt + ph - (fy * ph as f64).round() as i64)
    };

    let axis = [40, 40, 40];
    let grid = [225, 225, 225];
    // ticks: decades when log, else 5 even splits
    let yticks: Vec<f64> = if opts.y_log {
        let (lo, hi) = (ly0.floor() as i64, ly1.ceil() as i64);
        (lo..=hi).map(|e| e as f64).filter(|e| *e >= ly0 - 1e-9 && *e <= ly1 + 1e-9).collect()
    } else {
        (0..=4).map(|i| ly0 + (ly1 - ly0) * i as f64 / 4.0).collect()
    };
    for &ly in &yticks {
        let (_, py) = to_px(x0, ly);
        cv.line(ml, py, w - mr, py, grid);
        let v = if opts.y_log { 10f64.powf(ly) } else { ly };
        cv.text(4, py - 2, &fmt_tick(v), axis);
    }
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let (px, _) = to_px(x, ly0);
        cv.line(px, mt, px, h - mb, grid);
        cv.text(px - 8, h - mb + 6, &fmt_tick(x), axis);
    }
    cv.line(ml, mt, ml, h - mb, axis);
    cv.line(ml, h - mb, w - mr, h - mb, axis);

    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in s.points {
            let p = to_px(x, map_y(y));
            if let Some((qx, qy)) = prev {
                cv.line(qx, qy, p.0, p.1, color);
            } else if s.points.len() == 1 {
                cv.set(p.0, p.1, color);
            }
            prev = Some(p);
        }
        // legend swatch, top-right, one row per series
        let ly = mt + 6 + si as i64 * 10;
        cv.line(w - mr - 34, ly, w - mr - 14, ly, color);
        cv.text(w - mr - 10, ly - 2, &format!("{si}"), axis);
    }
    cv.save(path)
}
