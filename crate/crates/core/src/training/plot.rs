//! Minimal line-chart rasterizer for progress plots.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const GLYPH_W: u32 = 5;

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        ' ' => [0; 7],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04],
    }
}

pub fn text_width(text: &str) -> u32 {
    text.chars().count() as u32 * (GLYPH_W + 1)
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Draws `text` with its top-left corner at `(x, y)`.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    for (i, c) in text.chars().enumerate() {
        let ox = x + i as i64 * (GLYPH_W + 1) as i64;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    put(img, ox + col as i64, y + row as i64, color);
                }
            }
        }
    }
}

/// Bresenham line, two pixels thick when `thick`.
pub fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3], thick: bool) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
        if thick {
            put(img, x + 1, y, color);
            put(img, x, y + 1, color);
        }
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

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, color: [u8; 3]) {
    for yy in y..y + h {
        for xx in x..x + w {
            put(img, xx, yy, color);
        }
    }
}

pub fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>, color: [u8; 3]) -> Self {
        Self { label: label.into(), points, color }
    }

    /// Points `(i + 1, y_i)`.
    pub fn per_epoch(label: impl Into<String>, ys: &[f64], color: [u8; 3]) -> Self {
        Self::new(label, ys.iter().enumerate().map(|(i, &y)| ((i + 1) as f64, y)).collect(), color)
    }
}

#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub width: u32,
    pub height: u32,
}

const LEFT: i64 = 70;
const RIGHT: i64 = 20;
const TOP: i64 = 40;
const BOTTOM: i64 = 45;

impl LineChart {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), series: Vec::new(), width: 640, height: 400 }
    }

    pub fn with(mut self, series: Series) -> Self {
        self.series.push(series);
        self
    }

    fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let finite = self.series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in finite {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return ((0.0, 1.0), (0.0, 1.0));
        }
        let widen = |lo: f64, hi: f64| {
            if hi - lo < 1e-12 {
                let pad = lo.abs().max(1.0) * 0.05;
                (lo - pad, hi + pad)
            } else {
                let pad = (hi - lo) * 0.05;
                (lo - pad, hi + pad)
            }
        };
        let x = if x1 - x0 < 1e-12 { widen(x0, x1) } else { (x0, x1) };
        (x, widen(y0, y1))
    }

    pub fn render(&self) -> RgbImage {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut img = RgbImage::from_pixel(self.width, self.height, Rgb([255, 255, 255]));
        let ((x0, x1), (y0, y1)) = self.bounds();
        let (pw, ph) = (w - LEFT - RIGHT, h - TOP - BOTTOM);
        let to_px = |x: f64, y: f64| {
            let px = LEFT as f64 + (x - x0) / (x1 - x0) * pw as f64;
            let py = (TOP + ph) as f64 - (y - y0) / (y1 - y0) * ph as f64;
            (px.round() as i64, py.round() as i64)
        };
        let black = [0, 0, 0];
        let grid = [225, 225, 225];

        for i in 0..=4 {
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let (_, py) = to_px(x0, fy);
            draw_line(&mut img, (LEFT, py), (LEFT + pw, py), grid, false);
            let label = format_tick(fy);
            draw_text(&mut img, LEFT - 6 - text_width(&label) as i64, py - 3, &label, black);
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let (px, _) = to_px(fx, y0);
            draw_line(&mut img, (px, TOP + ph), (px, TOP + ph + 4), black, false);
            let label = format_tick(fx);
            draw_text(&mut img, px - text_width(&label) as i64 / 2, TOP + ph + 8, &label, black);
        }
        draw_line(&mut img, (LEFT, TOP), (LEFT, TOP + ph), black, false);
        draw_line(&mut img, (LEFT, TOP + ph), (LEFT + pw, TOP + ph), black, false);

        draw_text(&mut img, (w - text_width(&self.title) as i64) / 2, 8, &self.title, black);
        draw_text(&mut img, LEFT, TOP - 14, &self.y_label, black);
        draw_text(&mut img, LEFT + (pw - text_width(&self.x_label) as i64) / 2, h - 14, &self.x_label, black);

        for s in &self.series {
            let pts: Vec<(i64, i64)> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| to_px(x, y))
                .collect();
            match pts.as_slice() {
                [] => {}
                [p] => fill_rect(&mut img, p.0 - 2, p.1 - 2, 5, 5, s.color),
                _ => {
                    for pair in pts.windows(2) {
                        draw_line(&mut img, pair[0], pair[1], s.color, true);
                    }
                }
            }
        }

        // legend, top right
        let mut ly = TOP + 6;
        for s in &self.series {
            let lx = w - RIGHT - 16 - text_width(&s.label) as i64;
            fill_rect(&mut img, lx, ly, 10, 7, s.color);
            draw_text(&mut img, lx + 14, ly, &s.label, black);
            ly += 12;
        }
        img
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.render().save(path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(img: &RgbImage, color: [u8; 3]) -> usize {
        img.pixels().filter(|p| p.0 == color).count()
    }

    #[test]
    fn glyphs_are_distinct_and_fit() {
        let chars = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ.-_:()/%+=,";
        let glyphs: Vec<[u8; 7]> = chars.chars().map(glyph).collect();
        for (i, g) in glyphs.iter().enumerate() {
            assert!(g.iter().all(|r| *r < 32));
            assert!(glyphs[i + 1..].iter().all(|o| o != g), "{}", chars.chars().nth(i).unwrap());
        }
        assert_eq!(glyph('a'), glyph('A'));
    }

    #[test]
    fn text_pixels() {
        let mut img = RgbImage::new(20, 10);
        draw_text(&mut img, 0, 0, "1", [255, 0, 0]);
        let ones: u32 = glyph('1').iter().map(|r| r.count_ones()).sum();
        assert_eq!(count(&img, [255, 0, 0]), ones as usize);
        draw_text(&mut img, 100, 100, "clipped", [0, 255, 0]);
    }

    #[test]
    fn line_endpoints() {
        let mut img = RgbImage::new(10, 10);
        draw_line(&mut img, (1, 1), (8, 5), [9, 9, 9], false);
        assert_eq!(img.get_pixel(1, 1).0, [9, 9, 9]);
        assert_eq!(img.get_pixel(8, 5).0, [9, 9, 9]);
        assert_eq!(count(&img, [9, 9, 9]), 8);
    }

    #[test]
    fn chart_draws_series() {
        let chart = LineChart::new("Loss", "epoch", "loss")
            .with(Series::per_epoch("train", &[1.0, 0.5, 0.3, 0.2], PALETTE[0]))
            .with(Series::per_epoch("val", &[f64::NAN, 0.6, 0.4, 0.35], PALETTE[1]));
        let img = chart.render();
        assert_eq!(img.dimensions(), (640, 400));
        assert!(count(&img, PALETTE[0]) > 200);
        assert!(count(&img, PALETTE[1]) > 150);
    }

    #[test]
    fn degenerate_inputs() {
        LineChart::new("", "", "").render();
        LineChart::new("one", "x", "y").with(Series::per_epoch("a", &[0.5], PALETTE[2])).render();
        LineChart::new("flat", "x", "y").with(Series::per_epoch("a", &[2.0, 2.0], PALETTE[2])).render();
    }

    #[test]
    fn tick_format() {
        assert_eq!(format_tick(0.25), "0.25");
        assert_eq!(format_tick(10.0), "10");
        assert_eq!(format_tick(0.0), "0");
        assert_eq!(format_tick(1e-5), "1.0e-5");
    }
}
