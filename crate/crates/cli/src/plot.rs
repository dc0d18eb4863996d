//! Pitch-contour overlay rendered to a PNG, plus its tab-separated data.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};

pub const WIDTH: u32 = 800;
pub const HEIGHT: u32 = 400;
const MARGIN: i64 = 40;

const PALETTE: [[u8; 3]; 6] = [[0, 0, 0], [214, 39, 40], [31, 119, 180], [44, 160, 44], [148, 103, 189], [255, 127, 14]];

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    /// Hz per frame; 0 = unvoiced gap.
    pub values: Vec<f32>,
}

/// `frame` column plus one column per curve; rows span the longest curve and
/// missing frames are left empty.
pub fn write_contours(w: &mut dyn Write, curves: &[Curve]) -> std::io::Result<()> {
    let labels: Vec<&str> = curves.iter().map(|c| c.label.as_str()).collect();
    writeln!(w, "frame\t{}", labels.join("\t"))?;
    let rows = curves.iter().map(|c| c.values.len()).max().unwrap_or(0);
    for t in 0..rows {
        let cells: Vec<String> = curves.iter().map(|c| c.values.get(t).map(|v| format!("{v:.3}")).unwrap_or_default()).collect();
        writeln!(w, "{t}\t{}", cells.join("\t"))?;
    }
    Ok(())
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x, y + 1, c);
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

/// Draws the curves over frame (x) and Hz (y) axes.
pub fn render(curves: &[Curve]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as i64, HEIGHT as i64);
    let axis = Rgb([120, 120, 120]);
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis);

    let frames = curves.iter().map(|c| c.values.len()).max().unwrap_or(0).max(2);
    let voiced = curves.iter().flat_map(|c| c.values.iter().copied()).filter(|v| *v > 0.0);
    let (lo, hi) = voiced.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo - 5.0, hi + 5.0) } else { (0.0, 1.0) };
    let px = |t: usize| MARGIN + (t as i64 * (w - 2 * MARGIN)) / (frames as i64 - 1);
    let py = |v: f32| h - MARGIN - (((v - lo) / (hi - lo)) * (h - 2 * MARGIN) as f32).round() as i64;

    for (k, c) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        for t in 1..c.values.len() {
            let (a, b) = (c.values[t - 1], c.values[t]);
            if a > 0.0 && b > 0.0 {
                line(&mut img, (px(t - 1), py(a)), (px(t), py(b)), color);
            }
        }
        // Legend swatch.
        let y = MARGIN / 2 + 10 * k as i64;
        line(&mut img, (w - MARGIN - 30, y), (w - MARGIN, y), color);
    }
    img
}

pub fn save_png(path: &Path, curves: &[Curve]) -> image::ImageResult<()> {
    render(curves).save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contour_rows_span_longest_curve() {
        let curves = vec![
            Curve { label: "Predicted".into(), values: vec![100.0, 0.0, 110.0] },
            Curve { label: "random-1".into(), values: vec![90.0] },
        ];
        let mut buf = Vec::new();
        write_contours(&mut buf, &curves).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "frame\tPredicted\trandom-1");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "2\t110.000\t");
    }

    #[test]
    fn render_draws_each_curve() {
        let curves = vec![
            Curve { label: "a".into(), values: vec![100.0, 120.0, 140.0] },
            Curve { label: "b".into(), values: vec![150.0, 0.0, 130.0] },
        ];
        let img = render(&curves);
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        for color in [PALETTE[0], PALETTE[1]] {
            assert!(img.pixels().any(|p| p.0 == color));
        }
    }
}
