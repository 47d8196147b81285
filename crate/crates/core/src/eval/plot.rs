//! Minimal PNG line charts: axes, gridlines and one colored polyline per
//! series. No text rendering; the legend order is the series order.

use std::path::Path;

use crate::image::Image;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [[f32; 3]; 6] =
    [[0.12, 0.47, 0.71], [1.0, 0.5, 0.05], [0.17, 0.63, 0.17], [0.84, 0.15, 0.16], [0.58, 0.4, 0.74], [0.55, 0.34, 0.29]];

fn line(img: &mut Image, a: (f64, f64), b: (f64, f64), rgb: [f32; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as usize) < img.width() && (py as usize) < img.height() {
                img.set(px as usize, py as usize, rgb);
            }
        }
    }
}

pub fn line_plot(series: &[Series], width: usize, height: usize, path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() || pts.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Invalid("plot needs finite points".into()));
    }
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let (xs, ys) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let (ml, mr, mt, mb) = (40.0, 20.0, 20.0, 30.0);
    let (pw, ph) = (width as f64 - ml - mr, height as f64 - mt - mb);
    let to_px = |p: (f64, f64)| (ml + (p.0 - x0) / xs * pw, mt + (1.0 - (p.1 - y0) / ys * 1.0) * ph);

    let mut img = Image::from_fn(width, height, |_, _| [1.0; 3]);
    for k in 0..=4 {
        let y = mt + ph * k as f64 / 4.0;
        line(&mut img, (ml, y), (ml + pw, y), [0.9; 3]);
    }
    line(&mut img, (ml, mt), (ml, mt + ph), [0.0; 3]);
    line(&mut img, (ml, mt + ph), (ml + pw, mt + ph), [0.0; 3]);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for w in s.points.windows(2) {
            line(&mut img, to_px(w[0]), to_px(w[1]), c);
        }
        for &p in &s.points {
            let (x, y) = to_px(p);
            line(&mut img, (x - 2.0, y), (x + 2.0, y), c);
            line(&mut img, (x, y - 2.0), (x, y + 2.0), c);
        }
        // legend swatch
        let ly = 6.0 + 6.0 * i as f64;
        line(&mut img, (width as f64 - 40.0, ly), (width as f64 - 25.0, ly), c);
    }
    img.save_png(path)
}
