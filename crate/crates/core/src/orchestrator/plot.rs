//! Learning-curve export: seed-aggregated running-average returns against
//! environment steps, as CSV and as a PNG chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use font8x8::legacy::BASIC_LEGACY;

use super::metrics::{aggregate_seeds, running_average, EpisodeMetrics, RUNNING_WINDOW};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub label: String,
    /// Mean cumulative environment steps at each episode.
    pub env_steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub sem: Vec<f64>,
}

/// One series per algorithm: per-seed running averages, then mean and sem.
pub fn learning_curves(sweep: &BTreeMap<String, Vec<Vec<EpisodeMetrics>>>) -> Vec<CurveSeries> {
    sweep
        .iter()
        .map(|(label, runs)| {
            let returns: Vec<Vec<f64>> = runs
                .iter()
                .map(|r| running_average(&r.iter().map(|m| m.episode_return).collect::<Vec<_>>(), RUNNING_WINDOW))
                .collect();
            let steps: Vec<Vec<f64>> = runs.iter().map(|r| r.iter().map(|m| m.total_steps as f64).collect()).collect();
            let agg = aggregate_seeds(&returns);
            CurveSeries {
                label: label.clone(),
                env_steps: aggregate_seeds(&steps).mean,
                mean: agg.mean,
                sem: agg.sem,
            }
        })
        .collect()
}

pub fn curves_csv(series: &[CurveSeries]) -> String {
    let mut out = String::from("algo,episode,env_steps,mean_return,sem_return\n");
    for s in series {
        for i in 0..s.mean.len() {
            writeln!(out, "{},{},{},{},{}", s.label, i + 1, s.env_steps[i], s.mean[i], s.sem[i]).expect("string write");
        }
    }
    out
}

const PALETTE: [[u8; 3]; 9] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [23, 190, 207],
];

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            px: vec![[255; 3]; w * h],
        }
    }

    fn blend(&mut self, x: i64, y: i64, rgb: [u8; 3], alpha: f64) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let p = &mut self.px[y as usize * self.w + x as usize];
        for c in 0..3 {
            p[c] = (f64::from(p[c]) * (1.0 - alpha) + f64::from(rgb[c]) * alpha).round() as u8;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.blend(x, y, rgb, 1.0);
            self.blend(x, y + 1, rgb, 1.0);
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

    fn text(&mut self, x: i64, y: i64, s: &str, rgb: [u8; 3]) {
        for (k, ch) in s.chars().enumerate() {
            let Some(glyph) = BASIC_LEGACY.get(ch as usize) else { continue };
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        self.blend(x + 8 * k as i64 + col, y + row as i64, rgb, 1.0);
                    }
                }
            }
        }
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.w as u32, self.h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let flat: Vec<u8> = self.px.iter().flatten().copied().collect();
            writer.write_image_data(&flat).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        Ok(buf)
    }
}

/// Mean curves with shaded standard-error bands, axes, ticks and a legend.
pub fn render_curves(series: &[CurveSeries], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut c = Canvas::new(width, height);
    let (left, right, top, bottom) = (70i64, width as i64 - 20, 20i64, height as i64 - 50);
    let x_max = series
        .iter()
        .flat_map(|s| s.env_steps.iter().copied())
        .fold(1.0f64, f64::max);
    let y_max = series
        .iter()
        .flat_map(|s| s.mean.iter().zip(&s.sem).map(|(m, e)| m + e))
        .fold(1.0f64, f64::max);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = left as f64 + x / x_max * (right - left) as f64;
        let py = bottom as f64 - y / y_max * (bottom - top) as f64;
        (px.round() as i64, py.round() as i64)
    };
    let grid = [225, 225, 225];
    let ink = [0, 0, 0];
    for k in 0..=5 {
        let y = y_max * k as f64 / 5.0;
        let (_, py) = to_px(0.0, y);
        c.line((left, py), (right, py), grid);
        c.text(8, py - 4, &format!("{y:.2}"), ink);
        let x = x_max * k as f64 / 5.0;
        let (px, _) = to_px(x, 0.0);
        c.line((px, top), (px, bottom), grid);
        let label = format!("{}k", (x / 1000.0).round());
        c.text(px - 4 * label.len() as i64, bottom + 8, &label, ink);
    }
    c.line((left, top), (left, bottom), ink);
    c.line((left, bottom), (right, bottom), ink);
    c.text((left + right) / 2 - 36, bottom + 28, "env steps", ink);

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for j in 0..s.mean.len() {
            let (px, lo) = to_px(s.env_steps[j], (s.mean[j] - s.sem[j]).max(0.0));
            let (_, hi) = to_px(s.env_steps[j], s.mean[j] + s.sem[j]);
            let next_px = if j + 1 < s.mean.len() { to_px(s.env_steps[j + 1], 0.0).0 } else { px + 1 };
            for x in px..next_px.max(px + 1) {
                for y in hi..=lo {
                    c.blend(x, y, color, 0.15);
                }
            }
        }
        for j in 1..s.mean.len() {
            c.line(to_px(s.env_steps[j - 1], s.mean[j - 1]), to_px(s.env_steps[j], s.mean[j]), color);
        }
        let ly = top + 6 + 14 * i as i64;
        for dy in 0..8 {
            c.line((left + 10, ly + dy), (left + 26, ly + dy), color);
        }
        c.text(left + 32, ly, &s.label, ink);
    }
    c.encode()
}

/// Write `<stem>.csv` and `<stem>.png` for every algorithm in the sweep.
pub fn write_plot(sweep: &BTreeMap<String, Vec<Vec<EpisodeMetrics>>>, dir: &Path, stem: &str) -> Result<Vec<CurveSeries>> {
    let series = learning_curves(sweep);
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), curves_csv(&series))?;
    fs::write(dir.join(format!("{stem}.png")), render_curves(&series, 900, 560)?)?;
    Ok(series)
}
