//! Reconstruction report: overlaid ground-truth / prediction time series and
//! per-scale STFT magnitude and angle matrices, as CSV and PNG.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

use super::{Codec, CodecError};
use crate::spectral::multi_scale_spectra;

const PLOT_WIDTH: u32 = 1000;
const PLOT_HEIGHT: u32 = 300;
const CELL: u32 = 3;
const GAP: u32 = 6;
const GT_COLOR: Rgb<u8> = Rgb([20, 20, 20]);
const PD_COLOR: Rgb<u8> = Rgb([220, 40, 40]);

/// Paths written by [`reconstruct_report`], in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CodecError + '_ {
    move |source| CodecError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, body: &str) -> Result<(), CodecError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(body.as_bytes()).map_err(io_err(path))
}

fn matrix_csv(m: ArrayView2<f64>) -> String {
    let mut out = String::new();
    for row in m.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Five-stop approximation of a perceptual blue-green-yellow colormap.
fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Paints `m` (low frequencies at the bottom) into `img` at `(x0, y0)`.
fn paint(img: &mut RgbImage, m: &Array2<f64>, x0: u32, y0: u32, normalize: impl Fn(f64) -> f64) {
    let bins = m.nrows() as u32;
    for ((k, f), &v) in m.indexed_iter() {
        let color = colormap(normalize(v));
        let (px, py) = (x0 + f as u32 * CELL, y0 + (bins - 1 - k as u32) * CELL);
        for dy in 0..CELL {
            for dx in 0..CELL {
                img.put_pixel(px + dx, py + dy, color);
            }
        }
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), CodecError> {
    img.save(path).map_err(|e| CodecError::Image(format!("{}: {e}", path.display())))
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
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

fn time_series_png(gt: &[f32], pd: &[f32]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_WIDTH, PLOT_HEIGHT, Rgb([255, 255, 255]));
    let peak = gt
        .iter()
        .chain(pd)
        .fold(0.0f32, |m, v| m.max(v.abs()))
        .max(f32::MIN_POSITIVE);
    let mid = (PLOT_HEIGHT / 2) as f64;
    let scale = (PLOT_HEIGHT as f64 / 2.0 - 4.0) / f64::from(peak);
    let n = gt.len().max(2);
    let point = |i: usize, v: f32| {
        let x = (i as f64 * (PLOT_WIDTH - 1) as f64 / (n - 1) as f64).round() as i64;
        let y = (mid - f64::from(v) * scale).round() as i64;
        (x, y)
    };
    for (series, color) in [(gt, GT_COLOR), (pd, PD_COLOR)] {
        for i in 1..series.len() {
            draw_line(&mut img, point(i - 1, series[i - 1]), point(i, series[i]), color);
        }
    }
    img
}

/// Reconstructs `x` through `codec` and writes into `out_dir`:
/// `timeseries.csv` (`index,gt,pd`), `timeseries.png`, and for each STFT
/// scale `scale{i}_{magnitude,angle}_{gt,pd}.csv` plus `scale{i}.png`
/// (magnitude on top, angle below; ground truth left, prediction right).
pub fn reconstruct_report(codec: &Codec, x: &[f32], out_dir: &Path) -> Result<ReportFiles, CodecError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let input = ArrayView2::from_shape((1, x.len()), x).expect("one row");
    let pd = codec.reconstruct(input)?.into_raw_vec_and_offset().0;
    let mut files = ReportFiles::default();

    let path = out_dir.join("timeseries.csv");
    let mut csv = String::from("index,gt,pd\n");
    for (i, (g, p)) in x.iter().zip(&pd).enumerate() {
        csv.push_str(&format!("{i},{g:e},{p:e}\n"));
    }
    write_text(&path, &csv)?;
    files.files.push(path);
    let path = out_dir.join("timeseries.png");
    save_png(&time_series_png(x, &pd), &path)?;
    files.files.push(path);

    let to64 = |v: &[f32]| v.iter().map(|&s| f64::from(s)).collect::<Vec<_>>();
    let gt_spec = multi_scale_spectra(&to64(x), &codec.config.stft)?;
    let pd_spec = multi_scale_spectra(&to64(&pd), &codec.config.stft)?;
    for (i, (g, p)) in gt_spec.iter().zip(&pd_spec).enumerate() {
        for (kind, gm, pm) in [("magnitude", &g.magnitude, &p.magnitude), ("angle", &g.angle, &p.angle)] {
            for (who, m) in [("gt", gm), ("pd", pm)] {
                let path = out_dir.join(format!("scale{i}_{kind}_{who}.csv"));
                write_text(&path, &matrix_csv(m.view()))?;
                files.files.push(path);
            }
        }
        let (bins, frames) = (g.bins() as u32, g.frames() as u32);
        let (w, h) = (2 * frames * CELL + 3 * GAP, 2 * bins * CELL + 3 * GAP);
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let peak = g.magnitude.iter().chain(p.magnitude.iter()).fold(0.0f64, |m, &v| m.max(v));
        let log_peak = peak.ln_1p();
        let mag = |v: f64| if log_peak > 0.0 { v.ln_1p() / log_peak } else { 0.0 };
        let ang = |v: f64| (v + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
        let (left, right) = (GAP, 2 * GAP + frames * CELL);
        let (top, bottom) = (GAP, 2 * GAP + bins * CELL);
        paint(&mut img, &g.magnitude, left, top, mag);
        paint(&mut img, &p.magnitude, right, top, mag);
        paint(&mut img, &g.angle, left, bottom, ang);
        paint(&mut img, &p.angle, right, bottom, ang);
        let path = out_dir.join(format!("scale{i}.png"));
        save_png(&img, &path)?;
        files.files.push(path);
    }
    Ok(files)
}
