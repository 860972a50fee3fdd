//! Curve data files and a small line-plot rasteriser.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fpd_core::metrics::PckCurve;
use fpd_core::training::LogRecord;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// What `plot-curves` reads: named series sharing one pair of axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFile {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

impl CurveFile {
    /// Loss components against step.
    pub fn from_log(title: &str, records: &[LogRecord]) -> Self {
        let mut total = Series::named("loss_total");
        let mut mse = Series::named("loss_mse");
        let mut distill = Series::named("loss_distill");
        for r in records {
            if let LogRecord::Step {
                step,
                loss_total,
                loss_mse,
                loss_distill,
                ..
            } = r
            {
                let x = *step as f64;
                total.push(x, *loss_total);
                mse.push(x, *loss_mse);
                if let Some(d) = loss_distill {
                    distill.push(x, *d);
                }
            }
        }
        let series = [total, mse, distill].into_iter().filter(|s| !s.x.is_empty()).collect();
        Self {
            title: title.into(),
            x_label: "step".into(),
            y_label: "loss".into(),
            series,
        }
    }

    pub fn from_pck(title: &str, curve: &PckCurve) -> Self {
        Self {
            title: title.into(),
            x_label: "normalized distance threshold".into(),
            y_label: "fraction correct".into(),
            series: vec![Series {
                name: title.into(),
                x: curve.thresholds.clone(),
                y: curve.accuracy.clone(),
            }],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Reads a curve file, or a JSONL training log (`.jsonl`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
        if path.extension().is_some_and(|e| e == "jsonl") {
            let records = parse_log(&text).with_context(|| format!("parsing log {}", path.display()))?;
            return Ok(Self::from_log(stem, &records));
        }
        serde_json::from_str(&text).with_context(|| format!("parsing curve file {}", path.display()))
    }
}

impl Series {
    fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    fn push(&mut self, x: f64, y: f64) {
        self.x.push(x);
        self.y.push(y);
    }
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("line {}", i + 1)))
        .collect()
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: f64 = 40.0;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Rasterises every series as a polyline. The y axis is logarithmic when all
/// values are positive and span more than two decades. A colour key sits in
/// the top-right corner, one swatch per series in order.
pub fn render(curves: &CurveFile) -> Result<RgbImage> {
    let points: Vec<(f64, f64)> = curves
        .series
        .iter()
        .flat_map(|s| s.x.iter().copied().zip(s.y.iter().copied()))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if points.is_empty() {
        bail!("`{}` has no finite points to plot", curves.title);
    }
    for s in &curves.series {
        if s.x.len() != s.y.len() {
            bail!("series `{}` has {} x and {} y values", s.name, s.x.len(), s.y.len());
        }
    }
    let (ymin, ymax) = bounds(points.iter().map(|p| p.1));
    let log_y = ymin > 0.0 && ymax / ymin > 100.0;
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let (x0, x1) = pad(bounds(points.iter().map(|p| p.0)));
    let (y0, y1) = pad((ty(ymin), ty(ymax)));

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as f64, HEIGHT as f64);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (w - 2.0 * MARGIN);
    let py = |y: f64| h - MARGIN - (ty(y) - y0) / (y1 - y0) * (h - 2.0 * MARGIN);

    let axis = Rgb([0, 0, 0]);
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis, 1);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis, 1);
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let gx = MARGIN + f * (w - 2.0 * MARGIN);
        let gy = h - MARGIN - f * (h - 2.0 * MARGIN);
        line(&mut img, (gx, h - MARGIN), (gx, h - MARGIN + 5.0), axis, 1);
        line(&mut img, (MARGIN - 5.0, gy), (MARGIN, gy), axis, 1);
    }

    for (i, s) in curves.series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<(f64, f64)> = s
            .x
            .iter()
            .zip(&s.y)
            .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || **y > 0.0))
            .map(|(&x, &y)| (px(x), py(y)))
            .collect();
        for seg in pts.windows(2) {
            line(&mut img, seg[0], seg[1], c, 2);
        }
        if let [only] = pts[..] {
            line(&mut img, only, only, c, 3);
        }
        let kx = w - MARGIN - 14.0;
        let ky = MARGIN + 4.0 + 14.0 * i as f64;
        for d in 0..10 {
            line(&mut img, (kx, ky + d as f64), (kx + 10.0, ky + d as f64), c, 1);
        }
    }
    Ok(img)
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

fn pad((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi - lo > 0.0 {
        let m = 0.02 * (hi - lo);
        (lo - m, hi + m)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Thick line by dense sampling; `width` is the square brush side.
fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>, width: i64) {
    let len = ((b.0 - a.0).abs()).max((b.1 - a.1).abs());
    let n = (len.ceil() as usize).max(1) * 2;
    let r = (width - 1) / 2;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = (a.0 + t * (b.0 - a.0)).round() as i64;
        let y = (a.1 + t * (b.1 - a.1)).round() as i64;
        for dy in -r..=width - 1 - r {
            for dx in -r..=width - 1 - r {
                let (u, v) = (x + dx, y + dy);
                if u >= 0 && v >= 0 && u < img.width() as i64 && v < img.height() as i64 {
                    img.put_pixel(u as u32, v as u32, c);
                }
            }
        }
    }
}

/// Renders `input` to `<out_dir>/<stem>.png`.
pub fn plot_file(input: &Path, out_dir: &Path) -> Result<std::path::PathBuf> {
    let curves = CurveFile::load(input)?;
    let img = render(&curves).with_context(|| format!("plotting {}", input.display()))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
    let out = out_dir.join(format!("{stem}.png"));
    img.save(&out).with_context(|| format!("writing {}", out.display()))?;
    Ok(out)
}
