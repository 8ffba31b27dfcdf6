//! Static artifacts: SVG line charts for the training log and PNG mid-slice
//! segmentation overlays.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use rcps_core::error::{Error, Result};
use rcps_core::volume::{LabelMap, Volume};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;

struct Series {
    name: &'static str,
    color: &'static str,
    values: Vec<f64>,
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

/// Minimal hand-rolled SVG polyline chart; deterministic bytes for a given
/// input.
fn line_chart(title: &str, xs: &[f64], series: &[Series]) -> String {
    let (x0, x1) = finite_range(xs.iter().copied());
    let (mut y0, mut y1) = finite_range(series.iter().flat_map(|s| s.values.iter().copied()));
    let pad = (y1 - y0) * 0.05;
    y0 -= pad;
    y1 += pad;

    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>
"#,
        WIDTH / 2.0
    );
    // Axes and tick labels.
    let _ = write!(
        svg,
        r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>
"#,
        l = MARGIN_L,
        r = WIDTH - MARGIN_R,
        t = MARGIN_T,
        b = HEIGHT - MARGIN_B
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.4}</text>
<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.4}</text>
"#,
            px(fx),
            HEIGHT - MARGIN_B + 18.0,
            fx,
            MARGIN_L - 6.0,
            py(fy) + 4.0,
            fy
        );
    }
    // Legend and polylines.
    for (i, s) in series.iter().enumerate() {
        let lx = MARGIN_L + 12.0 + 130.0 * i as f64;
        let _ = write!(
            svg,
            r#"<rect x="{lx}" y="{y}" width="10" height="10" fill="{c}"/>
<text x="{}" y="{}" font-family="sans-serif" font-size="12">{n}</text>
"#,
            lx + 14.0,
            MARGIN_T + 3.0,
            y = MARGIN_T - 6.0,
            c = s.color,
            n = s.name
        );
        let mut points = String::new();
        for (&x, &y) in xs.iter().zip(&s.values) {
            if x.is_finite() && y.is_finite() {
                let _ = write!(points, "{:.2},{:.2} ", px(x), py(y));
            }
        }
        let _ = write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>
"#,
            points.trim_end(),
            s.color
        );
    }
    svg.push_str("</svg>\n");
    svg
}

struct Log {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Log {
    fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Format(format!("training log has no '{name}' column")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

fn read_log(path: &Path) -> Result<Log> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("training log {} is empty", path.display())))?;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("bad log row {}: {e}", lineno + 2)))?;
        if row.len() != columns.len() {
            return Err(Error::Format(format!(
                "log row {} has {} fields, header has {}",
                lineno + 2,
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("training log {} has no data rows", path.display())));
    }
    Ok(Log { columns, rows })
}

/// Renders loss_curves.svg and schedules.svg from a training log.
pub fn training_curves(log_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let log = read_log(log_path)?;
    let steps = log.column("step")?;

    let losses = [
        ("seg", "#1f77b4"),
        ("rp", "#ff7f0e"),
        ("bc", "#2ca02c"),
        ("sup_total", "#d62728"),
        ("unsup_total", "#9467bd"),
    ];
    let series: Vec<Series> = losses
        .iter()
        .map(|&(name, color)| Ok(Series { name, color, values: log.column(name)? }))
        .collect::<Result<_>>()?;
    let loss_path = out.join("loss_curves.svg");
    std::fs::write(&loss_path, line_chart("training losses", &steps, &series))?;

    let sched = [("lr", "#1f77b4"), ("alpha", "#ff7f0e"), ("beta", "#2ca02c")];
    let series: Vec<Series> = sched
        .iter()
        .map(|&(name, color)| Ok(Series { name, color, values: log.column(name)? }))
        .collect::<Result<_>>()?;
    let sched_path = out.join("schedules.svg");
    std::fs::write(&sched_path, line_chart("lr and loss-weight schedules", &steps, &series))?;

    Ok(vec![loss_path, sched_path])
}

/// In-slice 4-neighbour class boundary, volume border included.
fn is_contour(labels: &ndarray::ArrayView2<u8>, y: usize, x: usize) -> bool {
    let v = labels[[y, x]];
    if v == 0 {
        return false;
    }
    let (h, w) = labels.dim();
    if y == 0 || y == h - 1 || x == 0 || x == w - 1 {
        return true;
    }
    labels[[y - 1, x]] != v
        || labels[[y + 1, x]] != v
        || labels[[y, x - 1]] != v
        || labels[[y, x + 1]] != v
}

/// Writes a mid-axial-slice PNG: grayscale intensities, prediction contours
/// in red, ground-truth contours in green.
pub fn overlay(vol: &Volume, pred: &LabelMap, gt: Option<&LabelMap>, out: &Path) -> Result<PathBuf> {
    if pred.shape() != vol.shape() {
        return Err(Error::InvalidArgument(format!(
            "prediction shape {:?} does not match volume {:?}",
            pred.shape(),
            vol.shape()
        )));
    }
    if let Some(gt) = gt {
        if gt.shape() != vol.shape() {
            return Err(Error::InvalidArgument(format!(
                "ground-truth shape {:?} does not match volume {:?}",
                gt.shape(),
                vol.shape()
            )));
        }
    }
    let z = vol.shape()[0] / 2;
    let slice = vol.data.index_axis(ndarray::Axis(0), z);
    let pred_slice = pred.data.index_axis(ndarray::Axis(0), z);
    let gt_slice = gt.map(|g| g.data.index_axis(ndarray::Axis(0), z));

    let (lo, hi) = finite_range(slice.iter().map(|&v| v as f64));
    let (h, w) = slice.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = (((slice[[y, x]] as f64 - lo) / (hi - lo)) * 255.0).clamp(0.0, 255.0) as u8;
            let mut px = [g, g, g];
            if let Some(gs) = &gt_slice {
                if is_contour(gs, y, x) {
                    px = [40, 200, 40];
                }
            }
            if is_contour(&pred_slice, y, x) {
                // Overlap with a ground-truth contour shows as yellow.
                px = if px[1] == 200 { [230, 220, 40] } else { [220, 40, 40] };
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    let scale = (256 / w.max(h).max(1)).clamp(1, 8) as u32;
    let img = imageops::resize(
        &img,
        w as u32 * scale,
        h as u32 * scale,
        imageops::FilterType::Nearest,
    );
    let path = out.join(format!("overlay_{}.png", vol.identifier));
    img.save(&path).map_err(|e| Error::Format(format!("failed to write overlay: {e}")))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn curves_from_a_small_log() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("train_log.csv");
        std::fs::write(
            &log,
            "step,epoch,lr,alpha,beta,seg,rp,bc,sup_total,unsup_total,kl_mean\n\
             0,0,0.01,0.0,0.0,1.5,0.2,0.3,1.55,0.05,0.01\n\
             1,0,0.009,0.05,0.05,1.2,0.1,0.2,1.25,0.03,0.02\n",
        )
        .unwrap();
        let files = training_curves(&log, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        for f in files {
            let body = std::fs::read_to_string(f).unwrap();
            assert!(body.starts_with("<svg"));
            assert!(body.contains("polyline"));
        }
    }

    #[test]
    fn empty_and_headerless_logs_fail() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("empty.csv");
        std::fs::write(&log, "").unwrap();
        assert!(matches!(training_curves(&log, dir.path()), Err(Error::Format(_))));

        std::fs::write(&log, "step,epoch\n").unwrap();
        assert!(matches!(training_curves(&log, dir.path()), Err(Error::Format(_))));

        let missing = dir.path().join("nope.csv");
        assert!(matches!(training_curves(&missing, dir.path()), Err(Error::Io(_))));
    }

    #[test]
    fn overlay_marks_contours() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new(Array3::zeros((8, 8, 8)), [1.0; 3], "case").unwrap();
        let mut lab = Array3::<u8>::zeros((8, 8, 8));
        lab.slice_mut(ndarray::s![3..6, 2..5, 2..5]).fill(1);
        let pred = LabelMap::new(lab.clone(), 2).unwrap();
        let gt = LabelMap::new(lab, 2).unwrap();
        let path = overlay(&vol, &pred, Some(&gt), dir.path()).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert!(img.pixels().any(|p| p.0 == [230, 220, 40]), "agreeing contours render yellow");
    }
}
