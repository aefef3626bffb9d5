//! PNG figures: error-versus-horizon curves and rollout frame grids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Steps shown in a frame grid when the trajectory is long enough.
pub const GRID_STEPS: [usize; 6] = [5, 10, 15, 20, 25, 30];

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
    Rgb([255, 127, 14]),
    Rgb([23, 190, 207]),
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let dx = (b.0 - x0).abs();
    let dy = -(b.1 - y0).abs();
    let sx = if x0 < b.0 { 1 } else { -1 };
    let sy = if y0 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        if (x0, y0) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Mean error per split and step parsed from a `split,sample_id,step,mse`
/// report.
pub fn parse_report(text: &str) -> Result<BTreeMap<String, BTreeMap<usize, f64>>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format("report", e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["split", "sample_id", "step", "mse"] {
        return Err(Error::format("report", "expected columns split,sample_id,step,mse"));
    }
    let mut sums: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format("report", e.to_string()))?;
        let step: usize = row[2]
            .parse()
            .map_err(|_| Error::format("step", format!("bad value `{}`", &row[2])))?;
        let mse: f64 = row[3]
            .parse()
            .map_err(|_| Error::format("mse", format!("bad value `{}`", &row[3])))?;
        let e = sums
            .entry(row[0].to_string())
            .or_default()
            .entry(step)
            .or_insert((0.0, 0));
        e.0 += mse;
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::validation("report has no rows"));
    }
    Ok(sums
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()))
        .collect())
}

/// Error-versus-step curve on a log scale.
pub fn mse_curve(points: &BTreeMap<usize, f64>) -> RgbImage {
    let (w, h, m) = (480u32, 320u32, 30i64);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let (x1, y1) = (w as i64 - m, h as i64 - m);
    line(&mut img, (m, m), (m, y1), AXIS);
    line(&mut img, (m, y1), (x1, y1), AXIS);
    let logs: Vec<(usize, f64)> = points.iter().map(|(&s, &v)| (s, v.max(1e-30).log10())).collect();
    let smax = logs.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let lo = logs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = logs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let to_px = |s: usize, v: f64| {
        let x = m + ((x1 - m) as f64 * s as f64 / smax).round() as i64;
        let y = y1 - ((y1 - m) as f64 * (v - lo) / span).round() as i64;
        (x, y)
    };
    let mut prev = None;
    for &(s, v) in &logs {
        let p = to_px(s, v);
        for dx in -2..=2 {
            for dy in -2..=2 {
                put(&mut img, p.0 + dx, p.1 + dy, PALETTE[0]);
            }
        }
        if let Some(q) = prev {
            line(&mut img, q, p, PALETTE[0]);
        }
        prev = Some(p);
    }
    img
}

/// Write one curve per split as `<dir>/mse_<split>.png`.
pub fn plot_report(report_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(report_csv).map_err(|e| Error::io(report_csv, e))?;
    let splits = parse_report(&text)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::new();
    for (split, pts) in &splits {
        let path = out_dir.join(format!("mse_{split}.png"));
        save(&mse_curve(pts), &path)?;
        out.push(path);
    }
    Ok(out)
}

/// Side-by-side scatter panels of the unit domain at `steps`, coloured by
/// object.
pub fn frame_grid(traj: &Trajectory, steps: &[usize]) -> Result<RgbImage> {
    let steps: Vec<usize> = steps.iter().copied().filter(|&s| s < traj.n_frames()).collect();
    if steps.is_empty() {
        return Err(Error::validation("trajectory is too short for any requested frame"));
    }
    let panel = 200u32;
    let gap = 8u32;
    let w = steps.len() as u32 * (panel + gap) + gap;
    let mut img = RgbImage::from_pixel(w, panel + 2 * gap, WHITE);
    for (k, &s) in steps.iter().enumerate() {
        let ox = (gap + k as u32 * (panel + gap)) as i64;
        let oy = gap as i64;
        let e = panel as i64 - 1;
        for (a, b) in [((0, 0), (e, 0)), ((e, 0), (e, e)), ((e, e), (0, e)), ((0, e), (0, 0))] {
            line(&mut img, (ox + a.0, oy + a.1), (ox + b.0, oy + b.1), AXIS);
        }
        let f = &traj.frames[s];
        for (p, &o) in f.positions.iter().zip(&f.object_ids) {
            let x = ox + (p[0] * e as f64).round() as i64;
            let y = oy + e - (p[1] * e as f64).round() as i64;
            put(&mut img, x, y, PALETTE[o as usize % PALETTE.len()]);
        }
    }
    Ok(img)
}

pub fn plot_trajectory(traj: &Trajectory, out_path: &Path) -> Result<()> {
    save(&frame_grid(traj, &GRID_STEPS)?, out_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_means() {
        let text = "split,sample_id,step,mse\ntest,a,1,1e-6\ntest,b,1,3e-6\ntest,a,5,2e-6\n";
        let m = parse_report(text).unwrap();
        assert!((m["test"][&1] - 2e-6).abs() < 1e-18);
        assert_eq!(m["test"].len(), 2);
        assert!(parse_report("a,b\n1,2\n").is_err());
    }

    #[test]
    fn curve_is_deterministic() {
        let pts: BTreeMap<usize, f64> = [(1, 1e-6), (5, 4e-6), (10, 2e-5)].into_iter().collect();
        assert_eq!(mse_curve(&pts), mse_curve(&pts));
    }
}
