//! Procedural 2D shapes filled with mass points.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, Vec2};

/// Shape families. Every generated shape is centred on the origin and fits
/// inside `[-0.5, 0.5]²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeFamily {
    /// Random convex polygon inscribed in the radius-0.5 circle.
    ConvexPolygon {
        vertices: usize,
    },
    /// Star with alternating outer/inner radii.
    StarPolygon {
        spikes: usize,
    },
    RoundedRectangle,
    Disk,
    /// Axis-aligned unit square.
    Square,
    /// Points read from a flat little-endian `f32` file of `K × 2` values.
    Imported {
        path: PathBuf,
    },
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convex_polygon" => Ok(Self::ConvexPolygon { vertices: 6 }),
            "star_polygon" => Ok(Self::StarPolygon { spikes: 5 }),
            "rounded_rectangle" => Ok(Self::RoundedRectangle),
            "disk" => Ok(Self::Disk),
            "square" => Ok(Self::Square),
            other => Err(Error::validation(format!("unknown shape family `{other}`"))),
        }
    }
}

enum Region {
    Polygon(Vec<Vec2>),
    Disk(f64),
    RoundedRect { hx: f64, hy: f64, r: f64 },
}

impl Region {
    fn contains(&self, p: Vec2) -> bool {
        match self {
            Region::Polygon(v) => point_in_polygon(v, p),
            Region::Disk(r) => p[0] * p[0] + p[1] * p[1] <= r * r,
            Region::RoundedRect { hx, hy, r } => {
                let qx = (p[0].abs() - (hx - r)).max(0.0);
                let qy = (p[1].abs() - (hy - r)).max(0.0);
                p[0].abs() <= *hx && p[1].abs() <= *hy && qx * qx + qy * qy <= r * r
            }
        }
    }

    fn area(&self) -> f64 {
        match self {
            Region::Polygon(v) => polygon_area(v).abs(),
            Region::Disk(r) => std::f64::consts::PI * r * r,
            Region::RoundedRect { hx, hy, r } => 4.0 * hx * hy - (4.0 - std::f64::consts::PI) * r * r,
        }
    }
}

pub fn polygon_area(v: &[Vec2]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

/// Even-odd ray casting.
pub fn point_in_polygon(v: &[Vec2], p: Vec2) -> bool {
    let mut inside = false;
    let n = v.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn region(family: &ShapeFamily, rng: &mut ChaCha8Rng) -> Result<Region> {
    use std::f64::consts::TAU;
    Ok(match family {
        ShapeFamily::ConvexPolygon { vertices } => {
            if *vertices < 3 {
                return Err(Error::validation("convex polygon needs at least 3 vertices"));
            }
            // Jittered angles keep every gap well below π, so the polygon is
            // convex and contains the origin.
            let k = *vertices;
            let step = TAU / k as f64;
            let phase = rng.random::<f64>() * TAU;
            let pts = (0..k)
                .map(|i| {
                    let a = phase + step * (i as f64 + 0.35 * (rng.random::<f64>() - 0.5));
                    [0.5 * a.cos(), 0.5 * a.sin()]
                })
                .collect();
            Region::Polygon(pts)
        }
        ShapeFamily::StarPolygon { spikes } => {
            if *spikes < 3 {
                return Err(Error::validation("star polygon needs at least 3 spikes"));
            }
            let k = *spikes;
            let inner = 0.25 + 0.12 * rng.random::<f64>();
            let phase = rng.random::<f64>() * TAU;
            let pts = (0..2 * k)
                .map(|i| {
                    let a = phase + TAU * i as f64 / (2 * k) as f64;
                    let r = if i % 2 == 0 { 0.5 } else { inner };
                    [r * a.cos(), r * a.sin()]
                })
                .collect();
            Region::Polygon(pts)
        }
        ShapeFamily::RoundedRectangle => {
            let short = 0.3 + 0.2 * rng.random::<f64>();
            let (hx, hy) = if rng.random::<bool>() {
                (0.5, short)
            } else {
                (short, 0.5)
            };
            let r = (0.05 + 0.15 * rng.random::<f64>()).min(hx.min(hy));
            Region::RoundedRect { hx, hy, r }
        }
        ShapeFamily::Disk => Region::Disk(0.5),
        ShapeFamily::Square => Region::Polygon(vec![[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]),
        ShapeFamily::Imported { .. } => unreachable!("imported shapes are not regions"),
    })
}

/// Fill a shape with exactly `n_points` points on a jittered grid.
/// Deterministic per `(seed, family, n_points)`.
pub fn sample_shape(seed: u64, family: &ShapeFamily, n_points: usize) -> Result<Vec<Vec2>> {
    if n_points == 0 {
        return Err(Error::validation("shape needs at least one point"));
    }
    if let ShapeFamily::Imported { path } = family {
        return import_points(path, n_points);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region = region(family, &mut rng)?;
    let mut h = (region.area() / n_points as f64).sqrt();
    for _ in 0..200 {
        let ox = rng.random::<f64>() * h;
        let oy = rng.random::<f64>() * h;
        let cells = (1.0 / h).ceil() as i64 + 1;
        let mut pts = Vec::new();
        for iy in 0..cells {
            for ix in 0..cells {
                let jx = (rng.random::<f64>() - 0.5) * 0.5 * h;
                let jy = (rng.random::<f64>() - 0.5) * 0.5 * h;
                let p = [-0.5 + ox + ix as f64 * h + jx, -0.5 + oy + iy as f64 * h + jy];
                if p[0].abs() <= 0.5 && p[1].abs() <= 0.5 && region.contains(p) {
                    pts.push(p);
                }
            }
        }
        if pts.len() >= n_points {
            let mut idx: Vec<usize> = (0..pts.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(n_points);
            idx.sort_unstable();
            return Ok(idx.into_iter().map(|i| pts[i]).collect());
        }
        h *= 0.97;
    }
    Err(Error::validation("could not fill shape with the requested point count"))
}

/// Read an external point set, centre it, scale it into `[-0.5, 0.5]²`, and
/// subsample with farthest-point sampling down to `n_points`.
pub fn import_points(path: &Path, n_points: usize) -> Result<Vec<Vec2>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(
            path.display().to_string(),
            "point file length is not a multiple of 8 bytes",
        ));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let pts: Vec<Vec2> = vals.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    if pts.len() < n_points {
        return Err(Error::validation(format!(
            "imported shape has {} points, {n_points} requested",
            pts.len()
        )));
    }
    if pts.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::validation("imported shape contains non-finite values"));
    }
    let c = crate::geometry::centroid(&pts);
    let extent = pts
        .iter()
        .map(|p| (p[0] - c[0]).abs().max((p[1] - c[1]).abs()))
        .fold(0.0, f64::max);
    let s = if extent > 0.0 { 0.5 / extent } else { 1.0 };
    let pts: Vec<Vec2> = pts.iter().map(|p| [(p[0] - c[0]) * s, (p[1] - c[1]) * s]).collect();
    let mut idx = farthest_point_sample(&pts, n_points)?;
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pts[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_fill_is_contained_and_exact() {
        let pts = sample_shape(3, &ShapeFamily::Square, 400).unwrap();
        assert_eq!(pts.len(), 400);
        assert!(pts.iter().all(|p| p[0].abs() <= 0.5 && p[1].abs() <= 0.5));
    }

    #[test]
    fn sampling_is_deterministic() {
        for fam in [
            ShapeFamily::ConvexPolygon { vertices: 7 },
            ShapeFamily::StarPolygon { spikes: 5 },
            ShapeFamily::RoundedRectangle,
        ] {
            let a = sample_shape(11, &fam, 300).unwrap();
            let b = sample_shape(11, &fam, 300).unwrap();
            assert_eq!(a, b);
            let c = sample_shape(12, &fam, 300).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(matches!("blob".parse::<ShapeFamily>(), Err(Error::Validation(_))));
        assert!(serde_json::from_str::<ShapeFamily>(r#"{"family":"blob"}"#).is_err());
    }

    #[test]
    fn degenerate_polygon_rejected() {
        let r = sample_shape(0, &ShapeFamily::ConvexPolygon { vertices: 2 }, 10);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn polygon_membership() {
        let sq = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(point_in_polygon(&sq, [0.5, 0.5]));
        assert!(!point_in_polygon(&sq, [1.5, 0.5]));
        assert!((polygon_area(&sq) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn import_recentres_and_subsamples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.f32");
        let mut bytes = Vec::new();
        for i in 0..50 {
            for v in [2.0 + i as f32 * 0.1, 3.0 + (i % 7) as f32 * 0.1] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(&path, bytes).unwrap();
        let pts = sample_shape(0, &ShapeFamily::Imported { path }, 20).unwrap();
        assert_eq!(pts.len(), 20);
        assert!(pts
            .iter()
            .all(|p| p[0].abs() <= 0.5 + 1e-12 && p[1].abs() <= 0.5 + 1e-12));
    }
}
