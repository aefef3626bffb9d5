//! Mass-point clouds, trajectories, and their on-disk format.
//!
//! A trajectory directory holds `meta.json` plus three flat little-endian
//! arrays: `positions.f32` and `velocities.f32` (frames × points × 2, frame
//! major) and `object_ids.u32` (points).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::geometry::{GroupElement, Vec2};

pub const FORMAT_VERSION: u32 = 1;

/// Positions, velocities and object labels of every mass point at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct MassPointCloud {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub object_ids: Vec<u32>,
}

impl MassPointCloud {
    pub fn new(positions: Vec<Vec2>, velocities: Vec<Vec2>, object_ids: Vec<u32>) -> Result<Self> {
        let c = Self {
            positions,
            velocities,
            object_ids,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.velocities.len() != n || self.object_ids.len() != n {
            return Err(Error::validation(format!(
                "cloud arrays disagree: {} positions, {} velocities, {} object ids",
                n,
                self.velocities.len(),
                self.object_ids.len()
            )));
        }
        if n == 0 {
            return Err(Error::validation("cloud has no points"));
        }
        let finite = |v: &Vec2| v[0].is_finite() && v[1].is_finite();
        if !self.positions.iter().all(finite) || !self.velocities.iter().all(finite) {
            return Err(Error::validation("cloud contains non-finite values"));
        }
        let n_obj = self.n_objects();
        let mut seen = vec![false; n_obj];
        for &o in &self.object_ids {
            seen[o as usize] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::validation("object ids are not contiguous from 0"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_objects(&self) -> usize {
        self.object_ids.iter().map(|&o| o as usize + 1).max().unwrap_or(0)
    }

    /// Point indices of each object, in ascending order.
    pub fn object_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_objects()];
        for (i, &o) in self.object_ids.iter().enumerate() {
            out[o as usize].push(i);
        }
        out
    }

    pub fn positions_mat(&self) -> Mat {
        vecs_to_mat(&self.positions)
    }

    pub fn velocities_mat(&self) -> Mat {
        vecs_to_mat(&self.velocities)
    }

    /// Positions transform as points, velocities as free vectors.
    pub fn transformed(&self, g: &GroupElement) -> Self {
        Self {
            positions: self.positions.iter().map(|&p| g.act_point(p)).collect(),
            velocities: self.velocities.iter().map(|&v| g.act_vector(v)).collect(),
            object_ids: self.object_ids.clone(),
        }
    }

    /// Keep only the points of the listed objects, relabelled in list order.
    pub fn select_objects(&self, objects: &[u32]) -> Result<Self> {
        let mut positions = Vec::new();
        let mut velocities = Vec::new();
        let mut ids = Vec::new();
        for (new_id, &o) in objects.iter().enumerate() {
            for i in (0..self.len()).filter(|&i| self.object_ids[i] == o) {
                positions.push(self.positions[i]);
                velocities.push(self.velocities[i]);
                ids.push(new_id as u32);
            }
        }
        Self::new(positions, velocities, ids)
    }

    pub fn kinetic_energy(&self, particle_mass: f64) -> f64 {
        self.velocities
            .iter()
            .map(|v| 0.5 * particle_mass * (v[0] * v[0] + v[1] * v[1]))
            .sum()
    }
}

pub fn vecs_to_mat(v: &[Vec2]) -> Mat {
    Mat::from_shape_fn((v.len(), 2), |(i, j)| v[i][j])
}

pub fn mat_to_vecs(m: &Mat) -> Vec<Vec2> {
    assert_eq!(m.ncols(), 2);
    m.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Producer of the trajectory (simulator name or model rollout).
    pub generator: String,
    pub config_hash: String,
    pub seed: u64,
    /// Digest of the three array files, filled in when written.
    #[serde(default)]
    pub content_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<MassPointCloud>,
    pub dt: f64,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format_version: u32,
    n_frames: usize,
    n_points: usize,
    n_objects: usize,
    dt_seconds: f64,
    provenance: Provenance,
}

impl Trajectory {
    pub fn new(frames: Vec<MassPointCloud>, dt: f64, provenance: Provenance) -> Result<Self> {
        let t = Self { frames, dt, provenance };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::validation("trajectory dt must be positive"));
        }
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::validation("trajectory has no frames"))?;
        for f in &self.frames {
            f.validate()?;
            if f.object_ids != first.object_ids {
                return Err(Error::validation("object ids change between frames"));
            }
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_points(&self) -> usize {
        self.frames[0].len()
    }

    pub fn n_objects(&self) -> usize {
        self.frames[0].n_objects()
    }

    /// Round every payload value to `f32`, the precision of the file format.
    pub fn quantize(&mut self) {
        for f in &mut self.frames {
            for p in f.positions.iter_mut().chain(f.velocities.iter_mut()) {
                p[0] = p[0] as f32 as f64;
                p[1] = p[1] as f32 as f64;
            }
        }
    }

    pub fn transformed(&self, g: &GroupElement) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f.transformed(g)).collect(),
            dt: self.dt,
            provenance: self.provenance.clone(),
        }
    }

    fn array_bytes(&self) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let mut pos = Vec::with_capacity(self.n_frames() * self.n_points() * 8);
        let mut vel = Vec::with_capacity(pos.capacity());
        for f in &self.frames {
            for (p, v) in f.positions.iter().zip(&f.velocities) {
                for k in 0..2 {
                    pos.extend_from_slice(&(p[k] as f32).to_le_bytes());
                    vel.extend_from_slice(&(v[k] as f32).to_le_bytes());
                }
            }
        }
        let ids = self.frames[0].object_ids.iter().flat_map(|o| o.to_le_bytes()).collect();
        (pos, vel, ids)
    }

    /// SHA-256 over the serialized arrays (positions, velocities, object ids).
    pub fn content_hash(&self) -> String {
        let (pos, vel, ids) = self.array_bytes();
        content_digest(&pos, &vel, &ids)
    }
}

fn content_digest(pos: &[u8], vel: &[u8], ids: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(pos);
    h.update(vel);
    h.update(ids);
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write `traj` into directory `dir` (created if missing). Returns the content
/// hash recorded in the provenance block.
pub fn write_trajectory(traj: &Trajectory, dir: &Path) -> Result<String> {
    traj.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (pos, vel, ids) = traj.array_bytes();
    let digest = content_digest(&pos, &vel, &ids);
    let mut provenance = traj.provenance.clone();
    provenance.content_sha256 = digest.clone();
    let meta = Meta {
        format_version: FORMAT_VERSION,
        n_frames: traj.n_frames(),
        n_points: traj.n_points(),
        n_objects: traj.n_objects(),
        dt_seconds: traj.dt,
        provenance,
    };
    write_file(&dir.join("positions.f32"), &pos)?;
    write_file(&dir.join("velocities.f32"), &vel)?;
    write_file(&dir.join("object_ids.u32"), &ids)?;
    let json = serde_json::to_string_pretty(&meta)?;
    write_file(&dir.join("meta.json"), json.as_bytes())?;
    Ok(digest)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn read_trajectory(dir: &Path) -> Result<Trajectory> {
    let meta_path = dir.join("meta.json");
    let meta: Meta =
        serde_json::from_slice(&read_file(&meta_path)?).map_err(|e| Error::format("meta.json", e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("expected {FORMAT_VERSION}, found {}", meta.format_version),
        ));
    }
    if !(meta.dt_seconds > 0.0) {
        return Err(Error::format("dt_seconds", "must be positive"));
    }
    if meta.n_frames == 0 || meta.n_points == 0 {
        return Err(Error::format(
            "n_frames",
            "trajectory must hold at least one frame and point",
        ));
    }
    let ids = read_file(&dir.join("object_ids.u32"))?;
    if ids.len() != meta.n_points * 4 {
        return Err(Error::format(
            "n_points",
            format!(
                "meta declares {} points but object_ids.u32 holds {} bytes",
                meta.n_points,
                ids.len()
            ),
        ));
    }
    let expect = meta.n_frames * meta.n_points * 2 * 4;
    let pos = read_file(&dir.join("positions.f32"))?;
    if pos.len() != expect {
        return Err(Error::format(
            "positions.f32",
            format!(
                "expected {expect} bytes for {} frames x {} points, found {}",
                meta.n_frames,
                meta.n_points,
                pos.len()
            ),
        ));
    }
    let vel = read_file(&dir.join("velocities.f32"))?;
    if vel.len() != expect {
        return Err(Error::format(
            "velocities.f32",
            format!("expected {expect} bytes, found {}", vel.len()),
        ));
    }
    let object_ids: Vec<u32> = ids
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let n_obj = object_ids.iter().map(|&o| o as usize + 1).max().unwrap_or(0);
    if n_obj != meta.n_objects {
        return Err(Error::format(
            "n_objects",
            format!("meta declares {} objects, ids imply {n_obj}", meta.n_objects),
        ));
    }
    if !meta.provenance.content_sha256.is_empty() {
        let digest = content_digest(&pos, &vel, &ids);
        if digest != meta.provenance.content_sha256 {
            return Err(Error::format(
                "provenance.content_sha256",
                "array contents do not match the recorded hash",
            ));
        }
    }
    let pos = f32s(&pos);
    let vel = f32s(&vel);
    let n = meta.n_points;
    let frames = (0..meta.n_frames)
        .map(|f| {
            let at = |a: &[f64], i: usize| [a[(f * n + i) * 2], a[(f * n + i) * 2 + 1]];
            MassPointCloud {
                positions: (0..n).map(|i| at(&pos, i)).collect(),
                velocities: (0..n).map(|i| at(&vel, i)).collect(),
                object_ids: object_ids.clone(),
            }
        })
        .collect();
    let traj = Trajectory {
        frames,
        dt: meta.dt_seconds,
        provenance: meta.provenance,
    };
    traj.validate().map_err(|e| Error::format("frames", e.to_string()))?;
    Ok(traj)
}
