//! Planar group actions, equivariant sampling/grouping, and invariant attributes.
//!
//! Everything here is a pure function of its inputs. Sampling and grouping
//! only ever compare distances, so their index outputs are unchanged when the
//! whole cloud is moved by a rigid motion.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

/// Vectors shorter than this are treated as zero-length by the angle helpers.
pub const ZERO_LENGTH: f64 = 1e-12;

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm_sq(a: Vec2) -> f64 {
    dot(a, a)
}

#[inline]
pub fn dist_sq(a: Vec2, b: Vec2) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub fn rotate(angle: f64, v: Vec2) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Unsigned angle in `[0, π]` between two vectors; 0 if either is zero-length.
pub fn angle_between(a: Vec2, b: Vec2) -> f64 {
    if norm_sq(a).sqrt() < ZERO_LENGTH || norm_sq(b).sqrt() < ZERO_LENGTH {
        return 0.0;
    }
    cross(a, b).abs().atan2(dot(a, b))
}

/// Cosine similarity; 0 if either vector is zero-length.
pub fn cosine(a: Vec2, b: Vec2) -> f64 {
    let na = norm_sq(a).sqrt();
    let nb = norm_sq(b).sqrt();
    if na < ZERO_LENGTH || nb < ZERO_LENGTH {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Direction angle of a vector, 0 for (near) zero vectors.
pub fn heading(v: Vec2, min_speed: f64) -> f64 {
    if norm_sq(v).sqrt() < min_speed {
        0.0
    } else {
        wrap_angle(v[1].atan2(v[0]))
    }
}

/// A planar rigid motion: rotation about the origin followed by a translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    pub rotation_angle: f64,
    pub translation: Vec2,
}

impl Default for GroupElement {
    fn default() -> Self {
        Self::identity()
    }
}

impl GroupElement {
    pub fn new(rotation_angle: f64, translation: Vec2) -> Self {
        Self {
            rotation_angle: wrap_angle(rotation_angle),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation_angle: 0.0,
            translation: [0.0, 0.0],
        }
    }

    pub fn translation(t: Vec2) -> Self {
        Self::new(0.0, t)
    }

    pub fn rotation(angle: f64) -> Self {
        Self::new(angle, [0.0, 0.0])
    }

    /// Rotation by `angle` about `center`, then translation by `t`.
    pub fn rotation_about(angle: f64, center: Vec2, t: Vec2) -> Self {
        let rc = rotate(angle, center);
        Self::new(angle, [center[0] - rc[0] + t[0], center[1] - rc[1] + t[1]])
    }

    pub fn is_translation(&self) -> bool {
        self.rotation_angle == 0.0
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_angle == 0.0 && self.translation == [0.0, 0.0]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &GroupElement) -> GroupElement {
        let t = rotate(self.rotation_angle, other.translation);
        GroupElement::new(
            self.rotation_angle + other.rotation_angle,
            [t[0] + self.translation[0], t[1] + self.translation[1]],
        )
    }

    pub fn inverse(&self) -> GroupElement {
        let t = rotate(-self.rotation_angle, self.translation);
        GroupElement::new(-self.rotation_angle, [-t[0], -t[1]])
    }

    #[inline]
    pub fn act_point(&self, p: Vec2) -> Vec2 {
        if self.rotation_angle == 0.0 {
            return [p[0] + self.translation[0], p[1] + self.translation[1]];
        }
        let r = rotate(self.rotation_angle, p);
        [r[0] + self.translation[0], r[1] + self.translation[1]]
    }

    #[inline]
    pub fn act_vector(&self, v: Vec2) -> Vec2 {
        if self.rotation_angle == 0.0 {
            return v;
        }
        rotate(self.rotation_angle, v)
    }

    #[inline]
    pub fn act_pose(&self, p: &Pose2) -> Pose2 {
        Pose2 {
            position: self.act_point(p.position),
            orientation: wrap_angle(p.orientation + self.rotation_angle),
        }
    }
}

/// Position plus orientation of a control point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub position: Vec2,
    pub orientation: f64,
}

impl Pose2 {
    pub fn new(position: Vec2, orientation: f64) -> Self {
        Self {
            position,
            orientation: wrap_angle(orientation),
        }
    }
}

/// Transformed copies produced by [`apply_group`].
#[derive(Clone, Debug, PartialEq)]
pub struct Transformed {
    pub positions: Vec<Vec2>,
    pub vectors: Option<Vec<Vec2>>,
    pub poses: Option<Vec<Pose2>>,
}

fn check_finite_points(name: &str, pts: &[Vec2]) -> Result<()> {
    if let Some(i) = pts.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::validation(format!("{name}[{i}] is not finite")));
    }
    Ok(())
}

/// Apply `g` to positions (affine), free vectors (rotation only) and poses.
pub fn apply_group(
    g: &GroupElement,
    positions: &[Vec2],
    vectors: Option<&[Vec2]>,
    poses: Option<&[Pose2]>,
) -> Result<Transformed> {
    if !g.rotation_angle.is_finite() || !g.translation.iter().all(|t| t.is_finite()) {
        return Err(Error::validation("group element is not finite"));
    }
    check_finite_points("positions", positions)?;
    if let Some(v) = vectors {
        check_finite_points("vectors", v)?;
    }
    if let Some(ps) = poses {
        if let Some(i) = ps
            .iter()
            .position(|p| !p.orientation.is_finite() || !p.position.iter().all(|x| x.is_finite()))
        {
            return Err(Error::validation(format!("poses[{i}] is not finite")));
        }
    }
    Ok(Transformed {
        positions: positions.iter().map(|&p| g.act_point(p)).collect(),
        vectors: vectors.map(|v| v.iter().map(|&x| g.act_vector(x)).collect()),
        poses: poses.map(|ps| ps.iter().map(|p| g.act_pose(p)).collect()),
    })
}

pub fn centroid(points: &[Vec2]) -> Vec2 {
    let n = points.len().max(1) as f64;
    let mut c = [0.0, 0.0];
    for p in points {
        c[0] += p[0];
        c[1] += p[1];
    }
    [c[0] / n, c[1] / n]
}

/// Farthest point sampling seeded by the point farthest from the centroid.
///
/// Ties are resolved in favour of the lowest index at every step.
pub fn farthest_point_sample(points: &[Vec2], n_samples: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if n_samples == 0 || n_samples > n {
        return Err(Error::validation(format!(
            "farthest_point_sample: n_samples={n_samples} out of range 1..={n}"
        )));
    }
    let c = centroid(points);
    let mut seed = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, &p) in points.iter().enumerate() {
        let d = dist_sq(p, c);
        if d > best {
            best = d;
            seed = i;
        }
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(n_samples);
    let mut current = seed;
    loop {
        out.push(current);
        selected[current] = true;
        if out.len() == n_samples {
            break;
        }
        let pc = points[current];
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist_sq(points[i], pc);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(out)
}

/// Fixed-radius neighbour lists, padded to `max_k` entries per center.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborList {
    indices: Vec<usize>,
    pub max_k: usize,
    pub radius_bits: u64,
}

impl NeighborList {
    pub fn radius(&self) -> f64 {
        f64::from_bits(self.radius_bits)
    }

    pub fn n_centers(&self) -> usize {
        self.indices.len() / self.max_k
    }

    pub fn neighbors(&self, center: usize) -> &[usize] {
        &self.indices[center * self.max_k..(center + 1) * self.max_k]
    }

    /// Row-major `n_centers × max_k` index table.
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

/// Up to `max_k` neighbours within `radius` of each center, nearest first.
///
/// The center itself always comes first; short lists are padded by repeating
/// that first entry.
pub fn ball_query(centers: &[usize], points: &[Vec2], radius: f64, max_k: usize) -> Result<NeighborList> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::validation(format!("ball_query: radius {radius} must be > 0")));
    }
    if max_k == 0 {
        return Err(Error::validation("ball_query: max_k must be >= 1"));
    }
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(centers.len() * max_k);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for &c in centers {
        if c >= points.len() {
            return Err(Error::validation(format!("ball_query: center {c} out of range")));
        }
        let pc = points[c];
        cand.clear();
        for (i, &p) in points.iter().enumerate() {
            if i == c {
                continue;
            }
            let d = dist_sq(p, pc);
            if d <= r2 {
                cand.push((d, i));
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let start = indices.len();
        indices.push(c);
        indices.extend(cand.iter().take(max_k - 1).map(|&(_, i)| i));
        while indices.len() - start < max_k {
            indices.push(c);
        }
    }
    Ok(NeighborList {
        indices,
        max_k,
        radius_bits: radius.to_bits(),
    })
}

/// The five rotation invariants of a (center, neighbour) pair:
/// `(∠(vF, F−Q), ∠(vQ, F−Q), ‖F−Q‖², ‖vF−vQ‖², cos(F−Q, vF−vQ))`.
pub fn rotation_invariants(f: Vec2, v_f: Vec2, q: Vec2, v_q: Vec2) -> [f64; 5] {
    let d = sub(f, q);
    let dv = sub(v_f, v_q);
    [
        angle_between(v_f, d),
        angle_between(v_q, d),
        norm_sq(d),
        norm_sq(dv),
        cosine(d, dv),
    ]
}

/// SE(2) bi-invariant: `(R(−θᵢ)(xⱼ−xᵢ), wrap(θⱼ−θᵢ))`.
pub fn se2_bi_invariant(pose_i: &Pose2, pose_j: &Pose2) -> [f64; 3] {
    let r = rotate(-pose_i.orientation, sub(pose_j.position, pose_i.position));
    [r[0], r[1], wrap_angle(pose_j.orientation - pose_i.orientation)]
}

/// Translation-group pair attribute: `(xⱼ−xᵢ, θᵢ, θⱼ)`.
pub fn translation_bi_invariant(pose_i: &Pose2, pose_j: &Pose2) -> [f64; 4] {
    let d = sub(pose_j.position, pose_i.position);
    [d[0], d[1], pose_i.orientation, pose_j.orientation]
}

/// Uniform-grid bucket index for fixed-radius pair searches.
pub struct SpatialHash {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl SpatialHash {
    pub fn new(points: &[Vec2], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: Vec2, cell: f64) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    /// Calls `f(i, j)` once for every unordered pair `i < j` with distance `< radius`.
    /// `radius` must not exceed the cell size.
    pub fn for_each_pair_within(&self, points: &[Vec2], radius: f64, mut f: impl FnMut(usize, usize)) {
        debug_assert!(radius <= self.cell);
        let r2 = radius * radius;
        let mut keys: Vec<&(i64, i64)> = self.buckets.keys().collect();
        keys.sort_unstable();
        for &(kx, ky) in keys {
            let here = &self.buckets[&(kx, ky)];
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(there) = self.buckets.get(&(kx + dx, ky + dy)) else {
                        continue;
                    };
                    for &i in here {
                        for &j in there {
                            if i < j && dist_sq(points[i], points[j]) < r2 {
                                f(i, j);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn wrap_angle_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!(close(wrap_angle(3.0 * PI), PI, 1e-12));
        assert!(close(wrap_angle(0.5 + TAU), 0.5, 1e-12));
    }

    #[test]
    fn identity_is_noop() {
        let pts = vec![[0.3, -1.2], [5.0, 2.0]];
        let vs = vec![[1.0, 1.0], [0.0, -3.0]];
        let ps = vec![Pose2::new([0.1, 0.2], 0.7)];
        let out = apply_group(&GroupElement::identity(), &pts, Some(&vs), Some(&ps)).unwrap();
        assert_eq!(out.positions, pts);
        assert_eq!(out.vectors.unwrap(), vs);
        assert_eq!(out.poses.unwrap(), ps);
    }

    #[test]
    fn quarter_turn_maps_x_to_y() {
        let out = apply_group(&GroupElement::rotation(FRAC_PI_2), &[[1.0, 0.0]], None, None).unwrap();
        assert!(close(out.positions[0][0], 0.0, 1e-15));
        assert!(close(out.positions[0][1], 1.0, 1e-15));
    }

    #[test]
    fn velocities_ignore_translation() {
        let g = GroupElement::translation([0.3, -0.2]);
        let out = apply_group(&g, &[[0.0, 0.0]], Some(&[[1.0, 1.0]]), None).unwrap();
        assert_eq!(out.vectors.unwrap()[0], [1.0, 1.0]);
        assert_eq!(out.positions[0], [0.3, -0.2]);
    }

    #[test]
    fn non_finite_rejected() {
        let err = apply_group(&GroupElement::identity(), &[[f64::NAN, 0.0]], None, None);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn inverse_and_composition() {
        let g1 = GroupElement::new(0.7, [0.1, -0.4]);
        let g2 = GroupElement::new(-2.1, [1.5, 0.25]);
        let p = [0.33, -0.71];
        let a = g2.act_point(g1.act_point(p));
        let b = g2.compose(&g1).act_point(p);
        assert!(close(a[0], b[0], 1e-12) && close(a[1], b[1], 1e-12));
        let back = g1.inverse().act_point(g1.act_point(p));
        assert!(close(back[0], p[0], 1e-12) && close(back[1], p[1], 1e-12));
        let e = g1.compose(&g1.inverse());
        assert!(close(e.rotation_angle, 0.0, 1e-12));
        assert!(close(e.translation[0], 0.0, 1e-12) && close(e.translation[1], 0.0, 1e-12));
    }

    #[test]
    fn fps_singleton_and_tie_break() {
        assert_eq!(farthest_point_sample(&[[0.0, 0.0]], 1).unwrap(), vec![0]);
        let pts = [[0.0, 0.0], [2.0, 0.0], [1.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![0, 1]);
        assert!(farthest_point_sample(&pts, 0).is_err());
        assert!(farthest_point_sample(&pts, 4).is_err());
    }

    #[test]
    fn fps_full_sample_is_permutation() {
        let pts: Vec<Vec2> = (0..20)
            .map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()])
            .collect();
        let mut idx = farthest_point_sample(&pts, 20).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn ball_query_padding() {
        let pts = [[0.0, 0.0], [0.01, 0.0], [0.1, 0.0]];
        let nl = ball_query(&[0], &pts, 0.025, 4).unwrap();
        assert_eq!(nl.neighbors(0), &[0, 1, 0, 0]);
    }

    #[test]
    fn ball_query_isolated() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let nl = ball_query(&[0, 1, 2], &pts, 0.1, 3).unwrap();
        for c in 0..3 {
            assert_eq!(nl.neighbors(c), &[c, c, c]);
        }
        assert!(ball_query(&[0], &pts, 0.0, 3).is_err());
    }

    #[test]
    fn five_invariants_axis_aligned() {
        let inv = rotation_invariants([1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [1.0, 0.0]);
        let want = [FRAC_PI_2, 0.0, 1.0, 2.0, -1.0 / 2f64.sqrt()];
        for k in 0..5 {
            assert!(close(inv[k], want[k], 1e-12), "{k}: {} vs {}", inv[k], want[k]);
        }
        let zero = rotation_invariants([0.5, 0.5], [1.0, 2.0], [0.5, 0.5], [1.0, 2.0]);
        assert_eq!(zero, [0.0; 5]);
    }

    #[test]
    fn bi_invariant_examples() {
        let a = se2_bi_invariant(&Pose2::new([0.0, 0.0], 0.0), &Pose2::new([1.0, 0.0], FRAC_PI_2));
        assert!(close(a[0], 1.0, 1e-15) && close(a[1], 0.0, 1e-15) && close(a[2], FRAC_PI_2, 1e-15));
        let b = se2_bi_invariant(&Pose2::new([0.0, 0.0], FRAC_PI_2), &Pose2::new([1.0, 0.0], FRAC_PI_2));
        assert!(close(b[0], 0.0, 1e-15) && close(b[1], -1.0, 1e-15) && close(b[2], 0.0, 1e-15));
        let p = Pose2::new([0.4, 0.9], -2.0);
        assert_eq!(se2_bi_invariant(&p, &p), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn spatial_hash_matches_brute_force() {
        let pts: Vec<Vec2> = (0..300)
            .map(|i| {
                let t = i as f64;
                [((t * 0.618).fract()), ((t * 0.377 + 0.1).fract())]
            })
            .collect();
        let h = SpatialHash::new(&pts, 0.05);
        let mut got = Vec::new();
        h.for_each_pair_within(&pts, 0.05, |i, j| got.push((i, j)));
        got.sort_unstable();
        let mut want = Vec::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                if dist_sq(pts[i], pts[j]) < 0.05 * 0.05 {
                    want.push((i, j));
                }
            }
        }
        assert_eq!(got, want);
    }
}
