//! Hierarchical point-set encoder producing control points per object.
//!
//! Each set-abstraction layer picks centres by farthest-point sampling, groups
//! neighbours by ball query, maps per-neighbour attributes through a shared
//! MLP, and max-pools. The attributes are invariant under the configured
//! group, so contexts are invariant and control poses equivariant.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{ball_query, farthest_point_sample, heading, rotation_invariants, Vec2};
use crate::latent::{GroupVariant, LatentVars};
use crate::nn::{Linear, ParamStore};
use crate::trajectory::MassPointCloud;

/// Below this speed a control point's orientation falls back to zero.
pub const MIN_HEADING_SPEED: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mlp_widths: Vec<Vec<usize>>,
    pub samples: Vec<usize>,
    pub radii: Vec<f64>,
    pub max_neighbors: Vec<usize>,
    /// Velocity normalization for the attributes.
    pub velocity_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mlp_widths: vec![vec![32, 32, 64], vec![64, 64, 128], vec![128, 128, 32]],
            samples: vec![512, 128, 16],
            radii: vec![0.025, 0.05, 0.1],
            max_neighbors: vec![32, 64, 128],
            velocity_scale: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.samples.len();
        if n == 0 {
            return Err(Error::validation("encoder needs at least one layer"));
        }
        if self.mlp_widths.len() != n || self.radii.len() != n || self.max_neighbors.len() != n {
            return Err(Error::validation("encoder per-layer lists differ in length"));
        }
        if self.mlp_widths.iter().any(|w| w.is_empty() || w.contains(&0)) {
            return Err(Error::validation("encoder MLP widths must be non-empty and positive"));
        }
        if self.samples.contains(&0) || self.max_neighbors.contains(&0) {
            return Err(Error::validation(
                "encoder sample and neighbour counts must be positive",
            ));
        }
        if self.radii.iter().any(|&r| !(r > 0.0)) || !(self.velocity_scale > 0.0) {
            return Err(Error::validation("encoder radii and velocity scale must be positive"));
        }
        Ok(())
    }

    pub fn context_width(&self) -> usize {
        *self.mlp_widths.last().and_then(|w| w.last()).unwrap_or(&0)
    }

    /// Control points per object (before clamping to small objects).
    pub fn points_per_object(&self) -> usize {
        *self.samples.last().unwrap_or(&0)
    }
}

pub fn attribute_width(variant: GroupVariant) -> usize {
    match variant {
        GroupVariant::Translation => 6,
        GroupVariant::Se2 => 8,
    }
}

/// Per-neighbour attributes for neighbour `F` of centre `Q`.
pub fn neighbor_attributes(
    variant: GroupVariant,
    f: Vec2,
    v_f: Vec2,
    q: Vec2,
    v_q: Vec2,
    radius: f64,
    vs: f64,
) -> Vec<f64> {
    match variant {
        GroupVariant::Translation => vec![
            (f[0] - q[0]) / radius,
            (f[1] - q[1]) / radius,
            (v_f[0] - v_q[0]) / vs,
            (v_f[1] - v_q[1]) / vs,
            v_q[0] / vs,
            v_q[1] / vs,
        ],
        GroupVariant::Se2 => {
            let [t1, t2, d2, dv2, cos] = rotation_invariants(f, v_f, q, v_q);
            vec![
                t1.sin(),
                t1.cos(),
                t2.sin(),
                t2.cos(),
                d2 / (radius * radius),
                dv2 / (vs * vs),
                cos,
                (v_q[0] * v_q[0] + v_q[1] * v_q[1]).sqrt() / vs,
            ]
        }
    }
}

/// One set-abstraction layer.
#[derive(Clone, Debug)]
pub struct SetAbstraction {
    pub samples: usize,
    pub radius: f64,
    pub max_k: usize,
    attr_in: Linear,
    feat_in: Option<Linear>,
    rest: Vec<Linear>,
}

pub struct SaOutput {
    pub points: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    /// `centres × width`
    pub features: Var,
    /// Centre indices into the layer input.
    pub indices: Vec<usize>,
}

impl SetAbstraction {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        variant: GroupVariant,
        in_features: usize,
        widths: &[usize],
        samples: usize,
        radius: f64,
        max_k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Split first layer: neighbour features go through their own weight
        // once per point and are gathered afterwards.
        let attr_in = Linear::new(
            store,
            &format!("{name}.attr"),
            attribute_width(variant),
            widths[0],
            true,
            rng,
        );
        let feat_in =
            (in_features > 0).then(|| Linear::new(store, &format!("{name}.feat"), in_features, widths[0], false, rng));
        let rest = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.mlp{}", i + 1), w[0], w[1], true, rng))
            .collect();
        Self {
            samples,
            radius,
            max_k,
            attr_in,
            feat_in,
            rest,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        points: &[Vec2],
        velocities: &[Vec2],
        features: Option<Var>,
        variant: GroupVariant,
        velocity_scale: f64,
    ) -> Result<SaOutput> {
        let n_centres = self.samples.min(points.len());
        let centres = farthest_point_sample(points, n_centres)?;
        let nl = ball_query(&centres, points, self.radius, self.max_k)?;
        let k = self.max_k;
        let aw = attribute_width(variant);
        let mut attrs = Mat::zeros((n_centres * k, aw));
        for (c, &qi) in centres.iter().enumerate() {
            for (s, &fi) in nl.neighbors(c).iter().enumerate() {
                let a = neighbor_attributes(
                    variant,
                    points[fi],
                    velocities[fi],
                    points[qi],
                    velocities[qi],
                    self.radius,
                    velocity_scale,
                );
                for (col, v) in a.into_iter().enumerate() {
                    attrs[[c * k + s, col]] = v;
                }
            }
        }
        let attrs = t.constant(attrs);
        let mut h = self.attr_in.forward(t, store, attrs);
        if let (Some(f), Some(lin)) = (features, &self.feat_in) {
            let projected = lin.forward(t, store, f);
            let idx: Rc<[usize]> = nl.flat().into();
            let g = t.gather(projected, idx);
            h = t.add(h, g);
        }
        h = t.silu(h);
        for layer in &self.rest {
            h = layer.forward(t, store, h);
            h = t.silu(h);
        }
        let pooled = t.max_row_blocks(h, k);
        Ok(SaOutput {
            points: centres.iter().map(|&i| points[i]).collect(),
            velocities: centres.iter().map(|&i| velocities[i]).collect(),
            features: pooled,
            indices: centres,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub variant: GroupVariant,
    pub layers: Vec<SetAbstraction>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        config: &EncoderConfig,
        variant: GroupVariant,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut in_features = 0;
        let mut layers = Vec::new();
        for l in 0..config.samples.len() {
            layers.push(SetAbstraction::new(
                store,
                &format!("encoder.sa{l}"),
                variant,
                in_features,
                &config.mlp_widths[l],
                config.samples[l],
                config.radii[l],
                config.max_neighbors[l],
                rng,
            ));
            in_features = *config.mlp_widths[l].last().expect("validated");
        }
        Ok(Self {
            config: config.clone(),
            variant,
            layers,
        })
    }

    /// Encode every object independently and stack the control points in
    /// object order. Positions and orientations are read from the data, so
    /// only the contexts carry gradients.
    pub fn encode(&self, t: &mut Tape, store: &ParamStore, cloud: &MassPointCloud) -> Result<LatentVars> {
        cloud.validate()?;
        let mut positions = Vec::new();
        let mut thetas = Vec::new();
        let mut contexts = Vec::new();
        let mut sources = Vec::new();
        let mut ids = Vec::new();
        for (o, members) in cloud.object_indices().into_iter().enumerate() {
            if members.is_empty() {
                return Err(Error::validation(format!("object {o} has no points")));
            }
            let mut pts: Vec<Vec2> = members.iter().map(|&i| cloud.positions[i]).collect();
            let mut vel: Vec<Vec2> = members.iter().map(|&i| cloud.velocities[i]).collect();
            let mut local: Vec<usize> = (0..members.len()).collect();
            let mut feat = None;
            for layer in &self.layers {
                let out = layer.forward(t, store, &pts, &vel, feat, self.variant, self.config.velocity_scale)?;
                local = out.indices.iter().map(|&i| local[i]).collect();
                pts = out.points;
                vel = out.velocities;
                feat = Some(out.features);
            }
            for &l in &local {
                let g = members[l];
                sources.push(g);
                positions.push(cloud.positions[g]);
                thetas.push(heading(cloud.velocities[g], MIN_HEADING_SPEED));
                ids.push(o as u32);
            }
            contexts.push(feat.expect("at least one layer"));
        }
        let m = positions.len();
        let c = if contexts.len() == 1 {
            contexts[0]
        } else {
            t.concat_rows(&contexts)
        };
        let x = t.constant(Mat::from_shape_fn((m, 2), |(i, j)| positions[i][j]));
        let theta = t.constant(Mat::from_shape_fn((m, 1), |(i, _)| thetas[i]));
        Ok(LatentVars {
            x,
            theta,
            c,
            source_indices: sources.into(),
            object_ids: ids.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GroupElement;
    use crate::latent::LatentState;
    use rand::{Rng, SeedableRng};

    fn cloud(seed: u64, n_obj: usize, n: usize) -> MassPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::new();
        let mut v = Vec::new();
        let mut ids = Vec::new();
        for o in 0..n_obj {
            for _ in 0..n {
                p.push([0.3 * o as f64 + 0.2 * rng.random::<f64>(), 0.2 * rng.random::<f64>()]);
                v.push([rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]);
                ids.push(o as u32);
            }
        }
        MassPointCloud::new(p, v, ids).unwrap()
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            mlp_widths: vec![vec![8, 8], vec![8, 6]],
            samples: vec![32, 4],
            radii: vec![0.05, 0.1],
            max_neighbors: vec![8, 16],
            velocity_scale: 1.0,
        }
    }

    fn run(enc: &Encoder, store: &ParamStore, c: &MassPointCloud) -> LatentState {
        let mut t = Tape::new();
        let z = enc.encode(&mut t, store, c).unwrap();
        LatentState::from_vars(&t, &z)
    }

    #[test]
    fn shapes_and_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &small(), GroupVariant::Se2, &mut rng).unwrap();
        let c = cloud(2, 2, 50);
        let z = run(&enc, &store, &c);
        assert_eq!(z.len(), 8);
        assert_eq!(z.contexts.dim(), (8, 6));
        for (k, &s) in z.source_indices.iter().enumerate() {
            assert_eq!(c.object_ids[s], z.object_ids[k]);
            assert_eq!(c.positions[s], z.poses[k].position);
        }
    }

    #[test]
    fn translation_invariance_of_contexts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &small(), GroupVariant::Translation, &mut rng).unwrap();
        let c = cloud(4, 2, 60);
        let g = GroupElement::translation([0.3, 0.1]);
        let a = run(&enc, &store, &c);
        let b = run(&enc, &store, &c.transformed(&g));
        assert_eq!(a.source_indices, b.source_indices);
        let diff = (&a.contexts - &b.contexts)
            .mapv(f64::abs)
            .fold(0.0, |m: f64, &x| m.max(x));
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn rotation_invariance_of_contexts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &small(), GroupVariant::Se2, &mut rng).unwrap();
        let c = cloud(6, 2, 60);
        let g = GroupElement::new(1.1, [0.2, -0.4]);
        let a = run(&enc, &store, &c);
        let b = run(&enc, &store, &c.transformed(&g));
        assert_eq!(a.source_indices, b.source_indices);
        let diff = (&a.contexts - &b.contexts)
            .mapv(f64::abs)
            .fold(0.0, |m: f64, &x| m.max(x));
        assert!(diff <= 1e-5, "{diff}");
        for (pa, pb) in a.poses.iter().zip(&b.poses) {
            let ga = g.act_pose(pa);
            assert!((ga.position[0] - pb.position[0]).abs() < 1e-12);
            assert!(crate::geometry::wrap_angle(ga.orientation - pb.orientation).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_velocity_gives_zero_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &small(), GroupVariant::Se2, &mut rng).unwrap();
        let mut c = cloud(8, 1, 40);
        c.velocities.iter_mut().for_each(|v| *v = [0.0, 0.0]);
        let z = run(&enc, &store, &c);
        assert!(z.poses.iter().all(|p| p.orientation == 0.0));
    }
}
