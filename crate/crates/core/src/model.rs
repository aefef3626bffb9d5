//! Encoder, processor and decoder wired into one simulator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::config::config_hash;
use crate::decoder::{DecodePath, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};
use crate::latent::{AttributeMode, GroupVariant, LatentState, LatentVars};
use crate::nn::ParamStore;
use crate::processor::{build_collision_graph, Adjacency, CollisionGraph, Processor, ProcessorConfig};
use crate::trajectory::{mat_to_vecs, vecs_to_mat, MassPointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: GroupVariant,
    pub attributes: AttributeMode,
    pub adjacency: Adjacency,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub processor: ProcessorConfig,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: GroupVariant::Translation,
            attributes: AttributeMode::Invariant,
            adjacency: Adjacency::Collision,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            processor: ProcessorConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.processor.validate()?;
        if self.decoder.context_width != self.encoder.context_width() {
            return Err(Error::validation(format!(
                "decoder.context_width {} must equal the encoder output width {}",
                self.decoder.context_width,
                self.encoder.context_width()
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Result of one step on a tape.
#[derive(Clone, Debug)]
pub struct StepVars {
    /// Advanced mass-point positions `N × 2`.
    pub positions: Var,
    /// Velocities used for the advance, `N × 2`.
    pub velocities: Var,
    pub latent: LatentVars,
    pub graph: CollisionGraph,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub processor: Processor,
}

fn check_finite(t: &Tape, vars: &[Var], step: usize, what: &str) -> Result<()> {
    for &v in vars {
        if !t.value(v).iter().all(|x| x.is_finite()) {
            return Err(Error::numerical(step, format!("non-finite {what}")));
        }
    }
    Ok(())
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config.encoder, config.variant, &mut rng)?;
        let decoder = Decoder::new(&mut store, &config.decoder, config.variant, config.attributes, &mut rng)?;
        let processor = Processor::new(
            &mut store,
            &config.processor,
            config.variant,
            config.attributes,
            config.encoder.context_width(),
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            processor,
        })
    }

    pub fn encode_vars(&self, t: &mut Tape, cloud: &MassPointCloud) -> Result<LatentVars> {
        self.encoder.encode(t, &self.store, cloud)
    }

    pub fn decode_vars(&self, t: &mut Tape, queries: Var, z: &LatentVars) -> Var {
        self.decoder.decode(t, &self.store, queries, z, DecodePath::Auto)
    }

    /// Collision graph from the current values on the tape.
    pub fn graph_vars(&self, t: &Tape, positions: Var, object_ids: &[u32], z: &LatentVars) -> Result<CollisionGraph> {
        let x = mat_to_vecs(t.value(positions));
        let ctl = mat_to_vecs(t.value(z.x));
        build_collision_graph(
            &x,
            object_ids,
            &ctl,
            &z.object_ids,
            &self.config.processor,
            self.config.adjacency,
        )
    }

    /// One explicit Euler step of the coupled mass-point and latent state.
    pub fn step_vars(
        &self,
        t: &mut Tape,
        positions: Var,
        object_ids: &[u32],
        z: &LatentVars,
        dt: f64,
        step: usize,
    ) -> Result<StepVars> {
        let v = self.decode_vars(t, positions, z);
        self.advance_vars(t, positions, v, object_ids, z, dt, step)
    }

    /// The step with velocities `v` supplied by the caller.
    #[allow(clippy::too_many_arguments)]
    pub fn advance_vars(
        &self,
        t: &mut Tape,
        positions: Var,
        v: Var,
        object_ids: &[u32],
        z: &LatentVars,
        dt: f64,
        step: usize,
    ) -> Result<StepVars> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::validation("dt must be finite and non-negative"));
        }
        check_finite(t, &[v], step, "velocity")?;
        let graph = self.graph_vars(t, positions, object_ids, z)?;
        if dt == 0.0 {
            return Ok(StepVars {
                positions,
                velocities: v,
                latent: z.clone(),
                graph,
            });
        }
        let (dtheta, dc) = self.processor.derivative(t, &self.store, z, &graph)?;
        check_finite(t, &[dtheta, dc], step, "latent derivative")?;
        let dx = t.scale(v, dt);
        let new_x = t.add(positions, dx);
        let dth = t.scale(dtheta, dt);
        let th = t.add(z.theta, dth);
        let th = t.pass_through(th, wrap_angle);
        let dcs = t.scale(dc, dt);
        let c = t.add(z.c, dcs);
        let x_ctl = t.gather(new_x, z.source_indices.clone());
        check_finite(t, &[new_x, th, c], step, "state")?;
        Ok(StepVars {
            positions: new_x,
            velocities: v,
            latent: LatentVars {
                x: x_ctl,
                theta: th,
                c,
                source_indices: z.source_indices.clone(),
                object_ids: z.object_ids.clone(),
            },
            graph,
        })
    }

    pub fn encode(&self, cloud: &MassPointCloud) -> Result<LatentState> {
        let mut t = Tape::new();
        let z = self.encode_vars(&mut t, cloud)?;
        Ok(LatentState::from_vars(&t, &z))
    }

    /// Velocities `Q × 2` at `queries`.
    pub fn decode(&self, queries: &Mat, z: &LatentState) -> Result<Mat> {
        self.decoder.eval(&self.store, queries, z)
    }

    fn check_latent(&self, z: &LatentState, cloud: &MassPointCloud) -> Result<()> {
        z.validate()?;
        for (&s, &o) in z.source_indices.iter().zip(&z.object_ids) {
            if s >= cloud.len() || cloud.object_ids[s] != o {
                return Err(Error::validation("latent source indices disagree with the cloud"));
            }
        }
        Ok(())
    }

    pub fn collision_graph(&self, cloud: &MassPointCloud, z: &LatentState) -> Result<CollisionGraph> {
        self.check_latent(z, cloud)?;
        let ctl: Vec<Vec2> = z.poses.iter().map(|p| p.position).collect();
        build_collision_graph(
            &cloud.positions,
            &cloud.object_ids,
            &ctl,
            &z.object_ids,
            &self.config.processor,
            self.config.adjacency,
        )
    }

    /// `(dθ/dt, dc/dt)` for a latent state and graph.
    pub fn latent_derivative(&self, z: &LatentState, graph: &CollisionGraph) -> Result<(Vec<f64>, Mat)> {
        z.validate()?;
        let mut t = Tape::new();
        let zv = z.to_vars(&mut t);
        let (dth, dc) = self.processor.derivative(&mut t, &self.store, &zv, graph)?;
        Ok((t.value(dth).column(0).to_vec(), t.value(dc).clone()))
    }

    pub fn step(
        &self,
        cloud: &MassPointCloud,
        z: &LatentState,
        dt: f64,
        step: usize,
    ) -> Result<(MassPointCloud, LatentState)> {
        self.step_with(cloud, z, dt, step, |t, q, zv| self.decode_vars(t, q, zv))
    }

    /// Step with a caller-supplied velocity field in place of the decoder.
    pub fn step_with(
        &self,
        cloud: &MassPointCloud,
        z: &LatentState,
        dt: f64,
        step: usize,
        field: impl FnOnce(&mut Tape, Var, &LatentVars) -> Var,
    ) -> Result<(MassPointCloud, LatentState)> {
        self.check_latent(z, cloud)?;
        if dt == 0.0 {
            return Ok((cloud.clone(), z.clone()));
        }
        let mut t = Tape::new();
        let zv = z.to_vars(&mut t);
        let x = t.constant(vecs_to_mat(&cloud.positions));
        let v = field(&mut t, x, &zv);
        let out = self.advance_vars(&mut t, x, v, &cloud.object_ids, &zv, dt, step)?;
        let next = MassPointCloud {
            positions: mat_to_vecs(t.value(out.positions)),
            velocities: mat_to_vecs(t.value(out.velocities)),
            object_ids: cloud.object_ids.clone(),
        };
        Ok((next, LatentState::from_vars(&t, &out.latent)))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn small_config(variant: GroupVariant) -> ModelConfig {
        ModelConfig {
            variant,
            encoder: EncoderConfig {
                mlp_widths: vec![vec![8, 8], vec![8, 8]],
                samples: vec![16, 4],
                radii: vec![0.05, 0.1],
                max_neighbors: vec![8, 8],
                velocity_scale: 1.0,
            },
            decoder: DecoderConfig {
                hidden: 8,
                context_width: 8,
                n_frequencies: 4,
                ..DecoderConfig::default()
            },
            processor: ProcessorConfig {
                hidden: 8,
                basis_dim: 8,
                ..ProcessorConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub(crate) fn two_blobs(seed: u64, n: usize, gap: f64) -> MassPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::new();
        let mut v = Vec::new();
        let mut ids = Vec::new();
        for o in 0..2 {
            for _ in 0..n {
                p.push([
                    0.3 + o as f64 * (0.1 + gap) + 0.1 * rng.random::<f64>(),
                    0.4 + 0.1 * rng.random::<f64>(),
                ]);
                v.push([0.2 * rng.random::<f64>() - 0.1, 0.2 * rng.random::<f64>() - 0.1]);
                ids.push(o as u32);
            }
        }
        MassPointCloud::new(p, v, ids).unwrap()
    }

    #[test]
    fn zero_dt_returns_inputs() {
        let m = Model::new(&small_config(GroupVariant::Translation)).unwrap();
        let c = two_blobs(1, 40, 0.0);
        let z = m.encode(&c).unwrap();
        let (c2, z2) = m.step(&c, &z, 0.0, 0).unwrap();
        assert_eq!(c2, c);
        assert_eq!(z2, z);
    }

    #[test]
    fn constant_field_shifts_points_and_controls() {
        let m = Model::new(&small_config(GroupVariant::Se2)).unwrap();
        let c = two_blobs(2, 40, 0.0);
        let z = m.encode(&c).unwrap();
        let dt = 0.01;
        let (c2, z2) = m
            .step_with(&c, &z, dt, 0, |t, q, _| {
                let n = t.shape(q).0;
                t.constant(Mat::from_shape_fn((n, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 }))
            })
            .unwrap();
        for (a, b) in c.positions.iter().zip(&c2.positions) {
            assert_eq!(b[0], a[0] + dt);
            assert_eq!(b[1], a[1]);
        }
        for (p, p2) in z.poses.iter().zip(&z2.poses) {
            assert_eq!(p2.position[0], p.position[0] + dt);
        }
    }

    #[test]
    fn hard_constraint_holds_bitwise() {
        let m = Model::new(&small_config(GroupVariant::Translation)).unwrap();
        let mut c = two_blobs(3, 40, 0.0);
        let mut z = m.encode(&c).unwrap();
        for s in 0..3 {
            let (c2, z2) = m.step(&c, &z, 0.002, s).unwrap();
            c = c2;
            z = z2;
            for (p, &i) in z.poses.iter().zip(&z.source_indices) {
                assert_eq!(p.position, c.positions[i]);
            }
        }
    }

    #[test]
    fn context_width_mismatch_is_rejected() {
        let mut cfg = small_config(GroupVariant::Translation);
        cfg.decoder.context_width = 9;
        assert!(matches!(Model::new(&cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn derivative_shapes() {
        let m = Model::new(&small_config(GroupVariant::Se2)).unwrap();
        let c = two_blobs(4, 40, 0.0);
        let z = m.encode(&c).unwrap();
        let g = m.collision_graph(&c, &z).unwrap();
        let (dth, dc) = m.latent_derivative(&z, &g).unwrap();
        assert_eq!(dth.len(), 8);
        assert_eq!(dc.dim(), (8, 8));
    }

    #[test]
    fn derivative_invariant_under_group_action() {
        use crate::geometry::GroupElement;
        for variant in [GroupVariant::Translation, GroupVariant::Se2] {
            let m = Model::new(&small_config(variant)).unwrap();
            let c = two_blobs(5, 40, -0.02);
            let z = m.encode(&c).unwrap();
            let g = if variant == GroupVariant::Se2 {
                GroupElement::rotation_about(1.1, [0.5, 0.5], [0.1, -0.2])
            } else {
                GroupElement::translation([0.25, -0.15])
            };
            let gc = c.transformed(&g);
            let gz = z.transformed(&g);
            let graph = m.collision_graph(&c, &z).unwrap();
            assert!(!graph.inter.is_empty());
            assert_eq!(m.collision_graph(&gc, &gz).unwrap(), graph);
            let (a, ca) = m.latent_derivative(&z, &graph).unwrap();
            let (b, cb) = m.latent_derivative(&gz, &graph).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{variant:?}");
            }
            assert!((&ca - &cb).iter().all(|d| d.abs() < 1e-9));
        }
    }

    #[test]
    fn objects_without_inter_edges_are_isolated() {
        let m = Model::new(&small_config(GroupVariant::Se2)).unwrap();
        let c = two_blobs(6, 40, 0.5);
        let z = m.encode(&c).unwrap();
        let graph = m.collision_graph(&c, &z).unwrap();
        assert!(graph.inter.is_empty());
        let (a, ca) = m.latent_derivative(&z, &graph).unwrap();
        let mut z2 = z.clone();
        for i in 0..z2.len() {
            if z2.object_ids[i] == 1 {
                z2.contexts.row_mut(i).mapv_inplace(|x| x + 0.3);
            }
        }
        let (b, cb) = m.latent_derivative(&z2, &graph).unwrap();
        for i in 0..z.len() {
            if z.object_ids[i] == 0 {
                assert!((a[i] - b[i]).abs() < 1e-12);
                assert!(ca.row(i).iter().zip(cb.row(i)).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
    }
}
