//! Collision-aware message passing over control points.
//!
//! The graph is rebuilt every step: control points of one object are fully
//! connected, and two control points of different objects are linked only
//! while mass points near each of them are in contact. Edge kernels are
//! learned functions of invariant pair attributes with separate weights for
//! the two edge families, and the network outputs time derivatives of the
//! control orientations and contexts.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::{pair_attribute, pair_rest_width, uses_raw_orientation};
use crate::error::{Error, Result};
use crate::geometry::{dist_sq, SpatialHash, Vec2};
use crate::latent::{AttributeMode, GroupVariant, LatentVars};
use crate::nn::{Linear, Mlp, ParamStore};

/// How the colliding mass pair must relate to the two control points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionLocality {
    /// Each colliding point lies within the control radius of its own
    /// control point.
    #[default]
    Both,
    /// At least one of the two colliding points lies within the control
    /// radius of its control point.
    Either,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjacency {
    /// Inter-object edges follow collision detection.
    #[default]
    Collision,
    /// Only same-object edges, collision detection disabled.
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessorConfig {
    pub hidden: usize,
    pub layers: usize,
    pub widening: usize,
    pub poly_degree: usize,
    pub basis_dim: usize,
    /// Mass-point contact distance `d_col`.
    pub collision_distance: f64,
    /// Radius `r_ctl` around each control point.
    pub control_radius: f64,
    pub locality: CollisionLocality,
    /// Length that normalizes relative positions in edge attributes.
    pub length_scale: f64,
    /// Divisor applied to summed messages.
    pub aggregation_scale: f64,
    /// Multiplier on the readout, so that unit-scale network outputs change
    /// the latents appreciably within a short rollout.
    pub derivative_scale: f64,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            widening: 2,
            poly_degree: 3,
            basis_dim: 64,
            collision_distance: 0.05,
            control_radius: 0.05,
            locality: CollisionLocality::Both,
            length_scale: 0.1,
            aggregation_scale: 16.0,
            derivative_scale: 25.0,
        }
    }
}

impl ProcessorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.collision_distance > 0.0 && self.control_radius > 0.0) {
            return Err(Error::validation("collision thresholds must be positive"));
        }
        if !(self.length_scale > 0.0 && self.aggregation_scale > 0.0 && self.derivative_scale.is_finite()) {
            return Err(Error::validation("processor scales must be positive and finite"));
        }
        if self.hidden == 0 || self.widening == 0 || self.poly_degree == 0 || self.basis_dim == 0 {
            return Err(Error::validation("processor widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeLabel {
    Inner,
    Inter,
}

/// Directed edges `(sender, receiver)` over control points, each family in
/// ascending order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CollisionGraph {
    pub inner: Vec<(usize, usize)>,
    pub inter: Vec<(usize, usize)>,
}

impl CollisionGraph {
    pub fn edges(&self, label: EdgeLabel) -> &[(usize, usize)] {
        match label {
            EdgeLabel::Inner => &self.inner,
            EdgeLabel::Inter => &self.inter,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.inner.len() + self.inter.len()
    }
}

/// Build the collision graph from the mass points and the control points.
///
/// `control_positions`/`control_objects` describe the `M` control points;
/// inner edges connect every ordered pair within an object, inter edges
/// follow the contact predicate (unless `adjacency` is static).
pub fn build_collision_graph(
    positions: &[Vec2],
    object_ids: &[u32],
    control_positions: &[Vec2],
    control_objects: &[u32],
    cfg: &ProcessorConfig,
    adjacency: Adjacency,
) -> Result<CollisionGraph> {
    if positions.len() != object_ids.len() || control_positions.len() != control_objects.len() {
        return Err(Error::validation("graph inputs disagree in length"));
    }
    let m = control_positions.len();
    let mut inner = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if i != j && control_objects[i] == control_objects[j] {
                inner.push((i, j));
            }
        }
    }
    let mut inter = BTreeSet::new();
    if adjacency == Adjacency::Collision {
        let r2 = cfg.control_radius * cfg.control_radius;
        // Control points whose region contains mass point `a`, memoized.
        let mut near: Vec<Option<Vec<usize>>> = vec![None; positions.len()];
        let mut near_of = |a: usize| -> Vec<usize> {
            near[a]
                .get_or_insert_with(|| {
                    (0..m)
                        .filter(|&i| {
                            control_objects[i] == object_ids[a] && dist_sq(positions[a], control_positions[i]) < r2
                        })
                        .collect()
                })
                .clone()
        };
        let mut pairs = Vec::new();
        let hash = SpatialHash::new(positions, cfg.collision_distance);
        hash.for_each_pair_within(positions, cfg.collision_distance, |a, b| {
            if object_ids[a] != object_ids[b] {
                pairs.push((a, b));
            }
        });
        for (a, b) in pairs {
            let na = near_of(a);
            let nb = near_of(b);
            match cfg.locality {
                CollisionLocality::Both => {
                    for &i in &na {
                        for &j in &nb {
                            inter.insert((i, j));
                            inter.insert((j, i));
                        }
                    }
                }
                CollisionLocality::Either => {
                    let all_of = |o: u32| (0..m).filter(move |&i| control_objects[i] == o);
                    for &i in &na {
                        for j in all_of(object_ids[b]) {
                            inter.insert((i, j));
                            inter.insert((j, i));
                        }
                    }
                    for &j in &nb {
                        for i in all_of(object_ids[a]) {
                            inter.insert((i, j));
                            inter.insert((j, i));
                        }
                    }
                }
            }
        }
    }
    Ok(CollisionGraph {
        inner,
        inter: inter.into_iter().collect(),
    })
}

#[derive(Clone, Debug)]
struct Family {
    basis: Mlp,
    kernels: Vec<Linear>,
}

#[derive(Clone, Debug)]
struct Block {
    mix1: Linear,
    mix2: Linear,
}

#[derive(Clone, Debug)]
pub struct Processor {
    pub config: ProcessorConfig,
    pub variant: GroupVariant,
    pub attributes: AttributeMode,
    embed: Linear,
    families: Vec<(EdgeLabel, Family)>,
    blocks: Vec<Block>,
    readout: Linear,
    context_width: usize,
}

pub fn edge_attribute_width(variant: GroupVariant, attributes: AttributeMode) -> usize {
    2 + pair_rest_width(variant, attributes)
}

impl Processor {
    pub fn new(
        store: &mut ParamStore,
        config: &ProcessorConfig,
        variant: GroupVariant,
        attributes: AttributeMode,
        context_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let extra = if uses_raw_orientation(variant, attributes) {
            2
        } else {
            0
        };
        let embed = Linear::new(store, "processor.embed", context_width + extra, h, true, rng);
        let n_poly =
            crate::autodiff::monomial_exponents(edge_attribute_width(variant, attributes), config.poly_degree).len();
        let families = [EdgeLabel::Inner, EdgeLabel::Inter]
            .into_iter()
            .map(|label| {
                let name = match label {
                    EdgeLabel::Inner => "processor.inner",
                    EdgeLabel::Inter => "processor.inter",
                };
                let basis = Mlp::new(
                    store,
                    &format!("{name}.basis"),
                    &[n_poly, config.basis_dim, config.basis_dim],
                    true,
                    rng,
                );
                let kernels = (0..config.layers)
                    .map(|l| Linear::new(store, &format!("{name}.kernel{l}"), config.basis_dim, h, false, rng))
                    .collect();
                (label, Family { basis, kernels })
            })
            .collect();
        let blocks = (0..config.layers)
            .map(|l| Block {
                mix1: Linear::new(
                    store,
                    &format!("processor.block{l}.mix1"),
                    2 * h,
                    config.widening * h,
                    true,
                    rng,
                ),
                mix2: Linear::new(
                    store,
                    &format!("processor.block{l}.mix2"),
                    config.widening * h,
                    h,
                    true,
                    rng,
                ),
            })
            .collect();
        let readout = Linear::new(store, "processor.readout", h, 1 + context_width, true, rng);
        Ok(Self {
            config: config.clone(),
            variant,
            attributes,
            embed,
            families,
            blocks,
            readout,
            context_width,
        })
    }

    /// Edge attributes `E × A` for edges given as (sender, receiver).
    fn edge_attributes(&self, t: &mut Tape, z: &LatentVars, senders: Rc<[usize]>, receivers: Rc<[usize]>) -> Var {
        let xs = t.gather(z.x, senders.clone());
        let xr = t.gather(z.x, receivers.clone());
        let ts = t.gather(z.theta, senders);
        let tr = t.gather(z.theta, receivers);
        let (pos, rest) = pair_attribute(t, self.variant, self.attributes, xs, xr, ts, tr);
        // Relative offsets are normalized by the interaction length; the
        // ablation's absolute position sums become pair midpoints instead.
        let scale = match self.attributes {
            AttributeMode::Invariant => 1.0 / self.config.length_scale,
            AttributeMode::NonEquivariant => 0.5,
        };
        let pos = t.scale(pos, scale);
        t.concat_cols(&[pos, rest])
    }

    /// `(dθ/dt [M × 1], dc/dt [M × C])`.
    pub fn derivative(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        z: &LatentVars,
        graph: &CollisionGraph,
    ) -> Result<(Var, Var)> {
        let m = z.len();
        for label in [EdgeLabel::Inner, EdgeLabel::Inter] {
            if !graph.edges(label).is_empty() && !self.families.iter().any(|(l, _)| *l == label) {
                return Err(Error::Config(format!("no kernel registered for {label:?} edges")));
            }
        }
        let node_in = if uses_raw_orientation(self.variant, self.attributes) {
            let c = t.cos(z.theta);
            let s = t.sin(z.theta);
            t.concat_cols(&[z.c, c, s])
        } else {
            z.c
        };
        let mut h = self.embed.forward(t, store, node_in);

        struct Active<'a> {
            family: &'a Family,
            senders: Rc<[usize]>,
            receivers: Rc<[usize]>,
            basis: Var,
        }
        let mut active = Vec::new();
        for (label, family) in &self.families {
            let edges = graph.edges(*label);
            if edges.is_empty() {
                continue;
            }
            if edges.iter().any(|&(s, r)| s >= m || r >= m) {
                return Err(Error::validation("graph refers to a missing control point"));
            }
            let senders: Rc<[usize]> = edges.iter().map(|e| e.0).collect::<Vec<_>>().into();
            let receivers: Rc<[usize]> = edges.iter().map(|e| e.1).collect::<Vec<_>>().into();
            let attrs = self.edge_attributes(t, z, senders.clone(), receivers.clone());
            let poly = t.poly_features(attrs, self.config.poly_degree);
            let basis = family.basis.forward(t, store, poly);
            active.push(Active {
                family,
                senders,
                receivers,
                basis,
            });
        }

        let inv_agg = 1.0 / self.config.aggregation_scale;
        for (l, block) in self.blocks.iter().enumerate() {
            let mut agg = None;
            for a in &active {
                let kernel = a.family.kernels[l].forward(t, store, a.basis);
                let hs = t.gather(h, a.senders.clone());
                let msg = t.mul(hs, kernel);
                let summed = t.scatter_add(msg, a.receivers.clone(), m);
                agg = Some(match agg {
                    None => summed,
                    Some(acc) => t.add(acc, summed),
                });
            }
            let agg = match agg {
                Some(a) => t.scale(a, inv_agg),
                None => t.constant(crate::autodiff::Mat::zeros((m, self.config.hidden))),
            };
            let cat = t.concat_cols(&[h, agg]);
            let u = block.mix1.forward(t, store, cat);
            let u = t.silu(u);
            let u = block.mix2.forward(t, store, u);
            h = t.add(h, u);
        }
        let out = self.readout.forward(t, store, h);
        let out = t.scale(out, self.config.derivative_scale);
        let dtheta = t.slice_cols(out, 0, 1);
        let dc = t.slice_cols(out, 1, self.context_width);
        Ok((dtheta, dc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(cx: f64, n: usize, id: u32) -> (Vec<Vec2>, Vec<u32>) {
        let p = (0..n).map(|i| [cx + 0.001 * i as f64, 0.5]).collect();
        (p, vec![id; n])
    }

    #[test]
    fn separated_objects_have_no_inter_edges() {
        let (mut p, mut ids) = cluster(0.0, 5, 0);
        let (p2, ids2) = cluster(1.0, 5, 1);
        p.extend(p2);
        ids.extend(ids2);
        let ctl = vec![p[0], p[2], p[4], p[5], p[7], p[9]];
        let cobj = vec![0, 0, 0, 1, 1, 1];
        let g =
            build_collision_graph(&p, &ids, &ctl, &cobj, &ProcessorConfig::default(), Adjacency::Collision).unwrap();
        assert!(g.inter.is_empty());
        assert_eq!(g.inner.len(), 2 * 3 * 2);
    }

    #[test]
    fn contact_pair_links_nearby_controls() {
        let p = vec![[0.5, 0.5], [0.54, 0.5], [0.3, 0.5], [0.8, 0.5]];
        let ids = vec![0, 1, 0, 1];
        let ctl = vec![[0.49, 0.5], [0.3, 0.5], [0.55, 0.5], [0.8, 0.5]];
        let cobj = vec![0, 0, 1, 1];
        let cfg = ProcessorConfig::default();
        let g = build_collision_graph(&p, &ids, &ctl, &cobj, &cfg, Adjacency::Collision).unwrap();
        assert_eq!(g.inter, vec![(0, 2), (2, 0)]);
        let s = build_collision_graph(&p, &ids, &ctl, &cobj, &cfg, Adjacency::Static).unwrap();
        assert!(s.inter.is_empty());
        assert_eq!(s.inner, g.inner);
    }
}
