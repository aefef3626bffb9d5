//! Conditional neural field mapping query positions to velocities.
//!
//! Latent contexts are mixed by one self-attention layer over control points,
//! then every query cross-attends to all control points. Pair attributes are
//! embedded with random Fourier features, attention logits carry a Gaussian
//! distance window, and each control point emits a local 2-vector that is
//! rotated into the world frame by its orientation in the rotation-equivariant
//! variant.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::latent::{rotate_rows, AttributeMode, GroupVariant, LatentVars};
use crate::nn::{normal_init, Linear, ParamId, ParamStore};

/// Queries per block on the pairwise path, bounding its memory.
const PAIR_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub heads: usize,
    pub self_attention_layers: usize,
    pub hidden: usize,
    /// Gaussian window width in domain units.
    pub sigma: f64,
    /// Length scale of the query/key random features.
    pub rff_query_scale: f64,
    /// Length scale of the value random features.
    pub rff_value_scale: f64,
    pub n_frequencies: usize,
    pub context_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            self_attention_layers: 1,
            hidden: 64,
            sigma: 0.1,
            rff_query_scale: 0.05,
            rff_value_scale: 0.2,
            n_frequencies: 16,
            context_width: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.rff_query_scale > 0.0 && self.rff_value_scale > 0.0) {
            return Err(Error::validation("decoder sigma and feature scales must be positive"));
        }
        if self.heads == 0 || self.hidden == 0 || self.n_frequencies == 0 || self.context_width == 0 {
            return Err(Error::validation("decoder widths must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::validation("decoder hidden width must be divisible by heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    edge: Linear,
    out: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub variant: GroupVariant,
    pub attributes: AttributeMode,
    input: Linear,
    self_attention: Vec<SelfAttention>,
    b_self: ParamId,
    b_query: ParamId,
    b_value: ParamId,
    key: Linear,
    value: Linear,
    value_bias: Linear,
}

/// Which cross-attention evaluation to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodePath {
    /// Pick the factorized path whenever the attribute allows it.
    Auto,
    /// Per-pair evaluation, valid for every variant.
    Pairwise,
}

fn rff(t: &mut Tape, a: Var, b: Var) -> Var {
    let proj = t.matmul(a, b);
    let s = t.sin(proj);
    let c = t.cos(proj);
    t.concat_cols(&[s, c])
}

fn repeat_rows(n: usize, m: usize) -> Rc<[usize]> {
    (0..n)
        .flat_map(|i| std::iter::repeat_n(i, m))
        .collect::<Vec<_>>()
        .into()
}

fn tile_rows(n: usize, m: usize) -> Rc<[usize]> {
    (0..n).flat_map(|_| 0..m).collect::<Vec<_>>().into()
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        config: &DecoderConfig,
        variant: GroupVariant,
        attributes: AttributeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let f = config.n_frequencies;
        let extra = if uses_raw_orientation(variant, attributes) {
            2
        } else {
            0
        };
        let input = Linear::new(store, "decoder.input", config.context_width + extra, d, true, rng);
        let pair_rest = pair_rest_width(variant, attributes);
        let self_attention = (0..config.self_attention_layers)
            .map(|l| {
                let n = format!("decoder.self{l}");
                SelfAttention {
                    q: Linear::new(store, &format!("{n}.q"), d, d, false, rng),
                    k: Linear::new(store, &format!("{n}.k"), d, d, false, rng),
                    v: Linear::new(store, &format!("{n}.v"), d, d, false, rng),
                    edge: Linear::new(store, &format!("{n}.edge"), 2 * f + pair_rest, d, true, rng),
                    out: Linear::new(store, &format!("{n}.out"), d, d, true, rng),
                    mlp1: Linear::new(store, &format!("{n}.mlp1"), d, 2 * d, true, rng),
                    mlp2: Linear::new(store, &format!("{n}.mlp2"), 2 * d, d, true, rng),
                }
            })
            .collect();
        let b_self = store.add_buffer("decoder.rff_self", normal_init(rng, 2, f, 1.0 / config.rff_query_scale));
        let b_query = store.add_buffer(
            "decoder.rff_query",
            normal_init(rng, 2, f, 1.0 / config.rff_query_scale),
        );
        let b_value = store.add_buffer(
            "decoder.rff_value",
            normal_init(rng, 2, f, 1.0 / config.rff_value_scale),
        );
        let h = config.heads;
        let key = Linear::new(store, "decoder.key", d, h * 2 * f, true, rng);
        let value = Linear::new(store, "decoder.value", d, h * 2 * 2 * f, true, rng);
        let value_bias = Linear::new(store, "decoder.value_bias", d, h * 2, true, rng);
        Ok(Self {
            config: config.clone(),
            variant,
            attributes,
            input,
            self_attention,
            b_self,
            b_query,
            b_value,
            key,
            value,
            value_bias,
        })
    }

    /// Parameters of the value head (zeroing them makes the field vanish).
    pub fn value_head(&self) -> Vec<ParamId> {
        let mut ids = vec![self.value.w, self.value_bias.w];
        ids.extend(self.value.b);
        ids.extend(self.value_bias.b);
        ids
    }

    fn latent_features(&self, t: &mut Tape, store: &ParamStore, z: &LatentVars) -> Var {
        let input = if uses_raw_orientation(self.variant, self.attributes) {
            let c = t.cos(z.theta);
            let s = t.sin(z.theta);
            t.concat_cols(&[z.c, c, s])
        } else {
            z.c
        };
        let mut h = self.input.forward(t, store, input);
        for layer in &self.self_attention {
            h = self.self_attend(t, store, layer, h, z);
        }
        h
    }

    fn self_attend(&self, t: &mut Tape, store: &ParamStore, layer: &SelfAttention, h: Var, z: &LatentVars) -> Var {
        let m = z.len();
        let heads = self.config.heads;
        let dh = self.config.hidden / heads;
        let recv = repeat_rows(m, m);
        let send = tile_rows(m, m);
        let xi = t.gather(z.x, recv.clone());
        let xj = t.gather(z.x, send.clone());
        let ti = t.gather(z.theta, recv.clone());
        let tj = t.gather(z.theta, send.clone());
        let (pos, rest) = pair_attribute(t, self.variant, self.attributes, xi, xj, ti, tj);
        let b = t.param(store, self.b_self);
        let emb = rff(t, pos, b);
        let edge_in = t.concat_cols(&[emb, rest]);
        let e = layer.edge.forward(t, store, edge_in);

        let q = layer.q.forward(t, store, h);
        let k = layer.k.forward(t, store, h);
        let v = layer.v.forward(t, store, h);
        let qg = t.gather(q, recv.clone());
        let kg = t.gather(k, send.clone());
        let qk = t.mul(qg, kg);
        let qke = t.mul(qk, e);
        let logits = t.sum_col_blocks(qke, dh);
        let logits = t.scale(logits, 1.0 / (dh as f64).sqrt());
        let d2 = t.pair_sq_dist(z.x, z.x);
        let window = t.scale(d2, -0.5 / (self.config.sigma * self.config.sigma));
        let vg = t.gather(v, send);
        let ve = t.mul(vg, e);
        let mut per_head = Vec::with_capacity(heads);
        for hd in 0..heads {
            let l = t.slice_cols(logits, hd, 1);
            let l = t.reshape(l, m, m);
            let l = t.add(l, window);
            let a = t.softmax_rows(l);
            let a = t.reshape(a, m * m, 1);
            let vh = t.slice_cols(ve, hd * dh, dh);
            let w = t.mul(vh, a);
            per_head.push(t.sum_row_blocks(w, m));
        }
        let attn = t.concat_cols(&per_head);
        let o = layer.out.forward(t, store, attn);
        let h = t.add(h, o);
        let u = layer.mlp1.forward(t, store, h);
        let u = t.silu(u);
        let u = layer.mlp2.forward(t, store, u);
        t.add(h, u)
    }

    /// Velocities `Q × 2` at query positions `Q × 2`.
    pub fn decode(&self, t: &mut Tape, store: &ParamStore, queries: Var, z: &LatentVars, path: DecodePath) -> Var {
        let h = self.latent_features(t, store, z);
        let key = self.key.forward(t, store, h);
        let value = self.value.forward(t, store, h);
        let value_bias = self.value_bias.forward(t, store, h);
        let factorized = self.variant == GroupVariant::Translation || self.attributes == AttributeMode::NonEquivariant;
        if path == DecodePath::Auto && factorized {
            self.cross_factorized(t, store, queries, z, key, value, value_bias)
        } else {
            let q = t.shape(queries).0;
            let mut parts = Vec::new();
            let mut start = 0;
            while start < q {
                let len = PAIR_CHUNK.min(q - start);
                let idx: Rc<[usize]> = (start..start + len).collect::<Vec<_>>().into();
                let chunk = if len == q { queries } else { t.gather(queries, idx) };
                parts.push(self.cross_pairwise(t, store, chunk, z, key, value, value_bias));
                start += len;
            }
            if parts.len() == 1 {
                parts[0]
            } else {
                t.concat_rows(&parts)
            }
        }
    }

    fn window(&self, t: &mut Tape, queries: Var, z: &LatentVars) -> Var {
        let d2 = t.pair_sq_dist(queries, z.x);
        t.scale(d2, -0.5 / (self.config.sigma * self.config.sigma))
    }

    /// Fold the latent end of a separable sinusoidal attribute into the
    /// coefficients `coef` (`M × 2F`, sine half then cosine half), so that
    /// `γ(a_ij) · coef_j = Γ(x_i) · P_j`.
    fn fold(&self, t: &mut Tape, coef: Var, sin_l: Var, cos_l: Var) -> Var {
        let f = self.config.n_frequencies;
        let ks = t.slice_cols(coef, 0, f);
        let kc = t.slice_cols(coef, f, f);
        let cks = t.mul(cos_l, ks);
        let ckc = t.mul(cos_l, kc);
        let sks = t.mul(sin_l, ks);
        let skc = t.mul(sin_l, kc);
        let (ps, pc) = match self.attributes {
            // a = x_i - x_j
            AttributeMode::Invariant => (t.add(cks, skc), t.sub(ckc, sks)),
            // a = x_i + x_j
            AttributeMode::NonEquivariant => (t.sub(cks, skc), t.add(sks, ckc)),
        };
        t.concat_cols(&[ps, pc])
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_factorized(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        queries: Var,
        z: &LatentVars,
        key: Var,
        value: Var,
        value_bias: Var,
    ) -> Var {
        let f = self.config.n_frequencies;
        let bq = t.param(store, self.b_query);
        let bv = t.param(store, self.b_value);
        let gq = rff(t, queries, bq);
        let gv = rff(t, queries, bv);
        let lq = t.matmul(z.x, bq);
        let (sq, cq) = (t.sin(lq), t.cos(lq));
        let lv = t.matmul(z.x, bv);
        let (sv, cv) = (t.sin(lv), t.cos(lv));
        let window = self.window(t, queries, z);
        let scale = 1.0 / ((2 * f) as f64).sqrt();
        let mut out = None;
        for h in 0..self.config.heads {
            let kh = t.slice_cols(key, h * 2 * f, 2 * f);
            let p = self.fold(t, kh, sq, cq);
            let logits = t.matmul_nt(gq, p);
            let logits = t.scale(logits, scale);
            let logits = t.add(logits, window);
            let alpha = t.softmax_rows(logits);
            let mut blocks = Vec::with_capacity(2);
            for o in 0..2 {
                let a = t.slice_cols(value, (h * 2 + o) * 2 * f, 2 * f);
                blocks.push(self.fold(t, a, sv, cv));
            }
            let pv = t.concat_cols(&blocks);
            let w = t.matmul(alpha, pv);
            let u = t.row_dot_blocks(w, gv);
            let bh = t.slice_cols(value_bias, h * 2, 2);
            let ub = t.matmul(alpha, bh);
            let u = t.add(u, ub);
            out = Some(match out {
                None => u,
                Some(acc) => t.add(acc, u),
            });
        }
        out.expect("at least one head")
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_pairwise(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        queries: Var,
        z: &LatentVars,
        key: Var,
        value: Var,
        value_bias: Var,
    ) -> Var {
        let f = self.config.n_frequencies;
        let q = t.shape(queries).0;
        let m = z.len();
        let qi = repeat_rows(q, m);
        let lj = tile_rows(q, m);
        let xq = t.gather(queries, qi);
        let xl = t.gather(z.x, lj.clone());
        let d = t.sub(xq, xl);
        let th = t.gather(z.theta, lj.clone());
        let (c, s) = (t.cos(th), t.sin(th));
        let a = match (self.attributes, self.variant) {
            (AttributeMode::NonEquivariant, _) => t.add(xq, xl),
            (AttributeMode::Invariant, GroupVariant::Translation) => d,
            (AttributeMode::Invariant, GroupVariant::Se2) => rotate_rows(t, d, c, s, true),
        };
        let bq = t.param(store, self.b_query);
        let bv = t.param(store, self.b_value);
        let gq = rff(t, a, bq);
        let gv = rff(t, a, bv);
        let kg = t.gather(key, lj.clone());
        let logits = t.row_dot_blocks(kg, gq);
        let logits = t.scale(logits, 1.0 / ((2 * f) as f64).sqrt());
        let dd = t.mul(d, d);
        let d2 = t.row_sum(dd);
        let window = t.scale(d2, -0.5 / (self.config.sigma * self.config.sigma));
        let logits = t.add(logits, window);
        let vg = t.gather(value, lj.clone());
        let u = t.row_dot_blocks(vg, gv);
        let bg = t.gather(value_bias, lj);
        let u = t.add(u, bg);
        let mut out = None;
        for h in 0..self.config.heads {
            let l = t.slice_cols(logits, h, 1);
            let l = t.reshape(l, q, m);
            let alpha = t.softmax_rows(l);
            let alpha = t.reshape(alpha, q * m, 1);
            let mut uh = t.slice_cols(u, h * 2, 2);
            if self.variant == GroupVariant::Se2 && self.attributes == AttributeMode::Invariant {
                uh = rotate_rows(t, uh, c, s, false);
            }
            let w = t.mul(uh, alpha);
            let r = t.sum_row_blocks(w, m);
            out = Some(match out {
                None => r,
                Some(acc) => t.add(acc, r),
            });
        }
        out.expect("at least one head")
    }

    /// Decode without gradients.
    pub fn eval(&self, store: &ParamStore, queries: &Mat, z: &crate::latent::LatentState) -> Result<Mat> {
        z.validate()?;
        if z.contexts.ncols() != self.config.context_width {
            return Err(Error::validation(format!(
                "latent context width {} does not match decoder width {}",
                z.contexts.ncols(),
                self.config.context_width
            )));
        }
        if queries.ncols() != 2 || queries.nrows() == 0 {
            return Err(Error::validation("queries must be a non-empty Q x 2 array"));
        }
        let mut t = Tape::new();
        let zv = z.to_vars(&mut t);
        let qv = t.constant(queries.clone());
        let out = self.decode(&mut t, store, qv, &zv, DecodePath::Auto);
        Ok(t.value(out).clone())
    }
}

/// Orientation enters latent features directly when it is not acted on by
/// the group (or when symmetry is deliberately broken).
pub fn uses_raw_orientation(variant: GroupVariant, attributes: AttributeMode) -> bool {
    variant == GroupVariant::Translation || attributes == AttributeMode::NonEquivariant
}

/// Width of the non-positional part of a latent pair attribute.
pub fn pair_rest_width(variant: GroupVariant, attributes: AttributeMode) -> usize {
    match (attributes, variant) {
        (AttributeMode::NonEquivariant, _) => 2,
        (AttributeMode::Invariant, GroupVariant::Translation) => 4,
        (AttributeMode::Invariant, GroupVariant::Se2) => 2,
    }
}

/// Pair attribute between sender `j` and receiver `i`, split into its
/// positional part (`R × 2`) and the remaining angular part.
pub fn pair_attribute(
    t: &mut Tape,
    variant: GroupVariant,
    attributes: AttributeMode,
    xi: Var,
    xj: Var,
    ti: Var,
    tj: Var,
) -> (Var, Var) {
    match (attributes, variant) {
        (AttributeMode::NonEquivariant, _) => {
            let p = t.add(xi, xj);
            let th = t.add(ti, tj);
            let (c, s) = (t.cos(th), t.sin(th));
            (p, t.concat_cols(&[c, s]))
        }
        (AttributeMode::Invariant, GroupVariant::Translation) => {
            let p = t.sub(xj, xi);
            let (ci, si, cj, sj) = (t.cos(ti), t.sin(ti), t.cos(tj), t.sin(tj));
            (p, t.concat_cols(&[ci, si, cj, sj]))
        }
        (AttributeMode::Invariant, GroupVariant::Se2) => {
            let d = t.sub(xj, xi);
            let (ci, si) = (t.cos(ti), t.sin(ti));
            let p = rotate_rows(t, d, ci, si, true);
            let dth = t.sub(tj, ti);
            let (c, s) = (t.cos(dth), t.sin(dth));
            (p, t.concat_cols(&[c, s]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GroupElement, Pose2};
    use crate::latent::LatentState;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            hidden: 16,
            n_frequencies: 8,
            context_width: 6,
            ..Default::default()
        }
    }

    fn latent(rng: &mut ChaCha8Rng, m: usize, c: usize) -> LatentState {
        LatentState {
            poses: (0..m)
                .map(|_| Pose2::new([rng.random(), rng.random()], rng.random::<f64>() * 6.0 - 3.0))
                .collect(),
            contexts: Mat::from_shape_fn((m, c), |_| rng.random::<f64>() - 0.5),
            source_indices: (0..m).collect(),
            object_ids: vec![0; m],
        }
    }

    fn queries(rng: &mut ChaCha8Rng, q: usize) -> Mat {
        Mat::from_shape_fn((q, 2), |_| rng.random())
    }

    fn build(variant: GroupVariant, attributes: AttributeMode, seed: u64) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = Decoder::new(&mut store, &small_cfg(), variant, attributes, &mut rng).unwrap();
        (store, d)
    }

    fn decode_path(d: &Decoder, store: &ParamStore, q: &Mat, z: &LatentState, path: DecodePath) -> Mat {
        let mut t = Tape::new();
        let zv = z.to_vars(&mut t);
        let qv = t.constant(q.clone());
        let out = d.decode(&mut t, store, qv, &zv, path);
        t.value(out).clone()
    }

    fn max_abs(a: &Mat) -> f64 {
        a.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    #[test]
    fn factorized_matches_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in [AttributeMode::Invariant, AttributeMode::NonEquivariant] {
            let (store, d) = build(GroupVariant::Translation, mode, 1);
            let z = latent(&mut rng, 6, 6);
            let q = queries(&mut rng, 300);
            let a = decode_path(&d, &store, &q, &z, DecodePath::Auto);
            let b = decode_path(&d, &store, &q, &z, DecodePath::Pairwise);
            assert!(max_abs(&(&a - &b)) < 1e-10 * (1.0 + max_abs(&a)));
        }
    }

    #[test]
    fn zero_value_head_gives_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut store, d) = build(GroupVariant::Se2, AttributeMode::Invariant, 3);
        for id in d.value_head() {
            let shape = store.value(id).dim();
            store.set(id, Mat::zeros(shape)).unwrap();
        }
        let z = latent(&mut rng, 1, 6);
        let q = z.positions_mat();
        let out = d.eval(&store, &q, &z).unwrap();
        assert_eq!(out, Mat::zeros((1, 2)));
    }

    #[test]
    fn se2_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, d) = build(GroupVariant::Se2, AttributeMode::Invariant, 5);
        let z = latent(&mut rng, 8, 6);
        let q = queries(&mut rng, 50);
        let g = GroupElement::new(std::f64::consts::FRAC_PI_3, [0.2, -0.1]);
        let out = d.eval(&store, &q, &z).unwrap();
        let qg = Mat::from_shape_fn((50, 2), |(i, j)| g.act_point([q[[i, 0]], q[[i, 1]]])[j]);
        let out_g = d.eval(&store, &qg, &z.transformed(&g)).unwrap();
        let expect = Mat::from_shape_fn((50, 2), |(i, j)| g.act_vector([out[[i, 0]], out[[i, 1]]])[j]);
        let rel = max_abs(&(&out_g - &expect)) / max_abs(&expect);
        assert!(rel < 1e-10, "{rel}");
    }

    #[test]
    fn duplicated_latent_is_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, d) = build(GroupVariant::Translation, AttributeMode::Invariant, 7);
        let z1 = latent(&mut rng, 1, 6);
        let mut z2 = z1.clone();
        z2.poses.push(z1.poses[0]);
        z2.contexts = ndarray::concatenate![ndarray::Axis(0), z1.contexts, z1.contexts];
        z2.source_indices = vec![0, 0];
        z2.object_ids = vec![0, 0];
        let q = queries(&mut rng, 20);
        let a = d.eval(&store, &q, &z1).unwrap();
        let b = d.eval(&store, &q, &z2).unwrap();
        assert!(max_abs(&(&a - &b)) < 1e-12);
    }

    #[test]
    fn latent_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (store, d) = build(GroupVariant::Se2, AttributeMode::Invariant, 9);
        let z = latent(&mut rng, 5, 6);
        let perm = [3, 0, 4, 1, 2];
        let zp = LatentState {
            poses: perm.iter().map(|&i| z.poses[i]).collect(),
            contexts: Mat::from_shape_fn((5, 6), |(i, j)| z.contexts[[perm[i], j]]),
            source_indices: perm.to_vec(),
            object_ids: vec![0; 5],
        };
        let q = queries(&mut rng, 20);
        let a = d.eval(&store, &q, &z).unwrap();
        let b = d.eval(&store, &q, &zp).unwrap();
        assert!(max_abs(&(&a - &b)) < 1e-6);
    }

    #[test]
    fn far_queries_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (store, d) = build(GroupVariant::Se2, AttributeMode::Invariant, 11);
        let z = latent(&mut rng, 4, 6);
        let q = Mat::from_shape_fn((3, 2), |(i, _)| 1.0 + i as f64 * 10.0 * 0.1);
        assert!(d.eval(&store, &q, &z).unwrap().iter().all(|x| x.is_finite()));
    }
}
