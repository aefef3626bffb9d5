//! Parameter storage, dense layers, and the optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Mat,
    trainable: bool,
}

/// Named parameters and fixed buffers, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

/// Round every entry to the nearest `f32`.
pub fn round_to_f32(m: &mut Mat) {
    m.mapv_inplace(|x| x as f32 as f64);
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, mut value: Mat, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        // Parameters live on the f32 grid so that checkpoints round-trip exactly.
        round_to_f32(&mut value);
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn add(&mut self, name: &str, value: Mat) -> ParamId {
        self.insert(name, value, true)
    }

    /// A fixed buffer: saved with the model but never updated.
    pub fn add_buffer(&mut self, name: &str, value: Mat) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Replace a value, checking the shape.
    pub fn set(&mut self, id: ParamId, mut value: Mat) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.dim() != value.dim() {
            return Err(Error::format(
                e.name.clone(),
                format!("expected shape {:?}, found {:?}", e.value.dim(), value.dim()),
            ));
        }
        round_to_f32(&mut value);
        e.value = value;
        Ok(())
    }
}

/// Uniform fan-in initialization in `[-k, k]` with `k = gain / sqrt(fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Mat {
    let k = gain / (rows.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-k, k).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// `y = x·W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_gain(store, name, d_in, d_out, bias, 1.0, rng)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(&format!("{name}.weight"), uniform_init(rng, d_in, d_out, gain));
        let b = bias.then(|| store.add(&format!("{name}.bias"), Mat::zeros((1, d_out))));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(store, b);
                t.add(y, b)
            }
            None => y,
        }
    }
}

/// Stack of linear layers with SiLU between them (and after the last one if
/// `activate_last`).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activate_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, activate_last }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(t, store, h);
            if i + 1 < n || self.activate_last {
                h = t.silu(h);
            }
        }
        h
    }
}

/// Scale all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= k;
        }
    }
    norm
}

/// Cosine decay from `base` to zero over `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (epoch as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.value(id).dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient still decay their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            round_to_f32(m);
            round_to_f32(v);
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / bc1;
                let vh = v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
                *p = *p as f32 as f64;
            });
        }
    }
}

/// Accumulate `src` into `dst` with weight `k`.
pub fn accumulate(dst: &mut Vec<Option<Mat>>, src: Vec<Option<Mat>>, k: f64) {
    if dst.len() < src.len() {
        dst.resize(src.len(), None);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(s) = s {
            match d {
                Some(d) => d.scaled_add(k, &s),
                None => *d = Some(s * k),
            }
        }
    }
}

/// Draw a fresh seed for a sub-component from a parent generator.
pub fn child_rng(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(rng.random())
}
