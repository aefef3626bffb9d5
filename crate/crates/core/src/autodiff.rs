//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every model in the crate is written against [`Tape`]: a forward pass records
//! one node per operation and [`Tape::backward`] replays the tape in reverse.
//! Inference runs the same code and simply never calls `backward`.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::nn::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    SumRowBlocks(Var, usize),
    MaxRowBlocks(Var, Vec<usize>),
    SumColBlocks(Var, usize),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    RowSum(Var),
    RowDotBlocks(Var, Var),
    PairSqDist(Var, Var),
    Poly(Var, Rc<[Vec<usize>]>),
    PassThrough(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    per_node: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::variable`].
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.per_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients indexed like the parameter store.
    pub fn into_param_grads(self) -> Vec<Option<Mat>> {
        self.params
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast {a:?} vs {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sum `g` down to `shape` along broadcast axes.
fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary<F: Fn(f64, f64) -> f64>(a: &Mat, b: &Mat, f: F) -> Mat {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast lhs");
    let bv = b.broadcast(shape).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exponent table for all monomials of degree `1..=degree` in `d` variables.
pub fn monomial_exponents(d: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, start: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        if left == 0 {
            return;
        }
        for v in start..d {
            cur.push(v);
            rec(d, v, left - 1, cur, out);
            cur.pop();
        }
    }
    // Each monomial is stored as the multiset of variable indices it multiplies.
    let mut out = Vec::new();
    rec(d, 0, degree, &mut Vec::new(), &mut out);
    out.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Mat) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that participates in differentiation (used by gradient checks).
    pub fn variable(&mut self, value: Mat) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, true)
    }

    /// Load a parameter, reusing the node if it was already loaded on this tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.param_vars.len() <= i {
            self.param_vars.resize(i + 1, None);
        }
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let value = store.value(id).clone();
        let trainable = store.is_trainable(id);
        let op = if trainable { Op::Param(i) } else { Op::Leaf };
        let v = self.push(value, op, trainable);
        self.param_vars[i] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sin);
        let ng = self.ng(a);
        self.push(v, Op::Sin(a), ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::cos);
        let ng = self.ng(a);
        self.push(v, Op::Cos(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// `out[r] = a[idx[r]]`
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let src = self.value(a);
        let c = src.ncols();
        let mut out = Mat::zeros((idx.len(), c));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::Gather(a, idx), ng)
    }

    /// `out[idx[r]] += a[r]`, accumulated in row order.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<[usize]>, n_out: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), idx.len());
        let mut out = Mat::zeros((n_out, src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            let mut row = out.row_mut(i);
            row += &src.row(r);
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterAdd(a, idx), ng)
    }

    /// Sum consecutive groups of `block` rows.
    pub fn sum_row_blocks(&mut self, a: Var, block: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows() % block, 0);
        let n = src.nrows() / block;
        let out = src
            .view()
            .into_shape_with_order((n, block, src.ncols()))
            .expect("contiguous")
            .sum_axis(Axis(1));
        let ng = self.ng(a);
        self.push(out, Op::SumRowBlocks(a, block), ng)
    }

    /// Column-wise max over consecutive groups of `block` rows (first max wins).
    pub fn max_row_blocks(&mut self, a: Var, block: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows() % block, 0);
        let n = src.nrows() / block;
        let c = src.ncols();
        let mut out = Mat::zeros((n, c));
        let mut arg = vec![0usize; n * c];
        for k in 0..n {
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut bi = k * block;
                for r in k * block..(k + 1) * block {
                    let x = src[[r, j]];
                    if x > best {
                        best = x;
                        bi = r;
                    }
                }
                out[[k, j]] = best;
                arg[k * c + j] = bi;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaxRowBlocks(a, arg), ng)
    }

    /// Sum consecutive groups of `width` columns: `[R × k·width] → [R × k]`.
    pub fn sum_col_blocks(&mut self, a: Var, width: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols() % width, 0);
        let k = src.ncols() / width;
        let out = src
            .view()
            .into_shape_with_order((src.nrows(), k, width))
            .expect("contiguous")
            .sum_axis(Axis(2));
        let ng = self.ng(a);
        self.push(out, Op::SumColBlocks(a, width), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let out = out.as_standard_layout().into_owned();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("element count preserved");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(out, Op::RowSum(a), ng)
    }

    /// `out[r, k] = Σ_f a[r, k·n + f] · b[r, f]` for `b` of width `n`.
    pub fn row_dot_blocks(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (rows, n) = bv.dim();
        assert_eq!(av.nrows(), rows);
        assert_eq!(av.ncols() % n, 0);
        let k = av.ncols() / n;
        let mut out = Mat::zeros((rows, k));
        for r in 0..rows {
            let ar = av.row(r);
            let br = bv.row(r);
            for kk in 0..k {
                let mut acc = 0.0;
                for f in 0..n {
                    acc += ar[kk * n + f] * br[f];
                }
                out[[r, kk]] = acc;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::RowDotBlocks(a, b), ng)
    }

    /// Squared distances between the rows of `x` `[Q × d]` and `y` `[M × d]`.
    pub fn pair_sq_dist(&mut self, x: Var, y: Var) -> Var {
        let xv = self.value(x);
        let yv = self.value(y);
        assert_eq!(xv.ncols(), yv.ncols());
        let mut out = Mat::zeros((xv.nrows(), yv.nrows()));
        for i in 0..xv.nrows() {
            for j in 0..yv.nrows() {
                let mut acc = 0.0;
                for c in 0..xv.ncols() {
                    let d = xv[[i, c]] - yv[[j, c]];
                    acc += d * d;
                }
                out[[i, j]] = acc;
            }
        }
        let ng = self.ng(x) || self.ng(y);
        self.push(out, Op::PairSqDist(x, y), ng)
    }

    /// All monomials of degree `1..=degree` of the columns of `a`.
    pub fn poly_features(&mut self, a: Var, degree: usize) -> Var {
        let src = self.value(a);
        let exps: Rc<[Vec<usize>]> = monomial_exponents(src.ncols(), degree).into();
        let mut out = Mat::zeros((src.nrows(), exps.len()));
        for r in 0..src.nrows() {
            for (k, m) in exps.iter().enumerate() {
                out[[r, k]] = m.iter().map(|&v| src[[r, v]]).product();
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Poly(a, exps), ng)
    }

    /// Apply `f` to the value but pass gradients through unchanged
    /// (used for angle wrapping, which is locally the identity).
    pub fn pass_through(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(out, Op::PassThrough(a), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        let mut params: Vec<Option<Mat>> = Vec::new();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if let Op::Param(p) = self.nodes[i].op {
                if params.len() <= p {
                    params.resize(p + 1, None);
                }
                params[p] = Some(g);
            } else if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients {
            per_node: grads,
            params,
        }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.dim();
        let g = reduce_to(g, shape);
        debug_assert_eq!(g.dim(), shape);
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.acc(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    let ga = g.dot(self.value(*b));
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = g.t().dot(self.value(*a));
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = binary(g, self.value(*b), |x, y| x * y);
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = binary(g, self.value(*a), |x, y| x * y);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::Silu(a) => {
                // Recover the sigmoid from the stored output where that is exact enough.
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .and(&node.value)
                    .for_each(|gx, &x, &y| {
                        let s = if x.abs() > 1e-3 { y / x } else { sigmoid(x) };
                        *gx *= s * (1.0 + x * (1.0 - s));
                    });
                self.acc(grads, *a, ga);
            }
            Op::Sin(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gx, &x| *gx *= x.cos());
                self.acc(grads, *a, ga);
            }
            Op::Cos(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gx, &x| *gx *= -x.sin());
                self.acc(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g * &node.value;
                self.acc(grads, *a, ga);
            }
            Op::Gather(a, idx) => {
                let mut ga = Mat::zeros(self.shape(*a));
                for (r, &j) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(j);
                    row += &g.row(r);
                }
                self.acc(grads, *a, ga);
            }
            Op::ScatterAdd(a, idx) => {
                let mut ga = Mat::zeros(self.shape(*a));
                for (r, &j) in idx.iter().enumerate() {
                    ga.row_mut(r).assign(&g.row(j));
                }
                self.acc(grads, *a, ga);
            }
            Op::SumRowBlocks(a, block) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Mat::zeros((rows, cols));
                for r in 0..rows {
                    ga.row_mut(r).assign(&g.row(r / block));
                }
                self.acc(grads, *a, ga);
            }
            Op::MaxRowBlocks(a, arg) => {
                let mut ga = Mat::zeros(self.shape(*a));
                let c = g.ncols();
                for k in 0..g.nrows() {
                    for j in 0..c {
                        ga[[arg[k * c + j], j]] += g[[k, j]];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SumColBlocks(a, width) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Mat::zeros((rows, cols));
                for r in 0..rows {
                    for c in 0..cols {
                        ga[[r, c]] = g[[r, c / width]];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Mat::zeros(y.dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dotp: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..y.ncols() {
                        ga[[r, c]] = yr[c] * (gr[c] - dotp);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        self.acc(grads, p, gp);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.ng(p) {
                        let gp = g.slice(s![start..start + h, ..]).to_owned();
                        self.acc(grads, p, gp);
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Mat::zeros(self.shape(*a));
                let w = g.ncols();
                ga.slice_mut(s![.., *start..*start + w]).assign(g);
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.clone().into_shape_with_order(self.shape(*a)).expect("reshape back");
                self.acc(grads, *a, ga);
            }
            Op::Transpose(a) => {
                let ga = g.t().as_standard_layout().into_owned();
                self.acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                self.acc(grads, *a, ga);
            }
            Op::RowSum(a) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Mat::zeros((rows, cols));
                for r in 0..rows {
                    ga.row_mut(r).fill(g[[r, 0]]);
                }
                self.acc(grads, *a, ga);
            }
            Op::RowDotBlocks(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (rows, n) = bv.dim();
                let k = av.ncols() / n;
                if self.ng(*a) {
                    let mut ga = Mat::zeros(av.dim());
                    for r in 0..rows {
                        for kk in 0..k {
                            let gk = g[[r, kk]];
                            for f in 0..n {
                                ga[[r, kk * n + f]] = gk * bv[[r, f]];
                            }
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Mat::zeros(bv.dim());
                    for r in 0..rows {
                        for kk in 0..k {
                            let gk = g[[r, kk]];
                            for f in 0..n {
                                gb[[r, f]] += gk * av[[r, kk * n + f]];
                            }
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::PairSqDist(x, y) => {
                let xv = self.value(*x);
                let yv = self.value(*y);
                let d = xv.ncols();
                let mut gx = Mat::zeros(xv.dim());
                let mut gy = Mat::zeros(yv.dim());
                for i in 0..xv.nrows() {
                    for j in 0..yv.nrows() {
                        let gij = 2.0 * g[[i, j]];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = gij * (xv[[i, c]] - yv[[j, c]]);
                            gx[[i, c]] += diff;
                            gy[[j, c]] -= diff;
                        }
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *y, gy);
            }
            Op::Poly(a, exps) => {
                let src = self.value(*a);
                let mut ga = Mat::zeros(src.dim());
                for r in 0..src.nrows() {
                    for (k, m) in exps.iter().enumerate() {
                        let gk = g[[r, k]];
                        if gk == 0.0 {
                            continue;
                        }
                        // d/dx_v of Π x_{m_t}: drop one factor at a time.
                        for t in 0..m.len() {
                            let mut p = gk;
                            for (u, &v) in m.iter().enumerate() {
                                if u != t {
                                    p *= src[[r, v]];
                                }
                            }
                            ga[[r, m[t]]] += p;
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::PassThrough(a) => self.acc(grads, *a, g.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a random weighting w.
    fn check<F>(inputs: Vec<Mat>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let weights =
            |shape: (usize, usize)| Mat::from_shape_fn(shape, |(i, j)| ((i * 7 + j * 3) as f64 * 0.37).sin() + 0.5);
        let eval = |xs: &[Mat]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.variable(x.clone())).collect();
            let out = f(&mut t, &vs);
            let w = t.constant(weights(t.shape(out)));
            let p = t.mul(out, w);
            let s = t.sum_all(p);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.variable(x.clone())).collect();
        let out = f(&mut t, &vs);
        let w = t.constant(weights(t.shape(out)));
        let p = t.mul(out, w);
        let s = t.sum_all(p);
        let grads = t.backward(s);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.of(vs[k]).cloned().unwrap_or_else(|| Mat::zeros(x.dim()));
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} [{r},{c}]: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: f64) -> Mat {
        Mat::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * 0.91 + seed).sin())
    }

    #[test]
    fn matmul_and_broadcast() {
        check(vec![m(3, 4, 0.1), m(4, 2, 0.7)], |t, v| t.matmul(v[0], v[1]));
        check(vec![m(3, 4, 0.1), m(2, 4, 0.7)], |t, v| t.matmul_nt(v[0], v[1]));
        check(vec![m(3, 4, 0.2), m(1, 4, 0.3)], |t, v| t.add(v[0], v[1]));
        check(vec![m(3, 4, 0.2), m(3, 1, 0.3)], |t, v| t.mul(v[0], v[1]));
        check(vec![m(3, 4, 0.2), m(1, 1, 0.3)], |t, v| t.sub(v[0], v[1]));
    }

    #[test]
    fn elementwise() {
        check(vec![m(3, 3, 0.5)], |t, v| t.silu(v[0]));
        check(vec![m(3, 3, 0.5)], |t, v| t.sin(v[0]));
        check(vec![m(3, 3, 0.5)], |t, v| t.cos(v[0]));
        check(vec![m(3, 3, 0.5)], |t, v| t.exp(v[0]));
        check(vec![m(3, 3, 0.5)], |t, v| {
            let a = t.mul(v[0], v[0]);
            t.scale(a, -1.5)
        });
    }

    #[test]
    fn indexing_ops() {
        let idx: Rc<[usize]> = vec![2, 0, 2, 1].into();
        check(vec![m(3, 2, 0.4)], |t, v| t.gather(v[0], idx.clone()));
        check(vec![m(4, 2, 0.4)], |t, v| t.scatter_add(v[0], idx.clone(), 3));
        check(vec![m(6, 3, 0.4)], |t, v| t.sum_row_blocks(v[0], 3));
        check(vec![m(6, 3, 0.4)], |t, v| t.max_row_blocks(v[0], 2));
        check(vec![m(2, 6, 0.4)], |t, v| t.sum_col_blocks(v[0], 3));
    }

    #[test]
    fn structural_ops() {
        check(vec![m(3, 4, 0.1)], |t, v| t.softmax_rows(v[0]));
        check(vec![m(3, 2, 0.1), m(3, 1, 0.9)], |t, v| {
            t.concat_cols(&[v[0], v[1], v[0]])
        });
        check(vec![m(2, 2, 0.1), m(1, 2, 0.9)], |t, v| t.concat_rows(&[v[0], v[1]]));
        check(vec![m(3, 5, 0.1)], |t, v| t.slice_cols(v[0], 1, 3));
        check(vec![m(3, 4, 0.1)], |t, v| t.reshape(v[0], 6, 2));
        check(vec![m(3, 4, 0.1)], |t, v| t.transpose(v[0]));
        check(vec![m(3, 4, 0.1)], |t, v| t.row_sum(v[0]));
        check(vec![m(3, 4, 0.1)], |t, v| t.mean_all(v[0]));
    }

    #[test]
    fn fused_ops() {
        check(vec![m(3, 6, 0.1), m(3, 2, 0.8)], |t, v| t.row_dot_blocks(v[0], v[1]));
        check(vec![m(4, 2, 0.1), m(3, 2, 0.8)], |t, v| t.pair_sq_dist(v[0], v[1]));
        check(vec![m(4, 3, 0.1)], |t, v| t.poly_features(v[0], 3));
    }

    #[test]
    fn monomial_counts() {
        // C(d + k, k) - 1 monomials of degree 1..=k.
        assert_eq!(monomial_exponents(2, 3).len(), 9);
        assert_eq!(monomial_exponents(4, 3).len(), 34);
        assert_eq!(monomial_exponents(6, 3).len(), 83);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.variable(array![[3.0], [4.0]]);
        let c = t.matmul(a, b);
        let g = t.backward(c);
        assert!(g.of(a).is_none());
        assert_eq!(g.of(b).unwrap(), &array![[1.0], [2.0]]);
    }
}
