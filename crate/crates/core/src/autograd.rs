//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Every value on the tape is a row-major `rows × cols` matrix. Token
//! sequences are `tokens × width`; 3-D convolutions operate on a
//! `voxels × channels` layout with the voxel index `(t·H + y)·W + x`.
//! Gradients are only propagated into nodes that (transitively) depend on
//! a leaf created with `requires_grad = true`, so frozen weights cost no
//! weight-gradient matmuls.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};

use crate::scalar::Real;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 3×3×3 convolution with padding 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeom {
    /// Input extent `(frames, height, width)`.
    pub input: (usize, usize, usize),
    pub c_in: usize,
    pub c_out: usize,
    /// Stride `(temporal, vertical, horizontal)`.
    pub stride: (usize, usize, usize),
}

impl Conv3dGeom {
    pub const KERNEL: usize = 3;

    pub fn output(&self) -> (usize, usize, usize) {
        let o = |n: usize, s: usize| (n + 2 - Self::KERNEL) / s + 1;
        (
            o(self.input.0, self.stride.0),
            o(self.input.1, self.stride.1),
            o(self.input.2, self.stride.2),
        )
    }

    pub fn in_voxels(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn out_voxels(&self) -> usize {
        let (t, h, w) = self.output();
        t * h * w
    }

    /// Rows of the weight matrix: `27·c_in`, indexed `((kt·3 + ky)·3 + kx)·c_in + c`.
    pub fn patch_len(&self) -> usize {
        27 * self.c_in
    }

    /// For each output voxel and kernel tap, the input voxel it reads (or `None` in padding).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ti, hi, wi) = self.input;
        let (to, ho, wo) = self.output();
        let (st, sy, sx) = self.stride;
        for ot in 0..to {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (ot * ho + oy) * wo + ox;
                    for kt in 0..3 {
                        let it = (ot * st + kt) as isize - 1;
                        if it < 0 || it >= ti as isize {
                            continue;
                        }
                        for ky in 0..3 {
                            let iy = (oy * sy + ky) as isize - 1;
                            if iy < 0 || iy >= hi as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * sx + kx) as isize - 1;
                                if ix < 0 || ix >= wi as isize {
                                    continue;
                                }
                                let src = (it as usize * hi + iy as usize) * wi + ix as usize;
                                f(o, (kt * 3 + ky) * 3 + kx, src);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out_voxels × 27·c_in` patch matrix of a `voxels × c_in` input.
    pub fn im2col<T: Real>(&self, x: &Array2<T>) -> Array2<T> {
        let c = self.c_in;
        let mut cols = Array2::<T>::zeros((self.out_voxels(), self.patch_len()));
        self.for_each_tap(|o, tap, src| {
            let dst = tap * c;
            for ch in 0..c {
                cols[[o, dst + ch]] = x[[src, ch]];
            }
        });
        cols
    }

    fn col2im<T: Real>(&self, dcols: &Array2<T>) -> Array2<T> {
        let c = self.c_in;
        let mut dx = Array2::<T>::zeros((self.in_voxels(), c));
        self.for_each_tap(|o, tap, src| {
            let from = tap * c;
            for ch in 0..c {
                dx[[src, ch]] += dcols[[o, from + ch]];
            }
        });
        dx
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `x ⊙ (1 + scale) + shift` with row-broadcast `shift`, `scale`.
    Modulate {
        x: Var,
        shift: Var,
        scale: Var,
    },
    /// Per-row normalisation without affine parameters; keeps `1/σ` per row.
    LayerNorm(Var, Vec<T>),
    Silu(Var),
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv3dGeom,
        cols: Array2<T>,
    },
    Mse(Var, Array2<T>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use computation record.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let half = T::lit(0.5);
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array2<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: expected a single row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let one_plus = self.value(scale).mapv(|s| T::one() + s);
        let value = self.value(x) * &one_plus + self.value(shift);
        let rg = self.rg(x) || self.rg(shift) || self.rg(scale);
        self.push(value, Op::Modulate { x, shift, scale }, rg)
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::lit(x.ncols() as f64);
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            row.mapv_inplace(|v| v * is);
            inv.push(is);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a, inv), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Multi-head scaled dot-product attention; `q` is `Nq×d`, `k`/`v` are `Nk×d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        assert_eq!(d, dk, "attention: q/k width mismatch");
        assert_eq!(self.shape(v), (nk, d), "attention: v shape mismatch");
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut out = Array2::<T>::zeros((nq, d));
        let mut probs = Vec::with_capacity(heads);
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut p = Array2::<T>::zeros((nq, nk));
                general_mat_mul(scale, &qv.slice(cols), &kv.slice(cols).t(), T::zero(), &mut p);
                for mut row in p.rows_mut() {
                    let m = row.fold(T::neg_infinity(), |m, &x| m.max(x));
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|x| x / z);
                }
                let mut o = out.slice_mut(cols);
                general_mat_mul(T::one(), &p, &vv.slice(cols), T::zero(), &mut o);
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// 3×3×3 convolution, padding 1; `x` is `voxels × c_in`, `w` is `27·c_in × c_out`, `b` is `1 × c_out`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: Conv3dGeom) -> Var {
        assert_eq!(self.shape(x), (geom.in_voxels(), geom.c_in), "conv3d: input shape");
        assert_eq!(self.shape(w), (geom.patch_len(), geom.c_out), "conv3d: weight shape");
        assert_eq!(self.shape(b), (1, geom.c_out), "conv3d: bias shape");
        let cols = geom.im2col(self.value(x));
        let value = cols.dot(self.value(w)) + self.value(b);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Conv3d { x, w, b, geom, cols }, rg)
    }

    /// Mean of squared differences over every element; a `1×1` node.
    pub fn mse(&mut self, pred: Var, target: Array2<T>) -> Var {
        assert_eq!(self.shape(pred), target.dim(), "mse: shape mismatch");
        let n = T::lit(target.len() as f64);
        let sq = self
            .value(pred)
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>();
        let rg = self.rg(pred);
        self.push(Array2::from_elem((1, 1), sq / n), Op::Mse(pred, target), rg)
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn acc(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar (`1×1`) node with seed gradient 1.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        Self::acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if rg(*b) {
                        Self::acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if rg(*a) {
                        Self::acc(&mut grads, *a, g.dot(val(*b)));
                    }
                    if rg(*b) {
                        Self::acc(&mut grads, *b, g.t().dot(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        Self::acc(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        Self::acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if rg(*row) {
                        Self::acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*a) {
                        Self::acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        Self::acc(&mut grads, *a, &g * val(*b));
                    }
                    if rg(*b) {
                        Self::acc(&mut grads, *b, &g * val(*a));
                    }
                }
                Op::Scale(a, c) => {
                    if rg(*a) {
                        Self::acc(&mut grads, *a, g * *c);
                    }
                }
                Op::Modulate { x, shift, scale } => {
                    if rg(*shift) {
                        Self::acc(&mut grads, *shift, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*scale) {
                        let gs = (&g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        Self::acc(&mut grads, *scale, gs);
                    }
                    if rg(*x) {
                        let one_plus = val(*scale).mapv(|s| T::one() + s);
                        Self::acc(&mut grads, *x, g * &one_plus);
                    }
                }
                Op::LayerNorm(a, inv) => {
                    if rg(*a) {
                        let y = &nodes[i].value;
                        let n = T::lit(y.ncols() as f64);
                        let mut dx = g;
                        for (r, (mut drow, yrow)) in dx.rows_mut().into_iter().zip(y.rows()).enumerate() {
                            let mean_g = drow.sum() / n;
                            let mean_gy = drow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                            let is = inv[r];
                            drow.zip_mut_with(&yrow, |d, &yv| *d = (*d - mean_g - yv * mean_gy) * is);
                        }
                        Self::acc(&mut grads, *a, dx);
                    }
                }
                Op::Silu(a) => {
                    if rg(*a) {
                        let mut dx = g;
                        dx.zip_mut_with(val(*a), |d, &x| {
                            let s = sigmoid(x);
                            *d *= s * (T::one() + x * (T::one() - s));
                        });
                        Self::acc(&mut grads, *a, dx);
                    }
                }
                Op::Gelu(a) => {
                    if rg(*a) {
                        let mut dx = g;
                        dx.zip_mut_with(val(*a), |d, &x| *d *= gelu_parts(x).1);
                        Self::acc(&mut grads, *a, dx);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (nq, d) = val(*q).dim();
                    let nk = val(*k).nrows();
                    let dh = d / heads;
                    let scale = T::lit(1.0 / (dh as f64).sqrt());
                    let mut dq = Array2::<T>::zeros((nq, d));
                    let mut dk = Array2::<T>::zeros((nk, d));
                    let mut dv = Array2::<T>::zeros((nk, d));
                    let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        if rg(*v) {
                            general_mat_mul(T::one(), &p.t(), &go, T::zero(), &mut dv.slice_mut(cols));
                        }
                        if rg(*q) || rg(*k) {
                            let mut dp = go.dot(&vv.slice(cols).t());
                            for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                                let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                                drow.zip_mut_with(&prow, |d, &pv| *d = pv * (*d - dot));
                            }
                            if rg(*q) {
                                general_mat_mul(scale, &dp, &kv.slice(cols), T::zero(), &mut dq.slice_mut(cols));
                            }
                            if rg(*k) {
                                general_mat_mul(scale, &dp.t(), &qv.slice(cols), T::zero(), &mut dk.slice_mut(cols));
                            }
                        }
                    }
                    if rg(*q) {
                        Self::acc(&mut grads, *q, dq);
                    }
                    if rg(*k) {
                        Self::acc(&mut grads, *k, dk);
                    }
                    if rg(*v) {
                        Self::acc(&mut grads, *v, dv);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = val(p).nrows();
                        if rg(p) {
                            Self::acc(&mut grads, p, g.slice(s![at..at + n, ..]).to_owned());
                        }
                        at += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    if rg(*a) {
                        let mut full = Array2::<T>::zeros(val(*a).dim());
                        full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                        Self::acc(&mut grads, *a, full);
                    }
                }
                Op::SliceCols(a, start) => {
                    if rg(*a) {
                        let mut full = Array2::<T>::zeros(val(*a).dim());
                        full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                        Self::acc(&mut grads, *a, full);
                    }
                }
                Op::Conv3d { x, w, b, geom, cols } => {
                    if rg(*b) {
                        Self::acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*w) {
                        Self::acc(&mut grads, *w, cols.t().dot(&g));
                    }
                    if rg(*x) {
                        let dcols = g.dot(&val(*w).t());
                        Self::acc(&mut grads, *x, geom.col2im(&dcols));
                    }
                }
                Op::Mse(pred, target) => {
                    if rg(*pred) {
                        let n = T::lit(target.len() as f64);
                        let c = g[[0, 0]] * T::lit(2.0) / n;
                        let d = (val(*pred) - target) * c;
                        Self::acc(&mut grads, *pred, d);
                    }
                }
            }
        }
        self.grads = grads;
    }
}
