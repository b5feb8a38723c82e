//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass (typically one
//! sample) as a node holding its value. [`Graph::backward`] walks the tape in
//! reverse and returns the gradient of a scalar node with respect to every
//! parameter of the borrowed [`ParamStore`]. Graphs are cheap and independent,
//! so data-parallel training builds one per sample and sums the results.

use super::array::Tensor;
use super::param::{Gradients, ParamId, ParamStore};
use super::real::{gemm, MatRef, Real};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Border handling of [`Graph::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Clamp to the nearest edge pixel; a constant map stays constant.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    /// Padding before (top/left) and after (bottom/right).
    pub pad: (usize, usize),
    pub groups: usize,
    pub mode: PadMode,
}

impl Conv2dSpec {
    /// Stride 1, output the same size as the input.
    pub fn same(kernel: usize) -> Self {
        let total = kernel - 1;
        Conv2dSpec { stride: 1, pad: (total / 2, total - total / 2), groups: 1, mode: PadMode::Zeros }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_mode(mut self, mode: PadMode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, T),
    AddScalar(Var),
    MulConst { a: Var, mask: Vec<T> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Maxout { a: Var, pick: Vec<u8> },
    Softmax { a: Var, inv_temp: T },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec, geom: ConvGeom, cols: Vec<T> },
    MaxPool2 { a: Var, argmax: Vec<usize> },
    RowMean(Var),
    RowMax { a: Var, argmax: Vec<usize> },
    Embedding { table: Var, index: usize },
    SliceCols { a: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Bce { p: Var, target: Vec<T> },
    Ce { p: Var, target: Vec<T> },
    SmoothL1(Var),
    Kl { p: Var, q: Var },
}

struct Node<T> {
    shape: Vec<usize>,
    /// Empty for parameters, whose values live in the store.
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Upper probability clamp. `1 − PROB_EPS` rounds to 1 in f32, so the gap
/// is at least the type's machine epsilon.
fn prob_upper<T: Real>() -> T {
    T::one() - T::from_f64(PROB_EPS).max(T::epsilon())
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        _ => {
            let c = shape[shape.len() - 1];
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph { store, nodes: Vec::with_capacity(256), params: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == data.len());
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(id) => self.store.value(id).data(),
            _ => &n.data,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Constant leaf; never receives gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, false)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        self.push(shape.to_vec(), data, Op::Input, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// the parameter's gradient accumulates in one buffer.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let shape = self.store.value(id).shape().to_vec();
        let v = self.push(shape, Vec::new(), Op::Param(id), true);
        self.params[id.0] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Var {
        let id = self.store.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = rows_cols(self.shape(a));
        let (br, bc) = rows_cols(self.shape(b));
        let ma = MatRef { data: self.value(a), rows: ar, cols: ac, trans: ta };
        let mb = MatRef { data: self.value(b), rows: br, cols: bc, trans: tb };
        let (m, k) = ma.dims();
        let (k2, n) = mb.dims();
        assert_eq!(k, k2, "matmul shape mismatch: {:?}{} x {:?}{}", self.shape(a), if ta { "ᵀ" } else { "" }, self.shape(b), if tb { "ᵀ" } else { "" });
        let mut out = vec![T::zero(); m * n];
        gemm(ma, mb, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, ng)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        assert_eq!(self.value(row).len(), c, "add_row width mismatch");
        let rv = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(self.shape(a).to_vec(), out, Op::AddRow { a, row }, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), ng)
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Var {
        assert_eq!(mask.len(), self.value(a).len(), "mask size mismatch");
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::MulConst { a, mask }, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    /// Pairwise max over the last dimension, halving it.
    pub fn maxout(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().expect("maxout on scalar");
        assert!(last % 2 == 0, "maxout needs an even last dimension, got {last}");
        let x = self.value(a);
        let mut out = Vec::with_capacity(x.len() / 2);
        let mut pick = Vec::with_capacity(x.len() / 2);
        for pair in x.chunks_exact(2) {
            if pair[1] > pair[0] {
                out.push(pair[1]);
                pick.push(1);
            } else {
                out.push(pair[0]);
                pick.push(0);
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = last / 2;
        let ng = self.ng(a);
        self.push(oshape, out, Op::Maxout { a, pick }, ng)
    }

    /// Row-wise `exp(x/τ) / Σ exp(x/τ)` over the last dimension.
    pub fn softmax(&mut self, a: Var, temperature: T) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        let inv = T::one() / temperature;
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = T::zero();
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = ((v - mx) * inv).exp();
                s += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= s;
            }
        }
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Softmax { a, inv_temp: inv }, ng)
    }

    // ---- convolution & pooling ------------------------------------------

    /// 2-D convolution. `x` is `[Cin, H, W]`, `w` is `[Cout, Cin/groups, kh, kw]`,
    /// optional bias `[Cout]`; returns `[Cout, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 3 && ws.len() == 4, "conv2d expects [C,H,W] input and [O,I,kh,kw] weight");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let g = spec.groups;
        assert!(cin % g == 0 && cout % g == 0 && cin / g == cig, "conv2d group/channel mismatch");
        let (pb, pa) = spec.pad;
        let ho = (h + pb + pa - kh) / spec.stride + 1;
        let wo = (wd + pb + pa - kw) / spec.stride + 1;
        let geom = ConvGeom { cin, h, w: wd, cout, kh, kw, ho, wo };
        let cols = im2col(self.value(x), &geom, &spec);
        let p = ho * wo;
        let kdim = cig * kh * kw;
        let cog = cout / g;
        let mut out = vec![T::zero(); cout * p];
        let wv = self.value(w);
        for gi in 0..g {
            let wg = &wv[gi * cog * kdim..(gi + 1) * cog * kdim];
            let cg = &cols[gi * kdim * p..(gi + 1) * kdim * p];
            gemm(MatRef::new(wg, cog, kdim), MatRef::new(cg, kdim, p), &mut out[gi * cog * p..(gi + 1) * cog * p], false);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), cout, "conv2d bias size mismatch");
            for (o, &bb) in out.chunks_exact_mut(p).zip(bv) {
                o.iter_mut().for_each(|v| *v += bb);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let keep = if self.ng(w) { cols } else { Vec::new() };
        self.push(vec![cout, ho, wo], out, Op::Conv2d { x, w, b, spec, geom, cols: keep }, ng)
    }

    /// 2×2 max pooling with stride 2 over `[C, H, W]` (odd edges dropped).
    pub fn max_pool2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "max_pool2 expects [C,H,W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(a);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = usize::MAX;
                    let mut bv = T::neg_infinity();
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ch * h * w + (2 * i + di) * w + 2 * j + dj;
                            if x[idx] > bv || best == usize::MAX {
                                bv = x[idx];
                                best = idx;
                            }
                        }
                    }
                    out.push(bv);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(a);
        self.push(vec![c, ho, wo], out, Op::MaxPool2 { a, argmax }, ng)
    }

    /// Mean over all trailing dimensions: `[C, ...] -> [C]` (global average pooling).
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let c = s[0];
        let per = s[1..].iter().product::<usize>().max(1);
        let inv = T::one() / T::from_f64(per as f64);
        let out = self.value(a).chunks_exact(per).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let ng = self.ng(a);
        self.push(vec![c], out, Op::RowMean(a), ng)
    }

    /// Max over all trailing dimensions: `[C, ...] -> [C]`.
    pub fn spatial_max(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let c = s[0];
        let per = s[1..].iter().product::<usize>().max(1);
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for (ci, ch) in self.value(a).chunks_exact(per).enumerate() {
            let (bi, bv) = ch.iter().enumerate().fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            out.push(bv);
            argmax.push(ci * per + bi);
        }
        let ng = self.ng(a);
        self.push(vec![c], out, Op::RowMax { a, argmax }, ng)
    }

    // ---- indexing & shape ------------------------------------------------

    /// Row `index` of a `[V, D]` table, as `[1, D]`.
    pub fn embedding(&mut self, table: Var, index: usize) -> Var {
        let (v, d) = rows_cols(self.shape(table));
        assert!(index < v, "embedding index {index} out of range {v}");
        let out = self.value(table)[index * d..(index + 1) * d].to_vec();
        let ng = self.ng(table);
        self.push(vec![1, d], out, Op::Embedding { table, index }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        assert!(start + len <= c, "slice out of range");
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        self.push(vec![r, len], out, Op::SliceCols { a, start }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.value(a).len(), "reshape size mismatch");
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        self.push(shape.to_vec(), out, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(vec![c, r], out, Op::Transpose(a), ng)
    }

    /// Stacks same-width rows into `[n, D]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let d = rows_cols(self.shape(parts[0])).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            assert_eq!(c, d, "concat_rows width mismatch");
            out.extend_from_slice(self.value(p));
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).to_vec();
        self.push(self.shape(a).to_vec(), out, Op::Input, false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    // ---- losses -----------------------------------------------------------

    /// `Σ_n −(t_n log p_n + (1 − t_n) log(1 − p_n))` with clamped `p`.
    pub fn bce(&mut self, p: Var, target: &[T]) -> Var {
        assert_eq!(self.value(p).len(), target.len(), "bce size mismatch");
        let eps = T::from_f64(PROB_EPS);
        let hi = prob_upper::<T>();
        let s = self
            .value(p)
            .iter()
            .zip(target)
            .map(|(&pv, &t)| {
                let pc = pv.max(eps).min(hi);
                -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln())
            })
            .sum();
        let ng = self.ng(p);
        self.push(vec![1], vec![s], Op::Bce { p, target: target.to_vec() }, ng)
    }

    /// Cross entropy `−Σ t log p` against a target distribution.
    pub fn ce(&mut self, p: Var, target: &[T]) -> Var {
        assert_eq!(self.value(p).len(), target.len(), "ce size mismatch");
        let eps = T::from_f64(PROB_EPS);
        let s = self.value(p).iter().zip(target).map(|(&pv, &t)| -(t * pv.max(eps).ln())).sum();
        let ng = self.ng(p);
        self.push(vec![1], vec![s], Op::Ce { p, target: target.to_vec() }, ng)
    }

    /// `−log p[index]` (cross entropy against a one-hot target).
    pub fn nll(&mut self, p: Var, index: usize) -> Var {
        let mut t = vec![T::zero(); self.value(p).len()];
        t[index] = T::one();
        self.ce(p, &t)
    }

    /// Elementwise smooth L1: `0.5x²` for `|x| < 1`, else `|x| − 0.5`.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let half = T::from_f64(0.5);
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x.abs() < T::one() { half * x * x } else { x.abs() - half })
            .collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::SmoothL1(a), ng)
    }

    /// `KL(p ‖ q) = Σ p log(p / q)` with both sides clamped.
    pub fn kl(&mut self, p: Var, q: Var) -> Var {
        assert_eq!(self.value(p).len(), self.value(q).len(), "kl size mismatch");
        let eps = T::from_f64(PROB_EPS);
        let s = self
            .value(p)
            .iter()
            .zip(self.value(q))
            .map(|(&pv, &qv)| {
                let pc = pv.max(eps);
                pc * (pc.ln() - qv.max(eps).ln())
            })
            .sum();
        let ng = self.ng(p) || self.ng(q);
        self.push(vec![1], vec![s], Op::Kl { p, q }, ng)
    }

    // ---- backward -----------------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        self.backward_scaled(loss, T::one())
    }

    /// As [`Graph::backward`] with the seed gradient set to `seed`.
    pub fn backward_scaled(&self, loss: Var, seed: T) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads = Gradients::zeros_like(self.store);
        if !self.ng(loss) {
            return grads;
        }
        let mut g: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut g, &mut grads);
        }
        grads
    }

    fn acc<'a>(&self, g: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(g[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], g: &mut [Option<Vec<T>>], out: &mut Gradients<T>) {
        let y = &node.data;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, gy),
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = rows_cols(self.shape(*a));
                let (br, bc) = rows_cols(self.shape(*b));
                let (m, n) = (node.shape[0], node.shape[1]);
                let dy = MatRef::new(gy, m, n);
                let ma = MatRef { data: self.value(*a), rows: ar, cols: ac, trans: *ta };
                let mb = MatRef { data: self.value(*b), rows: br, cols: bc, trans: *tb };
                if let Some(ga) = self.acc(g, *a) {
                    if *ta {
                        gemm(mb, dy.t(), ga, true);
                    } else {
                        gemm(dy, mb.t(), ga, true);
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    if *tb {
                        gemm(dy.t(), ma, gb, true);
                    } else {
                        gemm(ma.t(), dy, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(g, v) {
                        ga.iter_mut().zip(gy).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gy).for_each(|(x, &d)| *x += d);
                }
                if let Some(gb) = self.acc(g, *b) {
                    gb.iter_mut().zip(gy).for_each(|(x, &d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(g, *a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(gy).zip(bv) {
                        *x += d * o;
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    for ((x, &d), &o) in gb.iter_mut().zip(gy).zip(av) {
                        *x += d * o;
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gy).for_each(|(x, &d)| *x += d);
                }
                let c = self.value(*row).len();
                if let Some(gr) = self.acc(g, *row) {
                    for chunk in gy.chunks_exact(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gy).for_each(|(x, &d)| *x += d * *s);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gy).for_each(|(x, &d)| *x += d);
                }
            }
            Op::MulConst { a, mask } => {
                if let Some(ga) = self.acc(g, *a) {
                    for ((x, &d), &m) in ga.iter_mut().zip(gy).zip(mask) {
                        *x += d * m;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    for ((x, &d), &s) in ga.iter_mut().zip(gy).zip(y) {
                        *x += d * s * (T::one() - s);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    for ((x, &d), &t) in ga.iter_mut().zip(gy).zip(y) {
                        *x += d * (T::one() - t * t);
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(g, *a) {
                    for ((x, &d), &v) in ga.iter_mut().zip(gy).zip(av) {
                        if v > T::zero() {
                            *x += d;
                        }
                    }
                }
            }
            Op::Maxout { a, pick } => {
                if let Some(ga) = self.acc(g, *a) {
                    for (i, (&d, &p)) in gy.iter().zip(pick).enumerate() {
                        ga[2 * i + p as usize] += d;
                    }
                }
            }
            Op::Softmax { a, inv_temp } => {
                let c = rows_cols(&node.shape).1;
                if let Some(ga) = self.acc(g, *a) {
                    for ((gr, yr), dr) in ga.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(gy.chunks_exact(c)) {
                        let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for ((x, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += *inv_temp * p * (d - dot);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, spec, geom, cols } => {
                let p = geom.ho * geom.wo;
                let gcount = spec.groups;
                let cig = geom.cin / gcount;
                let kdim = cig * geom.kh * geom.kw;
                let cog = geom.cout / gcount;
                if let Some(b) = b {
                    if let Some(gb) = self.acc(g, *b) {
                        for (x, ch) in gb.iter_mut().zip(gy.chunks_exact(p)) {
                            *x += ch.iter().copied().sum();
                        }
                    }
                }
                if let Some(gw) = self.acc(g, *w) {
                    for gi in 0..gcount {
                        let dy = &gy[gi * cog * p..(gi + 1) * cog * p];
                        let cg = &cols[gi * kdim * p..(gi + 1) * kdim * p];
                        gemm(MatRef::new(dy, cog, p), MatRef::new(cg, kdim, p).t(), &mut gw[gi * cog * kdim..(gi + 1) * cog * kdim], true);
                    }
                }
                if self.ng(*x) {
                    let wv = self.value(*w);
                    let mut dcols = vec![T::zero(); gcount * kdim * p];
                    for gi in 0..gcount {
                        let dy = &gy[gi * cog * p..(gi + 1) * cog * p];
                        let wg = &wv[gi * cog * kdim..(gi + 1) * cog * kdim];
                        gemm(MatRef::new(wg, cog, kdim).t(), MatRef::new(dy, cog, p), &mut dcols[gi * kdim * p..(gi + 1) * kdim * p], false);
                    }
                    let gx = self.acc(g, *x).expect("needs grad");
                    col2im(&dcols, gx, geom, spec);
                }
            }
            Op::MaxPool2 { a, argmax } => {
                if let Some(ga) = self.acc(g, *a) {
                    for (&d, &i) in gy.iter().zip(argmax) {
                        ga[i] += d;
                    }
                }
            }
            Op::RowMean(a) => {
                let per = self.value(*a).len() / gy.len();
                let inv = T::one() / T::from_f64(per as f64);
                if let Some(ga) = self.acc(g, *a) {
                    for (ch, &d) in ga.chunks_exact_mut(per).zip(gy) {
                        ch.iter_mut().for_each(|x| *x += d * inv);
                    }
                }
            }
            Op::RowMax { a, argmax } => {
                if let Some(ga) = self.acc(g, *a) {
                    for (&d, &i) in gy.iter().zip(argmax) {
                        ga[i] += d;
                    }
                }
            }
            Op::Embedding { table, index } => {
                let d = gy.len();
                if let Some(gt) = self.acc(g, *table) {
                    gt[index * d..(index + 1) * d].iter_mut().zip(gy).for_each(|(x, &v)| *x += v);
                }
            }
            Op::SliceCols { a, start } => {
                let c = rows_cols(self.shape(*a)).1;
                let len = node.shape[1];
                if let Some(ga) = self.acc(g, *a) {
                    for (i, dr) in gy.chunks_exact(len).enumerate() {
                        ga[i * c + start..i * c + start + len].iter_mut().zip(dr).for_each(|(x, &v)| *x += v);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().zip(gy).for_each(|(x, &d)| *x += d);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(self.shape(*a));
                if let Some(ga) = self.acc(g, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gy[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(g, p) {
                        gp.iter_mut().zip(&gy[off..off + n]).for_each(|(x, &d)| *x += d);
                    }
                    off += n;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    ga.iter_mut().for_each(|x| *x += gy[0]);
                }
            }
            Op::Bce { p, target } => {
                let eps = T::from_f64(PROB_EPS);
                let hi = prob_upper::<T>();
                let pv = self.value(*p);
                if let Some(gp) = self.acc(g, *p) {
                    for ((x, &v), &t) in gp.iter_mut().zip(pv).zip(target) {
                        if v > eps && v < hi {
                            *x += gy[0] * (-t / v + (T::one() - t) / (T::one() - v));
                        }
                    }
                }
            }
            Op::Ce { p, target } => {
                let eps = T::from_f64(PROB_EPS);
                let pv = self.value(*p);
                if let Some(gp) = self.acc(g, *p) {
                    for ((x, &v), &t) in gp.iter_mut().zip(pv).zip(target) {
                        if v > eps {
                            *x -= gy[0] * t / v;
                        }
                    }
                }
            }
            Op::SmoothL1(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(g, *a) {
                    for ((x, &d), &v) in ga.iter_mut().zip(gy).zip(av) {
                        *x += d * if v.abs() < T::one() { v } else { v.signum() };
                    }
                }
            }
            Op::Kl { p, q } => {
                let eps = T::from_f64(PROB_EPS);
                let (pv, qv) = (self.value(*p), self.value(*q));
                if let Some(gp) = self.acc(g, *p) {
                    for ((x, &a), &b) in gp.iter_mut().zip(pv).zip(qv) {
                        if a > eps {
                            *x += gy[0] * (a.ln() - b.max(eps).ln() + T::one());
                        }
                    }
                }
                if let Some(gq) = self.acc(g, *q) {
                    for ((x, &a), &b) in gq.iter_mut().zip(pv).zip(qv) {
                        if b > eps {
                            *x -= gy[0] * a.max(eps) / b;
                        }
                    }
                }
            }
        }
    }
}

fn padded_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zeros => None,
        PadMode::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
    }
}

/// Unfolds `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]` (grouped channels are
/// contiguous, so group `g` occupies a contiguous row block).
fn im2col<T: Real>(x: &[T], g: &ConvGeom, spec: &Conv2dSpec) -> Vec<T> {
    let p = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * g.kh * g.kw * p];
    let pad = spec.pad.0 as isize;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oi in 0..g.ho {
                    let ii = (oi * spec.stride + ki) as isize - pad;
                    let Some(si) = padded_index(ii, g.h, spec.mode) else { continue };
                    for oj in 0..g.wo {
                        let jj = (oj * spec.stride + kj) as isize - pad;
                        if let Some(sj) = padded_index(jj, g.w, spec.mode) {
                            cols[row + oi * g.wo + oj] = plane[si * g.w + sj];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &[T], gx: &mut [T], g: &ConvGeom, spec: &Conv2dSpec) {
    let p = g.ho * g.wo;
    let pad = spec.pad.0 as isize;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oi in 0..g.ho {
                    let ii = (oi * spec.stride + ki) as isize - pad;
                    let Some(si) = padded_index(ii, g.h, spec.mode) else { continue };
                    for oj in 0..g.wo {
                        let jj = (oj * spec.stride + kj) as isize - pad;
                        if let Some(sj) = padded_index(jj, g.w, spec.mode) {
                            gx[c * g.h * g.w + si * g.w + sj] += dcols[row + oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}
