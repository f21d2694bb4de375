//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every operation appends a node holding its value and enough context to
//! push gradients back to its inputs. Tensors are `C x H x W` feature maps or
//! `rows x cols` matrices; there is no batch axis, batches are handled by
//! running one tape per sample and summing parameter gradients.

use super::tensor::{gemm, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter `{name}`");
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        /// im2col buffer; empty for pointwise convolutions, which read `x` directly.
        cols: Vec<T>,
    },
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxRows(Var),
    Reshape(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    WeightedSse {
        x: Var,
        target: Vec<T>,
        weights: Vec<T>,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value gradients do not flow into.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A value whose gradient is tracked and can be read after `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv input must be C x H x W");
        assert_eq!(ws.len(), 4, "conv weight must be O x C x kh x kw");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, wc, "conv channel mismatch");
        let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        let pointwise = kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0;
        let cols = if pointwise {
            Vec::new()
        } else {
            im2col(self.value(x).data(), c, h, wd, kh, kw, spec, ho, wo)
        };
        let mut out = vec![T::zero(); o * ho * wo];
        {
            let src = if pointwise { self.value(x).data() } else { &cols[..] };
            gemm(false, false, o, ho * wo, c * kh * kw, T::one(), self.value(w).data(), src, T::zero(), &mut out);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o, "conv bias mismatch");
            for (row, &bv) in out.chunks_mut(ho * wo).zip(bias) {
                for v in row {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(&[o, ho, wo], out),
            Op::Conv { x, w, b, spec, cols },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * s).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&shape, data), Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&shape, data), Op::Relu(a), rg)
    }

    /// Matrix product of 2-D values, optionally transposing either operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (asr, bsr) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(asr.len() == 2 && bsr.len() == 2, "matmul needs 2-D operands");
        let (m, k) = if ta { (asr[1], asr[0]) } else { (asr[0], asr[1]) };
        let (k2, n) = if tb { (bsr[1], bsr[0]) } else { (bsr[0], bsr[1]) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        gemm(ta, tb, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    /// Softmax over the last axis of a 2-D value (each row sums to one).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "softmax_rows needs a 2-D value");
        let cols = shape[1];
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&shape, data), Op::SoftmaxRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Nearest-neighbour upsampling of a `C x H x W` map by an integer factor.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let srow = &src[(ch * h + y / factor) * w..][..w];
                let drow = &mut out[(ch * ho + y) * wo..][..wo];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = srow[x / factor];
                }
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[c, ho, wo], out), Op::Upsample { x: a, factor }, rg)
    }

    /// Block averaging of a `C x H x W` map (area interpolation for integer factors).
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % factor == 0 && w % factor == 0, "avg_pool factor must divide the map");
        let (ho, wo) = (h / factor, w / factor);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); c * ho * wo];
        let inv = T::one() / T::from_usize(factor * factor).unwrap();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * ho + y / factor) * wo + x / factor] += src[(ch * h + y) * w + x];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[c, ho, wo], out), Op::AvgPool { x: a, factor }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0], "concat_cols row mismatch");
        let (r, n1, n2) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(r * (n1 + n2));
        for i in 0..r {
            out.extend_from_slice(&self.value(a).data()[i * n1..(i + 1) * n1]);
            out.extend_from_slice(&self.value(b).data()[i * n2..(i + 1) * n2]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[r, n1 + n2], out), Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(s.len() == 2 && start + len <= s[1], "slice_cols out of range");
        let (r, n) = (s[0], s[1]);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(a).data()[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[r, len], out), Op::SliceCols { x: a, start }, rg)
    }

    /// `sum_i w_i x_i`, a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Var {
        assert_eq!(weights.len(), self.value(a).len(), "weighted_sum length mismatch");
        let s: T = self.value(a).data().iter().zip(&weights).map(|(&x, &w)| x * w).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::WeightedSum { x: a, weights }, rg)
    }

    /// `sum_i w_i (x_i - t_i)^2 / norm`, a scalar.
    pub fn weighted_sse(&mut self, a: Var, target: Vec<T>, weights: Vec<T>, norm: T) -> Var {
        let n = self.value(a).len();
        assert!(target.len() == n && weights.len() == n, "weighted_sse length mismatch");
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(target.iter().zip(&weights))
            .map(|(&x, (&t, &w))| w * (x - t) * (x - t))
            .sum();
        let rg = self.rg(a);
        self.push(
            Tensor::scalar(s / norm),
            Op::WeightedSse {
                x: a,
                target,
                weights,
                norm,
            },
            rg,
        )
    }

    /// Activation pattern of every ReLU on the tape, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .flat_map(|n| n.value.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Conv { x, w, b, spec, cols } => {
                    self.conv_backward(&g, *x, *w, *b, *spec, cols, &mut grads);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |d| add_into(d, &g));
                    self.accumulate(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.accumulate(&mut grads, *a, |d| {
                        for (d, &gv) in d.iter_mut().zip(&g) {
                            *d += gv * s;
                        }
                    });
                }
                Op::Relu(a) => {
                    let y = node.value.data();
                    self.accumulate(&mut grads, *a, |d| {
                        for ((d, &gv), &yv) in d.iter_mut().zip(&g).zip(y) {
                            if yv > T::zero() {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (ta, tb) = (*ta, *tb);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = if ta {
                        (av.shape()[1], av.shape()[0])
                    } else {
                        (av.shape()[0], av.shape()[1])
                    };
                    let n = node.value.shape()[1];
                    self.accumulate(&mut grads, *a, |d| {
                        if ta {
                            // A stored k x m: dA = op(B) * G^T
                            gemm(tb, true, k, m, n, T::one(), bv.data(), &g, T::one(), d);
                        } else {
                            // dA = G * op(B)^T
                            gemm(false, !tb, m, k, n, T::one(), &g, bv.data(), T::one(), d);
                        }
                    });
                    self.accumulate(&mut grads, *b, |d| {
                        if tb {
                            // B stored n x k: dB = G^T * op(A)
                            gemm(true, ta, n, k, m, T::one(), &g, av.data(), T::one(), d);
                        } else {
                            // dB = op(A)^T * G
                            gemm(!ta, false, k, n, m, T::one(), av.data(), &g, T::one(), d);
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let cols = node.value.shape()[1];
                    self.accumulate(&mut grads, *a, |d| {
                        for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                            for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *dv += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::Reshape(a) => self.accumulate(&mut grads, *a, |d| add_into(d, &g)),
                Op::Upsample { x, factor } => {
                    let f = *factor;
                    let s = self.shape(*x).to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (ho, wo) = (h * f, w * f);
                    self.accumulate(&mut grads, *x, |d| {
                        for ch in 0..c {
                            for y in 0..ho {
                                for xo in 0..wo {
                                    d[(ch * h + y / f) * w + xo / f] += g[(ch * ho + y) * wo + xo];
                                }
                            }
                        }
                    });
                }
                Op::AvgPool { x, factor } => {
                    let f = *factor;
                    let s = self.shape(*x).to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (ho, wo) = (h / f, w / f);
                    let inv = T::one() / T::from_usize(f * f).unwrap();
                    self.accumulate(&mut grads, *x, |d| {
                        for ch in 0..c {
                            for y in 0..h {
                                for xi in 0..w {
                                    d[(ch * h + y) * w + xi] += g[(ch * ho + y / f) * wo + xi / f] * inv;
                                }
                            }
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let n1 = self.shape(*a)[1];
                    let n2 = self.shape(*b)[1];
                    let n = n1 + n2;
                    self.accumulate(&mut grads, *a, |d| {
                        for (drow, grow) in d.chunks_mut(n1).zip(g.chunks(n)) {
                            add_into(drow, &grow[..n1]);
                        }
                    });
                    self.accumulate(&mut grads, *b, |d| {
                        for (drow, grow) in d.chunks_mut(n2).zip(g.chunks(n)) {
                            add_into(drow, &grow[n1..]);
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let n = self.shape(*x)[1];
                    let len = node.value.shape()[1];
                    let start = *start;
                    self.accumulate(&mut grads, *x, |d| {
                        for (drow, grow) in d.chunks_mut(n).zip(g.chunks(len)) {
                            add_into(&mut drow[start..start + len], grow);
                        }
                    });
                }
                Op::WeightedSum { x, weights } => {
                    let g0 = g[0];
                    self.accumulate(&mut grads, *x, |d| {
                        for (dv, &w) in d.iter_mut().zip(weights) {
                            *dv += g0 * w;
                        }
                    });
                }
                Op::WeightedSse {
                    x,
                    target,
                    weights,
                    norm,
                } => {
                    let coef = g[0] * T::from_f64_lossy(2.0) / *norm;
                    let xv = self.value(*x).data();
                    self.accumulate(&mut grads, *x, |d| {
                        for (((dv, &xi), &ti), &wi) in d.iter_mut().zip(xv).zip(target).zip(weights) {
                            if wi != T::zero() {
                                *dv += coef * wi * (xi - ti);
                            }
                        }
                    });
                }
            }
            grads[i] = Some(g);
        }

        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &[T],
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cols: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let ckk = c * kh * kw;
        let p = g.len() / o;
        let pointwise = cols.is_empty();
        let src = if pointwise { self.value(x).data() } else { cols };

        self.accumulate(grads, w, |d| gemm(false, true, o, ckk, p, T::one(), g, src, T::one(), d));
        if let Some(b) = b {
            self.accumulate(grads, b, |d| {
                for (dv, row) in d.iter_mut().zip(g.chunks(p)) {
                    *dv += row.iter().copied().sum::<T>();
                }
            });
        }
        if self.rg(x) {
            let wv = self.value(w).data();
            if pointwise {
                self.accumulate(grads, x, |d| gemm(true, false, ckk, p, o, T::one(), wv, g, T::one(), d));
            } else {
                let mut dcols = vec![T::zero(); ckk * p];
                gemm(true, false, ckk, p, o, T::one(), wv, g, T::zero(), &mut dcols);
                let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
                let wo = p / ho;
                self.accumulate(grads, x, |d| col2im(&dcols, d, c, h, wd, kh, kw, spec, ho, wo));
            }
        }
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (dv, &gv) in d.iter_mut().zip(g) {
        *dv += gv;
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * kh * kw * ho * wo];
    let (s, pad) = (spec.stride as isize, spec.pad as isize);
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..][..w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
) {
    let (s, pad) = (spec.stride as isize, spec.pad as isize);
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dx[(ch * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = ox as isize * s + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + eps;
            let fp = f(&xp);
            xp[i] = orig - eps;
            let fm = f(&xp);
            xp[i] = orig;
            out.push((fp - fm) / (2.0 * eps));
        }
        out
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * a).sin()).collect()
    }

    /// Builds a scalar from an input tensor through `body`, and compares the
    /// tape gradient with central differences.
    fn check(shape: &[usize], body: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let store = ParamStore::<f64>::new();
        let x0 = seq(shape.iter().product(), 0.731);
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new(&store);
            let xv = tape.input(Tensor::from_vec(shape, x.to_vec()));
            let y = body(&mut tape, xv);
            let n = tape.value(y).len();
            let loss = tape.weighted_sum(y, seq(n, 1.37));
            let g = tape.backward(loss);
            (tape.value(loss).item(), g.wrt(xv).map(|s| s.to_vec()).unwrap_or(vec![0.0; x.len()]))
        };
        let (_, analytic) = eval(&x0);
        let numeric = finite_diff(&|x| eval(x).0, &x0, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(&[3, 2, 3, 3], seq(54, 0.3)));
        let b = store.add("b", Tensor::from_vec(&[3], seq(3, 0.5)));
        for spec in [ConvSpec { stride: 1, pad: 1 }, ConvSpec { stride: 2, pad: 1 }, ConvSpec { stride: 2, pad: 0 }] {
            let store = store.clone();
            let st = &store;
            let eval = move |x: &[f64]| {
                let mut tape = Tape::new(st);
                let xv = tape.input(Tensor::from_vec(&[2, 5, 6], x.to_vec()));
                let (wv, bv) = (tape.param(w), tape.param(b));
                let y = tape.conv2d(xv, wv, Some(bv), spec);
                let n = tape.value(y).len();
                let loss = tape.weighted_sum(y, seq(n, 0.9));
                let g = tape.backward(loss);
                (tape.value(loss).item(), g.wrt(xv).unwrap().to_vec(), g.param(w).unwrap().to_vec())
            };
            let x0 = seq(60, 0.41);
            let (_, gx, gw) = eval(&x0);
            let nx = finite_diff(&|x| eval(x).0, &x0, 1e-6);
            for (a, n) in gx.iter().zip(&nx) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
            // weight gradient through a perturbed store
            let w0 = store.get(w).data().to_vec();
            let fw = |wd: &[f64]| {
                let mut s2 = store.clone();
                *s2.get_mut(w) = Tensor::from_vec(&[3, 2, 3, 3], wd.to_vec());
                let mut tape = Tape::new(&s2);
                let xv = tape.constant(Tensor::from_vec(&[2, 5, 6], x0.clone()));
                let (wv, bv) = (tape.param(w), tape.param(b));
                let y = tape.conv2d(xv, wv, Some(bv), spec);
                let n = tape.value(y).len();
                let loss = tape.weighted_sum(y, seq(n, 0.9));
                tape.value(loss).item()
            };
            let nw = finite_diff(&fw, &w0, 1e-6);
            for (a, n) in gw.iter().zip(&nw) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn pointwise_conv_gradients() {
        check(&[3, 2, 3], |t, x| {
            let w = t.constant(Tensor::from_vec(&[4, 3, 1, 1], seq(12, 0.3)));
            t.conv2d(x, w, None, ConvSpec { stride: 1, pad: 0 })
        });
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(&[4, 3, 1, 1], seq(12, 0.3)));
        let x0 = seq(18, 0.2);
        let f = |wd: &[f64]| {
            let mut s2 = store.clone();
            *s2.get_mut(w) = Tensor::from_vec(&[4, 3, 1, 1], wd.to_vec());
            let mut tape = Tape::new(&s2);
            let x = tape.constant(Tensor::from_vec(&[3, 2, 3], x0.clone()));
            let wv = tape.param(w);
            let y = tape.conv2d(x, wv, None, ConvSpec { stride: 1, pad: 0 });
            let l = tape.weighted_sum(y, seq(24, 1.1));
            (tape.value(l).item(), tape.backward(l).param(w).unwrap().to_vec())
        };
        let w0 = store.get(w).data().to_vec();
        let (_, gw) = f(&w0);
        let nw = finite_diff(&|wd| f(wd).0, &w0, 1e-6);
        for (a, n) in gw.iter().zip(&nw) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        check(&[2, 4, 4], |t, x| {
            let a = t.relu(x);
            let b = t.scale(a, 1.7);
            t.add(b, x)
        });
        check(&[2, 4, 4], |t, x| t.avg_pool(x, 2));
        check(&[2, 2, 3], |t, x| t.upsample(x, 2));
        check(&[3, 4], |t, x| {
            let s = t.slice_cols(x, 1, 2);
            let c = t.concat_cols(x, s);
            t.softmax_rows(c)
        });
    }

    #[test]
    fn matmul_gradients_all_transposes() {
        // x is 3 x 4; the other operand is shaped so the product is defined.
        for ta in [false, true] {
            for tb in [false, true] {
                check(&[3, 4], move |t, x| {
                    let k = if ta { 3 } else { 4 };
                    let b = t.constant(Tensor::from_vec(&(if tb { [2, k] } else { [k, 2] }), seq(2 * k, 0.77)));
                    t.matmul(x, b, ta, tb)
                });
                check(&[3, 4], move |t, x| {
                    let k = if tb { 4 } else { 3 };
                    let a = t.constant(Tensor::from_vec(&(if ta { [k, 2] } else { [2, k] }), seq(2 * k, 0.53)));
                    t.matmul(a, x, ta, tb)
                });
            }
        }
        check(&[3, 3], |t, x| {
            let y = t.matmul(x, x, false, true);
            t.matmul(y, x, true, false)
        });
    }

    #[test]
    fn weighted_sse_gradient() {
        check(&[2, 3], |t, x| {
            let sse = t.weighted_sse(x, seq(6, 0.2), seq(6, 0.5).iter().map(|v| v.abs()).collect(), 3.0);
            t.scale(sse, 2.0)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = ParamStore::<f64>::new();
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::from_vec(&[2, 2], vec![3f64.ln(), 0.0, 5.0, 5.0]));
        let s = t.softmax_rows(x);
        let v = t.value(s).data();
        assert!((v[0] - 0.75).abs() < 1e-15 && (v[1] - 0.25).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.5, 0.5]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let store = ParamStore::<f64>::new();
        let mut t = Tape::new(&store);
        let c = t.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let x = t.input(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let y = t.add(c, x);
        let l = t.weighted_sum(y, vec![1.0, 1.0]);
        let g = t.backward(l);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0]);
    }
}
