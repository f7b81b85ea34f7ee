//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every node that depends on a gradient-carrying leaf.
//!
//! Everything runs in `f64` on a single thread, so two identical programs
//! produce bit-identical values and gradients.

mod kernels;

use std::rc::Rc;

pub use kernels::Padding;
pub(crate) use kernels::{reflect_index, ConvGeom, FixedFilter, WarpMap};
use kernels::ConvGrads;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    ChannelScale(Var, Var),
    SpatialScale(Var, Var),
    SoftmaxRows(Var),
    EntropyRows(Var),
    Transpose(Var),
    Pick(Var, Vec<usize>),
    WeightedSum(Vec<Var>, Var),
    Filter(Var, Rc<FixedFilter>),
    Warp(Var, Rc<WarpMap>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to the recorded leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected a scalar node");
        t.data()[0]
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.derived(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.derived(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.derived(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x / y);
        self.derived(t, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.derived(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.derived(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.derived(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.derived(t, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.derived(t, Op::Abs(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.derived(t, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.derived(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        self.derived(t, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        self.derived(t, Op::Reshape(a), &[a])
    }

    /// Stride-1 "same" convolution with zero padding.
    ///
    /// `x` is `[Cin, H, W]`, `w` is `[Cout, Cin, k, k]` with odd `k`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k]");
        assert_eq!(ws[1], cin, "conv input channels mismatch: {:?} vs {}", ws, cin);
        assert_eq!(ws[2], ws[3]);
        assert!(ws[2] % 2 == 1, "conv kernels must be odd");
        let cout = ws[0];
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k: ws[2],
            dil: dilation.max(1),
        };
        let bias = b.map(|b| {
            assert_eq!(self.shape(b), [cout]);
            self.value(b).data()
        });
        let out = kernels::conv2d_forward(self.value(x).data(), geom, self.value(w).data(), bias, cout);
        let t = Tensor::new(&[cout, h, wd], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.derived(t, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Per-channel normalization over the spatial extent with affine `gamma`, `beta` of shape `[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let hw = h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; c * hw];
        let mut means = Vec::with_capacity(c);
        let mut invs = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &xv[ch * hw..(ch + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(plane) {
                *o = gv[ch] * (v - mean) * inv + bv[ch];
            }
            means.push(mean);
            invs.push(inv);
        }
        let t = Tensor::new(&[c, h, w], out);
        self.derived(
            t,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: invs,
            },
            &[x, gamma, beta],
        )
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing shape mismatch");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(&shape, data);
        self.derived(t, Op::Concat(parts.to_vec()), parts)
    }

    /// `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(&[c], data);
        self.derived(t, Op::GlobalAvgPool(x), &[x])
    }

    /// `x[c, h, w] * gate[c]`.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.shape(gate), [c]);
        let hw = h * w;
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i / hw])
            .collect();
        let t = Tensor::new(&[c, h, w], data);
        self.derived(t, Op::ChannelScale(x, gate), &[x, gate])
    }

    /// `x[c, h, w] * mask[0, h, w]`.
    pub fn spatial_scale(&mut self, x: Var, mask: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.shape(mask), [1, h, w]);
        let hw = h * w;
        let m = self.value(mask).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * m[i % hw])
            .collect();
        let t = Tensor::new(&[c, h, w], data);
        self.derived(t, Op::SpatialScale(x, mask), &[x, mask])
    }

    /// Row-wise softmax of a `[R, K]` tensor.
    pub fn softmax_rows(&mut self, logits: Var) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2);
        let data = softmax_rows(self.value(logits).data(), s[1]);
        let t = Tensor::new(&s, data);
        self.derived(t, Op::SoftmaxRows(logits), &[logits])
    }

    /// Sum over rows of the Shannon entropy (natural log) of `softmax(row)`.
    pub fn entropy_rows(&mut self, logits: Var) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2);
        let total = self
            .value(logits)
            .data()
            .chunks(s[1])
            .map(|row| row_entropy(row).0)
            .sum();
        self.derived(Tensor::scalar(total), Op::EntropyRows(logits), &[logits])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.derived(Tensor::new(&[c, r], data), Op::Transpose(a), &[a])
    }

    /// Gather flat elements into a 1-D tensor.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a).data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(&[indices.len()], data);
        self.derived(t, Op::Pick(a, indices.to_vec()), &[a])
    }

    /// `sum_i weights[i] * terms[i]` for same-shaped `terms` and a 1-D `weights`.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: Var) -> Var {
        assert!(!terms.is_empty());
        assert_eq!(self.shape(weights), [terms.len()]);
        let shape = self.shape(terms[0]).to_vec();
        let mut acc = Tensor::zeros(&shape);
        let wv = self.value(weights).data().to_vec();
        for (&t, &wt) in terms.iter().zip(&wv) {
            let v = self.value(t);
            assert_eq!(v.shape(), &shape[..], "weighted_sum shape mismatch");
            for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                *a += wt * b;
            }
        }
        let mut inputs = terms.to_vec();
        inputs.push(weights);
        self.derived(acc, Op::WeightedSum(terms.to_vec(), weights), &inputs)
    }

    /// Depthwise convolution of every channel with one fixed `k x k` kernel.
    pub fn filter(&mut self, x: Var, kernel: &[f64], k: usize, padding: Padding) -> Var {
        let (c, h, w) = self.value(x).chw();
        let f = FixedFilter::new(kernel, k, padding, h, w);
        let out = f.forward(self.value(x).data(), c);
        let t = Tensor::new(&[c, f.out_h, f.out_w], out);
        self.derived(t, Op::Filter(x, Rc::new(f)), &[x])
    }

    /// Bilinear backward warp: `out(p) = x(p + flow(p))`, samples clamped to the border.
    /// `flow` is `[2, H, W]` (horizontal, vertical) and is treated as a constant.
    pub fn warp(&mut self, x: Var, flow: &Tensor) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(flow.shape(), [2, h, w]);
        let map = WarpMap::new(flow.data(), h, w);
        let out = map.forward(self.value(x).data(), c);
        let t = Tensor::new(&[c, h, w], out);
        self.derived(t, Op::Warp(x, Rc::new(map)), &[x])
    }

    /// Gradients of the scalar `root` with respect to every gradient-carrying node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.shape(v);
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    fn acc_map(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(d) = self.slot(grads, v) {
            for (i, (d, &gv)) in d.iter_mut().zip(g).enumerate() {
                *d += f(i, gv);
            }
        }
    }

    fn propagate(&self, i: usize, gt: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gt.data();
        let out = self.nodes[i].value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, gv| gv);
                self.acc_map(grads, *b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, gv| gv);
                self.acc_map(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc_map(grads, *a, g, |j, gv| gv * bv[j]);
                self.acc_map(grads, *b, g, |j, gv| gv * av[j]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc_map(grads, *a, g, |j, gv| gv / bv[j]);
                self.acc_map(grads, *b, g, |j, gv| -gv * av[j] / (bv[j] * bv[j]));
            }
            Op::Scale(a, c) => self.acc_map(grads, *a, g, |_, gv| gv * c),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc_map(grads, *a, g, |_, gv| gv),
            Op::Relu(a) => {
                let av = val(*a);
                self.acc_map(grads, *a, g, |j, gv| if av[j] > 0.0 { gv } else { 0.0 });
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, g, |j, gv| gv * out[j] * (1.0 - out[j])),
            Op::Abs(a) => {
                let av = val(*a);
                self.acc_map(grads, *a, g, |j, gv| gv * sign(av[j]));
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                self.acc_map(grads, *a, g, |j, gv| {
                    if av[j] >= *lo && av[j] <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g[0] / n;
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let cout = self.shape(*w)[0];
                let xv = val(*x);
                let wv = val(*w);
                // Each slot borrows `grads` mutably, so take them one at a time.
                let mut dx = self.slot(grads, *x).map(|s| s.to_vec());
                let mut dw = self.slot(grads, *w).map(|s| s.to_vec());
                let mut db = b.and_then(|b| self.slot(grads, b).map(|s| s.to_vec()));
                kernels::conv2d_backward(
                    xv,
                    *geom,
                    wv,
                    g,
                    cout,
                    ConvGrads {
                        dx: dx.as_deref_mut(),
                        dw: dw.as_deref_mut(),
                        db: db.as_deref_mut(),
                    },
                );
                self.store(grads, *x, dx);
                self.store(grads, *w, dw);
                if let Some(b) = b {
                    self.store(grads, *b, db);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (c, h, w) = self.value(*x).chw();
                let hw = h * w;
                let n = hw as f64;
                let xv = val(*x);
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..hw {
                        let j = ch * hw + p;
                        let xhat = (xv[j] - mean[ch]) * inv_std[ch];
                        sum_g[ch] += g[j];
                        sum_gx[ch] += g[j] * xhat;
                    }
                }
                if let Some(d) = self.slot(grads, *beta) {
                    for ch in 0..c {
                        d[ch] += sum_g[ch];
                    }
                }
                if let Some(d) = self.slot(grads, *gamma) {
                    for ch in 0..c {
                        d[ch] += sum_gx[ch];
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch] / n;
                        for p in 0..hw {
                            let j = ch * hw + p;
                            let xhat = (xv[j] - mean[ch]) * inv_std[ch];
                            d[j] += k * (n * g[j] - sum_g[ch] - xhat * sum_gx[ch]);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = self.slot(grads, p) {
                        for (d, gv) in d.iter_mut().zip(&g[off..off + len]) {
                            *d += gv;
                        }
                    }
                    off += len;
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w) = self.value(*x).chw();
                let hw = h * w;
                if let Some(d) = self.slot(grads, *x) {
                    for (j, d) in d.iter_mut().enumerate() {
                        *d += g[j / hw] / hw as f64;
                    }
                }
            }
            Op::ChannelScale(x, gate) => {
                let (c, h, w) = self.value(*x).chw();
                let hw = h * w;
                let (xv, gv) = (val(*x), val(*gate));
                self.acc_map(grads, *x, g, |j, gg| gg * gv[j / hw]);
                if let Some(d) = self.slot(grads, *gate) {
                    for ch in 0..c {
                        let r = ch * hw..(ch + 1) * hw;
                        d[ch] += g[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::SpatialScale(x, mask) => {
                let (c, h, w) = self.value(*x).chw();
                let hw = h * w;
                let (xv, mv) = (val(*x), val(*mask));
                self.acc_map(grads, *x, g, |j, gg| gg * mv[j % hw]);
                if let Some(d) = self.slot(grads, *mask) {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[p] += g[ch * hw + p] * xv[ch * hw + p];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let k = self.shape(*a)[1];
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, s), gr) in d.chunks_mut(k).zip(out.chunks(k)).zip(g.chunks(k)) {
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            d[j] += s[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::EntropyRows(a) => {
                let k = self.shape(*a)[1];
                let av = val(*a);
                let s = g[0];
                if let Some(d) = self.slot(grads, *a) {
                    for (d, row) in d.chunks_mut(k).zip(av.chunks(k)) {
                        let (h, p, logp) = row_entropy(row);
                        for j in 0..k {
                            d[j] -= s * p[j] * (logp[j] + h);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Pick(a, idx) => {
                if let Some(d) = self.slot(grads, *a) {
                    for (&k, gv) in idx.iter().zip(g) {
                        d[k] += gv;
                    }
                }
            }
            Op::WeightedSum(terms, weights) => {
                let wv = val(*weights).to_vec();
                for (&t, &wt) in terms.iter().zip(&wv) {
                    self.acc_map(grads, t, g, |_, gv| gv * wt);
                }
                if self.needs_grad(*weights) {
                    let dots: Vec<f64> = terms
                        .iter()
                        .map(|&t| val(t).iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    if let Some(d) = self.slot(grads, *weights) {
                        for (d, v) in d.iter_mut().zip(dots) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Filter(x, f) => {
                let c = self.shape(*x)[0];
                if let Some(d) = self.slot(grads, *x) {
                    f.backward_add(g, c, d);
                }
            }
            Op::Warp(x, map) => {
                let c = self.shape(*x)[0];
                if let Some(d) = self.slot(grads, *x) {
                    map.backward_add(g, c, d);
                }
            }
        }
    }

    fn store(&self, grads: &mut [Option<Tensor>], v: Var, buf: Option<Vec<f64>>) {
        if let (Some(buf), Some(slot)) = (buf, self.slot(grads, v)) {
            slot.copy_from_slice(&buf);
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax of a flat `[R, k]` buffer.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// `(entropy, probabilities, log-probabilities)` of `softmax(row)`.
fn row_entropy(row: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let logp: Vec<f64> = row.iter().map(|v| v - lse).collect();
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let h = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
    (h, p, logp)
}

#[cfg(test)]
mod tests;
