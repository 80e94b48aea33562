//! Tape of recorded ops with reverse-mode gradient propagation.
//!
//! Every op appends one node whose inputs have strictly smaller ids, so record
//! order is a topological order and `backward` is a single reverse sweep.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { x: Var, s: Var },
    Index { x: Var, i: usize },
    Reshape(Var),
    Transpose(Var),
    Narrow { x: Var, start: usize },
    Concat(Vec<Var>),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    LayerNorm { x: Var, g: Var, b: Var, rstd: Vec<f64> },
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    AvgPool(Var),
    GridSample { x: Var, coords: Var },
    Abs(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Index { .. } => "index",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Narrow { .. } => "narrow",
            Op::Concat(..) => "concat",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::AvgPool(..) => "avg_pool2d",
            Op::GridSample { .. } => "grid_sample",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation; owns every intermediate value.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape matches value"))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced non-finite values (shape {:?})",
                op.name(),
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        contract!(
            self.shape(a) == self.shape(b),
            "{what}: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape(a), self.data(a).iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.map(x, |a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        contract!(self.value(s).numel() == 1, "scale_by expects a scalar factor");
        let sv = self.value(s).item();
        let v = self.map(x, |a| a * sv);
        self.push(v, Op::ScaleBy { x, s }, &[x, s])
    }

    /// Element `i` of the flattened tensor as a one-element tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        contract!(i < self.value(x).numel(), "index {i} out of range");
        let v = Tensor::scalar(self.data(x)[i]);
        self.push(v, Op::Index { x, i }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        contract!(self.value(x).ndim() == 2, "transpose expects a matrix");
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(&[c, r], out)?;
        self.push(v, Op::Transpose(x), &[x])
    }

    /// Rows `[start, start+len)` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        contract!(
            len > 0 && start + len <= shape[0],
            "narrow [{start}, {}) outside leading dim {}",
            start + len,
            shape[0]
        );
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let v = Tensor::new(&out_shape, data)?;
        self.push(v, Op::Narrow { x, start }, &[x])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            contract!(
                self.shape(p)[1..] == tail[..],
                "concat: trailing shape {:?} vs {:?}",
                &self.shape(p)[1..],
                tail
            );
            lead += self.shape(p)[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(&shape, data)?;
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        contract!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            0.0,
            &mut out,
            n as isize,
            1,
        );
        let v = Tensor::new(&[m, n], out)?;
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D convolution of a `(C_in, H, W)` map with `(C_out, C_in/groups, kH, kW)` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        contract!(xs.len() == 3, "conv2d input must be (C,H,W), got {xs:?}");
        contract!(ws.len() == 4, "conv2d weight must be 4-D, got {ws:?}");
        contract!(stride > 0 && groups > 0, "conv2d stride and groups must be positive");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        contract!(
            cin % groups == 0 && cout % groups == 0,
            "conv2d: channels {cin}->{cout} not divisible by groups {groups}"
        );
        contract!(
            cin_g == cin / groups,
            "conv2d: weight expects {} input channels per group, input has {}",
            cin_g,
            cin / groups
        );
        contract!(
            kh <= h + 2 * padding && kw <= wd + 2 * padding,
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            wd + 2 * padding
        );
        if let Some(b) = b {
            contract!(
                self.shape(b) == [cout],
                "conv2d bias shape {:?} != [{cout}]",
                self.shape(b)
            );
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let v = Tensor::new(&[cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(v, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Normalizes over the leading (channel) axis at every trailing position,
    /// then applies per-channel `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        contract!(eps > 0.0, "layer_norm eps must be positive");
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        contract!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "layer_norm affine params must have shape [{c}]"
        );
        let n = self.value(x).numel() / c;
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; c * n];
        let mut rstd = vec![0.0; n];
        for j in 0..n {
            let mean = (0..c).map(|i| xd[i * n + j]).sum::<f64>() / c as f64;
            let var = (0..c).map(|i| (xd[i * n + j] - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[j] = r;
            for i in 0..c {
                out[i * n + j] = (xd[i * n + j] - mean) * r * gd[i] + bd[i];
            }
        }
        let v = Tensor::new(&xs, out)?;
        self.push(
            v,
            Op::LayerNorm {
                x,
                g: gamma,
                b: beta,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |a| a * normal_cdf(a));
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        contract!(axis < shape.len(), "softmax axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::Softmax { x, axis }, &[x])
    }

    /// Adaptive average pooling of a `(C,H,W)` map to `(C,out_h,out_w)`.
    pub fn avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        contract!(xs.len() == 3, "avg_pool2d input must be (C,H,W)");
        contract!(out_h > 0 && out_w > 0, "avg_pool2d output dims must be positive");
        contract!(
            out_h <= xs[1] && out_w <= xs[2],
            "avg_pool2d output {out_h}x{out_w} exceeds input {}x{}",
            xs[1],
            xs[2]
        );
        let out = kernels::avg_pool_forward(self.data(x), xs[0], xs[1], xs[2], out_h, out_w);
        let v = Tensor::new(&[xs[0], out_h, out_w], out)?;
        self.push(v, Op::AvgPool(x), &[x])
    }

    /// Bilinear sampling of `x: (C,H,W)` at absolute pixel coordinates
    /// `coords: (2,H',W')` (channel 0 = column, channel 1 = row), border-clamped.
    pub fn grid_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cs = self.shape(coords).to_vec();
        contract!(xs.len() == 3, "grid_sample input must be (C,H,W)");
        contract!(
            cs.len() == 3 && cs[0] == 2,
            "grid_sample coords must be (2,H',W'), got {cs:?}"
        );
        let npix = cs[1] * cs[2];
        let out =
            kernels::grid_sample_forward(self.data(x), xs[0], xs[1], xs[2], self.data(coords), npix);
        let v = Tensor::new(&[xs[0], cs[1], cs[2]], out)?;
        self.push(v, Op::GridSample { x, coords }, &[x, coords])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::abs);
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.data(x).iter().sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let v = Tensor::scalar(self.data(x).iter().sum::<f64>() / n);
        self.push(v, Op::Mean(x), &[x])
    }

    /// Reverse sweep from a one-element `loss`; gradients accumulate on every
    /// node that requires them and are kept for leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        contract!(
            self.value(loss).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = self.grads[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.grads[id] = Some(dy);
                continue;
            }
            self.backprop_node(id, &dy)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, id: usize, dy: &[f64]) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, dy.to_vec());
                self.accumulate(b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, dy.to_vec());
                self.accumulate(b, dy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let da = dy.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                let db = dy.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(x, s) => self.accumulate(x, dy.iter().map(|g| g * s).collect()),
            Op::ScaleBy { x, s } => {
                let sv = self.value(s).item();
                let ds: f64 = dy.iter().zip(self.data(x)).map(|(g, v)| g * v).sum();
                self.accumulate(x, dy.iter().map(|g| g * sv).collect());
                self.accumulate(s, vec![ds]);
            }
            Op::Index { x, i } => {
                let mut d = vec![0.0; self.value(x).numel()];
                d[i] = dy[0];
                self.accumulate(x, d);
            }
            Op::Reshape(x) => self.accumulate(x, dy.to_vec()),
            Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = dy[j * r + i];
                    }
                }
                self.accumulate(x, d);
            }
            Op::Narrow { x, start } => {
                if self.wants(x) {
                    let inner: usize = self.shape(x)[1..].iter().product();
                    let mut d = vec![0.0; self.value(x).numel()];
                    d[start * inner..start * inner + dy.len()].copy_from_slice(dy);
                    self.accumulate(x, d);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(p, dy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    // da = dy · bᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        m, n, k, dy, n as isize, 1, self.data(b), 1, n as isize, 0.0, &mut da,
                        k as isize, 1,
                    );
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    // db = aᵀ · dy
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        k, m, n, self.data(a), 1, k as isize, dy, n as isize, 1, 0.0, &mut db,
                        n as isize, 1,
                    );
                    self.accumulate(b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.wants(x);
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.data(x), self.data(w), dy, &geom, need_dx);
                if need_dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw);
                if let Some(b) = b {
                    self.accumulate(b, db);
                }
            }
            Op::LayerNorm { x, g, b, rstd } => {
                let c = self.shape(x)[0];
                let n = rstd.len();
                let (xd, gd) = (self.data(x), self.data(g));
                let mut dx = vec![0.0; c * n];
                let mut dg = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                for j in 0..n {
                    let mean = (0..c).map(|i| xd[i * n + j]).sum::<f64>() / c as f64;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for i in 0..c {
                        xhat[i] = (xd[i * n + j] - mean) * rstd[j];
                        let gy = dy[i * n + j];
                        dg[i] += gy * xhat[i];
                        dbeta[i] += gy;
                        let dxh = gy * gd[i];
                        s1 += dxh;
                        s2 += dxh * xhat[i];
                    }
                    s1 /= c as f64;
                    s2 /= c as f64;
                    for i in 0..c {
                        let dxh = dy[i * n + j] * gd[i];
                        dx[i * n + j] = rstd[j] * (dxh - s1 - xhat[i] * s2);
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(g, dg);
                self.accumulate(b, dbeta);
            }
            Op::Gelu(x) => {
                let d = dy
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &a)| g * (normal_cdf(a) + a * normal_pdf(a)))
                    .collect();
                self.accumulate(x, d);
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                let y = self.nodes[id].value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| dy[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = y[at(k)] * (dy[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(x, d);
            }
            Op::AvgPool(x) => {
                let xs = self.shape(x).to_vec();
                let ys = self.nodes[id].value.shape().to_vec();
                let d = kernels::avg_pool_backward(dy, xs[0], xs[1], xs[2], ys[1], ys[2]);
                self.accumulate(x, d);
            }
            Op::GridSample { x, coords } => {
                let xs = self.shape(x).to_vec();
                let cs = self.shape(coords).to_vec();
                let (dx, dc) = kernels::grid_sample_backward(
                    self.data(x),
                    xs[0],
                    xs[1],
                    xs[2],
                    self.data(coords),
                    cs[1] * cs[2],
                    dy,
                );
                self.accumulate(x, dx);
                self.accumulate(coords, dc);
            }
            Op::Abs(x) => {
                let d = dy
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &a)| if a > 0.0 { *g } else if a < 0.0 { -g } else { 0.0 })
                    .collect();
                self.accumulate(x, d);
            }
            Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![dy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![dy[0] / n as f64; n]);
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
