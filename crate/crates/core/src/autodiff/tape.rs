//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so insertion order is a valid
//! topological order and `backward` is a single reverse sweep. `backward`
//! borrows the tape immutably; the same tape can be swept again from any
//! scalar root.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, NormCache};
use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxChannels(Var),
    /// saved: softmax of the input
    LogSoftmaxChannels(Var, Vec<f64>),
    ChannelSum(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    InstanceNorm { x: Var, gamma: Var, beta: Var, cache: NormCache },
    ConcatChannels(Var, Var),
    WeightedPool { x: Var, weights: Vec<f64> },
    CosineToConst { x: Var, target: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, Var>,
}

/// Parameter ids bound to their leaf nodes on a tape.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, id: &str) -> Result<Var> {
        self.vars
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{id}` not on tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(Error::Shape(format!("{what} expects NCHW input, got {shape:?}"))),
    }
}

/// `[N, C, rest..]` -> (N, C, prod(rest)).
fn channel_layout(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("{what} needs a channel axis, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; does not appear in gradient maps.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Trainable leaf reported under `id` by [`Tape::backward`].
    pub fn leaf(&mut self, id: impl Into<String>, value: Tensor) -> Result<Var> {
        let id = id.into();
        if self.leaves.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("leaf `{id}` registered twice")));
        }
        let var = self.push(value, Op::Leaf, "leaf")?;
        self.leaves.insert(id, var);
        Ok(var)
    }

    pub fn register(&mut self, params: &ParamSet) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (id, t) in params.iter() {
            vars.insert(id.to_string(), self.leaf(id, t.clone())?);
        }
        Ok(ParamVars { vars })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(value, op, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k), "scale")
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + k);
        self.push(value, Op::AddConst(a), "add_const")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a), "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), "exp")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v * v);
        self.push(value, Op::Square(a), "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::Mean(a), "mean")
    }

    /// Sum of several tensors of one shape.
    pub fn add_many(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_many of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    fn softmax_data(t: &Tensor) -> Result<Vec<f64>> {
        let (n, c, sp) = channel_layout(t.shape(), "softmax")?;
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let base = b * c * sp;
            for s in 0..sp {
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(x[base + k * sp + s]);
                }
                let mut z = 0.0;
                for k in 0..c {
                    let e = (x[base + k * sp + s] - m).exp();
                    out[base + k * sp + s] = e;
                    z += e;
                }
                for k in 0..c {
                    out[base + k * sp + s] /= z;
                }
            }
        }
        Ok(out)
    }

    /// Softmax across axis 1 of an `[N, C, ..]` tensor.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = Self::softmax_data(t)?;
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), data);
        self.push(value, Op::SoftmaxChannels(a), "softmax_channels")
    }

    pub fn log_softmax_channels(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, sp) = channel_layout(t.shape(), "log_softmax")?;
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let base = b * c * sp;
            for s in 0..sp {
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(x[base + k * sp + s]);
                }
                let lse = m + (0..c).map(|k| (x[base + k * sp + s] - m).exp()).sum::<f64>().ln();
                for k in 0..c {
                    out[base + k * sp + s] = x[base + k * sp + s] - lse;
                }
            }
        }
        let soft = out.iter().map(|v| v.exp()).collect();
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), out);
        self.push(value, Op::LogSoftmaxChannels(a, soft), "log_softmax_channels")
    }

    /// Sum over every axis except axis 1: `[N, C, ..] -> [C]`.
    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, c, sp) = channel_layout(t.shape(), "channel_sum")?;
        let mut out = vec![0.0; c];
        for b in 0..n {
            for (k, o) in out.iter_mut().enumerate() {
                *o += t.data()[(b * c + k) * sp..][..sp].iter().sum::<f64>();
            }
        }
        self.push(Tensor::from_vec(out), Op::ChannelSum(a), "channel_sum")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = nchw(self.value(x).shape(), "conv2d")?;
        let (co, wci, kh, kw) = nchw(self.value(w).shape(), "conv2d weight")?;
        if wci != ci || kh != kw || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape("conv2d kernel larger than padded input".into()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::Shape("conv2d bias must be [out_ch]".into()));
            }
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: ci,
            out_ch: co,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
            kernel: kh,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts_unchecked(vec![n, co, geom.out_h, geom.out_w], out);
        self.push(value, Op::Conv2d { x, w, b, geom }, "conv2d")
    }

    /// Transposed convolution with kernel size equal to the stride (exact
    /// `stride`-fold upsampling). Weight layout `[in_ch, out_ch, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, ci, h, wd) = nchw(self.value(x).shape(), "conv_transpose2d")?;
        let (wci, co, kh, kw) = nchw(self.value(w).shape(), "conv_transpose2d weight")?;
        if wci != ci || kh != kw {
            return Err(Error::Shape("conv_transpose2d weight incompatible with input".into()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::Shape("conv_transpose2d bias must be [out_ch]".into()));
            }
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: ci,
            out_ch: co,
            in_h: h,
            in_w: wd,
            out_h: h * kh,
            out_w: wd * kw,
            kernel: kh,
            stride: kh,
            pad: 0,
        };
        let out = kernels::conv_transpose2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts_unchecked(vec![n, co, geom.out_h, geom.out_w], out);
        self.push(value, Op::ConvTranspose2d { x, w, b, geom }, "conv_transpose2d")
    }

    /// Per-sample, per-channel normalization over spatial axes, followed by a
    /// per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, sp) = channel_layout(&shape, "instance_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape("instance_norm affine must be [C]".into()));
        }
        let (y, cache) = kernels::instance_norm_forward(
            self.value(x).data(),
            n,
            c,
            sp,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::from_parts_unchecked(shape, y);
        self.push(value, Op::InstanceNorm { x, gamma, beta, cache }, "instance_norm")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let (na, ca, spa) = channel_layout(&sa, "concat")?;
        let (nb, cb, spb) = channel_layout(&sb, "concat")?;
        if na != nb || spa != spb || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("cannot concat {sa:?} with {sb:?}")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * spa..(n + 1) * ca * spa]);
            out.extend_from_slice(&db[n * cb * spb..(n + 1) * cb * spb]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let value = Tensor::from_parts_unchecked(shape, out);
        self.push(value, Op::ConcatChannels(a, b), "concat_channels")
    }

    /// `[N, C, ..] -> [C]` with `out[c] = Σ_{n,s} weights[n, s] * x[n, c, s]`.
    /// `weights` has one entry per (sample, spatial position).
    pub fn weighted_pool(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        let (n, c, sp) = channel_layout(t.shape(), "weighted_pool")?;
        if weights.len() != n * sp {
            return Err(Error::Shape(format!(
                "weighted_pool needs {} weights, got {}",
                n * sp,
                weights.len()
            )));
        }
        let mut out = vec![0.0; c];
        for b in 0..n {
            let wrow = &weights[b * sp..][..sp];
            for (k, o) in out.iter_mut().enumerate() {
                let xs = &t.data()[(b * c + k) * sp..][..sp];
                *o += xs.iter().zip(wrow).map(|(a, w)| a * w).sum::<f64>();
            }
        }
        self.push(Tensor::from_vec(out), Op::WeightedPool { x, weights }, "weighted_pool")
    }

    /// Cosine distance `1 - x·t / (|x||t|)` to a constant vector `target`;
    /// evaluates to 1 with zero gradient when either norm is below 1e-12.
    pub fn cosine_to_const(&mut self, x: Var, target: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != target.len() {
            return Err(Error::Shape("cosine_to_const length mismatch".into()));
        }
        let d = crate::losses::cosine_distance(t.data(), &target);
        self.push(Tensor::scalar(d), Op::CosineToConst { x, target }, "cosine_to_const")
    }

    /// Gradients of a scalar root with respect to every registered leaf.
    pub fn backward(&self, root: Var) -> Result<GradMap> {
        let adj = self.adjoints(root)?;
        let mut grads = GradMap::new();
        for (id, &var) in &self.leaves {
            let g = match &adj[var.0] {
                Some(g) => g.clone(),
                None => vec![0.0; self.nodes[var.0].value.numel()],
            };
            grads.insert(id.clone(), Tensor::from_parts_unchecked(self.value(var).shape().to_vec(), g));
        }
        Ok(grads)
    }

    /// Gradient of a scalar root with respect to an arbitrary node.
    pub fn grad_of(&self, root: Var, wrt: Var) -> Result<Tensor> {
        let adj = self.adjoints(root)?;
        let g = adj[wrt.0].clone().unwrap_or_else(|| vec![0.0; self.value(wrt).numel()]);
        Ok(Tensor::from_parts_unchecked(self.value(wrt).shape().to_vec(), g))
    }

    fn adjoints(&self, root: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if !self.value(root).is_scalar() {
            return Err(Error::Shape(format!(
                "backward from non-scalar root of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Vec<f64>| -> Result<()> {
            if contrib.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient accumulation at node {}", v.0)));
            }
            match &mut adj[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec())?;
                acc(*b, g.to_vec())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec())?;
                acc(*b, g.iter().map(|v| -v).collect())?;
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(xb).map(|(g, y)| g * y).collect())?;
                acc(*b, g.iter().zip(xa).map(|(g, x)| g * x).collect())?;
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(xb).map(|(g, y)| g / y).collect())?;
                acc(*b, g.iter().zip(xa).zip(xb).map(|((g, x), y)| -g * x / (y * y)).collect())?;
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|v| v * k).collect())?,
            Op::AddConst(a) => acc(*a, g.to_vec())?,
            Op::Relu(a) => {
                acc(*a, g.iter().zip(val(*a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect())?
            }
            Op::Log(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect())?,
            Op::Exp(a) => acc(*a, g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect())?,
            Op::Square(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect())?,
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()])?,
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n])?
            }
            Op::SoftmaxChannels(a) => {
                let (n, c, sp) = channel_layout(node.value.shape(), "softmax")?;
                let s = node.value.data();
                let mut dx = vec![0.0; s.len()];
                for b in 0..n {
                    let base = b * c * sp;
                    for p in 0..sp {
                        let dot: f64 = (0..c).map(|k| g[base + k * sp + p] * s[base + k * sp + p]).sum();
                        for k in 0..c {
                            let j = base + k * sp + p;
                            dx[j] = s[j] * (g[j] - dot);
                        }
                    }
                }
                acc(*a, dx)?
            }
            Op::LogSoftmaxChannels(a, soft) => {
                let (n, c, sp) = channel_layout(node.value.shape(), "log_softmax")?;
                let mut dx = vec![0.0; soft.len()];
                for b in 0..n {
                    let base = b * c * sp;
                    for p in 0..sp {
                        let total: f64 = (0..c).map(|k| g[base + k * sp + p]).sum();
                        for k in 0..c {
                            let j = base + k * sp + p;
                            dx[j] = g[j] - soft[j] * total;
                        }
                    }
                }
                acc(*a, dx)?
            }
            Op::ChannelSum(a) => {
                let (n, c, sp) = channel_layout(self.value(*a).shape(), "channel_sum")?;
                let mut dx = vec![0.0; n * c * sp];
                for b in 0..n {
                    for k in 0..c {
                        dx[(b * c + k) * sp..][..sp].iter_mut().for_each(|v| *v = g[k]);
                    }
                }
                acc(*a, dx)?
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(geom, val(*x), val(*w), g, b.is_some());
                acc(*x, dx)?;
                acc(*w, dw)?;
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db)?;
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(geom, val(*x), val(*w), g, b.is_some());
                acc(*x, dx)?;
                acc(*w, dw)?;
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db)?;
                }
            }
            Op::InstanceNorm { x, gamma, beta, cache } => {
                let (n, c, sp) = channel_layout(node.value.shape(), "instance_norm")?;
                let (dx, dg, dbeta) = kernels::instance_norm_backward(cache, g, n, c, sp, val(*gamma));
                acc(*x, dx)?;
                acc(*gamma, dg)?;
                acc(*beta, dbeta)?;
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let (n, ca, sp) = channel_layout(sa, "concat")?;
                let cb = sb[1];
                let mut da = Vec::with_capacity(n * ca * sp);
                let mut dbv = Vec::with_capacity(n * cb * sp);
                let stride = (ca + cb) * sp;
                for s in 0..n {
                    da.extend_from_slice(&g[s * stride..s * stride + ca * sp]);
                    dbv.extend_from_slice(&g[s * stride + ca * sp..(s + 1) * stride]);
                }
                acc(*a, da)?;
                acc(*b, dbv)?;
            }
            Op::WeightedPool { x, weights } => {
                let (n, c, sp) = channel_layout(self.value(*x).shape(), "weighted_pool")?;
                let mut dx = vec![0.0; n * c * sp];
                for s in 0..n {
                    let wrow = &weights[s * sp..][..sp];
                    for k in 0..c {
                        let out = &mut dx[(s * c + k) * sp..][..sp];
                        for (o, w) in out.iter_mut().zip(wrow) {
                            *o = g[k] * w;
                        }
                    }
                }
                acc(*x, dx)?
            }
            Op::CosineToConst { x, target } => {
                let xs = val(*x);
                let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nx < crate::losses::COSINE_NORM_FLOOR || nt < crate::losses::COSINE_NORM_FLOOR {
                    acc(*x, vec![0.0; xs.len()])?;
                } else {
                    let dot: f64 = xs.iter().zip(target).map(|(a, b)| a * b).sum();
                    let dx = xs
                        .iter()
                        .zip(target)
                        .map(|(xi, ti)| -g[0] * (ti / (nx * nt) - dot * xi / (nx * nx * nx * nt)))
                        .collect();
                    acc(*x, dx)?;
                }
            }
        }
        Ok(())
    }
}
