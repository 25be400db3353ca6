//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Nodes whose
//! inputs are all constants are stored without their operation, so forward
//! passes through frozen networks cost nothing extra at backward time.

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probability clamp used by the logistic log-likelihood terms.
pub const PROB_EPS: f64 = 1e-7;
pub const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Concat(Var, Var),
    Mean(Var),
    Dot(Var, Vec<T>),
    MeanAbsDiff(Var, Var),
    LogSigmoidMean { x: Var, real: bool },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<u8> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    scratch: Vec<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), scratch: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// 2-D convolution; `w` is `[c_out, c_in, k, k]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c_in, h, wd] = self.value(x).dims4()?;
        let [c_out, wc_in, k, k2] = self.value(w).dims4()?;
        if wc_in != c_in || k != k2 {
            return Err(Error::Shape(format!(
                "conv2d: input channels {c_in} vs weight {:?}",
                self.value(w).shape()
            )));
        }
        let geom = ConvGeom::forward(h, wd, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {k} does not fit {h}x{wd}")))?;
        let in_len = c_in * h * wd;
        let out_len = c_out * geom.out_h * geom.out_w;
        let mut out = vec![T::zero(); n * out_len];
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            let bv = b.map(|b| self.nodes[b.0].value.data());
            for i in 0..n {
                conv::conv2d_forward(
                    &xv[i * in_len..(i + 1) * in_len],
                    wv,
                    bv,
                    c_in,
                    c_out,
                    &geom,
                    &mut self.scratch,
                    &mut out[i * out_len..(i + 1) * out_len],
                );
            }
        }
        let value = Tensor::from_vec(&[n, c_out, geom.out_h, geom.out_w], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed 2-D convolution; `w` is `[c_in, c_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c_in, h, wd] = self.value(x).dims4()?;
        let [wc_in, c_out, k, k2] = self.value(w).dims4()?;
        if wc_in != c_in || k != k2 {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input channels {c_in} vs weight {:?}",
                self.value(w).shape()
            )));
        }
        let geom = ConvGeom::transposed(h, wd, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv_transpose2d: bad geometry for {h}x{wd}")))?;
        let in_len = c_in * h * wd;
        let out_len = c_out * geom.in_h * geom.in_w;
        let mut out = vec![T::zero(); n * out_len];
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            let bv = b.map(|b| self.nodes[b.0].value.data());
            for i in 0..n {
                conv::conv_transpose2d_forward(
                    &xv[i * in_len..(i + 1) * in_len],
                    wv,
                    bv,
                    c_in,
                    c_out,
                    &geom,
                    &mut self.scratch,
                    &mut out[i * out_len..(i + 1) * out_len],
                );
            }
        }
        let value = Tensor::from_vec(&[n, c_out, geom.in_h, geom.in_w], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let eps = T::c(NORM_EPS);
        let inv_n = T::one() / T::from_usize(plane).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in xv.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
            let mean = src.iter().copied().sum::<T>() * inv_n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let inv = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::c(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LeakyRelu(x, s), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut value = self.value(a).clone();
        for (d, &s) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *d -= s;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::c(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            out.extend_from_slice(&av[i * la..(i + 1) * la]);
            out.extend_from_slice(&bv[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::from_vec(&[n, ca + cb, h, w], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// `sum(x * r)` for a constant direction `r`.
    pub fn dot(&mut self, x: Var, r: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != r.shape() {
            return Err(Error::Shape(format!("dot: {:?} vs {:?}", self.value(x).shape(), r.shape())));
        }
        let s = self.value(x).data().iter().zip(r.data()).map(|(&a, &b)| a * b).sum::<T>();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, r.data().to_vec()), rg))
    }

    /// `mean |a - b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mean_abs_diff")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum::<T>();
        let m = s / T::from_usize(av.len()).unwrap();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(m), Op::MeanAbsDiff(a, b), rg))
    }

    /// Mean of `ln p` (`real`) or `ln (1 - p)` over all scores, where
    /// `p = clamp(sigmoid(score), 1e-7, 1 - 1e-7)`.
    pub fn log_sigmoid_mean(&mut self, x: Var, real: bool) -> Result<Var> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::NonFinite("discriminator scores".into()));
        }
        let (lo, hi) = (T::c(PROB_EPS), T::one() - T::c(PROB_EPS));
        let s = v
            .data()
            .iter()
            .map(|&z| {
                let p = sigmoid(z).max(lo).min(hi);
                if real {
                    p.ln()
                } else {
                    (T::one() - p).ln()
                }
            })
            .sum::<T>();
        let m = s / T::from_usize(v.len()).unwrap();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::LogSigmoidMean { x, real }, rg))
    }

    /// Mean pixel-wise cross-entropy of NCHW class logits against labels laid
    /// out as `[n, h, w]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let [n, c, h, w] = self.value(logits).dims4()?;
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(Error::Shape(format!(
                "cross entropy: {} labels for logits {:?}",
                labels.len(),
                self.value(logits).shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::validation("mask", format!("label {bad} outside 0..{c}")));
        }
        let lv = self.value(logits).data();
        if !self.value(logits).is_finite() {
            return Err(Error::NonFinite("segmentation logits".into()));
        }
        let mut total = T::zero();
        for i in 0..n {
            let sample = &lv[i * c * plane..(i + 1) * c * plane];
            for p in 0..plane {
                let lab = labels[i * plane + p] as usize;
                let max = (0..c).map(|k| sample[k * plane + p]).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|k| (sample[k * plane + p] - max).exp()).sum::<T>().ln() + max;
                total += lse - sample[lab * plane + p];
            }
        }
        let m = total / T::from_usize(n * plane).unwrap();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(m), Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() }, rg))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut scratch = std::mem::take(&mut self.scratch);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut scratch);
        }
        self.scratch = scratch;
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>], scratch: &mut Vec<T>) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let [n, c_in, h, wd] = xv.dims4().unwrap();
                let c_out = wv.shape()[0];
                let in_len = c_in * h * wd;
                let out_len = c_out * geom.out_h * geom.out_w;
                let mut gx = needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut gw = needs(*w).then(|| Tensor::zeros(wv.shape()));
                let mut gb = b.filter(|b| needs(*b)).map(|b| Tensor::zeros(nodes[b.0].value.shape()));
                for s in 0..n {
                    conv::conv2d_backward(
                        &xv.data()[s * in_len..(s + 1) * in_len],
                        wv.data(),
                        &g.data()[s * out_len..(s + 1) * out_len],
                        c_in,
                        c_out,
                        geom,
                        scratch,
                        gx.as_mut().map(|t| &mut t.data_mut()[s * in_len..(s + 1) * in_len]),
                        gw.as_mut().map(|t| t.data_mut()),
                        gb.as_mut().map(|t| t.data_mut()),
                    );
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                if let Some(b) = b {
                    accumulate(grads, *b, gb);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let [n, c_in, h, wd] = xv.dims4().unwrap();
                let c_out = wv.shape()[1];
                let in_len = c_in * h * wd;
                let out_len = c_out * geom.in_h * geom.in_w;
                let mut gx = needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut gw = needs(*w).then(|| Tensor::zeros(wv.shape()));
                let mut gb = b.filter(|b| needs(*b)).map(|b| Tensor::zeros(nodes[b.0].value.shape()));
                for s in 0..n {
                    conv::conv_transpose2d_backward(
                        &xv.data()[s * in_len..(s + 1) * in_len],
                        wv.data(),
                        &g.data()[s * out_len..(s + 1) * out_len],
                        c_in,
                        c_out,
                        geom,
                        scratch,
                        gx.as_mut().map(|t| &mut t.data_mut()[s * in_len..(s + 1) * in_len]),
                        gw.as_mut().map(|t| t.data_mut()),
                        gb.as_mut().map(|t| t.data_mut()),
                    );
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                if let Some(b) = b {
                    accumulate(grads, *b, gb);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let [_, _, h, w] = out.dims4().unwrap();
                let plane = h * w;
                let inv_n = T::one() / T::from_usize(plane).unwrap();
                let mut gx = Tensor::zeros(out.shape());
                for (((dx, dy), y), &inv) in gx
                    .data_mut()
                    .chunks_exact_mut(plane)
                    .zip(g.data().chunks_exact(plane))
                    .zip(out.data().chunks_exact(plane))
                    .zip(inv_std)
                {
                    let mean_dy = dy.iter().copied().sum::<T>() * inv_n;
                    let mean_dyy = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    for ((d, &gy), &yy) in dx.iter_mut().zip(dy).zip(y) {
                        *d = inv * (gy - mean_dy - yy * mean_dyy);
                    }
                }
                accumulate(grads, *x, Some(gx));
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (d, &y) in gx.data_mut().iter_mut().zip(out.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(grads, *x, Some(gx));
            }
            Op::LeakyRelu(x, slope) => {
                let mut gx = g.clone();
                for (d, &xv) in gx.data_mut().iter_mut().zip(nodes[x.0].value.data()) {
                    if xv <= T::zero() {
                        *d *= *slope;
                    }
                }
                accumulate(grads, *x, Some(gx));
            }
            Op::Tanh(x) => {
                let mut gx = g.clone();
                for (d, &y) in gx.data_mut().iter_mut().zip(out.data()) {
                    *d *= T::one() - y * y;
                }
                accumulate(grads, *x, Some(gx));
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, Some(g.clone()));
                }
                if needs(*b) {
                    accumulate(grads, *b, Some(g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, Some(g.clone()));
                }
                if needs(*b) {
                    accumulate(grads, *b, Some(g.map(|v| -v)));
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, Some(g.map(|v| v * *c))),
            Op::Concat(a, b) => {
                let [n, ca, h, w] = nodes[a.0].value.dims4().unwrap();
                let cb = nodes[b.0].value.shape()[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let gd = g.data();
                if needs(*a) {
                    let mut ga = Vec::with_capacity(n * la);
                    for s in 0..n {
                        ga.extend_from_slice(&gd[s * (la + lb)..s * (la + lb) + la]);
                    }
                    accumulate(grads, *a, Some(Tensor::from_vec(&[n, ca, h, w], ga).unwrap()));
                }
                if needs(*b) {
                    let mut gb = Vec::with_capacity(n * lb);
                    for s in 0..n {
                        gb.extend_from_slice(&gd[s * (la + lb) + la..(s + 1) * (la + lb)]);
                    }
                    accumulate(grads, *b, Some(Tensor::from_vec(&[n, cb, h, w], gb).unwrap()));
                }
            }
            Op::Mean(x) => {
                let xv = &nodes[x.0].value;
                let v = g.item() / T::from_usize(xv.len()).unwrap();
                accumulate(grads, *x, Some(Tensor::full(xv.shape(), v)));
            }
            Op::Dot(x, r) => {
                let xv = &nodes[x.0].value;
                let gi = g.item();
                let gx = Tensor::from_vec(xv.shape(), r.iter().map(|&v| v * gi).collect()).unwrap();
                accumulate(grads, *x, Some(gx));
            }
            Op::MeanAbsDiff(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let k = g.item() / T::from_usize(av.len()).unwrap();
                let ga: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            k
                        } else if d < T::zero() {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let ga = Tensor::from_vec(av.shape(), ga).unwrap();
                if needs(*b) {
                    accumulate(grads, *b, Some(ga.map(|v| -v)));
                }
                if needs(*a) {
                    accumulate(grads, *a, Some(ga));
                }
            }
            Op::LogSigmoidMean { x, real } => {
                let xv = &nodes[x.0].value;
                let k = g.item() / T::from_usize(xv.len()).unwrap();
                let (lo, hi) = (T::c(PROB_EPS), T::one() - T::c(PROB_EPS));
                let gx = xv.map(|z| {
                    let p = sigmoid(z);
                    if p <= lo || p >= hi {
                        T::zero()
                    } else if *real {
                        k * (T::one() - p)
                    } else {
                        -k * p
                    }
                });
                accumulate(grads, *x, Some(gx));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = &nodes[logits.0].value;
                let [n, c, h, w] = lv.dims4().unwrap();
                let plane = h * w;
                let k = g.item() / T::from_usize(n * plane).unwrap();
                let mut gl = Tensor::zeros(lv.shape());
                let src = lv.data();
                let dst = gl.data_mut();
                for s in 0..n {
                    let base = s * c * plane;
                    for p in 0..plane {
                        let max = (0..c).map(|j| src[base + j * plane + p]).fold(T::neg_infinity(), T::max);
                        let z = (0..c).map(|j| (src[base + j * plane + p] - max).exp()).sum::<T>();
                        let lab = labels[s * plane + p] as usize;
                        for j in 0..c {
                            let idx = base + j * plane + p;
                            let sm = (src[idx] - max).exp() / z;
                            let one = if j == lab { T::one() } else { T::zero() };
                            dst[idx] = k * (sm - one);
                        }
                    }
                }
                accumulate(grads, *logits, Some(gl));
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Logistic function, evaluated without overflow for large |z|.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn constants_do_not_record_ops() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, -2.0]));
        let r = g.relu(a);
        assert!(!g.requires_grad(r));
        assert_eq!(g.value(r).data(), &[1.0, 0.0]);
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 3.0]));
        let b = g.add(a, a).unwrap();
        let m = g.mean(b);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 3.0]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.instance_norm(x).unwrap();
        let v = g.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let var: f64 = v.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!((var - 1.25 / (1.25 + NORM_EPS)).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
