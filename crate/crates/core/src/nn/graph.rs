//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward sweep. Nodes are only ever appended, so node order
//! is a topological order and [`Graph::backward`] is a single reverse pass.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Statistics used by [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel mean and biased variance observed in a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    ChannelLse(Var),
    SelectChannel {
        x: Var,
        index: Vec<u32>,
    },
    LogSigmoid {
        x: Var,
        sign: f64,
        bound: f64,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` means the node does not influence the differentiated scalar.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if `v` is off the loss path.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 4]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Row/column window of one kernel tap for a same-size convolution.
#[inline]
fn tap_range(offset: isize, len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Stride-1 convolution with zero padding `k / 2` (spatial size preserved for odd `k`).
    ///
    /// `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co, 1, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let bs = self.value(b).shape();
        let [n, ci, h, wd] = xs;
        let [co, wci, kh, kw] = ws;
        if wci != ci || kh != kw || kh % 2 == 0 || bs[0] != co {
            return Err(Error::shape(
                format!("input {xs:?} with weight [_, {ci}, k, k] (odd k) and bias [{co}]"),
                format!("weight {ws:?}, bias {bs:?}"),
            ));
        }
        let pad = kh / 2;
        let xv = self.value(x);
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Tensor::zeros([n, co, h, wd]);
        for item in 0..n {
            for o in 0..co {
                let plane = out.plane_mut(item, o);
                plane.fill(bv[o]);
                for i in 0..ci {
                    let src = xv.plane(item, i);
                    if kh == 1 {
                        let weight = wv[o * ci + i];
                        if weight != 0.0 {
                            for (d, &v) in plane.iter_mut().zip(src) {
                                *d += weight * v;
                            }
                        }
                        continue;
                    }
                    for ky in 0..kh {
                        let dy = ky as isize - pad as isize;
                        let (y0, y1) = tap_range(dy, h);
                        for kx in 0..kw {
                            let dx = kx as isize - pad as isize;
                            let (x0, x1) = tap_range(dx, wd);
                            let weight = wv[((o * ci + i) * kh + ky) * kw + kx];
                            if weight == 0.0 || x0 >= x1 {
                                continue;
                            }
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let dst = &mut plane[y * wd + x0..y * wd + x1];
                                let s0 = (sy * wd) as isize + x0 as isize + dx;
                                let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                                for (d, &v) in dst.iter_mut().zip(s) {
                                    *d += weight * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }))
    }

    /// Per-channel affine normalization over the batch and spatial axes.
    ///
    /// Returns the batch moments when `stats` is [`NormStats::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let [n, c, h, w] = self.value(x).shape();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                format!("{c} scale/shift values"),
                format!("{}/{}", self.value(gamma).len(), self.value(beta).len()),
            ));
        }
        let count = n * h * w;
        let xv = self.value(x);
        let (mean, var) = match stats {
            NormStats::Batch => {
                if count == 0 {
                    return Err(Error::contract("batch norm over an empty batch"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s: f64 = (0..n).map(|i| xv.plane(i, ch).iter().sum::<f64>()).sum();
                    let m = s / count as f64;
                    let ss: f64 = (0..n)
                        .map(|i| xv.plane(i, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                        .sum();
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                (mean, var)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(c, mean.len().min(var.len())));
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = Tensor::zeros([n, c, h, w]);
        let p = h * w;
        for i in 0..n {
            for ch in 0..c {
                let src = xv.plane(i, ch);
                let base = (i * c + ch) * p;
                let dst = out.plane_mut(i, ch);
                for j in 0..p {
                    let xh = (src[j] - mean[ch]) * inv_std[ch];
                    xhat[base + j] = xh;
                    dst[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        let batch_stats = matches!(stats, NormStats::Batch);
        let moments = batch_stats.then_some(BatchMoments { mean, var, count });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, moments))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(x))
    }

    /// `ln Σ_c exp(x[n, c, y, x])`, shape `[N, 1, H, W]`.
    pub fn channel_lse(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let p = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        let mut buf = vec![0.0; c];
        for i in 0..n {
            let item = xv.item_slice(i);
            let dst = out.plane_mut(i, 0);
            for j in 0..p {
                for (ch, b) in buf.iter_mut().enumerate() {
                    *b = item[ch * p + j];
                }
                dst[j] = crate::math::lse_unchecked(&buf);
            }
        }
        self.push(out, Op::ChannelLse(x))
    }

    /// Picks channel `index[n*H*W + pixel]` at every pixel; shape `[N, 1, H, W]`.
    pub fn select_channel(&mut self, x: Var, index: Vec<u32>) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let p = h * w;
        if index.len() != n * p {
            return Err(Error::shape(n * p, index.len()));
        }
        if let Some(bad) = index.iter().find(|&&k| k as usize >= c) {
            return Err(Error::contract(format!("channel index {bad} >= {c}")));
        }
        let mut out = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            let item = xv.item_slice(i);
            let dst = out.plane_mut(i, 0);
            for j in 0..p {
                dst[j] = item[index[i * p + j] as usize * p + j];
            }
        }
        Ok(self.push(out, Op::SelectChannel { x, index }))
    }

    /// `ln sigmoid(clamp(sign * x, -bound, bound))` elementwise, with `sign = ±1`.
    pub fn log_sigmoid(&mut self, x: Var, negate: bool, bound: f64) -> Var {
        let sign = if negate { -1.0 } else { 1.0 };
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let u = (sign * *v).clamp(-bound, bound);
            *v = u.min(0.0) - (-u.abs()).exp().ln_1p();
        }
        self.push(out, Op::LogSigmoid { x, sign, bound })
    }

    /// `Σ_i weights[i] * x[i]` as a `[1, 1, 1, 1]` scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::shape(xv.len(), weights.len()));
        }
        let s = xv
            .data()
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|(v, w)| v * w)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        self.push(out, Op::Scale(x, factor))
    }

    /// Differentiates the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract(
                "backward called on a value that was not recorded by this graph",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, pad } => {
                    let (dx, dw, db) = self.conv2d_backward(*x, *w, &g, *pad);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (dx, dg, db) = self.batch_norm_backward(*gamma, xhat, inv_std, *batch_stats, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ChannelLse(x) => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.shape();
                    let p = h * w;
                    let mut dx = Tensor::zeros(xv.shape());
                    for i in 0..n {
                        let item = xv.item_slice(i);
                        let lse = node.value.plane(i, 0);
                        let gi = g.plane(i, 0);
                        for ch in 0..c {
                            let dst = dx.plane_mut(i, ch);
                            let src = &item[ch * p..(ch + 1) * p];
                            for j in 0..p {
                                dst[j] = gi[j] * (src[j] - lse[j]).exp();
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SelectChannel { x, index } => {
                    let shape = self.value(*x).shape();
                    let p = shape[2] * shape[3];
                    let mut dx = Tensor::zeros(shape);
                    for i in 0..shape[0] {
                        let gi = g.plane(i, 0);
                        for j in 0..p {
                            let ch = index[i * p + j] as usize;
                            dx.plane_mut(i, ch)[j] += gi[j];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSigmoid { x, sign, bound } => {
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let u = sign * v;
                        *d = if u.abs() < *bound {
                            // d/du ln sigmoid(u) = sigmoid(-u)
                            *d * sign * crate::math::sigmoid(-u)
                        } else {
                            0.0
                        };
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.item();
                    let shape = self.value(*x).shape();
                    let dx = Tensor::from_vec(shape, weights.iter().map(|w| w * s).collect())
                        .expect("weights match input length");
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    accumulate(&mut grads, *b, neg);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(x, f) => {
                    let mut dx = g;
                    for v in dx.data_mut() {
                        *v *= f;
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        // Interior gradients were consumed by the sweep; only leaves keep theirs.
        Ok(Gradients { grads })
    }

    fn conv2d_backward(&self, x: Var, w: Var, g: &Tensor, pad: usize) -> (Tensor, Tensor, Tensor) {
        let xv = self.value(x);
        let wt = self.value(w);
        let [n, ci, h, wd] = xv.shape();
        let [co, _, kh, kw] = wt.shape();
        let wv = wt.data();
        let mut dx = Tensor::zeros(xv.shape());
        let mut dw = Tensor::zeros(wt.shape());
        let mut db = Tensor::zeros([co, 1, 1, 1]);
        for item in 0..n {
            for o in 0..co {
                let gp = g.plane(item, o);
                db.data_mut()[o] += gp.iter().sum::<f64>();
                for i in 0..ci {
                    let src = xv.plane(item, i);
                    if kh == 1 {
                        let widx = o * ci + i;
                        dw.data_mut()[widx] += gp.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        let weight = wv[widx];
                        if weight != 0.0 {
                            for (d, &gv) in dx.plane_mut(item, i).iter_mut().zip(gp) {
                                *d += weight * gv;
                            }
                        }
                        continue;
                    }
                    for ky in 0..kh {
                        let dy = ky as isize - pad as isize;
                        let (y0, y1) = tap_range(dy, h);
                        for kx in 0..kw {
                            let dxo = kx as isize - pad as isize;
                            let (x0, x1) = tap_range(dxo, wd);
                            if x0 >= x1 {
                                continue;
                            }
                            let widx = ((o * ci + i) * kh + ky) * kw + kx;
                            let weight = wv[widx];
                            let mut acc = 0.0;
                            let dxp = dx.plane_mut(item, i);
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &gp[y * wd + x0..y * wd + x1];
                                let s0 = ((sy * wd) as isize + x0 as isize + dxo) as usize;
                                let srow = &src[s0..s0 + (x1 - x0)];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                                if weight != 0.0 {
                                    let drow = &mut dxp[s0..s0 + (x1 - x0)];
                                    for (d, &gv) in drow.iter_mut().zip(grow) {
                                        *d += weight * gv;
                                    }
                                }
                            }
                            dw.data_mut()[widx] += acc;
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }

    fn batch_norm_backward(
        &self,
        gamma: Var,
        xhat: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let [n, c, h, w] = g.shape();
        let p = h * w;
        let count = (n * p) as f64;
        let gm = self.value(gamma).data();
        let mut dx = Tensor::zeros(g.shape());
        let mut dgamma = Tensor::zeros([c, 1, 1, 1]);
        let mut dbeta = Tensor::zeros([c, 1, 1, 1]);
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * p;
                for (j, &gv) in g.plane(i, ch).iter().enumerate() {
                    sum_g += gv;
                    sum_gx += gv * xhat[base + j];
                }
            }
            dgamma.data_mut()[ch] = sum_gx;
            dbeta.data_mut()[ch] = sum_g;
            let scale = gm[ch] * inv_std[ch];
            for i in 0..n {
                let base = (i * c + ch) * p;
                let gp = g.plane(i, ch);
                let dst = dx.plane_mut(i, ch);
                if batch_stats {
                    let (mg, mgx) = (sum_g / count, sum_gx / count);
                    for j in 0..p {
                        dst[j] = scale * (gp[j] - mg - xhat[base + j] * mgx);
                    }
                } else {
                    for j in 0..p {
                        dst[j] = scale * gp[j];
                    }
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
