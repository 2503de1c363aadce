//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a forward computation as a list of nodes, each holding
//! its value and the operation that produced it. [`Tape::backward`] walks the
//! list in reverse and returns the gradient of a scalar node with respect to
//! every node that requires one. Operations are coarse (whole layers, fused
//! losses) so a training step records a few dozen nodes, not millions.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{add_into, col2im, gemm, im2col, ConvGeom, Mat, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Which parameter of a learnable layer a leaf refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    Weight,
    Bias,
}

impl ParamSlot {
    pub fn name(self) -> &'static str {
        match self {
            ParamSlot::Weight => "weight",
            ParamSlot::Bias => "bias",
        }
    }
}

/// Identifies a model parameter by layer position and slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub slot: ParamSlot,
}

enum Value<'m> {
    Owned(Tensor),
    Borrowed(&'m Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    MaxPool { x: usize, argmax: Vec<usize> },
    Relu { x: usize },
    Elu { x: usize, alpha: f64 },
    Reshape { x: usize },
    Add { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Sum { x: usize },
    BinaryCe { logits: usize, targets: Vec<f64> },
    SoftmaxCe { logits: usize, targets: Vec<usize> },
    KlDiv { clean: usize, adv: usize },
    RelativeError { clean: usize, pert: usize, detach: bool },
}

struct Node<'m> {
    value: Value<'m>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'m> {
    id: u64,
    nodes: Vec<Node<'m>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'m> Tape<'m> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'m>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autodiff("variable is not attached to this tape".into()));
        }
        Ok(v.index)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        self.nodes[v.index].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Records an input tensor. Gradients are kept for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Value::Owned(value), Op::Leaf, requires_grad)
    }

    /// Records a borrowed model parameter.
    pub fn param(&mut self, value: &'m Tensor, id: ParamId, requires_grad: bool) -> Var {
        self.push(Value::Borrowed(value), Op::Param(id), requires_grad)
    }

    /// `y = x W^T + b` with `x: N x in`, `W: out x in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::Shape(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, inp, out) = (xv.shape()[0], wv.shape()[1], wv.shape()[0]);
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(bv.data());
        }
        gemm(1.0, Mat::new(xv.data(), n, inp), Mat::new(wv.data(), out, inp).t(), 1.0, &mut y);
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        let value = Tensor::new(vec![n, out], y)?;
        Ok(self.push(Value::Owned(value), Op::Linear { x: xi, w: wi, b: bi }, rg))
    }

    /// Valid (unpadded), stride-1 convolution. `x: N x C x H x W`,
    /// `W: OC x C x kh x kw`, `b: OC`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || xs[2] < ws[2] || xs[3] < ws[3] {
            return Err(Error::Shape(format!("conv2d: input {xs:?} incompatible with weight {ws:?}")));
        }
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kh: ws[2], kw: ws[3] };
        let (n, oc) = (xs[0], ws[0]);
        let (k, p) = (geom.patch_len(), geom.positions());
        let sample_in = geom.channels * geom.height * geom.width;
        let mut cols = vec![0.0; k * p];
        let mut y = vec![0.0; n * oc * p];
        for s in 0..n {
            im2col(&xv.data()[s * sample_in..(s + 1) * sample_in], geom, &mut cols);
            let out = &mut y[s * oc * p..(s + 1) * oc * p];
            for (c, row) in out.chunks_mut(p).enumerate() {
                row.fill(bv.data()[c]);
            }
            gemm(1.0, Mat::new(wv.data(), oc, k), Mat::new(&cols, k, p), 1.0, out);
        }
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        let value = Tensor::new(vec![n, oc, geom.out_h(), geom.out_w()], y)?;
        Ok(self.push(Value::Owned(value), Op::Conv2d { x: xi, w: wi, b: bi, geom }, rg))
    }

    /// Non-overlapping max pooling (stride equals window); trailing rows and
    /// columns that do not fill a window are dropped. Ties go to the first
    /// maximum in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = self.value(x);
        let xs = xv.shape();
        if xs.len() != 4 || kh == 0 || kw == 0 || xs[2] < kh || xs[3] < kw {
            return Err(Error::Shape(format!("max_pool2d: input {xs:?} with window {kh}x{kw}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / kh, w / kw);
        let mut y = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * kh * w + ox * kw;
                    for i in 0..kh {
                        for j in 0..kw {
                            let at = base + (oy * kh + i) * w + ox * kw + j;
                            if data[at] > data[best] {
                                best = at;
                            }
                        }
                    }
                    y.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(xi);
        let value = Tensor::new(vec![n, c, oh, ow], y)?;
        Ok(self.push(Value::Owned(value), Op::MaxPool { x: xi, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(xi);
        Ok(self.push(Value::Owned(value), Op::Relu { x: xi }, rg))
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.value(x).map(|v| if v > 0.0 { v } else { alpha * v.exp_m1() });
        let rg = self.rg(xi);
        Ok(self.push(Value::Owned(value), Op::Elu { x: xi, alpha }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(xi);
        Ok(self.push(Value::Owned(value), Op::Reshape { x: xi }, rg))
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.batch(), t.sample_len()];
        self.reshape(x, shape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Value::Owned(value), Op::Add { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.value(x).scale(c);
        let rg = self.rg(xi);
        Ok(self.push(Value::Owned(value), Op::Scale { x: xi, c }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(xi);
        Ok(self.push(Value::Owned(value), Op::Sum { x: xi }, rg))
    }

    /// Mean binary cross-entropy on raw logits (`N x 1`), targets in {0, 1}.
    pub fn binary_ce(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let li = self.idx(logits)?;
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[1] != 1 || z.shape()[0] != targets.len() {
            return Err(Error::Shape(format!(
                "binary_ce: logits {:?} with {} targets",
                z.shape(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::TargetOutOfRange { target: t, classes: 2 });
        }
        let n = targets.len() as f64;
        let loss = z.data().iter().zip(targets).map(|(&z, &t)| softplus(z) - z * t).sum::<f64>() / n;
        let rg = self.rg(li);
        let op = Op::BinaryCe { logits: li, targets: targets.to_vec() };
        Ok(self.push(Value::Owned(Tensor::scalar(loss)), op, rg))
    }

    /// Mean softmax cross-entropy on logits `N x C` with class-index targets.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[0] != targets.len() {
            return Err(Error::Shape(format!(
                "softmax_ce: logits {:?} with {} targets",
                z.shape(),
                targets.len()
            )));
        }
        let classes = z.shape()[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TargetOutOfRange { target: t as f64, classes });
        }
        let mut loss = 0.0;
        for (row, &t) in z.data().chunks(classes).zip(targets) {
            loss += cross_entropy_row(row, t);
        }
        loss /= targets.len() as f64;
        let rg = self.rg(li);
        let op = Op::SoftmaxCe { logits: li, targets: targets.to_vec() };
        Ok(self.push(Value::Owned(Tensor::scalar(loss)), op, rg))
    }

    /// Batch-mean KL divergence `KL(f(x) || f(x_adv))` between the predictive
    /// distributions given by two logit tensors. A single logit column is
    /// read as a Bernoulli (sigmoid) output, otherwise softmax.
    pub fn kl_div(&mut self, clean: Var, adv: Var) -> Result<Var> {
        let (ci, ai) = (self.idx(clean)?, self.idx(adv)?);
        let (zc, za) = (self.value(clean), self.value(adv));
        zc.check_same_shape(za)?;
        if zc.rank() != 2 {
            return Err(Error::Shape(format!("kl_div: logits must be N x C, got {:?}", zc.shape())));
        }
        let classes = zc.shape()[1];
        let n = zc.shape()[0] as f64;
        let total: f64 = zc
            .data()
            .chunks(classes)
            .zip(za.data().chunks(classes))
            .map(|(c, a)| kl_row(c, a))
            .sum();
        let value = Tensor::scalar((total / n).max(0.0));
        let rg = self.rg(ci) || self.rg(ai);
        Ok(self.push(Value::Owned(value), Op::KlDiv { clean: ci, adv: ai }, rg))
    }

    /// Batch mean of the per-sample relative error `|c - p|_F / |c|_F`.
    ///
    /// A zero clean slice yields 0 when the perturbed slice is also zero and
    /// an error otherwise. With `detach` set, the denominator is treated as a
    /// constant during backpropagation.
    pub fn relative_error(&mut self, clean: Var, pert: Var, detach: bool) -> Result<Var> {
        let (ci, pi) = (self.idx(clean)?, self.idx(pert)?);
        let (c, p) = (self.value(clean), self.value(pert));
        c.check_same_shape(p)?;
        let mut total = 0.0;
        for s in 0..c.batch() {
            total += relative_error(c.sample(s), p.sample(s))?;
        }
        let value = Tensor::scalar(total / c.batch() as f64);
        let rg = self.rg(ci) || self.rg(pi);
        Ok(self.push(Value::Owned(value), Op::RelativeError { clean: ci, pert: pi, detach }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.get().len() != 1 {
            return Err(Error::Autodiff("backward needs a scalar loss".into()));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::Autodiff(
                "loss is not connected to any differentiable input or parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.nodes[*x].value.get(), self.nodes[*w].value.get());
                    let (n, inp, out) = (xv.shape()[0], wv.shape()[1], wv.shape()[0]);
                    let dym = Mat::new(&dy, n, out);
                    if self.rg(*x) {
                        let g = slot(&mut grads, *x, n * inp);
                        gemm(1.0, dym, Mat::new(wv.data(), out, inp), 1.0, g);
                    }
                    if self.rg(*w) {
                        let g = slot(&mut grads, *w, out * inp);
                        gemm(1.0, dym.t(), Mat::new(xv.data(), n, inp), 1.0, g);
                    }
                    if self.rg(*b) {
                        let g = slot(&mut grads, *b, out);
                        for row in dy.chunks(out) {
                            add_into(g, row);
                        }
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (xv, wv) = (self.nodes[*x].value.get(), self.nodes[*w].value.get());
                    let (n, oc) = (xv.shape()[0], wv.shape()[0]);
                    let (k, p) = (geom.patch_len(), geom.positions());
                    let sample_in = geom.channels * geom.height * geom.width;
                    let mut cols = vec![0.0; k * p];
                    let mut dw = self.rg(*w).then(|| vec![0.0; oc * k]);
                    let mut dx = self.rg(*x).then(|| vec![0.0; n * sample_in]);
                    for s in 0..n {
                        let dys = &dy[s * oc * p..(s + 1) * oc * p];
                        if let Some(dw) = dw.as_mut() {
                            im2col(&xv.data()[s * sample_in..(s + 1) * sample_in], *geom, &mut cols);
                            gemm(1.0, Mat::new(dys, oc, p), Mat::new(&cols, k, p).t(), 1.0, dw);
                        }
                        if let Some(dx) = dx.as_mut() {
                            gemm(1.0, Mat::new(wv.data(), oc, k).t(), Mat::new(dys, oc, p), 0.0, &mut cols);
                            col2im(&cols, *geom, &mut dx[s * sample_in..(s + 1) * sample_in]);
                        }
                    }
                    if let Some(dw) = dw {
                        add_into(slot(&mut grads, *w, oc * k), &dw);
                    }
                    if let Some(dx) = dx {
                        add_into(slot(&mut grads, *x, n * sample_in), &dx);
                    }
                    if self.rg(*b) {
                        let g = slot(&mut grads, *b, oc);
                        for (j, plane) in dy.chunks(p).enumerate() {
                            g[j % oc] += plane.iter().sum::<f64>();
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if self.rg(*x) {
                        let len = self.nodes[*x].value.get().len();
                        let g = slot(&mut grads, *x, len);
                        for (&at, &d) in argmax.iter().zip(&dy) {
                            g[at] += d;
                        }
                    }
                }
                Op::Relu { x } => {
                    if self.rg(*x) {
                        let xv = self.nodes[*x].value.get().data();
                        let g = slot(&mut grads, *x, xv.len());
                        for ((g, &d), &v) in g.iter_mut().zip(&dy).zip(xv) {
                            if v > 0.0 {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Elu { x, alpha } => {
                    if self.rg(*x) {
                        let xv = self.nodes[*x].value.get().data();
                        let g = slot(&mut grads, *x, xv.len());
                        for ((g, &d), &v) in g.iter_mut().zip(&dy).zip(xv) {
                            *g += if v > 0.0 { d } else { d * alpha * v.exp() };
                        }
                    }
                }
                Op::Reshape { x } => {
                    if self.rg(*x) {
                        add_into(slot(&mut grads, *x, dy.len()), &dy);
                    }
                }
                Op::Add { a, b } => {
                    for parent in [*a, *b] {
                        if self.rg(parent) {
                            add_into(slot(&mut grads, parent, dy.len()), &dy);
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.rg(*x) {
                        let g = slot(&mut grads, *x, dy.len());
                        for (g, &d) in g.iter_mut().zip(&dy) {
                            *g += c * d;
                        }
                    }
                }
                Op::Sum { x } => {
                    if self.rg(*x) {
                        let len = self.nodes[*x].value.get().len();
                        for g in slot(&mut grads, *x, len) {
                            *g += dy[0];
                        }
                    }
                }
                Op::BinaryCe { logits, targets } => {
                    if self.rg(*logits) {
                        let z = self.nodes[*logits].value.get().data();
                        let scale = dy[0] / targets.len() as f64;
                        let g = slot(&mut grads, *logits, z.len());
                        for ((g, &z), &t) in g.iter_mut().zip(z).zip(targets) {
                            *g += scale * (sigmoid(z) - t);
                        }
                    }
                }
                Op::SoftmaxCe { logits, targets } => {
                    if self.rg(*logits) {
                        let z = self.nodes[*logits].value.get();
                        let classes = z.shape()[1];
                        let scale = dy[0] / targets.len() as f64;
                        let g = slot(&mut grads, *logits, z.len());
                        for ((grow, zrow), &t) in
                            g.chunks_mut(classes).zip(z.data().chunks(classes)).zip(targets)
                        {
                            let lse = log_sum_exp(zrow);
                            for (j, (g, &v)) in grow.iter_mut().zip(zrow).enumerate() {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                *g += scale * ((v - lse).exp() - onehot);
                            }
                        }
                    }
                }
                Op::KlDiv { clean, adv } => {
                    let (zc, za) = (self.nodes[*clean].value.get(), self.nodes[*adv].value.get());
                    let classes = zc.shape()[1];
                    let scale = dy[0] / zc.shape()[0] as f64;
                    let (gc, ga) = kl_row_grads(zc.data(), za.data(), classes);
                    if self.rg(*clean) {
                        let g = slot(&mut grads, *clean, gc.len());
                        for (g, v) in g.iter_mut().zip(gc) {
                            *g += scale * v;
                        }
                    }
                    if self.rg(*adv) {
                        let g = slot(&mut grads, *adv, ga.len());
                        for (g, v) in g.iter_mut().zip(ga) {
                            *g += scale * v;
                        }
                    }
                }
                Op::RelativeError { clean, pert, detach } => {
                    let (c, p) = (self.nodes[*clean].value.get(), self.nodes[*pert].value.get());
                    let scale = dy[0] / c.batch() as f64;
                    let per = c.sample_len();
                    let mut gc = vec![0.0; c.len()];
                    let mut gp = vec![0.0; c.len()];
                    for s in 0..c.batch() {
                        let (cs, ps) = (c.sample(s), p.sample(s));
                        let nc = cs.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nd = cs.iter().zip(ps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                        if nc == 0.0 || nd == 0.0 {
                            continue;
                        }
                        let k = scale / (nd * nc);
                        let shrink = if *detach { 0.0 } else { scale * nd / (nc * nc * nc) };
                        for j in 0..per {
                            let d = cs[j] - ps[j];
                            gc[s * per + j] = k * d - shrink * cs[j];
                            gp[s * per + j] = -k * d;
                        }
                    }
                    if self.rg(*clean) {
                        add_into(slot(&mut grads, *clean, gc.len()), &gc);
                    }
                    if self.rg(*pert) {
                        add_into(slot(&mut grads, *pert, gp.len()), &gp);
                    }
                }
            }
        }

        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Param(id) if node.requires_grad => {
                    let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.get().len()]);
                    // A parameter recorded by several forward passes gets the
                    // sum of its per-node gradients.
                    match params.iter_mut().find(|(p, _)| *p == id) {
                        Some((_, acc)) => add_into(acc.data_mut(), &g),
                        None => params.push((id, Tensor::new(node.value.get().shape().to_vec(), g)?)),
                    }
                }
                Op::Leaf if node.requires_grad => {
                    let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.get().len()]);
                    leaves.push((i, Tensor::new(node.value.get().shape().to_vec(), g)?));
                }
                _ => {}
            }
        }
        Ok(Gradients { tape: self.id, params, leaves })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    params: Vec<(ParamId, Tensor)>,
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a differentiable leaf recorded with
    /// [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.iter().find(|(i, _)| *i == v.index).map(|(_, g)| g)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor)> {
        self.params
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Splits `ln(sum(exp(row)))` into the row maximum and `ln(1 + rest)`, so a
/// dominant entry does not swamp the small remainder.
fn lse_parts(row: &[f64]) -> (f64, f64) {
    let (arg, m) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let rest: f64 = row.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, v)| (v - m).exp()).sum();
    (m, rest.ln_1p())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let (m, tail) = lse_parts(row);
    m + tail
}

/// `-ln softmax(row)[t]`.
fn cross_entropy_row(row: &[f64], t: usize) -> f64 {
    let (m, tail) = lse_parts(row);
    (m - row[t]) + tail
}

fn log_probs(row: &[f64]) -> Vec<f64> {
    if row.len() == 1 {
        // log p, log (1 - p) of a sigmoid
        vec![-softplus(-row[0]), -softplus(row[0])]
    } else {
        let lse = log_sum_exp(row);
        row.iter().map(|v| v - lse).collect()
    }
}

fn kl_row(clean: &[f64], adv: &[f64]) -> f64 {
    let (lp, lq) = (log_probs(clean), log_probs(adv));
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

fn kl_row_grads(zc: &[f64], za: &[f64], classes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gc = Vec::with_capacity(zc.len());
    let mut ga = Vec::with_capacity(za.len());
    for (c, a) in zc.chunks(classes).zip(za.chunks(classes)) {
        if classes == 1 {
            let (p, q) = (sigmoid(c[0]), sigmoid(a[0]));
            gc.push(p * (1.0 - p) * (c[0] - a[0]));
            ga.push(q - p);
        } else {
            let (lp, lq) = (log_probs(c), log_probs(a));
            let kl: f64 = lp.iter().zip(&lq).map(|(x, y)| x.exp() * (x - y)).sum();
            for j in 0..classes {
                let p = lp[j].exp();
                gc.push(p * (lp[j] - lq[j] - kl));
                ga.push(lq[j].exp() - p);
            }
        }
    }
    (gc, ga)
}

/// `|c - p|_F / |c|_F` over flat slices; 0/0 is 0.
pub fn relative_error(clean: &[f64], pert: &[f64]) -> Result<f64> {
    let nc = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nd = clean.iter().zip(pert).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if nc == 0.0 {
        return if nd == 0.0 { Ok(0.0) } else { Err(Error::ZeroReference) };
    }
    Ok(nd / nc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of `f` at `x`, one coordinate at a time.
    fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn linear_hand_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let w = tape.leaf(t(&[2, 2], &[1.0, 1.0, 2.0, 0.0]), false);
        let b = tape.leaf(t(&[2], &[0.5, -0.5]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5, 1.5]);
    }

    #[test]
    fn sum_of_linear_grad_is_outer_product_structure() {
        let x = t(&[1, 3], &[0.3, -1.2, 2.0]);
        let w = t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]);
        let run = |w: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let wv = tape.leaf(w.clone(), true);
            let bv = tape.leaf(Tensor::zeros(&[2]), false);
            let y = tape.linear(xv, wv, bv).unwrap();
            let s = tape.sum(y).unwrap();
            let v = tape.value(s).item();
            (v, tape.backward(s).unwrap().wrt(wv).unwrap().clone())
        };
        let (_, g) = run(&w);
        // d sum(Wx) / dW_ij = x_j for every row i
        assert_eq!(g.data(), &[0.3, -1.2, 2.0, 0.3, -1.2, 2.0]);
        let fd = numeric_grad(&w, 1e-5, |w| run(w).0);
        assert_close(g.data(), &fd, 1e-8);
    }

    #[test]
    fn disconnected_leaf_has_exact_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_blocks_gradient_on_negative_side() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_foreign_or_constant_nodes() {
        let mut other = Tape::new();
        let foreign = other.leaf(Tensor::scalar(1.0), true);
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(foreign), Err(Error::Autodiff(_))));
        let c = tape.leaf(Tensor::scalar(1.0), false);
        assert!(matches!(tape.backward(c), Err(Error::Autodiff(_))));
        let v = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(v), Err(Error::Autodiff(_))));
    }

    #[test]
    fn losses_match_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[2, 1]), false);
        let l = tape.binary_ce(z, &[0.0, 1.0]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let z = tape.leaf(t(&[1, 2], &[10.0, -10.0]), false);
        let l = tape.softmax_ce(z, &[0]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((tape.value(l).item() - expected).abs() < 1e-20);
        assert!((tape.value(l).item() - 2.061e-9).abs() < 1e-12);

        let z = tape.leaf(Tensor::zeros(&[1, 10]), false);
        let l = tape.softmax_ce(z, &[3]).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn losses_reject_bad_targets() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 10]), false);
        assert!(matches!(tape.softmax_ce(z, &[10]), Err(Error::TargetOutOfRange { .. })));
        let z = tape.leaf(Tensor::zeros(&[1, 1]), false);
        assert!(matches!(tape.binary_ce(z, &[2.0]), Err(Error::TargetOutOfRange { .. })));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let z = t(&[3, 4], &[0.2, -1.0, 3.0, 0.5, 1.1, 0.0, -0.7, 2.2, -3.0, 0.4, 0.9, 0.1]);
        let f = |z: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(z.clone(), true);
            let l = tape.softmax_ce(v, &[2, 0, 3]).unwrap();
            (tape.value(l).item(), tape.backward(l).unwrap().wrt(v).unwrap().clone())
        };
        assert_close(f(&z).1.data(), &numeric_grad(&z, 1e-5, |z| f(z).0), 1e-6);

        let zb = t(&[3, 1], &[0.7, -2.0, 4.0]);
        let f = |z: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(z.clone(), true);
            let l = tape.binary_ce(v, &[1.0, 0.0, 0.0]).unwrap();
            (tape.value(l).item(), tape.backward(l).unwrap().wrt(v).unwrap().clone())
        };
        assert_close(f(&zb).1.data(), &numeric_grad(&zb, 1e-5, |z| f(z).0), 1e-6);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        for classes in [1usize, 4] {
            let n = 3;
            let zc = Tensor::new(vec![n, classes], (0..n * classes).map(|i| (i as f64 * 0.9).sin() * 2.0).collect()).unwrap();
            let za = Tensor::new(vec![n, classes], (0..n * classes).map(|i| (i as f64 * 1.7).cos()).collect()).unwrap();
            let f = |zc: &Tensor, za: &Tensor| {
                let mut tape = Tape::new();
                let c = tape.leaf(zc.clone(), true);
                let a = tape.leaf(za.clone(), true);
                let l = tape.kl_div(c, a).unwrap();
                let g = tape.backward(l).unwrap();
                (tape.value(l).item(), g.wrt(c).unwrap().clone(), g.wrt(a).unwrap().clone())
            };
            let (v, gc, ga) = f(&zc, &za);
            assert!(v > 0.0);
            assert_close(gc.data(), &numeric_grad(&zc, 1e-5, |z| f(z, &za).0), 1e-5);
            assert_close(ga.data(), &numeric_grad(&za, 1e-5, |z| f(&zc, z).0), 1e-5);
            // identical distributions
            assert_eq!(f(&zc, &zc).0, 0.0);
        }
    }

    #[test]
    fn relative_error_gradients_match_finite_differences() {
        let c = t(&[2, 3], &[1.0, -2.0, 0.5, 0.3, 0.3, -1.0]);
        let p = t(&[2, 3], &[0.8, -2.5, 1.0, 0.0, 0.6, -0.2]);
        for detach in [false, true] {
            let f = |c: &Tensor, p: &Tensor| {
                let mut tape = Tape::new();
                let cv = tape.leaf(c.clone(), true);
                let pv = tape.leaf(p.clone(), true);
                let r = tape.relative_error(cv, pv, detach).unwrap();
                let g = tape.backward(r).unwrap();
                (tape.value(r).item(), g.wrt(cv).unwrap().clone(), g.wrt(pv).unwrap().clone())
            };
            let (_, gc, gp) = f(&c, &p);
            assert_close(gp.data(), &numeric_grad(&p, 1e-6, |p| f(&c, p).0), 1e-6);
            if !detach {
                assert_close(gc.data(), &numeric_grad(&c, 1e-6, |c| f(c, &p).0), 1e-6);
            }
        }
    }

    #[test]
    fn relative_error_zero_reference() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(relative_error(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroReference)));
        assert_eq!(relative_error(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn conv_and_pool_gradients_match_finite_differences() {
        let x = Tensor::new(vec![2, 2, 5, 6], (0..120).map(|i| (i as f64 * 1.37).sin()).collect()).unwrap();
        let w = Tensor::new(vec![3, 2, 2, 3], (0..36).map(|i| (i as f64 * 0.71).cos() / 2.0).collect()).unwrap();
        let b = t(&[3], &[0.1, -0.2, 0.05]);
        let f = |x: &Tensor, w: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let bv = tape.leaf(b.clone(), true);
            let y = tape.conv2d(xv, wv, bv).unwrap();
            let y = tape.elu(y, 1.0).unwrap();
            let y = tape.max_pool2d(y, 2, 2).unwrap();
            let y = tape.flatten(y).unwrap();
            let s = tape.sum(y).unwrap();
            let g = tape.backward(s).unwrap();
            (tape.value(s).item(), g.wrt(xv).unwrap().clone(), g.wrt(wv).unwrap().clone())
        };
        let (_, gx, gw) = f(&x, &w);
        assert_close(gx.data(), &numeric_grad(&x, 1e-6, |x| f(x, &w).0), 1e-5);
        assert_close(gw.data(), &numeric_grad(&w, 1e-6, |w| f(&x, w).0), 1e-5);
    }

    #[test]
    fn parameter_used_by_two_passes_sums_gradients() {
        let w = t(&[1, 1], &[2.0]);
        let b = t(&[1], &[0.0]);
        let id = |slot| ParamId { layer: 0, slot };
        let mut tape = Tape::new();
        let mut passes = Vec::new();
        for x in [3.0, 5.0] {
            let xv = tape.leaf(t(&[1, 1], &[x]), false);
            let wv = tape.param(&w, id(ParamSlot::Weight), true);
            let bv = tape.param(&b, id(ParamSlot::Bias), true);
            passes.push(tape.linear(xv, wv, bv).unwrap());
        }
        let (a, c) = (passes[0], passes[1]);
        let s = tape.add(a, c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(id(ParamSlot::Weight)).unwrap().data(), &[8.0]);
        assert_eq!(g.param(id(ParamSlot::Bias)).unwrap().data(), &[2.0]);
        assert_eq!(g.params().len(), 2);
    }
}
