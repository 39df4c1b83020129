//! Tape-based reverse-mode differentiation.
//!
//! A `Graph` records every executed op in execution order; `backward`
//! traverses the record exactly once in reverse. Ops are a closed enum so
//! the whole differentiation core stays auditable in one file.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Batch-norm forward mode. Eval carries the running statistics.
pub enum BnMode<T> {
    Train,
    Eval { mean: Vec<T>, var: Vec<T> },
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    AvgPool2d { x: NodeId, k: usize, stride: usize },
    GlobalAvgPool(NodeId),
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    L2Normalize { x: NodeId, axis: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
    SigmoidBce { logits: NodeId, targets: Tensor<T> },
    Sum(NodeId),
    ContrastiveLoss {
        anchor: NodeId,
        positive: NodeId,
        bank: Tensor<T>,
        neg_indices: Vec<usize>,
        tau: T,
        // softmax over the k+1 similarity terms, row-major [B, k+1]
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    // param id -> leaf node, recorded by nn::Param bindings
    bindings: Vec<(u64, NodeId)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bindings: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn bindings(&self) -> &[(u64, NodeId)] {
        &self.bindings
    }

    pub fn bind(&mut self, param_id: u64, node: NodeId) {
        self.bindings.push((param_id, node));
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Ok(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        self.push(value, requires_grad, Op::Leaf, "input")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rq = self.req(a) || self.req(b);
        self.push(value, rq, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rq = self.req(a) || self.req(b);
        self.push(value, rq, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let value = self.nodes[a].value.map(|v| v * c);
        let rq = self.req(a);
        self.push(value, rq, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rq = self.req(a);
        self.push(value, rq, Op::Relu(a), "relu")
    }

    /// y = x · wᵀ + b with x:[N,I], w:[O,I], b:[O].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.nodes[x].value.shape().to_vec(),
            self.nodes[w].value.shape().to_vec(),
            self.nodes[b].value.shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "linear x{:?} w{:?} b{:?}",
                xs, ws, bs
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        let bv = self.nodes[b].value.data();
        let mut out = vec![T::zero(); n * o];
        for r in 0..n {
            let xrow = &xv[r * i..(r + 1) * i];
            let orow = &mut out[r * o..(r + 1) * o];
            for (oc, ov) in orow.iter_mut().enumerate() {
                let wrow = &wv[oc * i..(oc + 1) * i];
                let mut acc = T::zero();
                for (xe, we) in xrow.iter().zip(wrow) {
                    acc = acc + *xe * *we;
                }
                *ov = acc + bv[oc];
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let rq = self.req(x) || self.req(w) || self.req(b);
        self.push(value, rq, Op::Linear { x, w, b }, "linear")
    }

    /// Cross-correlation with zero padding. x:[N,C,H,W], w:[F,C,kh,kw].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d x{:?} w{:?}", xs, ws)));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, cw, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != cw {
            return Err(Error::Shape(format!("conv2d channels {} vs {}", c, cw)));
        }
        if stride < 1 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d kernel {}x{} too large for {}x{} (pad {})",
                kh, kw, h, wd, pad
            )));
        }
        if let Some(bid) = b {
            let bs = self.nodes[bid].value.shape();
            if bs != [f] {
                return Err(Error::Shape(format!("conv2d bias {:?} for {} filters", bs, f)));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        let mut out = vec![T::zero(); n * f * oh * ow];
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        let mut padded = vec![T::zero(); c * ph * pw];
        for ni in 0..n {
            pad_image(&xv[ni * c * h * wd..(ni + 1) * c * h * wd], c, h, wd, pad, &mut padded);
            for fi in 0..f {
                let orow = &mut out[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                if let Some(bid) = b {
                    let bv = self.nodes[bid].value.data()[fi];
                    orow.iter_mut().for_each(|v| *v = bv);
                }
                for ci in 0..c {
                    let plane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wv[((fi * c + ci) * kh + ky) * kw + kx];
                            for oy in 0..oh {
                                let src = &plane[(oy * stride + ky) * pw + kx..];
                                let dst = &mut orow[oy * ow..(oy + 1) * ow];
                                if stride == 1 {
                                    for (d, s) in dst.iter_mut().zip(&src[..ow]) {
                                        *d = *d + wv * *s;
                                    }
                                } else {
                                    for (ox, d) in dst.iter_mut().enumerate() {
                                        *d = *d + wv * src[ox * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        let rq = self.req(x) || self.req(w) || b.map(|bid| self.req(bid)).unwrap_or(false);
        self.push(value, rq, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 || k == 0 || stride == 0 || k > xs[2] || k > xs[3] {
            return Err(Error::Shape(format!("avg_pool2d {:?} k={} s={}", xs, k, stride)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let xv = self.nodes[x].value.data();
        let inv = T::from_f64(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for img in 0..n * c {
            let plane = &xv[img * h * w..(img + 1) * h * w];
            let oplane = &mut out[img * oh * ow..(img + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc = acc + plane[(oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    oplane[oy * ow + ox] = acc * inv;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rq = self.req(x);
        self.push(value, rq, Op::AvgPool2d { x, k, stride }, "avg_pool2d")
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let xv = self.nodes[x].value.data();
        let mut out = vec![T::zero(); n * c];
        for (img, o) in out.iter_mut().enumerate() {
            let plane = &xv[img * h * w..(img + 1) * h * w];
            let mut acc = T::zero();
            for &v in plane {
                acc = acc + v;
            }
            *o = acc * inv;
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rq = self.req(x);
        self.push(value, rq, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Returns the node plus, in train mode, the batch (mean, biased var) per
    /// channel so callers can maintain running statistics.
    pub fn batch_norm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        mode: BnMode<T>,
    ) -> Result<(NodeId, Option<(Vec<T>, Vec<T>)>)> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("batch_norm2d {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.nodes[gamma].value.shape() != [c] || self.nodes[beta].value.shape() != [c] {
            return Err(Error::Shape("batch_norm2d gamma/beta".into()));
        }
        let m = n * h * w;
        let xv = self.nodes[x].value.data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_m = T::from_f64(1.0 / m as f64);
                for ci in 0..c {
                    let mut acc = T::zero();
                    for ni in 0..n {
                        let plane = &xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        for &v in plane {
                            acc = acc + v;
                        }
                    }
                    mean[ci] = acc * inv_m;
                    let mut vacc = T::zero();
                    for ni in 0..n {
                        let plane = &xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        for &v in plane {
                            let d = v - mean[ci];
                            vacc = vacc + d * d;
                        }
                    }
                    var[ci] = vacc * inv_m;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("batch_norm2d running stats".into()));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.nodes[gamma].value.data();
        let bv = self.nodes[beta].value.data();
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for (o, &v) in out[base..base + h * w].iter_mut().zip(&xv[base..base + h * w]) {
                    *o = ga * (v - mu) * is + be;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let rq = self.req(x) || self.req(gamma) || self.req(beta);
        let stats = train.then(|| (mean.clone(), var.clone()));
        let id = self.push(
            value,
            rq,
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train },
            "batch_norm2d",
        )?;
        Ok((id, stats))
    }

    /// x / ‖x‖₂ along `axis`. Errors if any lane has norm below 1e-12.
    pub fn l2_normalize(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if axis >= xs.len() {
            return Err(Error::Shape(format!("l2_normalize axis {} of {:?}", axis, xs)));
        }
        let xv = self.nodes[x].value.data();
        let mut out = vec![T::zero(); xv.len()];
        let floor = T::from_f64(1e-12);
        for_each_lane(&xs, axis, |start, stride, len| {
            let mut sq = T::zero();
            for i in 0..len {
                let v = xv[start + i * stride];
                sq = sq + v * v;
            }
            let r = sq.sqrt();
            if r < floor {
                return Err(Error::Degenerate(format!(
                    "l2_normalize on vector with norm {:.3e}",
                    r.to_f64()
                )));
            }
            for i in 0..len {
                out[start + i * stride] = xv[start + i * stride] / r;
            }
            Ok(())
        })?;
        let value = Tensor::new(xs, out)?;
        let rq = self.req(x);
        self.push(value, rq, Op::L2Normalize { x, axis }, "l2_normalize")
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rq = parts.iter().any(|&p| self.req(p));
        self.push(value, rq, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// Mean over the batch of −log softmax(logits)[target].
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let ls = self.nodes[logits].value.shape().to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy logits {:?}, {} targets",
                ls,
                targets.len()
            )));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("class index {} out of {}", t, c)));
        }
        let lv = self.nodes[logits].value.data();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(row[0], T::max);
            let mut denom = T::zero();
            for &v in row {
                denom = denom + (v - m).exp();
            }
            loss = loss + m + denom.ln() - row[t];
        }
        let value = Tensor::scalar(loss / T::from_f64(n as f64));
        let rq = self.req(logits);
        self.push(value, rq, Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec() }, "softmax_cross_entropy")
    }

    /// Mean over all elements of −y·logσ(x) − (1−y)·log(1−σ(x)).
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: Tensor<T>) -> Result<NodeId> {
        let ls = self.nodes[logits].value.shape();
        if ls != targets.shape() {
            return Err(Error::Shape(format!(
                "sigmoid_bce logits {:?} vs targets {:?}",
                ls,
                targets.shape()
            )));
        }
        let lv = self.nodes[logits].value.data();
        let tv = targets.data();
        let mut loss = T::zero();
        for (&x, &y) in lv.iter().zip(tv) {
            // softplus(x) - x*y, with softplus(x) = max(x,0) + ln(1+e^{-|x|})
            let sp = x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln();
            loss = loss + sp - x * y;
        }
        let value = Tensor::scalar(loss / T::from_f64(lv.len() as f64));
        let rq = self.req(logits);
        self.push(value, rq, Op::SigmoidBce { logits, targets }, "sigmoid_bce")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.nodes[x].value.data() {
            acc = acc + v;
        }
        let rq = self.req(x);
        self.push(Tensor::scalar(acc), rq, Op::Sum(x), "sum")
    }

    /// The k-negative contrastive loss, mean over the batch, computed exactly
    /// in log space. `bank` rows indexed by `neg_indices` ([B·k], row-major)
    /// supply the negatives and receive no gradient.
    pub fn contrastive_loss(
        &mut self,
        anchor: NodeId,
        positive: NodeId,
        bank: Tensor<T>,
        neg_indices: Vec<usize>,
        tau: T,
    ) -> Result<NodeId> {
        let ashape = self.nodes[anchor].value.shape().to_vec();
        let pshape = self.nodes[positive].value.shape().to_vec();
        if ashape.len() != 2 || ashape != pshape {
            return Err(Error::Shape(format!(
                "contrastive_loss anchor {:?} vs positive {:?}",
                ashape, pshape
            )));
        }
        let (bsz, d) = (ashape[0], ashape[1]);
        if bank.shape().len() != 2 || bank.shape()[1] != d {
            return Err(Error::Shape(format!(
                "contrastive_loss bank {:?} for d={}",
                bank.shape(),
                d
            )));
        }
        if tau <= T::zero() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if neg_indices.len() % bsz != 0 || neg_indices.is_empty() {
            return Err(Error::Shape("neg_indices must be [B*k], k >= 1".into()));
        }
        let k = neg_indices.len() / bsz;
        let n_rows = bank.shape()[0];
        if let Some(&i) = neg_indices.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Shape(format!("negative index {} out of bank size {}", i, n_rows)));
        }
        let av = self.nodes[anchor].value.data();
        let pv = self.nodes[positive].value.data();
        let bv = bank.data();
        let tol = T::from_f64(1e-3);
        let inv_tau = T::one() / tau;
        let mut probs = vec![T::zero(); bsz * (k + 1)];
        let mut loss = T::zero();
        let mut logits = vec![T::zero(); k + 1];
        for b in 0..bsz {
            let a = &av[b * d..(b + 1) * d];
            let p = &pv[b * d..(b + 1) * d];
            for (name, v) in [("anchor", a), ("positive", p)] {
                let nrm: T = v.iter().map(|&x| x * x).sum::<T>().sqrt();
                if (nrm - T::one()).abs() > tol {
                    return Err(Error::Degenerate(format!(
                        "contrastive_loss {} row {} has norm {:.6}",
                        name,
                        b,
                        nrm.to_f64()
                    )));
                }
            }
            logits[0] = dot(a, p) * inv_tau;
            for j in 0..k {
                let row = neg_indices[b * k + j];
                logits[j + 1] = dot(a, &bv[row * d..(row + 1) * d]) * inv_tau;
            }
            let m = logits.iter().cloned().fold(logits[0], T::max);
            let mut denom = T::zero();
            for &l in logits.iter() {
                denom = denom + (l - m).exp();
            }
            for (j, &l) in logits.iter().enumerate() {
                probs[b * (k + 1) + j] = (l - m).exp() / denom;
            }
            loss = loss + m + denom.ln() - logits[0];
        }
        let value = Tensor::scalar(loss / T::from_f64(bsz as f64));
        let rq = self.req(anchor) || self.req(positive);
        self.push(
            value,
            rq,
            Op::ContrastiveLoss { anchor, positive, bank, neg_indices, tau, probs },
            "contrastive_loss",
        )
    }

    /// Propagate dLoss through the tape. `loss` must be a recorded scalar.
    /// Repeated calls accumulate into leaf gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::Shape("backward on unknown node".into()));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward on non-scalar of shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        if matches!(self.nodes[loss].op, Op::Leaf) {
            return Err(Error::Numeric("backward with empty tape".into()));
        }
        let mut local: Vec<Option<Vec<T>>> = vec![None; loss + 1];
        local[loss] = Some(vec![T::one()]);
        for id in (0..=loss).rev() {
            let Some(g) = local[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let shape = self.nodes[id].value.shape().to_vec();
                let node = &mut self.nodes[id];
                let grad = node.grad.get_or_insert_with(|| Tensor::zeros(&shape));
                for (a, b) in grad.data_mut().iter_mut().zip(&g) {
                    *a = *a + *b;
                }
                continue;
            }
            self.propagate(id, &g, &mut local);
        }
        Ok(())
    }

    fn propagate(&self, id: NodeId, g: &[T], local: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let acc = |local: &mut [Option<Vec<T>>], pid: NodeId, contrib: &[T]| {
            if !nodes[pid].requires_grad {
                return;
            }
            let slot = local[pid].get_or_insert_with(|| vec![T::zero(); nodes[pid].value.numel()]);
            for (a, b) in slot.iter_mut().zip(contrib) {
                *a = *a + *b;
            }
        };
        match &nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                acc(local, *a, g);
                acc(local, *b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                let ga: Vec<T> = g.iter().zip(vb).map(|(&gg, &v)| gg * v).collect();
                let gb: Vec<T> = g.iter().zip(va).map(|(&gg, &v)| gg * v).collect();
                acc(local, *a, &ga);
                acc(local, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&gg| gg * *c).collect();
                acc(local, *a, &ga);
            }
            Op::Relu(a) => {
                let va = nodes[*a].value.data();
                let ga: Vec<T> = g
                    .iter()
                    .zip(va)
                    .map(|(&gg, &v)| if v > T::zero() { gg } else { T::zero() })
                    .collect();
                acc(local, *a, &ga);
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[*x].value.shape();
                let ws = nodes[*w].value.shape();
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                let xv = nodes[*x].value.data();
                let wv = nodes[*w].value.data();
                if nodes[*x].requires_grad {
                    let mut gx = vec![T::zero(); n * i];
                    for r in 0..n {
                        for oc in 0..o {
                            let gg = g[r * o + oc];
                            let wrow = &wv[oc * i..(oc + 1) * i];
                            let grow = &mut gx[r * i..(r + 1) * i];
                            for (ge, we) in grow.iter_mut().zip(wrow) {
                                *ge = *ge + gg * *we;
                            }
                        }
                    }
                    acc(local, *x, &gx);
                }
                if nodes[*w].requires_grad {
                    let mut gw = vec![T::zero(); o * i];
                    for r in 0..n {
                        let xrow = &xv[r * i..(r + 1) * i];
                        for oc in 0..o {
                            let gg = g[r * o + oc];
                            let grow = &mut gw[oc * i..(oc + 1) * i];
                            for (ge, xe) in grow.iter_mut().zip(xrow) {
                                *ge = *ge + gg * *xe;
                            }
                        }
                    }
                    acc(local, *w, &gw);
                }
                if nodes[*b].requires_grad {
                    let mut gb = vec![T::zero(); o];
                    for r in 0..n {
                        for oc in 0..o {
                            gb[oc] = gb[oc] + g[r * o + oc];
                        }
                    }
                    acc(local, *b, &gb);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, id, g, local, &acc);
            }
            Op::AvgPool2d { x, k, stride } => {
                let xs = nodes[*x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let oh = (h - k) / stride + 1;
                let ow = (w - k) / stride + 1;
                let inv = T::from_f64(1.0 / (k * k) as f64);
                let mut gx = vec![T::zero(); n * c * h * w];
                for img in 0..n * c {
                    let gplane = &g[img * oh * ow..(img + 1) * oh * ow];
                    let xplane = &mut gx[img * h * w..(img + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gg = gplane[oy * ow + ox] * inv;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let idx = (oy * stride + ky) * w + ox * stride + kx;
                                    xplane[idx] = xplane[idx] + gg;
                                }
                            }
                        }
                    }
                }
                acc(local, *x, &gx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = nodes[*x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut gx = vec![T::zero(); n * c * h * w];
                for img in 0..n * c {
                    let gg = g[img] * inv;
                    for v in gx[img * h * w..(img + 1) * h * w].iter_mut() {
                        *v = gg;
                    }
                }
                acc(local, *x, &gx);
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let xs = nodes[*x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let m = n * h * w;
                let xv = nodes[*x].value.data();
                let gv = nodes[*gamma].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); xv.len()];
                let inv_m = T::from_f64(1.0 / m as f64);
                for ci in 0..c {
                    let (mu, is) = (mean[ci], inv_std[ci]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for j in 0..h * w {
                            let gg = g[base + j];
                            let xhat = (xv[base + j] - mu) * is;
                            sum_g = sum_g + gg;
                            sum_gx = sum_gx + gg * xhat;
                        }
                    }
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;
                    let ga = gv[ci];
                    if *train {
                        let mg = sum_g * inv_m;
                        let mgx = sum_gx * inv_m;
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for j in 0..h * w {
                                let xhat = (xv[base + j] - mu) * is;
                                gx[base + j] = ga * is * (g[base + j] - mg - xhat * mgx);
                            }
                        }
                    } else {
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for j in 0..h * w {
                                gx[base + j] = ga * is * g[base + j];
                            }
                        }
                    }
                }
                acc(local, *x, &gx);
                acc(local, *gamma, &dgamma);
                acc(local, *beta, &dbeta);
            }
            Op::L2Normalize { x, axis } => {
                let xs = nodes[*x].value.shape().to_vec();
                let xv = nodes[*x].value.data();
                let yv = nodes[id].value.data();
                let mut gx = vec![T::zero(); xv.len()];
                for_each_lane(&xs, *axis, |start, stride, len| {
                    let mut sq = T::zero();
                    let mut gy = T::zero();
                    for i in 0..len {
                        let idx = start + i * stride;
                        sq = sq + xv[idx] * xv[idx];
                        gy = gy + g[idx] * yv[idx];
                    }
                    let r = sq.sqrt();
                    for i in 0..len {
                        let idx = start + i * stride;
                        gx[idx] = (g[idx] - yv[idx] * gy) / r;
                    }
                    Ok::<(), std::convert::Infallible>(())
                })
                .expect("lane norms checked in forward");
                acc(local, *x, &gx);
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[id].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let plen = nodes[p].value.shape()[*axis];
                    if nodes[p].requires_grad {
                        let mut gp = vec![T::zero(); nodes[p].value.numel()];
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            let dst = o * plen * inner;
                            gp[dst..dst + plen * inner]
                                .copy_from_slice(&g[src..src + plen * inner]);
                        }
                        acc(local, p, &gp);
                    }
                    offset += plen;
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let ls = nodes[*logits].value.shape();
                let (n, c) = (ls[0], ls[1]);
                let lv = nodes[*logits].value.data();
                let gscale = g[0] / T::from_f64(n as f64);
                let mut gl = vec![T::zero(); n * c];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv[r * c..(r + 1) * c];
                    let m = row.iter().cloned().fold(row[0], T::max);
                    let mut denom = T::zero();
                    for &v in row {
                        denom = denom + (v - m).exp();
                    }
                    for j in 0..c {
                        let p = (row[j] - m).exp() / denom;
                        let delta = if j == t { T::one() } else { T::zero() };
                        gl[r * c + j] = (p - delta) * gscale;
                    }
                }
                acc(local, *logits, &gl);
            }
            Op::SigmoidBce { logits, targets } => {
                let lv = nodes[*logits].value.data();
                let tv = targets.data();
                let gscale = g[0] / T::from_f64(lv.len() as f64);
                let gl: Vec<T> = lv
                    .iter()
                    .zip(tv)
                    .map(|(&x, &y)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        (s - y) * gscale
                    })
                    .collect();
                acc(local, *logits, &gl);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; nodes[*x].value.numel()];
                acc(local, *x, &gx);
            }
            Op::ContrastiveLoss { anchor, positive, bank, neg_indices, tau, probs } => {
                let d = nodes[*anchor].value.shape()[1];
                let bsz = nodes[*anchor].value.shape()[0];
                let k = neg_indices.len() / bsz;
                let av = nodes[*anchor].value.data();
                let pv = nodes[*positive].value.data();
                let bv = bank.data();
                let scale = g[0] / (T::from_f64(bsz as f64) * *tau);
                let mut ga = vec![T::zero(); bsz * d];
                let mut gp = vec![T::zero(); bsz * d];
                for b in 0..bsz {
                    let p0 = probs[b * (k + 1)];
                    let coef_pos = (p0 - T::one()) * scale;
                    let arow = &av[b * d..(b + 1) * d];
                    let prow = &pv[b * d..(b + 1) * d];
                    {
                        let garow = &mut ga[b * d..(b + 1) * d];
                        for (ge, pe) in garow.iter_mut().zip(prow) {
                            *ge = *ge + coef_pos * *pe;
                        }
                        for j in 0..k {
                            let coef = probs[b * (k + 1) + j + 1] * scale;
                            let nrow = &bv[neg_indices[b * k + j] * d..][..d];
                            for (ge, ne) in garow.iter_mut().zip(nrow) {
                                *ge = *ge + coef * *ne;
                            }
                        }
                    }
                    let gprow = &mut gp[b * d..(b + 1) * d];
                    for (ge, ae) in gprow.iter_mut().zip(arow) {
                        *ge = *ge + coef_pos * *ae;
                    }
                }
                acc(local, *anchor, &ga);
                acc(local, *positive, &gp);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out: NodeId,
        g: &[T],
        local: &mut [Option<Vec<T>>],
        acc: &impl Fn(&mut [Option<Vec<T>>], NodeId, &[T]),
    ) {
        let nodes = &self.nodes;
        let xs = nodes[x].value.shape();
        let ws = nodes[w].value.shape();
        let os = nodes[out].value.shape();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        let xv = nodes[x].value.data();
        let wv = nodes[w].value.data();
        let need_x = nodes[x].requires_grad;
        let need_w = nodes[w].requires_grad;
        let mut gx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![T::zero(); wv.len()] } else { Vec::new() };
        let mut padded = vec![T::zero(); c * ph * pw];
        let mut gpadded = vec![T::zero(); c * ph * pw];
        for ni in 0..n {
            if need_w || need_x {
                pad_image(&xv[ni * c * h * wd..(ni + 1) * c * h * wd], c, h, wd, pad, &mut padded);
            }
            if need_x {
                gpadded.iter_mut().for_each(|v| *v = T::zero());
            }
            for fi in 0..f {
                let gplane = &g[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((fi * c + ci) * kh + ky) * kw + kx;
                            let wval = wv[widx];
                            let mut wacc = T::zero();
                            for oy in 0..oh {
                                let row_base = (oy * stride + ky) * pw + kx;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                if need_w {
                                    let src = &padded[ci * ph * pw + row_base..];
                                    if stride == 1 {
                                        for (ge, se) in grow.iter().zip(&src[..ow]) {
                                            wacc = wacc + *ge * *se;
                                        }
                                    } else {
                                        for (ox, ge) in grow.iter().enumerate() {
                                            wacc = wacc + *ge * src[ox * stride];
                                        }
                                    }
                                }
                                if need_x {
                                    let dst = &mut gpadded[ci * ph * pw + row_base..];
                                    if stride == 1 {
                                        for (ge, de) in grow.iter().zip(dst[..ow].iter_mut()) {
                                            *de = *de + wval * *ge;
                                        }
                                    } else {
                                        for (ox, ge) in grow.iter().enumerate() {
                                            dst[ox * stride] = dst[ox * stride] + wval * *ge;
                                        }
                                    }
                                }
                            }
                            if need_w {
                                gw[widx] = gw[widx] + wacc;
                            }
                        }
                    }
                }
            }
            if need_x {
                // crop padding back off
                for ci in 0..c {
                    for y in 0..h {
                        let src = ci * ph * pw + (y + pad) * pw + pad;
                        let dst = (ni * c + ci) * h * wd + y * wd;
                        for xx in 0..wd {
                            gx[dst + xx] = gx[dst + xx] + gpadded[src + xx];
                        }
                    }
                }
            }
        }
        if need_x {
            acc(local, x, &gx);
        }
        if need_w {
            acc(local, w, &gw);
        }
        if let Some(bid) = b {
            if nodes[bid].requires_grad {
                let mut gb = vec![T::zero(); f];
                for ni in 0..n {
                    for fi in 0..f {
                        let gplane = &g[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                        let mut s = T::zero();
                        for &v in gplane {
                            s = s + v;
                        }
                        gb[fi] = gb[fi] + s;
                    }
                }
                acc(local, bid, &gb);
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

fn pad_image<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, pad: usize, out: &mut [T]) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if pad == 0 {
        out.copy_from_slice(src);
        return;
    }
    out.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..c {
        for y in 0..h {
            let s = ci * h * w + y * w;
            let d = ci * ph * pw + (y + pad) * pw + pad;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
}

/// Visit every 1-d lane along `axis`: calls f(start, stride, len).
fn for_each_lane<T, E>(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(usize, usize, usize) -> std::result::Result<T, E>,
) -> std::result::Result<(), E> {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..stride {
            f(o * len * stride + i, stride, len)?;
        }
    }
    Ok(())
}
