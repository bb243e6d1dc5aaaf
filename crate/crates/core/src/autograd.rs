//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends one node whose inputs are earlier nodes, so node order is
//! already a topological order and [`Tape::backward`] is a single reverse sweep.
//! Leaf gradients accumulate across `backward` calls until [`Tape::zero_grad`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::rse::{self, RseSaved};
use crate::tensor::{conv_out_extent, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var, b_index: Option<Vec<usize>> },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    Crop { x: Var, h: usize, w: usize },
    SoftmaxLast { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<Option<usize>>, kept: usize },
    Rse { inputs: [Var; 10], saved: Box<RseSaved> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input. Leaves that require grad start with a zero gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros_like(&value));
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|v| !self.nodes[v.0].value.all_finite()),
            "non-finite output from finite inputs in {op:?}"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    // ── Forward ops ───────────────────────────────────────────────────────

    /// Elementwise `a op b`. `b` may broadcast into `a` along size-1 extents
    /// of the same rank (e.g. a `[B,1,H,W]` weight map over `[B,C,H,W]`).
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let b_index = if sa == sb { None } else { Some(broadcast_index(&sa, &sb)?) };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = match &b_index {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(idx) => av.iter().zip(idx).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let out = Tensor::new(sa, data)?;
        Ok(self.push(out, Op::Binary { kind, a, b, b_index }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scaled(factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::ShapeMismatch { left: sa.to_vec(), right: sb.to_vec() }),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Cross-correlation with zero padding. `w` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (b, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::ShapeMismatch { left: self.shape(x).to_vec(), right: self.shape(w).to_vec() });
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::ShapeMismatch { left: vec![cout], right: self.shape(bv).to_vec() });
            }
        }
        let (oh, ow) = match (conv_out_extent(h, kh, stride, pad), conv_out_extent(wd, kw, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::InvalidShape {
                    shape: vec![b, cin, h, wd],
                    reason: format!("conv {kh}x{kw} stride {stride} pad {pad} has non-positive output extent"),
                })
            }
        };
        let geom = ConvGeom { cin, h, w: wd, kh, kw, stride, pad, oh, ow };
        let (k, n) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; b * cout * n];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * n] };
        for bi in 0..b {
            let img = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let cols: &[f64] = if geom.is_pointwise() {
                img
            } else {
                kernels::im2col(img, &geom, &mut col);
                &col
            };
            let dst = &mut out[bi * cout * n..(bi + 1) * cout * n];
            if let Some(bv) = bias {
                for (co, &bias_v) in self.value(bv).data().iter().enumerate() {
                    dst[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = bias_v);
                }
            }
            kernels::gemm(cout, k, n, wv, false, cols, false, dst, if bias.is_some() { 1.0 } else { 0.0 });
        }
        let out = Tensor::new(vec![b, cout, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv2d { x, w, bias, geom }, &inputs))
    }

    /// Bilinear upsampling by an integer factor (2 or 4), half-pixel centers,
    /// edge-clamped.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor != 2 && factor != 4 {
            return Err(Error::InvalidArgument(format!("upsample factor must be 2 or 4, got {factor}")));
        }
        let (b, c, h, w) = self.value(x).dims4()?;
        let mut out = vec![0.0; b * c * h * w * factor * factor];
        kernels::upsample_planes(self.value(x).data(), b * c, h, w, factor, &mut out);
        let out = Tensor::new(vec![b, c, h * factor, w * factor], out)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    /// Keeps the top-left `h x w` window of every plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (b, c, ih, iw) = self.value(x).dims4()?;
        if h > ih || w > iw || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("cannot crop {ih}x{iw} to {h}x{w}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * h * w);
        for p in 0..b * c {
            for y in 0..h {
                let row = (p * ih + y) * iw;
                out.extend_from_slice(&src[row..row + w]);
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(out, Op::Crop { x, h, w }, &[x]))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let out = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(out, Op::SoftmaxLast { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean { x }, &[x])
    }

    /// Mean per-pixel cross entropy of `[B, K, H, W]` logits against a
    /// `[B, H, W]` label map; pixels equal to `ignore_index` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore_index: usize) -> Result<Var> {
        let (b, k, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if labels.len() != b * hw {
            return Err(Error::ShapeMismatch { left: vec![b, h, w], right: vec![labels.len()] });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * k * hw];
        let mut targets = Vec::with_capacity(labels.len());
        let mut total = 0.0;
        let mut kept = 0usize;
        let mut scratch = vec![0.0; k];
        for bi in 0..b {
            for p in 0..hw {
                for (c, s) in scratch.iter_mut().enumerate() {
                    *s = lv[(bi * k + c) * hw + p];
                }
                let max = scratch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + scratch.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (c, s) in scratch.iter().enumerate() {
                    probs[(bi * k + c) * hw + p] = (s - lse).exp();
                }
                let label = labels[bi * hw + p];
                if label == ignore_index {
                    targets.push(None);
                    continue;
                }
                if label >= k {
                    return Err(Error::InvalidArgument(format!(
                        "label {label} outside [0, {k}) and not the ignore index {ignore_index}"
                    )));
                }
                total += lse - scratch[label];
                kept += 1;
                targets.push(Some(label));
            }
        }
        let loss = if kept == 0 { 0.0 } else { total / kept as f64 };
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, probs, targets, kept }, &[logits]))
    }

    pub(crate) fn push_rse(&mut self, out: Tensor, inputs: [Var; 10], saved: RseSaved) -> Var {
        self.push(out, Op::Rse { inputs, saved: Box::new(saved) }, &inputs)
    }

    // ── Backward ──────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, adding into every reachable leaf's
    /// gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].grad.as_mut().expect("grad leaf").add_assign(&g);
                continue;
            }
            for (input, dx) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dx),
                    slot => *slot = Some(dx),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b, b_index } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ga, gb_full): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryKind::Add => (gd.to_vec(), gd.to_vec()),
                    BinaryKind::Sub => (gd.to_vec(), gd.iter().map(|v| -v).collect()),
                    BinaryKind::Mul => {
                        let b_at = |j: usize| match b_index {
                            None => bv.data()[j],
                            Some(idx) => bv.data()[idx[j]],
                        };
                        let ga = gd.iter().enumerate().map(|(j, gv)| gv * b_at(j)).collect();
                        let gb = gd.iter().zip(av.data()).map(|(gv, x)| gv * x).collect();
                        (ga, gb)
                    }
                };
                let gb = match b_index {
                    None => gb_full,
                    Some(idx) => {
                        let mut red = vec![0.0; bv.len()];
                        for (j, v) in gb_full.into_iter().enumerate() {
                            red[idx[j]] += v;
                        }
                        red
                    }
                };
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga)?),
                    (*b, Tensor::new(bv.shape().to_vec(), gb)?),
                ]
            }
            Op::Scale { x, factor } => vec![(*x, g.scaled(*factor))],
            Op::Relu { x } => {
                let xv = self.value(*x);
                let d = gd.iter().zip(xv.data()).map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 }).collect();
                vec![(*x, Tensor::new(xv.shape().to_vec(), d)?)]
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, gd, false, bv.data(), true, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, av.data(), true, gd, false, &mut db, 0.0);
                vec![(*a, Tensor::new(vec![m, k], da)?), (*b, Tensor::new(vec![k, n], db)?)]
            }
            Op::Conv2d { x, w, bias, geom } => self.conv2d_backward(*x, *w, *bias, geom, gd)?,
            Op::Upsample { x, factor } => {
                let xv = self.value(*x);
                let (b, c, h, w) = xv.dims4()?;
                let mut dx = vec![0.0; xv.len()];
                kernels::upsample_planes_backward(gd, b * c, h, w, *factor, &mut dx);
                vec![(*x, Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::Crop { x, h, w } => {
                let xv = self.value(*x);
                let (b, c, ih, iw) = xv.dims4()?;
                let mut dx = vec![0.0; xv.len()];
                for p in 0..b * c {
                    for y in 0..*h {
                        let src = &gd[(p * h + y) * w..(p * h + y + 1) * w];
                        dx[(p * ih + y) * iw..(p * ih + y) * iw + w].copy_from_slice(src);
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::SoftmaxLast { x } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, Tensor::new(node.value.shape().to_vec(), dx)?)]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::Mean { x } => {
                let n = self.value(*x).len() as f64;
                vec![(*x, Tensor::full(self.shape(*x), gd[0] / n))]
            }
            Op::CrossEntropy { logits, probs, targets, kept } => {
                let lv = self.value(*logits);
                let (b, k, h, w) = lv.dims4()?;
                let hw = h * w;
                let mut d = vec![0.0; lv.len()];
                if *kept > 0 {
                    let s = gd[0] / *kept as f64;
                    for bi in 0..b {
                        for p in 0..hw {
                            let Some(t) = targets[bi * hw + p] else { continue };
                            for c in 0..k {
                                let idx = (bi * k + c) * hw + p;
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                d[idx] = s * (probs[idx] - onehot);
                            }
                        }
                    }
                }
                vec![(*logits, Tensor::new(lv.shape().to_vec(), d)?)]
            }
            Op::Rse { inputs, saved } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = rse::backward_kernel(&values, saved, g)?;
                inputs.iter().copied().zip(grads).collect()
            }
        })
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        gd: &[f64],
    ) -> Result<Vec<(Var, Tensor)>> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (b, cin, h, wd) = xv.dims4()?;
        let cout = wv.shape()[0];
        let (k, n) = (geom.col_rows(), geom.col_cols());
        let need_x = self.requires_grad(x);
        let mut dw = vec![0.0; wv.len()];
        let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
        let mut col = vec![0.0; k * n];
        let mut dcol = vec![0.0; k * n];
        let img_len = cin * h * wd;
        for bi in 0..b {
            let img = &xv.data()[bi * img_len..(bi + 1) * img_len];
            let gb = &gd[bi * cout * n..(bi + 1) * cout * n];
            let cols: &[f64] = if geom.is_pointwise() {
                img
            } else {
                kernels::im2col(img, geom, &mut col);
                &col
            };
            kernels::gemm(cout, n, k, gb, false, cols, true, &mut dw, 1.0);
            if need_x {
                let dimg = &mut dx[bi * img_len..(bi + 1) * img_len];
                if geom.is_pointwise() {
                    kernels::gemm(k, cout, n, wv.data(), true, gb, false, dimg, 1.0);
                } else {
                    kernels::gemm(k, cout, n, wv.data(), true, gb, false, &mut dcol, 0.0);
                    kernels::col2im(&dcol, geom, dimg);
                }
            }
        }
        let mut out = vec![(w, Tensor::new(wv.shape().to_vec(), dw)?)];
        if need_x {
            out.push((x, Tensor::new(xv.shape().to_vec(), dx)?));
        }
        if let Some(bv) = bias {
            let mut db = vec![0.0; cout];
            for bi in 0..b {
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc += gd[(bi * cout + co) * n..(bi * cout + co + 1) * n].iter().sum::<f64>();
                }
            }
            out.push((bv, Tensor::new(vec![cout], db)?));
        }
        Ok(out)
    }
}

/// Flat index into `b` for every flat index of `a`, when `b` broadcasts into `a`.
fn broadcast_index(sa: &[usize], sb: &[usize]) -> Result<Vec<usize>> {
    let compatible = sa.len() == sb.len() && sa.iter().zip(sb).all(|(&x, &y)| x == y || y == 1);
    if !compatible {
        return Err(Error::ShapeMismatch { left: sa.to_vec(), right: sb.to_vec() });
    }
    let rank = sa.len();
    let mut b_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if sb[d] == 1 { 0 } else { acc };
        acc *= sb[d];
    }
    let n: usize = sa.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < sa[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
