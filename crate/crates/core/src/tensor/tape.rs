use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{self, sigmoid};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    /// Matrix `[r×c]` plus a `[c]` vector added to every row.
    AddRowVector(Var, Var),
    /// Matrix `[r×c]` with row `i` multiplied by `v[i]`.
    MulRows(Var, Var),
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    SumAll(Var),
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    Max { parts: Vec<Var>, argmax: Vec<usize> },
    Softmax(Var),
    GroupNorm {
        input: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Select { input: Var, index: usize },
    Reshape(Var),
    Bce { logits: Var, targets: Vec<Option<f64>> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Eagerly evaluated operation record for one forward pass.
///
/// A tape is single-threaded; build a fresh one per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Adds every bound parameter's gradient into the store's accumulators.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (&id, &var) in &tape.bound {
            if let Some(g) = self.get(var) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (an input being differentiated).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf. Binding the same id twice on one
    /// tape returns the existing handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.shared_value(),
            op: Op::Leaf,
            requires_grad: p.requires_grad(),
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::dim(op, self.shape(v), &[0, 0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, p) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * p];
        ops::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, p], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// `m[r×c] + v[c]`, broadcasting `v` over rows.
    pub fn add_row_vector(&mut self, m: Var, v: Var) -> Result<Var> {
        let (_, c) = self.mat("add_row_vector", m)?;
        if self.shape(v) != [c] {
            return Err(Error::dim("add_row_vector", self.shape(m), self.shape(v)));
        }
        let bias = self.value(v).data();
        let mut out = self.value(m).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let rg = self.rg(&[m, v]);
        Ok(self.push(out, Op::AddRowVector(m, v), rg))
    }

    /// `m[r×c] ⊙ v[r]`: row `i` of `m` scaled by `v[i]`.
    pub fn broadcast_mul(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.mat("broadcast_mul", m)?;
        if self.shape(v) != [r] {
            return Err(Error::dim("broadcast_mul", self.shape(m), self.shape(v)));
        }
        let w = self.value(v).data();
        let mut out = self.value(m).clone();
        for (row, &s) in out.data_mut().chunks_mut(c).zip(w) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(&[m, v]);
        Ok(self.push(out, Op::MulRows(m, v), rg))
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    fn reduce_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::dim(op, shape, &[axis]));
        }
        let (outer, len, inner) = Self::axis_split(shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((out_shape, out))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis("sum_axis", a, axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { input: a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut out) = self.reduce_axis("mean_axis", a, axis)?;
        let len = self.shape(a)[axis] as f64;
        out.iter_mut().for_each(|v| *v /= len);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MeanAxis { input: a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat_lastdim", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Coordinate-wise maximum over same-shape tensors. The gradient flows to
    /// the first (lowest-index) maximiser of each coordinate.
    pub fn elementwise_max(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("elementwise_max of zero tensors".into()))?;
        for &p in &parts[1..] {
            self.same_shape("elementwise_max", first, p)?;
        }
        let mut out = self.value(first).clone();
        let mut argmax = vec![0; out.numel()];
        for (k, &p) in parts.iter().enumerate().skip(1) {
            for ((o, am), &v) in out
                .data_mut()
                .iter_mut()
                .zip(argmax.iter_mut())
                .zip(self.value(p).data())
            {
                if v > *o {
                    *o = v;
                    *am = k;
                }
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Max {
                parts: parts.to_vec(),
                argmax,
            },
            rg,
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let len = *t.shape().last().unwrap_or(&1);
        let mut out = t.clone();
        ops::softmax_rows(out.data_mut(), len);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Group normalisation of an `[n×d]` map: channels are split into
    /// `groups` contiguous blocks and each block is normalised jointly over all
    /// `n` positions, then scaled and shifted per channel.
    pub fn group_norm(
        &mut self,
        a: Var,
        groups: usize,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var> {
        let (n, d) = self.mat("group_norm", a)?;
        if groups == 0 || d % groups != 0 {
            return Err(Error::Config(format!(
                "{d} channels cannot be split into {groups} groups"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("group norm eps must be positive, got {eps}")));
        }
        for v in [scale, shift] {
            if self.shape(v) != [d] {
                return Err(Error::dim("group_norm", self.shape(a), self.shape(v)));
            }
        }
        let cg = d / groups;
        let count = (n * cg) as f64;
        let x = self.value(a).data();
        let (gamma, beta) = (self.value(scale).data(), self.value(shift).data());
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; n * d];
        for g in 0..groups {
            let chans = g * cg..(g + 1) * cg;
            let mut mean = 0.0;
            for p in 0..n {
                mean += x[p * d + chans.start..p * d + chans.end].iter().sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for p in 0..n {
                for c in chans.clone() {
                    let dv = x[p * d + c] - mean;
                    var += dv * dv;
                }
            }
            var /= count;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[g] = inv;
            for p in 0..n {
                for c in chans.clone() {
                    let xh = (x[p * d + c] - mean) * inv;
                    normalized[p * d + c] = xh;
                    out[p * d + c] = xh * gamma[c] + beta[c];
                }
            }
        }
        let rg = self.rg(&[a, scale, shift]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::GroupNorm {
                input: a,
                scale,
                shift,
                groups,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Slice `index` along the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::dim("select", shape, &[index]));
        }
        let inner: usize = shape[1..].iter().product();
        let sub_shape = shape[1..].to_vec();
        let data = self.value(a).data()[index * inner..(index + 1) * inner].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&sub_shape, data)?, Op::Select { input: a, index }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Sum of per-element binary cross-entropies on logits. Entries whose
    /// target is `None` are masked: they add neither loss nor gradient.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[Option<f64>]) -> Result<Var> {
        let x = self.value(logits);
        if x.numel() != targets.len() {
            return Err(Error::dim("bce_with_logits", x.shape(), &[targets.len()]));
        }
        if let Some(t) = targets.iter().flatten().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Contract(format!("BCE target {t} outside [0, 1]")));
        }
        let loss = x
            .data()
            .iter()
            .zip(targets)
            .filter_map(|(&l, t)| t.map(|t| ops::bce_with_logits(l, t)))
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Convenience: backward and accumulate parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, store);
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let p = self.value(*b).dims2().unwrap().1;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    ops::matmul_bt_acc(gd, self.value(*b).data(), &mut ga, m, k, p);
                    self.acc(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * p];
                    ops::matmul_at_acc(self.value(*a).data(), gd, &mut gb, m, k, p);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = gd[j * r + i];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, gd.iter().zip(y).map(|(g, y)| g * y).collect());
                self.acc(grads, *b, gd.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, f) => self.acc(grads, *a, gd.iter().map(|g| g * f).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc(grads, *a, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::AddRowVector(m, v) => {
                self.acc(grads, *m, gd.to_vec());
                if self.requires_grad(*v) {
                    let c = self.shape(*v)[0];
                    let mut gv = vec![0.0; c];
                    for row in gd.chunks(c) {
                        gv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.acc(grads, *v, gv);
                }
            }
            Op::MulRows(m, v) => {
                let c = self.value(*m).dims2().unwrap().1;
                let w = self.value(*v).data();
                if self.requires_grad(*m) {
                    let gm = gd
                        .chunks(c)
                        .zip(w)
                        .flat_map(|(row, &s)| row.iter().map(move |g| g * s))
                        .collect();
                    self.acc(grads, *m, gm);
                }
                if self.requires_grad(*v) {
                    let x = self.value(*m).data();
                    let gv = gd.chunks(c).zip(x.chunks(c)).map(|(g, x)| ops::dot(g, x)).collect();
                    self.acc(grads, *v, gv);
                }
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let shape = self.shape(*input);
                let (outer, len, inner) = Self::axis_split(shape, *axis);
                let f = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] = gd[o * inner + i] * f;
                        }
                    }
                }
                self.acc(grads, *input, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![gd[0]; n]);
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Max { parts, argmax } => {
                for (k, &p) in parts.iter().enumerate() {
                    if self.requires_grad(p) {
                        let gp = gd
                            .iter()
                            .zip(argmax)
                            .map(|(&g, &am)| if am == k { g } else { 0.0 })
                            .collect();
                        self.acc(grads, p, gp);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let len = *node.value.shape().last().unwrap_or(&1);
                let mut ga = vec![0.0; y.len()];
                for ((gout, yr), gr) in ga.chunks_mut(len).zip(y.chunks(len)).zip(gd.chunks(len)) {
                    let s = ops::dot(gr, yr);
                    for ((o, &yv), &gv) in gout.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::GroupNorm {
                input,
                scale,
                shift,
                groups,
                normalized,
                inv_std,
            } => {
                let (n, d) = self.value(*input).dims2().unwrap();
                let gamma = self.value(*scale).data();
                if self.requires_grad(*scale) || self.requires_grad(*shift) {
                    let mut gs = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for p in 0..n {
                        for c in 0..d {
                            gs[c] += gd[p * d + c] * normalized[p * d + c];
                            gb[c] += gd[p * d + c];
                        }
                    }
                    self.acc(grads, *scale, gs);
                    self.acc(grads, *shift, gb);
                }
                if self.requires_grad(*input) {
                    let cg = d / groups;
                    let count = (n * cg) as f64;
                    let mut gx = vec![0.0; n * d];
                    for g in 0..*groups {
                        let chans = g * cg..(g + 1) * cg;
                        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                        for p in 0..n {
                            for c in chans.clone() {
                                let gh = gd[p * d + c] * gamma[c];
                                sum_g += gh;
                                sum_gx += gh * normalized[p * d + c];
                            }
                        }
                        let inv = inv_std[g];
                        for p in 0..n {
                            for c in chans.clone() {
                                let gh = gd[p * d + c] * gamma[c];
                                gx[p * d + c] = inv / count
                                    * (count * gh - sum_g - normalized[p * d + c] * sum_gx);
                            }
                        }
                    }
                    self.acc(grads, *input, gx);
                }
            }
            Op::Select { input, index } => {
                let numel = self.value(*input).numel();
                let inner = gd.len();
                let mut ga = vec![0.0; numel];
                ga[index * inner..(index + 1) * inner].copy_from_slice(gd);
                self.acc(grads, *input, ga);
            }
            Op::Reshape(a) => self.acc(grads, *a, gd.to_vec()),
            Op::Bce { logits, targets } => {
                let x = self.value(*logits).data();
                let ga = x
                    .iter()
                    .zip(targets)
                    .map(|(&l, t)| t.map_or(0.0, |t| gd[0] * (sigmoid(l) - t)))
                    .collect();
                self.acc(grads, *logits, ga);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(&g)
                .for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v), g).expect("gradient shape"));
            }
        }
    }
}
