use super::ops::{log_softmax_slice, lse_slice, matvec_slice, softmax_slice};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec { w: ValueId, x: ValueId },
    Add { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: f64 },
    MulScalar { a: ValueId, s: ValueId },
    Tanh { a: ValueId },
    MeanPoolRows { a: ValueId },
    Softmax { a: ValueId },
    LogSoftmax { a: ValueId },
    Log { a: ValueId },
    GatherRows { table: ValueId, ids: Vec<usize> },
    Select { a: ValueId, index: usize },
    Dot { a: ValueId, b: ValueId },
    StackScalars { parts: Vec<ValueId> },
    LogSumExp { a: ValueId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Wengert list over [`Tensor`] values.
///
/// Operations are recorded in execution order; [`Tape::backward`] walks the
/// list in reverse and accumulates adjoints additively, so a value feeding
/// several downstream operations receives the sum of their contributions.
/// One tape per training instance; tapes are cheap to build and drop.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input leaf. Constants and trainable parameters are the
    /// same to the tape; callers decide which leaves' gradients to read.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value)
    }

    /// Alias of [`Tape::constant`] that marks trainable intent at the call
    /// site.
    pub fn param(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Convenience for rank-0 results.
    pub fn scalar_value(&self, id: ValueId) -> Result<f64> {
        self.nodes[id.0].value.as_scalar()
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, id: ValueId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::invalid(format!("value id {} is not on this tape", id.0)))
    }

    /// y = W x for W with shape [m, n] and x with shape [n].
    pub fn matvec(&mut self, w: ValueId, x: ValueId) -> Result<ValueId> {
        let (wt, xt) = (self.check(w)?, self.check(x)?);
        if wt.rank() != 2 || xt.rank() != 1 || wt.shape()[1] != xt.shape()[0] {
            return Err(Error::shape(format!(
                "matvec needs [m,n] and [n], got {:?} and {:?}",
                wt.shape(),
                xt.shape()
            )));
        }
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        let y = matvec_slice(wt.values(), m, n, xt.values());
        Ok(self.push(Op::MatVec { w, x }, Tensor::vector(y)))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (at, bt) = (self.check(a)?, self.check(b)?);
        if !at.same_shape(bt) {
            return Err(Error::shape(format!(
                "add needs matching shapes, got {:?} and {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let vals: Vec<f64> = at
            .values()
            .iter()
            .zip(bt.values())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(at.shape().to_vec(), vals)?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    /// Multiplication by a compile-time-known finite constant.
    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        if !c.is_finite() {
            return Err(Error::invalid("scale by non-finite constant"));
        }
        let at = self.check(a)?;
        let vals: Vec<f64> = at.values().iter().map(|x| x * c).collect();
        let out = Tensor::new(at.shape().to_vec(), vals)?;
        Ok(self.push(Op::Scale { a, c }, out))
    }

    /// Multiplication by a rank-0 tape value; gradients flow to both sides.
    pub fn mul_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        let st = self.check(s)?;
        if !st.is_scalar() {
            return Err(Error::shape(format!(
                "mul_scalar needs a rank-0 multiplier, got {:?}",
                st.shape()
            )));
        }
        let sv = st.values()[0];
        let at = self.check(a)?;
        let vals: Vec<f64> = at.values().iter().map(|x| x * sv).collect();
        let out = Tensor::new(at.shape().to_vec(), vals)?;
        Ok(self.push(Op::MulScalar { a, s }, out))
    }

    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId> {
        let at = self.check(a)?;
        let vals: Vec<f64> = at.values().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(at.shape().to_vec(), vals)?;
        Ok(self.push(Op::Tanh { a }, out))
    }

    /// Mean over the rows of a [t, d] tensor, t >= 1.
    pub fn mean_pool_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let at = self.check(a)?;
        if at.rank() != 2 || at.shape()[0] == 0 {
            return Err(Error::shape(format!(
                "mean_pool_rows needs a non-empty [t,d] tensor, got {:?}",
                at.shape()
            )));
        }
        let (t, d) = (at.shape()[0], at.shape()[1]);
        let mut pooled = vec![0.0; d];
        for r in 0..t {
            for j in 0..d {
                pooled[j] += at.values()[r * d + j];
            }
        }
        for v in pooled.iter_mut() {
            *v /= t as f64;
        }
        Ok(self.push(Op::MeanPoolRows { a }, Tensor::vector(pooled)))
    }

    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let at = self.check(a)?;
        if at.rank() != 1 || at.is_empty() {
            return Err(Error::invalid("softmax needs a non-empty 1-d tensor"));
        }
        let out = Tensor::vector(softmax_slice(at.values()));
        Ok(self.push(Op::Softmax { a }, out))
    }

    pub fn log_softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let at = self.check(a)?;
        if at.rank() != 1 || at.is_empty() {
            return Err(Error::invalid("log_softmax needs a non-empty 1-d tensor"));
        }
        let out = Tensor::vector(log_softmax_slice(at.values()));
        Ok(self.push(Op::LogSoftmax { a }, out))
    }

    /// Elementwise natural log; every input element must be positive so the
    /// result stays finite.
    pub fn log(&mut self, a: ValueId) -> Result<ValueId> {
        let at = self.check(a)?;
        if at.values().iter().any(|v| *v <= 0.0) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        let vals: Vec<f64> = at.values().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(at.shape().to_vec(), vals)?;
        Ok(self.push(Op::Log { a }, out))
    }

    /// Embedding lookup: stacks rows `ids` of a [v, d] table into [t, d].
    /// Duplicate ids are allowed; their gradients accumulate on the shared
    /// row.
    pub fn gather_rows(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let tt = self.check(table)?;
        if tt.rank() != 2 {
            return Err(Error::shape(format!(
                "gather_rows needs a [v,d] table, got {:?}",
                tt.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows with no ids"));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut vals = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::invalid(format!(
                    "gather_rows id {} out of table size {}",
                    i, v
                )));
            }
            vals.extend_from_slice(&tt.values()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], vals)?;
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            out,
        ))
    }

    /// Picks one element of a 1-d tensor as a rank-0 value.
    pub fn select(&mut self, a: ValueId, index: usize) -> Result<ValueId> {
        let at = self.check(a)?;
        if at.rank() != 1 {
            return Err(Error::shape(format!(
                "select needs a 1-d tensor, got {:?}",
                at.shape()
            )));
        }
        if index >= at.len() {
            return Err(Error::invalid(format!(
                "select index {} out of length {}",
                index,
                at.len()
            )));
        }
        let v = at.values()[index];
        Ok(self.push(Op::Select { a, index }, Tensor::scalar(v)))
    }

    /// Inner product of two 1-d tensors of equal length.
    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (at, bt) = (self.check(a)?, self.check(b)?);
        if at.rank() != 1 || bt.rank() != 1 || at.len() != bt.len() {
            return Err(Error::shape(format!(
                "dot needs equal-length 1-d tensors, got {:?} and {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let v: f64 = at
            .values()
            .iter()
            .zip(bt.values())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot { a, b }, Tensor::scalar(v)))
    }

    /// Concatenates rank-0 values into a 1-d tensor.
    pub fn stack_scalars(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::invalid("stack_scalars with no parts"));
        }
        let mut vals = Vec::with_capacity(parts.len());
        for &p in parts {
            let pt = self.check(p)?;
            vals.push(pt.as_scalar()?);
        }
        Ok(self.push(
            Op::StackScalars {
                parts: parts.to_vec(),
            },
            Tensor::vector(vals),
        ))
    }

    /// Stable log-sum-exp of a non-empty 1-d tensor as a rank-0 value.
    pub fn log_sum_exp(&mut self, a: ValueId) -> Result<ValueId> {
        let at = self.check(a)?;
        if at.rank() != 1 || at.is_empty() {
            return Err(Error::invalid("log_sum_exp needs a non-empty 1-d tensor"));
        }
        let v = lse_slice(at.values());
        Ok(self.push(Op::LogSumExp { a }, Tensor::scalar(v)))
    }

    /// Reverse pass from a rank-0 loss. Returns one adjoint slot per tape
    /// value; values the loss does not depend on stay empty and read back
    /// as zero.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if !lt.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a rank-0 loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatVec { w, x } => {
                let wt = &self.nodes[w.0].value;
                let xt = &self.nodes[x.0].value;
                let (m, n) = (wt.shape()[0], wt.shape()[1]);
                {
                    let gw = slot(grads, w.0, wt.shape());
                    for r in 0..m {
                        for c in 0..n {
                            gw[r * n + c] += g.values()[r] * xt.values()[c];
                        }
                    }
                }
                let gx = slot(grads, x.0, xt.shape());
                for c in 0..n {
                    let mut acc = 0.0;
                    for r in 0..m {
                        acc += wt.values()[r * n + c] * g.values()[r];
                    }
                    gx[c] += acc;
                }
            }
            Op::Add { a, b } => {
                for &id in [a, b] {
                    let shape = self.nodes[id.0].value.shape().to_vec();
                    let ga = slot(grads, id.0, &shape);
                    for (gi, gv) in ga.iter_mut().zip(g.values()) {
                        *gi += gv;
                    }
                }
            }
            Op::Scale { a, c } => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = slot(grads, a.0, &shape);
                for (gi, gv) in ga.iter_mut().zip(g.values()) {
                    *gi += c * gv;
                }
            }
            Op::MulScalar { a, s } => {
                let sv = self.nodes[s.0].value.values()[0];
                let at = self.nodes[a.0].value.clone();
                {
                    let ga = slot(grads, a.0, at.shape());
                    for (gi, gv) in ga.iter_mut().zip(g.values()) {
                        *gi += sv * gv;
                    }
                }
                let gs = slot(grads, s.0, &[]);
                gs[0] += g
                    .values()
                    .iter()
                    .zip(at.values())
                    .map(|(gv, av)| gv * av)
                    .sum::<f64>();
            }
            Op::Tanh { a } => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = slot(grads, a.0, &shape);
                for ((gi, gv), y) in ga.iter_mut().zip(g.values()).zip(out.values()) {
                    *gi += gv * (1.0 - y * y);
                }
            }
            Op::MeanPoolRows { a } => {
                let at_shape = self.nodes[a.0].value.shape().to_vec();
                let (t, d) = (at_shape[0], at_shape[1]);
                let ga = slot(grads, a.0, &at_shape);
                for r in 0..t {
                    for j in 0..d {
                        ga[r * d + j] += g.values()[j] / t as f64;
                    }
                }
            }
            Op::Softmax { a } => {
                // dL/dx_i = y_i (g_i - sum_j g_j y_j).
                let inner: f64 = g
                    .values()
                    .iter()
                    .zip(out.values())
                    .map(|(gv, y)| gv * y)
                    .sum();
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = slot(grads, a.0, &shape);
                for (i, gi) in ga.iter_mut().enumerate() {
                    *gi += out.values()[i] * (g.values()[i] - inner);
                }
            }
            Op::LogSoftmax { a } => {
                // dL/dx_i = g_i - softmax(x)_i sum_j g_j, and softmax(x) =
                // exp(log_softmax(x)) is recovered from the saved output.
                let gsum: f64 = g.values().iter().sum();
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = slot(grads, a.0, &shape);
                for (i, gi) in ga.iter_mut().enumerate() {
                    *gi += g.values()[i] - out.values()[i].exp() * gsum;
                }
            }
            Op::Log { a } => {
                let at = self.nodes[a.0].value.clone();
                let ga = slot(grads, a.0, at.shape());
                for ((gi, gv), x) in ga.iter_mut().zip(g.values()).zip(at.values()) {
                    *gi += gv / x;
                }
            }
            Op::GatherRows { table, ids } => {
                let tshape = self.nodes[table.0].value.shape().to_vec();
                let d = tshape[1];
                let gt = slot(grads, table.0, &tshape);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g.values()[r * d + j];
                    }
                }
            }
            Op::Select { a, index } => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = slot(grads, a.0, &shape);
                ga[*index] += g.values()[0];
            }
            Op::Dot { a, b } => {
                let at = self.nodes[a.0].value.clone();
                let bt = self.nodes[b.0].value.clone();
                let gv = g.values()[0];
                {
                    let ga = slot(grads, a.0, at.shape());
                    for (gi, bv) in ga.iter_mut().zip(bt.values()) {
                        *gi += gv * bv;
                    }
                }
                let gb = slot(grads, b.0, bt.shape());
                for (gi, av) in gb.iter_mut().zip(at.values()) {
                    *gi += gv * av;
                }
            }
            Op::StackScalars { parts } => {
                for (i, p) in parts.iter().enumerate() {
                    let gp = slot(grads, p.0, &[]);
                    gp[0] += g.values()[i];
                }
            }
            Op::LogSumExp { a } => {
                // dL/dx_i = g * softmax(x)_i, with softmax recovered as
                // exp(x_i - lse(x)).
                let at = self.nodes[a.0].value.clone();
                let lse = out.values()[0];
                let gv = g.values()[0];
                let ga = slot(grads, a.0, at.shape());
                for (gi, x) in ga.iter_mut().zip(at.values()) {
                    *gi += gv * (x - lse).exp();
                }
            }
        }
    }
}

/// Ensures a gradient slot exists (zero-filled) and hands out its storage.
fn slot<'g>(grads: &'g mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'g mut [f64] {
    if grads[id].is_none() {
        grads[id] = Some(Tensor::zeros(shape));
    }
    grads[id].as_mut().unwrap().values_mut()
}

/// Adjoints produced by [`Tape::backward`], indexed by [`ValueId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The adjoint of `id`, or `None` when the loss does not depend on it.
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// The adjoint of `id`, materializing zeros of `shape` when the loss
    /// does not depend on it (a parameter off the graph has zero gradient).
    pub fn wrt_or_zeros(&self, id: ValueId, shape: &[usize]) -> Tensor {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}
