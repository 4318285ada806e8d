//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive records its output value together with the handles of its
//! inputs. [`Tape::backward`] walks the record in exact reverse order and
//! accumulates (sums) adjoints into every node that requires a gradient.
//! Leaves created with [`Tape::param`] report their gradients keyed by
//! [`ParamId`], so a parameter that is read several times receives the sum of
//! all paths.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::temporal::{deform_backward, deform_forward};
use crate::tensor::{axis_split, matmul_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Backward rule for [`Tape::custom`]: receives the input values, the output
/// value and the output adjoint, and returns one adjoint per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Mean { input: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    DeformConv { x: Var, kernel: Var, offsets: Var, rate: usize },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

/// How the two operands of a binary elementwise op line up.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Broadcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Broadcast::Same, a.shape().to_vec()))
    } else if a.is_scalar() {
        Ok((Broadcast::LeftScalar, b.shape().to_vec()))
    } else if b.is_scalar() {
        Ok((Broadcast::RightScalar, a.shape().to_vec()))
    } else {
        Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn binary(a: &Tensor, b: &Tensor, mode: Broadcast, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = match mode {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::LeftScalar => {
            let x = a.item();
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        Broadcast::RightScalar => {
            let y = b.item();
            a.data().iter().map(|&x| f(x, y)).collect()
        }
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a differentiable leaf; its gradient is available via [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Records a learnable parameter read from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mode, shape) = broadcast("add", self.value(a), self.value(b))?;
        let value = binary(self.value(a), self.value(b), mode, &shape, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mode, shape) = broadcast("sub", self.value(a), self.value(b))?;
        let value = binary(self.value(a), self.value(b), mode, &shape, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mode, shape) = broadcast("mul", self.value(a), self.value(b))?;
        let value = binary(self.value(a), self.value(b), mode, &shape, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Mean along `axis`; the axis is removed from the output shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() {
            return Err(Error::dim("mean", format!("axis {axis} for shape {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Mean { input: a, axis }, ng))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", format!("{base:?} vs {s:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Depthwise cycle-dilated deformable temporal convolution evaluated at
    /// the last timestep. `x` is `N×F×T`, `kernel` is `F×K`, `offsets` has
    /// `K` entries; the result is `N×F`.
    pub fn deform_conv(&mut self, x: Var, kernel: Var, offsets: Var, rate: usize) -> Result<Var> {
        let value = deform_forward(self.value(x), self.value(kernel), self.value(offsets), rate)?;
        let ng = self.needs(x) || self.needs(kernel) || self.needs(offsets);
        Ok(self.push(value, Op::DeformConv { x, kernel, offsets, rate }, ng))
    }

    /// Records an op with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let ng = inputs.iter().any(|&p| self.needs(p));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            ng,
        )
    }

    /// Runs the reverse pass from a scalar `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, t: Tensor, adj: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&t).expect("adjoint shape"),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(Var(idx), g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.needs(*a) {
                        // dA = G · Bᵀ
                        let bt = bv.transpose()?;
                        let mut da = vec![0.0; m * k];
                        matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                        send(*a, Tensor::new(&[m, k], da)?, &mut adj);
                    }
                    if self.needs(*b) {
                        // dB = Aᵀ · G
                        let at = av.transpose()?;
                        let mut db = vec![0.0; k * n];
                        matmul_into(at.data(), g.data(), &mut db, k, m, n);
                        send(*b, Tensor::new(&[k, n], db)?, &mut adj);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (mode, _) = broadcast("add", self.value(*a), self.value(*b))?;
                    let ga = match mode {
                        Broadcast::LeftScalar => Tensor::scalar(g.sum()),
                        _ => g.clone(),
                    };
                    let mut gb = match mode {
                        Broadcast::RightScalar => Tensor::scalar(g.sum()),
                        _ => g.clone(),
                    };
                    gb.scale(sign);
                    send(*a, ga.reshape(self.value(*a).shape())?, &mut adj);
                    send(*b, gb.reshape(self.value(*b).shape())?, &mut adj);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (mode, _) = broadcast("mul", av, bv)?;
                    match mode {
                        Broadcast::Same => {
                            if self.needs(*a) {
                                send(*a, g.zip_map(bv, |x, y| x * y)?, &mut adj);
                            }
                            if self.needs(*b) {
                                send(*b, g.zip_map(av, |x, y| x * y)?, &mut adj);
                            }
                        }
                        Broadcast::LeftScalar => {
                            if self.needs(*a) {
                                let s: f64 = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
                                send(*a, Tensor::scalar(s).reshape(av.shape())?, &mut adj);
                            }
                            if self.needs(*b) {
                                let s = av.item();
                                send(*b, g.map(|x| x * s), &mut adj);
                            }
                        }
                        Broadcast::RightScalar => {
                            if self.needs(*a) {
                                let s = bv.item();
                                send(*a, g.map(|x| x * s), &mut adj);
                            }
                            if self.needs(*b) {
                                let s: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                                send(*b, Tensor::scalar(s).reshape(bv.shape())?, &mut adj);
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let d = node.value.zip_map(&g, |s, gi| gi * s * (1.0 - s))?;
                    send(*a, d, &mut adj);
                }
                Op::Square(a) => {
                    let d = self.value(*a).zip_map(&g, |x, gi| 2.0 * x * gi)?;
                    send(*a, d, &mut adj);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    send(*a, Tensor::full(self.value(*a).shape(), gv), &mut adj);
                }
                Op::Mean { input, axis } => {
                    let shape = self.value(*input).shape().to_vec();
                    let (outer, len, inner) = axis_split(&shape, *axis);
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                d[(o * len + j) * inner + i] = g.data()[o * inner + i] / len as f64;
                            }
                        }
                    }
                    send(*input, Tensor::new(&shape, d)?, &mut adj);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                    let mut start = 0;
                    for &p in parts {
                        let pshape = self.value(p).shape().to_vec();
                        let len = pshape[*axis];
                        if self.needs(p) {
                            let mut d = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                d.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            send(p, Tensor::new(&pshape, d)?, &mut adj);
                        }
                        start += len;
                    }
                }
                Op::Reshape(a) => {
                    let d = g.reshape(self.value(*a).shape())?;
                    send(*a, d, &mut adj);
                }
                Op::DeformConv { x, kernel, offsets, rate } => {
                    let grads = deform_backward(self.value(*x), self.value(*kernel), self.value(*offsets), *rate, &g, self.needs(*x))?;
                    if let Some(dx) = grads.x {
                        send(*x, dx, &mut adj);
                    }
                    send(*kernel, grads.kernel, &mut adj);
                    send(*offsets, grads.offsets, &mut adj);
                }
                Op::Custom { inputs, backward } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let ds = backward(&values, &node.value, &g);
                    if ds.len() != inputs.len() {
                        return Err(Error::Contract("custom backward arity".into()));
                    }
                    for (&v, d) in inputs.iter().zip(ds) {
                        send(v, d, &mut adj);
                    }
                }
            }
        }
        Ok(out)
    }
}
