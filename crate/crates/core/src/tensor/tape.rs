//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in call order; since an operation can
//! only consume nodes that already exist, recording order is a topological
//! order and the backward sweep simply walks it in reverse. Forward values are
//! computed with the same [`Tensor`] routines used outside the tape, so a
//! taped evaluation is bit-identical to a plain one.

use std::fmt;

use super::{Activation, Rng, Tensor, TINY};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive defined outside this module (compact bilinear pooling, for
/// one) that still participates in the backward sweep.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    SoftmaxRows(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    RepeatRows(Var),
    Reshape(Var),
    L2NormRows(Var),
    Mask(Var, Tensor),
    Nll(Var, usize),
    Sum(Var),
    AddN(Vec<Var>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Act(_, k) => k.name(),
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Transpose(_) => "transpose",
            Op::Concat(_) => "concat",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Reshape(_) => "reshape",
            Op::L2NormRows(_) => "l2_normalize_rows",
            Op::Mask(..) => "mask",
            Op::Nll(..) => "nll",
            Op::Sum(_) => "sum",
            Op::AddN(_) => "add_n",
            Op::Custom(_, op) => op.name(),
        };
        f.write_str(name)
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `v`; zeros when
    /// `v` does not influence it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return a;
        }
        let out = self.value(a).activation(kind);
        self.push(out, Op::Act(a, kind))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let out = self.value(a).repeat_rows(n)?;
        Ok(self.push(out, Op::RepeatRows(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).l2_normalize_rows()?;
        Ok(self.push(out, Op::L2NormRows(a)))
    }

    /// Elementwise product with a constant mask (no gradient to the mask).
    pub fn mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let out = self.value(a).hadamard(&mask)?;
        Ok(self.push(out, Op::Mask(a, mask)))
    }

    /// Inverted dropout. `p == 0` records nothing and returns `a`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if p == 0.0 {
            return Ok(a);
        }
        let shape = self.value(a).shape().to_vec();
        let m = Tensor::dropout_mask(&shape, p, rng)?;
        self.mask(a, m)
    }

    /// `-ln(max(p[target], 1e-12))` for a probability vector `p`.
    pub fn nll(&mut self, probs: Var, target: usize) -> Result<Var> {
        let p = self.value(probs);
        if target >= p.len() {
            return Err(Error::Data(format!("target {target} out of range for {} classes", p.len())));
        }
        // NaN must survive the clamp so divergence is visible
        let pt = p.data()[target];
        let out = Tensor::scalar(if pt.is_nan() { pt } else { -pt.max(TINY).ln() });
        Ok(self.push(out, Op::Nll(probs, target)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Sum of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension("add_n of nothing".into()))?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            acc = acc.add(self.value(p))?;
        }
        Ok(self.push(acc, Op::AddN(parts.to_vec())))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push(out, Op::Custom(inputs.to_vec(), op)))
    }

    /// Reverse sweep from a single-valued node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_value = self.value(output);
        if out_value.len() != 1 {
            return dim_err(format!("backward needs a single-valued output, got shape {:?}", out_value.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_value.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(val(*a), val(*b), &g)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(val(*b))?;
                    let gb = g.hadamard(val(*a))?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], g.scale(*k)),
                Op::Act(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut ga = g.clone();
                    for ((gv, &xv), &yv) in ga.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        *gv *= kind.derivative(xv, yv);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.dims2()?;
                    let mut ga = g.clone();
                    for row in 0..r {
                        let ys = &y.data()[row * c..(row + 1) * c];
                        let gs = &g.data()[row * c..(row + 1) * c];
                        let inner: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga.data_mut()[row * c + j] = ys[j] * (gs[j] - inner);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Transpose(a) => {
                    let ga = g.transpose()?.reshape(val(*a).shape())?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Concat(parts) => {
                    let rows = node.value.dims2()?.0;
                    let total = node.value.dims2()?.1;
                    let mut offset = 0;
                    for p in parts {
                        let pv = val(*p);
                        let w = pv.dims2()?.1;
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads[p.0], Tensor::new(pv.shape().to_vec(), data)?);
                    }
                }
                Op::RepeatRows(a) => {
                    let (r, c) = g.dims2()?;
                    let mut data = vec![0.0; c];
                    for row in 0..r {
                        for (d, v) in data.iter_mut().zip(&g.data()[row * c..(row + 1) * c]) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(val(*a).shape().to_vec(), data)?);
                }
                Op::Reshape(a) => accumulate(&mut grads[a.0], g.reshape(val(*a).shape())?),
                Op::L2NormRows(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let (r, c) = x.dims2()?;
                    let mut ga = g.clone();
                    for row in 0..r {
                        let xs = &x.data()[row * c..(row + 1) * c];
                        let ys = &y.data()[row * c..(row + 1) * c];
                        let gs = &g.data()[row * c..(row + 1) * c];
                        let raw = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let n = raw.max(TINY);
                        // Below the clamp the map is x / TINY, a plain scaling.
                        let inner: f64 = if raw > TINY { ys.iter().zip(gs).map(|(a, b)| a * b).sum() } else { 0.0 };
                        for j in 0..c {
                            ga.data_mut()[row * c + j] = (gs[j] - ys[j] * inner) / n;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Mask(a, m) => accumulate(&mut grads[a.0], g.hadamard(m)?),
                Op::Nll(p, t) => {
                    let pv = val(*p);
                    let mut ga = Tensor::zeros(pv.shape());
                    let pt = pv.data()[*t];
                    if pt > TINY {
                        ga.data_mut()[*t] = -g.item() / pt;
                    }
                    accumulate(&mut grads[p.0], ga);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads[a.0], Tensor::full(val(*a).shape(), g.item()));
                }
                Op::AddN(parts) => {
                    for p in parts {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
                Op::Custom(inputs, op) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                    let gs = op.backward(&values, &node.value, &g)?;
                    if gs.len() != inputs.len() {
                        return Err(Error::Evaluation(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    for (v, gv) in inputs.iter().zip(gs) {
                        accumulate(&mut grads[v.0], gv);
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let ga = g.matmul(&b.transpose()?)?.reshape(a.shape())?;
    let (m, _) = a.dims2()?;
    let a2 = a.reshape(&[m, a.len() / m])?;
    let gb = a2.transpose()?.matmul(g)?.reshape(b.shape())?;
    Ok((ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(3.0));
        let y = t.hadamard(w, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(w).item(), 6.0);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::from_vec(vec![5.0, 5.0]));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b), Tensor::zeros(&[2]));
        assert_eq!(g.get(a).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(a ∘ a + a) -> dy/da = 2a + 1
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![1.0, -2.0]));
        let sq = t.hadamard(a, a).unwrap();
        let s = t.add(sq, a).unwrap();
        let y = t.sum(s);
        assert_eq!(t.backward(y).unwrap().get(a).data(), &[3.0, -3.0]);
    }

    #[test]
    fn identity_activation_records_nothing() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(1.0));
        assert_eq!(t.activation(a, Activation::Identity), a);
        assert_eq!(t.len(), 1);
    }
}
