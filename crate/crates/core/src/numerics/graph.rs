//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Each forward call records its operations on a [`Graph`]; [`Graph::backward`]
//! walks the tape in exact reverse order. Complex values carry their gradient
//! as `dL/dRe + i dL/dIm`, i.e. real and imaginary parts are treated as two
//! independent real channels, so every loss must be real.

use std::ops::AddAssign;

use num_complex::Complex64;

use super::broadcast::{broadcast_shape, for_each_pair};
use super::scan::{cumsum_rows, reverse_cumsum_rows};
use super::tensor::{Data, Dtype, Tensor};
use crate::error::{FfmError, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    /// `min(x, bound)`
    ClampMax(f64),
    /// Complex exponential; input must be complex.
    Exp,
    ToComplex,
    RealPart,
    ImagPart,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Unary(Var, Unary),
    MakeComplex(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    LayerNorm(Var),
    CumSum(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Unary(..) => "unary",
            Op::MakeComplex(..) => "complex",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::ConcatLast(..) => "concat_last",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::LayerNorm(..) => "layer_norm",
            Op::CumSum(..) => "cumsum",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    /// layer norm: per-row inverse std; cross entropy: softmax probabilities
    saved: Option<Vec<f64>>,
}

/// Recorded forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    workers: usize,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), workers: 1, backward_done: false }
    }

    /// Graph whose prefix sums fan out over `workers` threads.
    pub fn with_workers(workers: usize) -> Self {
        Graph { nodes: Vec::new(), workers: workers.max(1), backward_done: false }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation tags in recording order.
    pub fn op_tags(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.tag()).collect()
    }

    /// Element types of every recorded value.
    pub fn dtypes(&self) -> Vec<Dtype> {
        self.nodes.iter().map(|n| n.value.dtype()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false, None)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, saved: Option<Vec<f64>>) -> Var {
        self.nodes.push(Node { op, value, grad: None, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- binary

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x + y, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x - y, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x * y, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg, None))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        fr: impl Fn(f64, f64) -> f64,
        fc: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let (sa, sb) = (ta.shape(), tb.shape());
        match (ta.data(), tb.data()) {
            (Data::Real(x), Data::Real(y)) => Tensor::real(&shape, zip_map(sa, sb, &shape, x, y, fr)),
            (Data::Complex(x), Data::Complex(y)) => Tensor::complex(&shape, zip_map(sa, sb, &shape, x, y, fc)),
            _ => Err(FfmError::Dimension("binary op on mixed real/complex operands".into())),
        }
    }

    /// `scale * a + shift`, elementwise. The shift applies to the real part.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(a);
        let value = match t.data() {
            Data::Real(x) => Tensor::real(t.shape(), x.iter().map(|v| scale * v + shift).collect())?,
            Data::Complex(x) => Tensor::complex(
                t.shape(),
                x.iter().map(|v| v * scale + Complex64::new(shift, 0.0)).collect(),
            )?,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Affine(a, scale), value, rg, None))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    // ----------------------------------------------------------------- unary

    pub fn unary(&mut self, a: Var, op: Unary) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let value = match (op, t.data()) {
            (Unary::Sigmoid, Data::Real(x)) => Tensor::real(&shape, x.iter().map(|&v| sigmoid(v)).collect())?,
            (Unary::Tanh, Data::Real(x)) => Tensor::real(&shape, x.iter().map(|v| v.tanh()).collect())?,
            (Unary::Relu, Data::Real(x)) => Tensor::real(&shape, x.iter().map(|v| v.max(0.0)).collect())?,
            (Unary::Abs, Data::Real(x)) => Tensor::real(&shape, x.iter().map(|v| v.abs()).collect())?,
            (Unary::ClampMax(m), Data::Real(x)) => Tensor::real(&shape, x.iter().map(|v| v.min(m)).collect())?,
            (Unary::Exp, Data::Complex(z)) => Tensor::complex(&shape, z.iter().map(|v| v.exp()).collect())?,
            (Unary::ToComplex, Data::Real(_)) => t.to_complex(),
            (Unary::RealPart, Data::Complex(z)) => Tensor::real(&shape, z.iter().map(|v| v.re).collect())?,
            (Unary::ImagPart, Data::Complex(z)) => Tensor::real(&shape, z.iter().map(|v| v.im).collect())?,
            (op, _) => {
                return Err(FfmError::Dimension(format!("{op:?} does not accept {:?} input", t.dtype())))
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Unary(a, op), value, rg, None))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp_complex(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    /// `re + i*im` with broadcasting.
    pub fn make_complex(&mut self, re: Var, im: Var) -> Result<Var> {
        let (tr, ti) = (self.value(re), self.value(im));
        let (Some(x), Some(y)) = (tr.as_real(), ti.as_real()) else {
            return Err(FfmError::Dimension("make_complex needs real parts".into()));
        };
        let shape = broadcast_shape(tr.shape(), ti.shape())?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for_each_pair(tr.shape(), ti.shape(), &shape, |_, ia, ib| data.push(Complex64::new(x[ia], y[ib])));
        let value = Tensor::complex(&shape, data)?;
        let rg = self.rg(&[re, im]);
        Ok(self.push(Op::MakeComplex(re, im), value, rg, None))
    }

    // ------------------------------------------------------------- structure

    /// `(n, k) x (k, p) -> (n, p)`, real only.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[n, k], &[k2, p]) = (ta.shape(), tb.shape()) else {
            return Err(FfmError::Dimension(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        if k != k2 {
            return Err(FfmError::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (Some(x), Some(y)) = (ta.as_real(), tb.as_real()) else {
            return Err(FfmError::Dimension("matmul supports real operands only".into()));
        };
        let value = Tensor::real(&[n, p], matmul_raw(x, y, n, k, p))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg, None))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg, None))
    }

    /// Concatenate along the last axis; all other dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let lead = &first.shape()[..first.shape().len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &v in parts {
            let t = self.value(v);
            if &t.shape()[..t.shape().len() - 1] != lead || t.dtype() != Dtype::Real64 {
                return Err(FfmError::Dimension("concat_last: incompatible parts".into()));
            }
            widths.push(*t.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in parts.iter().zip(&widths) {
                let x = self.value(v).as_real().unwrap();
                data.extend_from_slice(&x[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::real(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatLast(parts.to_vec()), value, rg, None))
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let tail = first.shape()[1..].to_vec();
        let dtype = first.dtype();
        let mut rows = 0;
        for &v in parts {
            let t = self.value(v);
            if t.shape()[1..] != tail[..] || t.dtype() != dtype {
                return Err(FfmError::Dimension("concat_rows: incompatible parts".into()));
            }
            rows += t.shape()[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = match dtype {
            Dtype::Real64 => {
                let data = parts.iter().flat_map(|&v| self.value(v).as_real().unwrap().iter().copied()).collect();
                Tensor::real(&shape, data)?
            }
            Dtype::Complex128 => {
                let data = parts.iter().flat_map(|&v| self.value(v).as_complex().unwrap().iter().copied()).collect();
                Tensor::complex(&shape, data)?
            }
        };
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, rg, None))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceRows(a, start), value, rg, None))
    }

    // -------------------------------------------------------------- reducers

    /// Nonparametric layer norm over the last axis.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let x = t.real_values()?;
        let n = *t.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(FfmError::Dimension("layer_norm over an empty axis".into()));
        }
        let mut out = Vec::with_capacity(x.len());
        let mut inv = Vec::with_capacity(x.len() / n);
        for row in x.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv.push(s);
            out.extend(row.iter().map(|v| (v - mean) * s));
        }
        let value = Tensor::real(t.shape(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LayerNorm(a), value, rg, Some(inv)))
    }

    /// Inclusive prefix sum along the leading (time) axis.
    pub fn cumsum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let rows = *t.shape().first().unwrap_or(&0);
        if rows == 0 {
            return Err(FfmError::Dimension("cumsum over an empty time axis".into()));
        }
        let width = t.len() / rows;
        let mut value = t.clone();
        match value.dtype() {
            Dtype::Complex128 => cumsum_rows(value.as_complex_mut().unwrap(), width, self.workers),
            Dtype::Real64 => cumsum_rows(value.as_real_mut().unwrap(), width, self.workers),
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::CumSum(a), value, rg, None))
    }

    /// Sum of all entries of a real tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).real_values()?.iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), rg, None))
    }

    /// Mean softmax cross-entropy over the rows of `logits` (N x V) where
    /// `mask` is true. Rows with a false mask contribute nothing.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let &[n, v] = t.shape() else {
            return Err(FfmError::Dimension("cross entropy needs N x V logits".into()));
        };
        if targets.len() != n || mask.len() != n {
            return Err(FfmError::Dimension(format!(
                "cross entropy: {n} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let x = t.real_values()?;
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..n {
            let row = &x[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - mx).exp()).sum();
            for (p, l) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (l - mx).exp() / z;
            }
            if mask[r] {
                if targets[r] >= v {
                    return Err(FfmError::Dimension(format!("target {} out of range {v}", targets[r])));
                }
                total += z.ln() + mx - row[targets[r]];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), count };
        Ok(self.push(op, Tensor::scalar(loss), rg, Some(probs)))
    }

    // -------------------------------------------------------------- backward

    /// Propagates d(loss)/d(value) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(FfmError::Graph("backward already ran on this graph; record a new one".into()));
        }
        let lt = self.value(loss);
        if lt.len() != 1 || lt.dtype() != Dtype::Real64 {
            return Err(FfmError::Graph("backward needs a real scalar loss".into()));
        }
        let seed = Tensor::real(lt.shape(), vec![1.0])?;
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(seed);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.clone() else { continue };
            let op = self.nodes[idx].op.clone();
            if let Op::SliceRows(a, start) = op {
                self.accumulate_rows(a, start, &g)?;
                continue;
            }
            let contributions = self.local_grads(idx, &op, &g)?;
            for (v, gi) in contributions {
                self.accumulate(v, gi)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return Ok(());
        }
        debug_assert_eq!(node.value.shape(), g.shape(), "gradient shape for {}", node.op.tag());
        match &mut node.grad {
            None => node.grad = Some(g),
            Some(acc) => match (acc.data(), g.data()) {
                (Data::Real(_), Data::Real(src)) => {
                    acc.as_real_mut().unwrap().iter_mut().zip(src.iter()).for_each(|(a, b)| *a += b)
                }
                (Data::Complex(_), Data::Complex(src)) => {
                    acc.as_complex_mut().unwrap().iter_mut().zip(src.iter()).for_each(|(a, b)| *a += b)
                }
                _ => return Err(FfmError::Graph("gradient dtype mismatch".into())),
            },
        }
        Ok(())
    }

    /// Adds the gradient of a row slice into rows `start..` of `v`'s
    /// gradient without materializing a full-size zero tensor per slice.
    fn accumulate_rows(&mut self, v: Var, start: usize, g: &Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return Ok(());
        }
        let width = node.value.len() / node.value.shape()[0];
        let off = start * width;
        let acc = node.grad.get_or_insert_with(|| Tensor::zeros(node.value.shape(), node.value.dtype()));
        match (acc.dtype(), g.data()) {
            (Dtype::Real64, Data::Real(src)) => acc.as_real_mut().unwrap()[off..off + src.len()]
                .iter_mut()
                .zip(src.iter())
                .for_each(|(a, b)| *a += b),
            (Dtype::Complex128, Data::Complex(src)) => acc.as_complex_mut().unwrap()[off..off + src.len()]
                .iter_mut()
                .zip(src.iter())
                .for_each(|(a, b)| *a += b),
            _ => return Err(FfmError::Graph("slice gradient dtype mismatch".into())),
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out_shape = self.nodes[idx].value.shape();
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                res.push((*a, reduce_to(g, out_shape, self.value(*a).shape(), 1.0)?));
                res.push((*b, reduce_to(g, out_shape, self.value(*b).shape(), sign)?));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                match (g.data(), ta.data(), tb.data()) {
                    (Data::Real(g), Data::Real(x), Data::Real(y)) => {
                        let mut ga = vec![0.0; x.len()];
                        let mut gb = vec![0.0; y.len()];
                        for_each_pair(sa, sb, out_shape, |i, ia, ib| {
                            ga[ia] += g[i] * y[ib];
                            gb[ib] += g[i] * x[ia];
                        });
                        res.push((*a, Tensor::real(ta.shape(), ga)?));
                        res.push((*b, Tensor::real(tb.shape(), gb)?));
                    }
                    (Data::Complex(g), Data::Complex(x), Data::Complex(y)) => {
                        let zero = Complex64::new(0.0, 0.0);
                        let mut ga = vec![zero; x.len()];
                        let mut gb = vec![zero; y.len()];
                        for_each_pair(sa, sb, out_shape, |i, ia, ib| {
                            ga[ia] += g[i] * y[ib].conj();
                            gb[ib] += g[i] * x[ia].conj();
                        });
                        res.push((*a, Tensor::complex(ta.shape(), ga)?));
                        res.push((*b, Tensor::complex(tb.shape(), gb)?));
                    }
                    _ => return Err(FfmError::Graph("mul gradient dtype mismatch".into())),
                }
            }
            Op::Affine(a, s) => {
                let ga = match g.data() {
                    Data::Real(x) => Tensor::real(g.shape(), x.iter().map(|v| v * s).collect())?,
                    Data::Complex(x) => Tensor::complex(g.shape(), x.iter().map(|v| v * s).collect())?,
                };
                res.push((*a, ga));
            }
            Op::Unary(a, u) => {
                let input = self.value(*a);
                let out = &self.nodes[idx].value;
                let shape = input.shape();
                let ga = match u {
                    Unary::Sigmoid | Unary::Tanh | Unary::Relu | Unary::Abs | Unary::ClampMax(_) => {
                        let (gr, x, y) = (g.real_values()?, input.real_values()?, out.real_values()?);
                        let d: Vec<f64> = (0..gr.len())
                            .map(|i| {
                                gr[i] * match u {
                                    Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                    Unary::Tanh => 1.0 - y[i] * y[i],
                                    Unary::Relu => f64::from(u8::from(x[i] > 0.0)),
                                    Unary::Abs => sign(x[i]),
                                    Unary::ClampMax(m) => f64::from(u8::from(x[i] < *m)),
                                    _ => unreachable!(),
                                }
                            })
                            .collect();
                        Tensor::real(shape, d)?
                    }
                    Unary::Exp => {
                        let (gz, y) = (g.complex_values()?, out.complex_values()?);
                        Tensor::complex(shape, gz.iter().zip(y).map(|(g, y)| g * y.conj()).collect())?
                    }
                    Unary::ToComplex => {
                        Tensor::real(shape, g.complex_values()?.iter().map(|z| z.re).collect())?
                    }
                    Unary::RealPart => Tensor::complex(
                        shape,
                        g.real_values()?.iter().map(|&r| Complex64::new(r, 0.0)).collect(),
                    )?,
                    Unary::ImagPart => Tensor::complex(
                        shape,
                        g.real_values()?.iter().map(|&r| Complex64::new(0.0, r)).collect(),
                    )?,
                };
                res.push((*a, ga));
            }
            Op::MakeComplex(re, im) => {
                let gz = g.complex_values()?;
                let gre = Tensor::real(out_shape, gz.iter().map(|z| z.re).collect())?;
                let gim = Tensor::real(out_shape, gz.iter().map(|z| z.im).collect())?;
                res.push((*re, reduce_to(&gre, out_shape, self.value(*re).shape(), 1.0)?));
                res.push((*im, reduce_to(&gim, out_shape, self.value(*im).shape(), 1.0)?));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (x, y, gr) = (ta.real_values()?, tb.real_values()?, g.real_values()?);
                // ga = g * b^T
                let mut ga = vec![0.0; n * k];
                for i in 0..n {
                    let grow = &gr[i * p..(i + 1) * p];
                    for kk in 0..k {
                        let brow = &y[kk * p..(kk + 1) * p];
                        ga[i * k + kk] = grow.iter().zip(brow).map(|(u, v)| u * v).sum();
                    }
                }
                // gb = a^T * g
                let mut gb = vec![0.0; k * p];
                for i in 0..n {
                    let grow = &gr[i * p..(i + 1) * p];
                    for kk in 0..k {
                        let av = x[i * k + kk];
                        if av != 0.0 {
                            gb[kk * p..(kk + 1) * p].iter_mut().zip(grow).for_each(|(o, v)| *o += av * v);
                        }
                    }
                }
                res.push((*a, Tensor::real(&[n, k], ga)?));
                res.push((*b, Tensor::real(&[k, p], gb)?));
            }
            Op::Reshape(a) => res.push((*a, g.reshape(self.value(*a).shape())?)),
            Op::ConcatLast(parts) => {
                let total = *out_shape.last().unwrap();
                let rows = g.len() / total;
                let gr = g.real_values()?;
                let mut offset = 0;
                for &v in parts {
                    let shape = self.value(v).shape();
                    let w = *shape.last().unwrap();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gr[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    res.push((v, Tensor::real(shape, d)?));
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &v in parts {
                    let rows = self.value(v).shape()[0];
                    res.push((v, g.slice_rows(start, start + rows)?));
                    start += rows;
                }
            }
            Op::SliceRows(..) => unreachable!("row slices accumulate in place"),
            Op::LayerNorm(a) => {
                let inv = self.nodes[idx].saved.as_ref().expect("layer norm saves inverse std");
                let y = self.nodes[idx].value.real_values()?;
                let gr = g.real_values()?;
                let n = *out_shape.last().unwrap();
                let mut gx = Vec::with_capacity(gr.len());
                for (r, s) in inv.iter().enumerate() {
                    let gs = &gr[r * n..(r + 1) * n];
                    let ys = &y[r * n..(r + 1) * n];
                    let mg = gs.iter().sum::<f64>() / n as f64;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    gx.extend(gs.iter().zip(ys).map(|(gi, yi)| s * (gi - mg - yi * mgy)));
                }
                res.push((*a, Tensor::real(out_shape, gx)?));
            }
            Op::CumSum(a) => {
                let rows = out_shape[0];
                let width = g.len() / rows;
                let mut ga = g.clone();
                match ga.dtype() {
                    Dtype::Complex128 => reverse_cumsum_rows(ga.as_complex_mut().unwrap(), width, self.workers),
                    Dtype::Real64 => reverse_cumsum_rows(ga.as_real_mut().unwrap(), width, self.workers),
                }
                res.push((*a, ga));
            }
            Op::Sum(a) => {
                let s = g.real_values()?[0];
                let shape = self.value(*a).shape();
                res.push((*a, Tensor::real(shape, vec![s; shape.iter().product()])?));
            }
            Op::CrossEntropy { logits, targets, mask, count } => {
                let probs = self.nodes[idx].saved.as_ref().expect("cross entropy saves probabilities");
                let shape = self.value(*logits).shape();
                let v = shape[1];
                let scale = g.real_values()?[0] / (*count).max(1) as f64;
                let mut gl = vec![0.0; probs.len()];
                for r in 0..shape[0] {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..v {
                        let onehot = f64::from(u8::from(c == targets[r]));
                        gl[r * v + c] = scale * (probs[r * v + c] - onehot);
                    }
                }
                res.push((*logits, Tensor::real(shape, gl)?));
            }
        }
        Ok(res)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn zip_map<T: Copy>(sa: &[usize], sb: &[usize], out: &[usize], x: &[T], y: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    if sa == out && sb == out {
        return x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect();
    }
    let mut v = Vec::with_capacity(out.iter().product());
    for_each_pair(sa, sb, out, |_, ia, ib| v.push(f(x[ia], y[ib])));
    v
}

/// Sum a gradient of shape `out` down to the broadcast source shape `src`.
fn reduce_to(g: &Tensor, out: &[usize], src: &[usize], sign: f64) -> Result<Tensor> {
    let n: usize = src.iter().product();
    match g.data() {
        Data::Real(x) => Tensor::real(src, reduce_impl(x, src, out, n, 0.0, |v| v * sign)),
        Data::Complex(x) => {
            Tensor::complex(src, reduce_impl(x, src, out, n, Complex64::new(0.0, 0.0), |v| v * sign))
        }
    }
}

fn reduce_impl<T: Copy + AddAssign>(g: &[T], src: &[usize], out: &[usize], n: usize, zero: T, f: impl Fn(T) -> T) -> Vec<T> {
    if src == out {
        return g.iter().map(|&v| f(v)).collect();
    }
    let mut acc = vec![zero; n];
    for_each_pair(src, src, out, |i, is, _| acc[is] += f(g[i]));
    acc
}

pub(crate) fn matmul_raw(x: &[f64], y: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let orow = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = x[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &y[kk * p..(kk + 1) * p];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
        }
    }
    out
}
