//! The FFM cell: input gating, aggregation, projection of the complex state
//! back to reals, and a gated residual output.
//!
//! ```text
//! x~ = l1(x) * sigmoid(l2(x))
//! S  = aggregate(x~, S_prev)
//! z  = l3(Re[S] || Im[S])
//! y  = LN(z) * sigmoid(l4(x)) + l5(x) * (1 - sigmoid(l4(x)))
//! ```

mod init;
mod interpret;
mod variant;

pub use init::{alpha_schedule, informed_alpha_schedule, informed_omega_schedule, omega_schedule};
pub use variant::{GammaProduct, ParamMode, VariantFlags};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{self, DecayParams, Precision, RecurrentState, ScanOptions};
use crate::error::{FfmError, Result};
use crate::numerics::{sigmoid, Graph, Tensor, Unary, Var, LAYER_NORM_EPS};

/// Input/output width `d`, trace count `m`, context count `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellDims {
    pub d: usize,
    pub m: usize,
    pub c: usize,
}

impl CellDims {
    pub fn new(d: usize, m: usize, c: usize) -> Self {
        CellDims { d, m, c }
    }

    /// Width of the flattened real view of the state.
    pub fn state_width(&self) -> usize {
        2 * self.m * self.c
    }
}

/// Affine map `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform in `+-1/sqrt(fan_in)` for weight and bias.
    pub fn uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Linear { weight: Tensor::real(&[fan_in, fan_out], w).unwrap(), bias: Tensor::real(&[fan_out], b).unwrap() }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::real(&[fan_in, fan_out], vec![0.0; fan_in * fan_out]).unwrap(),
            bias: Tensor::real(&[fan_out], vec![0.0; fan_out]).unwrap(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Value-level application to one input vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (w, b) = (self.weight.as_real().unwrap(), self.bias.as_real().unwrap());
        let p = self.fan_out();
        let mut out = b.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            out.iter_mut().zip(&w[i * p..(i + 1) * p]).for_each(|(o, wv)| *o += xi * wv);
        }
        out
    }
}

/// Graph handles of a bound [`Linear`].
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn bind(g: &mut Graph, l: &Linear, trainable: bool) -> Self {
        if trainable {
            LinearVars { weight: g.param(l.weight.clone()), bias: g.param(l.bias.clone()) }
        } else {
            LinearVars { weight: g.constant(l.weight.clone()), bias: g.constant(l.bias.clone()) }
        }
    }

    /// `x (N x in) -> (N x out)`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        g.add(xw, self.bias)
    }
}

/// Options for a cell forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Workers for the prefix sum.
    pub workers: usize,
    /// Chunk length for the parallel scan; `None` uses the cell's maximum.
    pub chunk: Option<usize>,
    /// Layer norm on `z`. Only disabled to expose the raw projection.
    pub layer_norm: bool,
    pub precision: Precision,
    /// Record the cell one timestep at a time instead of using the parallel
    /// scan. Double precision only.
    pub recurrent: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { workers: 1, chunk: None, layer_norm: true, precision: Precision::Double, recurrent: false }
    }
}

/// Weights, decay parameters and variant flags of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub dims: CellDims,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub l4: Linear,
    pub l5: Linear,
    pub decay: DecayParams,
    pub variant: VariantFlags,
    /// Longest sequence a single parallel scan may cover; `alpha_max` is
    /// derived from it.
    pub max_len: usize,
    /// Durability threshold used at initialization.
    pub beta: f64,
}

/// Name, tensor and trainability of one parameter.
pub struct ParamRef<'a> {
    pub name: &'static str,
    pub tensor: &'a Tensor,
    pub trainable: bool,
}

/// Graph handles for every cell parameter, plus the effective decay and
/// frequency values actually fed to the aggregator.
#[derive(Debug, Clone)]
pub struct CellVars {
    pub l1: LinearVars,
    pub l2: LinearVars,
    pub l3: LinearVars,
    pub l4: LinearVars,
    pub l5: LinearVars,
    pub alpha_raw: Var,
    pub omega: Var,
    alpha: Var,
    omega_eff: Var,
}

impl CellVars {
    /// Handles in [`CellParams::parameters`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(12);
        for l in [&self.l1, &self.l2, &self.l3, &self.l4, &self.l5] {
            v.push(l.weight);
            v.push(l.bias);
        }
        v.push(self.alpha_raw);
        v.push(self.omega);
        v
    }
}

/// Output of a batched forward pass on a graph.
#[derive(Debug, Clone, Copy)]
pub struct CellOutput {
    /// `(T, B, d)`
    pub y: Var,
    /// `(T, B, m, c)`
    pub states: Var,
    /// `(B, m, c)`
    pub last: Var,
}

impl CellParams {
    pub fn trace_size(&self) -> usize {
        self.dims.m
    }

    pub fn context_size(&self) -> usize {
        self.dims.c
    }

    /// All parameters in a fixed order.
    pub fn parameters(&self) -> Vec<ParamRef<'_>> {
        let v = &self.variant;
        let mut out = Vec::with_capacity(12);
        let names = [
            ("l1.weight", "l1.bias", &self.l1),
            ("l2.weight", "l2.bias", &self.l2),
            ("l3.weight", "l3.bias", &self.l3),
            ("l4.weight", "l4.bias", &self.l4),
            ("l5.weight", "l5.bias", &self.l5),
        ];
        for (wn, bn, l) in names {
            out.push(ParamRef { name: wn, tensor: &l.weight, trainable: true });
            out.push(ParamRef { name: bn, tensor: &l.bias, trainable: true });
        }
        out.push(ParamRef { name: "alpha_raw", tensor: &self.decay.alpha_raw, trainable: v.decay == ParamMode::Learned });
        out.push(ParamRef { name: "omega", tensor: &self.decay.omega, trainable: v.context == ParamMode::Learned });
        out
    }

    /// Mutable parameters in [`CellParams::parameters`] order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.l1.weight,
            &mut self.l1.bias,
            &mut self.l2.weight,
            &mut self.l2.bias,
            &mut self.l3.weight,
            &mut self.l3.bias,
            &mut self.l4.weight,
            &mut self.l4.bias,
            &mut self.l5.weight,
            &mut self.l5.bias,
            &mut self.decay.alpha_raw,
            &mut self.decay.omega,
        ]
    }

    /// Registers every parameter on `g`. Fixed or disabled decay/context
    /// become constants.
    pub fn bind(&self, g: &mut Graph) -> Result<CellVars> {
        let leaves: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|p| if p.trainable { g.param(p.tensor.clone()) } else { g.constant(p.tensor.clone()) })
            .collect();
        self.bind_leaves(g, &leaves)
    }

    /// Wraps existing leaves, given in [`CellParams::parameters`] order.
    pub fn bind_leaves(&self, g: &mut Graph, leaves: &[Var]) -> Result<CellVars> {
        if leaves.len() != 12 {
            return Err(FfmError::Dimension(format!("cell has 12 parameters, got {}", leaves.len())));
        }
        let lin = |i: usize| LinearVars { weight: leaves[2 * i], bias: leaves[2 * i + 1] };
        let (alpha_raw, omega) = (leaves[10], leaves[11]);
        let alpha = match self.variant.decay {
            ParamMode::Off => g.constant(Tensor::vector(&vec![0.0; self.dims.m])),
            _ => aggregator::effective_alpha(g, alpha_raw, self.decay.alpha_max)?,
        };
        let omega_eff = match self.variant.context {
            ParamMode::Off => {
                g.constant(Tensor::real(self.decay.omega.shape(), vec![0.0; self.decay.omega.len()])?)
            }
            _ => omega,
        };
        Ok(CellVars { l1: lin(0), l2: lin(1), l3: lin(2), l4: lin(3), l5: lin(4), alpha_raw, omega, alpha, omega_eff })
    }

    /// Batched forward pass recorded on `g`.
    ///
    /// `x` is `(T, B, d)` real, `prev` is `(B, m, c)` complex.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &CellVars,
        x: Var,
        prev: Var,
        opts: &ForwardOptions,
    ) -> Result<CellOutput> {
        let CellDims { d, m, c } = self.dims;
        let &[t_len, b, dx] = g.value(x).shape() else {
            return Err(FfmError::Dimension(format!("cell input must be (T, B, d), got {:?}", g.value(x).shape())));
        };
        if dx != d {
            return Err(FfmError::Dimension(format!("cell input width {dx}, expected {d}")));
        }
        if g.value(prev).shape() != [b, m, c] {
            return Err(FfmError::Dimension(format!(
                "state shape {:?}, expected {:?}",
                g.value(prev).shape(),
                [b, m, c]
            )));
        }
        if opts.recurrent && opts.precision == Precision::Double {
            return self.recurrent_forward_graph(g, vars, x, prev, opts);
        }
        let rows = t_len * b;
        let x2 = g.reshape(x, &[rows, d])?;
        let x_tilde = self.gated_input(g, vars, x2)?;
        let x_tilde = g.reshape(x_tilde, &[t_len, b, m])?;

        let chunk = opts.chunk.unwrap_or(self.max_len).min(self.max_len);
        let (states, last) = match opts.precision {
            Precision::Double => {
                aggregator::chunked_scan_graph(g, vars.alpha, vars.omega_eff, x_tilde, prev, chunk, self.max_len)?
            }
            Precision::Single => self.single_precision_states(g, vars, x_tilde, prev, chunk, opts)?,
        };
        let y = self.readout(g, vars, states, x2, opts)?;
        let y = g.reshape(y, &[t_len, b, d])?;
        Ok(CellOutput { y, states, last })
    }

    /// The whole cell recorded one timestep at a time, the way a recurrent
    /// network is unrolled. Matches [`forward_graph`](Self::forward_graph).
    fn recurrent_forward_graph(
        &self,
        g: &mut Graph,
        vars: &CellVars,
        x: Var,
        prev: Var,
        opts: &ForwardOptions,
    ) -> Result<CellOutput> {
        let CellDims { d, m, c } = self.dims;
        let (t_len, b) = (g.value(x).shape()[0], g.value(x).shape()[1]);
        let gamma = aggregator::unit_gamma_graph(g, vars.alpha, vars.omega_eff)?;
        let mut state = prev;
        let mut ys = Vec::with_capacity(t_len);
        let mut all = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = g.slice_rows(x, t, t + 1)?;
            let xt = g.reshape(xt, &[b, d])?;
            let x_tilde = self.gated_input(g, vars, xt)?;
            state = aggregator::step_graph(g, gamma, state, x_tilde)?;
            let y = self.readout(g, vars, state, xt, opts)?;
            ys.push(g.reshape(y, &[1, b, d])?);
            all.push(g.reshape(state, &[1, b, m, c])?);
        }
        let y = g.concat_rows(&ys)?;
        let states = g.concat_rows(&all)?;
        Ok(CellOutput { y, states, last: state })
    }

    /// `l1(x) * sigmoid(l2(x))` for rows `x (N, d)`.
    fn gated_input(&self, g: &mut Graph, vars: &CellVars, x2: Var) -> Result<Var> {
        let a1 = vars.l1.apply(g, x2)?;
        if !self.variant.input_gate {
            return Ok(a1);
        }
        let a2 = vars.l2.apply(g, x2)?;
        let gate = g.sigmoid(a2)?;
        g.mul(a1, gate)
    }

    /// Output rows `(N, d)` from complex states (any shape with `N * m * c`
    /// entries) and the matching inputs `x2 (N, d)`.
    fn readout(&self, g: &mut Graph, vars: &CellVars, states: Var, x2: Var, opts: &ForwardOptions) -> Result<Var> {
        let CellDims { m, c, .. } = self.dims;
        let rows = g.value(x2).shape()[0];
        let re = g.unary(states, Unary::RealPart)?;
        let im = g.unary(states, Unary::ImagPart)?;
        let re = g.reshape(re, &[rows, m * c])?;
        let im = g.reshape(im, &[rows, m * c])?;
        let flat = g.concat_last(&[re, im])?;
        let z = vars.l3.apply(g, flat)?;
        let zn = if opts.layer_norm { g.layer_norm(z)? } else { z };
        if !self.variant.output_gate {
            return Ok(zn);
        }
        let gate_in = vars.l4.apply(g, x2)?;
        let gate = g.sigmoid(gate_in)?;
        let skip = vars.l5.apply(g, x2)?;
        let keep = g.affine(gate, -1.0, 1.0)?;
        let mem = g.mul(zn, gate)?;
        let res = g.mul(skip, keep)?;
        g.add(mem, res)
    }

    /// Forward-only aggregation through the value-level scan, used to show
    /// what happens in 32-bit arithmetic. The states enter the graph as
    /// constants.
    fn single_precision_states(
        &self,
        g: &mut Graph,
        vars: &CellVars,
        x_tilde: Var,
        prev: Var,
        chunk: usize,
        opts: &ForwardOptions,
    ) -> Result<(Var, Var)> {
        let CellDims { m, c, .. } = self.dims;
        let shape = g.value(x_tilde).shape().to_vec();
        let (t_len, b) = (shape[0], shape[1]);
        let alpha = g.value(vars.alpha).real_values()?.to_vec();
        let omega = g.value(vars.omega_eff).real_values()?.to_vec();
        let params = if self.decay.is_per_entry() {
            DecayParams::per_entry(&alpha, &omega, c, f64::MAX)?
        } else {
            DecayParams::new(&alpha, &omega, f64::MAX)?
        };
        let scan_opts = ScanOptions {
            max_len: self.max_len,
            workers: opts.workers,
            precision: opts.precision,
            ..Default::default()
        };
        let xt = g.value(x_tilde).real_values()?.to_vec();
        let pv = g.value(prev).complex_values()?.to_vec();
        let mut all = vec![Complex64::new(0.0, 0.0); t_len * b * m * c];
        let mut lasts = Vec::with_capacity(b * m * c);
        for bi in 0..b {
            let xs: Vec<f64> = (0..t_len).flat_map(|t| xt[(t * b + bi) * m..(t * b + bi + 1) * m].to_vec()).collect();
            let state = RecurrentState { s: Tensor::complex(&[m, c], pv[bi * m * c..(bi + 1) * m * c].to_vec())?, step: 0 };
            let (states, last) =
                aggregator::chunked_scan(&params, &Tensor::real(&[t_len, m], xs)?, &state, chunk, &scan_opts)?;
            let sv = states.as_complex().unwrap();
            for t in 0..t_len {
                all[(t * b + bi) * m * c..(t * b + bi + 1) * m * c].copy_from_slice(&sv[t * m * c..(t + 1) * m * c]);
            }
            lasts.extend_from_slice(last.values());
        }
        let states = g.constant(Tensor::complex(&[t_len, b, m, c], all)?);
        let last = g.constant(Tensor::complex(&[b, m, c], lasts)?);
        Ok((states, last))
    }

    /// Forward pass over one sequence `x` (`T x d`), returning `Y` (`T x d`)
    /// and the final state.
    pub fn forward(&self, x: &Tensor, prev: &RecurrentState, opts: &ForwardOptions) -> Result<(Tensor, RecurrentState)> {
        let &[t_len, d] = x.shape() else {
            return Err(FfmError::Dimension(format!("forward input must be T x d, got {:?}", x.shape())));
        };
        if t_len == 0 {
            return Err(FfmError::Dimension("forward over an empty sequence".into()));
        }
        if x.real_values()?.iter().any(|v| !v.is_finite()) {
            return Err(FfmError::Stability("non-finite input to cell forward".into()));
        }
        let (m, c) = (self.dims.m, self.dims.c);
        if prev.s.shape() != [m, c] {
            return Err(FfmError::Dimension(format!("state shape {:?}, expected {:?}", prev.s.shape(), [m, c])));
        }
        let mut g = Graph::with_workers(opts.workers);
        let vars = self.bind(&mut g)?;
        let xv = g.constant(x.reshape(&[t_len, 1, d])?);
        let pv = g.constant(prev.s.reshape(&[1, m, c])?);
        let out = self.forward_graph(&mut g, &vars, xv, pv, opts)?;
        let y = g.value(out.y).reshape(&[t_len, d])?;
        if let Some(t) = first_non_finite_row(&y) {
            return Err(FfmError::NonFiniteOutput(t));
        }
        let last = g.value(out.last).reshape(&[m, c])?;
        Ok((y, RecurrentState { s: last, step: prev.step + t_len as u64 }))
    }

    /// One recurrent inference step without a graph: constant time and memory
    /// regardless of how many steps came before.
    pub fn step(&self, x: &[f64], prev: &RecurrentState) -> Result<(Vec<f64>, RecurrentState)> {
        let CellDims { d, m, c } = self.dims;
        if x.len() != d {
            return Err(FfmError::Dimension(format!("step input has {} entries, expected {d}", x.len())));
        }
        let mut x_tilde = self.l1.apply(x);
        if self.variant.input_gate {
            let gate = self.l2.apply(x);
            x_tilde.iter_mut().zip(gate).for_each(|(v, g)| *v *= sigmoid(g));
        }
        let next = aggregator::step(&self.effective_decay()?, &x_tilde, prev)?;
        let s = next.values();
        let flat: Vec<f64> = s.iter().map(|z| z.re).chain(s.iter().map(|z| z.im)).collect();
        debug_assert_eq!(flat.len(), 2 * m * c);
        let mut z = self.l3.apply(&flat);
        layer_norm_in_place(&mut z);
        let y = if self.variant.output_gate {
            let gate = self.l4.apply(x);
            let skip = self.l5.apply(x);
            (0..d)
                .map(|i| {
                    let s = sigmoid(gate[i]);
                    z[i] * s + skip[i] * (1.0 - s)
                })
                .collect()
        } else {
            z
        };
        if y.iter().any(|v: &f64| !v.is_finite()) {
            return Err(FfmError::NonFiniteOutput(0));
        }
        Ok((y, next))
    }

    /// Decay parameters with the variant's overrides applied (zeroed decay or
    /// context when disabled).
    pub fn effective_decay(&self) -> Result<DecayParams> {
        let mut decay = self.decay.clone();
        if self.variant.decay == ParamMode::Off {
            decay.alpha_raw = Tensor::vector(&vec![0.0; self.dims.m]);
        }
        if self.variant.context == ParamMode::Off {
            decay.omega = Tensor::real(decay.omega.shape(), vec![0.0; decay.omega.len()])?;
        }
        Ok(decay)
    }

    pub fn scan_options(&self, workers: usize) -> ScanOptions {
        ScanOptions { max_len: self.max_len, workers, ..Default::default() }
    }
}

fn layer_norm_in_place(z: &mut [f64]) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    z.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// Index of the first row (leading axis) containing a non-finite value.
pub fn first_non_finite_row(t: &Tensor) -> Option<usize> {
    let rows = t.shape()[0];
    let width = t.len() / rows.max(1);
    let x = t.as_real()?;
    (0..rows).find(|&r| x[r * width..(r + 1) * width].iter().any(|v| !v.is_finite()))
}
