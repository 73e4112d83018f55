//! Reference models on the same numerics core: a GRU (strictly sequential)
//! and a stateless two-layer perceptron.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::{Linear, LinearVars, ParamRef};
use crate::error::{FfmError, Result};
use crate::numerics::{Graph, Tensor, Unary, Var};

/// GRU whose gates act on `x || h`.
///
/// ```text
/// z  = sigmoid([x, h] Wz + bz)
/// r  = sigmoid([x, h] Wr + br)
/// n  = tanh([x, r * h] Wn + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub input: usize,
    pub hidden: usize,
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub update: LinearVars,
    pub reset: LinearVars,
    pub candidate: LinearVars,
}

impl GruParams {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(FfmError::Config("GRU sizes must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = input + hidden;
        Ok(GruParams {
            input,
            hidden,
            update: Linear::uniform(fan_in, hidden, &mut rng),
            reset: Linear::uniform(fan_in, hidden, &mut rng),
            candidate: Linear::uniform(fan_in, hidden, &mut rng),
        })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let fan_in = input + hidden;
        GruParams {
            input,
            hidden,
            update: Linear::zeros(fan_in, hidden),
            reset: Linear::zeros(fan_in, hidden),
            candidate: Linear::zeros(fan_in, hidden),
        }
    }

    pub fn parameters(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef { name: "update.weight", tensor: &self.update.weight, trainable: true },
            ParamRef { name: "update.bias", tensor: &self.update.bias, trainable: true },
            ParamRef { name: "reset.weight", tensor: &self.reset.weight, trainable: true },
            ParamRef { name: "reset.bias", tensor: &self.reset.bias, trainable: true },
            ParamRef { name: "candidate.weight", tensor: &self.candidate.weight, trainable: true },
            ParamRef { name: "candidate.bias", tensor: &self.candidate.bias, trainable: true },
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.update.weight,
            &mut self.update.bias,
            &mut self.reset.weight,
            &mut self.reset.bias,
            &mut self.candidate.weight,
            &mut self.candidate.bias,
        ]
    }

    pub fn bind_leaves(&self, leaves: &[Var]) -> Result<GruVars> {
        if leaves.len() != 6 {
            return Err(FfmError::Dimension(format!("GRU has 6 parameters, got {}", leaves.len())));
        }
        let lin = |i: usize| LinearVars { weight: leaves[2 * i], bias: leaves[2 * i + 1] };
        Ok(GruVars { update: lin(0), reset: lin(1), candidate: lin(2) })
    }

    pub fn bind(&self, g: &mut Graph) -> Result<GruVars> {
        let leaves: Vec<Var> = self.parameters().into_iter().map(|p| g.param(p.tensor.clone())).collect();
        self.bind_leaves(&leaves)
    }

    /// Batched forward on `g`, one step at a time. `x` is `(T, B, d)`, `h0`
    /// is `(B, h)`. Returns all hidden states `(T, B, h)` and the last one.
    pub fn forward_graph(&self, g: &mut Graph, vars: &GruVars, x: Var, h0: Var) -> Result<(Var, Var)> {
        let &[t_len, b, d] = g.value(x).shape() else {
            return Err(FfmError::Dimension(format!("GRU input must be (T, B, d), got {:?}", g.value(x).shape())));
        };
        if d != self.input || g.value(h0).shape() != [b, self.hidden] {
            return Err(FfmError::Dimension(format!(
                "GRU expects input width {} and state ({b}, {}), got {d} and {:?}",
                self.input,
                self.hidden,
                g.value(h0).shape()
            )));
        }
        if t_len == 0 {
            return Err(FfmError::Dimension("GRU over an empty sequence".into()));
        }
        let mut h = h0;
        let mut outs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = g.slice_rows(x, t, t + 1)?;
            let xt = g.reshape(xt, &[b, d])?;
            let xh = g.concat_last(&[xt, h])?;
            let z_in = vars.update.apply(g, xh)?;
            let z = g.sigmoid(z_in)?;
            let r_in = vars.reset.apply(g, xh)?;
            let r = g.sigmoid(r_in)?;
            let rh = g.mul(r, h)?;
            let xrh = g.concat_last(&[xt, rh])?;
            let n_in = vars.candidate.apply(g, xrh)?;
            let n = g.tanh(n_in)?;
            let diff = g.sub(h, n)?;
            let zd = g.mul(z, diff)?;
            h = g.add(n, zd)?;
            outs.push(g.reshape(h, &[1, b, self.hidden])?);
        }
        let all = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
        Ok((all, h))
    }

    /// Single sequence `x` (`T x d`) from `h0`. Returns `Y` (`T x h`) and `h_T`.
    pub fn forward(&self, x: &Tensor, h0: &[f64]) -> Result<(Tensor, Vec<f64>)> {
        let &[t_len, d] = x.shape() else {
            return Err(FfmError::Dimension(format!("GRU input must be T x d, got {:?}", x.shape())));
        };
        if x.real_values()?.iter().chain(h0).any(|v| !v.is_finite()) {
            return Err(FfmError::Stability("non-finite input to GRU".into()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let xv = g.constant(x.reshape(&[t_len, 1, d])?);
        let hv = g.constant(Tensor::real(&[1, self.hidden], h0.to_vec())?);
        let (ys, last) = self.forward_graph(&mut g, &vars, xv, hv)?;
        let y = g.value(ys).reshape(&[t_len, self.hidden])?;
        Ok((y, g.value(last).real_values()?.to_vec()))
    }
}

/// Two-layer perceptron applied independently at every timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub l1: LinearVars,
    pub l2: LinearVars,
}

impl MlpParams {
    pub fn init(input: usize, hidden: usize, output: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(FfmError::Config("MLP sizes must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(MlpParams { l1: Linear::uniform(input, hidden, &mut rng), l2: Linear::uniform(hidden, output, &mut rng) })
    }

    pub fn input(&self) -> usize {
        self.l1.fan_in()
    }

    pub fn output(&self) -> usize {
        self.l2.fan_out()
    }

    pub fn parameters(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef { name: "l1.weight", tensor: &self.l1.weight, trainable: true },
            ParamRef { name: "l1.bias", tensor: &self.l1.bias, trainable: true },
            ParamRef { name: "l2.weight", tensor: &self.l2.weight, trainable: true },
            ParamRef { name: "l2.bias", tensor: &self.l2.bias, trainable: true },
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.l1.weight, &mut self.l1.bias, &mut self.l2.weight, &mut self.l2.bias]
    }

    pub fn bind_leaves(&self, leaves: &[Var]) -> Result<MlpVars> {
        if leaves.len() != 4 {
            return Err(FfmError::Dimension(format!("MLP has 4 parameters, got {}", leaves.len())));
        }
        Ok(MlpVars {
            l1: LinearVars { weight: leaves[0], bias: leaves[1] },
            l2: LinearVars { weight: leaves[2], bias: leaves[3] },
        })
    }

    /// `x` is `(N, d)`; returns `(N, out)`.
    pub fn forward_graph(&self, g: &mut Graph, vars: &MlpVars, x: Var) -> Result<Var> {
        let a = vars.l1.apply(g, x)?;
        let h = g.unary(a, Unary::Relu)?;
        vars.l2.apply(g, h)
    }

    /// Rows of `x` (`T x d`) mapped independently.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let &[t_len, d] = x.shape() else {
            return Err(FfmError::Dimension(format!("MLP input must be T x d, got {:?}", x.shape())));
        };
        if d != self.input() {
            return Err(FfmError::Dimension(format!("MLP input width {d}, expected {}", self.input())));
        }
        let xs = x.real_values()?;
        let mut out = Vec::with_capacity(t_len * self.output());
        for row in xs.chunks(d) {
            let h: Vec<f64> = self.l1.apply(row).into_iter().map(|v| v.max(0.0)).collect();
            out.extend(self.l2.apply(&h));
        }
        Tensor::real(&[t_len, self.output()], out)
    }
}
