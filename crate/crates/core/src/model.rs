//! Sequence classifiers: a memory model followed by a linear readout to
//! class logits.

use serde::{Deserialize, Serialize};

use crate::aggregator::DEFAULT_MAX_LEN;
use crate::baselines::{GruParams, MlpParams};
use crate::cell::{CellDims, CellParams, ForwardOptions, Linear, LinearVars, ParamRef, VariantFlags};
use crate::error::{FfmError, Result};
use crate::numerics::{Dtype, Graph, Tensor, Var};

fn default_variant() -> String {
    "FFM".into()
}

fn default_t_e() -> usize {
    DEFAULT_MAX_LEN
}

fn default_beta() -> f64 {
    0.01
}

/// How decay and context are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    Default,
    /// Durabilities in `t_alpha`, periods in `t_omega`.
    Informed { t_alpha: (f64, f64), t_omega: (f64, f64) },
}

/// Model selection as it appears in configuration files. `d` is the input
/// width; one-hot observations are zero-padded up to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Ffm {
        d: usize,
        m: usize,
        c: usize,
        #[serde(default = "default_variant")]
        variant: String,
        #[serde(default = "default_t_e")]
        t_e: usize,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default)]
        init: InitSpec,
    },
    Gru {
        d: usize,
        hidden: usize,
    },
    Mlp {
        d: usize,
        hidden: usize,
    },
}

impl ModelSpec {
    pub fn ffm(d: usize, m: usize, c: usize) -> Self {
        ModelSpec::Ffm { d, m, c, variant: default_variant(), t_e: default_t_e(), beta: default_beta(), init: InitSpec::Default }
    }

    pub fn input_width(&self) -> usize {
        match *self {
            ModelSpec::Ffm { d, .. } | ModelSpec::Gru { d, .. } | ModelSpec::Mlp { d, .. } => d,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Ffm { .. } => "ffm",
            ModelSpec::Gru { .. } => "gru",
            ModelSpec::Mlp { .. } => "mlp",
        }
    }
}

/// GRU/MLP hidden size whose real dimension matches an `m x c` complex state.
pub fn matched_hidden(m: usize, c: usize) -> usize {
    2 * m * c
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Ffm(CellParams),
    Gru(GruParams),
    Mlp(MlpParams),
}

/// Memory model plus readout head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub vocab: usize,
    pub body: Body,
    pub head: Linear,
}

/// Per-run options for the parallel FFM forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    pub chunk: Option<usize>,
    /// Step-by-step aggregation instead of the parallel scan.
    pub recurrent: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { workers: 1, chunk: None, recurrent: false }
    }
}

impl Model {
    pub fn build(spec: &ModelSpec, vocab: usize, seed: u64) -> Result<Self> {
        let d = spec.input_width();
        if d < vocab {
            return Err(FfmError::Config(format!("input width d = {d} is smaller than the vocabulary {vocab}")));
        }
        let (body, features) = match spec {
            ModelSpec::Ffm { d, m, c, variant, t_e, beta, init } => {
                let dims = CellDims::new(*d, *m, *c);
                let cell = match *init {
                    InitSpec::Default => CellParams::init(dims, *t_e, *beta, seed)?,
                    InitSpec::Informed { t_alpha, t_omega } => {
                        CellParams::informed_init(dims, t_alpha, t_omega, *t_e, *beta, seed)?
                    }
                };
                (Body::Ffm(cell.with_variant(VariantFlags::named(variant)?)?), *d)
            }
            ModelSpec::Gru { d, hidden } => (Body::Gru(GruParams::init(*d, *hidden, seed)?), *hidden),
            ModelSpec::Mlp { d, hidden } => (Body::Mlp(MlpParams::init(*d, *hidden, *hidden, seed)?), *hidden),
        };
        // A zero readout starts every model at the uniform prediction.
        let head = Linear::zeros(features, vocab);
        Ok(Model { spec: spec.clone(), vocab, body, head })
    }

    pub fn cell(&self) -> Option<&CellParams> {
        match &self.body {
            Body::Ffm(c) => Some(c),
            _ => None,
        }
    }

    /// Body parameters followed by `head.weight`, `head.bias`.
    pub fn parameters(&self) -> Vec<ParamRef<'_>> {
        let mut out = match &self.body {
            Body::Ffm(c) => c.parameters(),
            Body::Gru(g) => g.parameters(),
            Body::Mlp(m) => m.parameters(),
        };
        out.push(ParamRef { name: "head.weight", tensor: &self.head.weight, trainable: true });
        out.push(ParamRef { name: "head.bias", tensor: &self.head.bias, trainable: true });
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = match &mut self.body {
            Body::Ffm(c) => c.parameters_mut(),
            Body::Gru(g) => g.parameters_mut(),
            Body::Mlp(m) => m.parameters_mut(),
        };
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    /// Registers parameters on `g`: trainable ones as parameters, the rest as
    /// constants.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| if p.trainable { g.param(p.tensor.clone()) } else { g.constant(p.tensor.clone()) })
            .collect()
    }

    /// Class logits `(T * B, vocab)` in time-major row order for observations
    /// `x` of shape `(T, B, d)`, starting from a zero memory state.
    pub fn logits(&self, g: &mut Graph, leaves: &[Var], x: Var, opts: &RunOptions) -> Result<Var> {
        let &[t_len, b, d] = g.value(x).shape() else {
            return Err(FfmError::Dimension(format!("model input must be (T, B, d), got {:?}", g.value(x).shape())));
        };
        let n = leaves.len();
        let head = LinearVars { weight: leaves[n - 2], bias: leaves[n - 1] };
        let body = &leaves[..n - 2];
        let features = match &self.body {
            Body::Ffm(cell) => {
                let vars = cell.bind_leaves(g, body)?;
                let prev = g.constant(Tensor::zeros(&[b, cell.dims.m, cell.dims.c], Dtype::Complex128));
                let fo = ForwardOptions {
                    workers: opts.workers,
                    chunk: opts.chunk,
                    recurrent: opts.recurrent,
                    ..Default::default()
                };
                let out = cell.forward_graph(g, &vars, x, prev, &fo)?;
                g.reshape(out.y, &[t_len * b, d])?
            }
            Body::Gru(gru) => {
                let vars = gru.bind_leaves(body)?;
                let h0 = g.constant(Tensor::zeros(&[b, gru.hidden], Dtype::Real64));
                let (ys, _) = gru.forward_graph(g, &vars, x, h0)?;
                g.reshape(ys, &[t_len * b, gru.hidden])?
            }
            Body::Mlp(mlp) => {
                let vars = mlp.bind_leaves(body)?;
                let flat = g.reshape(x, &[t_len * b, d])?;
                mlp.forward_graph(g, &vars, flat)?
            }
        };
        head.apply(g, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_layout_ends_with_head() {
        for spec in [ModelSpec::ffm(8, 4, 2), ModelSpec::Gru { d: 4, hidden: 6 }, ModelSpec::Mlp { d: 4, hidden: 6 }] {
            let m = Model::build(&spec, 4, 0).unwrap();
            let names: Vec<&str> = m.parameters().iter().map(|p| p.name).collect();
            assert_eq!(&names[names.len() - 2..], ["head.weight", "head.bias"]);
            let mut m2 = m.clone();
            assert_eq!(m2.parameters_mut().len(), names.len());
        }
    }

    #[test]
    fn logits_have_one_row_per_position() {
        let m = Model::build(&ModelSpec::ffm(6, 3, 2), 4, 1).unwrap();
        let mut g = Graph::new();
        let leaves = m.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[5, 3, 6], Dtype::Real64));
        let out = m.logits(&mut g, &leaves, x, &RunOptions::default()).unwrap();
        assert_eq!(g.value(out).shape(), &[15, 4]);
    }

    #[test]
    fn narrow_input_is_rejected() {
        assert!(matches!(Model::build(&ModelSpec::ffm(3, 2, 2), 4, 0), Err(FfmError::Config(_))));
    }

    #[test]
    fn matched_hidden_mirrors_complex_state() {
        assert_eq!(matched_hidden(32, 4), 256);
    }

    #[test]
    fn spec_parsing_is_strict() {
        let s: ModelSpec = serde_json::from_str(r#"{"kind":"ffm","d":8,"m":8,"c":4}"#).unwrap();
        assert_eq!(s, ModelSpec::ffm(8, 8, 4));
        let informed: ModelSpec = serde_json::from_str(
            r#"{"kind":"ffm","d":8,"m":8,"c":4,"init":{"kind":"informed","t_alpha":[32,104],"t_omega":[32,104]}}"#,
        )
        .unwrap();
        assert!(matches!(informed, ModelSpec::Ffm { init: InitSpec::Informed { .. }, .. }));
        assert!(serde_json::from_str::<ModelSpec>(r#"{"kind":"gru","d":8,"hidden":4,"extra":0}"#).is_err());
    }
}
