//! The decay/context operator `gamma` and the decayed-sum state update.
//!
//! `gamma^t[j, k] = exp(-t (alpha_j + i omega_k))`. The state after inputs
//! `x_0..x_p` (each broadcast across the `c` context columns) is
//!
//! ```text
//! S_p = gamma^(p+1) * S_prev + sum_{j<=p} gamma^(p-j) * x_j
//! ```
//!
//! It is available one step at a time ([`step`]) or for a whole chunk at once
//! ([`scan`]). The chunk form factors the sum as
//! `gamma^(p-t) * cumsum_j(gamma^(t-j) * x_j)` with `t = T - 1`, so every
//! exponential inside the prefix sum has magnitude at most one and the only
//! large factors are applied once per row afterwards.

use std::ops::AddAssign;

use num_complex::{Complex, Complex64};
use num_traits::{Float, NumAssign};

use crate::error::{FfmError, Result};
use crate::numerics::scan::cumsum_rows;
use crate::numerics::{Dtype, Graph, Tensor, Unary, Var};

/// Margin kept below the exact overflow threshold when clamping decay rates.
pub const EPS_CLAMP: f64 = 1e-3;

/// Longest chunk a single parallel scan processes by default.
pub const DEFAULT_MAX_LEN: usize = 1024;

/// `ln(f64::MAX)`.
pub fn ln_f64_max() -> f64 {
    f64::MAX.ln()
}

/// Largest decay rate for which `exp(alpha * max_len)` stays finite.
pub fn alpha_max_for(max_len: usize) -> f64 {
    ln_f64_max() / max_len as f64 - EPS_CLAMP
}

/// Learnable decay rates and context frequencies.
///
/// `omega` is either a length-`c` vector shared by all traces (outer-product
/// form) or an `m x c` matrix with an independent frequency row per trace
/// (Hadamard form).
#[derive(Debug, Clone, PartialEq)]
pub struct DecayParams {
    pub alpha_raw: Tensor,
    pub omega: Tensor,
    pub alpha_max: f64,
}

impl DecayParams {
    pub fn new(alpha_raw: &[f64], omega: &[f64], alpha_max: f64) -> Result<Self> {
        Self::check(alpha_raw, alpha_max)?;
        Ok(DecayParams { alpha_raw: Tensor::vector(alpha_raw), omega: Tensor::vector(omega), alpha_max })
    }

    /// Hadamard form: `omega` is row-major `m x c`.
    pub fn per_entry(alpha_raw: &[f64], omega: &[f64], c: usize, alpha_max: f64) -> Result<Self> {
        Self::check(alpha_raw, alpha_max)?;
        let m = alpha_raw.len();
        Ok(DecayParams {
            alpha_raw: Tensor::vector(alpha_raw),
            omega: Tensor::real(&[m, c], omega.to_vec())?,
            alpha_max,
        })
    }

    fn check(alpha_raw: &[f64], alpha_max: f64) -> Result<()> {
        if alpha_raw.is_empty() {
            return Err(FfmError::Config("decay needs at least one trace".into()));
        }
        if !(alpha_max > 0.0 && alpha_max.is_finite()) {
            return Err(FfmError::Config(format!("alpha_max must be positive, got {alpha_max}")));
        }
        Ok(())
    }

    pub fn trace_size(&self) -> usize {
        self.alpha_raw.len()
    }

    pub fn context_size(&self) -> usize {
        *self.omega.shape().last().unwrap()
    }

    pub fn is_per_entry(&self) -> bool {
        self.omega.shape().len() == 2
    }

    /// Effective decay `min(|alpha_raw|, alpha_max)`.
    pub fn alpha(&self) -> Vec<f64> {
        self.alpha_raw.as_real().unwrap().iter().map(|a| a.abs().min(self.alpha_max)).collect()
    }

    pub fn omega_at(&self, j: usize, k: usize) -> f64 {
        let w = self.omega.as_real().unwrap();
        if self.is_per_entry() {
            w[j * self.context_size() + k]
        } else {
            w[k]
        }
    }

    /// `m x c` matrix of frequencies, expanded from the shared form if needed.
    pub fn omega_matrix(&self) -> Vec<f64> {
        let (m, c) = (self.trace_size(), self.context_size());
        (0..m * c).map(|i| self.omega_at(i / c, i % c)).collect()
    }
}

/// Complex `m x c` state plus the number of steps folded into it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub s: Tensor,
    pub step: u64,
}

impl RecurrentState {
    pub fn zeros(m: usize, c: usize) -> Self {
        RecurrentState { s: Tensor::zeros(&[m, c], Dtype::Complex128), step: 0 }
    }

    pub fn values(&self) -> &[Complex64] {
        self.s.as_complex().expect("recurrent state is complex")
    }

    pub fn is_finite(&self) -> bool {
        self.s.is_finite()
    }
}

/// Floating-point width used inside the value-level scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    /// Every intermediate in 32-bit floats. Only for demonstrating why double
    /// precision is required.
    Single,
}

/// How the chunk-parallel sum is factored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanMode {
    /// `gamma^(p-t) * cumsum(gamma^(t-j) x_j)`: small exponentials summed first.
    #[default]
    Stabilized,
    /// `gamma^p * cumsum(gamma^(-j) x_j)`. Test oracle for short chunks.
    Naive,
    /// Stabilized form with the inner exponent sign flipped and the outer
    /// factor left alone. Wrong on purpose; the self-test must catch it.
    CorruptedSignFlip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub max_len: usize,
    pub workers: usize,
    pub precision: Precision,
    pub mode: ScanMode,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { max_len: DEFAULT_MAX_LEN, workers: 1, precision: Precision::Double, mode: ScanMode::Stabilized }
    }
}

fn overflow_guard(alpha: &[f64], t: f64) -> Result<()> {
    let (idx, amax) = alpha
        .iter()
        .enumerate()
        .fold((0, 0.0_f64), |best, (i, &a)| if a > best.1 { (i, a) } else { best });
    if t.abs() * amax > ln_f64_max() || !t.is_finite() {
        return Err(FfmError::Stability(format!(
            "exp(alpha * t) overflows: alpha[{idx}] = {amax}, t = {t}"
        )));
    }
    Ok(())
}

/// `gamma^t` as an `m x c` complex tensor. Negative `t` is allowed.
pub fn gamma_pow(params: &DecayParams, t: f64) -> Result<Tensor> {
    let alpha = params.alpha();
    overflow_guard(&alpha, t)?;
    let (m, c) = (params.trace_size(), params.context_size());
    let data = (0..m * c)
        .map(|i| {
            let (j, k) = (i / c, i % c);
            Complex64::new(-t * alpha[j], -t * params.omega_at(j, k)).exp()
        })
        .collect();
    Tensor::complex(&[m, c], data)
}

fn check_state(params: &DecayParams, prev: &RecurrentState) -> Result<()> {
    let want = [params.trace_size(), params.context_size()];
    if prev.s.shape() != want {
        return Err(FfmError::Dimension(format!("state shape {:?}, expected {want:?}", prev.s.shape())));
    }
    Ok(())
}

/// One recurrent update: `S' = gamma * S + x 1^T`.
pub fn step(params: &DecayParams, x_tilde: &[f64], prev: &RecurrentState) -> Result<RecurrentState> {
    check_state(params, prev)?;
    let (m, c) = (params.trace_size(), params.context_size());
    if x_tilde.len() != m {
        return Err(FfmError::Dimension(format!("input has {} entries, expected {m}", x_tilde.len())));
    }
    if x_tilde.iter().any(|v| !v.is_finite()) || !prev.is_finite() {
        return Err(FfmError::Stability("non-finite input to aggregator step".into()));
    }
    let g = gamma_pow(params, 1.0)?;
    let (g, s) = (g.as_complex().unwrap(), prev.values());
    let data = (0..m * c).map(|i| g[i] * s[i] + x_tilde[i / c]).collect();
    Ok(RecurrentState { s: Tensor::complex(&[m, c], data)?, step: prev.step + 1 })
}

/// All states of one chunk in parallel form.
///
/// `x_tilde` is `T x m`; the result is `(T x m x c states, last state)`.
pub fn scan(
    params: &DecayParams,
    x_tilde: &Tensor,
    prev: &RecurrentState,
    opts: &ScanOptions,
) -> Result<(Tensor, RecurrentState)> {
    check_state(params, prev)?;
    let (m, c) = (params.trace_size(), params.context_size());
    let &[t_len, mx] = x_tilde.shape() else {
        return Err(FfmError::Dimension(format!("scan input must be T x m, got {:?}", x_tilde.shape())));
    };
    if mx != m {
        return Err(FfmError::Dimension(format!("scan input has {mx} traces, expected {m}")));
    }
    if t_len == 0 {
        return Err(FfmError::Dimension("scan over an empty sequence".into()));
    }
    if t_len > opts.max_len {
        return Err(FfmError::ChunkBound { len: t_len, max: opts.max_len });
    }
    let alpha = params.alpha();
    overflow_guard(&alpha, t_len as f64)?;
    let x = x_tilde.real_values()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FfmError::Stability("non-finite input to aggregator scan".into()));
    }
    let omega = params.omega_matrix();

    let states: Vec<Complex64> = match opts.precision {
        Precision::Double => scan_impl(&alpha, &omega, x, prev.values(), t_len, m, c, opts),
        Precision::Single => {
            let a32: Vec<f32> = alpha.iter().map(|&v| v as f32).collect();
            let w32: Vec<f32> = omega.iter().map(|&v| v as f32).collect();
            let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let s32: Vec<Complex<f32>> =
                prev.values().iter().map(|z| Complex::new(z.re as f32, z.im as f32)).collect();
            scan_impl(&a32, &w32, &x32, &s32, t_len, m, c, opts)
                .into_iter()
                .map(|z| Complex64::new(f64::from(z.re), f64::from(z.im)))
                .collect()
        }
    };
    let last = Tensor::complex(&[m, c], states[(t_len - 1) * m * c..].to_vec())?;
    let states = Tensor::complex(&[t_len, m, c], states)?;
    Ok((states, RecurrentState { s: last, step: prev.step + t_len as u64 }))
}

#[allow(clippy::too_many_arguments)]
fn scan_impl<F>(
    alpha: &[F],
    omega: &[F],
    x: &[F],
    prev: &[Complex<F>],
    t_len: usize,
    m: usize,
    c: usize,
    opts: &ScanOptions,
) -> Vec<Complex<F>>
where
    F: Float + NumAssign + Send + Sync,
    Complex<F>: AddAssign,
{
    let width = m * c;
    let t_last = F::from(t_len - 1).unwrap();
    let gamma = |i: usize, t: F| -> Complex<F> {
        let (j, k) = (i / c, i % c);
        Complex::new(-t * alpha[j], -t * omega[j * c + k]).exp()
    };

    let mut acc = vec![Complex::new(F::zero(), F::zero()); t_len * width];
    for (row, out) in acc.chunks_mut(width).enumerate() {
        let jf = F::from(row).unwrap();
        let inner = match opts.mode {
            ScanMode::Stabilized => t_last - jf,
            ScanMode::Naive => -jf,
            ScanMode::CorruptedSignFlip => jf - t_last,
        };
        for (i, o) in out.iter_mut().enumerate() {
            *o = gamma(i, inner) * x[row * m + i / c];
        }
    }
    cumsum_rows(&mut acc, width, opts.workers);
    for (row, out) in acc.chunks_mut(width).enumerate() {
        let pf = F::from(row).unwrap();
        let outer = match opts.mode {
            ScanMode::Stabilized | ScanMode::CorruptedSignFlip => pf - t_last,
            ScanMode::Naive => pf,
        };
        for (i, o) in out.iter_mut().enumerate() {
            *o = gamma(i, outer) * *o + gamma(i, pf + F::one()) * prev[i];
        }
    }
    acc
}

/// [`scan`] over consecutive chunks of at most `chunk` steps, carrying the
/// state across chunk boundaries.
pub fn chunked_scan(
    params: &DecayParams,
    x_tilde: &Tensor,
    prev: &RecurrentState,
    chunk: usize,
    opts: &ScanOptions,
) -> Result<(Tensor, RecurrentState)> {
    if chunk == 0 || chunk > opts.max_len {
        return Err(FfmError::Config(format!("chunk must be in 1..={}, got {chunk}", opts.max_len)));
    }
    let t_len = x_tilde.shape()[0];
    let (m, c) = (params.trace_size(), params.context_size());
    let mut all = Vec::with_capacity(t_len * m * c);
    let mut state = prev.clone();
    let mut start = 0;
    while start < t_len {
        let end = (start + chunk).min(t_len);
        let part = x_tilde.slice_rows(start, end)?;
        let (states, last) = scan(params, &part, &state, opts)?;
        all.extend_from_slice(states.as_complex().unwrap());
        state = last;
        start = end;
    }
    Ok((Tensor::complex(&[t_len, m, c], all)?, state))
}

// ------------------------------------------------------------------ graph path

/// `min(|alpha_raw|, alpha_max)` recorded on the graph.
pub fn effective_alpha(g: &mut Graph, alpha_raw: Var, alpha_max: f64) -> Result<Var> {
    let a = g.unary(alpha_raw, Unary::Abs)?;
    g.unary(a, Unary::ClampMax(alpha_max))
}

/// `gamma^t` for each `t` in `times`, shaped `(T, 1, m, c)` so it broadcasts
/// over a batch axis.
pub fn gamma_graph(g: &mut Graph, alpha: Var, omega: Var, times: &[f64]) -> Result<Var> {
    let m = g.value(alpha).len();
    let t_len = times.len();
    let tv = g.constant(Tensor::real(&[t_len, 1, 1, 1], times.iter().map(|t| -t).collect())?);
    let a = g.reshape(alpha, &[m, 1])?;
    let re = g.mul(tv, a)?;
    let w = if g.value(omega).shape().len() == 2 {
        omega
    } else {
        let c = g.value(omega).len();
        g.reshape(omega, &[1, c])?
    };
    let im = g.mul(tv, w)?;
    let z = g.make_complex(re, im)?;
    g.exp_complex(z)
}

/// Batched parallel scan on the graph.
///
/// `alpha` is the effective decay (m), `omega` is `(c)` or `(m, c)`,
/// `x_tilde` is `(T, B, m)` real and `prev` is `(B, m, c)` complex. Returns
/// all states `(T, B, m, c)`.
pub fn scan_graph(g: &mut Graph, alpha: Var, omega: Var, x_tilde: Var, prev: Var, max_len: usize) -> Result<Var> {
    let &[t_len, b, m] = g.value(x_tilde).shape() else {
        return Err(FfmError::Dimension(format!("scan input must be (T, B, m), got {:?}", g.value(x_tilde).shape())));
    };
    if t_len == 0 {
        return Err(FfmError::Dimension("scan over an empty sequence".into()));
    }
    if t_len > max_len {
        return Err(FfmError::ChunkBound { len: t_len, max: max_len });
    }
    overflow_guard(g.value(alpha).real_values()?, t_len as f64)?;

    let t_last = (t_len - 1) as f64;
    let inner: Vec<f64> = (0..t_len).map(|j| t_last - j as f64).collect();
    let outer: Vec<f64> = (0..t_len).map(|p| p as f64 - t_last).collect();
    let carry: Vec<f64> = (0..t_len).map(|p| p as f64 + 1.0).collect();

    let g_in = gamma_graph(g, alpha, omega, &inner)?;
    let g_out = gamma_graph(g, alpha, omega, &outer)?;
    let g_carry = gamma_graph(g, alpha, omega, &carry)?;

    let xr = g.reshape(x_tilde, &[t_len, b, m, 1])?;
    let xc = g.unary(xr, Unary::ToComplex)?;
    let terms = g.mul(g_in, xc)?;
    let sums = g.cumsum(terms)?;
    let scaled = g.mul(g_out, sums)?;
    let decayed = g.mul(g_carry, prev)?;
    g.add(scaled, decayed)
}

/// [`scan_graph`] over chunks of at most `chunk` steps. Returns all states
/// and the final `(B, m, c)` state; gradients flow through the carried state.
pub fn chunked_scan_graph(
    g: &mut Graph,
    alpha: Var,
    omega: Var,
    x_tilde: Var,
    prev: Var,
    chunk: usize,
    max_len: usize,
) -> Result<(Var, Var)> {
    if chunk == 0 || chunk > max_len {
        return Err(FfmError::Config(format!("chunk must be in 1..={max_len}, got {chunk}")));
    }
    let shape = g.value(x_tilde).shape().to_vec();
    let (t_len, b) = (shape[0], shape[1]);
    let c_shape = g.value(prev).shape().to_vec();
    let mut parts = Vec::new();
    let mut state = prev;
    let mut start = 0;
    while start < t_len {
        let end = (start + chunk).min(t_len);
        let xs = if start == 0 && end == t_len { x_tilde } else { g.slice_rows(x_tilde, start, end)? };
        let states = scan_graph(g, alpha, omega, xs, state, max_len)?;
        let last = g.slice_rows(states, end - start - 1, end - start)?;
        state = g.reshape(last, &c_shape)?;
        parts.push(states);
        start = end;
    }
    let all = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    debug_assert_eq!(g.value(all).shape()[..2], [t_len, b]);
    Ok((all, state))
}

/// `gamma^1` on the graph, shaped `(1, m, c)` to broadcast over a batch.
pub fn unit_gamma_graph(g: &mut Graph, alpha: Var, omega: Var) -> Result<Var> {
    let gamma = gamma_graph(g, alpha, omega, &[1.0])?;
    let shape = g.value(gamma).shape()[1..].to_vec();
    g.reshape(gamma, &shape)
}

/// One recurrent update `S' = gamma * S + x 1^T` on the graph. `gamma` is
/// `(1, m, c)` from [`unit_gamma_graph`], `state` is `(B, m, c)`, `x_tilde`
/// is `(B, m)` real.
pub fn step_graph(g: &mut Graph, gamma: Var, state: Var, x_tilde: Var) -> Result<Var> {
    let shape = g.value(x_tilde).shape().to_vec();
    let xc = g.reshape(x_tilde, &[shape[0], shape[1], 1])?;
    let xc = g.unary(xc, Unary::ToComplex)?;
    let decayed = g.mul(gamma, state)?;
    g.add(decayed, xc)
}

/// The recurrence recorded one step at a time. Same inputs and outputs as
/// [`chunked_scan_graph`]; the graph grows by a few nodes per step instead
/// of a constant number per chunk.
pub fn recurrent_scan_graph(g: &mut Graph, alpha: Var, omega: Var, x_tilde: Var, prev: Var) -> Result<(Var, Var)> {
    let &[t_len, b, m] = g.value(x_tilde).shape() else {
        return Err(FfmError::Dimension(format!("scan input must be (T, B, m), got {:?}", g.value(x_tilde).shape())));
    };
    if t_len == 0 {
        return Err(FfmError::Dimension("scan over an empty sequence".into()));
    }
    let c_shape = g.value(prev).shape().to_vec();
    let mut one = c_shape.clone();
    one.insert(0, 1);
    let gamma = unit_gamma_graph(g, alpha, omega)?;
    let mut state = prev;
    let mut parts = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = g.slice_rows(x_tilde, t, t + 1)?;
        let xt = g.reshape(xt, &[b, m])?;
        state = step_graph(g, gamma, state, xt)?;
        parts.push(g.reshape(state, &one)?);
    }
    let all = g.concat_rows(&parts)?;
    Ok((all, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_params(rng: &mut ChaCha8Rng, m: usize, c: usize) -> DecayParams {
        let alpha: Vec<f64> = (0..m).map(|_| rng.gen_range(0.001..0.5)).collect();
        let omega: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DecayParams::new(&alpha, &omega, alpha_max_for(DEFAULT_MAX_LEN)).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, m: usize, c: usize) -> RecurrentState {
        let data = (0..m * c).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        RecurrentState { s: Tensor::complex(&[m, c], data).unwrap(), step: 0 }
    }

    fn random_inputs(rng: &mut ChaCha8Rng, t: usize, m: usize) -> Tensor {
        Tensor::real(&[t, m], (0..t * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn step_oracle(p: &DecayParams, x: &Tensor, prev: &RecurrentState) -> Vec<RecurrentState> {
        let m = p.trace_size();
        let mut s = prev.clone();
        let xs = x.as_real().unwrap();
        (0..x.shape()[0])
            .map(|t| {
                s = step(p, &xs[t * m..(t + 1) * m], &s).unwrap();
                s.clone()
            })
            .collect()
    }

    fn max_err_vs_oracle(states: &Tensor, oracle: &[RecurrentState]) -> f64 {
        let w = oracle[0].values().len();
        let s = states.as_complex().unwrap();
        oracle
            .iter()
            .enumerate()
            .flat_map(|(t, o)| o.values().iter().enumerate().map(move |(i, z)| (s[t * w + i] - z).norm()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gamma_pow_examples() {
        let p = DecayParams::new(&[0.3, 0.1], &[0.5, -2.0, 1.0], 1.0).unwrap();
        let g0 = gamma_pow(&p, 0.0).unwrap();
        assert!(g0.as_complex().unwrap().iter().all(|z| *z == Complex64::new(1.0, 0.0)));

        let half = DecayParams::new(&[2f64.ln()], &[0.0], 1.0).unwrap();
        let g = gamma_pow(&half, 1.0).unwrap().as_complex().unwrap()[0];
        assert!((g - Complex64::new(0.5, 0.0)).norm() < 1e-16);

        let quarter_turn = DecayParams::new(&[0.0], &[PI / 2.0], 1.0).unwrap();
        let g = gamma_pow(&quarter_turn, 1.0).unwrap().as_complex().unwrap()[0];
        assert!((g - Complex64::new(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn gamma_pow_overflow_names_alpha_and_t() {
        let p = DecayParams::new(&[0.5, 2.0], &[0.0], 10.0).unwrap();
        let err = gamma_pow(&p, -400.0).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, FfmError::Stability(_)));
        assert!(msg.contains("alpha[1] = 2") && msg.contains("t = -400"), "{msg}");
    }

    #[test]
    fn effective_alpha_is_clamped_magnitude() {
        let p = DecayParams::new(&[-0.2, 0.4, -9.0], &[0.0], 0.5).unwrap();
        assert_eq!(p.alpha(), vec![0.2, 0.4, 0.5]);
    }

    #[test]
    fn step_examples() {
        let p = DecayParams::new(&[0.3, 0.7], &[1.0, 2.0, 3.0], 1.0).unwrap();
        let s = step(&p, &[1.5, -2.0], &RecurrentState::zeros(2, 3)).unwrap();
        let v = s.values();
        assert!(v[..3].iter().all(|z| *z == Complex64::new(1.5, 0.0)));
        assert!(v[3..].iter().all(|z| *z == Complex64::new(-2.0, 0.0)));
        assert_eq!(s.step, 1);

        let p = DecayParams::new(&[2f64.ln()], &[0.0], 1.0).unwrap();
        let prev = RecurrentState { s: Tensor::complex(&[1, 1], vec![Complex64::new(8.0, 0.0)]).unwrap(), step: 0 };
        let s = step(&p, &[0.0], &prev).unwrap();
        assert!((s.values()[0] - Complex64::new(4.0, 0.0)).norm() < 1e-15);

        let p = DecayParams::new(&[0.0], &[PI], 1.0).unwrap();
        let s1 = step(&p, &[1.0], &RecurrentState::zeros(1, 1)).unwrap();
        let s2 = step(&p, &[1.0], &s1).unwrap();
        assert!(s2.values()[0].norm() < 1e-15);
    }

    #[test]
    fn step_rejects_non_finite_input() {
        let p = DecayParams::new(&[0.1], &[0.0], 1.0).unwrap();
        let err = step(&p, &[f64::NAN], &RecurrentState::zeros(1, 1)).unwrap_err();
        assert!(matches!(err, FfmError::Stability(_)));
    }

    #[test]
    fn scan_single_step_equals_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 3, 2);
        let prev = random_state(&mut rng, 3, 2);
        let x = random_inputs(&mut rng, 1, 3);
        let (states, last) = scan(&p, &x, &prev, &ScanOptions::default()).unwrap();
        let one = step(&p, x.as_real().unwrap(), &prev).unwrap();
        assert!(max_err_vs_oracle(&states, &[one.clone()]) < 1e-15);
        assert_eq!(last.step, one.step);
    }

    #[test]
    fn scan_of_zero_inputs_is_pure_carry_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 2, 3);
        let prev = random_state(&mut rng, 2, 3);
        let x = Tensor::zeros(&[5, 2], Dtype::Real64);
        let (states, _) = scan(&p, &x, &prev, &ScanOptions::default()).unwrap();
        let s = states.as_complex().unwrap();
        for t in 0..5 {
            let gm = gamma_pow(&p, t as f64 + 1.0).unwrap();
            for (i, (gv, pv)) in gm.as_complex().unwrap().iter().zip(prev.values()).enumerate() {
                assert!((s[t * 6 + i] - gv * pv).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn scan_matches_sequential_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 4, 3);
        let prev = random_state(&mut rng, 4, 3);
        let x = random_inputs(&mut rng, 64, 4);
        let (states, last) = scan(&p, &x, &prev, &ScanOptions::default()).unwrap();
        let oracle = step_oracle(&p, &x, &prev);
        assert!(max_err_vs_oracle(&states, &oracle) <= 1e-8);
        assert_eq!(last.step, 64);
    }

    #[test]
    fn naive_factoring_agrees_at_short_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 3, 3);
        let prev = random_state(&mut rng, 3, 3);
        let x = random_inputs(&mut rng, 16, 3);
        let stable = scan(&p, &x, &prev, &ScanOptions::default()).unwrap().0;
        let naive_opts = ScanOptions { mode: ScanMode::Naive, ..Default::default() };
        let naive = scan(&p, &x, &prev, &naive_opts).unwrap().0;
        assert!(stable.max_abs_diff(&naive).unwrap() < 1e-10);
    }

    #[test]
    fn scan_rejects_chunks_above_the_bound() {
        let p = DecayParams::new(&[0.1], &[0.0], 1.0).unwrap();
        let x = Tensor::zeros(&[9, 1], Dtype::Real64);
        let opts = ScanOptions { max_len: 8, ..Default::default() };
        let err = scan(&p, &x, &RecurrentState::zeros(1, 1), &opts).unwrap_err();
        assert!(matches!(err, FfmError::ChunkBound { len: 9, max: 8 }));
        assert!(err.to_string().contains("chunked_scan"));
    }

    #[test]
    fn chunked_scan_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 3, 2);
        let prev = random_state(&mut rng, 3, 2);
        let x = random_inputs(&mut rng, 256, 3);
        let opts = ScanOptions::default();
        let (mono, mono_last) = scan(&p, &x, &prev, &opts).unwrap();

        let (whole, _) = chunked_scan(&p, &x, &prev, 256, &opts).unwrap();
        assert_eq!(whole, mono);

        let (ones, _) = chunked_scan(&p, &x, &prev, 1, &opts).unwrap();
        assert!(max_err_vs_oracle(&ones, &step_oracle(&p, &x, &prev)) < 1e-12);

        let (chunks, last) = chunked_scan(&p, &x, &prev, 32, &opts).unwrap();
        assert!(chunks.max_abs_diff(&mono).unwrap() <= 1e-9);
        assert_eq!(last.step, mono_last.step);
    }

    #[test]
    fn decay_without_context_is_strictly_decreasing() {
        let p = DecayParams::new(&[0.05, 0.3], &[0.0, 0.0], 1.0).unwrap();
        let mut x = vec![0.0; 2 * 50];
        x[0] = 1.0;
        x[1] = 1.0;
        let x = Tensor::real(&[50, 2], x).unwrap();
        let (states, _) = scan(&p, &x, &RecurrentState::zeros(2, 2), &ScanOptions::default()).unwrap();
        let s = states.as_complex().unwrap();
        for t in 1..50 {
            for i in 0..4 {
                assert!(s[t * 4 + i].norm() < s[(t - 1) * 4 + i].norm());
            }
        }
    }

    #[test]
    fn context_without_decay_is_periodic() {
        let period = 12.0;
        let p = DecayParams::new(&[0.0], &[2.0 * PI / period], 1.0).unwrap();
        let mut x = vec![0.0; 40];
        x[0] = 1.0;
        let x = Tensor::real(&[40, 1], x).unwrap();
        let (states, _) = scan(&p, &x, &RecurrentState::zeros(1, 1), &ScanOptions::default()).unwrap();
        let s = states.as_complex().unwrap();
        assert!((s[12] - s[0]).norm() < 1e-9);
        assert!((s[24] - s[0]).norm() < 1e-9);
        assert!((s[6] - s[0]).norm() > 1.0);
    }

    #[test]
    fn graph_scan_matches_value_scan_with_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, c, t, b) = (3, 2, 20, 2);
        let p = random_params(&mut rng, m, c);
        let states: Vec<RecurrentState> = (0..b).map(|_| random_state(&mut rng, m, c)).collect();
        let xs: Vec<Tensor> = (0..b).map(|_| random_inputs(&mut rng, t, m)).collect();

        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&p.alpha()));
        let w = g.constant(p.omega.clone());
        let mut xd = vec![0.0; t * b * m];
        for (bi, x) in xs.iter().enumerate() {
            for ti in 0..t {
                for j in 0..m {
                    xd[(ti * b + bi) * m + j] = x.as_real().unwrap()[ti * m + j];
                }
            }
        }
        let xv = g.constant(Tensor::real(&[t, b, m], xd).unwrap());
        let sd: Vec<Complex64> = states.iter().flat_map(|s| s.values().to_vec()).collect();
        let sv = g.constant(Tensor::complex(&[b, m, c], sd).unwrap());
        let (all, _) = chunked_scan_graph(&mut g, a, w, xv, sv, 7, DEFAULT_MAX_LEN).unwrap();
        let got = g.value(all).as_complex().unwrap();

        for bi in 0..b {
            let (want, _) = scan(&p, &xs[bi], &states[bi], &ScanOptions::default()).unwrap();
            let want = want.as_complex().unwrap();
            for ti in 0..t {
                for i in 0..m * c {
                    assert!((got[(ti * b + bi) * m * c + i] - want[ti * m * c + i]).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn graph_scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, c, t) = (3, 2, 12);
        let alpha_raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..0.4) * if rng.gen() { 1.0 } else { -1.0 }).collect();
        let omega: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::real(&[t, 1, m], (0..t * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let prev = random_state(&mut rng, m, c).s.reshape(&[1, m, c]).unwrap();
        let params = vec![
            ("alpha_raw".to_string(), Tensor::vector(&alpha_raw)),
            ("omega".to_string(), Tensor::vector(&omega)),
            ("x".to_string(), x),
            ("prev".to_string(), prev),
        ];
        let report = check_gradients(&params, FD_STEP, |g, v| {
            let a = effective_alpha(g, v[0], 1.0)?;
            let (states, _) = chunked_scan_graph(g, a, v[1], v[2], v[3], 5, DEFAULT_MAX_LEN)?;
            let re = g.unary(states, Unary::RealPart)?;
            let im = g.unary(states, Unary::ImagPart)?;
            let r2 = g.mul(re, re)?;
            let mix = g.mul(re, im)?;
            let s = g.add(r2, mix)?;
            g.sum(s)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn recurrent_graph_matches_parallel_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, c, t, b) = (3, 2, 15, 2);
        let alpha: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..0.4)).collect();
        let omega: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::real(&[t, b, m], (0..t * b * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let prev = Tensor::complex(
            &[b, m, c],
            (0..b * m * c).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
        )
        .unwrap();
        let run = |recurrent: bool| {
            let mut g = Graph::new();
            let a = g.param(Tensor::vector(&alpha));
            let w = g.param(Tensor::vector(&omega));
            let xv = g.param(x.clone());
            let pv = g.param(prev.clone());
            let (all, last) = if recurrent {
                recurrent_scan_graph(&mut g, a, w, xv, pv).unwrap()
            } else {
                chunked_scan_graph(&mut g, a, w, xv, pv, 4, DEFAULT_MAX_LEN).unwrap()
            };
            let re = g.unary(all, Unary::RealPart).unwrap();
            let im = g.unary(last, Unary::ImagPart).unwrap();
            let sq = g.mul(re, re).unwrap();
            let l1 = g.sum(sq).unwrap();
            let l2 = g.sum(im).unwrap();
            let loss = g.add(l1, l2).unwrap();
            g.backward(loss).unwrap();
            let grads: Vec<Tensor> = [a, w, xv, pv].iter().map(|&v| g.grad(v).unwrap().clone()).collect();
            (g.value(all).clone(), g.value(last).clone(), grads)
        };
        let (pa, pl, pg) = run(false);
        let (ra, rl, rg) = run(true);
        assert!(pa.max_abs_diff(&ra).unwrap() < 1e-10);
        assert!(pl.max_abs_diff(&rl).unwrap() < 1e-10);
        for (p, r) in pg.iter().zip(&rg) {
            assert!(p.max_abs_diff(r).unwrap() < 1e-8);
        }
    }

    #[test]
    fn single_precision_breaks_at_full_length() {
        let m = 8;
        let alpha: Vec<f64> = (0..m).map(|j| 0.0045 + j as f64 * (alpha_max_for(1024) - 0.0045) / 7.0).collect();
        let p = DecayParams::new(&alpha, &[0.1, 0.5], alpha_max_for(1024)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_inputs(&mut rng, 1024, m);
        let prev = RecurrentState::zeros(m, 2);
        let (double, _) = scan(&p, &x, &prev, &ScanOptions::default()).unwrap();
        assert!(double.is_finite());
        let single_opts = ScanOptions { precision: Precision::Single, ..Default::default() };
        let (single, _) = scan(&p, &x, &prev, &single_opts).unwrap();
        assert!(!single.is_finite());
    }
}
