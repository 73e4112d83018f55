//! Bundled oracle checks. Each check compares two independent routes to the
//! same quantity and reports the largest disagreement.
//!
//! [`SelftestOptions`] can push the value-level scan through a deliberately
//! corrupted factoring or 32-bit arithmetic; both must make the report fail.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{
    self, alpha_max_for, chunked_scan, gamma_pow, scan, DecayParams, Precision, RecurrentState, ScanMode, ScanOptions,
    DEFAULT_MAX_LEN,
};
use crate::cell::{CellDims, CellParams, ForwardOptions, ParamMode, VariantFlags};
use crate::error::Result;
use crate::numerics::gradcheck::{check_gradients, FD_STEP, RTOL};
use crate::numerics::{Graph, Tensor, Unary};

pub const EQUIVALENCE_TOL: f64 = 1e-8;
pub const CONVOLUTION_TOL: f64 = 1e-8;
pub const CHUNKING_TOL: f64 = 1e-9;
pub const SHIFT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelftestOptions {
    /// Factoring used by the value-level scan.
    pub mode: ScanMode,
    /// Arithmetic used by the value-level scan and the stability forward.
    pub precision: Precision,
    /// Random instances for the scan/step equivalence check.
    pub instances: usize,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions { mode: ScanMode::Stabilized, precision: Precision::Double, instances: 10, seed: 0 }
    }
}

impl SelftestOptions {
    fn scan_options(&self) -> ScanOptions {
        ScanOptions { mode: self.mode, precision: self.precision, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub case: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Error raised while running the check, if any.
    pub error: Option<String>,
}

impl CheckResult {
    fn measured(module: &'static str, case: String, max_error: f64, tolerance: f64) -> Self {
        let passed = max_error <= tolerance;
        CheckResult { module, case, max_error, tolerance, passed, error: None }
    }

    fn from_result(module: &'static str, case: String, tolerance: f64, r: Result<f64>) -> Self {
        match r {
            Ok(e) => Self::measured(module, case, e, tolerance),
            Err(e) => CheckResult {
                module,
                case,
                max_error: f64::INFINITY,
                tolerance,
                passed: false,
                error: Some(e.to_string()),
            },
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: max error {:.3e} (tolerance {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.module,
            self.case,
            self.max_error,
            self.tolerance
        )?;
        if let Some(e) = &self.error {
            write!(f, " [{e}]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

pub fn selftest() -> SelftestReport {
    selftest_with(&SelftestOptions::default())
}

pub fn selftest_with(opts: &SelftestOptions) -> SelftestReport {
    let seed = opts.seed;
    let checks = vec![
        CheckResult::from_result(
            "aggregator",
            format!("scan == repeated step ({} instances, T=256)", opts.instances),
            EQUIVALENCE_TOL,
            scan_step_equivalence(opts.instances, 256, seed, &opts.scan_options()),
        ),
        CheckResult::from_result(
            "aggregator",
            "chunk 32 == monolithic (T=256)".into(),
            CHUNKING_TOL,
            chunking_invariance(256, 32, seed, &opts.scan_options()),
        ),
        gradient_check(seed),
        CheckResult::from_result(
            "cell",
            "projection == Fourier convolution (n=128)".into(),
            CONVOLUTION_TOL,
            convolution_oracle(128, seed),
        ),
        CheckResult::from_result(
            "cell",
            "finite and step-equivalent at T=1024 after default init".into(),
            EQUIVALENCE_TOL,
            stability(1024, seed, opts),
        ),
        CheckResult::from_result("aggregator", "gamma shift property (1000 pairs)".into(), SHIFT_TOL, shift_property(1000, seed)),
    ];
    SelftestReport { checks }
}

fn random_decay(rng: &mut ChaCha8Rng, m: usize, c: usize) -> Result<DecayParams> {
    let alpha: Vec<f64> = (0..m).map(|_| rng.gen_range(0.001..0.5)).collect();
    let omega: Vec<f64> = (0..c).map(|_| rng.gen_range(-PI..PI)).collect();
    DecayParams::new(&alpha, &omega, alpha_max_for(DEFAULT_MAX_LEN))
}

fn random_state(rng: &mut ChaCha8Rng, m: usize, c: usize) -> Result<RecurrentState> {
    let data = (0..m * c).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    Ok(RecurrentState { s: Tensor::complex(&[m, c], data)?, step: 0 })
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::real(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Largest gap between the parallel scan and `t_len` recurrent steps over
/// `instances` random problems with `m, c <= 8`.
pub fn scan_step_equivalence(instances: usize, t_len: usize, seed: u64, opts: &ScanOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let (m, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let params = random_decay(&mut rng, m, c)?;
        let prev = random_state(&mut rng, m, c)?;
        let x = random_rows(&mut rng, t_len, m)?;
        let (states, _) = scan(&params, &x, &prev, opts)?;
        let states = states.as_complex().expect("scan returns complex states");
        let xs = x.as_real().expect("real input");
        let mut s = prev;
        for t in 0..t_len {
            s = aggregator::step(&params, &xs[t * m..(t + 1) * m], &s)?;
            for (a, b) in states[t * m * c..(t + 1) * m * c].iter().zip(s.values()) {
                worst = worst.max((a - b).norm());
            }
        }
    }
    Ok(worst)
}

/// Largest gap between a chunked scan and one monolithic scan.
pub fn chunking_invariance(t_len: usize, chunk: usize, seed: u64, opts: &ScanOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4);
    let (m, c) = (6, 4);
    let params = random_decay(&mut rng, m, c)?;
    let prev = random_state(&mut rng, m, c)?;
    let x = random_rows(&mut rng, t_len, m)?;
    let (whole, a) = scan(&params, &x, &prev, opts)?;
    let (parts, b) = chunked_scan(&params, &x, &prev, chunk, opts)?;
    Ok(whole.max_abs_diff(&parts)?.max(a.s.max_abs_diff(&b.s)?))
}

fn moderate_cell(dims: CellDims, seed: u64) -> Result<CellParams> {
    let mut p = CellParams::init(dims, DEFAULT_MAX_LEN, 0.01, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdeca);
    let alpha: Vec<f64> = (0..dims.m).map(|_| rng.gen_range(0.01..0.3)).collect();
    let omega: Vec<f64> = (0..dims.c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    p.decay = DecayParams::new(&alpha, &omega, p.decay.alpha_max)?;
    Ok(p)
}

/// Central-difference check of every cell parameter at `d=4, m=3, c=2,
/// T=16`, with the sequence split into chunks of 6 so gradients cross chunk
/// boundaries.
pub fn cell_gradient_report(seed: u64) -> Result<crate::numerics::gradcheck::GradCheckReport> {
    let (d, m, c, t_len, b) = (4, 3, 2, 16, 2);
    let p = moderate_cell(CellDims::new(d, m, c), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let x = Tensor::real(&[t_len, b, d], (0..t_len * b * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let prev = Tensor::complex(
        &[b, m, c],
        (0..b * m * c).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
    )?;
    let weights = Tensor::real(&[t_len, b, d], (0..t_len * b * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let params: Vec<(String, Tensor)> = p.parameters().into_iter().map(|r| (r.name.to_string(), r.tensor.clone())).collect();
    check_gradients(&params, FD_STEP, |g: &mut Graph, leaves| {
        let vars = p.bind_leaves(g, leaves)?;
        let xv = g.constant(x.clone());
        let pv = g.constant(prev.clone());
        let opts = ForwardOptions { chunk: Some(6), ..Default::default() };
        let out = p.forward_graph(g, &vars, xv, pv, &opts)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out.y, w)?;
        let last = g.unary(out.last, Unary::ImagPart)?;
        let a = g.sum(prod)?;
        let s = g.sum(last)?;
        g.add(a, s)
    })
}

fn gradient_check(seed: u64) -> CheckResult {
    let case = "all parameters vs central differences (d=4 m=3 c=2 T=16; relative error above a 1e-8 absolute floor)".to_string();
    match cell_gradient_report(seed) {
        Ok(r) => {
            let passed = r.passed();
            CheckResult {
                module: "cell",
                case,
                max_error: r.max_rel_err,
                tolerance: RTOL,
                passed,
                error: r.worst.filter(|_| !passed),
            }
        }
        Err(e) => CheckResult::from_result("cell", case, RTOL, Err(e)),
    }
}

/// Single-trace cell with fixed decay and context, no output gate and no
/// layer norm, compared against the explicit O(n^2) sum
/// `z_n = b + sum_s xg_s * sum_k exp(-tau alpha) (W_re cos(tau w_k) - W_im sin(tau w_k))`.
pub fn convolution_oracle(n: usize, seed: u64) -> Result<f64> {
    let (d, c) = (3, 4);
    let mut p = moderate_cell(CellDims::new(d, 1, c), seed)?;
    p.variant =
        VariantFlags { output_gate: false, decay: ParamMode::Fixed, context: ParamMode::Fixed, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0);
    let x = random_rows(&mut rng, n, d)?;
    let opts = ForwardOptions { layer_norm: false, ..Default::default() };
    let (y, _) = p.forward(&x, &RecurrentState::zeros(1, c), &opts)?;
    let y = y.as_real().expect("real output");

    let alpha = p.decay.alpha()[0];
    let omega = p.decay.omega.as_real().expect("real frequencies").to_vec();
    let xs = x.as_real().expect("real input");
    let gated: Vec<f64> = (0..n)
        .map(|t| {
            let row = &xs[t * d..(t + 1) * d];
            p.l1.apply(row)[0] / (1.0 + (-p.l2.apply(row)[0]).exp())
        })
        .collect();
    let w = p.l3.weight.as_real().expect("real weights");
    let bias = p.l3.bias.as_real().expect("real bias");
    let mut worst = 0.0_f64;
    for t in 0..n {
        for i in 0..d {
            let mut z = bias[i];
            for (s, &xg) in gated.iter().enumerate().take(t + 1) {
                let tau = (t - s) as f64;
                let decay = (-tau * alpha).exp();
                let filter: f64 = (0..c)
                    .map(|k| decay * (w[k * d + i] * (tau * omega[k]).cos() - w[(c + k) * d + i] * (tau * omega[k]).sin()))
                    .sum();
                z += xg * filter;
            }
            worst = worst.max((y[t * d + i] - z).abs());
        }
    }
    Ok(worst)
}

/// A default-initialized cell (`t_e = 1024`, `beta = 0.01`) over one
/// monolithic `t_len` sequence. The forward output must be finite and the
/// value-level scan must agree with the step recurrence.
pub fn stability(t_len: usize, seed: u64, opts: &SelftestOptions) -> Result<f64> {
    let dims = CellDims::new(8, 8, 4);
    let p = CellParams::init(dims, DEFAULT_MAX_LEN, 0.01, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57ab);
    let x = random_rows(&mut rng, t_len, dims.d)?;
    let zero = RecurrentState::zeros(dims.m, dims.c);
    let fo = ForwardOptions { precision: opts.precision, ..Default::default() };
    p.forward(&x, &zero, &fo)?;

    let xs = x.as_real().expect("real input");
    let x_tilde: Vec<f64> = (0..t_len)
        .flat_map(|t| {
            let row = &xs[t * dims.d..(t + 1) * dims.d];
            let a = p.l1.apply(row);
            let g = p.l2.apply(row);
            a.into_iter().zip(g).map(|(a, g)| a / (1.0 + (-g).exp())).collect::<Vec<_>>()
        })
        .collect();
    let decay = p.effective_decay()?;
    let (states, _) = scan(&decay, &Tensor::real(&[t_len, dims.m], x_tilde.clone())?, &zero, &opts.scan_options())?;
    if !states.is_finite() {
        return Ok(f64::INFINITY);
    }
    let states = states.as_complex().expect("complex states");
    let width = dims.m * dims.c;
    let mut s = zero;
    let mut worst = 0.0_f64;
    for t in 0..t_len {
        s = aggregator::step(&decay, &x_tilde[t * dims.m..(t + 1) * dims.m], &s)?;
        for (a, b) in states[t * width..(t + 1) * width].iter().zip(s.values()) {
            worst = worst.max((a - b).norm());
        }
    }
    Ok(worst)
}

/// Largest `|gamma^a * gamma^b - gamma^(a+b)|` over `pairs` random
/// non-negative exponents.
pub fn shift_property(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5417);
    let mut worst = 0.0_f64;
    for _ in 0..pairs {
        let (m, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let params = random_decay(&mut rng, m, c)?;
        let a = rng.gen_range(0.0..512.0);
        let b = rng.gen_range(0.0..512.0);
        let ga = gamma_pow(&params, a)?;
        let gb = gamma_pow(&params, b)?;
        let gab = gamma_pow(&params, a + b)?;
        let (ga, gb, gab) = (ga.as_complex().unwrap(), gb.as_complex().unwrap(), gab.as_complex().unwrap());
        for i in 0..ga.len() {
            worst = worst.max((ga[i] * gb[i] - gab[i]).norm());
        }
    }
    Ok(worst)
}
