//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails. Runs without the libtest harness so the lines always
//! appear and the timing checks never share the CPU with other checks.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ffm::aggregator::{self, alpha_max_for, gamma_pow, scan, DecayParams, Precision, RecurrentState, ScanOptions};
use ffm::bench::{bench_train_pass, BenchConfig, BenchModel, Finding};
use ffm::cell::{CellDims, CellParams, ForwardOptions, ParamMode, VariantFlags};
use ffm::error::FfmError;
use ffm::model::{InitSpec, ModelSpec};
use ffm::numerics::gradcheck::{check_gradients, FD_STEP};
use ffm::numerics::{Tensor, Unary};
use ffm::tasks::TaskSpec;
use ffm::trainer::{train, OptimizerSpec, TrainConfig};

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    ReportOnly,
}

struct Line {
    id: u32,
    name: &'static str,
    verdict: Verdict,
    detail: String,
}

impl Line {
    fn new(id: u32, name: &'static str, pass: bool, detail: String) -> Self {
        Line { id, name, verdict: if pass { Verdict::Pass } else { Verdict::Fail }, detail }
    }

    fn print(&self) {
        let v = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::ReportOnly => "REPORT-ONLY",
        };
        println!("acceptance {:>2} {:<28} {v:<11} {}", self.id, self.name, self.detail);
    }
}

fn errored(id: u32, name: &'static str, e: FfmError) -> Line {
    Line::new(id, name, false, format!("error: {e}"))
}

const MAX_LEN: usize = 1024;

fn random_decay(rng: &mut ChaCha8Rng, m: usize, c: usize) -> DecayParams {
    let alpha: Vec<f64> = (0..m).map(|_| rng.gen_range(0.001..0.5)).collect();
    let omega: Vec<f64> = (0..c).map(|_| rng.gen_range(-PI..PI)).collect();
    DecayParams::new(&alpha, &omega, alpha_max_for(MAX_LEN)).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::real(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A default-initialized cell with decay/context redrawn in a moderate
/// range, so short sequences still mix across many steps.
fn moderate_cell(dims: CellDims, seed: u64) -> CellParams {
    let mut p = CellParams::init(dims, MAX_LEN, 0.01, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let alpha: Vec<f64> = (0..dims.m).map(|_| rng.gen_range(0.01..0.3)).collect();
    let omega: Vec<f64> = (0..dims.c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    p.decay = DecayParams::new(&alpha, &omega, p.decay.alpha_max).unwrap();
    p
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t_len = 256;
    let (mut vs_step, mut vs_oracle) = (0.0_f64, 0.0_f64);
    for _ in 0..50 {
        let (m, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let p = random_decay(&mut rng, m, c);
        let prev: Vec<Complex64> =
            (0..m * c).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let x = random_tensor(&mut rng, &[t_len, m]);
        let state = RecurrentState { s: Tensor::complex(&[m, c], prev.clone()).unwrap(), step: 0 };
        let (states, _) = match scan(&p, &x, &state, &ScanOptions::default()) {
            Ok(s) => s,
            Err(e) => return errored(1, "scan == repeated step", e),
        };
        let states = states.as_complex().unwrap();
        let xs = x.as_real().unwrap();
        // Plain complex arithmetic, independent of the crate.
        let alpha = p.alpha();
        let omega = p.omega.as_real().unwrap();
        let gamma: Vec<Complex64> = (0..m * c).map(|i| Complex64::new(-alpha[i / c], -omega[i % c]).exp()).collect();
        let mut oracle = prev;
        let mut stepped = state;
        for t in 0..t_len {
            for i in 0..m * c {
                oracle[i] = gamma[i] * oracle[i] + xs[t * m + i / c];
            }
            stepped = aggregator::step(&p, &xs[t * m..(t + 1) * m], &stepped).unwrap();
            for i in 0..m * c {
                let s = states[t * m * c + i];
                vs_step = vs_step.max((s - stepped.values()[i]).norm());
                vs_oracle = vs_oracle.max((s - oracle[i]).norm());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = vs_step.max(vs_oracle);
    Line::new(
        1,
        "scan == repeated step",
        worst <= 1e-8 && secs < 30.0,
        format!("50 instances T=256: max |scan-step| {vs_step:.2e}, max |scan-loop| {vs_oracle:.2e} (tol 1e-8), {secs:.2}s (limit 30s)"),
    )
}

fn cell_gradcheck(seed: u64, t_len: usize, chunk: usize) -> ffm::error::Result<(ffm::numerics::gradcheck::GradCheckReport, usize)> {
    let (d, m, c, b) = (4, 3, 2, 2);
    let p = moderate_cell(CellDims::new(d, m, c), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000));
    let x = random_tensor(&mut rng, &[t_len, b, d]);
    let w = random_tensor(&mut rng, &[t_len, b, d]);
    let params: Vec<(String, Tensor)> = p.parameters().into_iter().map(|r| (r.name.to_string(), r.tensor.clone())).collect();
    let classes = params.len();
    let report = check_gradients(&params, FD_STEP, |g, leaves| {
        let vars = p.bind_leaves(g, leaves)?;
        let xv = g.constant(x.clone());
        let pv = g.constant(Tensor::zeros(&[b, m, c], ffm::numerics::Dtype::Complex128));
        let out = p.forward_graph(g, &vars, xv, pv, &ForwardOptions { chunk: Some(chunk), ..Default::default() })?;
        let wv = g.constant(w.clone());
        let prod = g.mul(out.y, wv)?;
        let last = g.unary(out.last, Unary::RealPart)?;
        let a = g.sum(prod)?;
        let s = g.sum(last)?;
        g.add(a, s)
    })?;
    Ok((report, classes))
}

fn criterion_2() -> Line {
    let (mut worst_rel, mut worst_abs, mut failures, mut checked) = (0.0_f64, 0.0_f64, 0, 0);
    for seed in 0..10 {
        match cell_gradcheck(seed, 16, 16) {
            Ok((r, classes)) => {
                assert_eq!(classes, 12);
                worst_rel = worst_rel.max(r.max_rel_err);
                worst_abs = worst_abs.max(r.max_abs_err);
                failures += r.failures;
                checked += r.checked;
            }
            Err(e) => return errored(2, "gradient fidelity", e),
        }
    }
    Line::new(
        2,
        "gradient fidelity",
        failures == 0,
        format!(
            "10 seeds, 12 parameter tensors, {checked} entries: max rel err {worst_rel:.2e} (tol 1e-5), max abs err {worst_abs:.2e}, {failures} failures"
        ),
    )
}

fn criterion_3() -> Line {
    let (d, c, n) = (3, 4, 128);
    let mut worst = 0.0_f64;
    for seed in 0..10 {
        let mut p = moderate_cell(CellDims::new(d, 1, c), seed);
        p.variant = VariantFlags {
            output_gate: false,
            decay: ParamMode::Fixed,
            context: ParamMode::Fixed,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3000));
        let x = random_tensor(&mut rng, &[n, d]);
        let opts = ForwardOptions { layer_norm: false, ..Default::default() };
        let y = match p.forward(&x, &RecurrentState::zeros(1, c), &opts) {
            Ok((y, _)) => y,
            Err(e) => return errored(3, "Fourier convolution oracle", e),
        };
        let y = y.as_real().unwrap();
        let xs = x.as_real().unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let lin = |w: &Tensor, b: &Tensor, row: &[f64], j: usize| {
            let (w, b) = (w.as_real().unwrap(), b.as_real().unwrap());
            let cols = b.len();
            b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * cols + j]).sum::<f64>()
        };
        let gated: Vec<f64> = (0..n)
            .map(|t| {
                let row = &xs[t * d..(t + 1) * d];
                lin(&p.l1.weight, &p.l1.bias, row, 0) * sig(lin(&p.l2.weight, &p.l2.bias, row, 0))
            })
            .collect();
        let alpha = p.decay.alpha()[0];
        let omega = p.decay.omega.as_real().unwrap();
        let w3 = p.l3.weight.as_real().unwrap();
        let b3 = p.l3.bias.as_real().unwrap();
        for t in 0..n {
            for i in 0..d {
                let mut z = b3[i];
                for (s, g) in gated.iter().enumerate().take(t + 1) {
                    let tau = (t - s) as f64;
                    let filter: f64 = (0..c)
                        .map(|k| {
                            let h = Complex64::new(-tau * alpha, -tau * omega[k]).exp();
                            w3[k * d + i] * h.re + w3[(c + k) * d + i] * h.im
                        })
                        .sum();
                    z += g * filter;
                }
                worst = worst.max((y[t * d + i] - z).abs());
            }
        }
    }
    Line::new(3, "Fourier convolution oracle", worst <= 1e-8, format!("n=128, 10 seeds: max abs diff {worst:.2e} (tol 1e-8)"))
}

fn criterion_4() -> Line {
    let dims = CellDims::new(8, 8, 4);
    let p = CellParams::init(dims, MAX_LEN, 0.01, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[MAX_LEN, dims.d]);
    let zero = RecurrentState::zeros(dims.m, dims.c);

    let double = p.forward(&x, &zero, &ForwardOptions::default());
    let double_ok = matches!(&double, Ok((y, s)) if y.is_finite() && s.is_finite());

    // The aggregator on its own, double vs 32-bit, against the recurrence.
    let xs = x.as_real().unwrap();
    let x_tilde: Vec<f64> = (0..MAX_LEN)
        .flat_map(|t| {
            let row = &xs[t * dims.d..(t + 1) * dims.d];
            let a = p.l1.apply(row);
            let g = p.l2.apply(row);
            a.into_iter().zip(g).map(|(a, g)| a / (1.0 + (-g).exp())).collect::<Vec<_>>()
        })
        .collect();
    let xt = Tensor::real(&[MAX_LEN, dims.m], x_tilde.clone()).unwrap();
    let mut stepped = Vec::with_capacity(MAX_LEN * dims.m * dims.c);
    let mut s = zero.clone();
    for t in 0..MAX_LEN {
        s = aggregator::step(&p.decay, &x_tilde[t * dims.m..(t + 1) * dims.m], &s).unwrap();
        stepped.extend_from_slice(s.values());
    }
    let gap = |precision: Precision| -> f64 {
        let opts = ScanOptions { precision, ..Default::default() };
        let (states, _) = scan(&p.decay, &xt, &zero, &opts).unwrap();
        states.as_complex().unwrap().iter().zip(&stepped).map(|(a, b)| (a - b).norm()).fold(0.0, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v) })
    };
    let double_gap = gap(Precision::Double);
    let single_gap = gap(Precision::Single);

    let single = p.forward(&x, &zero, &ForwardOptions { precision: Precision::Single, ..Default::default() });
    let single_fails_finite = match &single {
        Err(FfmError::NonFiniteOutput(_)) => true,
        Ok((y, _)) => !y.is_finite(),
        Err(_) => false,
    };
    let single_detected = single_fails_finite || single_gap > 1e-8;
    Line::new(
        4,
        "stability at T=1024",
        double_ok && double_gap <= 1e-8 && single_detected,
        format!(
            "f64: finite={double_ok}, scan-step gap {double_gap:.2e}; f32: non-finite output={single_fails_finite}, scan-step gap {single_gap:.2e} (must fail one)"
        ),
    )
}

fn criterion_5() -> Line {
    let p = moderate_cell(CellDims::new(6, 4, 3), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[256, 6]);
    let zero = RecurrentState::zeros(4, 3);
    let (whole, a) = p.forward(&x, &zero, &ForwardOptions::default()).unwrap();
    let (parts, b) = p.forward(&x, &zero, &ForwardOptions { chunk: Some(32), ..Default::default() }).unwrap();
    let diff = whole.max_abs_diff(&parts).unwrap().max(a.s.max_abs_diff(&b.s).unwrap());
    let (report, _) = match cell_gradcheck(50, 48, 32) {
        Ok(r) => r,
        Err(e) => return errored(5, "chunking invariance", e),
    };
    Line::new(
        5,
        "chunking invariance",
        diff <= 1e-9 && report.passed(),
        format!(
            "T=256 chunk 32 vs monolithic: max abs diff {diff:.2e} (tol 1e-9); gradcheck T=48 across a chunk-32 boundary: max rel err {:.2e} (tol 1e-5), {} failures",
            report.max_rel_err, report.failures
        ),
    )
}

fn criterion_6() -> Line {
    let base = BenchConfig { latency_steps: vec![], ..Default::default() };
    let run = |models: Vec<BenchModel>, lengths: Vec<usize>, workers: Vec<usize>, latency: Vec<usize>| {
        bench_train_pass(&BenchConfig { models, lengths, workers, latency_steps: latency, ..base.clone() })
    };
    let all = vec![256, 512, 1024, 2048];
    let reports = [
        run(vec![BenchModel::Ffm], all.clone(), vec![1], vec![]),
        run(vec![BenchModel::Gru], all, vec![1], vec![]),
        run(vec![BenchModel::Ffm, BenchModel::FfmRecurrent], vec![1024], vec![8], vec![10, 1000]),
    ];
    let mut findings: Vec<Finding> = Vec::new();
    for r in reports {
        match r {
            Ok(r) => findings.extend(r.findings()),
            Err(e) => return errored(6, "complexity trend", e),
        }
    }
    let pass = findings.iter().all(|f| f.passed);
    let detail = findings
        .iter()
        .map(|f| {
            let v = if f.value.abs() < 1e-3 { format!("{:.2e}", f.value) } else { format!("{:.3}", f.value) };
            format!("{} {}={v}", if f.passed { "ok" } else { "FAILED" }, f.name)
        })
        .collect::<Vec<_>>()
        .join("; ");
    let cores = std::thread::available_parallelism().map(usize::from).unwrap_or(1);
    Line::new(6, "complexity trend", pass, format!("{cores} core(s): {detail}"))
}

fn train_cfg(model: ModelSpec, task: TaskSpec, steps: usize, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        model,
        task,
        optimizer: OptimizerSpec::adam(3e-3),
        batch,
        steps,
        eval_every: steps,
        eval_batch: 256,
        seed,
        chunk: None,
        workers: 1,
        clip_norm: None,
    }
}

fn final_accuracy(cfg: &TrainConfig) -> ffm::error::Result<f64> {
    Ok(train(cfg)?.0.final_eval().accuracy)
}

fn list(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Step budget for the learning check, pinned from the sweep in
/// `docs/sweeps/`: every seed crossed 0.95 by step 1125.
const LEARNING_BUDGET: usize = 1500;
/// Budget for the ablation comparison; the two variants separate by step 500.
const ABLATION_BUDGET: usize = 750;

fn repeat_previous_k4() -> TaskSpec {
    TaskSpec::RepeatPrevious { length: 32, k: 4, vocab: 4 }
}

fn criterion_7() -> Line {
    let ffm = final_accuracy(&train_cfg(ModelSpec::ffm(8, 8, 4), repeat_previous_k4(), LEARNING_BUDGET, 64, 0));
    let mlp = final_accuracy(&train_cfg(ModelSpec::Mlp { d: 8, hidden: 64 }, repeat_previous_k4(), LEARNING_BUDGET, 64, 0));
    match (ffm, mlp) {
        (Ok(f), Ok(m)) => Line::new(
            7,
            "learning vs memoryless MLP",
            f >= 0.95 && (m - 0.25).abs() <= 0.05,
            format!("RepeatPrevious k=4 T=32, {LEARNING_BUDGET} steps: FFM {f:.4} (need >= 0.95), MLP {m:.4} (need within 0.05 of 0.25)"),
        ),
        (Err(e), _) | (_, Err(e)) => errored(7, "learning vs memoryless MLP", e),
    }
}

fn criterion_8() -> Line {
    let spec = |variant: &str| ModelSpec::Ffm {
        d: 8,
        m: 8,
        c: 4,
        variant: variant.into(),
        t_e: 1024,
        beta: 0.01,
        init: InitSpec::Default,
    };
    let mut acc = [Vec::new(), Vec::new()];
    for seed in 0..5 {
        for (i, v) in ["FFM", "ND"].iter().enumerate() {
            match final_accuracy(&train_cfg(spec(v), repeat_previous_k4(), ABLATION_BUDGET, 64, seed)) {
                Ok(a) => acc[i].push(a),
                Err(e) => return errored(8, "no-decay ablation", e),
            }
        }
    }
    let (full, nd) = (mean(&acc[0]), mean(&acc[1]));
    Line::new(
        8,
        "no-decay ablation",
        nd < full,
        format!("RepeatPrevious k=4, 5 seeds, {ABLATION_BUDGET} steps: FFM mean {full:.4} [{}], ND mean {nd:.4} [{}]", list(&acc[0]), list(&acc[1])),
    )
}

/// Budget for the informed-initialization comparison, pinned from the k=32
/// sweep in `docs/sweeps/` (the ordering is the same at 750 and 1500 steps).
const INFORMED_BUDGET: usize = 750;

fn criterion_9() -> Line {
    let task = TaskSpec::RepeatPrevious { length: 104, k: 32, vocab: 4 };
    let spec = |init| ModelSpec::Ffm { d: 4, m: 4, c: 4, variant: "FFM".into(), t_e: 1024, beta: 0.01, init };
    let informed = InitSpec::Informed { t_alpha: (32.0, 104.0), t_omega: (32.0, 104.0) };
    let mut acc = [Vec::new(), Vec::new()];
    for seed in 0..5 {
        for (i, init) in [InitSpec::Default, informed].into_iter().enumerate() {
            match final_accuracy(&train_cfg(spec(init), task, INFORMED_BUDGET, 32, seed)) {
                Ok(a) => acc[i].push(a),
                Err(e) => return errored(9, "informed initialization", e),
            }
        }
    }
    let (def, inf) = (mean(&acc[0]), mean(&acc[1]));
    let pooled = ((sample_sd(&acc[0]).powi(2) + sample_sd(&acc[1]).powi(2)) / 2.0).sqrt();
    let gap = inf - def;
    let detail = format!(
        "RepeatPrevious k=32 T=104, d=4 m=4 c=4, 5 seeds, {INFORMED_BUDGET} steps: informed mean {inf:.4} [{}], default mean {def:.4} [{}], gap {gap:+.4}, pooled sd {pooled:.4}",
        list(&acc[1]),
        list(&acc[0])
    );
    let mut line = Line::new(9, "informed initialization", gap >= 0.0, detail);
    if gap < 0.0 && -gap <= pooled {
        line.verdict = Verdict::ReportOnly;
    }
    line
}

fn criterion_10() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let (m, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let p = random_decay(&mut rng, m, c);
        let a = rng.gen_range(0.0..512.0);
        let b = rng.gen_range(0.0..512.0);
        let (ga, gb, gab) = (gamma_pow(&p, a).unwrap(), gamma_pow(&p, b).unwrap(), gamma_pow(&p, a + b).unwrap());
        for ((x, y), z) in ga.as_complex().unwrap().iter().zip(gb.as_complex().unwrap()).zip(gab.as_complex().unwrap()) {
            worst = worst.max((x * y - z).norm());
        }
    }
    Line::new(10, "gamma shift property", worst <= 1e-12, format!("1000 pairs: max |g^a g^b - g^(a+b)| {worst:.2e} (tol 1e-12)"))
}

fn main() -> ExitCode {
    let filter: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(u32, fn() -> Line); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut failed = Vec::new();
    for (id, f) in criteria {
        if filter.as_ref().is_some_and(|only| !only.contains(&id)) {
            continue;
        }
        let line = f();
        line.print();
        if line.verdict == Verdict::Fail {
            failed.push(line.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed or report-only");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
