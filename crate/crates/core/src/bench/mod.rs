//! Timing and peak-memory harness for training passes, plus the self-test
//! bundle in [`selftest`].
//!
//! All timings are CPU wall-clock. The parallel-vs-recurrent comparison is a
//! CPU proxy for accelerator speedups and makes no claim about GPU figures.

pub mod selftest;

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{RecurrentState, DEFAULT_MAX_LEN};
use crate::cell::{CellDims, CellParams};
use crate::error::{FfmError, Result};
use crate::model::{matched_hidden, Model, ModelSpec, RunOptions};
use crate::numerics::{memtrack, Graph, Tensor};

/// Accepted range for `mem(2T) / mem(T)` of the parallel FFM pass.
pub const MEMORY_RATIO_RANGE: (f64, f64) = (1.6, 2.4);
/// Accepted range for `time(2T) / time(T)` of the GRU pass.
pub const GRU_TIME_RATIO_RANGE: (f64, f64) = (1.7, 2.5);
/// Minimum parallel-over-recurrent speedup at the speedup length.
pub const MIN_SPEEDUP: f64 = 5.0;
/// Sequence length and minimum worker count of the speedup comparison.
pub const SPEEDUP_LENGTH: usize = 1024;
pub const SPEEDUP_MIN_WORKERS: usize = 8;
/// Accepted range for `latency(step at t_late) / latency(step at t_early)`.
pub const LATENCY_RATIO_RANGE: (f64, f64) = (0.5, 2.0);
/// Equivalence tolerance between the parallel and recurrent forward passes.
pub const EQUIVALENCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchModel {
    /// FFM with the parallel scan.
    Ffm,
    /// FFM with its recurrence recorded step by step.
    FfmRecurrent,
    Gru,
}

impl BenchModel {
    pub fn name(self) -> &'static str {
        match self {
            BenchModel::Ffm => "ffm",
            BenchModel::FfmRecurrent => "ffm_recurrent",
            BenchModel::Gru => "gru",
        }
    }
}

fn default_models() -> Vec<BenchModel> {
    vec![BenchModel::Ffm, BenchModel::FfmRecurrent, BenchModel::Gru]
}
fn default_lengths() -> Vec<usize> {
    vec![256, 512, 1024, 2048]
}
fn default_workers() -> Vec<usize> {
    vec![1, 8]
}
fn default_batch() -> usize {
    4
}
fn default_d() -> usize {
    8
}
fn default_m() -> usize {
    8
}
fn default_c() -> usize {
    4
}
fn default_runs() -> usize {
    5
}
fn default_warmup() -> usize {
    2
}
fn default_latency_steps() -> Vec<usize> {
    vec![10, 1000]
}
fn default_latency_reps() -> usize {
    2000
}

/// Benchmark settings as read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_models")]
    pub models: Vec<BenchModel>,
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default = "default_workers")]
    pub workers: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_c")]
    pub c: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Elapsed step counts at which single-step inference latency is timed.
    #[serde(default = "default_latency_steps")]
    pub latency_steps: Vec<usize>,
    /// Steps per latency sample.
    #[serde(default = "default_latency_reps")]
    pub latency_reps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: BenchConfig = serde_json::from_str(text).map_err(|e| FfmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs < 5 {
            return Err(FfmError::Config(format!("runs must be at least 5, got {}", self.runs)));
        }
        if self.warmup < 2 {
            return Err(FfmError::Config(format!("warmup must be at least 2, got {}", self.warmup)));
        }
        if self.lengths.is_empty() || self.lengths.iter().any(|&t| t == 0 || t > 4096) {
            return Err(FfmError::Config(format!("lengths must be in 1..=4096, got {:?}", self.lengths)));
        }
        if self.workers.is_empty() || self.workers.contains(&0) {
            return Err(FfmError::Config(format!("worker counts must be positive, got {:?}", self.workers)));
        }
        if self.batch == 0 || self.d == 0 || self.m == 0 || self.c == 0 {
            return Err(FfmError::Config("batch, d, m and c must be positive".into()));
        }
        if self.latency_reps == 0 {
            return Err(FfmError::Config("latency_reps must be positive".into()));
        }
        Ok(())
    }

    fn spec(&self, model: BenchModel) -> ModelSpec {
        match model {
            BenchModel::Ffm | BenchModel::FfmRecurrent => ModelSpec::ffm(self.d, self.m, self.c),
            BenchModel::Gru => ModelSpec::Gru { d: self.d, hidden: matched_hidden(self.m, self.c) },
        }
    }
}

/// Outcome of the parallel-vs-recurrent output comparison for a row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equivalence {
    Pass,
    Fail,
    NotApplicable,
}

impl Equivalence {
    fn label(self) -> &'static str {
        match self {
            Equivalence::Pass => "pass",
            Equivalence::Fail => "fail",
            Equivalence::NotApplicable => "n/a",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: BenchModel,
    pub length: usize,
    pub workers: usize,
    /// Median forward+backward wall-clock over `runs` timed repetitions.
    pub median_seconds: f64,
    pub runs: usize,
    /// Peak tensor bytes live during one pass.
    pub peak_bytes: usize,
    pub equivalence: Equivalence,
    pub max_abs_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub elapsed_steps: usize,
    pub median_seconds_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub available_cores: usize,
    pub rows: Vec<BenchRow>,
    pub latency: Vec<LatencyRow>,
}

/// One derived comparison with its accepted range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub name: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub passed: bool,
}

impl Finding {
    fn new(name: String, value: f64, (lower, upper): (f64, f64)) -> Self {
        let passed = value >= lower && value <= upper;
        Finding { name, value, lower, upper, passed }
    }
}

/// Median of `samples`, which must be non-empty.
pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times each task `runs` times, one sample per task per round, after `warmup`
/// untimed rounds. Each sample follows an untimed call of the same task, so
/// it never inherits allocator state left by a different size. Returns the
/// median for each task.
pub fn time_interleaved<F: FnMut() -> Result<()>>(warmup: usize, runs: usize, tasks: &mut [F]) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        for f in tasks.iter_mut() {
            f()?;
        }
    }
    let mut samples = vec![Vec::with_capacity(runs); tasks.len()];
    for _ in 0..runs {
        for (f, s) in tasks.iter_mut().zip(&mut samples) {
            f()?;
            let start = Instant::now();
            f()?;
            s.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(samples.iter().map(|s| median(s)).collect())
}

#[derive(Clone)]
struct Workload {
    x: Tensor,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

fn workload(cfg: &BenchConfig, length: usize, vocab: usize) -> Result<Workload> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ length as u64);
    let n = length * cfg.batch;
    let x = Tensor::real(&[length, cfg.batch, cfg.d], (0..n * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let targets = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
    Ok(Workload { x, targets, mask: vec![true; n] })
}

fn run_options(model: BenchModel, workers: usize) -> RunOptions {
    RunOptions { workers, chunk: None, recurrent: model == BenchModel::FfmRecurrent }
}

/// One training pass: forward, masked cross entropy, backward. Returns the
/// logits.
fn train_pass(model: &Model, work: &Workload, opts: &RunOptions) -> Result<Tensor> {
    let mut g = Graph::with_workers(opts.workers);
    let leaves = model.bind(&mut g);
    let x = g.constant(work.x.clone());
    let logits = model.logits(&mut g, &leaves, x, opts)?;
    let loss = g.masked_cross_entropy(logits, &work.targets, &work.mask)?;
    g.backward(loss)?;
    Ok(g.value(logits).clone())
}

/// Times full forward+backward passes for every `(model, length, workers)`
/// combination, records peak tensor memory, checks the parallel FFM output
/// against the recurrent one, and times single-step inference at each
/// `latency_steps` entry.
pub fn bench_train_pass(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let vocab = cfg.d.min(4);
    let mut rows = Vec::new();
    for &kind in &cfg.models {
        let model = Model::build(&cfg.spec(kind), vocab, cfg.seed)?;
        // The readout is zero at build time; give it weights so the logits
        // depend on the memory features.
        let mut model = model;
        randomize_head(&mut model, cfg.seed);
        let mut cases = Vec::new();
        for &length in &cfg.lengths {
            let work = workload(cfg, length, vocab)?;
            // Chunk at the cell bound so lengths above it stay finite.
            let chunk = Some(length.min(DEFAULT_MAX_LEN));
            let reference = if kind == BenchModel::Ffm {
                Some(train_pass(&model, &work, &RunOptions { recurrent: true, ..Default::default() })?)
            } else {
                None
            };
            for &workers in &cfg.workers {
                let opts = RunOptions { chunk, ..run_options(kind, workers) };
                let (out, peak_bytes) = memtrack::measure_peak(|| train_pass(&model, &work, &opts));
                let out = out?;
                let (equivalence, max_abs_diff) = match &reference {
                    Some(r) => {
                        let diff = out.max_abs_diff(r)?;
                        let ok = diff <= EQUIVALENCE_TOL;
                        (if ok { Equivalence::Pass } else { Equivalence::Fail }, Some(diff))
                    }
                    None => (Equivalence::NotApplicable, None),
                };
                let row = BenchRow {
                    model: kind,
                    length,
                    workers,
                    median_seconds: f64::NAN,
                    runs: cfg.runs,
                    peak_bytes,
                    equivalence,
                    max_abs_diff,
                };
                cases.push((row, work.clone(), opts));
            }
        }
        // Round-robin over the cases so slow drift in machine load hits
        // every length alike.
        let model = &model;
        let mut tasks: Vec<_> = cases.iter().map(|(_, work, opts)| move || train_pass(model, work, opts).map(drop)).collect();
        let medians = time_interleaved(cfg.warmup, cfg.runs, &mut tasks)?;
        for ((mut row, _, _), t) in cases.into_iter().zip(medians) {
            row.median_seconds = t;
            rows.push(row);
        }
    }
    let cell = CellParams::init(CellDims::new(cfg.d, cfg.m, cfg.c), DEFAULT_MAX_LEN, 0.01, cfg.seed)?;
    let per_step = step_latency(&cell, &cfg.latency_steps, cfg.latency_reps, cfg.warmup, cfg.runs, cfg.seed)?;
    let latency = cfg
        .latency_steps
        .iter()
        .zip(per_step)
        .map(|(&elapsed_steps, median_seconds_per_step)| LatencyRow { elapsed_steps, median_seconds_per_step })
        .collect();
    let available_cores = std::thread::available_parallelism().map(usize::from).unwrap_or(1);
    Ok(BenchReport { config: cfg.clone(), available_cores, rows, latency })
}

fn randomize_head(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
    let (fan_in, fan_out) = (model.head.fan_in(), model.head.fan_out());
    model.head = crate::cell::Linear::uniform(fan_in, fan_out, &mut rng);
}

/// Median seconds per [`CellParams::step`] call for states that have
/// already absorbed each of `elapsed` steps, timed interleaved.
pub fn step_latency(
    cell: &CellParams,
    elapsed: &[usize],
    reps: usize,
    warmup: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = cell.dims.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = (0..reps.max(1)).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut states = Vec::with_capacity(elapsed.len());
    for &n in elapsed {
        let mut state = RecurrentState::zeros(cell.dims.m, cell.dims.c);
        for t in 0..n {
            state = cell.step(&inputs[t % inputs.len()], &state)?.1;
        }
        states.push(state);
    }
    let inputs = &inputs;
    let mut tasks: Vec<_> = states
        .iter()
        .map(|state| {
            move || {
                let mut s = state.clone();
                for x in inputs {
                    s = cell.step(x, &s)?.1;
                }
                std::hint::black_box(&s);
                Ok(())
            }
        })
        .collect();
    let per_sample = time_interleaved(warmup, runs, &mut tasks)?;
    Ok(per_sample.into_iter().map(|t| t / inputs.len() as f64).collect())
}

impl BenchReport {
    fn row(&self, model: BenchModel, length: usize, workers: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model && r.length == length && r.workers == workers)
    }

    /// Length-doubling ratios for `model` at the smallest worker count, as
    /// `(T, value(2T) / value(T))`.
    fn doubling_ratios(&self, model: BenchModel, metric: impl Fn(&BenchRow) -> f64) -> Vec<(usize, f64)> {
        let Some(&w) = self.config.workers.iter().min() else { return Vec::new() };
        let mut out = Vec::new();
        for &t in &self.config.lengths {
            if let (Some(a), Some(b)) = (self.row(model, t, w), self.row(model, 2 * t, w)) {
                out.push((t, metric(b) / metric(a)));
            }
        }
        out
    }

    /// Derived comparisons: memory doubling of the parallel FFM pass, GRU
    /// time doubling, parallel-over-recurrent speedup, step latency ratio
    /// and output equivalence.
    pub fn findings(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        for (t, r) in self.doubling_ratios(BenchModel::Ffm, |r| r.peak_bytes as f64) {
            out.push(Finding::new(format!("ffm mem({})/mem({t})", 2 * t), r, MEMORY_RATIO_RANGE));
        }
        for (t, r) in self.doubling_ratios(BenchModel::Gru, |r| r.median_seconds) {
            out.push(Finding::new(format!("gru time({})/time({t})", 2 * t), r, GRU_TIME_RATIO_RANGE));
        }
        let parallel = self
            .rows
            .iter()
            .filter(|r| r.model == BenchModel::Ffm && r.length == SPEEDUP_LENGTH && r.workers >= SPEEDUP_MIN_WORKERS)
            .min_by(|a, b| a.median_seconds.total_cmp(&b.median_seconds));
        let recurrent = self
            .rows
            .iter()
            .filter(|r| r.model == BenchModel::FfmRecurrent && r.length == SPEEDUP_LENGTH)
            .min_by(|a, b| a.median_seconds.total_cmp(&b.median_seconds));
        if let (Some(p), Some(r)) = (parallel, recurrent) {
            out.push(Finding::new(
                format!("ffm parallel speedup at T={SPEEDUP_LENGTH}, {} workers", p.workers),
                r.median_seconds / p.median_seconds,
                (MIN_SPEEDUP, f64::INFINITY),
            ));
        }
        if let (Some(first), Some(last)) = (self.latency.first(), self.latency.last()) {
            if self.latency.len() > 1 {
                out.push(Finding::new(
                    format!("step latency t={} / t={}", last.elapsed_steps, first.elapsed_steps),
                    last.median_seconds_per_step / first.median_seconds_per_step,
                    LATENCY_RATIO_RANGE,
                ));
            }
        }
        for r in self.rows.iter().filter(|r| r.equivalence != Equivalence::NotApplicable) {
            out.push(Finding::new(
                format!("ffm parallel == recurrent at T={}, {} workers", r.length, r.workers),
                r.max_abs_diff.unwrap_or(f64::INFINITY),
                (0.0, EQUIVALENCE_TOL),
            ));
        }
        out
    }

    fn header(&self) -> String {
        format!(
            "# CPU proxy benchmark: parallel scan vs recurrent loop on {} available core(s); \
             accelerator speedups are not measured\n# medians of {} runs after {} warmups, batch {}, d={} m={} c={}\n",
            self.available_cores,
            self.config.runs,
            self.config.warmup,
            self.config.batch,
            self.config.d,
            self.config.m,
            self.config.c
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push_str("model,length,workers,median_seconds,runs,peak_bytes,equivalence,max_abs_diff\n");
        for r in &self.rows {
            let diff = r.max_abs_diff.map(|d| format!("{d:e}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{:.6e},{},{},{},{}",
                r.model.name(),
                r.length,
                r.workers,
                r.median_seconds,
                r.runs,
                r.peak_bytes,
                r.equivalence.label(),
                diff
            );
        }
        s
    }

    pub fn latency_csv(&self) -> String {
        let mut s = String::from("elapsed_steps,median_seconds_per_step\n");
        for r in &self.latency {
            let _ = writeln!(s, "{},{:.6e}", r.elapsed_steps, r.median_seconds_per_step);
        }
        s
    }

    /// Human-readable table of rows and findings.
    pub fn table(&self) -> String {
        let mut s = self.header();
        let _ = writeln!(s, "{:<14} {:>6} {:>7} {:>12} {:>12} {:>6}", "model", "T", "workers", "median_s", "peak_bytes", "equiv");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>7} {:>12.4e} {:>12} {:>6}",
                r.model.name(),
                r.length,
                r.workers,
                r.median_seconds,
                r.peak_bytes,
                r.equivalence.label()
            );
        }
        for r in &self.latency {
            let _ = writeln!(s, "step latency after {} steps: {:.3e} s", r.elapsed_steps, r.median_seconds_per_step);
        }
        for f in self.findings() {
            let _ = writeln!(
                s,
                "{} {}: {:.4} (accepted [{}, {}])",
                if f.passed { "PASS" } else { "FAIL" },
                f.name,
                f.value,
                f.lower,
                f.upper
            );
        }
        s
    }
}
