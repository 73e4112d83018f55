//! Supervised training on the synthetic tasks: masked cross-entropy, SGD or
//! Adam, periodic evaluation with interpretability snapshots, and run
//! records on disk.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{FfmError, Result};
use crate::model::{Model, ModelSpec, RunOptions};
use crate::numerics::{Graph, Tensor};
use crate::tasks::{TaskBatch, TaskSpec};

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerSpec {
    pub fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr } | OptimizerSpec::Adam { lr, .. } => lr,
        }
    }
}

fn default_eval_batch() -> usize {
    256
}

fn default_workers() -> usize {
    1
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub optimizer: OptimizerSpec,
    pub batch: usize,
    pub steps: usize,
    /// Evaluate every this many steps (and always at 0 and at the end).
    pub eval_every: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Chunk length for the parallel scan; defaults to the cell maximum.
    #[serde(default)]
    pub chunk: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Rescale the gradient when its global norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(FfmError::Config("batch sizes must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(FfmError::Config("eval_every must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(FfmError::Config("workers must be at least 1".into()));
        }
        let lr = self.optimizer.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(FfmError::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        if self.model.input_width() < self.task.vocab() {
            return Err(FfmError::Config(format!(
                "model input width {} is smaller than the task vocabulary {}",
                self.model.input_width(),
                self.task.vocab()
            )));
        }
        Ok(())
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions { workers: self.workers, chunk: self.chunk, recurrent: false }
    }

    /// Seed of the training batch drawn at `step`.
    pub fn batch_seed(&self, step: usize) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64 + 1)
    }

    /// Seed of the fixed held-out evaluation batch.
    pub fn eval_seed(&self) -> u64 {
        self.seed ^ 0xe7a1_5eed_0000_0000
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FfmError::Config(format!("invalid train config: {e}")))
    }
}

/// Optimizer state over a flat list of parameter tensors.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>> },
}

impl Optimizer {
    pub fn new(spec: &OptimizerSpec) -> Self {
        match *spec {
            OptimizerSpec::Sgd { lr } => Optimizer::Sgd { lr },
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                Optimizer::Adam { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
            }
        }
    }

    /// Applies one update. `grads[i]` is `None` for parameters that are not
    /// trained; they are left untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(FfmError::Dimension(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.into_iter().zip(grads) {
                    if let Some(g) = g {
                        let x = p.as_real_mut().ok_or_else(|| FfmError::Dimension("parameters are real".into()))?;
                        x.iter_mut().zip(g).for_each(|(x, g)| *x -= *lr * g);
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, m, v } => {
                if m.is_empty() {
                    *m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    *v = m.clone();
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let Some(g) = g else { continue };
                    let x = p.as_real_mut().ok_or_else(|| FfmError::Dimension("parameters are real".into()))?;
                    for j in 0..x.len() {
                        m[i][j] = *beta1 * m[i][j] + (1.0 - *beta1) * g[j];
                        v[i][j] = *beta2 * v[i][j] + (1.0 - *beta2) * g[j] * g[j];
                        let mh = m[i][j] / c1;
                        let vh = v[i][j] / c2;
                        x[j] -= *lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub scored: usize,
}

/// Interpretability snapshot of an FFM cell: durability per trace and period
/// per context (per state entry for the Hadamard form).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub beta: f64,
    pub t_alpha: Vec<f64>,
    pub t_omega: Vec<f64>,
}

impl Snapshot {
    pub fn of(model: &Model) -> Result<Option<Snapshot>> {
        let Some(cell) = model.cell() else { return Ok(None) };
        let c = cell.dims.c;
        let dur = cell.trace_durability(cell.beta)?;
        let per = cell.context_period();
        let t_omega = if cell.decay.is_per_entry() { per } else { per[..c].to_vec() };
        Ok(Some(Snapshot { beta: cell.beta, t_alpha: dur.iter().step_by(c).copied().collect(), t_omega }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub parameter_count: usize,
    pub evals: Vec<EvalRecord>,
}

impl RunRecord {
    pub fn final_eval(&self) -> &EvalRecord {
        self.evals.last().expect("a run always has an initial evaluation")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,accuracy,seconds\n");
        for e in &self.evals {
            let _ = writeln!(s, "{},{},{},{}", e.step, e.loss, e.accuracy, e.seconds);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| FfmError::Config(e.to_string()))
    }
}

/// Masked loss and accuracy of `model` on `batch`.
pub fn evaluate_batch(model: &Model, batch: &TaskBatch, opts: &RunOptions) -> Result<Metrics> {
    if batch.vocab() != model.vocab {
        return Err(FfmError::Config(format!(
            "task vocabulary {} does not match the model's {}",
            batch.vocab(),
            model.vocab
        )));
    }
    let mut g = Graph::with_workers(opts.workers);
    let leaves: Vec<_> = model.parameters().into_iter().map(|p| g.constant(p.tensor.clone())).collect();
    let x = g.constant(batch.observations_time_major(model.spec.input_width())?);
    let logits = model.logits(&mut g, &leaves, x, opts)?;
    let (targets, mask) = batch.time_major_labels();
    let loss = g.masked_cross_entropy(logits, &targets, &mask)?;
    let loss = g.value(loss).real_values()?[0];
    let accuracy = masked_accuracy(g.value(logits).real_values()?, model.vocab, &targets, &mask);
    Ok(Metrics { loss, accuracy, scored: mask.iter().filter(|&&m| m).count() })
}

/// Fraction of masked rows whose arg-max logit is the target. Ties go to the
/// lowest class index.
pub fn masked_accuracy(logits: &[f64], vocab: usize, targets: &[usize], mask: &[bool]) -> f64 {
    let mut hit = 0usize;
    let mut count = 0usize;
    for (r, row) in logits.chunks(vocab).enumerate() {
        if !mask[r] {
            continue;
        }
        count += 1;
        let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        if best == targets[r] {
            hit += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        hit as f64 / count as f64
    }
}

/// Evaluation on a freshly generated batch.
pub fn evaluate(model: &Model, task: &TaskSpec, batch: usize, seed: u64, opts: &RunOptions) -> Result<Metrics> {
    task.validate()?;
    evaluate_batch(model, &task.generate(batch, seed)?, opts)
}

/// One optimizer step on `batch`. Returns the training loss.
pub fn train_step(model: &mut Model, opt: &mut Optimizer, batch: &TaskBatch, cfg: &TrainConfig, step: usize) -> Result<f64> {
    let opts = cfg.run_options();
    let mut g = Graph::with_workers(opts.workers);
    let leaves = model.bind(&mut g);
    let x = g.constant(batch.observations_time_major(model.spec.input_width())?);
    let logits = model.logits(&mut g, &leaves, x, &opts)?;
    let (targets, mask) = batch.time_major_labels();
    let loss = g.masked_cross_entropy(logits, &targets, &mask)?;
    let loss_value = g.value(loss).real_values()?[0];
    if !loss_value.is_finite() {
        return Err(FfmError::Diverged(step));
    }
    g.backward(loss)?;
    let mut grads: Vec<Option<Vec<f64>>> = leaves
        .iter()
        .map(|&v| g.grad(v).map(|t| t.real_values().map(|s| s.to_vec())).transpose())
        .collect::<Result<_>>()?;
    if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(FfmError::Diverged(step));
    }
    if let Some(max) = cfg.clip_norm {
        let norm = grads.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            grads.iter_mut().flatten().flatten().for_each(|v| *v *= s);
        }
    }
    opt.step(model.parameters_mut(), &grads)?;
    Ok(loss_value)
}

/// Trains from scratch. Evaluates at step 0, every `eval_every` steps and
/// after the last step, always on the same held-out batch.
pub fn train(cfg: &TrainConfig) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    let mut model = Model::build(&cfg.model, cfg.task.vocab(), cfg.seed)?;
    let mut opt = Optimizer::new(&cfg.optimizer);
    let eval_batch = cfg.task.generate(cfg.eval_batch, cfg.eval_seed())?;
    let opts = cfg.run_options();
    let start = Instant::now();
    let mut evals = Vec::new();
    let record = |model: &Model, step: usize, evals: &mut Vec<EvalRecord>| -> Result<()> {
        let m = evaluate_batch(model, &eval_batch, &opts)?;
        if !m.loss.is_finite() {
            return Err(FfmError::Diverged(step));
        }
        evals.push(EvalRecord {
            step,
            loss: m.loss,
            accuracy: m.accuracy,
            seconds: start.elapsed().as_secs_f64(),
            snapshot: Snapshot::of(model)?,
        });
        Ok(())
    };
    record(&model, 0, &mut evals)?;
    for step in 1..=cfg.steps {
        let batch = cfg.task.generate(cfg.batch, cfg.batch_seed(step))?;
        train_step(&mut model, &mut opt, &batch, cfg, step)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            record(&model, step, &mut evals)?;
        }
    }
    let parameter_count = model.parameter_count();
    Ok((RunRecord { config: cfg.clone(), parameter_count, evals }, model))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| FfmError::io(path, e))
}

/// Writes `run.csv`, `run.json` and `checkpoint.json` into `dir`.
pub fn write_outputs(record: &RunRecord, model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FfmError::io(dir, e))?;
    write_text(&dir.join("run.csv"), &record.to_csv())?;
    write_text(&dir.join("run.json"), &record.to_json()?)?;
    checkpoint::save(model, &dir.join("checkpoint.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(model: ModelSpec, steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            model,
            task: TaskSpec::RepeatPrevious { length: 16, k: 2, vocab: 4 },
            optimizer: OptimizerSpec::adam(lr),
            batch: 8,
            steps,
            eval_every: 5,
            eval_batch: 64,
            seed: 3,
            chunk: None,
            workers: 1,
            clip_norm: None,
        }
    }

    #[test]
    fn adam_matches_hand_stepped_oracle() {
        // f(x) = (x - 3)^2, gradient 2 (x - 3), from x = 0.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut x = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut want = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            want.push(x);
        }
        // First Adam step moves by almost exactly lr.
        assert!((want[0] - 0.1).abs() < 1e-8);

        let mut p = Tensor::scalar(0.0);
        let mut opt = Optimizer::new(&OptimizerSpec::adam(lr));
        for w in want {
            let g = 2.0 * (p.as_real().unwrap()[0] - 3.0);
            opt.step(vec![&mut p], &[Some(vec![g])]).unwrap();
            assert_eq!(p.as_real().unwrap()[0], w);
        }
    }

    #[test]
    fn sgd_skips_untrained_parameters() {
        let mut a = Tensor::vector(&[1.0, 2.0]);
        let mut b = Tensor::vector(&[5.0]);
        let mut opt = Optimizer::new(&OptimizerSpec::Sgd { lr: 0.5 });
        opt.step(vec![&mut a, &mut b], &[Some(vec![2.0, -2.0]), None]).unwrap();
        assert_eq!(a.as_real().unwrap(), &[0.0, 3.0]);
        assert_eq!(b.as_real().unwrap(), &[5.0]);
    }

    #[test]
    fn initial_loss_is_log_vocab() {
        let (rec, _) = train(&small_config(ModelSpec::ffm(8, 4, 2), 0, 1e-3)).unwrap();
        assert_eq!(rec.evals.len(), 1);
        let l0 = rec.evals[0].loss;
        assert!((l0 - 4f64.ln()).abs() <= 0.1 * 4f64.ln(), "{l0}");
    }

    #[test]
    fn zero_learning_rate_keeps_accuracy() {
        let (rec, _) = train(&small_config(ModelSpec::ffm(8, 4, 2), 6, 0.0)).unwrap();
        let first = rec.evals.first().unwrap().accuracy;
        assert_eq!(rec.final_eval().accuracy, first);
        assert_eq!(rec.evals.iter().map(|e| e.step).collect::<Vec<_>>(), [0, 5, 6]);
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = small_config(ModelSpec::ffm(4, 3, 2), 10, 3e-3);
        let (a, ma) = train(&cfg).unwrap();
        let (b, mb) = train(&cfg).unwrap();
        assert_eq!(ma, mb);
        let losses = |r: &RunRecord| r.evals.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn checkpoint_reload_evaluates_identically() {
        let cfg = small_config(ModelSpec::Gru { d: 4, hidden: 6 }, 5, 1e-2);
        let (rec, model) = train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&rec, &model, dir.path()).unwrap();
        let loaded = checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
        let a = evaluate(&model, &cfg.task, cfg.eval_batch, cfg.eval_seed(), &cfg.run_options()).unwrap();
        let b = evaluate(&loaded, &cfg.task, cfg.eval_batch, cfg.eval_seed(), &cfg.run_options()).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.loss.to_bits(), rec.final_eval().loss.to_bits());

        let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
        assert!(csv.starts_with("step,loss,accuracy,seconds\n"));
        assert_eq!(csv.lines().count(), 1 + rec.evals.len());
        let back: RunRecord =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn untrained_accuracy_is_chance() {
        let model = Model::build(&ModelSpec::ffm(8, 4, 2), 4, 11).unwrap();
        let task = TaskSpec::RepeatPrevious { length: 32, k: 4, vocab: 4 };
        let m = evaluate(&model, &task, 256, 5, &RunOptions::default()).unwrap();
        assert!((m.accuracy - 0.25).abs() <= 0.05, "{}", m.accuracy);
    }

    #[test]
    fn snapshots_follow_the_cell() {
        let (rec, model) = train(&small_config(ModelSpec::ffm(8, 4, 2), 0, 1e-3)).unwrap();
        let snap = rec.evals[0].snapshot.as_ref().unwrap();
        assert_eq!(snap.t_alpha.len(), 4);
        assert_eq!(snap.t_omega.len(), 2);
        let cell = model.cell().unwrap();
        assert!((snap.t_alpha[3] - 1024.0).abs() < 1e-9, "{:?}", snap.t_alpha);
        assert_eq!(snap.beta, cell.beta);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(ModelSpec::ffm(8, 4, 2), 1, 1e-3);
        cfg.task = TaskSpec::RepeatPrevious { length: 8, k: 8, vocab: 4 };
        assert!(matches!(train(&cfg), Err(FfmError::Config(_))));
        assert!(TrainConfig::from_json(r#"{"model":{"kind":"mlp","d":4,"hidden":4}}"#).is_err());
        let text = serde_json::to_string(&small_config(ModelSpec::ffm(8, 4, 2), 1, 1e-3)).unwrap();
        assert!(TrainConfig::from_json(&text.replace("\"batch\"", "\"unknown\":1,\"batch\"")).is_err());
    }

    #[test]
    fn diverging_run_reports_step() {
        let mut model = Model::build(&ModelSpec::ffm(4, 2, 2), 4, 0).unwrap();
        model.head.bias = Tensor::vector(&[f64::NAN; 4]);
        let cfg = small_config(ModelSpec::ffm(4, 2, 2), 1, 1e-3);
        let batch = cfg.task.generate(2, 0).unwrap();
        let mut opt = Optimizer::new(&cfg.optimizer);
        assert!(matches!(train_step(&mut model, &mut opt, &batch, &cfg, 7), Err(FfmError::Diverged(7))));
    }
}
