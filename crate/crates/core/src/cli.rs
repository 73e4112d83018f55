//! The `ffm` command-line driver.
//!
//! Exit codes: 0 on success, 1 on invalid input (bad arguments, missing or
//! malformed files, failed validation), 2 on numeric failure (non-finite
//! values, divergence, a failing self-test).

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::selftest::{selftest_with, SelftestOptions};
use crate::bench::{bench_train_pass, BenchConfig};
use crate::checkpoint;
use crate::error::{FfmError, Result};
use crate::model::Model;
use crate::trainer::{self, write_text, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "ffm", about = "Train, evaluate, benchmark and inspect FFM memory models")]
pub struct CliConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Override the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the worker count in the configuration.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory for CSV/JSON outputs and checkpoints.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Train a model from a JSON run configuration.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the task of a run configuration.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Time training passes from a JSON benchmark configuration.
    Bench { config: PathBuf },
    /// Run the bundled oracle checks.
    Selftest,
    /// Print decay/context timescales of a checkpoint.
    Inspect { checkpoint: PathBuf },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| FfmError::io(path, e))
}

fn exit_code(e: &FfmError) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INVALID
    }
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// results to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match CliConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn train_config(cli: &CliConfig, path: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_json(&read(path)?)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| FfmError::io(Path::new("<stdout>"), e))
}

fn execute(cli: &CliConfig, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Train { config } => {
            let cfg = train_config(cli, config)?;
            let (record, model) = trainer::train(&cfg)?;
            emit(out, &record.to_csv())?;
            let last = record.final_eval();
            emit(out, &format!("final step {} loss {:.6} accuracy {:.4}\n", last.step, last.loss, last.accuracy))?;
            if let Some(dir) = &cli.out {
                trainer::write_outputs(&record, &model, dir)?;
            }
            Ok(EXIT_OK)
        }
        Command::Eval { checkpoint: ck, config } => {
            let cfg = train_config(cli, config)?;
            let model = checkpoint::load(ck)?;
            if model.spec != cfg.model {
                return Err(FfmError::Config("checkpoint model does not match the configuration's model".into()));
            }
            let m = trainer::evaluate(&model, &cfg.task, cfg.eval_batch, cfg.eval_seed(), &cfg.run_options())?;
            if !m.loss.is_finite() {
                return Err(FfmError::NonFiniteOutput(0));
            }
            let line = format!("loss {:.6} accuracy {:.4} scored {}\n", m.loss, m.accuracy, m.scored);
            emit(out, &line)?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir).map_err(|e| FfmError::io(dir, e))?;
                write_text(&dir.join("eval.csv"), &format!("loss,accuracy,scored\n{},{},{}\n", m.loss, m.accuracy, m.scored))?;
            }
            Ok(EXIT_OK)
        }
        Command::Bench { config } => {
            let mut cfg = BenchConfig::from_json(&read(config)?)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(w) = cli.workers {
                cfg.workers = vec![w];
            }
            let report = bench_train_pass(&cfg)?;
            emit(out, &report.table())?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir).map_err(|e| FfmError::io(dir, e))?;
                write_text(&dir.join("bench.csv"), &report.to_csv())?;
                write_text(&dir.join("latency.csv"), &report.latency_csv())?;
            }
            Ok(EXIT_OK)
        }
        Command::Selftest => {
            let opts = SelftestOptions { seed: cli.seed.unwrap_or(0), ..Default::default() };
            let report = selftest_with(&opts);
            emit(out, &report.to_string())?;
            Ok(if report.passed() { EXIT_OK } else { EXIT_NUMERIC })
        }
        Command::Inspect { checkpoint: ck } => {
            let model = checkpoint::load(ck)?;
            emit(out, &inspect(&model)?)?;
            Ok(EXIT_OK)
        }
    }
}

/// Timescale tables of an FFM checkpoint: decay rate and durability per
/// trace, frequency and period per context (per state entry for the
/// Hadamard form).
pub fn inspect(model: &Model) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "model {} vocab {} parameters {}", model.spec.kind(), model.vocab, model.parameter_count());
    let Some(cell) = model.cell() else {
        s.push_str("no memory cell timescales for this model\n");
        return Ok(s);
    };
    let (m, c) = (cell.dims.m, cell.dims.c);
    let decay = cell.effective_decay()?;
    let alpha = decay.alpha();
    let dur = cell.trace_durability(cell.beta)?;
    let per = cell.context_period();
    let _ = writeln!(
        s,
        "variant {} d={} m={m} c={c} t_e={} beta={} alpha_max={:.6}",
        cell.variant.short_name().unwrap_or("custom"),
        cell.dims.d,
        cell.max_len,
        cell.beta,
        decay.alpha_max
    );
    let _ = writeln!(s, "alpha endpoints: first {:.6} last {:.6}", alpha[0], alpha[m - 1]);
    let _ = writeln!(s, "trace  alpha        t_alpha");
    for j in 0..m {
        let _ = writeln!(s, "{j:>5}  {:<11.6}  {:.4}", alpha[j], dur[j * c]);
    }
    if decay.is_per_entry() {
        let _ = writeln!(s, "trace  context  omega        t_omega");
        for j in 0..m {
            for k in 0..c {
                let _ = writeln!(s, "{j:>5}  {k:>7}  {:<11.6}  {:.4}", decay.omega_at(j, k), per[j * c + k]);
            }
        }
    } else {
        let _ = writeln!(s, "context  omega        t_omega");
        for k in 0..c {
            let _ = writeln!(s, "{k:>7}  {:<11.6}  {:.4}", decay.omega_at(0, k), per[k]);
        }
    }
    Ok(s)
}
