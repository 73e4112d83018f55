//! Learning-curve sweep used to pin the step budgets of the acceptance
//! suite. Prints one CSV row per evaluation.
//!
//! ```text
//! cargo run --release --example sweep -- <model> <k> <length> <steps> <lr> <seeds> [variant|init] [d m c] [batch]
//! ```
//! `model` is `ffm`, `gru` or `mlp`. For `ffm` the seventh argument is a
//! variant name (`FFM`, `ND`, ...) or `informed`, which spreads durabilities
//! and periods over `[k, length]`.

use ffm::model::{InitSpec, ModelSpec};
use ffm::tasks::TaskSpec;
use ffm::trainer::{train, OptimizerSpec, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let get = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let kind = get(0, "ffm");
    let k: usize = get(1, "4").parse().unwrap();
    let length: usize = get(2, "32").parse().unwrap();
    let steps: usize = get(3, "2000").parse().unwrap();
    let lr: f64 = get(4, "3e-3").parse().unwrap();
    let seeds: u64 = get(5, "1").parse().unwrap();
    let extra = get(6, "FFM");
    let d: usize = get(7, "8").parse().unwrap();
    let m: usize = get(8, "8").parse().unwrap();
    let c: usize = get(9, "4").parse().unwrap();
    let batch: usize = get(10, "64").parse().unwrap();
    let horizon = (k as f64, length as f64);
    println!("model,extra,seed,step,loss,accuracy,seconds");
    for seed in 0..seeds {
        let model = match kind.as_str() {
            "ffm" if extra == "informed" => ModelSpec::Ffm {
                d,
                m,
                c,
                variant: "FFM".into(),
                t_e: 1024,
                beta: 0.01,
                init: InitSpec::Informed { t_alpha: horizon, t_omega: horizon },
            },
            "ffm" => ModelSpec::Ffm { d, m, c, variant: extra.clone(), t_e: 1024, beta: 0.01, init: InitSpec::Default },
            "gru" => ModelSpec::Gru { d, hidden: 2 * m * c },
            _ => ModelSpec::Mlp { d, hidden: 2 * m * c },
        };
        let cfg = TrainConfig {
            model,
            task: TaskSpec::RepeatPrevious { length, k, vocab: 4 },
            optimizer: OptimizerSpec::adam(lr),
            batch,
            steps,
            eval_every: (steps / 20).max(1),
            eval_batch: 256,
            seed,
            chunk: None,
            workers: 1,
            clip_norm: None,
        };
        let (rec, _) = train(&cfg).expect("training failed");
        for e in &rec.evals {
            println!("{kind},{extra},{seed},{},{:.5},{:.4},{:.2}", e.step, e.loss, e.accuracy, e.seconds);
        }
    }
}
