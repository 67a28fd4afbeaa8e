//! Runs every configured method on every seed and prints per-task accuracy.
//!
//! `cargo run --release -p labelcil-core --example sequence -- [config.toml]`

use std::path::Path;
use std::time::Instant;

use labelcil::config::ExperimentConfig;
use labelcil::harness::{load_stream, run_sequence, Environment};

fn main() -> labelcil::Result<()> {
    env_logger::init();
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(Path::new(&p))?,
        None => ExperimentConfig::default(),
    };
    for &seed in &cfg.seeds {
        let (stream, corpus) = load_stream(&cfg, seed)?;
        let env = Environment::prepare(&stream, &corpus, &cfg, seed)?;
        println!("seed {seed}: {} tasks, vocab {}", stream.len(), env.vocab.len());
        for &m in &cfg.methods {
            let t = Instant::now();
            let r = run_sequence(&stream, &env, &cfg.train, m, seed)?;
            let accs: Vec<String> = r.tasks.iter().map(|t| format!("{:.2}", t.accuracy)).collect();
            println!(
                "{m:>20} acc {:.3} bias {:.3} nc {:.3} [{}] fallback hits {} ({:.0}s)",
                r.final_accuracy,
                r.last_task_bias,
                r.nc.last().copied().unwrap_or(f64::NAN),
                accs.join(" "),
                r.final_fallback_hits,
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
