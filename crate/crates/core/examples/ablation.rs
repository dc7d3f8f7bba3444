//! Trains the knowledge, randomized-prototype and no-knowledge variants on
//! a synthetic world over several seeds and prints L3 macro-F1.
//!
//! Usage: cargo run --release --example ablation -- [config.toml] [seeds]
//! Without a config the bundled `examples/configs/ablation.toml` is used.

use protokb::experiment::{mean_l3_f1, run_ablation, ExperimentConfig};
use protokb::model::Variant;

const BUNDLED: &str = include_str!("configs/ablation.toml");

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let config: ExperimentConfig = match args.next() {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => toml::from_str(BUNDLED)?,
    };
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let variants = [Variant::PrototypeFusion, Variant::RandomizedPrototypes, Variant::NoKnowledge];

    let start = std::time::Instant::now();
    let runs = run_ablation(&config, &variants, seeds)?;
    for r in &runs {
        let m = &r.metrics;
        println!(
            "{:<22} seed {}: overall {:.2}  L1 {:.2}  L2 {:.2}  L3 {:.2}  acc {:.2}",
            r.variant.as_str(),
            r.seed,
            100.0 * m.overall_f1,
            100.0 * m.l1_f1,
            100.0 * m.l2_f1,
            100.0 * m.l3_f1,
            100.0 * m.report_accuracy
        );
    }
    for v in variants {
        if let Some(mean) = mean_l3_f1(&runs, v) {
            println!("{:<22} mean L3-F1 {:.2}", v.as_str(), 100.0 * mean);
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
