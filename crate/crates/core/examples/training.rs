//! Trains one variant on a synthetic world and prints the loss curve with
//! the steps at which the bank was refreshed.
//!
//! Usage: cargo run --release --example training -- [variant] [steps]

use protokb::experiment::{mine_world, run_variant, ExperimentConfig};
use protokb::model::Variant;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().map(|s| s.parse()).transpose()?.unwrap_or_default();
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let mut config: ExperimentConfig = toml::from_str(include_str!("configs/ablation.toml"))?;
    config.train.max_steps = Some(steps);
    config.train.refresh_every = (steps / 4).max(1);

    let world = protokb::synth::generate(&config.synth)?;
    let (_, pools) = mine_world(&world);
    let out = run_variant(&world, &pools, &config, variant, 0)?;
    let window = (out.log.len() / 10).max(1);
    for chunk in out.log.chunks(window) {
        let mean = chunk.iter().map(|s| s.loss).sum::<f64>() / chunk.len() as f64;
        let refreshed: Vec<u64> = chunk.iter().filter(|s| s.refreshed).map(|s| s.step).collect();
        println!(
            "steps {:>5}-{:<5} loss {mean:.4}{}",
            chunk[0].step,
            chunk[chunk.len() - 1].step,
            if refreshed.is_empty() { String::new() } else { format!("  refreshed at {refreshed:?}") }
        );
    }
    let m = out.metrics;
    println!(
        "{variant}: overall F1 {:.3}, L1 {:.3}, L2 {:.3}, L3 {:.3}, report accuracy {:.3}",
        m.overall_f1, m.l1_f1, m.l2_f1, m.l3_f1, m.report_accuracy
    );
    Ok(())
}
