//! Runs every pipeline command in order on files, the same way the
//! `protokb` binary does, and prints the metrics report.
//!
//! Usage: cargo run --release --example pipeline -- [run.toml] [out-dir]

use protokb::pipeline::{run_all, RunConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let mut config = match args.next() {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::from_toml(include_str!("configs/run.toml"))?,
    };
    if let Some(out) = args.next() {
        config.paths.out = out.into();
    }
    let report = run_all(&config)?;
    print!("{}", report.to_json());
    println!("artifacts under {}", config.paths.out.display());
    Ok(())
}
