//! Generates a synthetic experiment directory.
//!
//! Usage: cargo run --example synthetic_world -- <out-dir> [synth.toml]

use std::path::PathBuf;

use protokb::synth::{generate, SynthConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic-world".into()));
    let config: SynthConfig = match args.next() {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    let world = generate(&config)?;
    world.write_dir(&out)?;
    let [l1, l2, l3] = world.template.level_counts();
    println!(
        "{} studies ({} mining / {} train / {} test), {} options (L1 {l1}, L2 {l2}, L3 {l3} questions)",
        world.studies.len(),
        world.splits.mining.len(),
        world.splits.train.len(),
        world.splits.test.len(),
        world.template.answer_dim(),
    );
    println!("first report: {}", world.studies[0].report_text);
    println!("wrote {}", out.display());
    Ok(())
}
