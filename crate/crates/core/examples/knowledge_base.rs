//! Builds a prototype bank from mined pools, prints per-level coverage, and
//! refreshes it with a drifted encoder.
//!
//! Usage: cargo run --release --example knowledge_base

use protokb::backbone::FeatureEmbedder;
use protokb::experiment::mine_world;
use protokb::knowledge_base::{build_bank, coverage_table, ema_update, kb_coverage, refresh_bank, EmaEncoderState, PrototypeBank};
use protokb::model::{Model, ModelConfig, Variant};
use protokb::nn::Parameters;
use protokb::synth::{generate, SynthConfig};

fn main() -> anyhow::Result<()> {
    let world = generate(&SynthConfig {
        n_studies: 800,
        child_prevalence: 0.15,
        ..SynthConfig::default()
    })?;
    let t = &world.template;
    let (_, pools) = mine_world(&world);
    let model = Model::new(Variant::PrototypeFusion, &ModelConfig::default(), t.answer_dim(), 0)?;
    let embed = |enc| FeatureEmbedder {
        encoder: enc,
        features: &world.image_features,
    };

    let bank = build_bank(&pools, t, &embed(&model.backbone.image), 5, 0)?;
    print!("{}", coverage_table(&kb_coverage(&bank, t)));
    let p = &bank.prototypes()[0];
    println!("\n{}: support {} of pool {}, sampled {:?}", p.option_id, p.support_count, pools.get(&p.option_id).len(), p.sampled);

    let text = bank.to_jsonl();
    assert_eq!(PrototypeBank::from_jsonl(&text, t)?, bank);
    println!("bank file: {} lines, header {}", text.lines().count(), text.lines().next().unwrap_or(""));

    // Drift the live encoder, follow it with an EMA copy, re-embed.
    let mut live = model.backbone.image.clone();
    let mut ema = EmaEncoderState::new(&live, 0.9)?;
    for step in 0..20 {
        let theta: Vec<f64> = live.flat().iter().map(|x| x + 0.01 * ((step % 3) as f64 - 1.0)).collect();
        live.set_flat(&theta)?;
        ema = ema_update(&live.flat(), &ema)?;
    }
    let mut ema_encoder = live.clone();
    ema_encoder.set_flat(&ema.parameters)?;
    let refreshed = refresh_bank(&bank, &pools, &embed(&ema_encoder), 20)?;
    let shift: f64 = refreshed
        .prototypes()
        .iter()
        .zip(bank.prototypes())
        .map(|(a, b)| a.embedding.iter().zip(&b.embedding).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    println!("refresh at step {}: {} prototypes, max coordinate shift {shift:.4}", refreshed.built_at_step, refreshed.len());
    Ok(())
}
