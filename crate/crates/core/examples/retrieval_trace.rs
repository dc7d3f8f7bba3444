//! Traces one question turn through the knowledge branch: masked cosines,
//! retrieval weights, evidence summary, support bias and fused logits.
//!
//! Usage: cargo run --release --example retrieval_trace

use protokb::backbone::{FeatureEmbedder, QuestionContext};
use protokb::experiment::mine_world;
use protokb::knowledge_base::build_bank;
use protokb::model::{Model, ModelConfig, Variant};
use protokb::synth::{generate, SynthConfig};
use protokb::template::traversal_order;

fn main() -> anyhow::Result<()> {
    let world = generate(&SynthConfig {
        n_studies: 600,
        label_signal_strength: 4.0,
        ..SynthConfig::default()
    })?;
    let t = &world.template;
    let (_, pools) = mine_world(&world);
    let mut model = Model::new(Variant::PrototypeFusion, &ModelConfig::default(), t.answer_dim(), 1)?;
    // A trained model learns s; give it a visible value here.
    model.head.scale = vec![0.5; t.answer_dim()];
    let bank = build_bank(
        &pools,
        t,
        &FeatureEmbedder {
            encoder: &model.backbone.image,
            features: &world.image_features,
        },
        5,
        1,
    )?;

    let id = &world.splits.test[0];
    let image = world.image_features.input(id)?;
    let q = traversal_order(t)[0];
    let ctx = QuestionContext::new(t, q, Vec::new());
    let trace = model.forward_turn(&image, &ctx, q, &bank)?;
    println!("study {id}, question {} ({})", q.id, q.text);
    println!("gold: {:?}", world.gold_by_id()[id.as_str()].selected(&q.id));
    let Some(h) = &trace.head else {
        println!("no prototypes for this question; z_final = z_base");
        return Ok(());
    };
    println!("\n{:<40} {:>8} {:>8}", "prototype", "cosine", "alpha");
    for ((&i, c), a) in h.weights.indices.iter().zip(&h.cosines).zip(&h.weights.weights) {
        println!("{:<40} {c:>8.4} {a:>8.4}", bank.prototypes()[i].option_id);
    }
    println!("\n{:<40} {:>8} {:>8} {:>8} {:>8}", "option", "u", "b_sup", "z_base", "z_final");
    for o in &q.option_ids {
        let k = t.option_position(o).unwrap();
        println!(
            "{o:<40} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            h.summary.u[k],
            trace.b_sup[k],
            trace.z_base()[k],
            trace.z_final[k]
        );
    }
    Ok(())
}
