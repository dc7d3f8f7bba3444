//! Walks a generated three-level template in traversal order and shows
//! which questions a gold report opens.
//!
//! Usage: cargo run --example template_traversal -- [template.json]

use protokb::synth::{generate, SynthConfig};
use protokb::template::{check_consistency, load_template, traversal_order, serialize_template};

fn main() -> anyhow::Result<()> {
    let world = generate(&SynthConfig {
        n_l1: 2,
        n_l2_per_l1: 2,
        n_studies: 40,
        ..SynthConfig::default()
    })?;
    let template = match std::env::args().nth(1) {
        Some(p) => load_template(&std::fs::read_to_string(p)?)?,
        None => load_template(&serialize_template(&world.template))?,
    };
    let [l1, l2, l3] = template.level_counts();
    println!("{} questions (L1 {l1}, L2 {l2}, L3 {l3}), {} options", template.questions().len(), template.answer_dim());

    for q in traversal_order(&template) {
        let gate = q
            .trigger
            .as_ref()
            .map(|t| format!("  [if {}]", t.parent_option))
            .unwrap_or_default();
        println!("{}{} {}{gate}", "  ".repeat(usize::from(q.level) - 1), q.id, q.text);
    }

    // A gold report opens only the children of options it selects.
    let gold = world.gold.iter().find(|g| g.selected_options().count() > 2).unwrap_or(&world.gold[0]);
    if std::env::args().nth(1).is_none() {
        println!("\nstudy {}:", gold.study_id);
        for q in traversal_order(&template) {
            let open = template.is_open(q, &gold.answers);
            let answer: Vec<&str> = gold.selected(&q.id).map(|s| s.iter().map(String::as_str).collect()).unwrap_or_default();
            println!("  {:<10} {:<6} {}", q.id, if open { "open" } else { "closed" }, answer.join(", "));
        }
        println!("violations: {}", check_consistency(gold, &template)?.len());
    }
    Ok(())
}
