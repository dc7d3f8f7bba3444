//! Expands option texts into a lexicon from a synonym seed list and shows
//! rejected phrases and normalized lookups.
//!
//! Usage: cargo run --example terminology

use std::collections::HashMap;

use protokb::synth::{generate, SynthConfig};
use protokb::terminology::{expand_terminology, NullExpander, SeedListExpander};

fn main() -> anyhow::Result<()> {
    let world = generate(&SynthConfig {
        n_l1: 2,
        synonym_count: 2,
        n_studies: 10,
        ..SynthConfig::default()
    })?;
    let t = &world.template;

    let bare = expand_terminology(t, &NullExpander);
    let full = expand_terminology(t, &world.synonyms);
    println!("canonical only: {} phrases; with seed list: {}", bare.lexicon.len(), full.lexicon.len());

    // Reuse one phrase for two options to trigger a conflict.
    let opts = t.options();
    let mut seeds: HashMap<String, Vec<String>> = HashMap::new();
    seeds.insert(opts[0].canonical_text.clone(), vec!["shared phrase".into()]);
    seeds.insert(opts[2].canonical_text.clone(), vec!["shared phrase".into(), "only mine".into()]);
    let clash = expand_terminology(t, &SeedListExpander::new(seeds));
    for c in &clash.conflicts {
        println!("rejected `{}` for {} (also proposed for {})", c.phrase, c.proposed_for, c.conflicts_with);
    }
    println!("`only mine` -> {:?}", clash.lexicon.lookup("Only   MINE."));

    let o = &opts[0];
    println!("\nphrasings of {}:", o.id);
    for p in full.lexicon.variants_of(&o.id) {
        let e = full.lexicon.entry(p).unwrap();
        println!("  {p:<32} {:?}", e.provenance);
    }
    print!("\n{}", full.lexicon.to_tsv().lines().take(6).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
