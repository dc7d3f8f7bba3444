//! Rule-based constrained extraction over a synthetic corpus, the
//! hierarchical filter, and the resulting example pools.
//!
//! Usage: cargo run --release --example mining -- [noise_rate]

use protokb::extraction::{
    build_example_pools, evaluate_extraction, extract_corpus, filter_extractions, filter_extractions_with,
    ConstrainedQuery, FilterPolicy, RuleBasedExtractor,
};
use protokb::synth::{generate, SynthConfig};

fn main() -> anyhow::Result<()> {
    let noise: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.0);
    let world = generate(&SynthConfig {
        n_studies: 600,
        report_noise_rate: noise,
        ..SynthConfig::default()
    })?;
    let t = &world.template;
    let study = &world.studies[0];
    println!("report: {}\n", study.report_text);
    let q = &t.questions()[0];
    println!("{}\n", ConstrainedQuery::for_question(q, t, &study.report_text).prompt);

    let extractor = RuleBasedExtractor::new(world.lexicon.clone());
    let mined = extract_corpus(&world.studies, t, &extractor);
    let raw: Vec<_> = mined
        .results
        .iter()
        .map(|r| filter_extractions_with(r, t, FilterPolicy { hierarchical: false }))
        .collect();
    let filtered: Vec<_> = mined.results.iter().map(|r| filter_extractions(r, t)).collect();
    for (name, set) in [("without hierarchical rule", &raw), ("with hierarchical rule", &filtered)] {
        let f1 = evaluate_extraction(set, &world.gold, t)?;
        println!("{name:<26} F1 L1 {:.3}  L2 {:.3}  L3 {:.3}", f1.l1, f1.l2, f1.l3);
    }

    let pools = build_example_pools(&filtered);
    let mut sizes: Vec<(usize, &String)> = pools.iter().map(|(o, p)| (p.len(), o)).collect();
    sizes.sort();
    println!("\n{} non-empty pools of {} options", pools.non_empty(), t.answer_dim());
    println!("smallest: {:?}", &sizes[..3.min(sizes.len())]);
    println!("largest:  {:?}", &sizes[sizes.len().saturating_sub(3)..]);
    Ok(())
}
