//! Populates structured reports for a test split with a trained model and
//! scores them, including a per-option confusion dump.
//!
//! Usage: cargo run --release --example populate_evaluate

use protokb::eval::{confusion_table, evaluate, populate_report};
use protokb::experiment::{mine_world, run_variant, ExperimentConfig};
use protokb::model::Variant;
use protokb::template::check_consistency;

fn main() -> anyhow::Result<()> {
    let mut config: ExperimentConfig = toml::from_str(include_str!("configs/ablation.toml"))?;
    config.synth.n_studies = 1200;
    config.train.max_steps = Some(1500);
    let world = protokb::synth::generate(&config.synth)?;
    let (_, pools) = mine_world(&world);
    let out = run_variant(&world, &pools, &config, Variant::PrototypeFusion, 0)?;
    let model = out.checkpoint.to_model()?;
    let t = &world.template;

    let id = &world.splits.test[0];
    let report = populate_report(&world.image_features.input(id)?, t, &model, &out.bank)?;
    println!("study {id}");
    for (q, answers) in &report.answers {
        println!("  {q:<10} {}", answers.iter().cloned().collect::<Vec<_>>().join(", "));
    }
    println!("violations: {}", check_consistency(&report, t)?.len());

    let gold = world.gold_in(&world.splits.test);
    let m = evaluate(&out.predictions, &gold, t)?;
    println!(
        "\n{} test studies: overall F1 {:.3}, L1 {:.3}, L2 {:.3}, L3 {:.3}, accuracy {:.3}",
        gold.len(),
        m.overall_f1,
        m.l1_f1,
        m.l2_f1,
        m.l3_f1,
        m.report_accuracy
    );
    println!("\n{:<40} {:>5} {:>4} {:>4} {:>4} {:>6}", "option", "level", "tp", "fp", "fn", "F1");
    for row in confusion_table(&out.predictions, &gold, t)?.iter().filter(|r| r.level == 3).take(12) {
        let f1 = row.f1().map(|f| format!("{f:.3}")).unwrap_or_else(|| "n/a".into());
        println!("{:<40} {:>5} {:>4} {:>4} {:>4} {f1:>6}", row.option_id, row.level, row.tp, row.fp, row.fn_);
    }
    Ok(())
}
