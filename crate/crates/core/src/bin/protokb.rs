use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protokb::model::Variant;
use protokb::pipeline::{self, ExtractorBackend, RunConfig};

#[derive(Parser)]
#[command(name = "protokb", version, about = "Prototype knowledge bases for structured reporting")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// prototype-fusion | no-knowledge | randomized-prototypes | early-fusion-stub
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// rule-based | remote-llm
    #[arg(long, global = true)]
    extractor: Option<ExtractorBackend>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world (template, corpus, features, gold, splits).
    Synth,
    /// Expand option texts into a terminology lexicon.
    ExpandTerms,
    /// Extract and filter the mining corpus; write example pools.
    Mine,
    /// Pool exemplar embeddings into a prototype bank; print coverage.
    BuildBank,
    /// Train one variant.
    Train,
    /// Populate structured reports for the test split.
    Populate,
    /// Score populated reports against gold.
    Evaluate,
}

fn resolve(cli: &Cli) -> protokb::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(v) = cli.variant {
        config.variant = v;
    }
    if let Some(e) = cli.extractor {
        config.extractor = e;
    }
    if let Some(o) = &cli.out {
        config.paths.out = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> protokb::Result<()> {
    let config = resolve(cli)?;
    match cli.command {
        Command::Synth => {
            let dir = pipeline::cmd_synth(&config)?;
            println!("world written to {}", dir.display());
        }
        Command::ExpandTerms => {
            let s = pipeline::cmd_expand_terms(&config)?;
            println!(
                "{} lexicon entries, {} conflicts{} -> {}",
                s.entries,
                s.conflicts,
                if s.degraded { " (expander unavailable)" } else { "" },
                s.path.display()
            );
        }
        Command::Mine => {
            let s = pipeline::cmd_mine(&config)?;
            println!(
                "{} studies mined ({} skipped), {} assertions, {} non-empty pools",
                s.studies,
                s.skipped,
                s.assertions,
                s.pools.non_empty()
            );
        }
        Command::BuildBank => {
            let s = pipeline::cmd_build_bank(&config)?;
            println!("{} prototypes", s.prototypes);
            print!("{}", s.table);
        }
        Command::Train => {
            let s = pipeline::cmd_train(&config)?;
            println!(
                "{}: {} steps, final loss {:.4}, {} refreshes -> {}",
                config.variant,
                s.steps,
                s.final_loss,
                s.refreshes,
                s.dir.display()
            );
        }
        Command::Populate => {
            let p = pipeline::cmd_populate(&config)?;
            println!("reports written to {}", p.display());
        }
        Command::Evaluate => {
            let r = pipeline::cmd_evaluate(&config)?;
            print!("{}", r.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
