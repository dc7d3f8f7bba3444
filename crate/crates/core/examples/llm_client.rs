//! Shows the chat requests sent to a remote model for constrained extraction
//! and phrase expansion. With `--send`, the requests go to the configured
//! endpoint; the key comes from PROTOKB_API_KEY.
//!
//! Usage: cargo run --example llm_client -- [--send] [endpoint]

use protokb::extraction::{parse_reply, AnswerProvider, ConstrainedQuery};
use protokb::remote::{HttpTransport, LlmConfig, LlmExpander, LlmExtractor, API_KEY_ENV};
use protokb::synth::{generate, SynthConfig};
use protokb::terminology::PhraseExpander;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let send = args.iter().any(|a| a == "--send");
    let mut config = LlmConfig::default();
    if let Some(e) = args.iter().find(|a| !a.starts_with("--")) {
        config.endpoint = e.clone();
    }
    let world = generate(&SynthConfig {
        n_l1: 1,
        n_studies: 5,
        ..SynthConfig::default()
    })?;
    let t = &world.template;
    let q = &t.questions()[0];
    let study = &world.studies[0];
    let query = ConstrainedQuery::for_question(q, t, &study.report_text);

    let extractor = LlmExtractor::new(HttpTransport::from_config(&config), &config);
    let expander = LlmExpander::new(HttpTransport::from_config(&config), &config);
    let option = t.option(&q.option_ids[0]).unwrap();
    println!("{}", serde_json::to_string_pretty(&extractor.request(&query))?);
    println!("{}", serde_json::to_string_pretty(&expander.request(option, q))?);

    if !send {
        println!("\n(dry run; pass --send to call {}, key from {API_KEY_ENV})", config.endpoint);
        return Ok(());
    }
    match extractor.answer(&query) {
        Ok(reply) => println!("extraction reply: {reply:?} -> {:?}", parse_reply(&query, &reply)),
        Err(e) => println!("extractor: {e}"),
    }
    match expander.propose(option, q) {
        Ok(phrases) => println!("phrases for `{}`: {phrases:?}", option.canonical_text),
        Err(e) => println!("expander: {e}"),
    }
    Ok(())
}
