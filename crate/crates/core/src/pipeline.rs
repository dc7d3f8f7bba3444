//! File-based pipeline commands behind the `protokb` binary.
//!
//! Every command reads a [`RunConfig`], checks that its inputs exist before
//! doing any work, writes its outputs under `paths.out` and drops the
//! resolved configuration next to them as `<command>.config.toml`.
//!
//! Default layout, relative to the working directory:
//!
//! ```text
//! <out>/world/            template.json corpus.jsonl lexicon.tsv synonyms.tsv
//!                         features.tsv gold.jsonl splits.json synth.toml
//! <out>/lexicon.tsv       expand-terms
//! <out>/extractions.jsonl mine (filtered), plus pools.json and pool_stats.tsv
//! <out>/encoder.json      build-bank, plus bank.jsonl and coverage.tsv
//! <out>/<variant>/        train: checkpoint.json bank.jsonl train_log.jsonl
//!                         populate: predictions.jsonl
//!                         evaluate: metrics.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderCheckpoint, FeatureEmbedder, FeatureStore, ImageEncoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::experiment::{populate_all, training_samples_from};
use crate::extraction::{
    build_example_pools, extract_corpus, filter_extractions, read_corpus, write_extractions, AnswerProvider,
    ExamplePools, RuleBasedExtractor,
};
use crate::knowledge_base::{build_bank, coverage_table, kb_coverage, LevelCoverage, PrototypeBank, DEFAULT_K};
use crate::model::{Model, ModelConfig, Variant};
use crate::remote::{HttpTransport, LlmConfig, LlmExpander, LlmExtractor};
use crate::synth::{self, SynthConfig, Splits};
use crate::template::{load_template, read_reports, write_reports, StructuredReport, Template};
use crate::terminology::{expand_terminology, NullExpander, PhraseExpander, SeedListExpander, TerminologyLexicon};
use crate::train::{Checkpoint, RefreshSource, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorBackend {
    #[default]
    RuleBased,
    RemoteLlm,
}

impl std::str::FromStr for ExtractorBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rule-based" => Ok(ExtractorBackend::RuleBased),
            "remote-llm" => Ok(ExtractorBackend::RemoteLlm),
            other => Err(Error::Config(format!("unknown extractor `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpanderBackend {
    /// Canonical texts only.
    None,
    /// `canonical<TAB>variant...` lines from `paths.synonyms`.
    #[default]
    SeedList,
    RemoteLlm,
}

/// Input and output locations. Unset inputs fall back to the layout in the
/// module docs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    pub world: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub pools: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    /// Directory holding per-variant checkpoints, banks and logs.
    pub checkpoints: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    /// Exemplars pooled per prototype.
    pub k: usize,
    pub extractor: ExtractorBackend,
    pub expander: ExpanderBackend,
    pub paths: Paths,
    pub llm: LlmConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::default(),
            k: DEFAULT_K,
            extractor: ExtractorBackend::default(),
            expander: ExpanderBackend::default(),
            paths: Paths {
                out: PathBuf::from("run"),
                ..Paths::default()
            },
            llm: LlmConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(source: &str) -> Result<Self> {
        toml::from_str(source).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.synth.validate()?;
        self.train.validate()?;
        if !(self.model.temperature > 0.0 && self.model.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} is not positive", self.model.temperature)));
        }
        Ok(())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.paths.out.join(name)
    }

    pub fn world_dir(&self) -> PathBuf {
        self.paths.world.clone().unwrap_or_else(|| self.out("world"))
    }

    fn in_world(&self, set: &Option<PathBuf>, name: &str) -> PathBuf {
        set.clone().unwrap_or_else(|| self.world_dir().join(name))
    }

    pub fn template_path(&self) -> PathBuf {
        self.in_world(&self.paths.template, synth::TEMPLATE_FILE)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.in_world(&self.paths.corpus, synth::CORPUS_FILE)
    }

    /// Prefers `<out>/lexicon.tsv` when expand-terms has run.
    pub fn lexicon_path(&self) -> PathBuf {
        if let Some(p) = &self.paths.lexicon {
            return p.clone();
        }
        let expanded = self.out(LEXICON_FILE);
        if expanded.exists() {
            expanded
        } else {
            self.world_dir().join(synth::LEXICON_FILE)
        }
    }

    pub fn synonyms_path(&self) -> PathBuf {
        self.in_world(&self.paths.synonyms, synth::SYNONYM_FILE)
    }

    pub fn features_path(&self) -> PathBuf {
        self.in_world(&self.paths.features, synth::FEATURE_FILE)
    }

    pub fn gold_path(&self) -> PathBuf {
        self.in_world(&self.paths.gold, synth::GOLD_FILE)
    }

    pub fn splits_path(&self) -> PathBuf {
        self.in_world(&self.paths.splits, synth::SPLITS_FILE)
    }

    pub fn pools_path(&self) -> PathBuf {
        self.paths.pools.clone().unwrap_or_else(|| self.out(POOLS_FILE))
    }

    pub fn bank_path(&self) -> PathBuf {
        self.paths.bank.clone().unwrap_or_else(|| self.out(BANK_FILE))
    }

    /// Per-variant directory for checkpoint, trained bank and logs.
    pub fn variant_dir(&self) -> PathBuf {
        self.paths
            .checkpoints
            .clone()
            .unwrap_or_else(|| self.paths.out.clone())
            .join(self.variant.as_str())
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.paths
            .predictions
            .clone()
            .unwrap_or_else(|| self.variant_dir().join(PREDICTIONS_FILE))
    }
}

pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const EXTRACTIONS_FILE: &str = "extractions.jsonl";
pub const POOLS_FILE: &str = "pools.json";
pub const POOL_STATS_FILE: &str = "pool_stats.tsv";
pub const ENCODER_FILE: &str = "encoder.json";
pub const BANK_FILE: &str = "bank.jsonl";
pub const COVERAGE_FILE: &str = "coverage.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Fails with a path error for the first missing input.
fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::io(*p, std::io::Error::new(std::io::ErrorKind::NotFound, "input not found")));
        }
    }
    Ok(())
}

fn write_resolved(config: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    write(&dir.join(format!("{command}.config.toml")), &config.to_toml())
}

fn load_splits(path: &Path) -> Result<Option<Splits>> {
    if path.exists() {
        Ok(Some(serde_json::from_str(&read(path)?)?))
    } else {
        Ok(None)
    }
}

pub fn cmd_synth(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let world = synth::generate(&SynthConfig {
        seed: config.seed,
        ..config.synth.clone()
    })?;
    let dir = config.world_dir();
    world.write_dir(&dir)?;
    write_resolved(config, &dir, "synth")?;
    info!("wrote synthetic world with {} studies to {}", world.studies.len(), dir.display());
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpandSummary {
    pub entries: usize,
    pub conflicts: usize,
    pub degraded: bool,
    pub path: PathBuf,
}

pub fn cmd_expand_terms(config: &RunConfig) -> Result<ExpandSummary> {
    config.validate()?;
    let template_path = config.template_path();
    require(&[&template_path])?;
    if config.expander == ExpanderBackend::SeedList {
        require(&[&config.synonyms_path()])?;
    }
    let template = load_template(&read(&template_path)?)?;
    let expander: Box<dyn PhraseExpander> = match config.expander {
        ExpanderBackend::None => Box::new(NullExpander),
        ExpanderBackend::SeedList => Box::new(SeedListExpander::parse(&read(&config.synonyms_path())?)?),
        ExpanderBackend::RemoteLlm => Box::new(LlmExpander::new(HttpTransport::from_config(&config.llm), &config.llm)),
    };
    let expansion = expand_terminology(&template, expander.as_ref());
    for c in &expansion.conflicts {
        warn!("rejected phrase {c:?}");
    }
    if expansion.degraded {
        warn!("expander unavailable; lexicon holds canonical texts only");
    }
    let path = config.out(LEXICON_FILE);
    write(&path, &expansion.lexicon.to_tsv())?;
    write_resolved(config, &config.paths.out, "expand-terms")?;
    Ok(ExpandSummary {
        entries: expansion.lexicon.len(),
        conflicts: expansion.conflicts.len(),
        degraded: expansion.degraded,
        path,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MineSummary {
    pub studies: usize,
    pub skipped: usize,
    pub assertions: usize,
    pub pools: ExamplePools,
}

/// Pool sizes as `option_id<TAB>level<TAB>size`, in template order.
pub fn pool_stats(pools: &ExamplePools, template: &Template) -> String {
    let mut out = String::from("option_id\tlevel\tsize\n");
    for (i, o) in template.options().iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{}\n", o.id, template.option_level(i), pools.get(&o.id).len()));
    }
    out
}

/// Extracts the mining split (the whole corpus when no split file exists),
/// filters, and pools.
pub fn cmd_mine(config: &RunConfig) -> Result<MineSummary> {
    config.validate()?;
    let (template_path, corpus_path, lexicon_path) = (config.template_path(), config.corpus_path(), config.lexicon_path());
    require(&[&template_path, &corpus_path, &lexicon_path])?;
    let template = load_template(&read(&template_path)?)?;
    let lexicon = TerminologyLexicon::from_tsv(&read(&lexicon_path)?, &template)?;
    let mut studies = read_corpus(&read(&corpus_path)?)?;
    if let Some(splits) = load_splits(&config.splits_path())? {
        let mining: std::collections::HashSet<&str> = splits.mining.iter().map(String::as_str).collect();
        studies.retain(|s| mining.contains(s.study_id.as_str()));
    }
    let extractor: Box<dyn AnswerProvider> = match config.extractor {
        ExtractorBackend::RuleBased => Box::new(RuleBasedExtractor::new(lexicon)),
        ExtractorBackend::RemoteLlm => Box::new(LlmExtractor::new(HttpTransport::from_config(&config.llm), &config.llm)),
    };
    let mined = extract_corpus(&studies, &template, extractor.as_ref());
    let filtered: Vec<_> = mined.results.iter().map(|r| filter_extractions(r, &template)).collect();
    let pools = build_example_pools(&filtered);
    write(&config.out(EXTRACTIONS_FILE), &write_extractions(&filtered))?;
    write(&config.out(POOLS_FILE), &pools.to_json())?;
    write(&config.out(POOL_STATS_FILE), &pool_stats(&pools, &template))?;
    write_resolved(config, &config.paths.out, "mine")?;
    Ok(MineSummary {
        studies: studies.len(),
        skipped: mined.skipped.len(),
        assertions: filtered.iter().map(|r| r.assertions.len()).sum(),
        pools,
    })
}

/// Encoder from `paths.encoder`, or the seeded initial encoder of the
/// configured model (the one training starts from).
fn bank_encoder(config: &RunConfig, template: &Template) -> Result<ImageEncoder> {
    match &config.paths.encoder {
        Some(p) => {
            let ckpt: EncoderCheckpoint = serde_json::from_str(&read(p)?)?;
            ckpt.to_encoder()
        }
        None => Ok(Model::new(config.variant, &config.model, template.answer_dim(), config.seed)?
            .backbone
            .image),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankSummary {
    pub prototypes: usize,
    pub coverage: Vec<LevelCoverage>,
    pub table: String,
}

pub fn cmd_build_bank(config: &RunConfig) -> Result<BankSummary> {
    config.validate()?;
    let (template_path, pools_path, features_path) = (config.template_path(), config.pools_path(), config.features_path());
    require(&[&template_path, &pools_path, &features_path])?;
    if let Some(p) = &config.paths.encoder {
        require(&[p])?;
    }
    let template = load_template(&read(&template_path)?)?;
    let pools = ExamplePools::from_json(&read(&pools_path)?)?;
    let features = FeatureStore::from_tsv(&read(&features_path)?)?;
    let encoder = bank_encoder(config, &template)?;
    let embedder = FeatureEmbedder {
        encoder: &encoder,
        features: &features,
    };
    let bank = build_bank(&pools, &template, &embedder, config.k, config.seed)?;
    let coverage = kb_coverage(&bank, &template);
    let table = coverage_table(&coverage);
    if config.paths.encoder.is_none() {
        write(
            &config.out(ENCODER_FILE),
            &(serde_json::to_string(&EncoderCheckpoint::from_encoder(&encoder))? + "\n"),
        )?;
    }
    write(&config.bank_path(), &bank.to_jsonl())?;
    write(&config.out(COVERAGE_FILE), &table)?;
    write_resolved(config, &config.paths.out, "build-bank")?;
    Ok(BankSummary {
        prototypes: bank.len(),
        coverage,
        table,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub refreshes: usize,
    pub dir: PathBuf,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    seed: u64,
    variant: Variant,
    samples: usize,
    config: &'a TrainConfig,
}

/// Trains `config.variant` on the train split (all gold studies when no split
/// file exists). The bank is prepared for the variant first, so
/// randomized-prototypes trains against seeded noise and no-knowledge against
/// an empty bank.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    let paths = [
        config.template_path(),
        config.features_path(),
        config.gold_path(),
        config.bank_path(),
        config.pools_path(),
    ];
    require(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let template = load_template(&read(&paths[0])?)?;
    let features = FeatureStore::from_tsv(&read(&paths[1])?)?;
    let gold = read_reports(&read(&paths[2])?)?;
    let bank = PrototypeBank::from_jsonl(&read(&paths[3])?, &template)?;
    let pools = ExamplePools::from_json(&read(&paths[4])?)?;
    let ids: Vec<String> = match load_splits(&config.splits_path())? {
        Some(s) => s.train,
        None => gold.iter().map(|g| g.study_id.clone()).collect(),
    };
    let samples = training_samples_from(&template, &gold, &features, &ids, config.model.text_buckets)?;

    let model = Model::new(config.variant, &config.model, template.answer_dim(), config.seed)?;
    let bank = model.prepare_bank(&bank).into_owned();
    let mut trainer = Trainer::new(
        model,
        bank,
        &template,
        Some(RefreshSource {
            pools: &pools,
            features: &features,
        }),
        config.train.clone(),
    )?;
    let log = trainer.fit(&samples, config.seed)?;

    let dir = config.variant_dir();
    let mut log_text = serde_json::to_string(&LogHeader {
        seed: config.seed,
        variant: config.variant,
        samples: samples.len(),
        config: &config.train,
    })?;
    log_text.push('\n');
    for s in &log {
        log_text.push_str(&serde_json::to_string(s)?);
        log_text.push('\n');
    }
    write(&dir.join(CHECKPOINT_FILE), &Checkpoint::from_trainer(&trainer, &config.model).to_json())?;
    write(&dir.join(BANK_FILE), &trainer.bank().to_jsonl())?;
    write(&dir.join(TRAIN_LOG_FILE), &log_text)?;
    write_resolved(config, &dir, "train")?;
    Ok(TrainSummary {
        steps: trainer.step,
        final_loss: log.last().map(|s| s.loss).unwrap_or(f64::NAN),
        refreshes: log.iter().filter(|s| s.refreshed).count(),
        dir,
    })
}

/// Populates the test split (every featured study without a split file)
/// with the variant's checkpoint and trained bank.
pub fn cmd_populate(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let dir = config.variant_dir();
    let (ckpt_path, bank_path) = (dir.join(CHECKPOINT_FILE), dir.join(BANK_FILE));
    let (template_path, features_path) = (config.template_path(), config.features_path());
    require(&[&template_path, &features_path, &ckpt_path, &bank_path])?;
    let template = load_template(&read(&template_path)?)?;
    let features = FeatureStore::from_tsv(&read(&features_path)?)?;
    let model = Checkpoint::from_json(&read(&ckpt_path)?)?.to_model()?;
    let bank = PrototypeBank::from_jsonl(&read(&bank_path)?, &template)?;
    let ids: Vec<String> = match load_splits(&config.splits_path())? {
        Some(s) => s.test,
        None => features.ids().map(str::to_string).collect(),
    };
    let reports = populate_all(&features, &template, &ids, &model, &bank)?;
    let out = config.predictions_path();
    write(&out, &write_reports(&reports))?;
    write_resolved(config, &dir, "populate")?;
    Ok(out)
}

/// Scores predictions against the gold reports with the same study ids.
pub fn cmd_evaluate(config: &RunConfig) -> Result<MetricsReport> {
    config.validate()?;
    let (pred_path, gold_path, template_path) = (config.predictions_path(), config.gold_path(), config.template_path());
    require(&[&pred_path, &gold_path, &template_path])?;
    let template = load_template(&read(&template_path)?)?;
    let predicted = read_reports(&read(&pred_path)?)?;
    let gold = align_gold(&predicted, read_reports(&read(&gold_path)?)?)?;
    let metrics = evaluate(&predicted, &gold, &template)?;
    let bank_path = config.variant_dir().join(BANK_FILE);
    let coverage = if bank_path.exists() {
        Some(kb_coverage(&PrototypeBank::from_jsonl(&read(&bank_path)?, &template)?, &template))
    } else {
        None
    };
    let report = MetricsReport {
        seed: Some(config.seed),
        studies: predicted.len(),
        metrics,
        coverage,
        confusion: Vec::new(),
    };
    let dir = config.variant_dir();
    write(&dir.join(METRICS_FILE), &report.to_json())?;
    write_resolved(config, &dir, "evaluate")?;
    Ok(report)
}

/// Gold reports reordered to match `predicted`; a missing study is an error.
fn align_gold(predicted: &[StructuredReport], gold: Vec<StructuredReport>) -> Result<Vec<StructuredReport>> {
    let mut by_id: std::collections::HashMap<String, StructuredReport> =
        gold.into_iter().map(|g| (g.study_id.clone(), g)).collect();
    predicted
        .iter()
        .map(|p| {
            by_id
                .remove(&p.study_id)
                .ok_or_else(|| Error::Alignment(format!("no gold report for `{}`", p.study_id)))
        })
        .collect()
}

/// synth, expand-terms, mine, build-bank, then train/populate/evaluate for
/// `config.variant`.
pub fn run_all(config: &RunConfig) -> Result<MetricsReport> {
    cmd_synth(config)?;
    cmd_expand_terms(config)?;
    cmd_mine(config)?;
    cmd_build_bank(config)?;
    cmd_train(config)?;
    cmd_populate(config)?;
    cmd_evaluate(config)
}
