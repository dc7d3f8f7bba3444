//! In-memory end-to-end runs on a synthetic world: mine, build the bank,
//! train one variant, populate the test split and score it.

use std::collections::HashMap;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureEmbedder, FeatureStore};
use crate::error::{Error, Result};
use crate::eval::{evaluate, populate_report, EvalMetrics};
use crate::extraction::{build_example_pools, extract_corpus, filter_extractions, ExamplePools, ExtractionResult, RuleBasedExtractor};
use crate::knowledge_base::{build_bank, kb_coverage, LevelCoverage, PrototypeBank, DEFAULT_K};
use crate::model::{turn_samples, Model, ModelConfig, TurnSample, Variant};
use crate::synth::{SynthConfig, SynthWorld};
use crate::template::{StructuredReport, Template};
use crate::train::{Checkpoint, RefreshSource, StepStats, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Exemplars pooled per prototype.
    pub k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            k: DEFAULT_K,
        }
    }
}

/// Rule-based extraction over the mining split, filtered, pooled.
pub fn mine_world(world: &SynthWorld) -> (Vec<ExtractionResult>, ExamplePools) {
    let studies: Vec<_> = world.studies_in(&world.splits.mining).into_iter().cloned().collect();
    let extractor = RuleBasedExtractor::new(world.lexicon.clone());
    let mined = extract_corpus(&studies, &world.template, &extractor);
    let filtered: Vec<ExtractionResult> = mined
        .results
        .iter()
        .map(|r| filter_extractions(r, &world.template))
        .collect();
    let pools = build_example_pools(&filtered);
    (filtered, pools)
}

pub fn training_samples(world: &SynthWorld, ids: &[String], text_buckets: usize) -> Result<Vec<TurnSample>> {
    training_samples_from(&world.template, &world.gold, &world.image_features, ids, text_buckets)
}

/// Turn samples for `ids`, in order; every id needs a gold report and features.
pub fn training_samples_from(
    template: &Template,
    gold: &[StructuredReport],
    features: &FeatureStore,
    ids: &[String],
    text_buckets: usize,
) -> Result<Vec<TurnSample>> {
    let by_id: HashMap<&str, &StructuredReport> = gold.iter().map(|g| (g.study_id.as_str(), g)).collect();
    let mut out = Vec::new();
    for id in ids {
        let report = by_id.get(id.as_str()).ok_or_else(|| Error::UnknownId(id.clone()))?;
        let image = features.input(id)?;
        out.extend(turn_samples(template, report, &image, text_buckets));
    }
    Ok(out)
}

pub struct Outcome {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub coverage: Vec<LevelCoverage>,
    pub bank: PrototypeBank,
    pub checkpoint: Checkpoint,
    pub predictions: Vec<StructuredReport>,
    pub log: Vec<StepStats>,
}

/// Populates reports for `ids` in parallel, preserving order.
pub fn populate_all(
    features: &FeatureStore,
    template: &Template,
    ids: &[String],
    model: &Model,
    bank: &PrototypeBank,
) -> Result<Vec<StructuredReport>> {
    ids.par_iter()
        .map(|id| populate_report(&features.input(id)?, template, model, bank))
        .collect()
}

/// One training run of `variant`; `pools` come from [`mine_world`].
pub fn run_variant(
    world: &SynthWorld,
    pools: &ExamplePools,
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
) -> Result<Outcome> {
    let template = &world.template;
    let model = Model::new(variant, &config.model, template.answer_dim(), seed)?;
    let embedder = FeatureEmbedder {
        encoder: &model.backbone.image,
        features: &world.image_features,
    };
    let built = build_bank(pools, template, &embedder, config.k, seed)?;
    let coverage = kb_coverage(&built, template);
    let bank = model.prepare_bank(&built).into_owned();
    let samples = training_samples(world, &world.splits.train, config.model.text_buckets)?;
    let mut trainer = Trainer::new(
        model,
        bank,
        template,
        Some(RefreshSource {
            pools,
            features: &world.image_features,
        }),
        config.train.clone(),
    )?;
    let log = trainer.fit(&samples, seed)?;
    info!(
        "{variant} seed {seed}: {} steps, final loss {:.4}",
        trainer.step,
        log.last().map(|s| s.loss).unwrap_or(f64::NAN)
    );
    let bank = (*trainer.bank()).clone();
    let predictions = populate_all(&world.image_features, template, &world.splits.test, &trainer.model, &bank)?;
    let gold = world.gold_in(&world.splits.test);
    let metrics = evaluate(&predictions, &gold, template)?;
    Ok(Outcome {
        variant,
        seed,
        metrics,
        coverage,
        checkpoint: Checkpoint::from_trainer(&trainer, &config.model),
        bank,
        predictions,
        log,
    })
}

/// One (variant, seed) cell of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: EvalMetrics,
}

/// Trains every variant in `variants` on a fresh world per seed in `0..seeds`
/// (the world seed and the model seed are both the run seed).
pub fn run_ablation(config: &ExperimentConfig, variants: &[Variant], seeds: u64) -> Result<Vec<AblationRun>> {
    let per_seed: Vec<Vec<AblationRun>> = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let world = crate::synth::generate(&SynthConfig {
                seed,
                ..config.synth.clone()
            })?;
            let (_, pools) = mine_world(&world);
            variants
                .par_iter()
                .map(|&variant| {
                    let out = run_variant(&world, &pools, config, variant, seed)?;
                    Ok(AblationRun {
                        variant,
                        seed,
                        metrics: out.metrics,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Mean L3 macro-F1 of `variant` across `runs`, or `None` if it never ran.
pub fn mean_l3_f1(runs: &[AblationRun], variant: Variant) -> Option<f64> {
    let xs: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(|r| r.metrics.l3_f1).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
