//! Optimization loop: gradient accumulation, Adam, EMA encoder tracking and
//! periodic prototype refresh.

use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureEmbedder, FeatureStore, ImageEncoder};
use crate::error::{Error, Result};
use crate::extraction::ExamplePools;
use crate::knowledge_base::{
    ema_update, refresh_bank, BankSnapshot, EmaEncoderState, PrototypeBank, DEFAULT_EMA_DECAY,
    DEFAULT_REFRESH_EVERY,
};
use crate::model::{Model, ModelConfig, TurnSample, Variant};
use crate::nn::{Adam, AdamConfig, NamedTensor, Parameters};
use crate::template::Template;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Samples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    /// Optimizer steps between prototype refreshes; 0 disables refresh.
    pub refresh_every: u64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 8,
            accumulation: 4,
            refresh_every: DEFAULT_REFRESH_EVERY,
            ema_decay: DEFAULT_EMA_DECAY,
            epochs: 1,
            max_steps: None,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch size and accumulation must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub samples: usize,
    pub refreshed: bool,
}

/// Sources for re-embedding prototypes during training.
pub struct RefreshSource<'a> {
    pub pools: &'a ExamplePools,
    pub features: &'a FeatureStore,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub optimizer: Adam,
    pub ema: EmaEncoderState,
    pub step: u64,
    pub config: TrainConfig,
    bank: BankSnapshot,
    template: &'a Template,
    refresh: Option<RefreshSource<'a>>,
}

impl<'a> Trainer<'a> {
    /// `bank` should already be the variant's view (see [`Model::prepare_bank`]).
    pub fn new(
        model: Model,
        bank: PrototypeBank,
        template: &'a Template,
        refresh: Option<RefreshSource<'a>>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.adam(), model.parameter_count());
        let ema = EmaEncoderState::new(&model.backbone.image, config.ema_decay)?;
        Ok(Trainer {
            model,
            optimizer,
            ema,
            step: 0,
            config,
            bank: BankSnapshot::new(bank),
            template,
            refresh,
        })
    }

    pub fn bank(&self) -> Arc<PrototypeBank> {
        self.bank.load()
    }

    pub fn ema_encoder(&self) -> Result<ImageEncoder> {
        let mut enc = self.model.backbone.image.clone();
        enc.set_flat(&self.ema.parameters)?;
        Ok(enc)
    }

    /// Mean loss and mean gradient over all samples of all micro-batches.
    /// Samples are accumulated one after another into a single buffer, so
    /// splitting the same samples into different micro-batches gives the
    /// same result bit for bit.
    pub fn gradient(&self, micro_batches: &[&[TurnSample]], bank: &PrototypeBank) -> Result<(f64, Vec<f64>)> {
        let n: usize = micro_batches.iter().map(|b| b.len()).sum();
        if n == 0 {
            return Err(Error::EmptyInput("training step without samples"));
        }
        let mut grad = self.model.zeros_like();
        let mut loss = 0.0;
        for s in micro_batches.iter().flat_map(|b| b.iter()) {
            let question = &self.template.questions()[s.question];
            loss += self.model.accumulate_gradient(s, question, bank, &mut grad)?;
        }
        let n = n as f64;
        let mut total = grad.flat();
        for t in &mut total {
            *t /= n;
        }
        Ok((loss / n, total))
    }

    pub fn train_step(&mut self, micro_batches: &[&[TurnSample]]) -> Result<StepStats> {
        let bank = self.bank.load();
        let (loss, grad) = self.gradient(micro_batches, &bank)?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            let names = self.model.tensors();
            let mut offset = 0;
            let name = names
                .iter()
                .find(|t| {
                    offset += t.values.len();
                    i < offset
                })
                .map(|t| t.name.clone())
                .unwrap_or_default();
            return Err(Error::NonFiniteGradient(name));
        }
        self.optimizer.step_flat(&mut self.model, &grad)?;
        self.ema = ema_update(&self.model.backbone.image.flat(), &self.ema)?;
        self.step += 1;
        let refreshed = self.maybe_refresh()?;
        Ok(StepStats {
            step: self.step,
            loss,
            samples: micro_batches.iter().map(|b| b.len()).sum(),
            refreshed,
        })
    }

    fn maybe_refresh(&mut self) -> Result<bool> {
        let every = self.config.refresh_every;
        if every == 0 || !self.step.is_multiple_of(every) || !self.model.variant.refreshes_bank() {
            return Ok(false);
        }
        let Some(src) = &self.refresh else {
            return Ok(false);
        };
        let current = self.bank.load();
        if current.is_empty() {
            return Ok(false);
        }
        let encoder = self.ema_encoder()?;
        let embedder = FeatureEmbedder {
            encoder: &encoder,
            features: src.features,
        };
        let next = refresh_bank(&current, src.pools, &embedder, self.step)?;
        self.bank.swap(next);
        info!("step {}: prototype bank refreshed with the EMA encoder", self.step);
        Ok(true)
    }

    /// Shuffled passes over `samples` until the epoch budget or step cap.
    pub fn fit(&mut self, samples: &[TurnSample], shuffle_seed: u64) -> Result<Vec<StepStats>> {
        let per_step = self.config.batch_size * self.config.accumulation;
        let mut log = Vec::new();
        if samples.is_empty() {
            return Err(Error::EmptyInput("no training samples"));
        }
        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(per_step) {
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    return Ok(log);
                }
                let batch: Vec<TurnSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let micro: Vec<&[TurnSample]> = batch.chunks(self.config.batch_size).collect();
                let stats = self.train_step(&micro)?;
                if stats.step % 100 == 0 {
                    debug!("step {} loss {:.5}", stats.step, stats.loss);
                }
                log.push(stats);
            }
            info!("epoch {} done at step {}", epoch + 1, self.step);
        }
        Ok(log)
    }
}

/// Model parameters, optimizer moments and EMA state as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: Variant,
    pub seed: u64,
    pub step: u64,
    pub answer_dim: usize,
    pub model_config: ModelConfig,
    pub temperature: f64,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<Adam>,
    pub ema: Option<EmaEncoderState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &ModelConfig) -> Self {
        Checkpoint {
            variant: model.variant,
            seed: model.seed,
            step: 0,
            answer_dim: model.answer_dim(),
            model_config: config.clone(),
            temperature: model.head.temperature,
            tensors: model.named_tensors(),
            optimizer: None,
            ema: None,
        }
    }

    pub fn from_trainer(trainer: &Trainer<'_>, config: &ModelConfig) -> Self {
        Checkpoint {
            step: trainer.step,
            optimizer: Some(trainer.optimizer.clone()),
            ema: Some(trainer.ema.clone()),
            ..Checkpoint::from_model(&trainer.model, config)
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut config = self.model_config.clone();
        config.temperature = self.temperature;
        let mut model = Model::new(self.variant, &config, self.answer_dim, self.seed)?;
        model.load_named(&self.tensors)?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(source: &str) -> Result<Self> {
        Ok(serde_json::from_str(source)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ImageInput;
    use crate::knowledge_base::build_bank;
    use crate::model::tests::small_config;
    use crate::model::turn_samples;
    use crate::template::tests::effusion_template;
    use crate::template::StructuredReport;
    use rand::Rng;

    struct Fixture {
        template: Template,
        samples: Vec<TurnSample>,
        features: FeatureStore,
        pools: ExamplePools,
    }

    fn fixture() -> Fixture {
        let t = effusion_template();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut features = FeatureStore::new(5);
        let mut samples = Vec::new();
        let mut pools = ExamplePools::default();
        let mut members: std::collections::BTreeMap<String, Vec<String>> = Default::default();
        for i in 0..12 {
            let id = format!("s{i}");
            let f: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            features.insert(id.clone(), f.clone()).unwrap();
            let mut g = StructuredReport::new(id.clone());
            if i % 2 == 0 {
                g.answer("lung", ["lung/lung abnormality"]);
                g.answer("effusion", ["effusion/pleural effusion"]);
                g.answer("side", [if i % 4 == 0 { "side/left" } else { "side/right" }]);
            } else {
                g.answer("lung", ["lung/no lung abnormality"]);
            }
            g.answer("heart", ["heart/normal heart size"]);
            for o in g.selected_options() {
                members.entry(o.clone()).or_default().push(id.clone());
            }
            let x = ImageInput { study_id: id, features: f };
            samples.extend(turn_samples(&t, &g, &x, 16));
        }
        for (o, m) in members {
            pools.insert(o, m);
        }
        Fixture {
            template: t,
            samples,
            features,
            pools,
        }
    }

    fn trainer<'a>(fx: &'a Fixture, config: TrainConfig) -> Trainer<'a> {
        let mut model = Model::new(Variant::PrototypeFusion, &small_config(), fx.template.answer_dim(), 4).unwrap();
        model.head.scale = vec![0.3; fx.template.answer_dim()];
        let embedder = FeatureEmbedder {
            encoder: &model.backbone.image,
            features: &fx.features,
        };
        let bank = build_bank(&fx.pools, &fx.template, &embedder, 3, 1).unwrap();
        Trainer::new(
            model,
            bank,
            &fx.template,
            Some(RefreshSource {
                pools: &fx.pools,
                features: &fx.features,
            }),
            config,
        )
        .unwrap()
    }

    #[test]
    fn split_batches_match_full_batch() {
        let fx = fixture();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut a = trainer(&fx, cfg.clone());
        let mut b = trainer(&fx, cfg);
        let batch = &fx.samples[..16];
        a.train_step(&[&batch[..8], &batch[8..]]).unwrap();
        b.train_step(&[batch]).unwrap();
        assert_eq!(a.model.flat(), b.model.flat());
        assert_eq!(a.optimizer, b.optimizer);
    }

    #[test]
    fn loss_decreases_and_bank_is_constant_between_refreshes() {
        let fx = fixture();
        let mut t = trainer(
            &fx,
            TrainConfig {
                learning_rate: 1e-2,
                refresh_every: 25,
                epochs: 40,
                max_steps: Some(60),
                ..TrainConfig::default()
            },
        );
        let before = t.bank().to_jsonl();
        let first = t.train_step(&[&fx.samples[..8]]).unwrap();
        assert_eq!(t.bank().to_jsonl(), before);
        let log = t.fit(&fx.samples, 0).unwrap();
        let refreshed: Vec<u64> = std::iter::once(&first)
            .chain(&log)
            .filter(|s| s.refreshed)
            .map(|s| s.step)
            .collect();
        assert_eq!(refreshed, vec![25, 50]);
        assert_eq!(t.bank().built_at_step, 50);
        let late: f64 = log[log.len() - 5..].iter().map(|s| s.loss).sum::<f64>() / 5.0;
        assert!(late < first.loss, "{late} vs {}", first.loss);
    }

    #[test]
    fn checkpoint_round_trip() {
        let fx = fixture();
        let mut t = trainer(&fx, TrainConfig::default());
        t.train_step(&[&fx.samples[..4]]).unwrap();
        let ck = Checkpoint::from_trainer(&t, &small_config());
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), t.model);
    }

    #[test]
    fn rejects_bad_config() {
        let fx = fixture();
        let model = Model::new(Variant::NoKnowledge, &small_config(), fx.template.answer_dim(), 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(Trainer::new(model, PrototypeBank::empty(6, 9), &fx.template, None, cfg).is_err());
    }
}
