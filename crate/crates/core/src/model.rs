//! Backbone plus knowledge branch, wired for the four compared variants.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{stable_hash, Backbone, BackboneDims, BackboneTrace, ImageInput, QuestionContext};
use crate::error::{Error, Result};
use crate::eval::ReportModel;
use crate::head::{
    cosine, fuse, head_backward, head_forward, loss_and_grad, softmax, valid_mask, FusionHeadParams, HeadDims,
    HeadTrace, Weighting, DEFAULT_TEMPERATURE,
};
use crate::knowledge_base::PrototypeBank;
use crate::nn::{Linear, Parameters, TensorRef};
use crate::template::{Question, Template};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Backbone with the late-fusion knowledge branch over mined prototypes.
    #[default]
    PrototypeFusion,
    /// Backbone only.
    NoKnowledge,
    /// Same architecture, prototypes replaced by seeded Gaussian noise.
    RandomizedPrototypes,
    /// Retrieved answer vector appended to the text-encoder input; no residual.
    EarlyFusionStub,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::PrototypeFusion,
        Variant::NoKnowledge,
        Variant::RandomizedPrototypes,
        Variant::EarlyFusionStub,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::PrototypeFusion => "prototype-fusion",
            Variant::NoKnowledge => "no-knowledge",
            Variant::RandomizedPrototypes => "randomized-prototypes",
            Variant::EarlyFusionStub => "early-fusion-stub",
        }
    }

    pub fn late_fusion(self) -> bool {
        matches!(self, Variant::PrototypeFusion | Variant::RandomizedPrototypes)
    }

    /// Whether periodic re-embedding with the EMA encoder applies.
    pub fn refreshes_bank(self) -> bool {
        matches!(self, Variant::PrototypeFusion | Variant::EarlyFusionStub)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Layer widths and head settings; the answer width comes from the template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub image_dim: usize,
    pub text_buckets: usize,
    pub text_dim: usize,
    pub fused_dim: usize,
    pub shared_dim: usize,
    /// Defaults to twice the answer space.
    pub hidden_dim: Option<usize>,
    pub temperature: f64,
    pub weighting: Weighting,
    pub head_init: HeadInit,
}

/// How the head's projections and MLP start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInit {
    /// Independent uniform draws.
    Random,
    /// Retrieval starts as cosine in image-embedding space: the query
    /// projection reads only the image block of S, with the same weights as
    /// the prototype projection (the identity when `shared_dim == image_dim`).
    /// The MLP starts as `b_a = 2c·tanh(g·(u_a − 0.4))`, so an option gains
    /// only from its own retrieval mass and loses when that mass is low.
    #[default]
    Aligned,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 32,
            image_dim: 32,
            text_buckets: 512,
            text_dim: 16,
            fused_dim: 16,
            shared_dim: 32,
            hidden_dim: None,
            temperature: DEFAULT_TEMPERATURE,
            weighting: Weighting::Softmax,
            head_init: HeadInit::default(),
        }
    }
}

const ALIGNED_GAIN: f64 = 4.0;
const ALIGNED_OUT: f64 = 4.0;
const ALIGNED_CENTER: f64 = 0.4;

fn align_head(head: &mut FusionHeadParams, image_dim: usize) {
    let d = head.dims;
    if d.shared_dim == image_dim {
        head.proj_proto = Linear::eye(image_dim, image_dim);
    }
    head.proj_proto.bias.fill(0.0);
    head.proj_query = Linear::zeros(d.query_dim, d.shared_dim);
    for p in 0..d.shared_dim {
        let row = &head.proj_proto.weight[p * image_dim..(p + 1) * image_dim];
        head.proj_query.weight[p * d.query_dim..p * d.query_dim + image_dim].copy_from_slice(row);
    }
    if d.hidden_dim < 2 * d.answer_dim {
        return;
    }
    let (inputs, y) = (d.proto_dim + d.answer_dim, d.answer_dim);
    head.mlp_hidden = Linear::zeros(inputs, d.hidden_dim);
    head.mlp_out = Linear::zeros(d.hidden_dim, y);
    for a in 0..y {
        head.mlp_hidden.weight[a * inputs + d.proto_dim + a] = ALIGNED_GAIN;
        head.mlp_hidden.weight[(y + a) * inputs + d.proto_dim + a] = -ALIGNED_GAIN;
        head.mlp_hidden.bias[a] = -ALIGNED_GAIN * ALIGNED_CENTER;
        head.mlp_hidden.bias[y + a] = ALIGNED_GAIN * ALIGNED_CENTER;
        head.mlp_out.weight[a * d.hidden_dim + a] = ALIGNED_OUT;
        head.mlp_out.weight[a * d.hidden_dim + y + a] = -ALIGNED_OUT;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    /// Seeds initialization and the randomized-prototype bank.
    pub seed: u64,
    pub backbone: Backbone,
    pub head: FusionHeadParams,
}

/// Intermediate values of one question turn.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub backbone: BackboneTrace,
    pub mask: Vec<usize>,
    pub head: Option<HeadTrace>,
    pub b_sup: Vec<f64>,
    pub z_final: Vec<f64>,
}

impl ForwardTrace {
    pub fn z_base(&self) -> &[f64] {
        &self.backbone.base_logits
    }
}

impl Model {
    /// Backbone and head draw from independent streams, so variants sharing
    /// a backbone shape start from identical backbone weights.
    pub fn new(variant: Variant, config: &ModelConfig, answer_dim: usize, seed: u64) -> Result<Self> {
        for (name, v) in [
            ("feature_dim", config.feature_dim),
            ("image_dim", config.image_dim),
            ("text_buckets", config.text_buckets),
            ("text_dim", config.text_dim),
            ("fused_dim", config.fused_dim),
            ("shared_dim", config.shared_dim),
            ("answer_dim", answer_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let dims = Self::backbone_dims(variant, config, answer_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[b"backbone", &seed.to_le_bytes()]));
        let backbone = Backbone::init(dims, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[b"head", &seed.to_le_bytes()]));
        let mut head = FusionHeadParams::init(Self::head_dims(config, answer_dim), config.temperature, &mut rng)?;
        head.weighting = config.weighting;
        if config.head_init == HeadInit::Aligned {
            align_head(&mut head, config.image_dim);
        }
        Ok(Model {
            variant,
            seed,
            backbone,
            head,
        })
    }

    pub fn backbone_dims(variant: Variant, config: &ModelConfig, answer_dim: usize) -> BackboneDims {
        BackboneDims {
            feature_dim: config.feature_dim,
            image_dim: config.image_dim,
            text_buckets: config.text_buckets,
            text_dim: config.text_dim,
            fused_dim: config.fused_dim,
            answer_dim,
            text_extra: if variant == Variant::EarlyFusionStub { answer_dim } else { 0 },
        }
    }

    pub fn head_dims(config: &ModelConfig, answer_dim: usize) -> HeadDims {
        HeadDims {
            hidden_dim: config.hidden_dim.unwrap_or(2 * answer_dim),
            ..HeadDims::new(config.image_dim + config.fused_dim, config.image_dim, config.shared_dim, answer_dim)
        }
    }

    pub fn answer_dim(&self) -> usize {
        self.backbone.dims.answer_dim
    }

    /// All-zero model of the same shape (gradient buffer).
    pub fn zeros_like(&self) -> Model {
        Model {
            variant: self.variant,
            seed: self.seed,
            backbone: Backbone::zeros(self.backbone.dims),
            head: FusionHeadParams::zeros(self.head.dims, self.head.temperature),
        }
    }

    /// The bank this variant actually reads: empty for no-knowledge, seeded
    /// noise for randomized prototypes, the given bank otherwise.
    pub fn prepare_bank<'a>(&self, bank: &'a PrototypeBank) -> Cow<'a, PrototypeBank> {
        match self.variant {
            Variant::NoKnowledge => Cow::Owned(PrototypeBank::empty(bank.dim, bank.answer_dim)),
            Variant::RandomizedPrototypes => Cow::Owned(bank.randomized(self.seed)),
            _ => Cow::Borrowed(bank),
        }
    }

    fn check_bank(&self, bank: &PrototypeBank) -> Result<()> {
        if bank.is_empty() {
            return Ok(());
        }
        if bank.answer_dim != self.answer_dim() {
            return Err(Error::dim("bank answer_dim", self.answer_dim(), bank.answer_dim));
        }
        if bank.dim != self.backbone.dims.image_dim {
            return Err(Error::dim("bank prototype width", self.backbone.dims.image_dim, bank.dim));
        }
        Ok(())
    }

    /// Retrieved answer vector fed to the text encoder by the early-fusion
    /// stub; compares the raw image embedding with prototypes directly.
    fn early_block(&self, features: &[f64], mask: &[usize], bank: &PrototypeBank) -> Result<Vec<(usize, f64)>> {
        if mask.is_empty() {
            return Ok(Vec::new());
        }
        let emb = self.backbone.image.encode(features)?;
        let protos = bank.prototypes();
        let c: Vec<f64> = mask.iter().map(|&i| cosine(&emb, &protos[i].embedding)).collect();
        let alpha = softmax(&c, self.head.temperature);
        let mut u = vec![0.0; self.answer_dim()];
        for (&i, a) in mask.iter().zip(alpha) {
            u[protos[i].answer_index] += a;
        }
        let base = self.backbone.dims.text_buckets;
        Ok(u.into_iter()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .map(|(k, v)| (base + k, v))
            .collect())
    }

    /// One question turn from raw features and the context's text histogram.
    pub fn forward(
        &self,
        features: &[f64],
        mut text_input: Vec<(usize, f64)>,
        question: &Question,
        bank: &PrototypeBank,
    ) -> Result<ForwardTrace> {
        self.check_bank(bank)?;
        let mask = if self.variant == Variant::NoKnowledge {
            Vec::new()
        } else {
            valid_mask(question, bank)
        };
        if self.variant == Variant::EarlyFusionStub {
            text_input.extend(self.early_block(features, &mask, bank)?);
        }
        let backbone = self.backbone.trace(features, text_input)?;
        let head = if self.variant.late_fusion() {
            head_forward(&backbone.fused, bank, &mask, &self.head)?
        } else {
            None
        };
        let b_sup = match &head {
            Some(t) => t.b_sup.clone(),
            None => vec![0.0; self.answer_dim()],
        };
        let z_final = fuse(&backbone.base_logits, &b_sup, &self.head)?.values;
        Ok(ForwardTrace {
            backbone,
            mask,
            head,
            b_sup,
            z_final,
        })
    }

    pub fn forward_turn(
        &self,
        image: &ImageInput,
        context: &QuestionContext,
        question: &Question,
        bank: &PrototypeBank,
    ) -> Result<ForwardTrace> {
        self.forward(&image.features, self.backbone.text_input(context), question, bank)
    }

    /// Accumulates dL/dθ into `grad` given dL/dz_final. Prototype embeddings
    /// are treated as constants.
    pub fn backward(&self, trace: &ForwardTrace, bank: &PrototypeBank, dz: &[f64], grad: &mut Model) {
        let d_fused = match &trace.head {
            Some(h) => head_backward(h, bank, &self.head, dz, &mut grad.head),
            None => vec![0.0; self.backbone.dims.s_dim()],
        };
        self.backbone.backward(&trace.backbone, dz, &d_fused, &mut grad.backbone);
    }

    /// Loss of one supervised turn and its gradient added into `grad`.
    pub fn accumulate_gradient(
        &self,
        sample: &TurnSample,
        question: &Question,
        bank: &PrototypeBank,
        grad: &mut Model,
    ) -> Result<f64> {
        let trace = self.forward(&sample.features, sample.text_input.clone(), question, bank)?;
        let (loss, dz) = loss_and_grad(&trace.z_final, &sample.targets, &sample.mask)?;
        self.backward(&trace, bank, &dz, grad);
        Ok(loss)
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.backbone.tensors();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.backbone.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }
}

impl ReportModel for Model {
    fn logits(
        &self,
        image: &ImageInput,
        context: &QuestionContext,
        question: &Question,
        bank: &PrototypeBank,
    ) -> Result<Vec<f64>> {
        Ok(self.forward_turn(image, context, question, bank)?.z_final)
    }
}

/// One teacher-forced question turn: the question is asked with the gold
/// answers of every earlier open question in its history.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnSample {
    pub study_id: String,
    /// Position of the question in the template.
    pub question: usize,
    pub features: Vec<f64>,
    pub text_input: Vec<(usize, f64)>,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Turns for every open question of a gold report, in traversal order.
pub fn turn_samples(
    template: &Template,
    gold: &crate::template::StructuredReport,
    image: &ImageInput,
    text_buckets: usize,
) -> Vec<TurnSample> {
    let mut history: Vec<(String, Vec<String>)> = Vec::new();
    let mut out = Vec::new();
    for q in crate::template::traversal_order(template) {
        if !template.is_open(q, &gold.answers) {
            continue;
        }
        let ctx = QuestionContext::new(template, q, history.clone());
        let mut targets = vec![0.0; template.answer_dim()];
        let mut mask = vec![false; template.answer_dim()];
        for o in &q.option_ids {
            let i = template.option_position(o).expect("validated template");
            mask[i] = true;
        }
        let chosen: Vec<String> = gold.selected(&q.id).map(|s| s.iter().cloned().collect()).unwrap_or_default();
        for o in &chosen {
            if let Some(i) = template.option_position(o) {
                targets[i] = 1.0;
            }
        }
        out.push(TurnSample {
            study_id: gold.study_id.clone(),
            question: template.question_position(&q.id).expect("validated template"),
            features: image.features.clone(),
            text_input: crate::backbone::text_histogram(&ctx.rendered_text, text_buckets),
            targets,
            mask,
        });
        history.push((q.id.clone(), chosen));
    }
    out
}
