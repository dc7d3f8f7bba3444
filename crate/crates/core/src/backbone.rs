//! Toy structured-reporting backbone: image encoder, hashed bag-of-n-gram
//! text encoder, concatenation fusion and a linear classifier over the
//! global answer space. Each piece is a small differentiable map so the
//! whole model can be trained and gradient-checked at desk scale.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_base::ImageEmbedder;
use crate::nn::{tanh_grad, Linear, NamedTensor, Parameters, TensorRef};
use crate::template::{Question, Template};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInput {
    pub study_id: String,
    pub features: Vec<f64>,
}

/// Current question plus every earlier (question, answers) turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionContext {
    pub question_id: String,
    pub history: Vec<(String, Vec<String>)>,
    pub rendered_text: String,
}

impl QuestionContext {
    /// Renders `Q: <text> A: <answers>; ...` for the history followed by
    /// `Q: <current question text>`.
    pub fn new(template: &Template, question: &Question, history: Vec<(String, Vec<String>)>) -> Self {
        let mut text = String::new();
        for (qid, answers) in &history {
            let qtext = template.question(qid).map(|q| q.text.as_str()).unwrap_or(qid);
            let atext: Vec<&str> = answers
                .iter()
                .map(|o| template.option(o).map(|o| o.canonical_text.as_str()).unwrap_or(o))
                .collect();
            text.push_str(&format!("Q: {qtext} A: {}; ", atext.join(", ")));
        }
        text.push_str(&format!("Q: {}", question.text));
        QuestionContext {
            question_id: question.id.clone(),
            history,
            rendered_text: text,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedRepresentation {
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseLogits {
    pub values: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut joined = Vec::new();
    for p in parts {
        joined.extend_from_slice(p);
        joined.push(0xff);
    }
    fnv1a(&joined)
}

/// Hashed counts of unigrams, bigrams and turn-indexed unigrams (turns are
/// the `;`-separated segments), L2-normalized, as sorted sparse pairs. The
/// turn-indexed block makes the histogram sensitive to history order.
pub fn text_histogram(text: &str, buckets: usize) -> Vec<(usize, f64)> {
    let lower = text.to_lowercase();
    let split = |s: &str| -> Vec<String> {
        s.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    };
    let tokens = split(&lower);
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    let mut bump = |h: u64| *counts.entry((h % buckets as u64) as usize).or_insert(0.0) += 1.0;
    for t in &tokens {
        bump(stable_hash(&[b"u", t.as_bytes()]));
    }
    for w in tokens.windows(2) {
        bump(stable_hash(&[b"b", w[0].as_bytes(), w[1].as_bytes()]));
    }
    for (turn, segment) in lower.split(';').enumerate() {
        let turn = (turn as u64).to_le_bytes();
        for t in split(segment) {
            bump(stable_hash(&[b"p", &turn, t.as_bytes()]));
        }
    }
    let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
    counts
        .into_iter()
        .map(|(i, v)| (i, if norm > 0.0 { v / norm } else { v }))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub feature_dim: usize,
    /// d: image embedding width (also the prototype width).
    pub image_dim: usize,
    pub text_buckets: usize,
    pub text_dim: usize,
    /// Width of the mixing block; S is the image embedding followed by this
    /// block, so d_s = image_dim + fused_dim.
    pub fused_dim: usize,
    pub answer_dim: usize,
    /// Extra text-encoder inputs appended after the histogram (early fusion).
    #[serde(default)]
    pub text_extra: usize,
}

impl BackboneDims {
    /// d_s, the width of the fused representation S.
    pub fn s_dim(&self) -> usize {
        self.image_dim + self.fused_dim
    }
}

/// `tanh(W x + b)` over raw image features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub linear: Linear,
}

impl ImageEncoder {
    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.linear.inputs {
            return Err(Error::dim("image features", self.linear.inputs, features.len()));
        }
        Ok(self.linear.apply(features).into_iter().map(f64::tanh).collect())
    }

    pub fn dim(&self) -> usize {
        self.linear.outputs
    }

    pub fn input_dim(&self) -> usize {
        self.linear.inputs
    }
}

impl Parameters for ImageEncoder {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.linear.tensors("image", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.linear.tensors_mut(&mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub dims: BackboneDims,
    pub image: ImageEncoder,
    pub text: Linear,
    pub fusion: Linear,
    pub classifier: Linear,
}

/// Intermediate values of one backbone forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneTrace {
    pub features: Vec<f64>,
    pub image_emb: Vec<f64>,
    /// Sparse text-encoder input (histogram, then any early-fusion block).
    pub text_input: Vec<(usize, f64)>,
    pub text_emb: Vec<f64>,
    pub fused: Vec<f64>,
    pub base_logits: Vec<f64>,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(dims: BackboneDims, rng: &mut R) -> Self {
        Backbone {
            dims,
            image: ImageEncoder {
                linear: Linear::init(dims.feature_dim, dims.image_dim, rng),
            },
            text: Linear::init(dims.text_buckets + dims.text_extra, dims.text_dim, rng),
            fusion: Linear::init(dims.image_dim + dims.text_dim, dims.fused_dim, rng),
            classifier: Linear::init(dims.s_dim(), dims.answer_dim, rng),
        }
    }

    pub fn zeros(dims: BackboneDims) -> Self {
        Backbone {
            dims,
            image: ImageEncoder {
                linear: Linear::zeros(dims.feature_dim, dims.image_dim),
            },
            text: Linear::zeros(dims.text_buckets + dims.text_extra, dims.text_dim),
            fusion: Linear::zeros(dims.image_dim + dims.text_dim, dims.fused_dim),
            classifier: Linear::zeros(dims.s_dim(), dims.answer_dim),
        }
    }

    pub fn encode_image(&self, x: &ImageInput) -> Result<Vec<f64>> {
        self.image.encode(&x.features)
    }

    pub fn text_input(&self, q: &QuestionContext) -> Vec<(usize, f64)> {
        text_histogram(&q.rendered_text, self.dims.text_buckets)
    }

    pub fn encode_text(&self, q: &QuestionContext) -> Vec<f64> {
        self.text.apply_sparse(&self.text_input(q))
    }

    pub fn fuse_features(&self, image_emb: &[f64], text_emb: &[f64]) -> Result<FusedRepresentation> {
        if image_emb.len() != self.dims.image_dim {
            return Err(Error::dim("image embedding", self.dims.image_dim, image_emb.len()));
        }
        if text_emb.len() != self.dims.text_dim {
            return Err(Error::dim("text embedding", self.dims.text_dim, text_emb.len()));
        }
        let joined: Vec<f64> = image_emb.iter().chain(text_emb).copied().collect();
        let mut values = image_emb.to_vec();
        values.extend(self.fusion.apply(&joined).into_iter().map(f64::tanh));
        Ok(FusedRepresentation { values })
    }

    pub fn classify(&self, s: &FusedRepresentation) -> Result<BaseLogits> {
        Ok(BaseLogits {
            values: self.classifier.forward(&s.values)?,
        })
    }

    /// Forward pass from raw features and a prepared sparse text input.
    pub(crate) fn trace(&self, features: &[f64], text_input: Vec<(usize, f64)>) -> Result<BackboneTrace> {
        let image_emb = self.image.encode(features)?;
        let text_emb = self.text.apply_sparse(&text_input);
        let fused = self.fuse_features(&image_emb, &text_emb)?.values;
        let base_logits = self.classifier.apply(&fused);
        Ok(BackboneTrace {
            features: features.to_vec(),
            image_emb,
            text_input,
            text_emb,
            fused,
            base_logits,
        })
    }

    /// Backpropagates dL/dz_base and any extra dL/dS into `grad`.
    pub(crate) fn backward(&self, trace: &BackboneTrace, d_logits: &[f64], d_fused_extra: &[f64], grad: &mut Backbone) {
        let mut d_fused = self.classifier.backward(&trace.fused, d_logits, &mut grad.classifier);
        for (d, e) in d_fused.iter_mut().zip(d_fused_extra) {
            *d += e;
        }
        let image_dim = self.dims.image_dim;
        let (d_skip, d_mix) = d_fused.split_at(image_dim);
        let d_pre: Vec<f64> = d_mix
            .iter()
            .zip(&trace.fused[image_dim..])
            .map(|(d, y)| d * tanh_grad(*y))
            .collect();
        let joined: Vec<f64> = trace.image_emb.iter().chain(&trace.text_emb).copied().collect();
        let d_joined = self.fusion.backward(&joined, &d_pre, &mut grad.fusion);
        let (d_img, d_txt) = d_joined.split_at(image_dim);
        self.text.backward_sparse(&trace.text_input, d_txt, &mut grad.text);
        let d_img_pre: Vec<f64> = d_img
            .iter()
            .zip(d_skip)
            .zip(&trace.image_emb)
            .map(|((d, k), y)| (d + k) * tanh_grad(*y))
            .collect();
        self.image.linear.backward(&trace.features, &d_img_pre, &mut grad.image.linear);
    }
}

impl Parameters for Backbone {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.image.linear.tensors("backbone.image", &mut out);
        self.text.tensors("backbone.text", &mut out);
        self.fusion.tensors("backbone.fusion", &mut out);
        self.classifier.tensors("backbone.classifier", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.image.linear.tensors_mut(&mut out);
        self.text.tensors_mut(&mut out);
        self.fusion.tensors_mut(&mut out);
        self.classifier.tensors_mut(&mut out);
        out
    }
}

/// Synthetic image features keyed by study id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    rows: BTreeMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, study_id: impl Into<String>, features: Vec<f64>) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::dim("feature record", self.dim, features.len()));
        }
        self.rows.insert(study_id.into(), features);
        Ok(())
    }

    pub fn get(&self, study_id: &str) -> Option<&[f64]> {
        self.rows.get(study_id).map(Vec::as_slice)
    }

    pub fn input(&self, study_id: &str) -> Result<ImageInput> {
        self.get(study_id)
            .map(|f| ImageInput {
                study_id: study_id.to_string(),
                features: f.to_vec(),
            })
            .ok_or_else(|| Error::UnknownId(study_id.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Study ids in sorted order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `study_id<TAB>v1<TAB>...<TAB>v_dim`, one record per line, sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, row) in &self.rows {
            out.push_str(id);
            for v in row {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(source: &str) -> Result<Self> {
        let mut store: Option<FeatureStore> = None;
        for (lineno, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().to_string();
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("features line {}: {e}", lineno + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let s = store.get_or_insert_with(|| FeatureStore::new(values.len()));
            s.insert(id, values)?;
        }
        Ok(store.unwrap_or_default())
    }
}

/// Embeds studies by looking up their features and running an encoder.
pub struct FeatureEmbedder<'a> {
    pub encoder: &'a ImageEncoder,
    pub features: &'a FeatureStore,
}

impl ImageEmbedder for FeatureEmbedder<'_> {
    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn embed(&self, study_id: &str) -> Result<Vec<f64>> {
        let f = self.features.get(study_id).ok_or_else(|| Error::EncoderFailure {
            study_id: study_id.to_string(),
            reason: "no feature record".into(),
        })?;
        self.encoder.encode(f)
    }
}

/// Named flat tensors with shapes; used for encoder checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub tensors: Vec<NamedTensor>,
}

impl EncoderCheckpoint {
    pub fn from_encoder(encoder: &ImageEncoder) -> Self {
        EncoderCheckpoint {
            tensors: encoder.named_tensors(),
        }
    }

    pub fn to_encoder(&self) -> Result<ImageEncoder> {
        let weight = self
            .tensors
            .iter()
            .find(|t| t.name == "image.weight")
            .ok_or_else(|| Error::Parse("encoder checkpoint lacks image.weight".into()))?;
        let [outputs, inputs] = weight.shape[..] else {
            return Err(Error::Parse("image.weight must be 2-D".into()));
        };
        let mut enc = ImageEncoder {
            linear: Linear::zeros(inputs, outputs),
        };
        enc.load_named(&self.tensors)?;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::tests::effusion_template;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> BackboneDims {
        BackboneDims {
            feature_dim: 2,
            image_dim: 2,
            text_buckets: 16,
            text_dim: 2,
            fused_dim: 3,
            answer_dim: 4,
            text_extra: 0,
        }
    }

    #[test]
    fn zero_maps_give_bias_activation() {
        let b = Backbone::zeros(dims());
        let x = ImageInput {
            study_id: "s".into(),
            features: vec![0.0, 0.0],
        };
        assert_eq!(b.encode_image(&x).unwrap(), vec![0.0, 0.0]);
        let s = b.fuse_features(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s.values, vec![0.0; 5]);
        assert_eq!(b.classify(&s).unwrap().values, vec![0.0; 4]);
    }

    #[test]
    fn identity_encoder_is_tanh() {
        let mut b = Backbone::zeros(dims());
        b.image.linear = Linear::eye(2, 2);
        let out = b
            .encode_image(&ImageInput {
                study_id: "s".into(),
                features: vec![1.0, 2.0],
            })
            .unwrap();
        assert_eq!(out, vec![1f64.tanh(), 2f64.tanh()]);
        assert!(b
            .encode_image(&ImageInput {
                study_id: "s".into(),
                features: vec![1.0],
            })
            .is_err());
    }

    /// Hand evaluation: [1,0]+[0,1] through a 4->3 map with W = rows
    /// (1,1,0,0), (0,0,1,-1), (0.5,0,0,0) and bias (0,0,0.25); the image
    /// embedding passes through in front.
    #[test]
    fn fusion_hand_checked() {
        let mut b = Backbone::zeros(dims());
        b.fusion.weight = vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.0, 0.0, 0.0];
        b.fusion.bias = vec![0.0, 0.0, 0.25];
        let s = b.fuse_features(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(s.values, vec![1.0, 0.0, 1f64.tanh(), (-1f64).tanh(), 0.75f64.tanh()]);
    }

    /// Matrix-vector product by hand: identity-like 5->4 head drops the tail.
    #[test]
    fn classifier_pads_identity() {
        let mut b = Backbone::zeros(dims());
        b.classifier = Linear::eye(5, 4);
        let z = b
            .classify(&FusedRepresentation {
                values: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            })
            .unwrap();
        assert_eq!(z.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(b.classify(&FusedRepresentation { values: vec![1.0] }).is_err());
    }

    #[test]
    fn text_encoding_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Backbone::init(dims(), &mut rng);
        let t = effusion_template();
        let q = t.question("heart").unwrap();
        let empty = QuestionContext {
            question_id: "heart".into(),
            history: vec![],
            rendered_text: String::new(),
        };
        assert!(b.text_input(&empty).is_empty());
        assert_eq!(b.encode_text(&empty), b.text.bias);

        let h1 = vec![
            ("lung".to_string(), vec!["lung/no lung abnormality".to_string()]),
            ("effusion".to_string(), vec!["effusion/no pleural effusion".to_string()]),
        ];
        let h2: Vec<_> = h1.iter().rev().cloned().collect();
        let c1 = QuestionContext::new(&t, q, h1.clone());
        assert_eq!(b.encode_text(&c1), b.encode_text(&QuestionContext::new(&t, q, h1)));
        let c2 = QuestionContext::new(&t, q, h2);
        // same unigram and bigram multisets; only the turn-indexed block differs
        assert_ne!(text_histogram(&c1.rendered_text, 1 << 20), text_histogram(&c2.rendered_text, 1 << 20));
        assert_ne!(b.encode_text(&c1), b.encode_text(&c2));
    }

    #[test]
    fn feature_tsv_round_trip() {
        let mut fs = FeatureStore::new(2);
        fs.insert("b", vec![0.1, -3.25e-7]).unwrap();
        fs.insert("a", vec![1.0 / 3.0, 2.0]).unwrap();
        let back = FeatureStore::from_tsv(&fs.to_tsv()).unwrap();
        assert_eq!(back, fs);
        assert!(fs.insert("c", vec![1.0]).is_err());
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Backbone::init(dims(), &mut rng);
        let ck = EncoderCheckpoint::from_encoder(&b.image);
        let json = serde_json::to_string(&ck).unwrap();
        let back: EncoderCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_encoder().unwrap(), b.image);
    }
}
