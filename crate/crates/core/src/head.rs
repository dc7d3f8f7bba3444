//! Knowledge branch: retrieval over the prototype bank, evidence summary,
//! support bias and the scaled residual added to the backbone logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge_base::PrototypeBank;
use crate::nn::{dot, norm, sigmoid, softplus, tanh_grad, Linear, Parameters, TensorRef};
use crate::template::Question;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// How cosines become retrieval weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// softmax(c / τ) over the masked prototypes.
    #[default]
    Softmax,
    /// The cosines themselves; weights need not be positive or sum to one.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// Width of the fused representation S.
    pub query_dim: usize,
    /// Width of a prototype embedding.
    pub proto_dim: usize,
    /// Shared projection width.
    pub shared_dim: usize,
    pub answer_dim: usize,
    pub hidden_dim: usize,
}

impl HeadDims {
    /// Hidden width defaults to twice the answer space.
    pub fn new(query_dim: usize, proto_dim: usize, shared_dim: usize, answer_dim: usize) -> Self {
        HeadDims {
            query_dim,
            proto_dim,
            shared_dim,
            answer_dim,
            hidden_dim: 2 * answer_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionHeadParams {
    pub dims: HeadDims,
    pub proj_query: Linear,
    pub proj_proto: Linear,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
    pub scale: Vec<f64>,
    pub temperature: f64,
    pub weighting: Weighting,
}

impl FusionHeadParams {
    /// Random projections and MLP, zero scale.
    pub fn init<R: Rng + ?Sized>(dims: HeadDims, temperature: f64, rng: &mut R) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(FusionHeadParams {
            dims,
            proj_query: Linear::init(dims.query_dim, dims.shared_dim, rng),
            proj_proto: Linear::init(dims.proto_dim, dims.shared_dim, rng),
            mlp_hidden: Linear::init(dims.proto_dim + dims.answer_dim, dims.hidden_dim, rng),
            mlp_out: Linear::init(dims.hidden_dim, dims.answer_dim, rng),
            scale: vec![0.0; dims.answer_dim],
            temperature,
            weighting: Weighting::Softmax,
        })
    }

    pub fn zeros(dims: HeadDims, temperature: f64) -> Self {
        FusionHeadParams {
            dims,
            proj_query: Linear::zeros(dims.query_dim, dims.shared_dim),
            proj_proto: Linear::zeros(dims.proto_dim, dims.shared_dim),
            mlp_hidden: Linear::zeros(dims.proto_dim + dims.answer_dim, dims.hidden_dim),
            mlp_out: Linear::zeros(dims.hidden_dim, dims.answer_dim),
            scale: vec![0.0; dims.answer_dim],
            temperature,
            weighting: Weighting::Softmax,
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {t}")))
    }
}

impl Parameters for FusionHeadParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.proj_query.tensors("head.proj_query", &mut out);
        self.proj_proto.tensors("head.proj_proto", &mut out);
        self.mlp_hidden.tensors("head.mlp_hidden", &mut out);
        self.mlp_out.tensors("head.mlp_out", &mut out);
        out.push(TensorRef {
            name: "head.scale".into(),
            shape: vec![self.scale.len()],
            values: &self.scale,
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.proj_query.tensors_mut(&mut out);
        self.proj_proto.tensors_mut(&mut out);
        self.mlp_hidden.tensors_mut(&mut out);
        self.mlp_out.tensors_mut(&mut out);
        out.push(&mut self.scale);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalWeights {
    /// Bank prototype indices.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RetrievalWeights {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceSummary {
    pub v: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedLogits {
    pub values: Vec<f64>,
}

/// Bank indices of prototypes whose option belongs to `question`.
pub fn valid_mask(question: &Question, bank: &PrototypeBank) -> Vec<usize> {
    bank.prototypes()
        .iter()
        .enumerate()
        .filter(|(_, p)| question.option_ids.contains(&p.option_id))
        .map(|(i, _)| i)
        .collect()
}

/// Cosine with the zero-vector convention cos = 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Numerically stable softmax of `c / τ`.
pub fn softmax(c: &[f64], temperature: f64) -> Vec<f64> {
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = c.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

/// Everything the backward pass needs from a non-empty retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    pub query: Vec<f64>,
    pub projected_query: Vec<f64>,
    pub projected_protos: Vec<Vec<f64>>,
    pub cosines: Vec<f64>,
    pub weights: RetrievalWeights,
    pub summary: EvidenceSummary,
    pub hidden: Vec<f64>,
    pub b_sup: Vec<f64>,
}

fn check_mask(mask: &[usize], bank: &PrototypeBank) -> Result<()> {
    match mask.iter().find(|&&i| i >= bank.len()) {
        Some(&i) => Err(Error::UnknownId(format!("bank index {i}"))),
        None => Ok(()),
    }
}

fn retrieval_parts(
    s: &[f64],
    bank: &PrototypeBank,
    mask: &[usize],
    params: &FusionHeadParams,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    check_mask(mask, bank)?;
    if bank.dim != params.dims.proto_dim {
        return Err(Error::dim("prototype width", params.dims.proto_dim, bank.dim));
    }
    let q = params.proj_query.forward(s)?;
    let protos = bank.prototypes();
    let projected: Vec<Vec<f64>> = mask
        .iter()
        .map(|&i| params.proj_proto.apply(&protos[i].embedding))
        .collect();
    let cosines: Vec<f64> = projected.iter().map(|p| cosine(&q, p)).collect();
    let weights = match params.weighting {
        Weighting::Softmax => softmax(&cosines, params.temperature),
        Weighting::Raw => cosines.clone(),
    };
    Ok((q, projected, cosines, weights))
}

pub fn retrieve(
    s: &[f64],
    bank: &PrototypeBank,
    mask: &[usize],
    params: &FusionHeadParams,
) -> Result<RetrievalWeights> {
    if mask.is_empty() {
        return Ok(RetrievalWeights {
            indices: Vec::new(),
            weights: Vec::new(),
        });
    }
    let (_, _, _, weights) = retrieval_parts(s, bank, mask, params)?;
    Ok(RetrievalWeights {
        indices: mask.to_vec(),
        weights,
    })
}

pub fn summarize(alpha: &RetrievalWeights, bank: &PrototypeBank) -> Result<EvidenceSummary> {
    check_mask(&alpha.indices, bank)?;
    let mut v = vec![0.0; bank.dim];
    let mut u = vec![0.0; bank.answer_dim];
    for (&i, &a) in alpha.indices.iter().zip(&alpha.weights) {
        let p = &bank.prototypes()[i];
        for (vj, pj) in v.iter_mut().zip(&p.embedding) {
            *vj += a * pj;
        }
        u[p.answer_index] += a;
    }
    Ok(EvidenceSummary { v, u })
}

fn mlp_forward(summary: &EvidenceSummary, params: &FusionHeadParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let input: Vec<f64> = summary.v.iter().chain(&summary.u).copied().collect();
    let hidden: Vec<f64> = params
        .mlp_hidden
        .forward(&input)?
        .into_iter()
        .map(f64::tanh)
        .collect();
    let out = params.mlp_out.apply(&hidden);
    Ok((hidden, out))
}

/// `MLP([v; u])`, or zeros when there is no evidence.
pub fn support_bias(summary: Option<&EvidenceSummary>, params: &FusionHeadParams) -> Result<Vec<f64>> {
    match summary {
        None => Ok(vec![0.0; params.dims.answer_dim]),
        Some(s) => Ok(mlp_forward(s, params)?.1),
    }
}

/// `z_base + s ⊙ b_sup`. Positions where the product is zero keep the base
/// logit bit for bit.
pub fn fuse(z_base: &[f64], b_sup: &[f64], params: &FusionHeadParams) -> Result<FusedLogits> {
    if z_base.len() != params.scale.len() {
        return Err(Error::dim("base logits", params.scale.len(), z_base.len()));
    }
    if b_sup.len() != params.scale.len() {
        return Err(Error::dim("support bias", params.scale.len(), b_sup.len()));
    }
    let values = z_base
        .iter()
        .zip(b_sup)
        .zip(&params.scale)
        .map(|((&z, &b), &s)| {
            let r = s * b;
            if r == 0.0 {
                z
            } else {
                z + r
            }
        })
        .collect();
    Ok(FusedLogits { values })
}

/// Runs retrieval through the support bias. `None` when the mask is empty.
pub fn head_forward(
    s: &[f64],
    bank: &PrototypeBank,
    mask: &[usize],
    params: &FusionHeadParams,
) -> Result<Option<HeadTrace>> {
    if mask.is_empty() {
        return Ok(None);
    }
    let (projected_query, projected_protos, cosines, weights) = retrieval_parts(s, bank, mask, params)?;
    let weights = RetrievalWeights {
        indices: mask.to_vec(),
        weights,
    };
    let summary = summarize(&weights, bank)?;
    let (hidden, b_sup) = mlp_forward(&summary, params)?;
    Ok(Some(HeadTrace {
        query: s.to_vec(),
        projected_query,
        projected_protos,
        cosines,
        weights,
        summary,
        hidden,
        b_sup,
    }))
}

/// Backpropagates dL/dz_final through the knowledge branch. Accumulates
/// head gradients into `grad` and returns dL/dS.
pub fn head_backward(
    trace: &HeadTrace,
    bank: &PrototypeBank,
    params: &FusionHeadParams,
    dz: &[f64],
    grad: &mut FusionHeadParams,
) -> Vec<f64> {
    let mut db = vec![0.0; dz.len()];
    for i in 0..dz.len() {
        grad.scale[i] += dz[i] * trace.b_sup[i];
        db[i] = dz[i] * params.scale[i];
    }
    let dh = params.mlp_out.backward(&trace.hidden, &db, &mut grad.mlp_out);
    let dpre: Vec<f64> = dh.iter().zip(&trace.hidden).map(|(d, h)| d * tanh_grad(*h)).collect();
    let input: Vec<f64> = trace.summary.v.iter().chain(&trace.summary.u).copied().collect();
    let dinput = params.mlp_hidden.backward(&input, &dpre, &mut grad.mlp_hidden);
    let (dv, du) = dinput.split_at(params.dims.proto_dim);

    let protos = bank.prototypes();
    let dalpha: Vec<f64> = trace
        .weights
        .indices
        .iter()
        .map(|&i| dot(dv, &protos[i].embedding) + du[protos[i].answer_index])
        .collect();
    let dc: Vec<f64> = match params.weighting {
        Weighting::Softmax => {
            let alpha = &trace.weights.weights;
            let mean = dot(alpha, &dalpha);
            alpha
                .iter()
                .zip(&dalpha)
                .map(|(a, d)| a * (d - mean) / params.temperature)
                .collect()
        }
        Weighting::Raw => dalpha,
    };

    let q = &trace.projected_query;
    let nq = norm(q);
    let mut dq = vec![0.0; q.len()];
    for (k, &i) in trace.weights.indices.iter().enumerate() {
        let p = &trace.projected_protos[k];
        let np = norm(p);
        if nq == 0.0 || np == 0.0 || dc[k] == 0.0 {
            continue;
        }
        let c = trace.cosines[k];
        let inv = 1.0 / (nq * np);
        let dp: Vec<f64> = (0..p.len())
            .map(|j| {
                dq[j] += dc[k] * (p[j] * inv - c * q[j] / (nq * nq));
                dc[k] * (q[j] * inv - c * p[j] / (np * np))
            })
            .collect();
        params
            .proj_proto
            .backward(&protos[i].embedding, &dp, &mut grad.proj_proto);
    }
    params.proj_query.backward(&trace.query, &dq, &mut grad.proj_query)
}

/// Mean binary cross-entropy with logits over masked positions.
pub fn loss(z: &[f64], targets: &[f64], mask: &[bool]) -> Result<f64> {
    Ok(loss_and_grad(z, targets, mask)?.0)
}

/// Loss and dL/dz (zero off the mask).
pub fn loss_and_grad(z: &[f64], targets: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if targets.len() != z.len() {
        return Err(Error::dim("loss targets", z.len(), targets.len()));
    }
    if mask.len() != z.len() {
        return Err(Error::dim("loss mask", z.len(), mask.len()));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; z.len()];
    for i in 0..z.len() {
        if mask[i] {
            total += softplus(z[i]) - targets[i] * z[i];
            grad[i] = (sigmoid(z[i]) - targets[i]) / nf;
        }
    }
    Ok((total / nf, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge_base::Prototype;
    use crate::template::{AnswerMode, Question};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proto(option: &str, index: usize, embedding: Vec<f64>) -> Prototype {
        Prototype {
            option_id: option.into(),
            answer_index: index,
            support_count: 1,
            embedding,
            sampled: vec!["s".into()],
        }
    }

    fn question(options: &[&str]) -> Question {
        Question {
            id: "q".into(),
            level: 1,
            text: "q".into(),
            mode: AnswerMode::MultiSelect,
            option_ids: options.iter().map(|s| s.to_string()).collect(),
            trigger: None,
        }
    }

    #[test]
    fn mask_examples() {
        let bank = PrototypeBank::from_prototypes(
            2,
            5,
            vec![proto("q/a", 0, vec![1.0, 0.0]), proto("q/b", 1, vec![0.0, 1.0]), proto("r/x", 4, vec![1.0, 1.0])],
        )
        .unwrap();
        assert!(valid_mask(&question(&["z/z"]), &bank).is_empty());
        // linear-scan oracle
        let q = question(&["q/a", "q/b", "q/c"]);
        let expected: Vec<usize> = (0..bank.len())
            .filter(|&i| q.option_ids.contains(&bank.prototypes()[i].option_id))
            .collect();
        assert_eq!(valid_mask(&q, &bank), expected);
        assert_eq!(expected.len(), 2);
    }

    #[test]
    fn softmax_oracle() {
        let w = softmax(&[0.8, 0.4], 0.1);
        let (a, b) = (8f64.exp(), 4f64.exp());
        assert!((w[0] - a / (a + b)).abs() < 1e-15);
        assert!((w[1] - b / (a + b)).abs() < 1e-15);
        assert_eq!(softmax(&[0.3], 0.1), vec![1.0]);
    }

    #[test]
    fn cosine_zero_vector() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn summary_examples() {
        let bank = PrototypeBank::from_prototypes(
            2,
            3,
            vec![proto("q/a", 0, vec![1.0, 4.0]), proto("q/b", 2, vec![3.0, 0.0]), proto("q/c", 1, vec![-1.0, 2.0])],
        )
        .unwrap();
        let one = summarize(&RetrievalWeights { indices: vec![1], weights: vec![1.0] }, &bank).unwrap();
        assert_eq!(one.u, vec![0.0, 0.0, 1.0]);
        assert_eq!(one.v, vec![3.0, 0.0]);
        let half = summarize(&RetrievalWeights { indices: vec![0, 1], weights: vec![0.5, 0.5] }, &bank).unwrap();
        assert_eq!(half.v, vec![2.0, 2.0]);
        assert_eq!(half.u, vec![0.5, 0.0, 0.5]);
        let alpha = softmax(&[0.2, -0.1, 0.7], 0.1);
        let three = summarize(&RetrievalWeights { indices: vec![0, 1, 2], weights: alpha.clone() }, &bank).unwrap();
        let mut v = [0.0; 2];
        let mut u = [0.0; 3];
        for (k, p) in bank.prototypes().iter().enumerate() {
            for j in 0..2 {
                v[j] += alpha[k] * p.embedding[j];
            }
            u[p.answer_index] += alpha[k];
        }
        for j in 0..2 {
            assert!((three.v[j] - v[j]).abs() < 1e-14);
        }
        for j in 0..3 {
            assert!((three.u[j] - u[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn support_bias_examples() {
        let dims = HeadDims {
            query_dim: 2,
            proto_dim: 1,
            shared_dim: 2,
            answer_dim: 2,
            hidden_dim: 2,
        };
        let mut params = FusionHeadParams::zeros(dims, 0.1);
        let summary = EvidenceSummary { v: vec![0.5], u: vec![1.0, 0.0] };
        assert_eq!(support_bias(None, &params).unwrap(), vec![0.0, 0.0]);
        assert_eq!(support_bias(Some(&summary), &params).unwrap(), vec![0.0, 0.0]);

        params.mlp_hidden.weight = vec![1.0, 2.0, 0.0, -1.0, 0.0, 1.0];
        params.mlp_hidden.bias = vec![0.0, 0.5];
        params.mlp_out.weight = vec![1.0, 0.0, 2.0, -1.0];
        params.mlp_out.bias = vec![0.1, 0.0];
        // hand evaluation: pre = [0.5 + 2, -0.5 + 0.5] = [2.5, 0]; h = [tanh 2.5, 0]
        let h0 = 2.5f64.tanh();
        let b = support_bias(Some(&summary), &params).unwrap();
        assert!((b[0] - (h0 + 0.1)).abs() < 1e-15);
        assert!((b[1] - 2.0 * h0).abs() < 1e-15);
        let bad = EvidenceSummary { v: vec![0.5, 1.0], u: vec![1.0, 0.0] };
        assert!(matches!(support_bias(Some(&bad), &params), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn fuse_examples() {
        let dims = HeadDims::new(1, 1, 1, 2);
        let mut params = FusionHeadParams::zeros(dims, 0.1);
        let z = [1.0, -1.0];
        assert_eq!(fuse(&z, &[3.0, 4.0], &params).unwrap().values, z);
        params.scale = vec![0.5, 2.0];
        assert_eq!(fuse(&z, &[0.0, 0.0], &params).unwrap().values, z);
        assert_eq!(fuse(&z, &[2.0, 1.0], &params).unwrap().values, vec![2.0, 1.0]);
        assert_eq!(fuse(&[-0.0, 1.0], &[0.0, 0.0], &params).unwrap().values[0].to_bits(), (-0.0f64).to_bits());
        assert!(fuse(&z, &[1.0], &params).is_err());
    }

    #[test]
    fn loss_examples() {
        let mask = [true, true, false];
        let l = loss(&[0.0, 0.0, 9.0], &[1.0, 0.0, 1.0], &mask).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = loss(&[60.0, -60.0, 0.0], &[1.0, 0.0, 0.0], &mask).unwrap();
        assert!(l < 1e-20);
        // scalar oracle: -[y ln σ(z) + (1-y) ln(1-σ(z))]
        let z = [0.3, -1.2, 2.0];
        let y = [1.0, 0.0, 0.0];
        let bce = |z: f64, y: f64| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        };
        let expected = (0..3).map(|i| bce(z[i], y[i])).sum::<f64>() / 3.0;
        assert!((loss(&z, &y, &[true; 3]).unwrap() - expected).abs() < 1e-14);
        assert!(matches!(loss(&z, &y, &[false; 3]), Err(Error::EmptyMask)));
    }

    #[test]
    fn zero_scale_blocks_mlp_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = HeadDims::new(3, 2, 2, 3);
        let params = FusionHeadParams::init(dims, 0.1, &mut rng).unwrap();
        let bank = PrototypeBank::from_prototypes(2, 3, vec![proto("q/a", 0, vec![1.0, -0.5]), proto("q/b", 1, vec![0.2, 0.9])]).unwrap();
        let trace = head_forward(&[0.4, -0.3, 1.0], &bank, &[0, 1], &params).unwrap().unwrap();
        let mut grad = FusionHeadParams::zeros(dims, 0.1);
        let ds = head_backward(&trace, &bank, &params, &[0.3, -0.2, 0.0], &mut grad);
        assert!(grad.mlp_out.weight.iter().chain(&grad.mlp_hidden.weight).all(|g| *g == 0.0));
        assert!(grad.scale.iter().any(|g| *g != 0.0));
        assert!(ds.iter().all(|g| *g == 0.0));
    }
}
