//! Compares analytic gradients of backbone and head with central finite
//! differences, tensor by tensor.
//!
//! Usage: cargo run --release --example gradient_check -- [seed]

use protokb::head::{loss, loss_and_grad};
use protokb::knowledge_base::{Prototype, PrototypeBank};
use protokb::model::{HeadInit, Model, ModelConfig, Variant};
use protokb::nn::Parameters;
use protokb::template::{AnswerMode, QuestionSpec, Template};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Template::new(
        "g",
        vec![QuestionSpec {
            id: "q".into(),
            level: 1,
            text: "which?".into(),
            mode: AnswerMode::MultiSelect,
            options: (0..5).map(|i| format!("option {i}")).collect(),
            trigger: None,
        }],
    )?;
    let config = ModelConfig {
        feature_dim: 5,
        image_dim: 6,
        text_buckets: 16,
        text_dim: 4,
        fused_dim: 3,
        shared_dim: 4,
        hidden_dim: Some(8),
        temperature: 0.5,
        head_init: HeadInit::Random,
        ..ModelConfig::default()
    };
    let mut m = Model::new(Variant::PrototypeFusion, &config, 5, seed)?;
    // s starts at zero, which would hide the MLP gradient.
    for s in &mut m.head.scale {
        *s = rng.random_range(-1.0..1.0);
    }
    let protos = t
        .options()
        .iter()
        .enumerate()
        .map(|(i, o)| Prototype {
            option_id: o.id.clone(),
            answer_index: i,
            support_count: 1,
            embedding: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            sampled: vec![],
        })
        .collect();
    let bank = PrototypeBank::from_prototypes(6, 5, protos)?;
    let q = &t.questions()[0];
    let features: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let text = vec![(2, 0.5), (9, 0.7)];
    let targets = vec![1.0, 0.0, 0.0, 1.0, 0.0];
    let mask = vec![true; 5];

    let tr = m.forward(&features, text.clone(), q, &bank)?;
    let (_, dz) = loss_and_grad(&tr.z_final, &targets, &mask)?;
    let mut grad = m.zeros_like();
    m.backward(&tr, &bank, &dz, &mut grad);
    let analytic = grad.flat();
    let theta = m.flat();
    let f = |theta: &[f64]| -> f64 {
        let mut mm = m.clone();
        mm.set_flat(theta).unwrap();
        let tr = mm.forward(&features, text.clone(), q, &bank).unwrap();
        loss(&tr.z_final, &targets, &mask).unwrap()
    };

    let mut k = 0;
    for tensor in m.tensors() {
        let mut worst: f64 = 0.0;
        for _ in 0..tensor.values.len() {
            let h = 1e-6;
            let (mut hi, mut lo) = (theta.clone(), theta.clone());
            hi[k] += h;
            lo[k] -= h;
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            worst = worst.max((fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6));
            k += 1;
        }
        println!("{:<24} {:>5} params  max rel err {worst:.2e}", tensor.name, tensor.values.len());
    }
    Ok(())
}
