//! Prototype bank: one max-pooled image embedding per covered answer option.
//!
//! Members of each option's example pool are sampled with a generator seeded
//! from `(global seed, option id)`, so a refresh re-embeds exactly the studies
//! picked at build time. Banks are immutable; a training loop installs a
//! refreshed bank through [`BankSnapshot`].

use std::fmt::Write as _;
use std::sync::{Arc, RwLock};

use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::stable_hash;
use crate::error::{Error, Result};
use crate::extraction::ExamplePools;
use crate::nn::Parameters;
use crate::template::Template;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_EMA_DECAY: f64 = 0.999;
pub const DEFAULT_REFRESH_EVERY: u64 = 10_000;

/// Produces the embedding of a study's image.
pub trait ImageEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, study_id: &str) -> Result<Vec<f64>>;
}

/// Element-wise maximum over a non-empty list of equal-length vectors.
pub fn aggregate_maxpool<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<Vec<f64>> {
    let (first, rest) = embeddings
        .split_first()
        .ok_or(Error::EmptyInput("max-pool over zero embeddings"))?;
    let mut out = first.as_ref().to_vec();
    for e in rest {
        let e = e.as_ref();
        if e.len() != out.len() {
            return Err(Error::dim("max-pool input", out.len(), e.len()));
        }
        for (o, v) in out.iter_mut().zip(e) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub option_id: String,
    /// Position of the option in the global answer space (the one-hot index).
    #[serde(skip)]
    pub answer_index: usize,
    pub support_count: usize,
    pub embedding: Vec<f64>,
    /// Study ids whose embeddings were pooled.
    pub sampled: Vec<String>,
}

impl Prototype {
    pub fn answer_onehot(&self, answer_dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; answer_dim];
        v[self.answer_index] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankHeader {
    pub dim: usize,
    pub answer_dim: usize,
    pub built_at_step: u64,
    pub seed: u64,
    pub k: usize,
    pub prototypes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub dim: usize,
    pub answer_dim: usize,
    pub built_at_step: u64,
    pub seed: u64,
    pub k: usize,
    /// Sorted by option id; at most one per option.
    prototypes: Vec<Prototype>,
}

impl PrototypeBank {
    pub fn empty(dim: usize, answer_dim: usize) -> Self {
        PrototypeBank {
            dim,
            answer_dim,
            built_at_step: 0,
            seed: 0,
            k: DEFAULT_K,
            prototypes: Vec::new(),
        }
    }

    /// Assembles a bank, checking widths, answer indices and uniqueness.
    pub fn from_prototypes(
        dim: usize,
        answer_dim: usize,
        mut prototypes: Vec<Prototype>,
    ) -> Result<Self> {
        prototypes.sort_by(|a, b| a.option_id.cmp(&b.option_id));
        for w in prototypes.windows(2) {
            if w[0].option_id == w[1].option_id {
                return Err(Error::Validation {
                    message: "two prototypes for one option".into(),
                    ids: vec![w[0].option_id.clone()],
                });
            }
        }
        for p in &prototypes {
            if p.embedding.len() != dim {
                return Err(Error::dim("prototype embedding", dim, p.embedding.len()));
            }
            if p.answer_index >= answer_dim {
                return Err(Error::dim("prototype answer index", answer_dim, p.answer_index));
            }
        }
        Ok(PrototypeBank {
            dim,
            answer_dim,
            built_at_step: 0,
            seed: 0,
            k: DEFAULT_K,
            prototypes,
        })
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, option_id: &str) -> Option<&Prototype> {
        self.prototypes
            .binary_search_by(|p| p.option_id.as_str().cmp(option_id))
            .ok()
            .map(|i| &self.prototypes[i])
    }

    pub fn header(&self) -> BankHeader {
        BankHeader {
            dim: self.dim,
            answer_dim: self.answer_dim,
            built_at_step: self.built_at_step,
            seed: self.seed,
            k: self.k,
            prototypes: self.prototypes.len(),
        }
    }

    /// Same options and bookkeeping, embeddings replaced by standard normal
    /// noise seeded per option.
    pub fn randomized(&self, seed: u64) -> Self {
        let mut out = self.clone();
        for p in &mut out.prototypes {
            let mut rng = option_rng(seed ^ 0x05ee_d0fa_015e, &p.option_id);
            for v in &mut p.embedding {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        out
    }

    /// JSON Lines: a header object, then one record per prototype ordered by
    /// option id. Floats use shortest round-trip formatting.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header()).expect("header serializes");
        out.push('\n');
        for p in &self.prototypes {
            out.push_str(&serde_json::to_string(p).expect("prototype serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(source: &str, template: &Template) -> Result<Self> {
        let mut lines = source.lines().filter(|l| !l.trim().is_empty());
        let header: BankHeader = serde_json::from_str(
            lines.next().ok_or_else(|| Error::Parse("bank file is empty".into()))?,
        )?;
        if header.answer_dim != template.answer_dim() {
            return Err(Error::dim("bank answer_dim", template.answer_dim(), header.answer_dim));
        }
        let mut prototypes = Vec::with_capacity(header.prototypes);
        for line in lines {
            let mut p: Prototype = serde_json::from_str(line)?;
            p.answer_index = template
                .option_position(&p.option_id)
                .ok_or_else(|| Error::UnknownId(p.option_id.clone()))?;
            if p.support_count == 0 {
                return Err(Error::Parse(format!("prototype `{}` has zero support", p.option_id)));
            }
            prototypes.push(p);
        }
        if prototypes.len() != header.prototypes {
            return Err(Error::dim("bank prototype records", header.prototypes, prototypes.len()));
        }
        let mut bank = PrototypeBank::from_prototypes(header.dim, header.answer_dim, prototypes)?;
        bank.built_at_step = header.built_at_step;
        bank.seed = header.seed;
        bank.k = header.k;
        Ok(bank)
    }
}

fn option_rng(seed: u64, option_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), option_id.as_bytes()]))
}

/// Uniform sample without replacement of min(k, |pool|) members, returned
/// in pool order. Depends only on (seed, option id, pool, k).
pub fn sample_members(pool: &[String], option_id: &str, k: usize, seed: u64) -> Vec<String> {
    let take = k.min(pool.len());
    let mut rng = option_rng(seed, option_id);
    let mut picks = index::sample(&mut rng, pool.len(), take).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| pool[i].clone()).collect()
}

fn embed_members(option_id: &str, members: &[String], encoder: &dyn ImageEmbedder) -> Result<Option<(Vec<f64>, Vec<String>)>> {
    let mut embeddings = Vec::with_capacity(members.len());
    let mut used = Vec::with_capacity(members.len());
    for sid in members {
        match encoder.embed(sid) {
            Ok(e) if e.len() == encoder.dim() => {
                embeddings.push(e);
                used.push(sid.clone());
            }
            Ok(e) => return Err(Error::dim("encoder output", encoder.dim(), e.len())),
            Err(err) => warn!("{option_id}: skipping study {sid}: {err}"),
        }
    }
    if embeddings.is_empty() {
        return Ok(None);
    }
    Ok(Some((aggregate_maxpool(&embeddings)?, used)))
}

/// Builds one prototype per non-empty pool.
pub fn build_bank(
    pools: &ExamplePools,
    template: &Template,
    encoder: &dyn ImageEmbedder,
    k: usize,
    seed: u64,
) -> Result<PrototypeBank> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let candidates: Vec<(&String, &Vec<String>)> = pools.iter().filter(|(_, p)| !p.is_empty()).collect();
    let built: Vec<Option<Prototype>> = candidates
        .par_iter()
        .map(|(oid, pool)| {
            let answer_index = template
                .option_position(oid)
                .ok_or_else(|| Error::UnknownId(oid.to_string()))?;
            let members = sample_members(pool, oid, k, seed);
            Ok(embed_members(oid, &members, encoder)?.map(|(embedding, used)| Prototype {
                option_id: oid.to_string(),
                answer_index,
                support_count: used.len(),
                embedding,
                sampled: used,
            }))
        })
        .collect::<Result<_>>()?;
    let mut prototypes = Vec::with_capacity(built.len());
    for ((oid, _), p) in candidates.iter().zip(built) {
        match p {
            Some(p) => prototypes.push(p),
            None => warn!("{oid}: every sampled study failed to embed; no prototype"),
        }
    }
    let mut bank = PrototypeBank::from_prototypes(encoder.dim(), template.answer_dim(), prototypes)?;
    bank.seed = seed;
    bank.k = k;
    Ok(bank)
}

/// Re-embeds the bank's sampled members with `encoder` (typically the EMA
/// copy). The option set, answer rows and support counts never change; an
/// option whose members cannot all be re-embedded keeps its old vector.
pub fn refresh_bank(
    bank: &PrototypeBank,
    pools: &ExamplePools,
    encoder: &dyn ImageEmbedder,
    step: u64,
) -> Result<PrototypeBank> {
    if encoder.dim() != bank.dim {
        return Err(Error::dim("refresh encoder width", bank.dim, encoder.dim()));
    }
    let refreshed: Vec<Prototype> = bank
        .prototypes
        .par_iter()
        .map(|p| {
            let members = sample_members(pools.get(&p.option_id), &p.option_id, bank.k, bank.seed);
            if members != p.sampled {
                warn!("{}: pool changed since build; keeping built members", p.option_id);
            }
            let mut next = p.clone();
            match embed_members(&p.option_id, &p.sampled, encoder)? {
                Some((embedding, used)) if used.len() == p.sampled.len() => next.embedding = embedding,
                _ => warn!("{}: refresh failed for some members; keeping old prototype", p.option_id),
            }
            Ok(next)
        })
        .collect::<Result<_>>()?;
    Ok(PrototypeBank {
        prototypes: refreshed,
        built_at_step: step,
        ..bank.clone()
    })
}

/// Exponential-moving-average copy of encoder parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaEncoderState {
    pub parameters: Vec<f64>,
    pub decay: f64,
}

impl EmaEncoderState {
    pub fn new<P: Parameters + ?Sized>(live: &P, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(EmaEncoderState {
            parameters: live.flat(),
            decay,
        })
    }
}

/// `new = m * old + (1 - m) * live`, element-wise.
pub fn ema_update(live: &[f64], state: &EmaEncoderState) -> Result<EmaEncoderState> {
    if live.len() != state.parameters.len() {
        return Err(Error::dim("EMA parameters", state.parameters.len(), live.len()));
    }
    let m = state.decay;
    Ok(EmaEncoderState {
        parameters: state
            .parameters
            .iter()
            .zip(live)
            .map(|(old, new)| m * old + (1.0 - m) * new)
            .collect(),
        decay: m,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCoverage {
    pub level: u8,
    pub covered: usize,
    pub total: usize,
    pub fraction: f64,
    /// Whole percent, truncated toward zero.
    pub percent: u32,
}

/// Options per level that have a prototype.
pub fn kb_coverage(bank: &PrototypeBank, template: &Template) -> Vec<LevelCoverage> {
    (1..=3u8)
        .map(|level| {
            let opts: Vec<usize> = (0..template.answer_dim())
                .filter(|&i| template.option_level(i) == level)
                .collect();
            let covered = opts
                .iter()
                .filter(|&&i| bank.get(&template.options()[i].id).is_some())
                .count();
            let total = opts.len();
            LevelCoverage {
                level,
                covered,
                total,
                fraction: if total == 0 { 0.0 } else { covered as f64 / total as f64 },
                percent: (covered * 100).checked_div(total).unwrap_or(0) as u32,
            }
        })
        .collect()
}

pub fn coverage_table(rows: &[LevelCoverage]) -> String {
    let mut out = String::from("Level\tTotal categories\tCovered categories\tCoverage\n");
    for r in rows {
        let _ = writeln!(out, "L{}\t{}\t{}\t{}%", r.level, r.total, r.covered, r.percent);
    }
    out
}

/// Shared handle to the current bank. Readers clone the `Arc`; a refresh
/// swaps in a complete new bank, so no reader sees a partial update.
#[derive(Debug)]
pub struct BankSnapshot {
    current: RwLock<Arc<PrototypeBank>>,
}

impl BankSnapshot {
    pub fn new(bank: PrototypeBank) -> Self {
        BankSnapshot {
            current: RwLock::new(Arc::new(bank)),
        }
    }

    pub fn load(&self) -> Arc<PrototypeBank> {
        self.current.read().expect("bank lock poisoned").clone()
    }

    pub fn swap(&self, bank: PrototypeBank) -> Arc<PrototypeBank> {
        std::mem::replace(&mut *self.current.write().expect("bank lock poisoned"), Arc::new(bank))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::tests::effusion_template;
    use std::collections::HashMap;

    /// Embeds study `sN` as the constant vector [N, -N, N * scale].
    struct Fixed {
        scale: f64,
        broken: Vec<&'static str>,
    }

    impl ImageEmbedder for Fixed {
        fn dim(&self) -> usize {
            3
        }

        fn embed(&self, id: &str) -> Result<Vec<f64>> {
            if self.broken.contains(&id) {
                return Err(Error::EncoderFailure {
                    study_id: id.into(),
                    reason: "corrupt".into(),
                });
            }
            let n: f64 = id[1..].parse().unwrap();
            Ok(vec![n, -n, n * self.scale])
        }
    }

    fn pools(sizes: &[(&str, usize)]) -> ExamplePools {
        let mut p = ExamplePools::default();
        for (oid, n) in sizes {
            p.insert(*oid, (0..*n).map(|i| format!("s{i}")).collect());
        }
        p
    }

    #[test]
    fn maxpool_examples() {
        assert_eq!(aggregate_maxpool(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(aggregate_maxpool(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap(), vec![3.0, 5.0]);
        assert!(matches!(aggregate_maxpool::<Vec<f64>>(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            aggregate_maxpool(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bank_sampling_respects_k() {
        let t = effusion_template();
        let enc = Fixed { scale: 1.0, broken: vec![] };
        let p = pools(&[("heart/cardiomegaly", 7), ("side/left", 2), ("side/right", 0)]);
        let bank = build_bank(&p, &t, &enc, 5, 11).unwrap();
        assert_eq!(bank.len(), 2);
        let cm = bank.get("heart/cardiomegaly").unwrap();
        assert_eq!(cm.support_count, 5);
        assert_eq!(cm.sampled.len(), 5);
        assert_eq!(bank.get("side/left").unwrap().support_count, 2);
        assert!(bank.get("side/right").is_none());
        let onehot = cm.answer_onehot(bank.answer_dim);
        assert_eq!(onehot.iter().sum::<f64>(), 1.0);
        assert_eq!(onehot[t.option_position("heart/cardiomegaly").unwrap()], 1.0);
    }

    #[test]
    fn empty_pools_give_empty_bank() {
        let t = effusion_template();
        let bank = build_bank(&ExamplePools::default(), &t, &Fixed { scale: 1.0, broken: vec![] }, 5, 0).unwrap();
        assert!(bank.is_empty());
    }

    /// Oracle: build twice and compare the serialized bytes.
    #[test]
    fn same_seed_same_bytes() {
        let t = effusion_template();
        let enc = Fixed { scale: 0.5, broken: vec![] };
        let p = pools(&[("heart/cardiomegaly", 40), ("side/left", 9)]);
        let a = build_bank(&p, &t, &enc, 5, 3).unwrap().to_jsonl();
        let b = build_bank(&p, &t, &enc, 5, 3).unwrap().to_jsonl();
        assert_eq!(a, b);
        let c = build_bank(&p, &t, &enc, 5, 4).unwrap().to_jsonl();
        assert_ne!(a, c);
        let back = PrototypeBank::from_jsonl(&a, &t).unwrap();
        assert_eq!(back.to_jsonl(), a);
    }

    #[test]
    fn failed_studies_are_skipped() {
        let t = effusion_template();
        let p = pools(&[("side/left", 2), ("side/right", 1)]);
        let enc = Fixed { scale: 1.0, broken: vec!["s0"] };
        let bank = build_bank(&p, &t, &enc, 5, 0).unwrap();
        assert_eq!(bank.get("side/left").unwrap().support_count, 1);
        assert!(bank.get("side/right").is_none());
    }

    #[test]
    fn ema_examples() {
        let s = EmaEncoderState {
            parameters: vec![0.5, -1.0],
            decay: 1.0,
        };
        assert_eq!(ema_update(&[3.0, 4.0], &s).unwrap().parameters, vec![0.5, -1.0]);
        let s = EmaEncoderState { decay: 0.0, ..s };
        assert_eq!(ema_update(&[3.0, 4.0], &s).unwrap().parameters, vec![3.0, 4.0]);
        let s = EmaEncoderState {
            parameters: vec![0.0; 4],
            decay: 0.999,
        };
        let out = ema_update(&[1.0; 4], &s).unwrap();
        // direct evaluation: 0.999 * 0 + (1 - 0.999) * 1
        for v in out.parameters {
            assert!((v - 0.001).abs() < 1e-15);
        }
        assert!(ema_update(&[1.0], &s).is_err());
    }

    #[test]
    fn refresh_semantics() {
        let t = effusion_template();
        let p = pools(&[("heart/cardiomegaly", 12), ("side/left", 3)]);
        let enc = Fixed { scale: 1.0, broken: vec![] };
        let bank = build_bank(&p, &t, &enc, 5, 8).unwrap();

        let same = refresh_bank(&bank, &p, &enc, 10_000).unwrap();
        assert_eq!(same.built_at_step, 10_000);
        assert_eq!(same.prototypes(), bank.prototypes());
        assert_eq!(refresh_bank(&bank, &p, &enc, 10_000).unwrap(), same);

        let other = Fixed { scale: -2.0, broken: vec![] };
        let moved = refresh_bank(&bank, &p, &other, 20_000).unwrap();
        assert_eq!(moved.len(), bank.len());
        for (a, b) in moved.prototypes().iter().zip(bank.prototypes()) {
            assert_eq!((&a.option_id, a.support_count, &a.sampled), (&b.option_id, b.support_count, &b.sampled));
        }
        assert_ne!(moved.prototypes(), bank.prototypes());
    }

    #[test]
    fn coverage_truncates_to_whole_percent() {
        let t = effusion_template();
        let p = pools(&[("heart/cardiomegaly", 1), ("lung/lung abnormality", 1), ("side/left", 1)]);
        let bank = build_bank(&p, &t, &Fixed { scale: 1.0, broken: vec![] }, 5, 0).unwrap();
        let cov = kb_coverage(&bank, &t);
        assert_eq!((cov[0].covered, cov[0].total, cov[0].percent), (2, 4, 50));
        assert_eq!((cov[1].covered, cov[1].total, cov[1].percent), (0, 2, 0));
        assert_eq!((cov[2].covered, cov[2].total, cov[2].percent), (1, 4, 25));
        let table = coverage_table(&cov);
        assert!(table.contains("L1\t4\t2\t50%"));
    }

    #[test]
    fn randomized_bank_keeps_bookkeeping() {
        let t = effusion_template();
        let p = pools(&[("heart/cardiomegaly", 4), ("side/left", 3)]);
        let bank = build_bank(&p, &t, &Fixed { scale: 1.0, broken: vec![] }, 5, 1).unwrap();
        let r = bank.randomized(9);
        assert_eq!(r.len(), bank.len());
        assert_eq!(r, bank.randomized(9));
        let mut seen = HashMap::new();
        for (a, b) in r.prototypes().iter().zip(bank.prototypes()) {
            assert_eq!(a.option_id, b.option_id);
            assert_ne!(a.embedding, b.embedding);
            seen.insert(a.option_id.clone(), a.embedding.clone());
        }
    }

    #[test]
    fn snapshot_swap_is_whole_bank() {
        let snap = BankSnapshot::new(PrototypeBank::empty(3, 4));
        let held = snap.load();
        let mut next = PrototypeBank::empty(3, 4);
        next.built_at_step = 7;
        snap.swap(next);
        assert_eq!(held.built_at_step, 0);
        assert_eq!(snap.load().built_at_step, 7);
    }
}
