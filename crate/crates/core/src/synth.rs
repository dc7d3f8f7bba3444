//! Seeded synthetic world: a three-level template, a terminology lexicon,
//! sentence-list reports and image features with planted label directions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{stable_hash, FeatureStore};
use crate::error::{Error, Result};
use crate::extraction::{write_corpus, FreeTextStudy};
use crate::template::{
    serialize_template, traversal_order, write_reports, AnswerMode, QuestionSpec, StructuredReport, Template,
    TriggerSpec,
};
use crate::terminology::{expand_terminology, SeedListExpander, TerminologyLexicon};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_l1: usize,
    pub n_l2_per_l1: usize,
    pub n_l3_per_l2: usize,
    /// Attribute options per L3 question.
    pub n_l3_options: usize,
    pub n_studies: usize,
    pub feature_dim: usize,
    pub label_signal_strength: f64,
    pub report_noise_rate: f64,
    pub synonym_count: usize,
    /// P(L1 finding present).
    pub l1_prevalence: f64,
    /// P(child option present | parent present).
    pub child_prevalence: f64,
    /// Share of asked-but-negative findings that get an explicit negation.
    pub negation_rate: f64,
    /// Studies with gold labels for supervised training; the rest of the
    /// leading studies form the unlabeled mining corpus.
    pub train_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_l1: 4,
            n_l2_per_l1: 3,
            n_l3_per_l2: 2,
            n_l3_options: 3,
            n_studies: 1000,
            feature_dim: 32,
            label_signal_strength: 2.0,
            report_noise_rate: 0.0,
            synonym_count: 1,
            l1_prevalence: 0.3,
            child_prevalence: 0.3,
            negation_rate: 0.5,
            train_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_l1", self.n_l1),
            ("n_l2_per_l1", self.n_l2_per_l1),
            ("n_l3_per_l2", self.n_l3_per_l2),
            ("n_l3_options", self.n_l3_options),
            ("n_studies", self.n_studies),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.label_signal_strength >= 0.0 && self.label_signal_strength.is_finite()) {
            return Err(Error::Config("label_signal_strength must be finite and >= 0".into()));
        }
        for (name, v) in [
            ("report_noise_rate", self.report_noise_rate),
            ("l1_prevalence", self.l1_prevalence),
            ("child_prevalence", self.child_prevalence),
            ("negation_rate", self.negation_rate),
            ("train_fraction", self.train_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.train_fraction + self.test_fraction > 1.0 {
            return Err(Error::Config("train_fraction + test_fraction exceeds 1".into()));
        }
        Ok(())
    }
}

/// Study ids per role, each in corpus order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub mining: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub template: Template,
    pub lexicon: TerminologyLexicon,
    /// Synonym seeds keyed by canonical text (the lexicon's expander input).
    pub synonyms: SeedListExpander,
    pub studies: Vec<FreeTextStudy>,
    pub gold: Vec<StructuredReport>,
    pub image_features: FeatureStore,
    pub splits: Splits,
}

fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), name.as_bytes()]))
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// Fresh three-syllable pseudo-words.
struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn next(&mut self) -> String {
        loop {
            let w: String = (0..3)
                .map(|_| format!("{}{}", ONSETS.choose(&mut self.rng).unwrap(), VOWELS.choose(&mut self.rng).unwrap()))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// One option of the generated template with its report phrases.
struct OptionInfo {
    id: String,
    question: usize,
    /// Present-finding option (as opposed to the "no ..." answer).
    positive: bool,
    phrases: Vec<String>,
}

struct Layout {
    template: Template,
    options: Vec<OptionInfo>,
    synonyms: HashMap<String, Vec<String>>,
    /// For each single-choice question: (positive option, negative option).
    yes_no: HashMap<usize, (usize, usize)>,
}

fn build_layout(config: &SynthConfig) -> Result<Layout> {
    let mut words = Words {
        rng: stream(config.seed, "words"),
        used: HashSet::new(),
    };
    let mut specs = Vec::new();
    let mut synonyms: HashMap<String, Vec<String>> = HashMap::new();
    let finding = |kind: &str, words: &mut Words, synonyms: &mut HashMap<String, Vec<String>>| {
        let canonical = format!("{} {kind}", words.next());
        let syn: Vec<String> = (0..config.synonym_count)
            .map(|_| format!("{} {kind}", words.next()))
            .collect();
        if !syn.is_empty() {
            synonyms.insert(canonical.clone(), syn);
        }
        canonical
    };
    for i in 0..config.n_l1 {
        let l1 = format!("f{i}");
        let yes = finding("abnormality", &mut words, &mut synonyms);
        specs.push(QuestionSpec {
            id: l1.clone(),
            level: 1,
            text: format!("Is there {yes}?"),
            mode: AnswerMode::SingleChoice,
            options: vec![yes.clone(), format!("no {yes}")],
            trigger: None,
        });
        for j in 0..config.n_l2_per_l1 {
            let l2 = format!("{l1}_{j}");
            let l2_yes = finding("lesion", &mut words, &mut synonyms);
            specs.push(QuestionSpec {
                id: l2.clone(),
                level: 2,
                text: format!("Is there {l2_yes}?"),
                mode: AnswerMode::SingleChoice,
                options: vec![l2_yes.clone(), format!("no {l2_yes}")],
                trigger: Some(TriggerSpec {
                    parent_question: l1.clone(),
                    parent_option: yes.clone(),
                }),
            });
            for k in 0..config.n_l3_per_l2 {
                let opts: Vec<String> = (0..config.n_l3_options)
                    .map(|_| finding("pattern", &mut words, &mut synonyms))
                    .collect();
                specs.push(QuestionSpec {
                    id: format!("{l2}_{k}"),
                    level: 3,
                    text: format!("Which attributes of the {l2_yes}?"),
                    mode: AnswerMode::MultiSelect,
                    options: opts,
                    trigger: Some(TriggerSpec {
                        parent_question: l2.clone(),
                        parent_option: l2_yes.clone(),
                    }),
                });
            }
        }
    }
    let template = Template::new("synthetic", specs)?;
    let mut options = Vec::with_capacity(template.answer_dim());
    let mut yes_no = HashMap::new();
    for (qi, q) in template.questions().iter().enumerate() {
        for (k, oid) in q.option_ids.iter().enumerate() {
            let canonical = template.option(oid).expect("own option").canonical_text.clone();
            let positive = !(q.is_single_choice() && k == 1);
            let mut phrases = vec![canonical.clone()];
            if positive {
                phrases.extend(synonyms.get(&canonical).cloned().unwrap_or_default());
            }
            options.push(OptionInfo {
                id: oid.clone(),
                question: qi,
                positive,
                phrases,
            });
        }
        if q.is_single_choice() {
            let base = template.option_position(&q.option_ids[0]).expect("own option");
            yes_no.insert(qi, (base, base + 1));
        }
    }
    Ok(Layout {
        template,
        options,
        synonyms,
        yes_no,
    })
}

/// Unit directions in feature space, one per option.
fn directions(config: &SynthConfig, n: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(config.seed, "directions");
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..config.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Samples the gold report: L1 findings at `l1_prevalence`, children at
/// `child_prevalence` given a present parent, with at least one present
/// child finding under every present parent.
fn sample_gold(layout: &Layout, config: &SynthConfig, study_id: &str, rng: &mut ChaCha8Rng) -> StructuredReport {
    let t = &layout.template;
    let mut report = StructuredReport::new(study_id);
    for (qi, q) in t.questions().iter().enumerate() {
        if q.level != 1 {
            continue;
        }
        let present = rng.random::<f64>() < config.l1_prevalence;
        answer_yes_no(layout, &mut report, qi, present);
        if !present {
            continue;
        }
        let l1_yes = &q.option_ids[0];
        let l2s: Vec<usize> = t.children_of(&q.id, l1_yes).to_vec();
        let mut picks: Vec<bool> = l2s.iter().map(|_| rng.random::<f64>() < config.child_prevalence).collect();
        if !picks.iter().any(|p| *p) {
            let k = rng.random_range(0..picks.len());
            picks[k] = true;
        }
        for (&l2, on) in l2s.iter().zip(picks) {
            answer_yes_no(layout, &mut report, l2, on);
            if on {
                sample_attributes(layout, config, &mut report, l2, rng);
            }
        }
    }
    report
}

fn answer_yes_no(layout: &Layout, report: &mut StructuredReport, question: usize, present: bool) {
    let (yes, no) = layout.yes_no[&question];
    let q = &layout.template.questions()[question];
    report.answer(&q.id, [layout.options[if present { yes } else { no }].id.clone()]);
}

fn sample_attributes(layout: &Layout, config: &SynthConfig, report: &mut StructuredReport, l2: usize, rng: &mut ChaCha8Rng) {
    let t = &layout.template;
    let q = &t.questions()[l2];
    let l3s: Vec<usize> = t.children_of(&q.id, &q.option_ids[0]).to_vec();
    let mut chosen: Vec<Vec<String>> = l3s
        .iter()
        .map(|&l3| {
            t.questions()[l3]
                .option_ids
                .iter()
                .filter(|_| rng.random::<f64>() < config.child_prevalence)
                .cloned()
                .collect()
        })
        .collect();
    if chosen.iter().all(Vec::is_empty) {
        let k = rng.random_range(0..l3s.len());
        let opts = &t.questions()[l3s[k]].option_ids;
        chosen[k].push(opts[rng.random_range(0..opts.len())].clone());
    }
    for (&l3, c) in l3s.iter().zip(chosen) {
        report.answer(&t.questions()[l3].id, c);
    }
}

/// Sentence list: every present finding named once, a share of asked
/// negatives negated explicitly, then shuffled and corrupted at the noise rate.
fn render_report(layout: &Layout, config: &SynthConfig, gold: &StructuredReport, rng: &mut ChaCha8Rng) -> String {
    let t = &layout.template;
    let mut sentences = Vec::new();
    for q in traversal_order(t) {
        if !t.is_open(q, &gold.answers) {
            continue;
        }
        let qi = t.question_position(&q.id).expect("own question");
        for oid in &q.option_ids {
            let oi = t.option_position(oid).expect("own option");
            let info = &layout.options[oi];
            if !info.positive {
                continue;
            }
            let phrase = info.phrases.choose(rng).expect("non-empty phrase list");
            let selected = gold.selected(&q.id).is_some_and(|s| s.contains(oid));
            if selected {
                sentences.push(format!("there is {phrase}."));
            } else if layout.yes_no.contains_key(&qi) && rng.random::<f64>() < config.negation_rate {
                sentences.push(format!("no {phrase}."));
            }
        }
    }
    fisher_yates(&mut sentences, rng);
    if config.report_noise_rate > 0.0 {
        let mut noisy = Vec::with_capacity(sentences.len());
        for s in sentences {
            if rng.random::<f64>() < config.report_noise_rate {
                if rng.random::<bool>() {
                    continue;
                }
                let other = layout.options.choose(rng).expect("non-empty template");
                let phrase = other.phrases.choose(rng).expect("non-empty phrase list");
                noisy.push(s);
                noisy.push(format!("possibly {phrase}."));
            } else {
                noisy.push(s);
            }
        }
        sentences = noisy;
    }
    if sentences.is_empty() {
        sentences.push("study reviewed.".into());
    }
    sentences.join(" ")
}

fn fisher_yates<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthWorld> {
    config.validate()?;
    let layout = build_layout(config)?;
    let dirs = directions(config, layout.options.len());
    let synonyms = SeedListExpander::new(layout.synonyms.clone());
    let lexicon = expand_terminology(&layout.template, &synonyms).lexicon;

    let mut label_rng = stream(config.seed, "labels");
    let mut text_rng = stream(config.seed, "text");
    let mut noise_rng = stream(config.seed, "features");
    let mut features = FeatureStore::new(config.feature_dim);
    let mut studies = Vec::with_capacity(config.n_studies);
    let mut gold = Vec::with_capacity(config.n_studies);
    let width = config.n_studies.to_string().len();
    for i in 0..config.n_studies {
        let id = format!("s{i:0width$}");
        let report = sample_gold(&layout, config, &id, &mut label_rng);
        let mut x: Vec<f64> = (0..config.feature_dim).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
        for oid in report.selected_options() {
            let oi = layout.template.option_position(oid).expect("own option");
            if layout.options[oi].positive {
                for (xj, gj) in x.iter_mut().zip(&dirs[oi]) {
                    *xj += config.label_signal_strength * gj;
                }
            }
        }
        features.insert(id.clone(), x)?;
        studies.push(FreeTextStudy {
            study_id: id.clone(),
            report_text: render_report(&layout, config, &report, &mut text_rng),
            image_ref: id,
        });
        gold.push(report);
    }

    let n = config.n_studies;
    let n_test = (config.test_fraction * n as f64).round() as usize;
    let n_train = ((config.train_fraction * n as f64).round() as usize).min(n - n_test);
    let n_mining = n - n_test - n_train;
    let ids: Vec<String> = studies.iter().map(|s| s.study_id.clone()).collect();
    let splits = Splits {
        mining: ids[..n_mining].to_vec(),
        train: ids[n_mining..n_mining + n_train].to_vec(),
        test: ids[n_mining + n_train..].to_vec(),
    };
    debug_assert!(layout.options.iter().all(|o| o.question < layout.template.questions().len()));

    Ok(SynthWorld {
        config: config.clone(),
        template: layout.template,
        lexicon,
        synonyms,
        studies,
        gold,
        image_features: features,
        splits,
    })
}

pub const TEMPLATE_FILE: &str = "template.json";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const SYNONYM_FILE: &str = "synonyms.tsv";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const GOLD_FILE: &str = "gold.jsonl";
pub const FEATURE_FILE: &str = "features.tsv";
pub const SPLITS_FILE: &str = "splits.json";
pub const SYNTH_CONFIG_FILE: &str = "synth.toml";

impl SynthWorld {
    pub fn gold_by_id(&self) -> BTreeMap<&str, &StructuredReport> {
        self.gold.iter().map(|g| (g.study_id.as_str(), g)).collect()
    }

    pub fn studies_in<'a>(&'a self, ids: &[String]) -> Vec<&'a FreeTextStudy> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.studies.iter().filter(|s| wanted.contains(s.study_id.as_str())).collect()
    }

    pub fn gold_in(&self, ids: &[String]) -> Vec<StructuredReport> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.gold.iter().filter(|g| wanted.contains(g.study_id.as_str())).cloned().collect()
    }

    /// Writes a self-contained experiment directory.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write(TEMPLATE_FILE, serialize_template(&self.template))?;
        write(LEXICON_FILE, self.lexicon.to_tsv())?;
        write(SYNONYM_FILE, self.synonyms.to_tsv())?;
        write(CORPUS_FILE, write_corpus(&self.studies))?;
        write(GOLD_FILE, write_reports(&self.gold))?;
        write(FEATURE_FILE, self.image_features.to_tsv())?;
        write(SPLITS_FILE, serde_json::to_string_pretty(&self.splits)? + "\n")?;
        write(
            SYNTH_CONFIG_FILE,
            toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{evaluate_extraction, extract_corpus, filter_extractions, RuleBasedExtractor};
    use crate::template::check_consistency;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n_l1: 2,
            n_l2_per_l1: 2,
            n_l3_per_l2: 2,
            n_l3_options: 3,
            n_studies: 300,
            feature_dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shape_and_consistency() {
        let w = generate(&small(1)).unwrap();
        assert_eq!(w.template.level_counts(), [2, 4, 8]);
        assert_eq!(w.template.answer_dim(), 2 * 2 + 4 * 2 + 8 * 3);
        for g in &w.gold {
            assert!(check_consistency(g, &w.template).unwrap().is_empty());
        }
        assert_eq!(w.splits.mining.len() + w.splits.train.len() + w.splits.test.len(), 300);
        assert_eq!(w.splits.test.len(), 60);
    }

    #[test]
    fn seeded_determinism() {
        let a = generate(&small(5)).unwrap();
        let b = generate(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.studies, generate(&small(6)).unwrap().studies);
    }

    #[test]
    fn positives_are_named_in_text() {
        let w = generate(&small(2)).unwrap();
        for (s, g) in w.studies.iter().zip(&w.gold) {
            for oid in g.selected_options() {
                let o = w.template.option(oid).unwrap();
                if o.canonical_text.starts_with("no ") {
                    continue;
                }
                let named = w
                    .lexicon
                    .variants_of(oid)
                    .iter()
                    .any(|p| s.report_text.contains(&format!("there is {p}.")));
                assert!(named, "{oid} missing from `{}`", s.report_text);
            }
        }
    }

    #[test]
    fn noiseless_mining_recovers_gold() {
        let w = generate(&small(3)).unwrap();
        let ex = RuleBasedExtractor::new(w.lexicon.clone());
        let mined = extract_corpus(&w.studies, &w.template, &ex);
        let filtered: Vec<_> = mined.results.iter().map(|r| filter_extractions(r, &w.template)).collect();
        let f1 = evaluate_extraction(&filtered, &w.gold, &w.template).unwrap();
        assert_eq!((f1.l1, f1.l2, f1.l3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn long_tail_prevalence() {
        let w = generate(&SynthConfig {
            n_studies: 2000,
            ..small(4)
        })
        .unwrap();
        let counts = crate::eval::answer_histogram(&w.gold);
        for q in w.template.questions().iter().filter(|q| q.level == 3) {
            let trig = q.trigger.as_ref().unwrap();
            let parent = counts.get(&trig.parent_option).copied().unwrap_or(0);
            for o in &q.option_ids {
                assert!(counts.get(o).copied().unwrap_or(0) < parent);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig { n_l1: 0, ..small(0) }).is_err());
        assert!(generate(&SynthConfig { report_noise_rate: 1.5, ..small(0) }).is_err());
        assert!(generate(&SynthConfig { train_fraction: 0.9, test_fraction: 0.2, ..small(0) }).is_err());
    }

    #[test]
    fn zero_signal_features_ignore_labels() {
        let a = generate(&SynthConfig { label_signal_strength: 0.0, ..small(9) }).unwrap();
        let b = generate(&SynthConfig {
            label_signal_strength: 0.0,
            l1_prevalence: 0.9,
            ..small(9)
        })
        .unwrap();
        assert_eq!(a.image_features, b.image_features);
    }
}
