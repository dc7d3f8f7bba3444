//! Template-constrained label extraction from free-text reports.
//!
//! Extraction walks the template top-down. Presence questions (levels 1 and
//! 2) are asked first; a deeper question is only issued once its trigger
//! option has been asserted with certainty. Replies are constrained to the
//! question's option texts, plus `unsure` (and `none` for multi-select
//! questions); anything else is kept but marked uncertain, so
//! [`filter_extractions`] drops it.

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::template::{traversal_order, Question, StructuredReport, Template};
use crate::terminology::{normalize_phrase, TerminologyLexicon};

pub const UNSURE: &str = "unsure";
pub const NONE: &str = "none";

/// Cue sequences that negate a phrase appearing later in the same sentence.
pub const NEGATION_CUES: &[&[&str]] = &[&["no"], &["without"], &["negative", "for"]];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeTextStudy {
    pub study_id: String,
    pub report_text: String,
    pub image_ref: String,
}

/// Corpus format: one JSON object per line.
pub fn read_corpus(source: &str) -> Result<Vec<FreeTextStudy>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in source.lines().filter(|l| !l.trim().is_empty()) {
        let study: FreeTextStudy = serde_json::from_str(line)?;
        if study.report_text.trim().is_empty() {
            return Err(Error::Parse(format!("study `{}` has an empty report", study.study_id)));
        }
        if !seen.insert(study.study_id.clone()) {
            return Err(Error::Parse(format!("duplicate study id `{}`", study.study_id)));
        }
        out.push(study);
    }
    Ok(out)
}

pub fn write_corpus(studies: &[FreeTextStudy]) -> String {
    let mut out = String::new();
    for s in studies {
        out.push_str(&serde_json::to_string(s).expect("study serializes"));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Certainty {
    Certain,
    Uncertain,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Assertion {
    pub question_id: String,
    pub option_id: String,
    pub certainty: Certainty,
}

/// Assertions for one study, kept sorted and unique per (question, option).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub study_id: String,
    pub assertions: Vec<Assertion>,
}

impl ExtractionResult {
    pub fn new(study_id: impl Into<String>) -> Self {
        ExtractionResult {
            study_id: study_id.into(),
            assertions: Vec::new(),
        }
    }

    /// Inserts or overwrites the certainty of (question, option).
    pub fn assert(&mut self, question_id: &str, option_id: &str, certainty: Certainty) {
        match self
            .assertions
            .binary_search_by(|a| (a.question_id.as_str(), a.option_id.as_str()).cmp(&(question_id, option_id)))
        {
            Ok(i) => self.assertions[i].certainty = certainty,
            Err(i) => self.assertions.insert(
                i,
                Assertion {
                    question_id: question_id.to_string(),
                    option_id: option_id.to_string(),
                    certainty,
                },
            ),
        }
    }

    pub fn contains(&self, question_id: &str, option_id: &str) -> bool {
        self.assertions
            .iter()
            .any(|a| a.question_id == question_id && a.option_id == option_id)
    }

    /// Partial report induced by the certain assertions.
    pub fn to_report(&self) -> StructuredReport {
        let mut answers: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for a in self.assertions.iter().filter(|a| a.certainty == Certainty::Certain) {
            answers
                .entry(a.question_id.clone())
                .or_default()
                .insert(a.option_id.clone());
        }
        StructuredReport {
            study_id: self.study_id.clone(),
            answers,
        }
    }
}

pub fn write_extractions(results: &[ExtractionResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).expect("extraction serializes"));
        out.push('\n');
    }
    out
}

pub fn read_extractions(source: &str) -> Result<Vec<ExtractionResult>> {
    source
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Presence,
    Attribute,
}

/// One constrained question put to an extractor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConstrainedQuery {
    pub kind: QueryKind,
    pub question_id: String,
    pub multi_select: bool,
    pub prompt: String,
    /// Canonical texts of the question's options, in template order.
    pub allowed_answers: Vec<String>,
    pub report_excerpt: String,
}

impl ConstrainedQuery {
    pub fn for_question(question: &Question, template: &Template, report_text: &str) -> Self {
        let allowed_answers: Vec<String> = question
            .option_ids
            .iter()
            .map(|o| template.option(o).expect("validated template").canonical_text.clone())
            .collect();
        let kind = if question.level < 3 {
            QueryKind::Presence
        } else {
            QueryKind::Attribute
        };
        let multi_select = !question.is_single_choice();
        let listed = allowed_answers.join("; ");
        let prompt = match (kind, multi_select) {
            (QueryKind::Presence, false) => format!(
                "Question: {}\nAnswer with exactly one of: {listed}.\nReply `{UNSURE}` if the report does not allow a confident answer.",
                question.text
            ),
            (_, true) => format!(
                "Question: {}\nList every applicable answer from: {listed}, separated by commas. \
                 Reply `{NONE}` if none applies and `{UNSURE}` if the report is ambiguous.",
                question.text
            ),
            (QueryKind::Attribute, false) => format!(
                "The report describes the parent finding. Question: {}\nAnswer with exactly one of: {listed}.\n\
                 Reply `{UNSURE}` if the report does not allow a confident answer.",
                question.text
            ),
        };
        ConstrainedQuery {
            kind,
            question_id: question.id.clone(),
            multi_select,
            prompt,
            allowed_answers,
            report_excerpt: report_text.to_string(),
        }
    }
}

/// Answers constrained queries; returns the raw reply text.
pub trait AnswerProvider: Sync {
    fn answer(&self, query: &ConstrainedQuery) -> Result<String>;
}

/// Reply parsed against the allowed answers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedReply {
    /// Indices into `allowed_answers`.
    pub selected: Vec<usize>,
    pub uncertain: bool,
}

/// Matches the first line of `reply` (after normalization) against the
/// allowed answers. Multi-select replies may list several answers separated
/// by commas or semicolons.
pub fn parse_reply(query: &ConstrainedQuery, reply: &str) -> ParsedReply {
    let first = reply.lines().next().unwrap_or_default();
    let items: Vec<String> = if query.multi_select {
        first.split([',', ';']).map(normalize_phrase).filter(|s| !s.is_empty()).collect()
    } else {
        vec![normalize_phrase(first)]
    };
    let mut selected = Vec::new();
    let mut uncertain = false;
    for item in &items {
        if let Some(i) = query.allowed_answers.iter().position(|a| a == item) {
            if !selected.contains(&i) {
                selected.push(i);
            }
        } else if query.multi_select && item == NONE && items.len() == 1 {
            // explicit empty selection
        } else {
            uncertain = true;
        }
    }
    if items.is_empty() && !query.multi_select {
        uncertain = true;
    }
    if !query.multi_select && selected.len() > 1 {
        uncertain = true;
    }
    selected.sort_unstable();
    ParsedReply { selected, uncertain }
}

/// Runs the hierarchical, constrained query sequence for one study.
pub fn extract_study(
    study: &FreeTextStudy,
    template: &Template,
    extractor: &dyn AnswerProvider,
) -> Result<ExtractionResult> {
    let mut result = ExtractionResult::new(study.study_id.clone());
    let mut certain: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for question in traversal_order(template) {
        if !template.is_open(question, &certain) {
            continue;
        }
        let query = ConstrainedQuery::for_question(question, template, &study.report_text);
        let reply = extractor.answer(&query)?;
        let parsed = parse_reply(&query, &reply);
        let certainty = if parsed.uncertain {
            Certainty::Uncertain
        } else {
            Certainty::Certain
        };
        if parsed.selected.is_empty() && parsed.uncertain {
            // Nothing usable: record an uncertain presence claim so the
            // filter can account for it.
            result.assert(&question.id, &question.option_ids[0], Certainty::Uncertain);
        }
        for &i in &parsed.selected {
            let oid = &question.option_ids[i];
            result.assert(&question.id, oid, certainty);
            if certainty == Certainty::Certain {
                certain.entry(question.id.clone()).or_default().insert(oid.clone());
            }
        }
    }
    Ok(result)
}

#[derive(Clone, Debug, Default)]
pub struct CorpusExtraction {
    pub results: Vec<ExtractionResult>,
    pub skipped: Vec<String>,
}

/// Extracts every study in parallel; studies whose provider call fails are
/// skipped and listed. Output order follows the corpus.
pub fn extract_corpus(
    studies: &[FreeTextStudy],
    template: &Template,
    extractor: &dyn AnswerProvider,
) -> CorpusExtraction {
    let outcomes: Vec<Result<ExtractionResult>> = studies
        .par_iter()
        .map(|s| extract_study(s, template, extractor))
        .collect();
    let mut out = CorpusExtraction::default();
    for (study, outcome) in studies.iter().zip(outcomes) {
        match outcome {
            Ok(r) => out.results.push(r),
            Err(err) => {
                warn!("skipping study {}: {err}", study.study_id);
                out.skipped.push(study.study_id.clone());
            }
        }
    }
    out
}

/// Deterministic extractor answering by lexicon lookup over the report's
/// sentences. Sentences split on `.`, `;` and newlines; a phrase fires when
/// it occurs in a sentence with no negation cue before it.
#[derive(Clone, Debug)]
pub struct RuleBasedExtractor {
    lexicon: TerminologyLexicon,
}

impl RuleBasedExtractor {
    pub fn new(lexicon: TerminologyLexicon) -> Self {
        RuleBasedExtractor { lexicon }
    }

    fn fires(&self, sentences: &[Vec<String>], answer: &str) -> bool {
        let Some(oid) = self.lexicon.lookup(answer) else {
            return false;
        };
        self.lexicon.variants_of(oid).iter().any(|variant| {
            let phrase = tokenize(variant);
            sentences.iter().any(|s| mentions_affirmed(s, &phrase))
        })
    }
}

pub fn segment_sentences(text: &str) -> Vec<Vec<String>> {
    text.split(['.', ';', '\n'])
        .map(tokenize)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn is_negated_before(sentence: &[String], end: usize) -> bool {
    (0..end).any(|i| {
        NEGATION_CUES.iter().any(|cue| {
            i + cue.len() <= end && cue.iter().zip(&sentence[i..]).all(|(c, t)| c == t)
        })
    })
}

/// True if `phrase` occurs in `sentence` without a preceding negation cue.
pub fn mentions_affirmed(sentence: &[String], phrase: &[String]) -> bool {
    if phrase.is_empty() || phrase.len() > sentence.len() {
        return false;
    }
    (0..=sentence.len() - phrase.len())
        .any(|start| sentence[start..start + phrase.len()] == *phrase && !is_negated_before(sentence, start))
}

fn starts_with_cue(text: &str) -> bool {
    let toks = tokenize(text);
    NEGATION_CUES
        .iter()
        .any(|cue| toks.len() > cue.len() && cue.iter().zip(&toks).all(|(c, t)| c == t))
}

impl AnswerProvider for RuleBasedExtractor {
    fn answer(&self, query: &ConstrainedQuery) -> Result<String> {
        let sentences = segment_sentences(&query.report_excerpt);
        let fired: Vec<&String> = query
            .allowed_answers
            .iter()
            .filter(|a| self.fires(&sentences, a))
            .collect();
        if query.multi_select {
            return Ok(if fired.is_empty() {
                NONE.to_string()
            } else {
                fired.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            });
        }
        Ok(match fired.as_slice() {
            [one] => (*one).clone(),
            // Unmentioned finding: fall back to the explicitly negative option.
            [] => query
                .allowed_answers
                .iter()
                .find(|a| starts_with_cue(a))
                .cloned()
                .unwrap_or_else(|| UNSURE.to_string()),
            _ => UNSURE.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterPolicy {
    /// Drop trigger options none of whose opened questions kept an answer.
    pub hierarchical: bool,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy { hierarchical: true }
    }
}

/// Removes uncertain and invalid assertions, contradictory single-choice
/// answers, orphaned children and (with the hierarchical rule) positive
/// parents without any surviving child assertion. Iterates to a fixed point,
/// so the filter is idempotent.
pub fn filter_extractions(result: &ExtractionResult, template: &Template) -> ExtractionResult {
    filter_extractions_with(result, template, FilterPolicy::default())
}

pub fn filter_extractions_with(
    result: &ExtractionResult,
    template: &Template,
    policy: FilterPolicy,
) -> ExtractionResult {
    let mut kept: Vec<Assertion> = result
        .assertions
        .iter()
        .filter(|a| a.certainty == Certainty::Certain)
        .filter(|a| template.option(&a.option_id).is_some_and(|o| o.question_id == a.question_id))
        .cloned()
        .collect();

    // Contradictions: several options on a single-choice question.
    let mut per_question: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &kept {
        *per_question.entry(a.question_id.as_str()).or_insert(0) += 1;
    }
    let contradicted: BTreeSet<String> = per_question
        .into_iter()
        .filter(|(q, n)| *n > 1 && template.question(q).is_some_and(Question::is_single_choice))
        .map(|(q, _)| q.to_string())
        .collect();
    if !contradicted.is_empty() {
        info!("{}: discarding contradictory answers for {contradicted:?}", result.study_id);
        kept.retain(|a| !contradicted.contains(&a.question_id));
    }

    loop {
        let before = kept.len();
        let asserted: BTreeSet<(String, String)> = kept
            .iter()
            .map(|a| (a.question_id.clone(), a.option_id.clone()))
            .collect();
        let answered: BTreeSet<&str> = kept.iter().map(|a| a.question_id.as_str()).collect();

        let next: Vec<Assertion> = kept
            .iter()
            .filter(|a| {
                let q = template.question(&a.question_id).expect("checked above");
                let gated = q.trigger.as_ref().is_none_or(|t| {
                    asserted.contains(&(t.parent_question.clone(), t.parent_option.clone()))
                });
                let supported = !policy.hierarchical || {
                    let kids = template.children_of(&a.question_id, &a.option_id);
                    kids.is_empty()
                        || kids
                            .iter()
                            .any(|&k| answered.contains(template.questions()[k].id.as_str()))
                };
                gated && supported
            })
            .cloned()
            .collect();
        kept = next;
        if kept.len() == before {
            break;
        }
    }

    ExtractionResult {
        study_id: result.study_id.clone(),
        assertions: kept,
    }
}

/// Option id -> supporting study ids, in corpus order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePools {
    pools: BTreeMap<String, Vec<String>>,
}

impl ExamplePools {
    pub fn get(&self, option_id: &str) -> &[String] {
        self.pools.get(option_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.pools.iter()
    }

    pub fn non_empty(&self) -> usize {
        self.pools.values().filter(|p| !p.is_empty()).count()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("pools serialize");
        s.push('\n');
        s
    }

    pub fn from_json(source: &str) -> Result<Self> {
        Ok(serde_json::from_str(source)?)
    }

    pub fn insert(&mut self, option_id: impl Into<String>, studies: Vec<String>) {
        self.pools.insert(option_id.into(), studies);
    }
}

/// Study `s` is in pool(l) iff `s` certainly asserts `l`.
pub fn build_example_pools(results: &[ExtractionResult]) -> ExamplePools {
    let mut pools: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in results {
        for a in r.assertions.iter().filter(|a| a.certainty == Certainty::Certain) {
            let pool = pools.entry(a.option_id.clone()).or_default();
            if pool.last() != Some(&r.study_id) {
                pool.push(r.study_id.clone());
            }
        }
    }
    ExamplePools { pools }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelF1 {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

/// Per-level macro-F1 of extracted labels against gold structured reports.
pub fn evaluate_extraction(
    predicted: &[ExtractionResult],
    gold: &[StructuredReport],
    template: &Template,
) -> Result<LevelF1> {
    let reports: Vec<StructuredReport> = predicted.iter().map(ExtractionResult::to_report).collect();
    Ok(LevelF1 {
        l1: eval::macro_f1(&reports, gold, template, Some(1))?,
        l2: eval::macro_f1(&reports, gold, template, Some(2))?,
        l3: eval::macro_f1(&reports, gold, template, Some(3))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::tests::effusion_template;
    use crate::terminology::{expand_terminology, SeedListExpander};
    use std::collections::HashMap;
    use std::sync::Mutex;

    fn lexicon(t: &Template) -> TerminologyLexicon {
        let mut seeds = HashMap::new();
        seeds.insert("pleural effusion".to_string(), vec!["effusion".to_string()]);
        seeds.insert("normal heart size".to_string(), vec!["heart size normal".to_string()]);
        seeds.insert("no pleural effusion".to_string(), vec!["no effusion".to_string()]);
        expand_terminology(t, &SeedListExpander::new(seeds)).lexicon
    }

    fn study(text: &str) -> FreeTextStudy {
        FreeTextStudy {
            study_id: "s1".into(),
            report_text: text.into(),
            image_ref: "s1".into(),
        }
    }

    /// Records every query it sees and answers from a script.
    struct Scripted {
        replies: HashMap<String, String>,
        seen: Mutex<Vec<String>>,
    }

    impl AnswerProvider for Scripted {
        fn answer(&self, q: &ConstrainedQuery) -> Result<String> {
            self.seen.lock().unwrap().push(q.question_id.clone());
            Ok(self.replies.get(&q.question_id).cloned().unwrap_or_else(|| UNSURE.into()))
        }
    }

    #[test]
    fn negative_parent_gates_children() {
        let t = effusion_template();
        let ex = RuleBasedExtractor::new(lexicon(&t));
        let r = extract_study(&study("heart size normal. no effusion."), &t, &ex).unwrap();
        assert!(r.contains("heart", "heart/normal heart size"));
        assert!(r.contains("lung", "lung/no lung abnormality"));
        assert!(r.assertions.iter().all(|a| a.question_id != "size" && a.question_id != "side"));
    }

    /// Oracle: keyword scan of the sentence for each lexicon phrase.
    #[test]
    fn attributes_extracted_under_positive_parent() {
        let t = Template::new(
            "t",
            vec![
                crate::template::tests::single(crate::template::tests::q(
                    "effusion",
                    1,
                    &["pleural effusion", "no pleural effusion"],
                    None,
                )),
                crate::template::tests::q("size", 2, &["small", "large"], Some(("effusion", "pleural effusion"))),
                crate::template::tests::q("side", 2, &["left", "right"], Some(("effusion", "pleural effusion"))),
            ],
        )
        .unwrap();
        let ex = RuleBasedExtractor::new(lexicon(&t));
        let r = extract_study(&study("small right pleural effusion"), &t, &ex).unwrap();
        let got: Vec<_> = r.assertions.iter().map(|a| a.option_id.as_str()).collect();
        assert_eq!(got, ["effusion/pleural effusion", "side/right", "size/small"]);
        assert!(r.assertions.iter().all(|a| a.certainty == Certainty::Certain));
    }

    #[test]
    fn off_list_reply_is_uncertain_and_gates() {
        let t = effusion_template();
        let mut replies = HashMap::new();
        replies.insert("lung".to_string(), "lung abnormality".to_string());
        replies.insert("effusion".to_string(), "probably something".to_string());
        replies.insert("heart".to_string(), "cardiomegaly".to_string());
        let scripted = Scripted {
            replies,
            seen: Mutex::new(Vec::new()),
        };
        let r = extract_study(&study("x"), &t, &scripted).unwrap();
        let eff: Vec<_> = r.assertions.iter().filter(|a| a.question_id == "effusion").collect();
        assert_eq!(eff.len(), 1);
        assert_eq!(eff[0].certainty, Certainty::Uncertain);
        assert_eq!(*scripted.seen.lock().unwrap(), ["lung", "effusion", "heart"]);
    }

    #[test]
    fn provider_failure_skips_study() {
        struct Down;
        impl AnswerProvider for Down {
            fn answer(&self, _: &ConstrainedQuery) -> Result<String> {
                Err(Error::ExtractorUnavailable("503".into()))
            }
        }
        let t = effusion_template();
        let out = extract_corpus(&[study("x")], &t, &Down);
        assert!(out.results.is_empty());
        assert_eq!(out.skipped, ["s1"]);
    }

    #[test]
    fn negation_cues() {
        let s = tokenize("there is no evidence of pleural effusion");
        assert!(!mentions_affirmed(&s, &tokenize("pleural effusion")));
        let s = tokenize("negative for pneumothorax");
        assert!(!mentions_affirmed(&s, &tokenize("pneumothorax")));
        let s = tokenize("pleural effusion without pneumothorax");
        assert!(mentions_affirmed(&s, &tokenize("pleural effusion")));
        assert!(!mentions_affirmed(&s, &tokenize("pneumothorax")));
        // token boundaries are respected
        assert!(!mentions_affirmed(&tokenize("effusions"), &tokenize("effusion")));
    }

    fn certain(r: &mut ExtractionResult, q: &str, o: &str) {
        r.assert(q, o, Certainty::Certain);
    }

    #[test]
    fn filter_drops_uncertain() {
        let t = effusion_template();
        let mut r = ExtractionResult::new("s");
        r.assert("effusion", "effusion/pleural effusion", Certainty::Uncertain);
        assert!(filter_extractions(&r, &t).assertions.is_empty());
    }

    #[test]
    fn filter_drops_childless_positive_parent() {
        let t = effusion_template();
        let mut r = ExtractionResult::new("s");
        certain(&mut r, "lung", "lung/lung abnormality");
        certain(&mut r, "effusion", "effusion/pleural effusion");
        let f = filter_extractions(&r, &t);
        // effusion goes first, then lung loses its only child answer
        assert!(f.assertions.is_empty());

        let off = filter_extractions_with(&r, &t, FilterPolicy { hierarchical: false });
        assert_eq!(off, r);
    }

    #[test]
    fn consistent_set_is_fixed_point() {
        let t = effusion_template();
        let mut r = ExtractionResult::new("s");
        certain(&mut r, "lung", "lung/lung abnormality");
        certain(&mut r, "effusion", "effusion/pleural effusion");
        certain(&mut r, "side", "side/right");
        certain(&mut r, "heart", "heart/cardiomegaly");
        assert_eq!(filter_extractions(&r, &t), r);
    }

    #[test]
    fn filter_discards_contradictions_and_orphans() {
        let t = effusion_template();
        let mut r = ExtractionResult::new("s");
        certain(&mut r, "heart", "heart/cardiomegaly");
        certain(&mut r, "heart", "heart/normal heart size");
        certain(&mut r, "side", "side/left");
        certain(&mut r, "lung", "side/left");
        let f = filter_extractions(&r, &t);
        assert!(f.assertions.is_empty());
    }

    /// Oracle: linear count of assertions per option.
    #[test]
    fn pools_follow_corpus_order() {
        assert_eq!(build_example_pools(&[]).non_empty(), 0);
        let mut results = Vec::new();
        for (i, both) in [(0, true), (1, false), (2, false)] {
            let mut r = ExtractionResult::new(format!("s{i}"));
            certain(&mut r, "heart", "heart/cardiomegaly");
            if both {
                certain(&mut r, "effusion", "effusion/pleural effusion");
            }
            results.push(r);
        }
        let pools = build_example_pools(&results);
        assert_eq!(pools.get("heart/cardiomegaly"), ["s0", "s1", "s2"]);
        assert_eq!(pools.get("effusion/pleural effusion"), ["s0"]);
        assert!(pools.get("side/left").is_empty());
    }

    #[test]
    fn parse_reply_rules() {
        let t = effusion_template();
        let side = t.question("side").unwrap();
        let q = ConstrainedQuery::for_question(side, &t, "");
        assert_eq!(parse_reply(&q, "Left, RIGHT\nbecause...").selected, vec![0, 1]);
        assert_eq!(parse_reply(&q, "none"), ParsedReply { selected: vec![], uncertain: false });
        assert!(parse_reply(&q, "left, middle").uncertain);
        let heart = t.question("heart").unwrap();
        let q = ConstrainedQuery::for_question(heart, &t, "");
        assert!(parse_reply(&q, "unsure").uncertain);
        assert!(parse_reply(&q, "").uncertain);
        assert_eq!(parse_reply(&q, "Cardiomegaly.").selected, vec![0]);
    }

    #[test]
    fn extraction_scores_against_gold() {
        let t = effusion_template();
        let mut gold = StructuredReport::new("s");
        gold.answer("heart", ["heart/cardiomegaly"]);
        gold.answer("lung", ["lung/no lung abnormality"]);
        let mut good = ExtractionResult::new("s");
        certain(&mut good, "heart", "heart/cardiomegaly");
        certain(&mut good, "lung", "lung/no lung abnormality");
        let f = evaluate_extraction(&[good], &[gold.clone()], &t).unwrap();
        assert_eq!((f.l1, f.l2, f.l3), (1.0, 1.0, 1.0));

        // one false positive (normal heart size) next to the true positive:
        // heart/cardiomegaly F1 = 1, normal heart size F1 = 0, no lung = 1
        let mut fp = ExtractionResult::new("s");
        certain(&mut fp, "heart", "heart/cardiomegaly");
        certain(&mut fp, "heart", "heart/normal heart size");
        certain(&mut fp, "lung", "lung/no lung abnormality");
        let f = evaluate_extraction(&[fp], &[gold], &t).unwrap();
        assert!((f.l1 - 2.0 / 3.0).abs() < 1e-15);
    }
}
