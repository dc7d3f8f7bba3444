//! Expanded vocabulary mapping free-text phrase variants to answer options.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};
use crate::template::{AnswerOption, Question, Template};

/// Lowercases, collapses interior whitespace and strips leading/trailing
/// whitespace and punctuation. Idempotent.
pub fn normalize_phrase(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Canonical,
    LlmExpanded,
    Manual,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Canonical => "canonical",
            Provenance::LlmExpanded => "llm-expanded",
            Provenance::Manual => "manual",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(Provenance::Canonical),
            "llm-expanded" => Ok(Provenance::LlmExpanded),
            "manual" => Ok(Provenance::Manual),
            other => Err(Error::Parse(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconEntry {
    pub option_id: String,
    pub provenance: Provenance,
}

/// Immutable phrase -> option map. Every option's canonical text maps to
/// itself and every phrase maps to exactly one option.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TerminologyLexicon {
    entries: BTreeMap<String, LexiconEntry>,
    by_option: HashMap<String, Vec<String>>,
}

impl TerminologyLexicon {
    fn from_entries(entries: BTreeMap<String, LexiconEntry>) -> Self {
        let mut by_option: HashMap<String, Vec<String>> = HashMap::new();
        for (phrase, entry) in &entries {
            by_option
                .entry(entry.option_id.clone())
                .or_default()
                .push(phrase.clone());
        }
        TerminologyLexicon { entries, by_option }
    }

    /// Lexicon holding only the canonical texts of the template's options.
    pub fn canonical(template: &Template) -> Self {
        let entries = template
            .options()
            .iter()
            .map(|o| {
                (
                    o.canonical_text.clone(),
                    LexiconEntry {
                        option_id: o.id.clone(),
                        provenance: Provenance::Canonical,
                    },
                )
            })
            .collect();
        Self::from_entries(entries)
    }

    pub fn lookup(&self, phrase: &str) -> Option<&str> {
        self.entries
            .get(&normalize_phrase(phrase))
            .map(|e| e.option_id.as_str())
    }

    pub fn entry(&self, phrase: &str) -> Option<&LexiconEntry> {
        self.entries.get(&normalize_phrase(phrase))
    }

    /// All phrases (sorted) that map to `option_id`.
    pub fn variants_of(&self, option_id: &str) -> &[String] {
        self.by_option.get(option_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LexiconEntry)> {
        self.entries.iter()
    }

    /// `phrase<TAB>option_id<TAB>provenance`, one per line, sorted by phrase.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (phrase, e) in &self.entries {
            out.push_str(&format!("{phrase}\t{}\t{}\n", e.option_id, e.provenance));
        }
        out
    }

    /// Parses the line format and checks every target against the template.
    pub fn from_tsv(source: &str, template: &Template) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [phrase, option_id, provenance] = fields[..] else {
                return Err(Error::Parse(format!(
                    "lexicon line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            };
            if template.option(option_id).is_none() {
                return Err(Error::UnknownId(option_id.to_string()));
            }
            let phrase = normalize_phrase(phrase);
            let entry = LexiconEntry {
                option_id: option_id.to_string(),
                provenance: provenance.parse()?,
            };
            if let Some(prev) = entries.insert(phrase.clone(), entry) {
                if prev.option_id != option_id {
                    return Err(Error::Parse(format!(
                        "lexicon phrase `{phrase}` maps to two options"
                    )));
                }
            }
        }
        for o in template.options() {
            match entries.get(&o.canonical_text) {
                Some(e) if e.option_id == o.id => {}
                _ => {
                    return Err(Error::Validation {
                        message: "canonical text missing from lexicon".into(),
                        ids: vec![o.id.clone()],
                    })
                }
            }
        }
        Ok(Self::from_entries(entries))
    }
}

/// Source of candidate phrasings for a canonical label.
pub trait PhraseExpander {
    fn provenance(&self) -> Provenance;

    fn propose(&self, option: &AnswerOption, question: &Question) -> Result<Vec<String>>;
}

/// Proposes nothing; yields the canonical-only lexicon.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullExpander;

impl PhraseExpander for NullExpander {
    fn provenance(&self) -> Provenance {
        Provenance::Manual
    }

    fn propose(&self, _: &AnswerOption, _: &Question) -> Result<Vec<String>> {
        Ok(Vec::new())
    }
}

/// Static seed list: `canonical text<TAB>variant<TAB>variant...` per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedListExpander {
    seeds: HashMap<String, Vec<String>>,
}

impl SeedListExpander {
    pub fn new(seeds: HashMap<String, Vec<String>>) -> Self {
        let seeds = seeds
            .into_iter()
            .map(|(k, v)| (normalize_phrase(&k), v))
            .collect();
        SeedListExpander { seeds }
    }

    pub fn parse(source: &str) -> Result<Self> {
        let mut seeds: HashMap<String, Vec<String>> = HashMap::new();
        for line in source.lines() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let key = normalize_phrase(fields.next().unwrap_or_default());
            seeds.entry(key).or_default().extend(fields.map(str::to_string));
        }
        Ok(SeedListExpander { seeds })
    }

    pub fn to_tsv(&self) -> String {
        let mut keys: Vec<_> = self.seeds.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            out.push_str(k);
            for v in &self.seeds[k] {
                out.push('\t');
                out.push_str(v);
            }
            out.push('\n');
        }
        out
    }
}

impl PhraseExpander for SeedListExpander {
    fn provenance(&self) -> Provenance {
        Provenance::Manual
    }

    fn propose(&self, option: &AnswerOption, _: &Question) -> Result<Vec<String>> {
        Ok(self.seeds.get(&option.canonical_text).cloned().unwrap_or_default())
    }
}

/// Candidate rejected during expansion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conflict {
    pub phrase: String,
    pub proposed_for: String,
    pub conflicts_with: String,
}

#[derive(Clone, Debug)]
pub struct Expansion {
    pub lexicon: TerminologyLexicon,
    pub conflicts: Vec<Conflict>,
    /// Set when the expander failed and the lexicon fell back to canonical texts.
    pub degraded: bool,
}

/// Builds the lexicon from canonical texts plus non-colliding candidates.
///
/// A candidate equal to another option's canonical text, or proposed for two
/// different options, is rejected for every option it was proposed for.
pub fn expand_terminology(template: &Template, expander: &dyn PhraseExpander) -> Expansion {
    let canonical = TerminologyLexicon::canonical(template);
    let mut proposals: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for question in template.questions() {
        for oid in &question.option_ids {
            let option = template.option(oid).expect("validated template");
            match expander.propose(option, question) {
                Ok(candidates) => {
                    for c in candidates {
                        let phrase = normalize_phrase(&c);
                        if phrase.is_empty() || phrase == option.canonical_text {
                            continue;
                        }
                        let owners = proposals.entry(phrase).or_default();
                        if !owners.contains(oid) {
                            owners.push(oid.clone());
                        }
                    }
                }
                Err(err) => {
                    warn!("terminology expansion degraded to canonical-only lexicon: {err}");
                    return Expansion {
                        lexicon: canonical,
                        conflicts: Vec::new(),
                        degraded: true,
                    };
                }
            }
        }
    }

    let provenance = expander.provenance();
    let mut entries = canonical.entries.clone();
    let mut conflicts = Vec::new();
    for (phrase, owners) in proposals {
        if let Some(existing) = canonical.entries.get(&phrase) {
            for owner in owners.iter().filter(|o| **o != existing.option_id) {
                conflicts.push(Conflict {
                    phrase: phrase.clone(),
                    proposed_for: owner.clone(),
                    conflicts_with: existing.option_id.clone(),
                });
            }
            continue;
        }
        if owners.len() > 1 {
            for pair in owners.windows(2) {
                conflicts.push(Conflict {
                    phrase: phrase.clone(),
                    proposed_for: pair[1].clone(),
                    conflicts_with: pair[0].clone(),
                });
            }
            continue;
        }
        entries.insert(
            phrase,
            LexiconEntry {
                option_id: owners[0].clone(),
                provenance,
            },
        );
    }
    for c in &conflicts {
        warn!(
            "rejected variant `{}` for {}: collides with {}",
            c.phrase, c.proposed_for, c.conflicts_with
        );
    }

    Expansion {
        lexicon: TerminologyLexicon::from_entries(entries),
        conflicts,
        degraded: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::tests::{effusion_template, q};

    struct Failing;

    impl PhraseExpander for Failing {
        fn provenance(&self) -> Provenance {
            Provenance::LlmExpanded
        }

        fn propose(&self, _: &AnswerOption, _: &Question) -> Result<Vec<String>> {
            Err(Error::ExpanderUnavailable("connection refused".into()))
        }
    }

    fn seeds(pairs: &[(&str, &[&str])]) -> SeedListExpander {
        SeedListExpander::new(
            pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_phrase("  Enlarged  Heart."), "enlarged heart");
        assert_eq!(normalize_phrase("cardiomegaly"), "cardiomegaly");
        assert_eq!(normalize_phrase("PLEURAL EFFUSION,"), "pleural effusion");
        assert_eq!(normalize_phrase(" \t\n"), "");
    }

    #[test]
    fn canonical_only_with_null_expander() {
        let t = Template::new("t", vec![q("heart", 1, &["cardiomegaly"], None)]).unwrap();
        let exp = expand_terminology(&t, &NullExpander);
        assert_eq!(exp.lexicon.len(), 1);
        assert_eq!(exp.lexicon.lookup("cardiomegaly"), Some("heart/cardiomegaly"));
        assert!(!exp.degraded);
    }

    #[test]
    fn accepted_synonym_and_lookup() {
        let t = effusion_template();
        let exp = expand_terminology(&t, &seeds(&[("cardiomegaly", &["enlarged heart", "CMG"])]));
        let lex = &exp.lexicon;
        assert_eq!(lex.lookup("enlarged heart"), Some("heart/cardiomegaly"));
        assert_eq!(lex.lookup("Enlarged  HEART"), Some("heart/cardiomegaly"));
        assert_eq!(lex.lookup("cmg"), Some("heart/cardiomegaly"));
        assert_eq!(lex.lookup("big heart"), None);
        assert_eq!(lex.entry("cmg").unwrap().provenance, Provenance::Manual);
    }

    /// Oracle: pairwise scan of every accepted phrase against every canonical
    /// text of a different option.
    #[test]
    fn colliding_candidate_rejected() {
        let t = effusion_template();
        let exp = expand_terminology(
            &t,
            &seeds(&[
                ("cardiomegaly", &["pleural effusion", "heart enlargement"]),
                ("small", &["minor"]),
                ("left", &["minor"]),
            ]),
        );
        assert_eq!(exp.lexicon.lookup("pleural effusion"), Some("effusion/pleural effusion"));
        assert_eq!(exp.lexicon.lookup("minor"), None);
        assert_eq!(exp.lexicon.lookup("heart enlargement"), Some("heart/cardiomegaly"));
        assert_eq!(exp.conflicts.len(), 2);
        assert_eq!(exp.conflicts[1].phrase, "pleural effusion");

        for (phrase, entry) in exp.lexicon.iter() {
            for o in t.options() {
                if o.canonical_text == *phrase {
                    assert_eq!(o.id, entry.option_id);
                }
            }
        }
    }

    #[test]
    fn expander_failure_degrades() {
        let t = effusion_template();
        let exp = expand_terminology(&t, &Failing);
        assert!(exp.degraded);
        assert_eq!(exp.lexicon, TerminologyLexicon::canonical(&t));
    }

    #[test]
    fn tsv_round_trip_and_integrity() {
        let t = effusion_template();
        let exp = expand_terminology(&t, &seeds(&[("cardiomegaly", &["enlarged heart"])]));
        let text = exp.lexicon.to_tsv();
        assert!(text.starts_with("cardiomegaly\theart/cardiomegaly\tcanonical\n"));
        let back = TerminologyLexicon::from_tsv(&text, &t).unwrap();
        assert_eq!(back, exp.lexicon);
        assert!(matches!(
            TerminologyLexicon::from_tsv("x\theart/unknown\tmanual\n", &t),
            Err(Error::UnknownId(_))
        ));
    }
}
