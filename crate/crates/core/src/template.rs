//! Hierarchical structured-reporting templates and report value objects.
//!
//! A [`Template`] is a forest of questions on three levels. Level-1 questions
//! are always asked; a level-2 or level-3 question is asked only when its
//! trigger (a parent question together with one of the parent's answer
//! options) is among the answers already given. Every answer option has a
//! globally unique id of the form `questionId/optionText` and a global index
//! into the answer space shared by logits, prototypes and targets.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::terminology::normalize_phrase;

pub const MAX_LEVEL: u8 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerMode {
    SingleChoice,
    #[default]
    MultiSelect,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trigger {
    pub parent_question: String,
    /// Full option id of the parent answer that opens this question.
    pub parent_option: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub level: u8,
    pub text: String,
    pub mode: AnswerMode,
    pub option_ids: Vec<String>,
    pub trigger: Option<Trigger>,
}

impl Question {
    pub fn is_single_choice(&self) -> bool {
        self.mode == AnswerMode::SingleChoice
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerOption {
    pub id: String,
    pub canonical_text: String,
    pub question_id: String,
}

pub fn option_id(question_id: &str, option_text: &str) -> String {
    format!("{question_id}/{option_text}")
}

/// A validated, immutable template.
#[derive(Clone, Debug)]
pub struct Template {
    pub id: String,
    questions: Vec<Question>,
    options: Vec<AnswerOption>,
    question_index: HashMap<String, usize>,
    option_index: HashMap<String, usize>,
    option_level: Vec<u8>,
    /// (parent question index, parent option id) -> child question indices
    children: HashMap<(usize, String), Vec<usize>>,
}

impl PartialEq for Template {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.questions == other.questions && self.options == other.options
    }
}

impl Template {
    /// Builds and validates a template from questions in document order.
    ///
    /// Option texts are normalized; option ids are derived as
    /// `questionId/normalizedText`. Global option indices follow document
    /// order of questions, then option order within each question.
    pub fn new(id: impl Into<String>, specs: Vec<QuestionSpec>) -> Result<Self> {
        let mut questions = Vec::with_capacity(specs.len());
        let mut options = Vec::new();
        let mut question_index = HashMap::new();
        let mut option_index = HashMap::new();
        let mut canonical_seen: HashMap<String, String> = HashMap::new();

        for spec in &specs {
            if question_index.contains_key(&spec.id) {
                return Err(validation("duplicate question id", [&spec.id]));
            }
            if spec.id.is_empty() || spec.id.contains('/') {
                return Err(validation("question id must be non-empty and free of '/'", [&spec.id]));
            }
            if !(1..=MAX_LEVEL).contains(&spec.level) {
                return Err(validation("question level must be 1, 2 or 3", [&spec.id]));
            }
            if spec.options.is_empty() {
                return Err(validation("question has no answer options", [&spec.id]));
            }
            let mut option_ids = Vec::with_capacity(spec.options.len());
            for raw in &spec.options {
                let text = normalize_phrase(raw);
                if text.is_empty() {
                    return Err(validation("empty option text", [&spec.id]));
                }
                let oid = option_id(&spec.id, &text);
                if option_index.contains_key(&oid) {
                    return Err(validation("duplicate option id", [&oid]));
                }
                if let Some(other) = canonical_seen.get(&text) {
                    return Err(validation(
                        "canonical option text used by two options",
                        [other, &oid],
                    ));
                }
                canonical_seen.insert(text.clone(), oid.clone());
                option_index.insert(oid.clone(), options.len());
                options.push(AnswerOption {
                    id: oid.clone(),
                    canonical_text: text,
                    question_id: spec.id.clone(),
                });
                option_ids.push(oid);
            }
            question_index.insert(spec.id.clone(), questions.len());
            questions.push(Question {
                id: spec.id.clone(),
                level: spec.level,
                text: spec.text.trim().to_string(),
                mode: spec.mode,
                option_ids,
                trigger: None,
            });
        }

        // Second pass: resolve triggers now that every question is known.
        let mut children: HashMap<(usize, String), Vec<usize>> = HashMap::new();
        for (idx, spec) in specs.iter().enumerate() {
            match (&spec.trigger, spec.level) {
                (None, 1) => {}
                (Some(_), 1) => {
                    return Err(validation("level-1 question cannot have a trigger", [&spec.id]))
                }
                (None, _) => {
                    return Err(validation("level-2/3 question needs a trigger", [&spec.id]))
                }
                (Some(t), level) => {
                    let Some(&parent) = question_index.get(&t.parent_question) else {
                        return Err(validation("trigger names unknown parent question", [
                            &spec.id,
                            &t.parent_question,
                        ]));
                    };
                    if questions[parent].level + 1 != level {
                        return Err(validation("parent must sit exactly one level above", [
                            &spec.id,
                            &t.parent_question,
                        ]));
                    }
                    let parent_option = option_id(&t.parent_question, &normalize_phrase(&t.parent_option));
                    if !questions[parent].option_ids.contains(&parent_option) {
                        return Err(validation("trigger names an option the parent does not offer", [
                            &spec.id,
                            &parent_option,
                        ]));
                    }
                    children
                        .entry((parent, parent_option.clone()))
                        .or_default()
                        .push(idx);
                    questions[idx].trigger = Some(Trigger {
                        parent_question: t.parent_question.clone(),
                        parent_option,
                    });
                }
            }
        }

        let option_level = options
            .iter()
            .map(|o| questions[question_index[&o.question_id]].level)
            .collect();

        Ok(Template {
            id: id.into(),
            questions,
            options,
            question_index,
            option_index,
            option_level,
            children,
        })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn options(&self) -> &[AnswerOption] {
        &self.options
    }

    /// Size of the global answer space.
    pub fn answer_dim(&self) -> usize {
        self.options.len()
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.question_index.get(id).map(|&i| &self.questions[i])
    }

    pub fn question_position(&self, id: &str) -> Option<usize> {
        self.question_index.get(id).copied()
    }

    pub fn option(&self, id: &str) -> Option<&AnswerOption> {
        self.option_index.get(id).map(|&i| &self.options[i])
    }

    pub fn option_position(&self, id: &str) -> Option<usize> {
        self.option_index.get(id).copied()
    }

    /// Level of the question owning the option at global index `idx`.
    pub fn option_level(&self, idx: usize) -> u8 {
        self.option_level[idx]
    }

    /// Questions opened by answering `option` at `question`.
    pub fn children_of(&self, question: &str, option: &str) -> &[usize] {
        self.question_index
            .get(question)
            .and_then(|&q| self.children.get(&(q, option.to_string())))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Whether selecting `option` opens at least one deeper question.
    pub fn is_trigger_option(&self, question: &str, option: &str) -> bool {
        !self.children_of(question, option).is_empty()
    }

    pub fn level_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for q in &self.questions {
            counts[(q.level - 1) as usize] += 1;
        }
        counts
    }

    /// True when the question would be asked given the answers so far.
    pub fn is_open(&self, question: &Question, answers: &BTreeMap<String, BTreeSet<String>>) -> bool {
        match &question.trigger {
            None => true,
            Some(t) => answers
                .get(&t.parent_question)
                .is_some_and(|sel| sel.contains(&t.parent_option)),
        }
    }

    pub fn to_spec(&self) -> Vec<QuestionSpec> {
        self.questions
            .iter()
            .map(|q| QuestionSpec {
                id: q.id.clone(),
                level: q.level,
                text: q.text.clone(),
                mode: q.mode,
                options: q
                    .option_ids
                    .iter()
                    .map(|o| self.options[self.option_index[o]].canonical_text.clone())
                    .collect(),
                trigger: q.trigger.as_ref().map(|t| TriggerSpec {
                    parent_question: t.parent_question.clone(),
                    parent_option: self.options[self.option_index[&t.parent_option]]
                        .canonical_text
                        .clone(),
                }),
            })
            .collect()
    }
}

fn validation<'a>(message: &str, ids: impl IntoIterator<Item = &'a String>) -> Error {
    Error::Validation {
        message: message.to_string(),
        ids: ids.into_iter().cloned().collect(),
    }
}

/// On-disk record for one question. Options are listed by text; the trigger
/// names the parent option by its text as well.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub id: String,
    pub level: u8,
    pub text: String,
    #[serde(default)]
    pub mode: AnswerMode,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<TriggerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub parent_question: String,
    pub parent_option: String,
}

#[derive(Serialize, Deserialize)]
struct TemplateFile {
    id: String,
    questions: Vec<QuestionSpec>,
}

/// Parses and validates a template document (JSON).
pub fn load_template(source: &str) -> Result<Template> {
    let file: TemplateFile = serde_json::from_str(source)?;
    Template::new(file.id, file.questions)
}

pub fn serialize_template(template: &Template) -> String {
    let file = TemplateFile {
        id: template.id.clone(),
        questions: template.to_spec(),
    };
    let mut out = serde_json::to_string_pretty(&file).expect("template serializes");
    out.push('\n');
    out
}

/// Parents before children: roots in document order, each followed
/// depth-first by the questions it opens (children in document order).
pub fn traversal_order(template: &Template) -> Vec<&Question> {
    let qs = template.questions();
    let mut kids: Vec<Vec<usize>> = vec![Vec::new(); qs.len()];
    for (idx, q) in qs.iter().enumerate() {
        if let Some(t) = &q.trigger {
            kids[template.question_index[&t.parent_question]].push(idx);
        }
    }
    let mut order = Vec::with_capacity(qs.len());
    let mut stack: Vec<usize> = (0..qs.len()).filter(|&i| qs[i].trigger.is_none()).rev().collect();
    while let Some(i) = stack.pop() {
        order.push(&qs[i]);
        stack.extend(kids[i].iter().rev());
    }
    order
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredReport {
    pub study_id: String,
    pub answers: BTreeMap<String, BTreeSet<String>>,
}

impl StructuredReport {
    pub fn new(study_id: impl Into<String>) -> Self {
        StructuredReport {
            study_id: study_id.into(),
            answers: BTreeMap::new(),
        }
    }

    /// Records the selection for a question; empty selections are not stored.
    pub fn answer<I, S>(&mut self, question_id: &str, options: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = options.into_iter().map(Into::into).collect();
        if set.is_empty() {
            self.answers.remove(question_id);
        } else {
            self.answers.insert(question_id.to_string(), set);
        }
    }

    pub fn selected(&self, question_id: &str) -> Option<&BTreeSet<String>> {
        self.answers.get(question_id)
    }

    /// All selected option ids across questions.
    pub fn selected_options(&self) -> impl Iterator<Item = &String> {
        self.answers.values().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViolationRule {
    /// Answered although the trigger is not among the parent's answers.
    Ungated,
    /// Single-choice question without exactly one selection.
    Multiplicity,
    /// Option belongs to a different question.
    ForeignOption,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Violation {
    pub question_id: String,
    pub rule: ViolationRule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}", self.question_id, self.rule)
    }
}

pub fn check_consistency(report: &StructuredReport, template: &Template) -> Result<Vec<Violation>> {
    let mut violations = Vec::new();
    for (qid, selected) in &report.answers {
        let question = template
            .question(qid)
            .ok_or_else(|| Error::UnknownId(qid.clone()))?;
        for oid in selected {
            let option = template
                .option(oid)
                .ok_or_else(|| Error::UnknownId(oid.clone()))?;
            if option.question_id != *qid {
                violations.push(Violation {
                    question_id: qid.clone(),
                    rule: ViolationRule::ForeignOption,
                });
            }
        }
        if question.is_single_choice() && selected.len() != 1 {
            violations.push(Violation {
                question_id: qid.clone(),
                rule: ViolationRule::Multiplicity,
            });
        }
        if !template.is_open(question, &report.answers) {
            violations.push(Violation {
                question_id: qid.clone(),
                rule: ViolationRule::Ungated,
            });
        }
    }
    Ok(violations)
}

/// Sanity check used by loaders: every id in the report exists.
pub fn report_ids_known(report: &StructuredReport, template: &Template) -> Result<()> {
    let mut seen = HashSet::new();
    for (qid, selected) in &report.answers {
        template.question(qid).ok_or_else(|| Error::UnknownId(qid.clone()))?;
        for oid in selected {
            if seen.insert(oid) {
                template.option(oid).ok_or_else(|| Error::UnknownId(oid.clone()))?;
            }
        }
    }
    Ok(())
}

/// One report per line (JSON Lines).
pub fn write_reports(reports: &[StructuredReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}

pub fn read_reports(source: &str) -> Result<Vec<StructuredReport>> {
    source
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
