//! Hierarchical multi-turn report population and the metric suite.
//!
//! Metric conventions:
//! - per-option F1 comes from corpus-wide confusion counts; a question that
//!   was never asked contributes negatives for all its options;
//! - macro averages skip options with no gold and no predicted positives;
//!   a level with no such option scores 1.0 (nothing to get wrong);
//! - `overall_f1` is the macro average over options of all levels.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backbone::{ImageInput, QuestionContext};
use crate::error::{Error, Result};
use crate::knowledge_base::PrototypeBank;
use crate::template::{traversal_order, Question, StructuredReport, Template};

/// Anything that scores the global answer space for one question turn.
pub trait ReportModel {
    fn logits(
        &self,
        image: &ImageInput,
        context: &QuestionContext,
        question: &Question,
        bank: &PrototypeBank,
    ) -> Result<Vec<f64>>;
}

/// Single-choice: argmax over the question's options (lowest index wins
/// ties). Multi-select: every option with logit > 0, i.e. sigmoid > 0.5.
pub fn decide(question: &Question, template: &Template, logits: &[f64]) -> Vec<String> {
    let scored = question
        .option_ids
        .iter()
        .map(|o| (o, logits[template.option_position(o).expect("validated template")]));
    if question.is_single_choice() {
        let mut best: Option<(&String, f64)> = None;
        for (o, z) in scored {
            if best.is_none_or(|(_, bz)| z > bz) {
                best = Some((o, z));
            }
        }
        best.map(|(o, _)| vec![o.clone()]).unwrap_or_default()
    } else {
        scored.filter(|(_, z)| *z > 0.0).map(|(o, _)| o.clone()).collect()
    }
}

/// Walks the template in traversal order, asking only open questions and
/// feeding every earlier answer back as context.
pub fn populate_report(
    image: &ImageInput,
    template: &Template,
    model: &dyn ReportModel,
    bank: &PrototypeBank,
) -> Result<StructuredReport> {
    let mut report = StructuredReport::new(image.study_id.clone());
    let mut history: Vec<(String, Vec<String>)> = Vec::new();
    for question in traversal_order(template) {
        if !template.is_open(question, &report.answers) {
            continue;
        }
        let context = QuestionContext::new(template, question, history.clone());
        let logits = model.logits(image, &context, question, bank)?;
        if logits.len() != template.answer_dim() {
            return Err(Error::dim("report model logits", template.answer_dim(), logits.len()));
        }
        let chosen = decide(question, template, &logits);
        report.answer(&question.id, chosen.iter().cloned());
        history.push((question.id.clone(), chosen));
    }
    Ok(report)
}

fn align<'a>(
    predicted: &'a [StructuredReport],
    gold: &'a [StructuredReport],
) -> Result<Vec<(&'a StructuredReport, &'a StructuredReport)>> {
    let mut by_id: HashMap<&str, &StructuredReport> = HashMap::with_capacity(predicted.len());
    for p in predicted {
        if by_id.insert(p.study_id.as_str(), p).is_some() {
            return Err(Error::Alignment(format!("duplicate predicted study `{}`", p.study_id)));
        }
    }
    if predicted.len() != gold.len() {
        return Err(Error::Alignment(format!(
            "{} predicted reports vs {} gold reports",
            predicted.len(),
            gold.len()
        )));
    }
    let mut seen = HashSet::with_capacity(gold.len());
    gold.iter()
        .map(|g| {
            if !seen.insert(g.study_id.as_str()) {
                return Err(Error::Alignment(format!("duplicate gold study `{}`", g.study_id)));
            }
            by_id
                .get(g.study_id.as_str())
                .map(|p| (*p, g))
                .ok_or_else(|| Error::Alignment(format!("no prediction for study `{}`", g.study_id)))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionConfusion {
    pub option_id: String,
    pub level: u8,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl OptionConfusion {
    /// F1 = 2TP / (2TP + FP + FN); `None` when the option has no support.
    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }
}

/// Corpus-wide confusion counts for every option, in global option order.
pub fn confusion_table(
    predicted: &[StructuredReport],
    gold: &[StructuredReport],
    template: &Template,
) -> Result<Vec<OptionConfusion>> {
    let pairs = align(predicted, gold)?;
    let mut table: Vec<OptionConfusion> = template
        .options()
        .iter()
        .enumerate()
        .map(|(i, o)| OptionConfusion {
            option_id: o.id.clone(),
            level: template.option_level(i),
            ..Default::default()
        })
        .collect();
    for (p, g) in pairs {
        let pred: HashSet<usize> = positions(p, template)?;
        let gold: HashSet<usize> = positions(g, template)?;
        for &i in pred.union(&gold) {
            match (pred.contains(&i), gold.contains(&i)) {
                (true, true) => table[i].tp += 1,
                (true, false) => table[i].fp += 1,
                (false, true) => table[i].fn_ += 1,
                (false, false) => unreachable!(),
            }
        }
    }
    Ok(table)
}

fn positions(report: &StructuredReport, template: &Template) -> Result<HashSet<usize>> {
    report
        .selected_options()
        .map(|o| template.option_position(o).ok_or_else(|| Error::UnknownId(o.clone())))
        .collect()
}

fn macro_from_table(table: &[OptionConfusion], level: Option<u8>) -> f64 {
    let scores: Vec<f64> = table
        .iter()
        .filter(|c| level.is_none_or(|l| c.level == l))
        .filter_map(OptionConfusion::f1)
        .collect();
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Macro-F1 over the options of `level` (all levels when `None`).
pub fn macro_f1(
    predicted: &[StructuredReport],
    gold: &[StructuredReport],
    template: &Template,
    level: Option<u8>,
) -> Result<f64> {
    let table = confusion_table(predicted, gold, template)?;
    Ok(macro_from_table(&table, level))
}

/// Fraction of studies whose predicted report equals gold exactly.
pub fn report_accuracy(predicted: &[StructuredReport], gold: &[StructuredReport]) -> Result<f64> {
    let pairs = align(predicted, gold)?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("report_accuracy needs at least one study"));
    }
    let exact = pairs.iter().filter(|(p, g)| p.answers == g.answers).count();
    Ok(exact as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub overall_f1: f64,
    pub l1_f1: f64,
    pub l2_f1: f64,
    pub l3_f1: f64,
    pub report_accuracy: f64,
}

pub fn evaluate(
    predicted: &[StructuredReport],
    gold: &[StructuredReport],
    template: &Template,
) -> Result<EvalMetrics> {
    let table = confusion_table(predicted, gold, template)?;
    Ok(EvalMetrics {
        overall_f1: macro_from_table(&table, None),
        l1_f1: macro_from_table(&table, Some(1)),
        l2_f1: macro_from_table(&table, Some(2)),
        l3_f1: macro_from_table(&table, Some(3)),
        report_accuracy: report_accuracy(predicted, gold)?,
    })
}

/// Structured metrics output: the five metric fields, per-level coverage
/// counts when a bank is known, and optionally the confusion dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: Option<u64>,
    pub studies: usize,
    pub metrics: EvalMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<Vec<crate::knowledge_base::LevelCoverage>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub confusion: Vec<OptionConfusion>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

/// Per-question answer counts; handy when eyeballing populated reports.
pub fn answer_histogram(reports: &[StructuredReport]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in reports {
        for o in r.selected_options() {
            *counts.entry(o.clone()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::tests::effusion_template;

    fn report(id: &str, answers: &[(&str, &[&str])]) -> StructuredReport {
        let mut r = StructuredReport::new(id);
        for (q, opts) in answers {
            r.answer(q, opts.iter().copied());
        }
        r
    }

    fn gold_set() -> Vec<StructuredReport> {
        vec![
            report(
                "a",
                &[
                    ("lung", &["lung/lung abnormality"]),
                    ("effusion", &["effusion/pleural effusion"]),
                    ("side", &["side/left"]),
                    ("heart", &["heart/cardiomegaly"]),
                ],
            ),
            report("b", &[("lung", &["lung/no lung abnormality"]), ("heart", &["heart/normal heart size"])]),
        ]
    }

    #[test]
    fn identical_sets_score_one() {
        let t = effusion_template();
        let g = gold_set();
        let m = evaluate(&g, &g, &t).unwrap();
        assert_eq!(m, EvalMetrics {
            overall_f1: 1.0,
            l1_f1: 1.0,
            l2_f1: 1.0,
            l3_f1: 1.0,
            report_accuracy: 1.0
        });
    }

    #[test]
    fn empty_predictions_score_zero_where_gold_positive() {
        let t = effusion_template();
        let g = gold_set();
        let p: Vec<_> = g.iter().map(|r| StructuredReport::new(r.study_id.clone())).collect();
        let table = confusion_table(&p, &g, &t).unwrap();
        for c in table.iter().filter(|c| c.fn_ > 0) {
            assert_eq!(c.f1(), Some(0.0));
        }
        assert_eq!(macro_f1(&p, &g, &t, Some(3)).unwrap(), 0.0);
    }

    /// Hand-built counts: option A has TP=1 FP=1 FN=0, option B TP=2 FP=0
    /// FN=2. Per-option F1 by hand: 2/3 and 4/6.
    #[test]
    fn hand_computed_macro() {
        let t = Template::new(
            "t",
            vec![crate::template::tests::q("x", 1, &["opt a", "opt b"], None)],
        )
        .unwrap();
        let a = "x/opt a";
        let b = "x/opt b";
        let gold = vec![
            report("1", &[("x", &[a, b])]),
            report("2", &[("x", &[b])]),
            report("3", &[("x", &[b])]),
            report("4", &[("x", &[b])]),
        ];
        let pred = vec![
            report("1", &[("x", &[a, b])]),
            report("2", &[("x", &[a, b])]),
            report("3", &[]),
            report("4", &[]),
        ];
        let table = confusion_table(&pred, &gold, &t).unwrap();
        assert_eq!((table[0].tp, table[0].fp, table[0].fn_), (1, 1, 0));
        assert_eq!((table[1].tp, table[1].fp, table[1].fn_), (2, 0, 2));
        let f = macro_f1(&pred, &gold, &t, Some(1)).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_counts_exact_matches() {
        let gold: Vec<_> = (0..4).map(|i| report(&i.to_string(), &[("heart", &["heart/cardiomegaly"])])).collect();
        let mut pred = gold.clone();
        pred[2].answer("heart", ["heart/normal heart size"]);
        assert_eq!(report_accuracy(&pred, &gold).unwrap(), 0.75);
    }

    /// Oracle: count gold reports that are empty.
    #[test]
    fn empty_predictions_accuracy_equals_empty_gold_fraction() {
        let gold = vec![
            report("1", &[]),
            report("2", &[("heart", &["heart/cardiomegaly"])]),
            report("3", &[]),
        ];
        let pred: Vec<_> = gold.iter().map(|r| StructuredReport::new(r.study_id.clone())).collect();
        let expected = gold.iter().filter(|g| g.is_empty()).count() as f64 / gold.len() as f64;
        assert_eq!(report_accuracy(&pred, &gold).unwrap(), expected);
    }

    #[test]
    fn misaligned_sets_rejected() {
        let g = gold_set();
        let p = vec![report("a", &[]), report("zzz", &[])];
        assert!(matches!(report_accuracy(&p, &g), Err(Error::Alignment(_))));
    }

    #[test]
    fn single_choice_tie_takes_lowest_index() {
        let t = effusion_template();
        let heart = t.question("heart").unwrap();
        let logits = vec![0.0; t.answer_dim()];
        assert_eq!(decide(heart, &t, &logits), vec!["heart/cardiomegaly".to_string()]);
        let side = t.question("side").unwrap();
        assert!(decide(side, &t, &logits).is_empty());
    }
}
