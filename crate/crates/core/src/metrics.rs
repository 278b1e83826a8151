//! Answer, supporting-fact and joint metrics, plus the sub-question outcome table.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::QAExample;
use crate::error::{Error, Result};

/// Lowercase, strip punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn answer_em_f1(predicted: &str, gold: &str) -> AnswerScore {
    let p = normalize_answer(predicted);
    let g = normalize_answer(gold);
    let em = if p == g { 1.0 } else { 0.0 };
    let special = |s: &str| matches!(s, "yes" | "no" | "noanswer");
    if (special(&p) || special(&g)) && p != g {
        return AnswerScore { em, ..AnswerScore::default() };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in g.split_whitespace() {
        *counts.entry(t).or_default() += 1;
    }
    let p_toks: Vec<&str> = p.split_whitespace().collect();
    let g_len = g.split_whitespace().count();
    let mut same = 0usize;
    for t in &p_toks {
        if let Some(c) = counts.get_mut(t).filter(|c| **c > 0) {
            *c -= 1;
            same += 1;
        }
    }
    if same == 0 {
        return AnswerScore { em, ..AnswerScore::default() };
    }
    let precision = same as f64 / p_toks.len() as f64;
    let recall = same as f64 / g_len as f64;
    AnswerScore {
        em,
        f1: harmonic(precision, recall),
        precision,
        recall,
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportJoint {
    pub sup_em: f64,
    pub sup_f1: f64,
    pub sup_precision: f64,
    pub sup_recall: f64,
    pub joint_em: f64,
    pub joint_f1: f64,
}

pub fn support_and_joint(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>, ans: &AnswerScore) -> SupportJoint {
    let tp = pred.intersection(gold).count() as f64;
    let fp = pred.len() as f64 - tp;
    let fn_ = gold.len() as f64 - tp;
    let sup_precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let sup_recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let sup_em = if fp + fn_ == 0.0 { 1.0 } else { 0.0 };
    SupportJoint {
        sup_em,
        sup_f1: harmonic(sup_precision, sup_recall),
        sup_precision,
        sup_recall,
        joint_em: ans.em * sup_em,
        joint_f1: harmonic(ans.precision * sup_precision, ans.recall * sup_recall),
    }
}

/// One model output, as written to a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
    pub supports: Vec<usize>,
    #[serde(default)]
    pub sub_answers: Vec<String>,
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.display().to_string(),
            line: i + 1,
            field: "prediction".into(),
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub answer: AnswerScore,
    pub support: SupportJoint,
}

/// Aggregate scores in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub ans_em: f64,
    pub ans_f1: f64,
    pub sup_em: f64,
    pub sup_f1: f64,
    pub joint_em: f64,
    pub joint_f1: f64,
    pub per_example: Vec<ExampleScore>,
}

impl MetricsReport {
    pub fn from_scores(per_example: Vec<ExampleScore>) -> Self {
        let n = per_example.len();
        let avg = |f: &dyn Fn(&ExampleScore) -> f64| {
            if n == 0 {
                0.0
            } else {
                100.0 * per_example.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricsReport {
            count: n,
            ans_em: avg(&|e| e.answer.em),
            ans_f1: avg(&|e| e.answer.f1),
            sup_em: avg(&|e| e.support.sup_em),
            sup_f1: avg(&|e| e.support.sup_f1),
            joint_em: avg(&|e| e.support.joint_em),
            joint_f1: avg(&|e| e.support.joint_f1),
            per_example,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "examples {}\nans_em {:.4}\nans_f1 {:.4}\nsup_em {:.4}\nsup_f1 {:.4}\njoint_em {:.4}\njoint_f1 {:.4}\n",
            self.count, self.ans_em, self.ans_f1, self.sup_em, self.sup_f1, self.joint_em, self.joint_f1
        )
    }
}

/// Scores predictions against gold examples; gold examples without a
/// prediction score zero.
pub fn evaluate(preds: &[Prediction], gold: &[QAExample]) -> MetricsReport {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let scores = gold
        .iter()
        .map(|g| {
            let gold_sup = g.supports();
            let (answer, support) = match by_id.get(g.id.as_str()) {
                Some(p) => {
                    let a = answer_em_f1(&p.answer, &g.answer);
                    let s = support_and_joint(&p.supports.iter().copied().collect(), &gold_sup, &a);
                    (a, s)
                }
                None => (AnswerScore::default(), SupportJoint::default()),
            };
            ExampleScore {
                id: g.id.clone(),
                answer,
                support,
            }
        })
        .collect();
    MetricsReport::from_scores(scores)
}

pub const OUTCOME_LABELS: [&str; 8] = ["ccc", "ccw", "cwc", "cww", "wcc", "wcw", "wwc", "www"];

/// Percentages of examples per (question, sub-question 1, sub-question 2)
/// correctness pattern, rows in `OUTCOME_LABELS` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubQuestionTable {
    pub rows: [f64; 8],
}

fn outcome_index(q: bool, s1: bool, s2: bool) -> usize {
    (usize::from(!q) << 2) | (usize::from(!s1) << 1) | usize::from(!s2)
}

impl SubQuestionTable {
    pub fn from_rows(rows: [f64; 8]) -> Self {
        SubQuestionTable { rows }
    }

    pub fn row(&self, label: &str) -> f64 {
        let i = OUTCOME_LABELS.iter().position(|l| *l == label).expect("known outcome label");
        self.rows[i]
    }

    /// Share of parent questions answered correctly when both sub-questions are.
    pub fn both_correct_rate(&self) -> f64 {
        let (ccc, wcc) = (self.row("ccc"), self.row("wcc"));
        if ccc + wcc > 0.0 {
            100.0 * ccc / (ccc + wcc)
        } else {
            0.0
        }
    }

    /// Share of correct parent questions that have exactly one correct sub-question.
    pub fn one_correct_rate(&self) -> f64 {
        let denom = self.row("ccc") + self.row("ccw") + self.row("cwc") + self.row("cww");
        if denom > 0.0 {
            100.0 * (self.row("ccw") + self.row("cwc")) / denom
        } else {
            0.0
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("outcome,percent\n");
        for (l, v) in OUTCOME_LABELS.iter().zip(self.rows) {
            let _ = writeln!(s, "{l},{v:.4}");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubQuestionAnalysis {
    pub table: SubQuestionTable,
    pub both_correct_rate: f64,
    pub one_correct_rate: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Builds the outcome table; `None` entries (missing sub-answers) are excluded.
pub fn subquestion_analysis(triples: &[Option<(bool, bool, bool)>]) -> SubQuestionAnalysis {
    let mut counts = [0usize; 8];
    let mut excluded = 0;
    for t in triples {
        match t {
            Some((q, a, b)) => counts[outcome_index(*q, *a, *b)] += 1,
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("sub-question analysis excluded {excluded} examples without sub-answers");
    }
    let included: usize = counts.iter().sum();
    let rows = counts.map(|c| if included == 0 { 0.0 } else { 100.0 * c as f64 / included as f64 });
    let table = SubQuestionTable::from_rows(rows);
    SubQuestionAnalysis {
        table,
        both_correct_rate: table.both_correct_rate(),
        one_correct_rate: table.one_correct_rate(),
        included,
        excluded,
    }
}

/// EM correctness triples for multi-hop examples that have two gold
/// sub-questions and two predicted sub-answers.
pub fn correctness_triples(preds: &[Prediction], gold: &[QAExample]) -> Vec<Option<(bool, bool, bool)>> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    gold.iter()
        .filter(|g| g.kind.is_multi_hop())
        .map(|g| {
            let p = by_id.get(g.id.as_str())?;
            if g.subquestions.len() < 2 || p.sub_answers.len() < 2 {
                return None;
            }
            let ok = |a: &str, b: &str| answer_em_f1(a, b).em == 1.0;
            Some((
                ok(&p.answer, &g.answer),
                ok(&p.sub_answers[0], &g.subquestions[0].answer),
                ok(&p.sub_answers[1], &g.subquestions[1].answer),
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_and_special_answers() {
        assert_eq!(normalize_answer("  The  Eiffel-Tower! "), "eiffeltower");
        assert_eq!(answer_em_f1("yes", "no").f1, 0.0);
        assert_eq!(answer_em_f1("no", "no city").f1, 0.0);
        let s = answer_em_f1("kinshasa city", "kinshasa");
        assert_eq!(s.em, 0.0);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn joint_absorbs_zero_answer() {
        let gold: BTreeSet<usize> = [0, 1].into();
        let sj = support_and_joint(&gold, &gold, &AnswerScore::default());
        assert_eq!(sj.sup_f1, 1.0);
        assert_eq!(sj.joint_f1, 0.0);
    }

    #[test]
    fn outcome_indices_follow_label_order() {
        let labels: Vec<String> = (0..8)
            .map(|i| {
                let bits = [i & 4 == 0, i & 2 == 0, i & 1 == 0];
                bits.iter().map(|&c| if c { 'c' } else { 'w' }).collect()
            })
            .collect();
        assert_eq!(labels, OUTCOME_LABELS);
        for (i, l) in OUTCOME_LABELS.iter().enumerate() {
            let c: Vec<bool> = l.chars().map(|c| c == 'c').collect();
            assert_eq!(outcome_index(c[0], c[1], c[2]), i);
        }
    }

    #[test]
    fn degenerate_all_wrong_table() {
        let a = subquestion_analysis(&[Some((false, false, false)); 7]);
        assert_eq!(a.table.row("www"), 100.0);
        assert_eq!(a.both_correct_rate, 0.0);
        assert_eq!(a.one_correct_rate, 0.0);
        let b = subquestion_analysis(&[None, Some((true, true, true))]);
        assert_eq!(b.excluded, 1);
        assert_eq!(b.table.row("ccc"), 100.0);
    }
}
