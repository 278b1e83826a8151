//! Synthetic fact worlds, single-hop and two-hop QA examples, and dataset
//! files (native JSON lines plus a HotpotQA-format reader).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::vocab::{self, Vocab};

/// A functional relation with its question noun and sentence template.
/// Templates are whitespace-separated tokens with `{s}`/`{o}` slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Relation {
    pub name: &'static str,
    pub noun: &'static str,
    pub template: &'static str,
}

pub const RELATIONS: [Relation; 8] = [
    Relation { name: "born_in", noun: "birthplace", template: "{s} was born in {o} ." },
    Relation { name: "capital", noun: "capital", template: "the capital of {s} is {o} ." },
    Relation { name: "founder", noun: "founder", template: "{s} was founded by {o} ." },
    Relation { name: "location", noun: "location", template: "{s} is located in {o} ." },
    Relation { name: "leader", noun: "leader", template: "{o} leads {s} ." },
    Relation { name: "spouse", noun: "spouse", template: "{s} is married to {o} ." },
    Relation { name: "mentor", noun: "mentor", template: "{s} studied under {o} ." },
    Relation { name: "employer", noun: "employer", template: "{s} works for {o} ." },
];

const QUESTION_WORDS: [&str; 12] = [
    "what", "which", "is", "the", "of", "?", "do", "and", "share", "have", "same", "yes",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub entities: Vec<String>,
    pub relation_count: usize,
    pub facts: Vec<FactTriple>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Comparison,
    Bridge,
    #[serde(rename = "singlehop")]
    SingleHop,
}

impl QuestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Comparison => "comparison",
            QuestionKind::Bridge => "bridge",
            QuestionKind::SingleHop => "singlehop",
        }
    }

    pub fn is_multi_hop(self) -> bool {
        self != QuestionKind::SingleHop
    }
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "comparison" => Ok(QuestionKind::Comparison),
            "bridge" => Ok(QuestionKind::Bridge),
            "singlehop" => Ok(QuestionKind::SingleHop),
            other => Err(Error::Invalid(format!("unknown question type `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub question: Vec<String>,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QAExample {
    pub id: String,
    pub kind: QuestionKind,
    pub question: Vec<String>,
    pub sentences: Vec<Vec<String>>,
    pub support_labels: Vec<bool>,
    /// `yes`, `no`, or the answer span text (space-joined tokens).
    pub answer: String,
    pub subquestions: Vec<SubQuestion>,
    /// Indices of the supporting sentences in reasoning order.
    pub support_order: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnswerKind {
    Yes,
    No,
    Span,
}

impl AnswerKind {
    pub fn index(self) -> usize {
        match self {
            AnswerKind::Yes => 0,
            AnswerKind::No => 1,
            AnswerKind::Span => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => AnswerKind::Yes,
            1 => AnswerKind::No,
            _ => AnswerKind::Span,
        }
    }

    pub fn of(answer: &str) -> Self {
        match answer {
            "yes" => AnswerKind::Yes,
            "no" => AnswerKind::No,
            _ => AnswerKind::Span,
        }
    }
}

impl QAExample {
    pub fn answer_kind(&self) -> AnswerKind {
        AnswerKind::of(&self.answer)
    }

    pub fn supports(&self) -> BTreeSet<usize> {
        self.support_labels
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    /// Sentences of the reasoning chain, in order.
    pub fn support_chain(&self) -> Vec<&[String]> {
        self.support_order.iter().map(|&i| self.sentences[i].as_slice()).collect()
    }

    /// Flattened context position (sentence markers excluded) of the gold
    /// span: the first occurrence of the answer tokens, searching the chain's
    /// sentences from last to first, then the rest of the context.
    pub fn gold_span(&self) -> Option<(usize, usize)> {
        if self.answer_kind() != AnswerKind::Span {
            return None;
        }
        let target: Vec<&str> = self.answer.split_whitespace().collect();
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut acc = 0;
        for s in &self.sentences {
            offsets.push(acc);
            acc += s.len();
        }
        let order = self
            .support_order
            .iter()
            .rev()
            .copied()
            .chain((0..self.sentences.len()).filter(|i| !self.support_order.contains(i)));
        for si in order {
            let s = &self.sentences[si];
            if s.len() < target.len() {
                continue;
            }
            for start in 0..=s.len() - target.len() {
                if s[start..start + target.len()].iter().map(String::as_str).eq(target.iter().copied()) {
                    let a = offsets[si] + start;
                    return Some((a, a + target.len() - 1));
                }
            }
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() {
            return Err(Error::Invalid(format!("{}: empty question", self.id)));
        }
        if self.sentences.len() != self.support_labels.len() {
            return Err(Error::Invalid(format!(
                "{}: {} sentences but {} support labels",
                self.id,
                self.sentences.len(),
                self.support_labels.len()
            )));
        }
        for &i in &self.support_order {
            if !self.support_labels.get(i).copied().unwrap_or(false) {
                return Err(Error::Invalid(format!(
                    "{}: support_order entry {i} is not a labelled support",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenOptions {
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Swaps question frame words for synonyms at random.
    pub noise: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            min_distractors: 2,
            max_distractors: 6,
            noise: false,
        }
    }
}

const SYLLABLE_ONSETS: [&str; 15] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "h"];
const SYLLABLE_VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn entity_names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let syllables: Vec<String> = SYLLABLE_ONSETS
        .iter()
        .flat_map(|c| SYLLABLE_VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let reserved: BTreeSet<&str> = RELATIONS
        .iter()
        .flat_map(|r| r.template.split_whitespace().chain([r.noun]))
        .chain(QUESTION_WORDS)
        .chain(["no"])
        .collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = if n > 1500 { 3 } else { 2 };
        let name: String = (0..k).map(|_| syllables[rng.gen_range(0..syllables.len())].as_str()).collect();
        if !reserved.contains(name.as_str()) && seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Builds a random functional fact base.
pub fn generate_world(seed: u64, entity_count: usize, relation_count: usize) -> Result<World> {
    if entity_count < 3 {
        return Err(Error::Invalid(format!(
            "entity count {entity_count} is too small for two-hop chains (need ≥ 3)"
        )));
    }
    if !(2..=RELATIONS.len()).contains(&relation_count) {
        return Err(Error::Invalid(format!(
            "relation count must be in 2..={}, got {relation_count}",
            RELATIONS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = entity_names(&mut rng, entity_count);
    let hubs_per_relation = (entity_count / 8).max(2);
    let hubs: Vec<Vec<usize>> = (0..relation_count)
        .map(|_| (0..hubs_per_relation).map(|_| rng.gen_range(0..entity_count)).collect())
        .collect();
    let target = (entity_count * relation_count * 7).div_ceil(10);
    let mut by_key: HashMap<(usize, usize), usize> = HashMap::new();
    let mut facts = Vec::with_capacity(target);
    let draw_object = |rng: &mut ChaCha8Rng, s: usize, r: usize| loop {
        let o = if rng.gen_bool(0.5) {
            hubs[r][rng.gen_range(0..hubs[r].len())]
        } else {
            rng.gen_range(0..entity_count)
        };
        if o != s {
            break o;
        }
    };
    while facts.len() < target {
        let s = rng.gen_range(0..entity_count);
        let r = rng.gen_range(0..relation_count);
        // functional: a second object for (s, r) is rejected and resampled
        if by_key.contains_key(&(s, r)) {
            continue;
        }
        let o = draw_object(&mut rng, s, r);
        by_key.insert((s, r), o);
        facts.push(FactTriple {
            subject: s,
            relation: r,
            object: o,
        });
    }
    for s in 0..entity_count {
        if (0..relation_count).all(|r| !by_key.contains_key(&(s, r))) {
            let r = rng.gen_range(0..relation_count);
            let o = draw_object(&mut rng, s, r);
            by_key.insert((s, r), o);
            facts.push(FactTriple {
                subject: s,
                relation: r,
                object: o,
            });
        }
    }
    let world = World {
        seed,
        entities,
        relation_count,
        facts,
    };
    debug_assert!(world.is_functional());
    if world.bridge_chains().is_empty() {
        return Err(Error::Invalid("world has no two-hop chain".into()));
    }
    Ok(world)
}

impl World {
    pub fn relations(&self) -> &[Relation] {
        &RELATIONS[..self.relation_count]
    }

    pub fn is_functional(&self) -> bool {
        let mut seen = HashMap::new();
        self.facts
            .iter()
            .all(|f| *seen.entry((f.subject, f.relation)).or_insert(f.object) == f.object)
    }

    pub fn object(&self, subject: usize, relation: usize) -> Option<usize> {
        self.facts
            .iter()
            .find(|f| f.subject == subject && f.relation == relation)
            .map(|f| f.object)
    }

    /// Pairs of fact indices (x r1 b), (b r2 c) with c ∉ {x, b}.
    pub fn bridge_chains(&self) -> Vec<(usize, usize)> {
        let mut by_subject: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, f) in self.facts.iter().enumerate() {
            by_subject.entry(f.subject).or_default().push(i);
        }
        let mut out = Vec::new();
        for (i, f) in self.facts.iter().enumerate() {
            for &j in by_subject.get(&f.object).map(Vec::as_slice).unwrap_or(&[]) {
                let g = &self.facts[j];
                if g.object != f.subject && g.object != f.object {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Fact-index pairs with the same relation over distinct subjects,
    /// split by whether the objects agree.
    pub fn comparison_pairs(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let mut same = Vec::new();
        let mut diff = Vec::new();
        for (i, f) in self.facts.iter().enumerate() {
            for (j, g) in self.facts.iter().enumerate().skip(i + 1) {
                if f.relation == g.relation && f.subject != g.subject {
                    if f.object == g.object {
                        same.push((i, j));
                    } else {
                        diff.push((i, j));
                    }
                }
            }
        }
        (same, diff)
    }

    pub fn render(&self, f: &FactTriple) -> Vec<String> {
        render_template(
            RELATIONS[f.relation].template,
            &self.entities[f.subject],
            &self.entities[f.object],
        )
    }

    /// Every token the generator can emit for this world.
    pub fn vocabulary(&self) -> Vocab {
        let words = RELATIONS[..self.relation_count]
            .iter()
            .flat_map(|r| r.template.split_whitespace().chain([r.noun]))
            .filter(|w| !w.starts_with('{'))
            .chain(QUESTION_WORDS)
            .chain(["no"])
            .map(str::to_string)
            .chain(self.entities.iter().cloned());
        Vocab::from_tokens(words)
    }
}

fn render_template(template: &str, s: &str, o: &str) -> Vec<String> {
    template
        .split_whitespace()
        .map(|t| match t {
            "{s}" => s.to_string(),
            "{o}" => o.to_string(),
            w => w.to_string(),
        })
        .collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn what(rng: &mut ChaCha8Rng, noise: bool) -> &'static str {
    if noise && rng.gen_bool(0.5) {
        "which"
    } else {
        "what"
    }
}

fn single_question(rng: &mut ChaCha8Rng, noise: bool, noun: &str, x: &str) -> Vec<String> {
    words(&format!("{} is the {noun} of {x} ?", what(rng, noise)))
}

/// Generates one example of the requested kind, deterministically from `seed`.
pub fn generate_example(world: &World, kind: QuestionKind, seed: u64, opts: &GenOptions) -> Result<QAExample> {
    if opts.min_distractors > opts.max_distractors {
        return Err(Error::Config("min_distractors > max_distractors".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let ent = |i: usize| world.entities[i].as_str();
    let (chain, question, answer, subquestions, excluded): (Vec<usize>, _, String, _, Vec<usize>) = match kind {
        QuestionKind::SingleHop => {
            let fi = rng.gen_range(0..world.facts.len());
            let f = world.facts[fi];
            let q = single_question(&mut rng, opts.noise, RELATIONS[f.relation].noun, ent(f.subject));
            (vec![fi], q, ent(f.object).to_string(), Vec::new(), vec![f.subject])
        }
        QuestionKind::Bridge => {
            let chains = world.bridge_chains();
            let &(i, j) = chains
                .choose(&mut rng)
                .ok_or_else(|| Error::Invalid("world has no bridge chain".into()))?;
            let (f, g) = (world.facts[i], world.facts[j]);
            let (r1, r2) = (RELATIONS[f.relation].noun, RELATIONS[g.relation].noun);
            let q = words(&format!(
                "{} is the {r2} of the {r1} of {} ?",
                what(&mut rng, opts.noise),
                ent(f.subject)
            ));
            let subs = vec![
                SubQuestion {
                    question: single_question(&mut rng, opts.noise, r1, ent(f.subject)),
                    answer: ent(f.object).to_string(),
                },
                SubQuestion {
                    question: single_question(&mut rng, opts.noise, r2, ent(g.subject)),
                    answer: ent(g.object).to_string(),
                },
            ];
            (vec![i, j], q, ent(g.object).to_string(), subs, vec![f.subject, g.subject])
        }
        QuestionKind::Comparison => {
            let (same, diff) = world.comparison_pairs();
            let want_yes = rng.gen_bool(0.5);
            let pool = if want_yes { &same } else { &diff };
            let &(a, b) = pool.choose(&mut rng).ok_or_else(|| {
                Error::Invalid(format!(
                    "world has no comparison pair with {} objects",
                    if want_yes { "equal" } else { "different" }
                ))
            })?;
            let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
            let (f, g) = (world.facts[a], world.facts[b]);
            let noun = RELATIONS[f.relation].noun;
            let verb = if opts.noise && rng.gen_bool(0.5) { "have" } else { "share" };
            let q = words(&format!(
                "do {} and {} {verb} the same {noun} ?",
                ent(f.subject),
                ent(g.subject)
            ));
            let subs = vec![
                SubQuestion {
                    question: single_question(&mut rng, opts.noise, noun, ent(f.subject)),
                    answer: ent(f.object).to_string(),
                },
                SubQuestion {
                    question: single_question(&mut rng, opts.noise, noun, ent(g.subject)),
                    answer: ent(g.object).to_string(),
                },
            ];
            let ans = if want_yes { "yes" } else { "no" };
            (vec![a, b], q, ans.to_string(), subs, vec![f.subject, g.subject])
        }
    };
    let mut candidates: Vec<usize> = (0..world.facts.len())
        .filter(|i| !chain.contains(i) && !excluded.contains(&world.facts[*i].subject))
        .collect();
    candidates.shuffle(&mut rng);
    let n_distract = rng.gen_range(opts.min_distractors..=opts.max_distractors);
    if candidates.len() < n_distract {
        return Err(Error::Invalid(format!(
            "world has only {} distractor facts, need {n_distract}",
            candidates.len()
        )));
    }
    let mut pool: Vec<(usize, bool)> = chain
        .iter()
        .map(|&i| (i, true))
        .chain(candidates[..n_distract].iter().map(|&i| (i, false)))
        .collect();
    pool.shuffle(&mut rng);
    let sentences: Vec<Vec<String>> = pool.iter().map(|(i, _)| world.render(&world.facts[*i])).collect();
    let support_labels: Vec<bool> = pool.iter().map(|(_, s)| *s).collect();
    let support_order = chain
        .iter()
        .map(|c| pool.iter().position(|(i, _)| i == c).expect("chain fact is in pool"))
        .collect();
    Ok(QAExample {
        id: format!("{kind}-{seed}"),
        kind,
        question,
        sentences,
        support_labels,
        answer,
        subquestions,
        support_order,
    })
}

/// Generates `n` examples cycling through `kinds`, with per-example seeds
/// derived from `base_seed`.
pub fn generate_dataset(
    world: &World,
    kinds: &[QuestionKind],
    n: usize,
    base_seed: u64,
    opts: &GenOptions,
) -> Result<Vec<QAExample>> {
    (0..n)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            generate_example(world, kind, base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64), opts)
        })
        .collect()
}

// ---- symbolic oracle ---------------------------------------------------

fn relation_by_noun(noun: &str) -> Option<usize> {
    RELATIONS.iter().position(|r| r.noun == noun)
}

/// Parses a sentence back into (subject, relation, object) using the fixed templates.
pub fn parse_fact(sentence: &[String]) -> Option<(String, usize, String)> {
    for (ri, r) in RELATIONS.iter().enumerate() {
        let tpl: Vec<&str> = r.template.split_whitespace().collect();
        if tpl.len() != sentence.len() {
            continue;
        }
        let mut s = None;
        let mut o = None;
        let ok = tpl.iter().zip(sentence).all(|(t, w)| match *t {
            "{s}" => {
                s = Some(w.clone());
                true
            }
            "{o}" => {
                o = Some(w.clone());
                true
            }
            lit => lit == w,
        });
        if ok {
            return Some((s?, ri, o?));
        }
    }
    None
}

/// Answers a generated question from the selected sentences alone by
/// parsing them into facts and following the question's relation chain.
/// Returns `None` when the selected text does not determine the answer.
pub fn symbolic_answer(question: &[String], sentences: &[&[String]]) -> Option<String> {
    let facts: HashMap<(String, usize), String> = sentences
        .iter()
        .filter_map(|s| parse_fact(s))
        .map(|(s, r, o)| ((s, r), o))
        .collect();
    let lookup = |x: &str, r: usize| facts.get(&(x.to_string(), r)).cloned();
    let q: Vec<&str> = question.iter().map(String::as_str).collect();
    match q.as_slice() {
        [_, "is", "the", n2, "of", "the", n1, "of", x, "?"] => {
            let b = lookup(x, relation_by_noun(n1)?)?;
            lookup(&b, relation_by_noun(n2)?)
        }
        [_, "is", "the", n, "of", x, "?"] => lookup(x, relation_by_noun(n)?),
        ["do", x, "and", y, _, "the", "same", n, "?"] => {
            let r = relation_by_noun(n)?;
            let (a, b) = (lookup(x, r)?, lookup(y, r)?);
            Some(if a == b { "yes" } else { "no" }.to_string())
        }
        _ => None,
    }
}

// ---- dataset files -----------------------------------------------------

fn to_record(ex: &QAExample) -> Value {
    json!({
        "id": ex.id,
        "type": ex.kind.as_str(),
        "question": ex.question.join(" "),
        "sentences": ex.sentences.iter().map(|s| s.join(" ")).collect::<Vec<_>>(),
        "support_labels": ex.support_labels,
        "answer": ex.answer,
        "subquestions": ex.subquestions.iter().map(|s| json!({
            "question": s.question.join(" "),
            "answer": s.answer,
        })).collect::<Vec<_>>(),
        "support_order": ex.support_order,
    })
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[QAExample]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, &to_record(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

struct RecordCtx<'a> {
    path: &'a str,
    line: usize,
}

impl RecordCtx<'_> {
    fn err(&self, field: &str, detail: impl Into<String>) -> Error {
        Error::Record {
            path: self.path.to_string(),
            line: self.line,
            field: field.to_string(),
            detail: detail.into(),
        }
    }

    fn field<'v>(&self, v: &'v Value, name: &str) -> Result<&'v Value> {
        v.get(name).ok_or_else(|| self.err(name, "missing"))
    }

    fn string(&self, v: &Value, name: &str) -> Result<String> {
        self.field(v, name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(name, "expected a string"))
    }

    fn array<'v>(&self, v: &'v Value, name: &str) -> Result<&'v Vec<Value>> {
        self.field(v, name)?
            .as_array()
            .ok_or_else(|| self.err(name, "expected an array"))
    }
}

fn from_record(v: &Value, ctx: &RecordCtx) -> Result<QAExample> {
    let id = ctx.string(v, "id")?;
    let kind: QuestionKind = ctx
        .string(v, "type")?
        .parse()
        .map_err(|e: Error| ctx.err("type", e.to_string()))?;
    let question = words(&ctx.string(v, "question")?);
    let sentences = ctx
        .array(v, "sentences")?
        .iter()
        .map(|s| s.as_str().map(words).ok_or_else(|| ctx.err("sentences", "expected strings")))
        .collect::<Result<Vec<_>>>()?;
    let support_labels = ctx
        .array(v, "support_labels")?
        .iter()
        .map(|b| b.as_bool().ok_or_else(|| ctx.err("support_labels", "expected booleans")))
        .collect::<Result<Vec<_>>>()?;
    if support_labels.len() != sentences.len() {
        return Err(ctx.err(
            "support_labels",
            format!("{} labels for {} sentences", support_labels.len(), sentences.len()),
        ));
    }
    let answer = ctx.string(v, "answer")?;
    let subquestions = ctx
        .array(v, "subquestions")?
        .iter()
        .map(|s| {
            Ok(SubQuestion {
                question: words(&ctx.string(s, "question").map_err(|_| ctx.err("subquestions", "bad question"))?),
                answer: ctx.string(s, "answer").map_err(|_| ctx.err("subquestions", "bad answer"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let support_order = match v.get("support_order") {
        None => support_labels
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect(),
        Some(o) => o
            .as_array()
            .ok_or_else(|| ctx.err("support_order", "expected an array"))?
            .iter()
            .map(|i| {
                i.as_u64()
                    .map(|i| i as usize)
                    .filter(|&i| support_labels.get(i) == Some(&true))
                    .ok_or_else(|| ctx.err("support_order", "entries must index labelled supports"))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(QAExample {
        id,
        kind,
        question,
        sentences,
        support_labels,
        answer,
        subquestions,
        support_order,
    })
}

/// One example as a single-line JSON record.
pub fn example_to_json(ex: &QAExample) -> String {
    to_record(ex).to_string()
}

/// Parses one JSON record; errors name the field.
pub fn example_from_json(text: &str) -> Result<QAExample> {
    let ctx = RecordCtx { path: "<record>", line: 1 };
    let v: Value = serde_json::from_str(text).map_err(|e| ctx.err("record", e.to_string()))?;
    from_record(&v, &ctx)
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<QAExample>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = RecordCtx {
            path: &shown,
            line: i + 1,
        };
        let v: Value = serde_json::from_str(&line).map_err(|e| ctx.err("record", e.to_string()))?;
        out.push(from_record(&v, &ctx)?);
    }
    Ok(out)
}

/// Reads a HotpotQA-format file (a JSON array of records with `question`,
/// `answer`, `context`, `supporting_facts` and `type`).
pub fn read_hotpotqa(path: impl AsRef<Path>) -> Result<Vec<QAExample>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let root: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let records = root.as_array().ok_or_else(|| Error::Record {
        path: shown.clone(),
        line: 1,
        field: "root".into(),
        detail: "expected a JSON array".into(),
    })?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| hotpot_record(r, &RecordCtx { path: &shown, line: i + 1 }))
        .collect()
}

fn hotpot_record(v: &Value, ctx: &RecordCtx) -> Result<QAExample> {
    let id = v
        .get("_id")
        .or_else(|| v.get("id"))
        .and_then(Value::as_str)
        .ok_or_else(|| ctx.err("_id", "missing"))?
        .to_string();
    let question = vocab::tokenize(&ctx.string(v, "question")?);
    let raw_answer = ctx.string(v, "answer")?;
    let answer = vocab::tokenize(&raw_answer).join(" ");
    let kind: QuestionKind = ctx
        .string(v, "type")?
        .parse()
        .map_err(|e: Error| ctx.err("type", e.to_string()))?;
    let mut sentences = Vec::new();
    let mut locate: HashMap<(String, u64), usize> = HashMap::new();
    for para in ctx.array(v, "context")? {
        let pair = para.as_array().filter(|p| p.len() == 2).ok_or_else(|| ctx.err("context", "expected [title, sentences]"))?;
        let title = pair[0].as_str().ok_or_else(|| ctx.err("context", "title must be a string"))?;
        let sents = pair[1].as_array().ok_or_else(|| ctx.err("context", "sentences must be an array"))?;
        for (k, s) in sents.iter().enumerate() {
            let s = s.as_str().ok_or_else(|| ctx.err("context", "sentence must be a string"))?;
            locate.insert((title.to_string(), k as u64), sentences.len());
            sentences.push(vocab::tokenize(s));
        }
    }
    let mut support_labels = vec![false; sentences.len()];
    let mut support_order = Vec::new();
    for sf in ctx.array(v, "supporting_facts")? {
        let pair = sf.as_array().filter(|p| p.len() == 2).ok_or_else(|| ctx.err("supporting_facts", "expected [title, index]"))?;
        let title = pair[0].as_str().ok_or_else(|| ctx.err("supporting_facts", "title must be a string"))?;
        let k = pair[1].as_u64().ok_or_else(|| ctx.err("supporting_facts", "index must be an integer"))?;
        // HotpotQA has a few dangling supporting facts; they are skipped
        if let Some(&i) = locate.get(&(title.to_string(), k)) {
            if !support_labels[i] {
                support_labels[i] = true;
                support_order.push(i);
            }
        }
    }
    Ok(QAExample {
        id,
        kind,
        question,
        sentences,
        support_labels,
        answer,
        subquestions: Vec::new(),
        support_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        generate_world(7, 50, 6).unwrap()
    }

    #[test]
    fn world_is_deterministic_functional_and_covering() {
        let a = world();
        assert_eq!(a, world());
        assert!(a.is_functional());
        for e in 0..50 {
            assert!(a.facts.iter().any(|f| f.subject == e), "entity {e} has no outgoing fact");
        }
        assert!(generate_world(1, 2, 4).is_err());
        assert!(generate_world(1, 10, 1).is_err());
    }

    #[test]
    fn bridge_answer_is_forced_by_construction() {
        // (A, born_in, B), (B, capital, C): answer C, supports both, sub-answers B then C
        let w = World {
            seed: 0,
            entities: ["ada", "bel", "cor", "dax", "eru", "fio", "gan"].map(String::from).to_vec(),
            relation_count: 2,
            facts: vec![
                FactTriple { subject: 0, relation: 0, object: 1 },
                FactTriple { subject: 1, relation: 1, object: 2 },
                FactTriple { subject: 3, relation: 0, object: 4 },
                FactTriple { subject: 5, relation: 1, object: 6 },
                FactTriple { subject: 6, relation: 0, object: 5 },
            ],
        };
        let opts = GenOptions { min_distractors: 2, max_distractors: 2, noise: false };
        let found = (0..200)
            .map(|s| generate_example(&w, QuestionKind::Bridge, s, &opts).unwrap())
            .find(|ex| ex.question.iter().any(|t| t == "ada"))
            .expect("some seed picks the ada chain");
        assert_eq!(found.question.join(" "), "what is the capital of the birthplace of ada ?");
        assert_eq!(found.answer, "cor");
        assert_eq!(found.subquestions[0].answer, "bel");
        assert_eq!(found.subquestions[1].answer, "cor");
        let chain: Vec<String> = found.support_chain().iter().map(|s| s.join(" ")).collect();
        assert_eq!(chain, ["ada was born in bel .", "the capital of bel is cor ."]);
        assert_eq!(found.supports().len(), 2);
    }

    #[test]
    fn comparison_answers_are_balanced() {
        let w = world();
        let opts = GenOptions::default();
        let yes = (0..1000)
            .map(|s| generate_example(&w, QuestionKind::Comparison, s, &opts).unwrap())
            .filter(|ex| ex.answer == "yes")
            .count();
        let frac = yes as f64 / 1000.0;
        assert!((frac - 0.5).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn symbolic_oracle_needs_every_support_and_ignores_distractors() {
        let w = world();
        let opts = GenOptions { noise: true, ..GenOptions::default() };
        for kind in [QuestionKind::Bridge, QuestionKind::Comparison, QuestionKind::SingleHop] {
            for s in 0..150 {
                let ex = generate_example(&w, kind, s, &opts).unwrap();
                ex.validate().unwrap();
                let all: Vec<&[String]> = ex.sentences.iter().map(Vec::as_slice).collect();
                let gold: Vec<&[String]> = ex.support_chain();
                assert_eq!(symbolic_answer(&ex.question, &gold).as_deref(), Some(ex.answer.as_str()));
                assert_eq!(symbolic_answer(&ex.question, &all).as_deref(), Some(ex.answer.as_str()));
                for drop in 0..gold.len() {
                    let partial: Vec<&[String]> =
                        gold.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, s)| *s).collect();
                    let rest: Vec<&[String]> = ex
                        .sentences
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != ex.support_order[drop])
                        .map(|(_, s)| s.as_slice())
                        .collect();
                    assert_eq!(symbolic_answer(&ex.question, &partial), None);
                    assert_eq!(symbolic_answer(&ex.question, &rest), None, "{}", ex.id);
                }
                let n = ex.sentences.len() - ex.support_order.len();
                assert!((2..=6).contains(&n));
                if ex.answer_kind() == AnswerKind::Span {
                    let (a, b) = ex.gold_span().unwrap();
                    let flat: Vec<&String> = ex.sentences.iter().flatten().collect();
                    assert_eq!(flat[a..=b].iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" "), ex.answer);
                }
            }
        }
    }

    #[test]
    fn vocabulary_covers_generated_text() {
        let w = world();
        let v = w.vocabulary();
        let opts = GenOptions { noise: true, ..GenOptions::default() };
        for kind in [QuestionKind::Bridge, QuestionKind::Comparison, QuestionKind::SingleHop] {
            for ex in generate_dataset(&w, &[kind], 50, 3, &opts).unwrap() {
                v.encode_strict(&ex.question).unwrap();
                for s in &ex.sentences {
                    v.encode_strict(s).unwrap();
                }
                v.encode_strict(&words(&ex.answer)).unwrap();
            }
        }
    }

    #[test]
    fn native_round_trip() {
        let w = world();
        let kinds = [QuestionKind::Bridge, QuestionKind::Comparison];
        let exs = generate_dataset(&w, &kinds, 100, 11, &GenOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_examples(&p, &exs).unwrap();
        assert_eq!(read_examples(&p).unwrap(), exs);
    }

    #[test]
    fn missing_support_labels_names_the_line() {
        let w = world();
        let exs = generate_dataset(&w, &[QuestionKind::Bridge], 3, 1, &GenOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_examples(&p, &exs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: Value = serde_json::from_str(&lines[1]).unwrap();
        v.as_object_mut().unwrap().remove("support_labels");
        lines[1] = v.to_string();
        fs::write(&p, lines.join("\n")).unwrap();
        match read_examples(&p) {
            Err(Error::Record { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "support_labels");
            }
            other => panic!("expected record error, got {other:?}"),
        }
    }

    #[test]
    fn hotpotqa_record_maps_support_indices() {
        let fixture = r#"[{
            "_id": "5a8b57f25542995d1e6f1371",
            "question": "Were Scott Derrickson and Ed Wood of the same nationality?",
            "answer": "yes",
            "type": "comparison",
            "supporting_facts": [["Scott Derrickson", 0], ["Ed Wood", 0]],
            "context": [
                ["Ed Wood (film)", ["Ed Wood is a 1994 film.", "It was directed by Tim Burton."]],
                ["Scott Derrickson", ["Scott Derrickson is an American director.", "He lives in Los Angeles."]],
                ["Ed Wood", ["Edward Davis Wood Jr. was an American filmmaker."]]
            ]
        }]"#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.json");
        fs::write(&p, fixture).unwrap();
        let exs = read_hotpotqa(&p).unwrap();
        assert_eq!(exs.len(), 1);
        let ex = &exs[0];
        // flattened: 0,1 = "Ed Wood (film)"; 2,3 = "Scott Derrickson"; 4 = "Ed Wood"
        assert_eq!(ex.sentences.len(), 5);
        assert_eq!(ex.support_labels, vec![false, false, true, false, true]);
        assert_eq!(ex.support_order, vec![2, 4]);
        assert_eq!(ex.kind, QuestionKind::Comparison);
        assert_eq!(ex.answer, "yes");
        assert_eq!(ex.question[0], "were");
    }
}
