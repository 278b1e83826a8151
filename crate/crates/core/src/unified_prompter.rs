//! The QA reader: an encoder with answer-type, span and support heads, fed
//! with unified prompts, frozen type prompts and projected implicit knowledge.

use rand::RngCore;

use crate::config::ChainMode;
use crate::data::{AnswerKind, QAExample, QuestionKind};
use crate::error::{Error, Result};
use crate::knowledge_prompter::KnowledgePrompter;
use crate::params::{ParamId, ParamStore};
use crate::prompting::{DeepPromptSet, PromptRole};
use crate::tensor::{Tape, Var};
use crate::transformer::{EncoderStack, Linear, ModelConfig, Segment};
use crate::vocab::{self, Vocab};

pub const READER: &str = "qa";
pub const UNIFIED_PROMPT: &str = "pu";
pub const TYPE_PROMPT: &str = "pt";
pub const KNOWLEDGE_BACKBONE: &str = "kp";
pub const KNOWLEDGE_PREFIX: &str = "kpx";
pub const KNOWLEDGE_PROJ: &str = "qa.kproj";

pub const MAX_SPAN_LEN: usize = 16;
pub const SUPPORT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub cls: usize,
    pub sep: usize,
    pub sent: usize,
}

impl Specials {
    pub fn from_vocab(v: &Vocab) -> Self {
        Specials {
            cls: v.special(vocab::CLS),
            sep: v.special(vocab::SEP),
            sent: v.special(vocab::SENT),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedGold {
    pub answer: AnswerKind,
    /// Inclusive (start, end) over flattened context tokens.
    pub span: Option<(usize, usize)>,
    pub supports: Vec<bool>,
}

/// An example mapped to token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub kind: QuestionKind,
    pub question: Vec<usize>,
    pub sentences: Vec<Vec<usize>>,
    pub support_order: Vec<usize>,
    pub subquestions: Vec<Vec<usize>>,
    pub gold: UnifiedGold,
}

impl EncodedExample {
    pub fn new(vocab: &Vocab, ex: &QAExample) -> Self {
        EncodedExample {
            id: ex.id.clone(),
            kind: ex.kind,
            question: vocab.encode(&ex.question),
            sentences: ex.sentences.iter().map(|s| vocab.encode(s)).collect(),
            support_order: ex.support_order.clone(),
            subquestions: ex.subquestions.iter().map(|s| vocab.encode(&s.question)).collect(),
            gold: UnifiedGold {
                answer: ex.answer_kind(),
                span: ex.gold_span(),
                supports: ex.support_labels.clone(),
            },
        }
    }

    pub fn chain(&self, mode: ChainMode) -> Vec<Vec<usize>> {
        match mode {
            ChainMode::Gold => self.support_order.iter().map(|&i| self.sentences[i].clone()).collect(),
            ChainMode::All => self.sentences.clone(),
        }
    }

    /// The same context with a different question (used for sub-questions).
    pub fn with_question(&self, question: Vec<usize>) -> Self {
        EncodedExample {
            question,
            ..self.clone()
        }
    }
}

/// Row positions of the unified encoder input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnifiedLayout {
    pub unified_prompt_len: usize,
    pub type_prompt_len: usize,
    pub knowledge_rows: usize,
    /// `[CLS] Q [SEP] ([SENT] s_i)*`
    pub tokens: Vec<usize>,
    pub cls_pos: usize,
    pub context_positions: Vec<usize>,
    pub marker_positions: Vec<usize>,
    pub total_len: usize,
}

/// Lays out `[P_u; P_t; [CLS]; Q; [SEP]; ([SENT] s_i)*; K]`, rejecting
/// inputs longer than `max_seq_len` with the name of the overflowing part.
pub fn build_unified_input(
    question: &[usize],
    sentences: &[Vec<usize>],
    knowledge_rows: usize,
    unified_prompt_len: usize,
    type_prompt_len: usize,
    specials: &Specials,
    max_seq_len: usize,
) -> Result<UnifiedLayout> {
    if sentences.iter().all(Vec::is_empty) {
        return Err(Error::Invalid("example has no context tokens".into()));
    }
    let parts = [
        ("unified prompt", unified_prompt_len),
        ("type prompt", type_prompt_len),
        ("question", question.len() + 2),
        ("context", sentences.iter().map(|s| s.len() + 1).sum()),
        ("knowledge", knowledge_rows),
    ];
    let mut len = 0;
    for (what, n) in parts {
        len += n;
        if len > max_seq_len {
            return Err(Error::SequenceTooLong {
                component: what.to_string(),
                len,
                max: max_seq_len,
            });
        }
    }
    let base = unified_prompt_len + type_prompt_len;
    let mut tokens = Vec::with_capacity(len - base - knowledge_rows);
    tokens.push(specials.cls);
    tokens.extend_from_slice(question);
    tokens.push(specials.sep);
    let mut context_positions = Vec::new();
    let mut marker_positions = Vec::with_capacity(sentences.len());
    for s in sentences {
        marker_positions.push(base + tokens.len());
        tokens.push(specials.sent);
        for &t in s {
            context_positions.push(base + tokens.len());
            tokens.push(t);
        }
    }
    Ok(UnifiedLayout {
        unified_prompt_len,
        type_prompt_len,
        knowledge_rows,
        tokens,
        cls_pos: base,
        context_positions,
        marker_positions,
        total_len: len,
    })
}

pub struct UnifiedOutputs {
    /// 1 × 3 over (yes, no, span).
    pub type_logits: Var,
    /// 1 × T over context tokens.
    pub start_logits: Var,
    pub end_logits: Var,
    /// S × 1, one per sentence marker.
    pub support_logits: Var,
    pub layout: UnifiedLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnswerPrediction {
    pub kind: AnswerKind,
    pub span: Option<(usize, usize)>,
    pub type_probs: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportPrediction {
    pub probs: Vec<f64>,
    pub decisions: Vec<bool>,
}

impl SupportPrediction {
    pub fn indices(&self) -> Vec<usize> {
        self.decisions
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| d.then_some(i))
            .collect()
    }
}

/// Best span by start + end score with `start ≤ end < start + max_len`;
/// ties go to the earliest start, then the shortest span.
pub fn decode_span(start: &[f64], end: &[f64], max_len: usize) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for (s, &a) in start.iter().enumerate() {
        for (e, &b) in end.iter().enumerate().skip(s).take(max_len) {
            let score = a + b;
            if best.is_none_or(|(_, v)| score > v) {
                best = Some(((s, e), score));
            }
        }
    }
    best.map(|(p, _)| p)
}

#[derive(Clone, Debug)]
pub struct UnifiedModel {
    pub encoder: EncoderStack,
    pub type_head: Linear,
    pub span_head: Linear,
    pub support_head: Linear,
    pub unified_prompt: Option<DeepPromptSet>,
    pub type_prompt: Option<DeepPromptSet>,
    pub knowledge: Option<KnowledgePrompter>,
    pub knowledge_proj: Option<Linear>,
    pub specials: Specials,
    pub support_weight: f64,
}

impl UnifiedModel {
    /// Fresh reader (encoder and heads) without prompts or knowledge.
    pub fn init_reader(store: &mut ParamStore, cfg: &ModelConfig, specials: Specials, rng: &mut dyn RngCore) -> Result<Self> {
        let encoder = EncoderStack::init(store, READER, cfg, rng)?;
        let d = cfg.d;
        Ok(UnifiedModel {
            encoder,
            type_head: Linear::init(store, "qa.head.type", (d, 3), true, "head", rng)?,
            span_head: Linear::init(store, "qa.head.span", (d, 2), true, "head", rng)?,
            support_head: Linear::init(store, "qa.head.support", (d, 1), true, "head", rng)?,
            unified_prompt: None,
            type_prompt: None,
            knowledge: None,
            knowledge_proj: None,
            specials,
            support_weight: 1.0,
        })
    }

    pub fn bind_reader(store: &mut ParamStore, cfg: &ModelConfig, specials: Specials) -> Result<Self> {
        let encoder = EncoderStack::bind(store, READER, cfg)?;
        let d = cfg.d;
        Ok(UnifiedModel {
            encoder,
            type_head: Linear::bind(store, "qa.head.type", (d, 3), true)?,
            span_head: Linear::bind(store, "qa.head.span", (d, 2), true)?,
            support_head: Linear::bind(store, "qa.head.support", (d, 1), true)?,
            unified_prompt: None,
            type_prompt: None,
            knowledge: None,
            knowledge_proj: None,
            specials,
            support_weight: 1.0,
        })
    }

    /// Binds every optional component present in `store` under its fixed name.
    pub fn bind_full(store: &mut ParamStore, cfg: &ModelConfig, kcfg: Option<(&ModelConfig, usize)>, specials: Specials) -> Result<Self> {
        let mut m = Self::bind_reader(store, cfg, specials)?;
        let depth = cfg.layers;
        if store.contains(&format!("{UNIFIED_PROMPT}.layer0")) {
            m.unified_prompt = Some(DeepPromptSet::bind(store, UNIFIED_PROMPT, PromptRole::UnifiedPrompt, depth)?);
        }
        if store.contains(&format!("{TYPE_PROMPT}.layer0")) {
            m.type_prompt = Some(DeepPromptSet::bind(store, TYPE_PROMPT, PromptRole::TypePrompt, depth)?);
        }
        if let Some((kc, slots)) = kcfg {
            let kp = KnowledgePrompter::bind(store, KNOWLEDGE_BACKBONE, KNOWLEDGE_PREFIX, kc, slots, specials.sep)?;
            m.knowledge_proj = Some(Linear::bind(store, KNOWLEDGE_PROJ, (kc.d, cfg.d), true)?);
            m.knowledge = Some(kp);
        }
        Ok(m)
    }

    pub fn attach_unified_prompt(&mut self, store: &mut ParamStore, len: usize, rng: &mut dyn RngCore) -> Result<()> {
        let cfg = &self.encoder.cfg;
        self.unified_prompt = Some(DeepPromptSet::init(
            store,
            UNIFIED_PROMPT,
            PromptRole::UnifiedPrompt,
            cfg.layers,
            len,
            cfg.d,
            rng,
        )?);
        Ok(())
    }

    /// Attaches type prompts already copied into `store`; they are frozen.
    pub fn attach_type_prompt(&mut self, store: &mut ParamStore, mut prompt: DeepPromptSet) -> Result<()> {
        prompt.inject(&self.encoder)?;
        prompt.set_frozen(store, true);
        self.type_prompt = Some(prompt);
        Ok(())
    }

    /// Attaches a knowledge prompter whose backbone is frozen, with an
    /// identity-initialized projection into the reader's width.
    pub fn attach_knowledge(&mut self, store: &mut ParamStore, kp: KnowledgePrompter) -> Result<()> {
        kp.freeze_backbone(store);
        self.knowledge_proj = Some(Linear::init_identity(store, KNOWLEDGE_PROJ, (kp.d(), self.encoder.cfg.d), "head")?);
        self.knowledge = Some(kp);
        Ok(())
    }

    pub fn reader_prefix() -> String {
        format!("{READER}.")
    }

    fn prompt_len(p: &Option<DeepPromptSet>) -> usize {
        p.as_ref().map_or(0, |p| p.len)
    }

    /// Runs the knowledge prompter over the chosen sentence chain and returns
    /// the stacked (n·m) × d_k knowledge rows, or `None` when there are none.
    pub fn recall(&self, tape: &mut Tape, store: &ParamStore, ex: &EncodedExample, mode: ChainMode) -> Result<Option<Var>> {
        let Some(kp) = &self.knowledge else {
            return Ok(None);
        };
        let chain = ex.chain(mode);
        if chain.is_empty() {
            return Ok(None);
        }
        let ks = kp.recall_chain(tape, store, &ex.question, &chain)?;
        Ok(Some(tape.concat(&ks, 0)?))
    }

    pub fn layout(&self, question: &[usize], sentences: &[Vec<usize>], knowledge_rows: usize) -> Result<UnifiedLayout> {
        build_unified_input(
            question,
            sentences,
            knowledge_rows,
            Self::prompt_len(&self.unified_prompt),
            Self::prompt_len(&self.type_prompt),
            &self.specials,
            self.encoder.cfg.max_seq_len,
        )
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        question: &[usize],
        sentences: &[Vec<usize>],
        knowledge: Option<Var>,
    ) -> Result<UnifiedOutputs> {
        let projected = match (knowledge, &self.knowledge_proj) {
            (Some(k), Some(proj)) => Some(proj.forward(tape, store, k)?),
            (Some(_), None) => return Err(Error::Invalid("knowledge given but the model has no projection".into())),
            (None, _) => None,
        };
        let rows = projected.map_or(0, |k| tape.shape(k)[0]);
        let layout = self.layout(question, sentences, rows)?;
        let mut segs: Vec<Segment> = Vec::with_capacity(4);
        let pu: Option<&[ParamId]> = self.unified_prompt.as_ref().map(|p| p.inject(&self.encoder)).transpose()?;
        let pt: Option<&[ParamId]> = self.type_prompt.as_ref().map(|p| p.inject(&self.encoder)).transpose()?;
        segs.extend(pu.map(Segment::Prompt));
        segs.extend(pt.map(Segment::Prompt));
        segs.push(Segment::Tokens(&layout.tokens));
        segs.extend(projected.map(Segment::Continuous));
        let h = self.encoder.forward(tape, store, &segs, None, None)?;
        let cls = tape.embedding_gather(h, &[layout.cls_pos])?;
        let type_logits = self.type_head.forward(tape, store, cls)?;
        let ctx = tape.embedding_gather(h, &layout.context_positions)?;
        let span = self.span_head.forward(tape, store, ctx)?;
        let span = tape.transpose(span)?;
        let t = layout.context_positions.len();
        let start_logits = tape.slice(span, 0, 0, 1)?;
        let end_logits = tape.slice(span, 0, 1, 2)?;
        debug_assert_eq!(tape.shape(start_logits), &[1, t]);
        let pooled = sentence_pool(tape, h, &layout, sentences)?;
        let support_logits = self.support_head.forward(tape, store, pooled)?;
        Ok(UnifiedOutputs {
            type_logits,
            start_logits,
            end_logits,
            support_logits,
            layout,
        })
    }

    /// Full forward for one example, including knowledge recall.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, ex: &EncodedExample, mode: ChainMode) -> Result<UnifiedOutputs> {
        let k = self.recall(tape, store, ex, mode)?;
        self.forward(tape, store, &ex.question, &ex.sentences, k)
    }

    pub fn example_loss(&self, tape: &mut Tape, store: &ParamStore, ex: &EncodedExample, mode: ChainMode) -> Result<Var> {
        let out = self.run(tape, store, ex, mode)?;
        unified_loss(tape, &out, &ex.gold, self.support_weight)
    }

    pub fn predict(&self, store: &ParamStore, ex: &EncodedExample, mode: ChainMode) -> Result<(AnswerPrediction, SupportPrediction)> {
        let mut tape = Tape::new();
        let out = self.run(&mut tape, store, ex, mode)?;
        Ok(read_predictions(&tape, &out))
    }
}

/// Mean of the final states of each sentence's marker and its tokens.
fn sentence_pool(tape: &mut Tape, h: Var, layout: &UnifiedLayout, sentences: &[Vec<usize>]) -> Result<Var> {
    let total = layout.total_len;
    let mut w = vec![0.0; sentences.len() * total];
    for (k, (&m, s)) in layout.marker_positions.iter().zip(sentences).enumerate() {
        let v = 1.0 / (s.len() + 1) as f64;
        w[k * total + m..=k * total + m + s.len()].fill(v);
    }
    let pool = tape.constant(vec![sentences.len(), total], w)?;
    tape.matmul(pool, h)
}

pub fn read_predictions(tape: &Tape, out: &UnifiedOutputs) -> (AnswerPrediction, SupportPrediction) {
    let logits = tape.value(out.type_logits);
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    let type_probs = [ex[0] / z, ex[1] / z, ex[2] / z];
    let mut best = 0;
    for i in 1..3 {
        if type_probs[i] > type_probs[best] {
            best = i;
        }
    }
    let kind = AnswerKind::from_index(best);
    let span = match kind {
        AnswerKind::Span => decode_span(tape.value(out.start_logits), tape.value(out.end_logits), MAX_SPAN_LEN),
        _ => None,
    };
    let probs: Vec<f64> = tape
        .value(out.support_logits)
        .iter()
        .map(|&x| 1.0 / (1.0 + (-x).exp()))
        .collect();
    let decisions = probs.iter().map(|&p| p > SUPPORT_THRESHOLD).collect();
    (AnswerPrediction { kind, span, type_probs }, SupportPrediction { probs, decisions })
}

/// CE(type) + [span]·(CE(start) + CE(end)) + λ·mean BCE(support).
pub fn unified_loss(tape: &mut Tape, out: &UnifiedOutputs, gold: &UnifiedGold, support_weight: f64) -> Result<Var> {
    let mut loss = tape.cross_entropy_from_logits(out.type_logits, &[gold.answer.index()])?;
    if gold.answer == AnswerKind::Span {
        let t = tape.shape(out.start_logits)[1];
        let (s, e) = gold
            .span
            .filter(|&(s, e)| s <= e && e < t)
            .ok_or_else(|| Error::Invalid(format!("gold span {:?} outside context of {t} tokens", gold.span)))?;
        let ls = tape.cross_entropy_from_logits(out.start_logits, &[s])?;
        let le = tape.cross_entropy_from_logits(out.end_logits, &[e])?;
        loss = tape.add(loss, ls)?;
        loss = tape.add(loss, le)?;
    }
    let n = tape.shape(out.support_logits)[0];
    if gold.supports.len() != n {
        return Err(Error::Invalid(format!("{} support labels for {n} sentences", gold.supports.len())));
    }
    let targets: Vec<f64> = gold.supports.iter().map(|&b| f64::from(u8::from(b))).collect();
    let p = tape.sigmoid(out.support_logits);
    let bce = tape.binary_cross_entropy(p, &targets)?;
    let bce = tape.scale(bce, support_weight);
    tape.add(loss, bce)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specials() -> Specials {
        Specials { cls: 2, sep: 3, sent: 4 }
    }

    #[test]
    fn layout_length_formula() {
        let q = vec![10, 11, 12];
        let s = vec![vec![20, 21], vec![22, 23, 24]];
        let l = build_unified_input(&q, &s, 8, 5, 6, &specials(), 100).unwrap();
        assert_eq!(l.total_len, 5 + 6 + 8 + 1 + 3 + 1 + (2 + 1) + (3 + 1));
        assert_eq!(l.cls_pos, 11);
        assert_eq!(l.marker_positions, vec![16, 19]);
        assert_eq!(l.context_positions, vec![17, 18, 20, 21, 22]);
        assert_eq!(l.tokens, vec![2, 10, 11, 12, 3, 4, 20, 21, 4, 22, 23, 24]);
        let l0 = build_unified_input(&q, &s, 0, 5, 6, &specials(), 100).unwrap();
        assert_eq!(l0.tokens, l.tokens);
        assert_eq!(l0.total_len, l.total_len - 8);
    }

    #[test]
    fn overflow_names_the_component() {
        let q = vec![10; 4];
        let s = vec![vec![20; 10]];
        for (max, part) in [(21, "question"), (30, "context"), (40, "knowledge")] {
            match build_unified_input(&q, &s, 8, 8, 8, &specials(), max) {
                Err(Error::SequenceTooLong { component, .. }) => assert_eq!(component, part),
                other => panic!("{other:?}"),
            }
        }
        assert!(build_unified_input(&q, &s, 8, 8, 8, &specials(), 41).is_ok());
        assert!(build_unified_input(&q, &[vec![]], 0, 0, 0, &specials(), 35).is_err());
    }

    #[test]
    fn span_decoding_matches_brute_force_with_ties() {
        let start = [0.0, 2.0, 2.0, 1.0];
        let end = [0.0, 1.0, 1.0, 1.0];
        // (1,1), (1,2), (1,3), (2,2)... all score 3; earliest start then shortest wins
        assert_eq!(decode_span(&start, &end, 16), Some((1, 1)));
        assert_eq!(decode_span(&[0.0, 5.0], &[9.0, 0.0], 16), Some((0, 0)));
        assert_eq!(decode_span(&[1.0, 0.0, 0.0], &[0.0, 0.0, 5.0], 2), Some((1, 2)));
    }
}
