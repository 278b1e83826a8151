//! Question-type classification by deep prompt tuning over a frozen encoder.

use std::fmt;

use rand::RngCore;

use crate::checkpoint::Checkpoint;
use crate::data::QuestionKind;
use crate::error::{Error, Result};
use crate::optim::{self, LossLog, StageSchedule};
use crate::params::ParamStore;
use crate::prompting::{DeepPromptSet, PromptRole};
use crate::tensor::{Tape, Var};
use crate::transformer::{EncoderStack, Linear, ModelConfig, Segment};
use crate::unified_prompter::{READER, TYPE_PROMPT};

pub const TYPE_HEAD: &str = "type_head";

/// Class order is fixed: index 0 is comparison, index 1 is bridge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuestionTypeLabel {
    Comparison,
    Bridge,
}

impl QuestionTypeLabel {
    pub const ALL: [QuestionTypeLabel; 2] = [QuestionTypeLabel::Comparison, QuestionTypeLabel::Bridge];

    pub fn index(self) -> usize {
        match self {
            QuestionTypeLabel::Comparison => 0,
            QuestionTypeLabel::Bridge => 1,
        }
    }

    pub fn from_kind(kind: QuestionKind) -> Option<Self> {
        match kind {
            QuestionKind::Comparison => Some(QuestionTypeLabel::Comparison),
            QuestionKind::Bridge => Some(QuestionTypeLabel::Bridge),
            QuestionKind::SingleHop => None,
        }
    }
}

impl fmt::Display for QuestionTypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionTypeLabel::Comparison => "comparison",
            QuestionTypeLabel::Bridge => "bridge",
        })
    }
}

/// Argmax over class probabilities; exact ties resolve to the lower index.
pub fn argmax_label(probs: &[f64; 2]) -> QuestionTypeLabel {
    if probs[1] > probs[0] {
        QuestionTypeLabel::Bridge
    } else {
        QuestionTypeLabel::Comparison
    }
}

#[derive(Clone, Debug)]
pub struct TypePrompterModel {
    pub encoder: EncoderStack,
    pub prompts: DeepPromptSet,
    pub head: Linear,
    pub cls: usize,
}

impl TypePrompterModel {
    /// Freezes everything already in `store` (the pre-trained reader) and
    /// adds trainable prompts and a two-way head.
    pub fn init(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        prompt_len: usize,
        cls: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let encoder = EncoderStack::bind(store, READER, cfg)?;
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, false);
        }
        let prompts = DeepPromptSet::init(store, TYPE_PROMPT, PromptRole::TypePrompt, cfg.layers, prompt_len, cfg.d, rng)?;
        let head = Linear::init(store, TYPE_HEAD, (cfg.d, 2), true, "head", rng)?;
        Ok(TypePrompterModel {
            encoder,
            prompts,
            head,
            cls,
        })
    }

    pub fn bind(store: &mut ParamStore, cfg: &ModelConfig, cls: usize) -> Result<Self> {
        let encoder = EncoderStack::bind(store, READER, cfg)?;
        let prompts = DeepPromptSet::bind(store, TYPE_PROMPT, PromptRole::TypePrompt, cfg.layers)?;
        let head = Linear::bind(store, TYPE_HEAD, (cfg.d, 2), true)?;
        Ok(TypePrompterModel {
            encoder,
            prompts,
            head,
            cls,
        })
    }

    /// Digest of every parameter outside the prompts and the head.
    pub fn backbone_digest(&self, store: &ParamStore) -> String {
        let pt = format!("{TYPE_PROMPT}.");
        let head = format!("{TYPE_HEAD}.");
        store.digest_where(|e| !e.name.starts_with(&pt) && !e.name.starts_with(&head))
    }

    /// 1 × 2 logits for `{P_t, [CLS], Q}`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, question: &[usize]) -> Result<Var> {
        if question.is_empty() {
            return Err(Error::Invalid("question is empty".into()));
        }
        let mut ids = Vec::with_capacity(question.len() + 1);
        ids.push(self.cls);
        ids.extend_from_slice(question);
        let prompts = self.prompts.inject(&self.encoder)?;
        let h = self
            .encoder
            .forward(tape, store, &[Segment::Prompt(prompts), Segment::Tokens(&ids)], None, None)?;
        let cls = tape.embedding_gather(h, &[self.prompts.len])?;
        self.head.forward(tape, store, cls)
    }

    pub fn classify(&self, store: &ParamStore, question: &[usize]) -> Result<(QuestionTypeLabel, [f64; 2])> {
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, store, question)?;
        let p = tape.softmax_rows(logits);
        let v = tape.value(p);
        let probs = [v[0], v[1]];
        Ok((argmax_label(&probs), probs))
    }

    /// Trained prompts as a frozen, standalone archive.
    pub fn export(&self, store: &ParamStore) -> Result<Checkpoint> {
        self.prompts.frozen_copy().to_checkpoint(store)
    }
}

/// Fits P_t and the head; the backbone must come out bit-identical.
pub fn train_type_prompter(
    model: &TypePrompterModel,
    store: &mut ParamStore,
    data: &[(Vec<usize>, QuestionTypeLabel)],
    sched: &StageSchedule,
) -> Result<LossLog> {
    if QuestionTypeLabel::ALL.iter().any(|l| data.iter().all(|(_, y)| y != l)) {
        log::warn!("type-prompter training data contains a single class; the classifier is degenerate");
    }
    let before = model.backbone_digest(store);
    let log = optim::train(store, data, sched, |tape, store, (q, y)| {
        let logits = model.logits(tape, store, q)?;
        tape.cross_entropy_from_logits(logits, &[y.index()])
    })?;
    if model.backbone_digest(store) != before {
        return Err(Error::Invalid("type-prompter backbone changed during training".into()));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unified_prompter::{Specials, UnifiedModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, TypePrompterModel) {
        let cfg = ModelConfig {
            d: 8,
            layers: 2,
            n_heads: 2,
            vocab_size: 12,
            max_seq_len: 32,
            prompt_len: 3,
            ffn_dim: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        UnifiedModel::init_reader(&mut store, &cfg, Specials { cls: 2, sep: 3, sent: 4 }, &mut rng).unwrap();
        let m = TypePrompterModel::init(&mut store, &cfg, 3, 2, &mut rng).unwrap();
        (store, m)
    }

    fn data() -> Vec<(Vec<usize>, QuestionTypeLabel)> {
        (0..8)
            .map(|i| {
                if i % 2 == 0 {
                    (vec![5, 6 + i % 3, 9], QuestionTypeLabel::Comparison)
                } else {
                    (vec![10, 6 + i % 3, 11], QuestionTypeLabel::Bridge)
                }
            })
            .collect()
    }

    fn sched(steps: usize) -> StageSchedule {
        StageSchedule {
            steps,
            batch_size: 4,
            lr: 0.05,
            warmup_ratio: 0.05,
            weight_decay: 0.0,
            seed: 1,
            prompt_lr: None,
        }
    }

    #[test]
    fn probabilities_are_a_distribution_and_pure() {
        let (store, m) = setup();
        let (l1, p1) = m.classify(&store, &[5, 6]).unwrap();
        let (l2, p2) = m.classify(&store, &[5, 6]).unwrap();
        assert_eq!((l1, p1), (l2, p2));
        assert!((p1[0] + p1[1] - 1.0).abs() <= 1e-12);
        assert!(m.classify(&store, &[]).is_err());
        assert!(matches!(m.classify(&store, &[99]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn ties_break_toward_comparison_and_swap_is_consistent() {
        assert_eq!(argmax_label(&[0.5, 0.5]), QuestionTypeLabel::Comparison);
        for p in [[0.3, 0.7], [0.8, 0.2]] {
            let swapped = [p[1], p[0]];
            let a = argmax_label(&p);
            let b = argmax_label(&swapped);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn training_moves_prompts_not_backbone_and_lowers_loss() {
        let (mut store, m) = setup();
        let d0 = m.backbone_digest(&store);
        let p0 = m.prompts.digest(&store);
        let log = train_type_prompter(&m, &mut store, &data(), &sched(60)).unwrap();
        assert_eq!(m.backbone_digest(&store), d0);
        assert_ne!(m.prompts.digest(&store), p0);
        assert!(log.tail_mean(5).unwrap() < log.first_loss().unwrap());
        let ck = m.export(&store).unwrap();
        assert_eq!(ck.meta_value("prompt.frozen").unwrap(), "true");
        assert_eq!(ck.meta_value("prompt.layers").unwrap(), "2");
        let mut fresh = ParamStore::new();
        let back = DeepPromptSet::from_checkpoint(&ck, &mut fresh, "pt").unwrap();
        assert!(back.is_frozen());
        for (a, b) in back.layers.iter().zip(&m.prompts.layers) {
            assert_eq!(fresh.tensor(*a).data(), store.tensor(*b).data());
        }
    }
}
