//! Iterative recall of continuous knowledge from a frozen encoder-decoder
//! steered by trainable key/value prefixes.

use std::path::Path;

use rand::RngCore;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prompting::PrefixPair;
use crate::tensor::{Tape, Var};
use crate::transformer::{EncoderDecoder, ModelConfig, Segment};

pub const DEFAULT_SLOTS: usize = 4;

#[derive(Clone, Debug)]
pub struct KnowledgePrompter {
    pub backbone: EncoderDecoder,
    pub prefixes: PrefixPair,
    /// Knowledge slots produced per step.
    pub m: usize,
    pub sep: usize,
}

impl KnowledgePrompter {
    /// Adds fresh prefixes to an already registered backbone named `backbone`.
    pub fn init(
        store: &mut ParamStore,
        backbone: &str,
        prefix_name: &str,
        cfg: &ModelConfig,
        prefix_len: usize,
        m: usize,
        sep: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let model = EncoderDecoder::bind(store, backbone, cfg)?;
        let prefixes = PrefixPair::init(
            store,
            prefix_name,
            model.encoder.depth(),
            model.decoder.depth(),
            prefix_len,
            cfg.d,
            rng,
        )?;
        Self::assemble(model, prefixes, m, sep)
    }

    pub fn bind(store: &mut ParamStore, backbone: &str, prefix_name: &str, cfg: &ModelConfig, m: usize, sep: usize) -> Result<Self> {
        let model = EncoderDecoder::bind(store, backbone, cfg)?;
        let prefixes = PrefixPair::bind(store, prefix_name, model.encoder.depth(), model.decoder.depth())?;
        Self::assemble(model, prefixes, m, sep)
    }

    fn assemble(backbone: EncoderDecoder, prefixes: PrefixPair, m: usize, sep: usize) -> Result<Self> {
        prefixes.inject(&backbone)?;
        if m == 0 {
            return Err(Error::Config("knowledge slot count must be ≥ 1".into()));
        }
        Ok(KnowledgePrompter {
            backbone,
            prefixes,
            m,
            sep,
        })
    }

    pub fn d(&self) -> usize {
        self.backbone.encoder.cfg.d
    }

    /// Freezes the encoder-decoder; prefixes stay trainable.
    pub fn freeze_backbone(&self, store: &mut ParamStore) {
        store.set_trainable_prefix(&format!("{}.", self.backbone_name()), false);
    }

    pub fn backbone_name(&self) -> &str {
        self.backbone
            .encoder
            .name
            .strip_suffix(".enc")
            .unwrap_or(&self.backbone.encoder.name)
    }

    pub fn backbone_digest(&self, store: &ParamStore) -> String {
        store.digest_prefix(&format!("{}.", self.backbone_name()))
    }

    /// Token ids of the encoder's text input: question, separator, then the
    /// first `j` sentences.
    pub fn step_tokens(&self, question: &[usize], sentences: &[Vec<usize>]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(question.len() + 1 + sentences.iter().map(Vec::len).sum::<usize>());
        ids.extend_from_slice(question);
        ids.push(self.sep);
        for s in sentences {
            ids.extend_from_slice(s);
        }
        ids
    }

    /// One recall step: encodes (Q, s_1..s_j, k_1..k_{j-1}) and decodes `m`
    /// knowledge slots. `sentences` must hold exactly the first j sentences.
    pub fn recall_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        question: &[usize],
        sentences: &[Vec<usize>],
        k_prev: &[Var],
    ) -> Result<Var> {
        let j = sentences.len();
        if j == 0 {
            return Err(Error::ChainLength {
                step: 0,
                expected: 0,
                got: k_prev.len(),
            });
        }
        if k_prev.len() != j - 1 {
            return Err(Error::ChainLength {
                step: j,
                expected: j - 1,
                got: k_prev.len(),
            });
        }
        let (enc_prefix, dec_prefix) = self.prefixes.inject(&self.backbone)?;
        let ids = self.step_tokens(question, sentences);
        let knowledge = if k_prev.is_empty() {
            None
        } else {
            Some(tape.concat(k_prev, 0)?)
        };
        let mut segs = vec![Segment::Tokens(&ids)];
        if let Some(k) = knowledge {
            segs.push(Segment::Continuous(k));
        }
        let enc = self.backbone.encoder.forward(tape, store, &segs, Some(enc_prefix), None)?;
        self.backbone.decoder.decode(tape, store, enc, self.m, Some(dec_prefix))
    }

    /// K_n = [k_1..k_n], with k_j from the first j sentences and k_1..k_{j-1}.
    pub fn recall_chain(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        question: &[usize],
        sentences: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let mut ks = Vec::with_capacity(sentences.len());
        for j in 1..=sentences.len() {
            let k = self.recall_step(tape, store, question, &sentences[..j], &ks)?;
            ks.push(k);
        }
        Ok(ks)
    }
}

/// Writes K_n to a checkpoint-format archive with entries `k1`, `k2`, ...
pub fn dump_knowledge(path: impl AsRef<Path>, id: &str, tape: &Tape, ks: &[Var]) -> Result<()> {
    let mut store = ParamStore::new();
    for (j, k) in ks.iter().enumerate() {
        let id = store.register(format!("k{}", j + 1), "knowledge", tape.to_tensor(*k))?;
        store.set_trainable(id, false);
    }
    Checkpoint::new(store)
        .with_meta([("example".to_string(), id.to_string())])
        .save(path)
}
