//! Prompt parameter containers and the frozen/trainable partition.

use std::collections::BTreeSet;
use std::fmt;

use rand::RngCore;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::transformer::{EncoderDecoder, EncoderStack, KvPrefix};

const PROMPT_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptRole {
    TypePrompt,
    UnifiedPrompt,
    KnowledgePrefix,
}

impl PromptRole {
    pub fn tag(self) -> &'static str {
        match self {
            PromptRole::TypePrompt => "type_prompt",
            PromptRole::UnifiedPrompt => "unified_prompt",
            PromptRole::KnowledgePrefix => "knowledge_prefix",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "type_prompt" => Ok(PromptRole::TypePrompt),
            "unified_prompt" => Ok(PromptRole::UnifiedPrompt),
            "knowledge_prefix" => Ok(PromptRole::KnowledgePrefix),
            other => Err(Error::Checkpoint(format!("unknown prompt role `{other}`"))),
        }
    }
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Per-layer soft prompts: one (l × d) matrix for each of the h layers.
#[derive(Clone, Debug)]
pub struct DeepPromptSet {
    pub name: String,
    pub role: PromptRole,
    pub layers: Vec<ParamId>,
    pub len: usize,
    pub d: usize,
    frozen: bool,
}

impl DeepPromptSet {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        role: PromptRole,
        layers: usize,
        len: usize,
        d: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if layers == 0 || len == 0 || d == 0 {
            return Err(Error::Config(format!(
                "prompt `{name}` needs positive layers/len/d, got {layers}/{len}/{d}"
            )));
        }
        let ids = (0..layers)
            .map(|i| {
                store.register(
                    format!("{name}.layer{i}"),
                    role.tag(),
                    normal_tensor(rng, vec![len, d], PROMPT_INIT_STD),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DeepPromptSet {
            name: name.to_string(),
            role,
            layers: ids,
            len,
            d,
            frozen: false,
        })
    }

    /// Binds to prompt matrices already in `store`, inferring l and d.
    pub fn bind(store: &ParamStore, name: &str, role: PromptRole, layers: usize) -> Result<Self> {
        let ids = (0..layers)
            .map(|i| store.id(&format!("{name}.layer{i}")))
            .collect::<Result<Vec<_>>>()?;
        let shape = store.tensor(ids[0]).shape().to_vec();
        if shape.len() != 2 || ids.iter().any(|id| store.tensor(*id).shape() != shape) {
            return Err(Error::shape("deep prompt", format!("`{name}` layers disagree on shape")));
        }
        let frozen = !store.is_trainable(ids[0]);
        Ok(DeepPromptSet {
            name: name.to_string(),
            role,
            layers: ids,
            len: shape[0],
            d: shape[1],
            frozen,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, store: &mut ParamStore, frozen: bool) {
        for id in &self.layers {
            store.set_trainable(*id, !frozen);
        }
        self.frozen = frozen;
    }

    /// Copy flagged frozen, for export; the store is not touched.
    pub fn frozen_copy(&self) -> Self {
        DeepPromptSet {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn element_count(&self) -> usize {
        self.layers.len() * self.len * self.d
    }

    pub fn digest(&self, store: &ParamStore) -> String {
        let prefix = format!("{}.layer", self.name);
        store.digest_prefix(&prefix)
    }

    /// Checks the prompt against an encoder and returns the per-layer ids the
    /// forward pass consumes.
    pub fn inject<'a>(&'a self, stack: &EncoderStack) -> Result<&'a [ParamId]> {
        if self.layers.len() != stack.depth() {
            return Err(Error::LayerMismatch {
                prompt: self.layers.len(),
                stack: stack.depth(),
            });
        }
        if self.d != stack.cfg.d {
            return Err(Error::shape(
                "inject",
                format!("prompt width {} != encoder d = {}", self.d, stack.cfg.d),
            ));
        }
        Ok(&self.layers)
    }

    pub fn to_checkpoint(&self, store: &ParamStore) -> Result<Checkpoint> {
        let mut out = ParamStore::new();
        out.copy_prefix(store, &format!("{}.", self.name), "prompt.", self.role.tag())?;
        out.set_role_prefix("prompt.", self.role.tag());
        for id in out.ids().collect::<Vec<_>>() {
            out.set_trainable(id, !self.frozen);
        }
        Ok(Checkpoint::new(out).with_meta([
            ("prompt.role".to_string(), self.role.tag().to_string()),
            ("prompt.layers".to_string(), self.layers.len().to_string()),
            ("prompt.len".to_string(), self.len.to_string()),
            ("prompt.d".to_string(), self.d.to_string()),
            ("prompt.frozen".to_string(), self.frozen.to_string()),
        ]))
    }

    /// Copies an exported prompt into `store` under `name`, keeping its frozen flag.
    pub fn from_checkpoint(ckpt: &Checkpoint, store: &mut ParamStore, name: &str) -> Result<Self> {
        let role = PromptRole::from_tag(ckpt.meta_value("prompt.role")?)?;
        let layers: usize = ckpt
            .meta_value("prompt.layers")?
            .parse()
            .map_err(|_| Error::Checkpoint("prompt.layers is not an integer".into()))?;
        let frozen = ckpt.meta_value("prompt.frozen")? == "true";
        store.copy_prefix(&ckpt.store, "prompt.", &format!("{name}."), role.tag())?;
        let mut set = DeepPromptSet::bind(store, name, role, layers)?;
        set.set_frozen(store, frozen);
        Ok(set)
    }
}

/// Key/value prefixes for every encoder layer and every decoder
/// self-attention layer, each (l_k × d).
#[derive(Clone, Debug)]
pub struct PrefixPair {
    pub name: String,
    pub encoder: Vec<KvPrefix>,
    pub decoder: Vec<KvPrefix>,
    pub len: usize,
    pub d: usize,
}

impl PrefixPair {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        encoder_layers: usize,
        decoder_layers: usize,
        len: usize,
        d: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("prefix length must be ≥ 1".into()));
        }
        let mut make = |side: &str, n: usize| -> Result<Vec<KvPrefix>> {
            (0..n)
                .map(|i| {
                    let tag = PromptRole::KnowledgePrefix.tag();
                    Ok(KvPrefix {
                        key: store.register(
                            format!("{name}.{side}.layer{i}.key"),
                            tag,
                            normal_tensor(rng, vec![len, d], PROMPT_INIT_STD),
                        )?,
                        value: store.register(
                            format!("{name}.{side}.layer{i}.value"),
                            tag,
                            normal_tensor(rng, vec![len, d], PROMPT_INIT_STD),
                        )?,
                    })
                })
                .collect()
        };
        let encoder = make("enc", encoder_layers)?;
        let decoder = make("dec", decoder_layers)?;
        Ok(PrefixPair {
            name: name.to_string(),
            encoder,
            decoder,
            len,
            d,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, encoder_layers: usize, decoder_layers: usize) -> Result<Self> {
        let get = |side: &str, n: usize| -> Result<Vec<KvPrefix>> {
            (0..n)
                .map(|i| {
                    Ok(KvPrefix {
                        key: store.id(&format!("{name}.{side}.layer{i}.key"))?,
                        value: store.id(&format!("{name}.{side}.layer{i}.value"))?,
                    })
                })
                .collect()
        };
        let encoder = get("enc", encoder_layers)?;
        let decoder = get("dec", decoder_layers)?;
        let shape = store.tensor(encoder[0].key).shape().to_vec();
        for p in encoder.iter().chain(&decoder) {
            if store.tensor(p.key).shape() != shape || store.tensor(p.value).shape() != shape {
                return Err(Error::shape("prefix", format!("`{name}` key/value shapes disagree")));
            }
        }
        Ok(PrefixPair {
            name: name.to_string(),
            encoder,
            decoder,
            len: shape[0],
            d: shape[1],
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|p| [p.key, p.value])
    }

    pub fn inject<'a>(&'a self, model: &EncoderDecoder) -> Result<(&'a [KvPrefix], &'a [KvPrefix])> {
        for (have, want) in [
            (self.encoder.len(), model.encoder.depth()),
            (self.decoder.len(), model.decoder.depth()),
        ] {
            if have != want {
                return Err(Error::LayerMismatch {
                    prompt: have,
                    stack: want,
                });
            }
        }
        if self.d != model.encoder.cfg.d {
            return Err(Error::shape(
                "inject",
                format!("prefix width {} != backbone d = {}", self.d, model.encoder.cfg.d),
            ));
        }
        Ok((&self.encoder, &self.decoder))
    }

    pub fn digest(&self, store: &ParamStore) -> String {
        store.digest_prefix(&format!("{}.", self.name))
    }
}

/// Split of registered parameter names into frozen and trainable sets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamPartition {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

impl ParamPartition {
    pub fn new(frozen: BTreeSet<String>, trainable: BTreeSet<String>) -> Result<Self> {
        if let Some(n) = frozen.intersection(&trainable).next() {
            return Err(Error::Invalid(format!("`{n}` is both frozen and trainable")));
        }
        Ok(ParamPartition { frozen, trainable })
    }

    /// Reads the partition off the stores' trainable flags.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut p = ParamPartition::default();
        for e in store.entries() {
            if e.tensor.requires_grad() {
                p.trainable.insert(e.name.clone());
            } else {
                p.frozen.insert(e.name.clone());
            }
        }
        p
    }

    /// Checks that the partition covers exactly the registry's names.
    pub fn validate(&self, registry: &ParamStore) -> Result<()> {
        for n in self.frozen.iter().chain(&self.trainable) {
            if !registry.contains(n) {
                return Err(Error::UnknownParam(n.clone()));
            }
        }
        if let Some(e) = registry
            .entries()
            .iter()
            .find(|e| !self.frozen.contains(&e.name) && !self.trainable.contains(&e.name))
        {
            return Err(Error::Invalid(format!("`{}` is in neither partition set", e.name)));
        }
        Ok(())
    }

    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        self.validate(store)?;
        for id in store.ids().collect::<Vec<_>>() {
            let on = self.trainable.contains(store.name(id));
            store.set_trainable(id, on);
        }
        Ok(())
    }
}

/// Exact element count of the trainable side of `partition`.
pub fn count_trainable(partition: &ParamPartition, registry: &ParamStore) -> Result<usize> {
    for n in &partition.frozen {
        if !registry.contains(n) {
            return Err(Error::UnknownParam(n.clone()));
        }
    }
    partition
        .trainable
        .iter()
        .map(|n| {
            registry
                .shape_of(n)
                .map(|s| s.iter().product::<usize>())
                .ok_or_else(|| Error::UnknownParam(n.clone()))
        })
        .sum()
}
