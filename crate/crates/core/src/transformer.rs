//! Encoder and decoder stacks with per-layer hooks for deep prompts and
//! key/value prefixes.
//!
//! Layers are pre-norm: `x + attn(ln(x))`, then `x + ffn(ln(x))`, with a final
//! layer norm. Deep prompts occupy the first rows of the sequence: their
//! layer-0 matrix is embedded like a token (with positions) and at every later
//! layer the prompt rows of the residual stream are replaced by that layer's
//! matrix. Prefixes are prepended to a layer's projected keys and values.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{filled_tensor, normal_tensor, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Number of layers.
    pub layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Prompt length in tokens; may be zero.
    pub prompt_len: usize,
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            layers: 4,
            n_heads: 4,
            vocab_size: 600,
            max_seq_len: 256,
            prompt_len: 8,
            ffn_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("d", self.d),
            ("layers", self.layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((k, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be ≥ 1")));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    /// Key/value pairs written into checkpoint headers under `prefix`.
    pub fn to_meta(&self, prefix: &str) -> Vec<(String, String)> {
        [
            ("d", self.d),
            ("layers", self.layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("prompt_len", self.prompt_len),
            ("ffn_dim", self.ffn_dim),
        ]
        .into_iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v.to_string()))
        .collect()
    }

    pub fn from_meta(meta: &std::collections::BTreeMap<String, String>, prefix: &str) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            let key = format!("{prefix}{k}");
            meta.get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{key}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("header `{key}` is not an integer")))
        };
        let cfg = ModelConfig {
            d: get("d")?,
            layers: get("layers")?,
            n_heads: get("n_heads")?,
            vocab_size: get("vocab_size")?,
            max_seq_len: get("max_seq_len")?,
            prompt_len: get("prompt_len")?,
            ffn_dim: get("ffn_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Registers fresh parameters (when given an rng) or binds to existing ones
/// by name, checking shapes.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: Option<&'a mut dyn RngCore>,
    pub role: &'a str,
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match self.rng.as_mut() {
            Some(rng) => {
                let t = match init {
                    Init::Normal(std) => normal_tensor(rng, shape.to_vec(), std),
                    Init::Zeros => filled_tensor(shape.to_vec(), 0.0),
                    Init::Ones => filled_tensor(shape.to_vec(), 1.0),
                };
                self.store.register(name, self.role, t)
            }
            None => {
                let id = self.store.id(name)?;
                let got = self.store.tensor(id).shape();
                if got != shape {
                    return Err(Error::shape(
                        "bind",
                        format!("`{name}` stored as {got:?}, model expects {shape:?}"),
                    ));
                }
                Ok(id)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn build(b: &mut Builder, name: &str, i: usize, o: usize, bias: bool) -> Result<Self> {
        Ok(Linear {
            w: b.param(&format!("{name}.w"), &[i, o], Init::Normal(INIT_STD))?,
            b: if bias {
                Some(b.param(&format!("{name}.b"), &[o], Init::Zeros)?)
            } else {
                None
            },
        })
    }

    pub fn init(
        store: &mut ParamStore,
        name: &str,
        (i, o): (usize, usize),
        bias: bool,
        role: &str,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let mut b = Builder {
            store,
            rng: Some(rng),
            role,
        };
        Self::build(&mut b, name, i, o, bias)
    }

    /// Identity weight (truncated when `i != o`) and zero bias.
    pub fn init_identity(store: &mut ParamStore, name: &str, (i, o): (usize, usize), role: &str) -> Result<Self> {
        let mut w = Tensor::zeros(vec![i, o]);
        for k in 0..i.min(o) {
            w.data_mut()[k * o + k] = 1.0;
        }
        Ok(Linear {
            w: store.register(format!("{name}.w"), role, w)?,
            b: Some(store.register(format!("{name}.b"), role, filled_tensor(vec![o], 0.0))?),
        })
    }

    pub fn bind(store: &mut ParamStore, name: &str, (i, o): (usize, usize), bias: bool) -> Result<Self> {
        let mut b = Builder {
            store,
            rng: None,
            role: "",
        };
        Self::build(&mut b, name, i, o, bias)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    fn build(b: &mut Builder, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: b.param(&format!("{name}.g"), &[d], Init::Ones)?,
            bias: b.param(&format!("{name}.b"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.multiply(n, g)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d: usize,
}

/// Attention mask over the concatenated (prefix + key) positions.
#[derive(Clone, Debug)]
pub enum AttnMask {
    None,
    /// Query `i` sees every prefix position and keys `0..=i`.
    Causal,
    /// Additive mask of shape (queries, prefix + keys); `true` means visible.
    Explicit(Vec<Vec<bool>>),
}

/// Per-layer key/value prefix parameters, each (p × d).
#[derive(Clone, Copy, Debug)]
pub struct KvPrefix {
    pub key: ParamId,
    pub value: ParamId,
}

/// Collects attention weight matrices (one per head per layer) when enabled.
#[derive(Debug, Default)]
pub struct AttentionTrace {
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    fn build(b: &mut Builder, name: &str, d: usize, n_heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::build(b, &format!("{name}.q"), d, d, true)?,
            k: Linear::build(b, &format!("{name}.k"), d, d, true)?,
            v: Linear::build(b, &format!("{name}.v"), d, d, true)?,
            o: Linear::build(b, &format!("{name}.o"), d, d, true)?,
            n_heads,
            d,
        })
    }

    /// Multi-head attention of `queries` over `keys_values`, with an optional
    /// (key, value) prefix prepended after projection.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_with_prefix(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys_values: Var,
        prefix: Option<(Var, Var)>,
        mask: &AttnMask,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let (lq, dq) = tape.dims(queries);
        let (_, dk) = tape.dims(keys_values);
        if dq != self.d || dk != self.d {
            return Err(Error::shape(
                "attention",
                format!("hidden width {dq}/{dk} does not match model d = {}", self.d),
            ));
        }
        let q = self.q.forward(tape, store, queries)?;
        let mut k = self.k.forward(tape, store, keys_values)?;
        let mut v = self.v.forward(tape, store, keys_values)?;
        let mut p = 0;
        if let Some((pk, pv)) = prefix {
            let (pr, pc) = tape.dims(pk);
            let (vr, vc) = tape.dims(pv);
            if pc != self.d || vc != self.d {
                return Err(Error::shape(
                    "attention_with_prefix",
                    format!("prefix width {pc}/{vc} does not match model d = {}", self.d),
                ));
            }
            if pr != vr {
                return Err(Error::shape(
                    "attention_with_prefix",
                    format!("prefix key length {pr} != value length {vr}"),
                ));
            }
            p = pr;
            k = tape.concat(&[pk, k], 0)?;
            v = tape.concat(&[pv, v], 0)?;
        }
        let (lk, _) = tape.dims(k);
        let mask_var = self.mask_constant(tape, mask, lq, lk, p)?;
        let dh = self.d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut trace = trace;
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, h * dh, (h + 1) * dh)?,
                    tape.slice(k, 1, h * dh, (h + 1) * dh)?,
                    tape.slice(v, 1, h * dh, (h + 1) * dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask_var {
                s = tape.add(s, m)?;
            }
            let w = tape.softmax_rows(s);
            if let Some(t) = trace.as_deref_mut() {
                t.weights.push(w);
            }
            heads.push(tape.matmul(w, vh)?);
        }
        let merged = tape.concat(&heads, 1)?;
        self.o.forward(tape, store, merged)
    }

    fn mask_constant(&self, tape: &mut Tape, mask: &AttnMask, lq: usize, lk: usize, p: usize) -> Result<Option<Var>> {
        let data = match mask {
            AttnMask::None => return Ok(None),
            AttnMask::Causal => {
                let mut m = vec![0.0; lq * lk];
                for i in 0..lq {
                    for j in p..lk {
                        if j - p > i {
                            m[i * lk + j] = MASKED;
                        }
                    }
                }
                m
            }
            AttnMask::Explicit(rows) => {
                if rows.len() != lq || rows.iter().any(|r| r.len() != lk) {
                    return Err(Error::shape(
                        "attention mask",
                        format!("mask must be {lq} x {lk} (queries x prefix+keys)"),
                    ));
                }
                rows.iter()
                    .flat_map(|r| r.iter().map(|&vis| if vis { 0.0 } else { MASKED }))
                    .collect()
            }
        };
        Ok(Some(tape.constant(vec![lq, lk], data)?))
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn build(b: &mut Builder, name: &str, d: usize, ffn: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::build(b, &format!("{name}.up"), d, ffn, true)?,
            down: Linear::build(b, &format!("{name}.down"), ffn, d, true)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// One block of the input sequence fed to [`EncoderStack::forward`].
#[derive(Clone, Copy, Debug)]
pub enum Segment<'a> {
    /// Deep prompt: one (l × d) matrix per layer. Must precede all other segments.
    Prompt(&'a [ParamId]),
    Tokens(&'a [usize]),
    /// Continuous (n × d) rows carrying the knowledge segment embedding.
    Continuous(Var),
}

#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub cfg: ModelConfig,
    pub name: String,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub seg_emb: ParamId,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl EncoderStack {
    /// Registers a freshly initialized encoder under `name`.
    pub fn init(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        Self::build(
            &mut Builder {
                store,
                rng: Some(rng),
                role: "backbone",
            },
            name,
            cfg,
        )
    }

    /// Binds to an encoder already present in `store` (e.g. after loading).
    pub fn bind(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Self::build(
            &mut Builder {
                store,
                rng: None,
                role: "backbone",
            },
            name,
            cfg,
        )
    }

    pub(crate) fn build(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let layers = (0..cfg.layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                Ok(EncoderLayer {
                    ln_attn: LayerNorm::build(b, &format!("{n}.ln_attn"), d)?,
                    attn: MultiHeadAttention::build(b, &format!("{n}.attn"), d, cfg.n_heads)?,
                    ln_ffn: LayerNorm::build(b, &format!("{n}.ln_ffn"), d)?,
                    ffn: FeedForward::build(b, &format!("{n}.ffn"), d, cfg.ffn_dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderStack {
            cfg: cfg.clone(),
            name: name.to_string(),
            tok_emb: b.param(&format!("{name}.tok_emb"), &[cfg.vocab_size, d], Init::Normal(INIT_STD))?,
            pos_emb: b.param(&format!("{name}.pos_emb"), &[cfg.max_seq_len, d], Init::Normal(INIT_STD))?,
            seg_emb: b.param(&format!("{name}.seg_emb"), &[2, d], Init::Normal(INIT_STD))?,
            layers,
            final_ln: LayerNorm::build(b, &format!("{name}.final_ln"), d)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn attention(&self, layer: usize) -> &MultiHeadAttention {
        &self.layers[layer].attn
    }

    /// Plain token encoding with optional deep prompts and prefixes.
    /// Output is (prompt_len + seq_len) × d.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        deep_prompts: Option<&[ParamId]>,
        prefixes: Option<&[KvPrefix]>,
    ) -> Result<Var> {
        let mut segs = Vec::with_capacity(2);
        if let Some(p) = deep_prompts {
            segs.push(Segment::Prompt(p));
        }
        segs.push(Segment::Tokens(ids));
        self.forward(tape, store, &segs, prefixes, None)
    }

    /// Total row count of a segment list, validated against `max_seq_len`.
    pub fn sequence_len(&self, tape: &Tape, store: &ParamStore, segments: &[Segment]) -> Result<usize> {
        let mut len = 0;
        for s in segments {
            let (n, what) = match s {
                Segment::Prompt(layers) => (
                    layers.first().map_or(0, |id| store.tensor(*id).shape()[0]),
                    "prompt",
                ),
                Segment::Tokens(ids) => (ids.len(), "tokens"),
                Segment::Continuous(v) => (tape.dims(*v).0, "knowledge"),
            };
            len += n;
            if len > self.cfg.max_seq_len {
                return Err(Error::SequenceTooLong {
                    component: what.to_string(),
                    len,
                    max: self.cfg.max_seq_len,
                });
            }
        }
        Ok(len)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        segments: &[Segment],
        prefixes: Option<&[KvPrefix]>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let d = self.cfg.d;
        let total = self.sequence_len(tape, store, segments)?;
        if total == 0 {
            return Err(Error::Invalid("encoder input is empty".into()));
        }
        if let Some(p) = prefixes {
            if p.len() != self.layers.len() {
                return Err(Error::LayerMismatch {
                    prompt: p.len(),
                    stack: self.layers.len(),
                });
            }
        }
        let mut prompt_blocks: Vec<&[ParamId]> = Vec::new();
        let mut seen_other = false;
        let mut rows = Vec::with_capacity(segments.len());
        for s in segments {
            match s {
                Segment::Prompt(layers) => {
                    if seen_other {
                        return Err(Error::Invalid("deep prompts must precede tokens and knowledge".into()));
                    }
                    if layers.len() != self.layers.len() {
                        return Err(Error::LayerMismatch {
                            prompt: layers.len(),
                            stack: self.layers.len(),
                        });
                    }
                    for id in layers.iter() {
                        let sh = store.tensor(*id).shape();
                        if sh.len() != 2 || sh[1] != d {
                            return Err(Error::shape("deep prompt", format!("expected (l, {d}), got {sh:?}")));
                        }
                    }
                    if store.tensor(layers[0]).shape()[0] == 0 {
                        continue;
                    }
                    prompt_blocks.push(layers);
                    rows.push(tape.param(store, layers[0]));
                }
                Segment::Tokens(ids) => {
                    seen_other = true;
                    if ids.is_empty() {
                        continue;
                    }
                    if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
                        return Err(Error::TokenOutOfRange {
                            id: bad,
                            vocab: self.cfg.vocab_size,
                        });
                    }
                    let table = tape.param(store, self.tok_emb);
                    let e = tape.embedding_gather(table, ids)?;
                    let seg = tape.param(store, self.seg_emb);
                    let seg0 = tape.embedding_gather(seg, &[0])?;
                    rows.push(tape.add(e, seg0)?);
                }
                Segment::Continuous(v) => {
                    seen_other = true;
                    let (_, c) = tape.dims(*v);
                    if c != d {
                        return Err(Error::shape("knowledge input", format!("width {c} != d = {d}")));
                    }
                    let seg = tape.param(store, self.seg_emb);
                    let seg1 = tape.embedding_gather(seg, &[1])?;
                    rows.push(tape.add(*v, seg1)?);
                }
            }
        }
        let x = tape.concat(&rows, 0)?;
        let pos = tape.param(store, self.pos_emb);
        let pos = tape.slice(pos, 0, 0, total)?;
        let mut x = tape.add(x, pos)?;
        let n_prompt: usize = prompt_blocks
            .iter()
            .map(|b| store.tensor(b[0]).shape()[0])
            .sum();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 && n_prompt > 0 {
                let mut parts: Vec<Var> = prompt_blocks.iter().map(|b| tape.param(store, b[i])).collect();
                if total > n_prompt {
                    parts.push(tape.slice(x, 0, n_prompt, total)?);
                }
                x = tape.concat(&parts, 0)?;
            }
            let prefix = prefixes.map(|p| (tape.param(store, p[i].key), tape.param(store, p[i].value)));
            let h = layer.ln_attn.forward(tape, store, x)?;
            let a = layer.attn.attention_with_prefix(
                tape,
                store,
                h,
                h,
                prefix,
                &AttnMask::None,
                trace.as_deref_mut(),
            )?;
            x = tape.add(x, a)?;
            let h = layer.ln_ffn.forward(tape, store, x)?;
            let f = layer.ffn.forward(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        self.final_ln.forward(tape, store, x)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Non-autoregressive decoder: position `t` starts from a learned query
/// embedding, attends causally to earlier positions and fully to the encoder.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub cfg: ModelConfig,
    pub query_emb: ParamId,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
}

impl DecoderStack {
    pub(crate) fn build(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let layers = (0..cfg.layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                Ok(DecoderLayer {
                    ln_self: LayerNorm::build(b, &format!("{n}.ln_self"), d)?,
                    self_attn: MultiHeadAttention::build(b, &format!("{n}.self_attn"), d, cfg.n_heads)?,
                    ln_cross: LayerNorm::build(b, &format!("{n}.ln_cross"), d)?,
                    cross_attn: MultiHeadAttention::build(b, &format!("{n}.cross_attn"), d, cfg.n_heads)?,
                    ln_ffn: LayerNorm::build(b, &format!("{n}.ln_ffn"), d)?,
                    ffn: FeedForward::build(b, &format!("{n}.ffn"), d, cfg.ffn_dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderStack {
            cfg: cfg.clone(),
            query_emb: b.param(&format!("{name}.query_emb"), &[cfg.max_seq_len, d], Init::Normal(INIT_STD))?,
            layers,
            final_ln: LayerNorm::build(b, &format!("{name}.final_ln"), d)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Runs `m` learned query positions against the encoder states.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoder_states: Var,
        m: usize,
        prefixes: Option<&[KvPrefix]>,
    ) -> Result<Var> {
        if m == 0 {
            return Err(Error::Invalid("decoder needs at least one position".into()));
        }
        if m > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                component: "decoder positions".into(),
                len: m,
                max: self.cfg.max_seq_len,
            });
        }
        let q = tape.param(store, self.query_emb);
        let inputs = tape.slice(q, 0, 0, m)?;
        self.decode_inputs(tape, store, encoder_states, inputs, prefixes, None)
    }

    /// Decoder pass over explicit (m × d) inputs.
    pub fn decode_inputs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoder_states: Var,
        inputs: Var,
        prefixes: Option<&[KvPrefix]>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        if let Some(p) = prefixes {
            if p.len() != self.layers.len() {
                return Err(Error::LayerMismatch {
                    prompt: p.len(),
                    stack: self.layers.len(),
                });
            }
        }
        let mut x = inputs;
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = prefixes.map(|p| (tape.param(store, p[i].key), tape.param(store, p[i].value)));
            let h = layer.ln_self.forward(tape, store, x)?;
            let a = layer.self_attn.attention_with_prefix(
                tape,
                store,
                h,
                h,
                prefix,
                &AttnMask::Causal,
                trace.as_deref_mut(),
            )?;
            x = tape.add(x, a)?;
            let h = layer.ln_cross.forward(tape, store, x)?;
            let c = layer.cross_attn.attention_with_prefix(
                tape,
                store,
                h,
                encoder_states,
                None,
                &AttnMask::None,
                None,
            )?;
            x = tape.add(x, c)?;
            let h = layer.ln_ffn.forward(tape, store, x)?;
            let f = layer.ffn.forward(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        self.final_ln.forward(tape, store, x)
    }
}

/// Encoder-decoder pair sharing the token embedding for its output head.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub encoder: EncoderStack,
    pub decoder: DecoderStack,
}

impl EncoderDecoder {
    pub fn init(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let mut b = Builder {
            store,
            rng: Some(rng),
            role: "backbone",
        };
        Self::build(&mut b, name, cfg)
    }

    pub fn bind(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut b = Builder {
            store,
            rng: None,
            role: "backbone",
        };
        Self::build(&mut b, name, cfg)
    }

    fn build(b: &mut Builder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(EncoderDecoder {
            encoder: EncoderStack::build(b, &format!("{name}.enc"), cfg)?,
            decoder: DecoderStack::build(b, &format!("{name}.dec"), cfg)?,
        })
    }

    /// Vocabulary logits for decoder states, tied to the token embedding.
    pub fn lm_logits(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let table = tape.param(store, self.encoder.tok_emb);
        let t = tape.transpose(table)?;
        tape.matmul(hidden, t)
    }
}
