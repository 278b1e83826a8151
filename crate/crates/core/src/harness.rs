//! Stage orchestration: data generation, single-hop pre-training, type
//! prompting, unified training, prediction and the ablation runner.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{ChainMode, TrainConfig};
use crate::data::{self, AnswerKind, QAExample, QuestionKind, World};
use crate::error::{Error, Result};
use crate::knowledge_prompter::KnowledgePrompter;
use crate::metrics::{self, MetricsReport, Prediction};
use crate::optim::{self, LossLog, StageSchedule};
use crate::params::ParamStore;
use crate::prompting::DeepPromptSet;
use crate::tensor::Tape;
use crate::transformer::{EncoderDecoder, ModelConfig};
use crate::type_prompter::{train_type_prompter, QuestionTypeLabel, TypePrompterModel};
use crate::unified_prompter::{
    EncodedExample, Specials, UnifiedModel, KNOWLEDGE_BACKBONE, KNOWLEDGE_PREFIX, READER, TYPE_PROMPT,
};
use crate::vocab::Vocab;

pub const ENV_ARTIFACTS: &str = "PEI_ARTIFACTS";

/// Artifact root from the environment, defaulting to `./artifacts`.
pub fn artifact_root() -> PathBuf {
    std::env::var_os(ENV_ARTIFACTS).map_or_else(|| PathBuf::from("artifacts"), PathBuf::from)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationVariant {
    Full,
    NoTypePrompter,
    NoPretrain,
    NoImplicit,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoTypePrompter,
        AblationVariant::NoPretrain,
        AblationVariant::NoImplicit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoTypePrompter => "no_type_prompter",
            AblationVariant::NoPretrain => "no_pretrain",
            AblationVariant::NoImplicit => "no_implicit",
        }
    }

    pub fn uses_type_prompts(self) -> bool {
        self != AblationVariant::NoTypePrompter
    }

    pub fn uses_knowledge(self) -> bool {
        self != AblationVariant::NoImplicit
    }

    pub fn uses_pretrained_reader(self) -> bool {
        self != AblationVariant::NoPretrain
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

// ---- data ----------------------------------------------------------------

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const SINGLEHOP_FILE: &str = "singlehop.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const WORLD_FILE: &str = "world.json";

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub world: World,
    pub vocab: Vocab,
    pub singlehop: Vec<QAExample>,
    pub train: Vec<QAExample>,
    pub dev: Vec<QAExample>,
}

const MULTI_HOP: [QuestionKind; 2] = [QuestionKind::Bridge, QuestionKind::Comparison];

pub fn generate_benchmark(cfg: &TrainConfig) -> Result<Benchmark> {
    let world = data::generate_world(cfg.seed, cfg.entities, cfg.relations)?;
    let opts = cfg.gen_options();
    let base = cfg.seed.wrapping_mul(0x1000);
    Ok(Benchmark {
        vocab: world.vocabulary(),
        singlehop: data::generate_dataset(&world, &[QuestionKind::SingleHop], cfg.singlehop_size, base + 1, &opts)?,
        train: data::generate_dataset(&world, &MULTI_HOP, cfg.train_size, base + 2, &opts)?,
        dev: data::generate_dataset(&world, &MULTI_HOP, cfg.dev_size, base + 3, &opts)?,
        world,
    })
}

pub fn write_benchmark(b: &Benchmark, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    data::write_examples(dir.join(SINGLEHOP_FILE), &b.singlehop)?;
    data::write_examples(dir.join(TRAIN_FILE), &b.train)?;
    data::write_examples(dir.join(DEV_FILE), &b.dev)?;
    b.vocab.save(dir.join(VOCAB_FILE))?;
    fs::write(dir.join(WORLD_FILE), serde_json::to_string(&b.world)?)?;
    cfg.save(dir.join("config.txt"))?;
    Ok(())
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingStage {
            stage,
            path,
        })
    }
}

pub fn load_vocab(dir: &Path) -> Result<Vocab> {
    Vocab::load(require(dir.join(VOCAB_FILE), "generate-data")?)
}

pub fn load_split(dir: &Path, file: &str) -> Result<Vec<QAExample>> {
    data::read_examples(require(dir.join(file), "generate-data")?)
}

pub fn load_checkpoint(path: &Path, stage: &'static str) -> Result<Checkpoint> {
    Checkpoint::load(require(path.to_path_buf(), stage)?)
}

// ---- stages ----------------------------------------------------------------

/// Before/after digests of a parameter group that must not change in a stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeCheck {
    pub stage: String,
    pub group: String,
    pub before: String,
    pub after: String,
}

impl FreezeCheck {
    pub fn holds(&self) -> bool {
        self.before == self.after
    }

    fn enforce(self) -> Result<Self> {
        if self.holds() {
            Ok(self)
        } else {
            Err(Error::Invalid(format!(
                "frozen group `{}` changed during `{}`",
                self.group, self.stage
            )))
        }
    }
}

fn schedule(cfg: &TrainConfig, steps: usize, lr: f64, seed: u64) -> StageSchedule {
    StageSchedule {
        steps,
        batch_size: cfg.batch_size,
        lr,
        warmup_ratio: cfg.warmup_ratio,
        weight_decay: cfg.weight_decay,
        seed,
        prompt_lr: None,
    }
}

fn stage_meta(cfg: &TrainConfig, stage: &str, seed: u64, mcfg: &ModelConfig) -> Vec<(String, String)> {
    let mut m = vec![
        ("config.digest".to_string(), cfg.digest()),
        ("stage".to_string(), stage.to_string()),
        ("seed".to_string(), seed.to_string()),
    ];
    m.extend(mcfg.to_meta("model."));
    m
}

fn encode_all(vocab: &Vocab, exs: &[QAExample]) -> Vec<EncodedExample> {
    exs.iter().map(|e| EncodedExample::new(vocab, e)).collect()
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub reader_log: LossLog,
    pub knowledge_log: LossLog,
}

/// Trains the reader (encoder + QA heads) and the encoder-decoder used by the
/// knowledge prompter on single-hop questions.
pub fn pretrain_singlehop(cfg: &TrainConfig, vocab: &Vocab, singlehop: &[QAExample], seed: u64) -> Result<PretrainOutput> {
    let mcfg = cfg.model_config(vocab.len());
    let specials = Specials::from_vocab(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut reader = UnifiedModel::init_reader(&mut store, &mcfg, specials, &mut rng)?;
    reader.support_weight = cfg.support_weight;
    let ed = EncoderDecoder::init(&mut store, KNOWLEDGE_BACKBONE, &mcfg, &mut rng)?;
    let encoded = encode_all(vocab, singlehop);
    let reader_log = optim::train(
        &mut store,
        &encoded,
        &schedule(cfg, cfg.pretrain_steps, cfg.lr, seed),
        |tape, store, ex| reader.example_loss(tape, store, ex, ChainMode::Gold),
    )?;
    let sep = specials.sep;
    let knowledge_log = optim::train(
        &mut store,
        &encoded,
        &schedule(cfg, cfg.pretrain_steps, cfg.lr, seed.wrapping_add(1)),
        |tape, store, ex| {
            let answer = single_answer_token(ex)?;
            let mut ids = ex.question.clone();
            ids.push(sep);
            for &i in &ex.support_order {
                ids.extend_from_slice(&ex.sentences[i]);
            }
            let h = ed.encoder.encode(tape, store, &ids, None, None)?;
            let out = ed.decoder.decode(tape, store, h, 1, None)?;
            let logits = ed.lm_logits(tape, store, out)?;
            tape.cross_entropy_from_logits(logits, &[answer])
        },
    )?;
    let checkpoint = Checkpoint::new(store).with_meta(stage_meta(cfg, "pretrain-singlehop", seed, &mcfg));
    Ok(PretrainOutput {
        checkpoint,
        reader_log,
        knowledge_log,
    })
}

fn single_answer_token(ex: &EncodedExample) -> Result<usize> {
    let (s, _) = ex
        .gold
        .span
        .ok_or_else(|| Error::Invalid(format!("{}: single-hop example without an answer span", ex.id)))?;
    Ok(ex.sentences.iter().flatten().nth(s).copied().expect("span inside context"))
}

pub struct TypeStageOutput {
    /// Full type-prompter store (backbone, prompts, head).
    pub model: Checkpoint,
    /// Exported, frozen prompts.
    pub prompts: Checkpoint,
    pub log: LossLog,
    pub freeze: FreezeCheck,
}

fn type_data(vocab: &Vocab, exs: &[QAExample]) -> Vec<(Vec<usize>, QuestionTypeLabel)> {
    exs.iter()
        .filter_map(|e| QuestionTypeLabel::from_kind(e.kind).map(|l| (vocab.encode(&e.question), l)))
        .collect()
}

pub fn train_type_stage(cfg: &TrainConfig, vocab: &Vocab, stage1: &Checkpoint, train: &[QAExample], seed: u64) -> Result<TypeStageOutput> {
    let mcfg = ModelConfig::from_meta(&stage1.meta, "model.")?;
    let mut store = ParamStore::new();
    store.copy_prefix(&stage1.store, &format!("{READER}."), &format!("{READER}."), "backbone")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let model = TypePrompterModel::init(&mut store, &mcfg, cfg.type_prompt_len, Specials::from_vocab(vocab).cls, &mut rng)?;
    let before = model.backbone_digest(&store);
    let log = train_type_prompter(&model, &mut store, &type_data(vocab, train), &schedule(cfg, cfg.type_steps, cfg.type_lr, seed.wrapping_add(3)))?;
    let freeze = FreezeCheck {
        stage: "train-type-prompter".into(),
        group: "type-prompter backbone".into(),
        before,
        after: model.backbone_digest(&store),
    }
    .enforce()?;
    let prompts = model
        .export(&store)?
        .with_meta([("config.digest".to_string(), cfg.digest())]);
    let model = Checkpoint::new(store).with_meta(stage_meta(cfg, "train-type-prompter", seed, &mcfg));
    Ok(TypeStageOutput {
        model,
        prompts,
        log,
        freeze,
    })
}

/// Held-out accuracy of a trained type prompter.
pub fn type_accuracy(model_ckpt: &Checkpoint, vocab: &Vocab, exs: &[QAExample]) -> Result<f64> {
    let mcfg = ModelConfig::from_meta(&model_ckpt.meta, "model.")?;
    let mut store = model_ckpt.store.clone();
    let model = TypePrompterModel::bind(&mut store, &mcfg, Specials::from_vocab(vocab).cls)?;
    let data = type_data(vocab, exs);
    let mut right = 0;
    for (q, y) in &data {
        if model.classify(&store, q)?.0 == *y {
            right += 1;
        }
    }
    Ok(right as f64 / data.len().max(1) as f64)
}

pub struct UnifiedStageOutput {
    pub checkpoint: Checkpoint,
    pub log: LossLog,
    pub freeze: Vec<FreezeCheck>,
    pub first_prefix_grad_norm: Option<f64>,
}

/// A loaded unified model ready for prediction.
pub struct LoadedModel {
    pub store: ParamStore,
    pub model: UnifiedModel,
    pub vocab: Vocab,
    pub eval_chain: ChainMode,
}

fn assemble_unified(
    cfg: &TrainConfig,
    vocab: &Vocab,
    stage1: &Checkpoint,
    type_prompts: Option<&Checkpoint>,
    variant: AblationVariant,
    seed: u64,
) -> Result<(ParamStore, UnifiedModel)> {
    let mcfg = ModelConfig::from_meta(&stage1.meta, "model.")?;
    let specials = Specials::from_vocab(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let mut store = ParamStore::new();
    let mut model = if variant.uses_pretrained_reader() {
        store.copy_prefix(&stage1.store, &format!("{READER}."), &format!("{READER}."), "backbone")?;
        UnifiedModel::bind_reader(&mut store, &mcfg, specials)?
    } else {
        UnifiedModel::init_reader(&mut store, &mcfg, specials, &mut rng)?
    };
    store.set_trainable_prefix(&format!("{READER}."), true);
    model.support_weight = cfg.support_weight;
    model.attach_unified_prompt(&mut store, cfg.unified_prompt_len, &mut rng)?;
    if variant.uses_type_prompts() {
        let ck = type_prompts.ok_or(Error::MissingStage {
            stage: "train-type-prompter",
            path: PathBuf::from("exported type prompts"),
        })?;
        let pt = DeepPromptSet::from_checkpoint(ck, &mut store, TYPE_PROMPT)?;
        model.attach_type_prompt(&mut store, pt)?;
    }
    if variant.uses_knowledge() {
        let kb = format!("{KNOWLEDGE_BACKBONE}.");
        store.copy_prefix(&stage1.store, &kb, &kb, "backbone")?;
        let kp = KnowledgePrompter::init(
            &mut store,
            KNOWLEDGE_BACKBONE,
            KNOWLEDGE_PREFIX,
            &mcfg,
            cfg.prefix_len,
            cfg.knowledge_slots,
            specials.sep,
            &mut rng,
        )?;
        model.attach_knowledge(&mut store, kp)?;
    }
    Ok((store, model))
}

/// Joint training of reader, P_u, prefixes and projection with P_t and the
/// encoder-decoder frozen.
pub fn train_unified_stage(
    cfg: &TrainConfig,
    vocab: &Vocab,
    stage1: &Checkpoint,
    type_prompts: Option<&Checkpoint>,
    variant: AblationVariant,
    train: &[QAExample],
    seed: u64,
) -> Result<UnifiedStageOutput> {
    let (mut store, model) = assemble_unified(cfg, vocab, stage1, type_prompts, variant, seed)?;
    let encoded = encode_all(vocab, train);
    let kb = format!("{KNOWLEDGE_BACKBONE}.");
    let mut groups: Vec<(String, String, String)> = Vec::new();
    if let Some(pt) = &model.type_prompt {
        let exported = type_prompts.expect("type prompts attached");
        let mut probe = ParamStore::new();
        let reference = DeepPromptSet::from_checkpoint(exported, &mut probe, TYPE_PROMPT)?;
        groups.push(("P_t".into(), reference.digest(&probe), pt.digest(&store)));
    }
    if model.knowledge.is_some() {
        groups.push(("encoder-decoder backbone".into(), stage1.store.digest_prefix(&kb), store.digest_prefix(&kb)));
    }
    let first_prefix_grad_norm = match &model.knowledge {
        Some(kp) => {
            let mut tape = Tape::new();
            let loss = model.example_loss(&mut tape, &store, &encoded[0], cfg.knowledge_train_chain)?;
            let g = tape.backward(loss)?;
            Some(
                kp.prefixes
                    .ids()
                    .filter_map(|id| g.param(id))
                    .flatten()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt(),
            )
        }
        None => None,
    };
    let mode = cfg.knowledge_train_chain;
    let log = optim::train(
        &mut store,
        &encoded,
        &StageSchedule {
            prompt_lr: Some(cfg.prompt_lr),
            ..schedule(cfg, cfg.unified_steps, cfg.lr, seed.wrapping_add(5))
        },
        |tape, store, ex| model.example_loss(tape, store, ex, mode),
    )?;
    let mut freeze = Vec::new();
    for (group, before, _) in groups {
        let after = if group == "P_t" {
            model.type_prompt.as_ref().expect("type prompt").digest(&store)
        } else {
            store.digest_prefix(&kb)
        };
        freeze.push(
            FreezeCheck {
                stage: format!("train-unified/{variant}"),
                group,
                before,
                after,
            }
            .enforce()?,
        );
    }
    let mcfg = model.encoder.cfg.clone();
    let mut meta = stage_meta(cfg, "train-unified", seed, &mcfg);
    meta.extend([
        ("variant".to_string(), variant.to_string()),
        ("knowledge.slots".to_string(), cfg.knowledge_slots.to_string()),
        ("knowledge.eval_chain".to_string(), cfg.knowledge_eval_chain.to_string()),
        ("support_weight".to_string(), cfg.support_weight.to_string()),
        ("vocab".to_string(), vocab.tokens().join("\n")),
    ]);
    Ok(UnifiedStageOutput {
        checkpoint: Checkpoint::new(store).with_meta(meta),
        log,
        freeze,
        first_prefix_grad_norm,
    })
}

impl LoadedModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mcfg = ModelConfig::from_meta(&ck.meta, "model.")?;
        let vocab = Vocab::from_tokens(ck.meta_value("vocab")?.lines());
        if vocab.len() != mcfg.vocab_size {
            return Err(Error::Checkpoint("stored vocabulary does not match the model".into()));
        }
        let slots: usize = ck
            .meta_value("knowledge.slots")?
            .parse()
            .map_err(|_| Error::Checkpoint("knowledge.slots is not an integer".into()))?;
        let eval_chain: ChainMode = ck.meta_value("knowledge.eval_chain")?.parse()?;
        let mut store = ck.store.clone();
        let has_kp = store.contains(&format!("{KNOWLEDGE_PREFIX}.enc.layer0.key"));
        let mut model = UnifiedModel::bind_full(&mut store, &mcfg, has_kp.then_some((&mcfg, slots)), Specials::from_vocab(&vocab))?;
        model.support_weight = ck.meta_value("support_weight")?.parse().unwrap_or(1.0);
        Ok(LoadedModel {
            store,
            model,
            vocab,
            eval_chain,
        })
    }

    fn answer_text(&self, ex: &EncodedExample, kind: AnswerKind, span: Option<(usize, usize)>) -> String {
        match (kind, span) {
            (AnswerKind::Yes, _) => "yes".into(),
            (AnswerKind::No, _) => "no".into(),
            (AnswerKind::Span, Some((s, e))) => {
                let flat: Vec<usize> = ex.sentences.iter().flatten().copied().collect();
                flat[s..=e].iter().map(|&t| self.vocab.token(t)).collect::<Vec<_>>().join(" ")
            }
            (AnswerKind::Span, None) => String::new(),
        }
    }

    pub fn predict(&self, ex: &QAExample, with_subquestions: bool) -> Result<Prediction> {
        let enc = EncodedExample::new(&self.vocab, ex);
        let (ans, sup) = self.model.predict(&self.store, &enc, self.eval_chain)?;
        let mut sub_answers = Vec::new();
        if with_subquestions {
            for q in &enc.subquestions {
                let sub = enc.with_question(q.clone());
                let (a, _) = self.model.predict(&self.store, &sub, self.eval_chain)?;
                sub_answers.push(self.answer_text(&sub, a.kind, a.span));
            }
        }
        Ok(Prediction {
            id: ex.id.clone(),
            answer: self.answer_text(&enc, ans.kind, ans.span),
            supports: sup.indices(),
            sub_answers,
        })
    }

    pub fn predict_all(&self, exs: &[QAExample], with_subquestions: bool) -> Result<Vec<Prediction>> {
        exs.iter().map(|e| self.predict(e, with_subquestions)).collect()
    }
}

/// Text report: aggregate metrics plus the sub-question outcome analysis.
pub fn evaluation_report(preds: &[Prediction], gold: &[QAExample], digest: Option<&str>) -> (MetricsReport, String, String) {
    let report = metrics::evaluate(preds, gold);
    let analysis = metrics::subquestion_analysis(&metrics::correctness_triples(preds, gold));
    let mut text = String::new();
    if let Some(d) = digest {
        let _ = writeln!(text, "config_digest {d}");
    }
    text.push_str(&report.summary());
    let _ = writeln!(text, "subquestion_examples {}", analysis.included);
    let _ = writeln!(text, "subquestion_excluded {}", analysis.excluded);
    let _ = writeln!(text, "both_correct_rate {:.4}", analysis.both_correct_rate);
    let _ = writeln!(text, "one_correct_rate {:.4}", analysis.one_correct_rate);
    (report, text, analysis.table.to_csv())
}

// ---- ablation ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: AblationVariant,
    pub seed: u64,
    pub ans_f1: f64,
    pub sup_f1: f64,
    pub joint_f1: f64,
    pub ans_em: f64,
    pub joint_em: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub config_digest: String,
    pub runs: Vec<AblationRun>,
    pub freeze: Vec<FreezeCheck>,
    pub type_accuracy: Vec<(u64, f64)>,
}

impl AblationReport {
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    pub fn run(&self, variant: AblationVariant, seed: u64) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Mean (ans F1, sup F1, joint F1) of a variant across seeds.
    pub fn mean(&self, variant: AblationVariant) -> (f64, f64, f64) {
        let rs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.variant == variant).collect();
        let n = rs.len().max(1) as f64;
        (
            rs.iter().map(|r| r.ans_f1).sum::<f64>() / n,
            rs.iter().map(|r| r.sup_f1).sum::<f64>() / n,
            rs.iter().map(|r| r.joint_f1).sum::<f64>() / n,
        )
    }

    pub fn variants(&self) -> Vec<AblationVariant> {
        AblationVariant::ALL
            .into_iter()
            .filter(|v| self.runs.iter().any(|r| r.variant == *v))
            .collect()
    }

    /// Seeds on which `full` scores at least `other` in joint F1.
    pub fn full_wins(&self, other: AblationVariant) -> usize {
        self.seeds()
            .iter()
            .filter(|&&s| match (self.run(AblationVariant::Full, s), self.run(other, s)) {
                (Some(f), Some(o)) => f.joint_f1 >= o.joint_f1,
                _ => false,
            })
            .count()
    }

    /// Variant means with each ablation's gain of the full model over it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_digest {}", self.config_digest);
        let _ = writeln!(s, "seeds {:?}", self.seeds());
        let _ = writeln!(s, "{:<18} {:>8} {:>8} {:>8}", "variant", "ans_f1", "sup_f1", "joint_f1");
        let full = self.mean(AblationVariant::Full);
        let variants = self.variants();
        for &v in &variants {
            let (a, b, c) = self.mean(v);
            let _ = writeln!(s, "{:<18} {a:>8.2} {b:>8.2} {c:>8.2}", v.as_str());
        }
        let _ = writeln!(s, "gain of full over each ablation");
        for v in variants.iter().filter(|v| **v != AblationVariant::Full) {
            let (a, b, c) = self.mean(*v);
            let _ = writeln!(
                s,
                "{:<18} {:>+8.2} {:>+8.2} {:>+8.2}  (full ≥ variant in joint F1 on {}/{} seeds)",
                v.as_str(),
                full.0 - a,
                full.1 - b,
                full.2 - c,
                self.full_wins(*v),
                self.seeds().len()
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,ans_em,ans_f1,sup_f1,joint_em,joint_f1\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.variant, r.seed, r.ans_em, r.ans_f1, r.sup_f1, r.joint_em, r.joint_f1
            );
        }
        s
    }
}

/// Full pipeline for every seed: pre-train, type prompter, then each
/// unified variant, scored on the dev split. Artifacts go under
/// `out/seed{s}/` when `out` is given.
pub fn run_ablation(
    cfg: &TrainConfig,
    bench: &Benchmark,
    seeds: &[u64],
    variants: &[AblationVariant],
    out: Option<&Path>,
) -> Result<AblationReport> {
    let mut report = AblationReport {
        config_digest: cfg.digest(),
        ..AblationReport::default()
    };
    for &seed in seeds {
        let dir = out.map(|o| o.join(format!("seed{seed}")));
        log::info!("seed {seed}: single-hop pre-training");
        let stage1 = pretrain_singlehop(cfg, &bench.vocab, &bench.singlehop, seed)?;
        log::info!("seed {seed}: type prompter");
        let ts = train_type_stage(cfg, &bench.vocab, &stage1.checkpoint, &bench.train, seed)?;
        report.type_accuracy.push((seed, type_accuracy(&ts.model, &bench.vocab, &bench.dev)?));
        report.freeze.push(ts.freeze.clone());
        if let Some(d) = &dir {
            stage1.checkpoint.save(d.join("stage1.ckpt"))?;
            ts.prompts.save(d.join("type_prompts.ckpt"))?;
            stage1.reader_log.append_to(d.join("stage1_reader.loss.csv"))?;
            stage1.knowledge_log.append_to(d.join("stage1_knowledge.loss.csv"))?;
            ts.log.append_to(d.join("type.loss.csv"))?;
        }
        for &variant in variants {
            log::info!("seed {seed}: unified training, variant {variant}");
            let us = train_unified_stage(cfg, &bench.vocab, &stage1.checkpoint, Some(&ts.prompts), variant, &bench.train, seed)?;
            report.freeze.extend(us.freeze.iter().cloned());
            let loaded = LoadedModel::from_checkpoint(&us.checkpoint)?;
            let preds = loaded.predict_all(&bench.dev, false)?;
            let m = metrics::evaluate(&preds, &bench.dev);
            log::info!(
                "seed {seed} {variant}: ans F1 {:.2} sup F1 {:.2} joint F1 {:.2}",
                m.ans_f1,
                m.sup_f1,
                m.joint_f1
            );
            if let Some(d) = &dir {
                us.log.append_to(d.join(format!("unified_{variant}.loss.csv")))?;
                metrics::write_predictions(d.join(format!("dev_{variant}.predictions.jsonl")), &preds)?;
            }
            report.runs.push(AblationRun {
                variant,
                seed,
                ans_f1: m.ans_f1,
                sup_f1: m.sup_f1,
                joint_f1: m.joint_f1,
                ans_em: m.ans_em,
                joint_em: m.joint_em,
            });
        }
    }
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        fs::write(o.join("ablation.txt"), report.to_text())?;
        fs::write(o.join("ablation.csv"), report.to_csv())?;
    }
    Ok(report)
}
