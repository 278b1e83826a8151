//! One PASS/FAIL line per acceptance criterion. Criteria 5 to 7 share a
//! single three-seed ablation run on the default configuration.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pei_core::config::{ChainMode, TrainConfig};
use pei_core::data::{self, QuestionKind};
use pei_core::harness::{self, AblationReport, AblationVariant, LoadedModel};
use pei_core::knowledge_prompter::KnowledgePrompter;
use pei_core::metrics::{self, AnswerScore};
use pei_core::params::{filled_tensor, ParamId, ParamStore};
use pei_core::prompting::{count_trainable, ParamPartition};
use pei_core::tensor::{grad_check, grad_check_with, OpAttrs, OpKind, Tape, Tensor, Var};
use pei_core::transformer::{EncoderDecoder, EncoderStack, KvPrefix, ModelConfig, Segment};
use pei_core::type_prompter::TypePrompterModel;
use pei_core::unified_prompter::{EncodedExample, Specials, UnifiedModel, READER};
use pei_core::Result;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: pei_core::Error) -> String {
    e.to_string()
}

fn c1_subquestion_rates() -> Check {
    let column = [49.2, 7.1, 22.1, 1.5, 1.2, 13.4, 1.0, 4.5];
    let mut triples = Vec::new();
    for (i, pct) in column.iter().enumerate() {
        let n = (pct * 10.0_f64).round() as usize;
        let t = (i & 4 == 0, i & 2 == 0, i & 1 == 0);
        triples.extend(std::iter::repeat_n(Some(t), n));
    }
    let a = metrics::subquestion_analysis(&triples);
    let ok = (a.both_correct_rate - 97.62).abs() <= 0.01 && (a.one_correct_rate - 36.55).abs() <= 0.01;
    ensure(
        ok,
        format!("both-correct {:.4}%, one-correct {:.4}%", a.both_correct_rate, a.one_correct_rate),
    )
}

fn c2_parameter_count() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut seen = Vec::new();
    for _ in 0..8 {
        let heads = rng.gen_range(1..=4);
        let d = heads * rng.gen_range(2..=6);
        let h = rng.gen_range(1..=4);
        let l = rng.gen_range(1..=12);
        let cfg = ModelConfig {
            d,
            layers: h,
            n_heads: heads,
            vocab_size: 30,
            max_seq_len: 64,
            prompt_len: l,
            ffn_dim: 2 * d,
        };
        let mut store = ParamStore::new();
        EncoderStack::init(&mut store, READER, &cfg, &mut rng).map_err(err)?;
        let m = TypePrompterModel::init(&mut store, &cfg, l, 0, &mut rng).map_err(err)?;
        let head: BTreeSet<String> = store
            .entries()
            .iter()
            .filter(|e| !e.name.starts_with(&format!("{}.", m.prompts.name)) && e.tensor.requires_grad())
            .map(|e| e.name.clone())
            .collect();
        let mut part = ParamPartition::from_store(&store);
        for n in head {
            part.trainable.remove(&n);
            part.frozen.insert(n);
        }
        let got = count_trainable(&part, &store).map_err(err)?;
        if got != d * h * l {
            return Err(format!("d={d} h={h} l={l}: counted {got}, expected {}", d * h * l));
        }
        seen.push(format!("({d},{h},{l})"));
    }
    Ok(format!("count = d*h*l for {}", seen.join(" ")))
}

fn weighted(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| 0.25 + ((i * 5) % 9) as f64 * 0.2).collect();
    let c = tape.constant(tape.shape(y).to_vec(), w)?;
    let p = tape.multiply(y, c)?;
    Ok(tape.sum(p))
}

fn op_under_test(kind: OpKind, rows: usize, cols: usize) -> impl Fn(&mut Tape, Var) -> Result<Var> {
    move |tape, x| {
        let y = match kind {
            OpKind::MatMul => {
                let xt = tape.transpose(x)?;
                tape.matmul(x, xt)?
            }
            OpKind::Add => {
                let row = tape.slice(x, 0, 0, 1)?;
                tape.add(x, row)?
            }
            OpKind::Multiply => tape.multiply(x, x)?,
            OpKind::Scale => tape.scale(x, 2.5),
            OpKind::Concat => {
                let sq = tape.multiply(x, x)?;
                tape.concat(&[x, sq], 1)?
            }
            OpKind::Slice => tape.slice(x, 1, 1, cols)?,
            OpKind::Transpose => tape.transpose(x)?,
            OpKind::SoftmaxRows => tape.softmax_rows(x),
            OpKind::LayerNorm => tape.apply(kind, &[x], &OpAttrs::default())?,
            OpKind::Gelu => tape.gelu(x),
            OpKind::EmbeddingGather => tape.embedding_gather(x, &[rows - 1, 0, rows - 1])?,
            OpKind::Mean => tape.mean(x),
            OpKind::Sum => tape.sum(x),
            OpKind::CrossEntropyFromLogits => {
                let labels: Vec<usize> = (0..rows).map(|i| (i * 3) % cols).collect();
                tape.cross_entropy_from_logits(x, &labels)?
            }
            OpKind::Sigmoid => tape.sigmoid(x),
            OpKind::BinaryCrossEntropy => {
                let p = tape.sigmoid(x);
                let t: Vec<f64> = (0..rows * cols).map(|i| (i % 2) as f64).collect();
                tape.binary_cross_entropy(p, &t)?
            }
        };
        weighted(tape, y)
    }
}

fn tiny_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 2,
        n_heads: 2,
        vocab_size: vocab,
        max_seq_len: 160,
        prompt_len: 2,
        ffn_dim: 16,
    }
}

/// Small unified model with unified prompts and a knowledge prompter over
/// one generated 2-hop example.
fn small_unified() -> Result<(ParamStore, UnifiedModel, EncodedExample)> {
    let world = data::generate_world(3, 12, 4)?;
    let vocab = world.vocabulary();
    let opts = data::GenOptions {
        min_distractors: 1,
        max_distractors: 1,
        noise: false,
    };
    let ex = data::generate_dataset(&world, &[QuestionKind::Bridge], 1, 5, &opts)?.remove(0);
    let cfg = tiny_model_config(vocab.len());
    let specials = Specials::from_vocab(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let mut model = UnifiedModel::init_reader(&mut store, &cfg, specials, &mut rng)?;
    model.attach_unified_prompt(&mut store, 3, &mut rng)?;
    EncoderDecoder::init(&mut store, "kp", &cfg, &mut rng)?;
    let kp = KnowledgePrompter::init(&mut store, "kp", "kpx", &cfg, 2, 2, specials.sep, &mut rng)?;
    model.attach_knowledge(&mut store, kp)?;
    Ok((store, model, EncodedExample::new(&vocab, &ex)))
}

fn c3_gradients() -> Check {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for kind in OpKind::ALL {
        for (r, c) in [(2, 3), (3, 4), (4, 2)] {
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let t = Tensor::new(vec![r, c], data).map_err(err)?;
            let e = grad_check(op_under_test(kind, r, c), &t, 1e-5).map_err(err)?;
            if e > 1e-4 {
                return Err(format!("{kind:?} at {r}x{c}: relative error {e:.2e}"));
            }
            worst = worst.max(e);
        }
    }

    let (store, model, ex) = small_unified().map_err(err)?;
    let mut tape = Tape::new();
    let loss = model.example_loss(&mut tape, &store, &ex, ChainMode::All).map_err(err)?;
    let g = tape.backward(loss).map_err(err)?;
    let mut targets: Vec<ParamId> = model.unified_prompt.as_ref().unwrap().layers.clone();
    targets.extend(model.knowledge.as_ref().unwrap().prefixes.ids());
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in &targets {
        let n = store.tensor(*id).len();
        for _ in 0..3 {
            coords.push((*id, rng.gen_range(0..n)));
        }
    }
    let analytic: Vec<f64> = coords
        .iter()
        .map(|(id, i)| g.param(*id).map_or(0.0, |v| v[*i]))
        .collect();
    let point: Vec<f64> = coords.iter().map(|(id, i)| store.tensor(*id).data()[*i]).collect();
    let cell = RefCell::new(store);
    let f = |x: &[f64]| -> Result<f64> {
        let mut s = cell.borrow_mut();
        for ((id, i), v) in coords.iter().zip(x) {
            s.tensor_mut(*id).data_mut()[*i] = *v;
        }
        let mut tape = Tape::new();
        let l = model.example_loss(&mut tape, &s, &ex, ChainMode::All)?;
        Ok(tape.scalar(l))
    };
    let rep = grad_check_with(f, &analytic, &point, 1e-5).map_err(err)?;
    let nonzero = analytic.iter().filter(|v| v.abs() > 0.0).count();
    ensure(
        rep.max_rel_error <= 1e-4 && worst <= 1e-4 && nonzero > coords.len() / 2,
        format!(
            "{} ops max rel err {worst:.1e}; unified loss over {} sampled P_u/prefix coords max rel err {:.1e}",
            OpKind::ALL.len(),
            coords.len(),
            rep.max_rel_error
        ),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c4_mechanisms() -> Check {
    let cfg = tiny_model_config(30);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut store = ParamStore::new();
    let ed = EncoderDecoder::init(&mut store, "ed", &cfg, &mut rng).map_err(err)?;
    let zero_prompt: Vec<ParamId> = (0..cfg.layers)
        .map(|i| store.register(format!("zp.layer{i}"), "unified_prompt", filled_tensor(vec![0, cfg.d], 0.0)))
        .collect::<Result<_>>()
        .map_err(err)?;
    let mut zero_prefix = |side: &str| -> Result<Vec<KvPrefix>> {
        (0..cfg.layers)
            .map(|i| {
                Ok(KvPrefix {
                    key: store.register(format!("zk.{side}{i}.key"), "knowledge_prefix", filled_tensor(vec![0, cfg.d], 0.0))?,
                    value: store.register(format!("zk.{side}{i}.value"), "knowledge_prefix", filled_tensor(vec![0, cfg.d], 0.0))?,
                })
            })
            .collect()
    };
    let enc_zero = zero_prefix("enc").map_err(err)?;
    let dec_zero = zero_prefix("dec").map_err(err)?;
    let ids = [3, 7, 1, 9, 4];
    let mut tape = Tape::new();
    let plain = ed.encoder.encode(&mut tape, &store, &ids, None, None).map_err(err)?;
    let prompted = ed
        .encoder
        .encode(&mut tape, &store, &ids, Some(&zero_prompt), Some(&enc_zero))
        .map_err(err)?;
    let dec_plain = ed.decoder.decode(&mut tape, &store, plain, 3, None).map_err(err)?;
    let dec_zero = ed.decoder.decode(&mut tape, &store, plain, 3, Some(&dec_zero)).map_err(err)?;
    let d_enc = max_diff(tape.value(plain), tape.value(prompted));
    let d_dec = max_diff(tape.value(dec_plain), tape.value(dec_zero));
    if d_enc > 1e-12 || d_dec > 1e-12 {
        return Err(format!("zero-length prompt/prefix drift: encoder {d_enc:.1e}, decoder {d_dec:.1e}"));
    }

    let kp = KnowledgePrompter::init(&mut store, "ed", "kpx", &cfg, 2, 3, 2, &mut rng).map_err(err)?;
    kp.freeze_backbone(&mut store);
    let q = [4, 5, 6];
    let s = vec![vec![10, 11, 12], vec![13, 14], vec![15, 16, 17, 18]];
    let mut tape = Tape::new();
    let k1 = kp.recall_step(&mut tape, &store, &q, &s[..1], &[]).map_err(err)?;
    let (ep, dp) = kp.prefixes.inject(&kp.backbone).map_err(err)?;
    let toks = kp.step_tokens(&q, &s[..1]);
    let enc = kp
        .backbone
        .encoder
        .forward(&mut tape, &store, &[Segment::Tokens(&toks)], Some(ep), None)
        .map_err(err)?;
    let direct = kp.backbone.decoder.decode(&mut tape, &store, enc, 3, Some(dp)).map_err(err)?;
    if tape.value(k1) != tape.value(direct) {
        return Err("recall_step at j = 1 differs from the direct encoder-decoder reduction".into());
    }

    let base = kp.recall_chain(&mut tape, &store, &q, &s).map_err(err)?;
    let base: Vec<Vec<f64>> = base.iter().map(|k| tape.value(*k).to_vec()).collect();
    for j in 1..s.len() {
        let mut p = s.clone();
        for sent in &mut p[j..] {
            for t in sent.iter_mut() {
                *t = 29 - (*t % 7);
            }
            sent.push(21);
        }
        let mut t2 = Tape::new();
        let ks = kp.recall_chain(&mut t2, &store, &q, &p).map_err(err)?;
        for (i, k) in ks.iter().take(j).enumerate() {
            if t2.value(*k) != base[i].as_slice() {
                return Err(format!("k_{} changed when sentences after {j} were perturbed", i + 1));
            }
        }
        if t2.value(ks[j]) == base[j].as_slice() {
            return Err(format!("k_{} ignores its own sentence", j + 1));
        }
    }
    Ok(format!(
        "zero-length drift enc {d_enc:.0e} dec {d_dec:.0e}; j=1 reduction bitwise; causality bitwise over a {}-step chain",
        s.len()
    ))
}

fn c8_metric_fixtures() -> Check {
    struct Fx {
        pred: &'static str,
        gold: &'static str,
        ps: &'static [usize],
        gs: &'static [usize],
        em: f64,
        f1: f64,
        sup_f1: f64,
        joint_f1: f64,
        joint_em: f64,
    }
    let fx = [
        Fx { pred: "kinshasa city", gold: "kinshasa", ps: &[0], gs: &[0], em: 0.0, f1: 0.6667, sup_f1: 1.0, joint_f1: 0.6667, joint_em: 0.0 },
        Fx { pred: "paris", gold: "paris", ps: &[0, 1], gs: &[0, 1], em: 1.0, f1: 1.0, sup_f1: 1.0, joint_f1: 1.0, joint_em: 1.0 },
        Fx { pred: "berlin", gold: "rome", ps: &[0], gs: &[0], em: 0.0, f1: 0.0, sup_f1: 1.0, joint_f1: 0.0, joint_em: 0.0 },
        Fx { pred: "The Eiffel Tower!", gold: "eiffel tower", ps: &[2], gs: &[2], em: 1.0, f1: 1.0, sup_f1: 1.0, joint_f1: 1.0, joint_em: 1.0 },
        Fx { pred: "yes", gold: "no", ps: &[0, 1], gs: &[0, 1], em: 0.0, f1: 0.0, sup_f1: 1.0, joint_f1: 0.0, joint_em: 0.0 },
        Fx { pred: "p b c d", gold: "b c e", ps: &[0], gs: &[0], em: 0.0, f1: 0.5714, sup_f1: 1.0, joint_f1: 0.5714, joint_em: 0.0 },
        Fx { pred: "rome", gold: "rome", ps: &[1, 2], gs: &[2, 3], em: 1.0, f1: 1.0, sup_f1: 0.5, joint_f1: 0.5, joint_em: 0.0 },
        Fx { pred: "rome", gold: "rome", ps: &[], gs: &[0], em: 1.0, f1: 1.0, sup_f1: 0.0, joint_f1: 0.0, joint_em: 0.0 },
        Fx { pred: "red fox", gold: "the red fox jumps", ps: &[0, 1, 2], gs: &[0], em: 0.0, f1: 0.8, sup_f1: 0.5, joint_f1: 0.4444, joint_em: 0.0 },
        Fx { pred: "no", gold: "no", ps: &[3, 1], gs: &[1, 3], em: 1.0, f1: 1.0, sup_f1: 1.0, joint_f1: 1.0, joint_em: 1.0 },
    ];
    let r4 = |x: f64| (x * 1e4).round() / 1e4;
    for (i, f) in fx.iter().enumerate() {
        let a: AnswerScore = metrics::answer_em_f1(f.pred, f.gold);
        let ps: BTreeSet<usize> = f.ps.iter().copied().collect();
        let gs: BTreeSet<usize> = f.gs.iter().copied().collect();
        let sj = metrics::support_and_joint(&ps, &gs, &a);
        let got = [a.em, r4(a.f1), r4(sj.sup_f1), r4(sj.joint_f1), sj.joint_em];
        let want = [f.em, f.f1, f.sup_f1, f.joint_f1, f.joint_em];
        if got != want {
            return Err(format!("fixture {}: got {got:?}, expected {want:?}", i + 1));
        }
    }
    Ok(format!("{} fixtures match to 4 decimals", fx.len()))
}

fn tiny_config() -> TrainConfig {
    TrainConfig::parse_str(
        "singlehop_size = 60\ntrain_size = 30\ndev_size = 10\npretrain_steps = 4\ntype_steps = 4\nunified_steps = 4\nbatch_size = 2\n",
    )
    .expect("tiny config")
}

fn c9_determinism() -> Check {
    let cfg = tiny_config();
    let run = || -> Result<(Vec<u8>, Vec<u8>, Vec<u8>, String)> {
        let b = harness::generate_benchmark(&cfg)?;
        let s1 = harness::pretrain_singlehop(&cfg, &b.vocab, &b.singlehop, 4)?;
        let ts = harness::train_type_stage(&cfg, &b.vocab, &s1.checkpoint, &b.train, 4)?;
        let us = harness::train_unified_stage(&cfg, &b.vocab, &s1.checkpoint, Some(&ts.prompts), AblationVariant::Full, &b.train, 4)?;
        let m = LoadedModel::from_checkpoint(&us.checkpoint)?;
        let preds = m.predict_all(&b.dev, true)?;
        let (_, text, table) = harness::evaluation_report(&preds, &b.dev, Some(&cfg.digest()));
        Ok((s1.checkpoint.to_bytes(), ts.prompts.to_bytes(), us.checkpoint.to_bytes(), text + &table))
    };
    let a = run().map_err(err)?;
    let b = run().map_err(err)?;
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3];
    ensure(
        same.iter().all(|x| *x),
        format!("stage1/type/unified checkpoints and report identical across runs: {same:?}"),
    )
}

fn ablation() -> std::result::Result<AblationReport, String> {
    let cfg = TrainConfig::default();
    let out: PathBuf = std::env::var_os(harness::ENV_ARTIFACTS)
        .map_or_else(|| std::env::temp_dir().join("pei-acceptance"), PathBuf::from)
        .join(format!("ablation-{}", cfg.digest()));
    let bench = harness::generate_benchmark(&cfg).map_err(err)?;
    harness::run_ablation(&cfg, &bench, &[1, 2, 3], &AblationVariant::ALL, Some(&out)).map_err(err)
}

fn c5_freezing(r: &AblationReport) -> Check {
    let groups: BTreeSet<&str> = r.freeze.iter().map(|f| f.group.as_str()).collect();
    let broken: Vec<String> = r
        .freeze
        .iter()
        .filter(|f| !f.holds())
        .map(|f| format!("{}:{}", f.stage, f.group))
        .collect();
    let ok = broken.is_empty() && r.freeze.iter().any(|f| f.stage.starts_with("train-type")) && groups.contains("P_t")
        && groups.contains("encoder-decoder backbone");
    ensure(
        ok,
        format!("{} digest checks over groups {:?}; broken {:?}", r.freeze.len(), groups, broken),
    )
}

fn c6_ordering(r: &AblationReport) -> Check {
    let ni = r.full_wins(AblationVariant::NoImplicit);
    let nt = r.full_wins(AblationVariant::NoTypePrompter);
    let per_seed: Vec<String> = r
        .seeds()
        .iter()
        .map(|&s| {
            let j = |v| r.run(v, s).map_or(f64::NAN, |x| x.joint_f1);
            format!(
                "seed {s}: full {:.2} no_implicit {:.2} no_type_prompter {:.2}",
                j(AblationVariant::Full),
                j(AblationVariant::NoImplicit),
                j(AblationVariant::NoTypePrompter)
            )
        })
        .collect();
    ensure(
        ni >= 2 && nt >= 2,
        format!(
            "full >= no_implicit on {ni}/3 seeds, full >= no_type_prompter on {nt}/3 seeds ({})",
            per_seed.join("; ")
        ),
    )
}

fn c7_competence(r: &AblationReport) -> Check {
    let (ans, sup, _) = r.mean(AblationVariant::Full);
    ensure(
        ans >= 90.0 && sup >= 90.0,
        format!("full mean dev ans F1 {ans:.2}, sup F1 {sup:.2} (targets 90.00)"),
    )
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<u32>> = std::env::var("PEI_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut results: Vec<(u32, &str, Check, f64)> = Vec::new();
    let mut timed = |n: u32, name: &'static str, f: &dyn Fn() -> Check| {
        if wanted(n) {
            let t = Instant::now();
            let r = guarded(f);
            results.push((n, name, r, t.elapsed().as_secs_f64()));
        }
    };
    timed(1, "metric arithmetic", &c1_subquestion_rates);
    timed(2, "parameter-count identity", &c2_parameter_count);
    timed(3, "gradient correctness", &c3_gradients);
    timed(4, "mechanism identities", &c4_mechanisms);
    timed(8, "metrics oracle suite", &c8_metric_fixtures);
    timed(9, "determinism", &c9_determinism);
    if [5, 6, 7].into_iter().any(wanted) {
        let t = Instant::now();
        let rep = catch_unwind(AssertUnwindSafe(ablation)).unwrap_or_else(|_| Err("ablation panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        let checks: [(u32, &str, fn(&AblationReport) -> Check); 3] = [
            (5, "freezing contracts", c5_freezing),
            (6, "ablation ordering", c6_ordering),
            (7, "toy competence", c7_competence),
        ];
        for (n, name, f) in checks {
            if wanted(n) {
                let r = match &rep {
                    Ok(r) => guarded(|| f(r)),
                    Err(e) => Err(format!("ablation failed: {e}")),
                };
                results.push((n, name, r, secs));
            }
        }
        if let Ok(r) = &rep {
            print!("{}", r.to_text());
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, r, secs) in &results {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} ({name}): {tag} [{secs:.1}s] {detail}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
