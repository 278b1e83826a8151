//! C ABI over `pei-core`.
//!
//! Every fallible call returns a [`PeiStatus`]; on failure the message is
//! available from [`pei_last_error`] on the same thread. Strings handed out
//! by the library are NUL-terminated and must be released with
//! [`pei_string_free`]. Models are opaque handles released with
//! [`pei_model_free`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pei_core::config::TrainConfig;
use pei_core::data::{self, QuestionKind};
use pei_core::harness::{self, LoadedModel};
use pei_core::metrics::{self, Prediction, SubQuestionTable};
use pei_core::optim;
use pei_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Model = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PeiAnswerScore {
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PeiSupportJoint {
    pub sup_em: f64,
    pub sup_f1: f64,
    pub sup_precision: f64,
    pub sup_recall: f64,
    pub joint_em: f64,
    pub joint_f1: f64,
}

/// Aggregate scores in percent.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PeiMetrics {
    pub count: usize,
    pub ans_em: f64,
    pub ans_f1: f64,
    pub sup_em: f64,
    pub sup_f1: f64,
    pub joint_em: f64,
    pub joint_f1: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PeiSubquestionRates {
    pub both_correct: f64,
    pub one_correct: f64,
}

/// A trained unified model.
pub struct PeiModel {
    inner: LoadedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(PeiStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) | Error::MissingStage { .. } => PeiStatus::Io,
            Error::Json(_) | Error::Record { .. } | Error::Config(_) | Error::Checkpoint(_) => PeiStatus::Parse,
            Error::Invalid(_) | Error::StepOutOfRange { .. } => PeiStatus::InvalidArgument,
            _ => PeiStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(PeiStatus::Parse, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PeiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PeiStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside pei");
            PeiStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PeiStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PeiStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn index_set(p: *const usize, n: usize, what: &str) -> Result<BTreeSet<usize>, Failure> {
    if n == 0 {
        return Ok(BTreeSet::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n).iter().copied().collect())
}

fn owned(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(PeiStatus::InvalidArgument, "output contains NUL".into()))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn pei_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pei_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Answer EM/F1 after normalization.
///
/// # Safety
/// `predicted` and `gold` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pei_answer_score(
    predicted: *const c_char,
    gold: *const c_char,
    out_score: *mut PeiAnswerScore,
) -> PeiStatus {
    guard(|| {
        let s = metrics::answer_em_f1(text(predicted, "predicted")?, text(gold, "gold")?);
        *out(out_score, "out_score")? = PeiAnswerScore {
            em: s.em,
            f1: s.f1,
            precision: s.precision,
            recall: s.recall,
        };
        Ok(())
    })
}

/// Supporting-fact and joint scores for sentence-index sets.
///
/// # Safety
/// Index arrays must hold `n_*` elements (may be null when the count is 0).
#[no_mangle]
pub unsafe extern "C" fn pei_support_joint(
    pred: *const usize,
    n_pred: usize,
    gold: *const usize,
    n_gold: usize,
    answer: *const PeiAnswerScore,
    out_score: *mut PeiSupportJoint,
) -> PeiStatus {
    guard(|| {
        let a = answer.as_ref().ok_or_else(|| null("answer"))?;
        let ans = metrics::AnswerScore {
            em: a.em,
            f1: a.f1,
            precision: a.precision,
            recall: a.recall,
        };
        let s = metrics::support_and_joint(&index_set(pred, n_pred, "pred")?, &index_set(gold, n_gold, "gold")?, &ans);
        *out(out_score, "out_score")? = PeiSupportJoint {
            sup_em: s.sup_em,
            sup_f1: s.sup_f1,
            sup_precision: s.sup_precision,
            sup_recall: s.sup_recall,
            joint_em: s.joint_em,
            joint_f1: s.joint_f1,
        };
        Ok(())
    })
}

/// Rates from an 8-row outcome table (ccc, ccw, ..., www percentages).
///
/// # Safety
/// `rows` must point at 8 doubles.
#[no_mangle]
pub unsafe extern "C" fn pei_subquestion_rates(rows: *const f64, out_rates: *mut PeiSubquestionRates) -> PeiStatus {
    guard(|| {
        if rows.is_null() {
            return Err(null("rows"));
        }
        let mut r = [0.0; 8];
        r.copy_from_slice(std::slice::from_raw_parts(rows, 8));
        let t = SubQuestionTable::from_rows(r);
        *out(out_rates, "out_rates")? = PeiSubquestionRates {
            both_correct: t.both_correct_rate(),
            one_correct: t.one_correct_rate(),
        };
        Ok(())
    })
}

/// # Safety
/// `out_lr` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pei_schedule_lr(
    step: usize,
    total: usize,
    peak: f64,
    warmup_ratio: f64,
    out_lr: *mut f64,
) -> PeiStatus {
    guard(|| {
        *out(out_lr, "out_lr")? = optim::schedule_lr(step, total, peak, warmup_ratio)?;
        Ok(())
    })
}

/// Generates `n` synthetic examples as JSON lines. `config` is config-file
/// text or null for defaults; `kind` is `bridge`, `comparison`, `singlehop`
/// or `multihop`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_jsonl` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pei_generate_jsonl(
    config: *const c_char,
    kind: *const c_char,
    n: usize,
    seed: u64,
    out_jsonl: *mut *mut c_char,
) -> PeiStatus {
    guard(|| {
        let cfg = if config.is_null() {
            TrainConfig::default()
        } else {
            TrainConfig::parse_str(text(config, "config")?)?
        };
        let kinds = match text(kind, "kind")? {
            "multihop" => vec![QuestionKind::Bridge, QuestionKind::Comparison],
            k => vec![k.parse::<QuestionKind>()?],
        };
        let slot = out(out_jsonl, "out_jsonl")?;
        let world = data::generate_world(cfg.seed, cfg.entities, cfg.relations)?;
        let exs = data::generate_dataset(&world, &kinds, n, seed, &cfg.gen_options())?;
        let body: String = exs.iter().map(|e| data::example_to_json(e) + "\n").collect();
        *slot = owned(body)?;
        Ok(())
    })
}

/// Scores JSON-lines predictions against JSON-lines gold examples.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_metrics` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pei_evaluate_jsonl(
    predictions: *const c_char,
    gold: *const c_char,
    out_metrics: *mut PeiMetrics,
) -> PeiStatus {
    guard(|| {
        fn lines(s: &str) -> impl Iterator<Item = &str> {
            s.lines().filter(|l| !l.trim().is_empty())
        }
        let preds = lines(text(predictions, "predictions")?)
            .map(serde_json::from_str::<Prediction>)
            .collect::<Result<Vec<_>, _>>()?;
        let gold = lines(text(gold, "gold")?)
            .map(data::example_from_json)
            .collect::<Result<Vec<_>, _>>()?;
        let r = metrics::evaluate(&preds, &gold);
        *out(out_metrics, "out_metrics")? = PeiMetrics {
            count: r.count,
            ans_em: r.ans_em,
            ans_f1: r.ans_f1,
            sup_em: r.sup_em,
            sup_f1: r.sup_f1,
            joint_em: r.joint_em,
            joint_f1: r.joint_f1,
        };
        Ok(())
    })
}

/// Loads a unified-stage checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pei_model_load(path: *const c_char, out_model: *mut *mut PeiModel) -> PeiStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        let ck = harness::load_checkpoint(Path::new(text(path, "path")?), "train-unified")?;
        let inner = LoadedModel::from_checkpoint(&ck)?;
        *slot = Box::into_raw(Box::new(PeiModel { inner }));
        Ok(())
    })
}

/// Predicts one example given as a JSON record; writes a JSON prediction.
///
/// # Safety
/// `model` must come from [`pei_model_load`]; `example` must be
/// NUL-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pei_model_predict(
    model: *const PeiModel,
    example: *const c_char,
    with_subquestions: bool,
    out_json: *mut *mut c_char,
) -> PeiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ex = data::example_from_json(text(example, "example")?)?;
        let slot = out(out_json, "out_json")?;
        let p = m.inner.predict(&ex, with_subquestions)?;
        *slot = owned(serde_json::to_string(&p)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`pei_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn pei_model_free(model: *mut PeiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
