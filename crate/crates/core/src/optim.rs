//! Learning-rate schedule, AdamW and a minibatch training loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Var};

pub fn warmup_steps(total: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total as f64).round() as usize
}

/// Linear warmup to `peak`, then linear decay to zero at `total`.
pub fn schedule_lr(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> Result<f64> {
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let warm = warmup_steps(total, warmup_ratio);
    if step <= warm {
        if warm == 0 {
            return Ok(peak);
        }
        return Ok(peak * step as f64 / warm as f64);
    }
    Ok(peak * (total - step) as f64 / (total - warm) as f64)
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub weight_decay: f64,
    t: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            ..AdamW::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter that holds a gradient; parameters
    /// outside the current graph are skipped. A non-finite gradient anywhere
    /// aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step_with(store, |_| lr)
    }

    /// As [`AdamW::step`] with a learning rate chosen per parameter role.
    pub fn step_with(&mut self, store: &mut ParamStore, lr_of: impl Fn(&str) -> f64) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().filter(|id| store.is_trainable(*id)).collect();
        for id in &ids {
            if let Some(g) = store.tensor(*id).grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let wd = self.weight_decay;
        for id in ids {
            let lr = lr_of(store.role(id));
            let t = store.tensor_mut(id);
            let n = t.len();
            let Some(grad) = t.take_grad() else { continue };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, theta) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *theta -= lr * wd * *theta;
                *theta -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Peak rate for soft prompts and prefixes; `None` uses `lr`.
    pub prompt_lr: Option<f64>,
}

const PROMPT_ROLES: [&str; 3] = ["type_prompt", "unified_prompt", "knowledge_prefix"];

/// Per-step (step, lr, mean batch loss) records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<(usize, f64, f64)>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for (step, lr, loss) in &self.rows {
            let _ = writeln!(s, "{step},{lr:.6e},{loss:.8}");
        }
        s
    }

    /// Appends rows to a CSV file, writing the header when the file is new.
    pub fn append_to(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::io::Write;
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let csv = self.to_csv();
        let body = if fresh { csv.as_str() } else { csv.split_once('\n').map_or("", |(_, b)| b) };
        f.write_all(body.as_bytes())?;
        Ok(())
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.2)
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let k = n.min(self.rows.len());
        (k > 0).then(|| self.rows[self.rows.len() - k..].iter().map(|r| r.2).sum::<f64>() / k as f64)
    }
}

/// Minibatch training with gradient accumulation over examples. Batches
/// walk a seeded permutation that is reshuffled every epoch.
pub fn train<T>(
    store: &mut ParamStore,
    items: &[T],
    sched: &StageSchedule,
    mut loss_fn: impl FnMut(&mut Tape, &ParamStore, &T) -> Result<Var>,
) -> Result<LossLog> {
    if items.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(sched.weight_decay);
    let mut log = LossLog::default();
    store.zero_grads();
    let w = 1.0 / sched.batch_size as f64;
    for step in 1..=sched.steps {
        let lr = schedule_lr(step, sched.steps, sched.lr, sched.warmup_ratio)?;
        let mut total = 0.0;
        for _ in 0..sched.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let item = &items[order[cursor]];
            cursor += 1;
            let mut tape = Tape::new();
            let loss = loss_fn(&mut tape, store, item)?;
            total += tape.scalar(loss);
            let grads = tape.backward(loss)?;
            store.accumulate(&grads, w)?;
        }
        let prompt_lr = sched.prompt_lr.map_or(lr, |p| p * lr / sched.lr);
        opt.step_with(store, |role| if PROMPT_ROLES.contains(&role) { prompt_lr } else { lr })?;
        log.rows.push((step, lr, total * w));
        if step % 50 == 0 || step == sched.steps {
            log::info!("step {step}/{} lr {lr:.3e} loss {:.5}", sched.steps, total * w);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_lr(0, 100, 1.0, 0.05).unwrap(), 0.0);
        assert_eq!(schedule_lr(5, 100, 1.0, 0.05).unwrap(), 1.0);
        assert!((schedule_lr(52, 100, 1.0, 0.05).unwrap() - 48.0 / 95.0).abs() < 1e-15);
        assert_eq!(schedule_lr(100, 100, 1.0, 0.05).unwrap(), 0.0);
        assert!(matches!(schedule_lr(101, 100, 1.0, 0.05), Err(Error::StepOutOfRange { .. })));
    }

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("w", "test", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn adamw_scalar_recurrence() {
        let (mut s, id) = one_param(0.5);
        s.tensor_mut(id).accumulate_grad(&[0.2]).unwrap();
        let mut opt = AdamW::new(0.1);
        opt.step(&mut s, 0.01).unwrap();
        // m̂ = g, v̂ = g², so the Adam term is lr·g/(|g|+eps)
        let decayed = 0.5 * (1.0 - 0.01 * 0.1);
        let expect = decayed - 0.01 * 0.2 / (0.2 + 1e-8);
        assert!((s.tensor(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_fixed_point_and_pure_decay() {
        let (mut s, id) = one_param(0.5);
        s.tensor_mut(id).accumulate_grad(&[0.0]).unwrap();
        AdamW::new(0.0).step(&mut s, 0.1).unwrap();
        assert_eq!(s.tensor(id).data()[0], 0.5);
        s.tensor_mut(id).accumulate_grad(&[0.0]).unwrap();
        AdamW::new(0.2).step(&mut s, 0.1).unwrap();
        assert_eq!(s.tensor(id).data()[0], 0.5 * (1.0 - 0.1 * 0.2));
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let (mut s, id) = one_param(0.5);
        let other = s.register("v", "test", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        s.tensor_mut(other).accumulate_grad(&[1.0]).unwrap();
        s.tensor_mut(id).accumulate_grad(&[f64::NAN]).unwrap();
        let mut opt = AdamW::new(0.0);
        assert!(matches!(opt.step(&mut s, 0.1), Err(Error::NonFiniteGradient(n)) if n == "w"));
        assert_eq!(s.tensor(other).data()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let (mut s, id) = one_param(0.5);
        s.tensor_mut(id).accumulate_grad(&[1.0]).unwrap();
        s.set_trainable(id, false);
        AdamW::new(0.5).step(&mut s, 0.1).unwrap();
        assert_eq!(s.tensor(id).data()[0], 0.5);
    }
}
