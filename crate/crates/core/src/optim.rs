//! Optimizers, learning-rate schedules and the epoch loop.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchName;
use crate::config::KvConfig;
use crate::error::{CoreError, Result};
use crate::grad::{checkpoint, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(CoreError::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `base * gamma^floor(epoch / period)`
    Step { gamma: f64, period: usize },
    /// `base * gamma^epoch`
    Exponential { gamma: f64 },
}

pub fn schedule_lr(base: f64, epoch: usize, schedule: LrSchedule) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Step { gamma, period } => base * gamma.powi((epoch / period.max(1)) as i32),
        LrSchedule::Exponential { gamma } => base * gamma.powi(epoch as i32),
    }
}

/// Default step period: three drops over 100 epochs.
pub const DEFAULT_STEP_PERIOD: usize = 33;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub batch_accumulation: usize,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl TrainConfig {
    /// Settings of the segmentation training table for `arch`.
    pub fn segmentation(arch: ArchName) -> Self {
        let fcn = matches!(arch, ArchName::Fcn14 | ArchName::Fcn26 | ArchName::Fcn46);
        Self {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: if fcn { 2 } else { 4 },
            batch_accumulation: if fcn { 2 } else { 1 },
            epochs: 100,
            lr_schedule: LrSchedule::Step { gamma: 0.1, period: DEFAULT_STEP_PERIOD },
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Desk-scale detector training: Adam with exponential decay.
    pub fn detection() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 10,
            batch_accumulation: 1,
            epochs: 100,
            lr_schedule: LrSchedule::Exponential { gamma: 0.99 },
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.batch_accumulation == 0 {
            return bad("batch_size and batch_accumulation must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam betas must be in [0, 1) and epsilon positive");
        }
        match self.lr_schedule {
            LrSchedule::Step { gamma, period } if gamma <= 0.0 || period == 0 => bad("step schedule needs gamma > 0, period >= 1"),
            LrSchedule::Exponential { gamma } if gamma <= 0.0 => bad("exponential schedule needs gamma > 0"),
            _ => Ok(()),
        }
    }

    /// Apply overrides from a `key = value` file on top of `self`.
    pub fn apply(mut self, mut kv: KvConfig) -> Result<Self> {
        if let Some(v) = kv.take("optimizer")? {
            self.optimizer = v;
        }
        macro_rules! field {
            ($key:literal, $dst:expr) => {
                if let Some(v) = kv.take($key)? {
                    $dst = v;
                }
            };
        }
        field!("learning_rate", self.learning_rate);
        field!("momentum", self.momentum);
        field!("weight_decay", self.weight_decay);
        field!("batch_size", self.batch_size);
        field!("batch_accumulation", self.batch_accumulation);
        field!("epochs", self.epochs);
        field!("seed", self.seed);
        field!("beta1", self.beta1);
        field!("beta2", self.beta2);
        field!("epsilon", self.epsilon);
        let kind = kv.take_raw("lr_schedule");
        let gamma: Option<f64> = kv.take("lr_gamma")?;
        let period: Option<usize> = kv.take("lr_period")?;
        let (cur_gamma, cur_period) = match self.lr_schedule {
            LrSchedule::Step { gamma, period } => (gamma, period),
            LrSchedule::Exponential { gamma } => (gamma, DEFAULT_STEP_PERIOD),
            LrSchedule::Constant => (1.0, DEFAULT_STEP_PERIOD),
        };
        let gamma = gamma.unwrap_or(cur_gamma);
        let period = period.unwrap_or(cur_period);
        self.lr_schedule = match kind.as_deref() {
            None => match self.lr_schedule {
                LrSchedule::Step { .. } => LrSchedule::Step { gamma, period },
                LrSchedule::Exponential { .. } => LrSchedule::Exponential { gamma },
                LrSchedule::Constant => LrSchedule::Constant,
            },
            Some("step") => LrSchedule::Step { gamma, period },
            Some("exponential") => LrSchedule::Exponential { gamma },
            Some("constant") => LrSchedule::Constant,
            Some(other) => return Err(CoreError::Config(format!("unknown lr_schedule `{other}`"))),
        };
        kv.finish()?;
        self.validate()?;
        Ok(self)
    }

    /// Inverse of [`TrainConfig::apply`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let opt = match self.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        };
        let _ = writeln!(s, "optimizer = {opt}");
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "batch_accumulation = {}", self.batch_accumulation);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        match self.lr_schedule {
            LrSchedule::Constant => {
                let _ = writeln!(s, "lr_schedule = constant");
            }
            LrSchedule::Step { gamma, period } => {
                let _ = writeln!(s, "lr_schedule = step\nlr_gamma = {gamma}\nlr_period = {period}");
            }
            LrSchedule::Exponential { gamma } => {
                let _ = writeln!(s, "lr_schedule = exponential\nlr_gamma = {gamma}");
            }
        }
        s
    }
}

/// Per-parameter optimizer buffers. SGD uses `first` as velocity; Adam uses
/// `first` and `second` as moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    first: Vec<Vec<Real>>,
    second: Vec<Vec<Real>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<Real>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let second = if kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() };
        Self { kind, step: 0, first: zeros, second }
    }

    pub fn save(&self, manifest: &Path) -> Result<()> {
        let mut named: Vec<(String, Tensor)> = vec![("step".into(), Tensor::scalar(self.step as Real))];
        for (i, m) in self.first.iter().enumerate() {
            named.push((format!("first.{i}"), Tensor::new(&[m.len()], m.clone())?));
        }
        for (i, m) in self.second.iter().enumerate() {
            named.push((format!("second.{i}"), Tensor::new(&[m.len()], m.clone())?));
        }
        checkpoint::save(manifest, named.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(())
    }

    pub fn load(manifest: &Path, kind: OptimizerKind, params: &ParamStore) -> Result<Self> {
        let mut state = Self::new(kind, params);
        let loaded = checkpoint::load(manifest)?;
        let expected = 1 + state.first.len() + state.second.len();
        if loaded.len() != expected {
            return Err(CoreError::Config(format!(
                "optimizer state has {} tensors, expected {expected}",
                loaded.len()
            )));
        }
        state.step = loaded[0].1.data()[0] as u64;
        let n = state.first.len();
        for (i, (_, t)) in loaded.into_iter().skip(1).enumerate() {
            let slot = if i < n { &mut state.first[i] } else { &mut state.second[i - n] };
            if slot.len() != t.len() {
                return Err(CoreError::Config("optimizer state does not match the model".into()));
            }
            slot.copy_from_slice(t.data());
        }
        Ok(state)
    }
}

fn grads<'a>(params: &'a ParamStore, i: usize) -> Result<&'a [Real]> {
    params.tensors()[i]
        .grad()
        .ok_or_else(|| CoreError::MissingGradient(params.names()[i].clone()))
}

/// `v <- momentum v + (g + decay p); p <- p - lr v`
pub fn sgd_step(params: &mut ParamStore, state: &mut OptimizerState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    for i in 0..params.len() {
        grads(params, i)?;
    }
    let (mu, wd, lr) = (cfg.momentum as Real, cfg.weight_decay as Real, lr as Real);
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let g = t.grad().expect("checked").to_vec();
        let v = &mut state.first[i];
        for ((p, g), v) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v + (g + wd * *p);
            *p -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam; weight decay, when set, is added to the gradient.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    for i in 0..params.len() {
        grads(params, i)?;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, wd) = (cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let g = tensor.grad().expect("checked").to_vec();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64 + wd * *p as f64;
            m[j] = (b1 * m[j] as f64 + (1.0 - b1) * gj) as Real;
            v[j] = (b2 * v[j] as f64 + (1.0 - b2) * gj * gj) as Real;
            let mhat = m[j] as f64 / c1;
            let vhat = v[j] as f64 / c2;
            *p -= (lr * mhat / (vhat.sqrt() + eps)) as Real;
        }
    }
    Ok(())
}

pub fn apply_step(params: &mut ParamStore, state: &mut OptimizerState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    match cfg.optimizer {
        OptimizerKind::Sgd => sgd_step(params, state, cfg, lr),
        OptimizerKind::Adam => adam_step(params, state, cfg, lr),
    }
}

/// What the epoch loop trains.
pub trait Objective {
    /// Number of training samples.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Add the gradient of the mean loss over `samples` to the parameter
    /// gradients and return that mean loss.
    fn accumulate(&self, params: &mut ParamStore, samples: &[usize]) -> Result<Real>;

    /// Mean loss on held-out data, if there is any.
    fn validation_loss(&self, _params: &ParamStore) -> Result<Option<Real>> {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curves: Vec<EpochRecord>,
    pub iterations: usize,
    pub updates: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.curves {
            let val = r.val_loss.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, val, r.lr);
        }
        s
    }
}

/// Run `cfg.epochs` epochs of shuffled micro-batches. Gradients of
/// `batch_accumulation` consecutive micro-batches are averaged into one
/// update; the count carries across epochs and a trailing partial group is
/// applied at the end.
pub fn train(params: &mut ParamStore, objective: &dyn Objective, cfg: &TrainConfig) -> Result<TrainReport> {
    train_from(params, objective, cfg, OptimizerState::new(cfg.optimizer, params)).map(|(r, _)| r)
}

pub fn train_from(
    params: &mut ParamStore,
    objective: &dyn Objective,
    cfg: &TrainConfig,
    mut state: OptimizerState,
) -> Result<(TrainReport, OptimizerState)> {
    cfg.validate()?;
    if objective.is_empty() {
        return Err(CoreError::Invalid("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..objective.len()).collect();
    let mut report = TrainReport::default();
    let mut pending = 0usize;
    let mut lr = schedule_lr(cfg.learning_rate, 0, cfg.lr_schedule);
    params.zero_grad();
    for epoch in 0..cfg.epochs {
        lr = schedule_lr(cfg.learning_rate, epoch, cfg.lr_schedule);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = objective.accumulate(params, chunk)?;
            report.iterations += 1;
            if !loss.is_finite() {
                return Err(CoreError::Divergence { epoch, iteration: report.iterations, loss: loss as f64 });
            }
            total += loss as f64;
            batches += 1;
            pending += 1;
            if pending == cfg.batch_accumulation {
                flush(params, &mut state, cfg, lr, pending)?;
                report.updates += 1;
                pending = 0;
            }
        }
        let val_loss = objective.validation_loss(params)?.map(|v| v as f64);
        let train_loss = total / batches as f64;
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:?} lr {lr:e}");
        report.curves.push(EpochRecord { epoch, train_loss, val_loss, lr });
    }
    if pending > 0 {
        flush(params, &mut state, cfg, lr, pending)?;
        report.updates += 1;
    }
    Ok((report, state))
}

fn flush(params: &mut ParamStore, state: &mut OptimizerState, cfg: &TrainConfig, lr: f64, micro: usize) -> Result<()> {
    if micro > 1 {
        let scale = 1.0 / micro as Real;
        for t in params.tensors_mut() {
            t.grad_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    apply_step(params, state, cfg, lr)?;
    params.zero_grad();
    Ok(())
}
