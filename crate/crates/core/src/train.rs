//! Closed-loop training loss, Adam, and the three-stage curriculum for the
//! joint, baseline, EWC and MAS learners.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clreg::{self, Accumulation, ImportanceKind, ImportanceVector, RegConfig};
use crate::data::{Event, TaskSet};
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{self, ForwardCache, ParamVector, DEFAULT_HIDDEN, DEFAULT_HORIZON, INPUTS};
use crate::sim::{self, Controller, DifferentiableController, MseWeights, RolloutConfig, Row};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Joint,
    Baseline,
    Ewc,
    Mas,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Joint, Method::Baseline, Method::Ewc, Method::Mas];

    pub fn name(self) -> &'static str {
        match self {
            Method::Joint => "joint",
            Method::Baseline => "baseline",
            Method::Ewc => "ewc",
            Method::Mas => "mas",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::Joint => "LSTM",
            Method::Baseline => "CL-Baseline",
            Method::Ewc => "CL-EWC",
            Method::Mas => "CL-MAS",
        }
    }

    pub fn importance_kind(self) -> Option<ImportanceKind> {
        match self {
            Method::Ewc => Some(ImportanceKind::Fisher),
            Method::Mas => Some(ImportanceKind::Mas),
            Method::Joint | Method::Baseline => None,
        }
    }

    pub fn is_continual(self) -> bool {
        self != Method::Joint
    }

    pub fn tag(self) -> u8 {
        match self {
            Method::Joint => 0,
            Method::Baseline => 1,
            Method::Ewc => 2,
            Method::Mas => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            Method::Mas => RegConfig::MAS_DEFAULT_LAMBDA,
            _ => RegConfig::EWC_DEFAULT_LAMBDA,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "joint" | "lstm" => Ok(Method::Joint),
            "baseline" | "cl-baseline" => Ok(Method::Baseline),
            "ewc" | "cl-ewc" => Ok(Method::Ewc),
            "mas" | "cl-mas" => Ok(Method::Mas),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Per-feature standardization, fitted once on the first task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; INPUTS],
    pub std: [f64; INPUTS],
}

impl Normalizer {
    const MIN_STD: f64 = 1e-6;

    pub fn identity() -> Self {
        Normalizer {
            mean: [0.0; INPUTS],
            std: [1.0; INPUTS],
        }
    }

    /// Mean and population std of every recorded feature row.
    pub fn fit(events: &[Event]) -> Result<Self> {
        let mut sum = [0.0; INPUTS];
        let mut count = 0usize;
        let rows = || {
            events.iter().flat_map(|e| {
                (0..e.len()).map(move |k| {
                    let (sv, lv) = (e.fv_speed[k], e.lv_speed[k]);
                    [sv, lv, lv - sv, e.spacing[k]]
                })
            })
        };
        for r in rows() {
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("cannot fit normalization on no data".into()));
        }
        let mean = sum.map(|s| s / count as f64);
        let mut var = [0.0; INPUTS];
        for r in rows() {
            for k in 0..INPUTS {
                let d = r[k] - mean[k];
                var[k] += d * d;
            }
        }
        let std = var.map(|v| (v / count as f64).sqrt().max(Self::MIN_STD));
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, rows: &[Row]) -> Vec<Row> {
        rows.iter()
            .map(|r| std::array::from_fn(|k| (r[k] - self.mean[k]) / self.std[k]))
            .collect()
    }
}

/// The LSTM with input standardization, as seen by the simulator.
#[derive(Debug, Clone, Copy)]
pub struct LstmController<'a> {
    pub params: &'a ParamVector,
    pub norm: &'a Normalizer,
}

impl Controller for LstmController<'_> {
    fn accel(&self, _t: usize, window: &[Row]) -> Result<f64> {
        Ok(nn::forward_rows(&self.norm.apply(window), self.params)?.0)
    }
}

impl DifferentiableController for LstmController<'_> {
    type Cache = ForwardCache;

    fn param_len(&self) -> usize {
        self.params.len()
    }

    fn forward(&self, _t: usize, window: &[Row]) -> Result<(f64, ForwardCache)> {
        nn::forward_rows(&self.norm.apply(window), self.params)
    }

    fn backward(&self, cache: &ForwardCache, upstream: f64, grad: &mut [f64], row_grads: &mut [Row]) -> Result<()> {
        let mut norm_grads = vec![[0.0; INPUTS]; row_grads.len()];
        nn::backward_into(cache, self.params, upstream, grad, Some(&mut norm_grads))?;
        for (out, g) in row_grads.iter_mut().zip(&norm_grads) {
            for k in 0..INPUTS {
                out[k] += g[k] / self.norm.std[k];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub horizon: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub penalty_weight: f64,
    pub seed: u64,
    pub reg: RegConfig,
    pub dt: f64,
    pub rollout_chunk: usize,
    /// Upper bound on the number of windows used for importance estimation.
    pub importance_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_method(Method::Baseline)
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        TrainConfig {
            method,
            epochs: 5,
            horizon: DEFAULT_HORIZON,
            hidden_size: DEFAULT_HIDDEN,
            learning_rate: 0.001,
            batch_size: 32,
            penalty_weight: 1000.0,
            seed: 42,
            reg: RegConfig {
                lambda: method.default_lambda(),
                accumulation: Accumulation::Sum,
            },
            dt: 0.1,
            rollout_chunk: 50,
            importance_cap: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive_ints = [
            ("epochs", self.epochs),
            ("horizon", self.horizon),
            ("hidden_size", self.hidden_size),
            ("batch_size", self.batch_size),
            ("rollout_chunk", self.rollout_chunk),
            ("importance_cap", self.importance_cap),
        ];
        for (name, v) in positive_ints {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("dt", self.dt),
            ("penalty_weight", self.penalty_weight),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        RegConfig::new(self.reg.lambda, self.reg.accumulation)?;
        Ok(())
    }

    pub fn rollout(&self, stop_on_collision: bool) -> RolloutConfig {
        RolloutConfig {
            horizon: self.horizon,
            dt: self.dt,
            stop_on_collision,
        }
    }

    /// Every setting as `key = value` lines, in the config-file syntax.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("method", self.method.to_string()),
            ("epochs", self.epochs.to_string()),
            ("horizon", self.horizon.to_string()),
            ("hidden_size", self.hidden_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("penalty_weight", self.penalty_weight.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda", self.reg.lambda.to_string()),
            ("accumulation", self.reg.accumulation.to_string()),
            ("dt", self.dt.to_string()),
            ("rollout_chunk", self.rollout_chunk.to_string()),
            ("importance_cap", self.importance_cap.to_string()),
        ]
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value {v:?} for {key}")))
        }
        match key {
            "method" => {
                // keep an explicitly chosen lambda; otherwise follow the method default
                let m: Method = value.parse()?;
                if self.reg.lambda == self.method.default_lambda() {
                    self.reg.lambda = m.default_lambda();
                }
                self.method = m;
            }
            "epochs" => self.epochs = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "hidden_size" => self.hidden_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "penalty_weight" => self.penalty_weight = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lambda" => self.reg.lambda = num(key, value)?,
            "accumulation" => self.reg.accumulation = value.parse()?,
            "dt" => self.dt = num(key, value)?,
            "rollout_chunk" => self.rollout_chunk = num(key, value)?,
            "importance_cap" => self.importance_cap = num(key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// Parses flat `key = value` text; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EventLoss {
    pub value: f64,
    pub mse: f64,
    pub grad: Vec<f64>,
    pub collided: bool,
    pub clamped: bool,
}

/// Closed-loop training loss of one event: mean spacing and speed squared
/// error plus constant collision and backward-motion penalties.
pub fn event_loss(params: &ParamVector, norm: &Normalizer, event: &Event, cfg: &TrainConfig) -> Result<EventLoss> {
    controller_loss(&LstmController { params, norm }, event, cfg)
}

/// [`event_loss`] for any differentiable controller.
pub fn controller_loss<C: DifferentiableController>(ctrl: &C, event: &Event, cfg: &TrainConfig) -> Result<EventLoss> {
    let out = sim::rollout_mse_grad(ctrl, event, &cfg.rollout(true), MseWeights::default(), cfg.rollout_chunk)?;
    let collided = sim::detect_collision(&out.trajectory);
    let clamped = out.trajectory.backward_clamp_count > 0;
    let value = out.mse + cfg.penalty_weight * (collided as u8 as f64) + cfg.penalty_weight * (clamped as u8 as f64);
    Ok(EventLoss {
        value,
        mse: out.mse,
        grad: out.grad,
        collided,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument("adam: parameter, gradient and state lengths differ".into()));
    }
    state.t += 1;
    let c1 = 1.0 - AdamState::BETA1.powi(state.t as i32);
    let c2 = 1.0 - AdamState::BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = AdamState::BETA1 * state.m[i] + (1.0 - AdamState::BETA1) * g;
        state.v[i] = AdamState::BETA2 * state.v[i] + (1.0 - AdamState::BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + AdamState::EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Task trained in this pass; 0 for the joint union.
    pub task: u8,
    pub train_loss: f64,
    pub val_mse_spacing: f64,
    pub val_mse_speed: f64,
}

/// Importance and its configuration, active while training a later task.
#[derive(Debug, Clone, Copy)]
pub struct Consolidation<'a> {
    pub importance: &'a ImportanceVector,
    pub reg: &'a RegConfig,
}

fn stream_rng(seed: u64, stream: u64, sub: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 20).wrapping_add(sub));
    rng
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_IMPORTANCE: u64 = 2;

/// Trains on one task's training split for `cfg.epochs` epochs of shuffled
/// event mini-batches. `task` tags the history; shuffling depends only on
/// `(seed, task)` so every method sees the same batch sequence.
pub fn train_task(
    params: &ParamVector,
    norm: &Normalizer,
    task: u8,
    train: &[Event],
    val: &[Event],
    cfg: &TrainConfig,
    consolidation: Option<Consolidation<'_>>,
) -> Result<(ParamVector, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument(format!("task {task} has an empty training split")));
    }
    if params.hidden_size() != cfg.hidden_size {
        return Err(Error::InvalidArgument("parameter hidden size differs from config".into()));
    }
    let mut params = params.clone();
    let mut opt = AdamState::new(params.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_grad = vec![0.0; params.len()];

    for epoch in 1..=cfg.epochs {
        let mut rng = stream_rng(cfg.seed, STREAM_SHUFFLE, (task as u64) << 8 | epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let losses: Vec<EventLoss> = batch
                .par_iter()
                .map(|&i| event_loss(&params, norm, &train[i], cfg))
                .collect::<Result<_>>()?;
            batch_grad.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for l in &losses {
                if !l.value.is_finite() || l.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite training loss in task {task}, epoch {epoch}")));
                }
                loss_sum += l.value;
                for (b, g) in batch_grad.iter_mut().zip(&l.grad) {
                    *b += g * scale;
                }
            }
            if let Some(c) = consolidation {
                let (_, pg) = clreg::penalty(params.values(), c.importance, c.reg)?;
                for (b, g) in batch_grad.iter_mut().zip(&pg) {
                    *b += g;
                }
            }
            adam_step(params.values_mut(), &batch_grad, &mut opt, cfg.learning_rate)?;
        }
        let (val_sp, val_sv) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let cell = eval::pooled_metrics(&LstmController { params: &params, norm }, val, &cfg.rollout(false))?;
            (cell.mse_spacing, cell.mse_speed)
        };
        history.push(EpochRecord {
            epoch,
            task,
            train_loss: loss_sum / train.len() as f64,
            val_mse_spacing: val_sp,
            val_mse_speed: val_sv,
        });
    }
    Ok((params, history))
}

/// Picks events in seeded random order until their windows fill `cap`;
/// returns indices in ascending order.
fn subsample_events(events: &[Event], horizon: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.shuffle(rng);
    let mut chosen = Vec::new();
    let mut windows = 0;
    for i in order {
        let w = events[i].len().saturating_sub(horizon);
        if !chosen.is_empty() && windows + w > cap {
            continue;
        }
        windows += w;
        chosen.push(i);
    }
    chosen.sort_unstable();
    chosen
}

/// Recorded-data windows `(event, newest index)`, uniformly subsampled to
/// at most `cap`, in ascending order.
fn subsample_windows(events: &[Event], horizon: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = events
        .iter()
        .enumerate()
        .flat_map(|(e, ev)| (horizon - 1..ev.len().saturating_sub(1)).map(move |t| (e, t)))
        .collect();
    if all.len() <= cap {
        return all;
    }
    let mut picked: Vec<usize> = index::sample(rng, all.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

fn recorded_window(event: &Event, t: usize, horizon: usize) -> Vec<Row> {
    (t + 1 - horizon..=t)
        .map(|k| {
            let (sv, lv) = (event.fv_speed[k], event.lv_speed[k]);
            [sv, lv, lv - sv, event.spacing[k]]
        })
        .collect()
}

/// Diagonal Fisher of the per-event training loss over (a window-capped
/// subsample of) `events`.
pub fn estimate_task_fisher(
    params: &ParamVector,
    norm: &Normalizer,
    events: &[Event],
    cfg: &TrainConfig,
    task: u8,
) -> Result<ImportanceVector> {
    let mut rng = stream_rng(cfg.seed, STREAM_IMPORTANCE, task as u64);
    let chosen: Vec<&Event> = subsample_events(events, cfg.horizon, cfg.importance_cap, &mut rng)
        .into_iter()
        .map(|i| &events[i])
        .collect();
    // the estimator evaluates at `params` itself
    clreg::estimate_fisher(params.values(), &chosen, |_, event| Ok(event_loss(params, norm, event, cfg)?.grad))
}

/// MAS importance of the squared controller output over recorded windows.
pub fn estimate_task_mas(
    params: &ParamVector,
    norm: &Normalizer,
    events: &[Event],
    cfg: &TrainConfig,
    task: u8,
) -> Result<ImportanceVector> {
    let mut rng = stream_rng(cfg.seed, STREAM_IMPORTANCE, task as u64);
    let windows = subsample_windows(events, cfg.horizon, cfg.importance_cap, &mut rng);
    clreg::estimate_mas_importance(params.values(), &windows, |_, &(e, t)| {
        let rows = norm.apply(&recorded_window(&events[e], t, cfg.horizon));
        let (out, cache) = nn::forward_rows(&rows, params)?;
        Ok((out, nn::backward(&cache, params, 1.0)?.values))
    })
}

pub fn estimate_importance(
    kind: ImportanceKind,
    params: &ParamVector,
    norm: &Normalizer,
    events: &[Event],
    cfg: &TrainConfig,
    task: u8,
) -> Result<ImportanceVector> {
    if events.is_empty() {
        return Err(Error::InvalidArgument("importance estimation needs at least one event".into()));
    }
    match kind {
        ImportanceKind::Fisher => estimate_task_fisher(params, norm, events, cfg, task),
        ImportanceKind::Mas => estimate_task_mas(params, norm, events, cfg, task),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub stage: u8,
    pub horizon: usize,
    pub params: ParamVector,
    pub normalizer: Normalizer,
    /// Importance accumulated over tasks `1..=stage` (EWC and MAS only).
    pub importance: Option<ImportanceVector>,
}

impl Checkpoint {
    pub fn file_name(&self) -> String {
        checkpoint_file_name(self.method, self.stage)
    }

    pub fn controller(&self) -> LstmController<'_> {
        LstmController {
            params: &self.params,
            norm: &self.normalizer,
        }
    }
}

pub fn checkpoint_file_name(method: Method, stage: u8) -> String {
    format!("{}_stage{stage}.dfw", method.name())
}

#[derive(Debug, Clone)]
pub struct CurriculumRun {
    pub checkpoints: Vec<Checkpoint>,
    pub history: Vec<EpochRecord>,
}

/// Runs the method's curriculum: one joint pass over the union of all
/// training splits, or sequential training on tasks 1 → 2 → 3 with a
/// checkpoint after each.
pub fn run_curriculum(tasks: &[TaskSet; 3], cfg: &TrainConfig) -> Result<CurriculumRun> {
    cfg.validate()?;
    let norm = Normalizer::fit(&tasks[0].train)?;
    let init = nn::init_params(cfg.hidden_size, cfg.seed)?;

    if cfg.method == Method::Joint {
        let train: Vec<Event> = tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
        let val: Vec<Event> = tasks.iter().flat_map(|t| t.val.iter().cloned()).collect();
        let (params, history) = train_task(&init, &norm, 0, &train, &val, cfg, None)?;
        return Ok(CurriculumRun {
            checkpoints: vec![Checkpoint {
                method: Method::Joint,
                stage: 3,
                horizon: cfg.horizon,
                params,
                normalizer: norm,
                importance: None,
            }],
            history,
        });
    }

    let mut params = init;
    let mut importance: Option<ImportanceVector> = None;
    let mut checkpoints = Vec::with_capacity(3);
    let mut history = Vec::new();
    for task in tasks {
        let consolidation = importance.as_ref().map(|imp| Consolidation {
            importance: imp,
            reg: &cfg.reg,
        });
        let (next, h) = train_task(&params, &norm, task.task_id, &task.train, &task.val, cfg, consolidation)?;
        params = next;
        history.extend(h);
        if let Some(kind) = cfg.method.importance_kind() {
            let fresh = estimate_importance(kind, &params, &norm, &task.train, cfg, task.task_id)?;
            importance = Some(match importance {
                Some(prev) => clreg::accumulate(&prev, &fresh, &cfg.reg)?,
                None => fresh,
            });
        }
        checkpoints.push(Checkpoint {
            method: cfg.method,
            stage: task.task_id,
            horizon: cfg.horizon,
            params: params.clone(),
            normalizer: norm,
            importance: importance.clone(),
        });
    }
    Ok(CurriculumRun { checkpoints, history })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,task,train_loss,val_mse_spacing,val_mse_speed\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.task, r.train_loss, r.val_mse_spacing, r.val_mse_speed
        ));
    }
    out
}
