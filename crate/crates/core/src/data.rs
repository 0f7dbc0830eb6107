//! Car-following events: the in-memory model, JSON-Lines and CSV I/O, an
//! IDM-based synthetic generator and the percentile task split.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DEFAULT_HORIZON;

/// One car-following episode sampled at a fixed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: String,
    pub dt: f64,
    pub lv_speed: Vec<f64>,
    pub fv_speed: Vec<f64>,
    pub spacing: Vec<f64>,
}

impl Event {
    pub fn len(&self) -> usize {
        self.fv_speed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fv_speed.is_empty()
    }

    /// Checks the event invariants for a model with history `horizon`.
    pub fn validate(&self, horizon: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(format!("event {}: {msg}", self.event_id)));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        let n = self.fv_speed.len();
        if self.lv_speed.len() != n || self.spacing.len() != n {
            return fail("series lengths differ".into());
        }
        if n < horizon + 2 {
            return fail(format!("{n} steps, need at least {}", horizon + 2));
        }
        for i in 0..n {
            if !(self.lv_speed[i] >= 0.0) || !(self.fv_speed[i] >= 0.0) {
                return fail(format!("negative or non-finite speed at step {i}"));
            }
            if !(self.spacing[i] > 0.0) || !self.spacing[i].is_finite() {
                return fail(format!("non-positive spacing at step {i}"));
            }
            if !self.lv_speed[i].is_finite() || !self.fv_speed[i].is_finite() {
                return fail(format!("non-finite speed at step {i}"));
            }
        }
        Ok(())
    }
}

/// Arithmetic mean of the follower speed over all steps.
pub fn mean_fv_speed(event: &Event) -> f64 {
    if event.fv_speed.is_empty() {
        return 0.0;
    }
    event.fv_speed.iter().sum::<f64>() / event.fv_speed.len() as f64
}

// ---------------------------------------------------------------------------
// Intelligent driver model

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            desired_speed: 30.0,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 1.0,
            comfortable_decel: 1.5,
            exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.desired_speed,
            self.time_headway,
            self.min_gap,
            self.max_accel,
            self.comfortable_decel,
            self.exponent,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !all_positive || self.exponent < 1.0 {
            return Err(Error::InvalidArgument(format!("invalid IDM parameters {self:?}")));
        }
        Ok(())
    }

    /// Gap at which a follower at steady speed `v` behind an equally fast
    /// leader has zero acceleration. Requires `v < desired_speed`.
    pub fn equilibrium_gap(&self, v: f64) -> f64 {
        let free = 1.0 - (v / self.desired_speed).powf(self.exponent);
        (self.min_gap + v * self.time_headway) / free.sqrt()
    }
}

/// IDM acceleration for follower speed `v`, approach rate `dv = v − v_lead`
/// and gap `s`.
pub fn idm_accel(v: f64, dv: f64, s: f64, p: &IdmParams) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("IDM gap must be positive, got {s}")));
    }
    let desired_gap = p.min_gap + v * p.time_headway + v * dv / (2.0 * (p.max_accel * p.comfortable_decel).sqrt());
    let ratio = desired_gap / s;
    Ok(p.max_accel * (1.0 - (v / p.desired_speed).powf(p.exponent) - ratio * ratio))
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    Mid,
    High,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Low, Regime::Mid, Regime::High];

    /// Range the per-event target mean speed is drawn from, m/s.
    pub fn mean_speed_range(self) -> (f64, f64) {
        match self {
            Regime::Low => GENERATOR.low_mean_speed,
            Regime::Mid => GENERATOR.mid_mean_speed,
            Regime::High => GENERATOR.high_mean_speed,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Regime::Low => 1,
            Regime::Mid => 2,
            Regime::High => 3,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Regime::Low => "low",
            Regime::Mid => "mid",
            Regime::High => "high",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "low" => Ok(Regime::Low),
            "mid" => Ok(Regime::Mid),
            "high" => Ok(Regime::High),
            other => Err(Error::InvalidArgument(format!("unknown regime {other:?}"))),
        }
    }
}

/// Knobs of the synthetic generator, recorded in generation manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorConstants {
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub min_leader_speed: f64,
    pub low_mean_speed: (f64, f64),
    pub mid_mean_speed: (f64, f64),
    pub high_mean_speed: (f64, f64),
    pub time_headway: (f64, f64),
    pub min_gap: (f64, f64),
    pub max_accel: (f64, f64),
    pub comfortable_decel: (f64, f64),
    pub exponent: f64,
    pub accel_floor: f64,
}

pub const GENERATOR: GeneratorConstants = GeneratorConstants {
    min_duration_s: 30.0,
    max_duration_s: 60.0,
    min_leader_speed: 1.0,
    low_mean_speed: (3.5, 8.5),
    mid_mean_speed: (10.3, 11.9),
    high_mean_speed: (14.0, 23.0),
    time_headway: (1.0, 1.8),
    min_gap: (1.5, 3.0),
    max_accel: (0.8, 1.5),
    comfortable_decel: (1.5, 2.5),
    exponent: 4.0,
    accel_floor: -8.0,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeaderProfile {
    Cruise,
    Sinusoid,
    StopAndGo,
}

fn event_rng(seed: u64, regime: Regime, index: u64) -> ChaCha8Rng {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(regime.tag() << 56)
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Leader speed shape with unit mean.
fn leader_shape(profile: LeaderProfile, steps: usize, dt: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = |k: usize| k as f64 * dt;
    let mut shape: Vec<f64> = match profile {
        LeaderProfile::Cruise => {
            let amp = rng.gen_range(0.01..0.04);
            let period = rng.gen_range(20.0..50.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (0..steps)
                .map(|k| 1.0 + amp * (std::f64::consts::TAU * t(k) / period + phase).sin())
                .collect()
        }
        LeaderProfile::Sinusoid => {
            let amp = rng.gen_range(0.10..0.25);
            let period = rng.gen_range(15.0..35.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (0..steps)
                .map(|k| 1.0 + amp * (std::f64::consts::TAU * t(k) / period + phase).sin())
                .collect()
        }
        LeaderProfile::StopAndGo => {
            // cruise, brake to a fraction of cruise speed, hold, recover
            let low = rng.gen_range(0.3..0.6);
            let decel = rng.gen_range(0.05..0.12); // per second, as a fraction of cruise speed
            let accel = rng.gen_range(0.03..0.08);
            let start = rng.gen_range(3.0..10.0);
            let hold = rng.gen_range(3.0..8.0);
            let brake_end = start + (1.0 - low) / decel;
            let hold_end = brake_end + hold;
            (0..steps)
                .map(|k| {
                    let tk = t(k);
                    if tk < start {
                        1.0
                    } else if tk < brake_end {
                        1.0 - decel * (tk - start)
                    } else if tk < hold_end {
                        low
                    } else {
                        (low + accel * (tk - hold_end)).min(1.0)
                    }
                })
                .collect()
        }
    };
    let mean = shape.iter().sum::<f64>() / shape.len() as f64;
    for v in &mut shape {
        *v /= mean;
    }
    shape
}

fn jitter(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    rng.gen_range(range.0..range.1)
}

/// Generates one event; a pure function of `(regime, index, dt, seed)`.
pub fn generate_event(regime: Regime, index: u64, dt: f64, seed: u64) -> Event {
    let c = &GENERATOR;
    let mut rng = event_rng(seed, regime, index);
    let duration = rng.gen_range(c.min_duration_s..c.max_duration_s);
    let steps = (duration / dt).round() as usize;
    let profile = match rng.gen_range(0..3) {
        0 => LeaderProfile::Cruise,
        1 => LeaderProfile::Sinusoid,
        _ => LeaderProfile::StopAndGo,
    };
    let target = jitter(&mut rng, regime.mean_speed_range());
    let lv: Vec<f64> = leader_shape(profile, steps, dt, &mut rng)
        .into_iter()
        .map(|s| (s * target).max(c.min_leader_speed))
        .collect();
    let lv_max = lv.iter().cloned().fold(0.0, f64::max);

    let idm = IdmParams {
        desired_speed: lv_max * 1.15 + 1.0,
        time_headway: jitter(&mut rng, c.time_headway),
        min_gap: jitter(&mut rng, c.min_gap),
        max_accel: jitter(&mut rng, c.max_accel),
        comfortable_decel: jitter(&mut rng, c.comfortable_decel),
        exponent: c.exponent,
    };

    let mut fv = Vec::with_capacity(steps);
    let mut spacing = Vec::with_capacity(steps);
    let mut v = lv[0];
    let mut s = idm.equilibrium_gap(v);
    for k in 0..steps {
        fv.push(v);
        spacing.push(s);
        // s > 0 is maintained by the IDM braking term; fall back to full
        // braking if a degenerate draw ever violates it.
        let a = idm_accel(v, v - lv[k], s, &idm).unwrap_or(c.accel_floor).max(c.accel_floor);
        let v_next = (v + a * dt).max(0.0);
        s += (lv[k] - v) * dt;
        v = v_next;
    }
    Event {
        event_id: format!("{regime}-{index:05}"),
        dt,
        lv_speed: lv,
        fv_speed: fv,
        spacing,
    }
}

pub fn generate_events(regime: Regime, count: usize, dt: f64, seed: u64) -> Result<Vec<Event>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| generate_event(regime, i, dt, seed))
        .collect())
}

// ---------------------------------------------------------------------------
// Task split

/// Linear-interpolation percentile (`p` in 0..=100) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub const LOWER_SPLIT_PERCENTILE: f64 = 33.3;
pub const UPPER_SPLIT_PERCENTILE: f64 = 66.7;

/// Mean-FV-speed interval of a task. The lower bound is exclusive unless
/// `low_inclusive`; the upper bound is always inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedRange {
    pub low: f64,
    pub high: f64,
    pub low_inclusive: bool,
}

impl SpeedRange {
    pub fn contains(&self, v: f64) -> bool {
        let above = if self.low_inclusive { v >= self.low } else { v > self.low };
        above && v <= self.high
    }
}

impl fmt::Display for SpeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let open = if self.low_inclusive { '[' } else { '(' };
        if self.high.is_infinite() {
            write!(f, "{open}{:.2}, inf]", self.low)
        } else {
            write!(f, "{open}{:.2}, {:.2}]", self.low, self.high)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub task_id: u8,
    pub speed_range: SpeedRange,
    pub train: Vec<Event>,
    pub val: Vec<Event>,
    pub test: Vec<Event>,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self, which: Split) -> &[Event] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Percentile boundaries computed by [`split_tasks`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub lower: f64,
    pub upper: f64,
}

/// Sizes of the train/val/test partition of `n` events.
pub fn partition_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.70 * n as f64).round() as usize;
    let val = ((0.15 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Speed ranges of tasks 1..=3 for the given boundaries, fastest first.
pub fn task_ranges(bounds: SplitBoundaries) -> [SpeedRange; 3] {
    [
        SpeedRange {
            low: bounds.upper,
            high: f64::INFINITY,
            low_inclusive: false,
        },
        SpeedRange {
            low: bounds.lower,
            high: bounds.upper,
            low_inclusive: false,
        },
        SpeedRange {
            low: 0.0,
            high: bounds.lower,
            low_inclusive: true,
        },
    ]
}

/// Splits events into three speed terciles (task 1 fastest) and partitions
/// each task 70/15/15 after a seeded shuffle.
pub fn split_tasks(events: &[Event], seed: u64) -> Result<([TaskSet; 3], SplitBoundaries)> {
    if events.len() < 9 {
        return Err(Error::InvalidArgument(format!(
            "need ≥ 9 events to split into tasks, got {}",
            events.len()
        )));
    }
    let means: Vec<f64> = events.iter().map(mean_fv_speed).collect();
    let bounds = SplitBoundaries {
        lower: percentile(&means, LOWER_SPLIT_PERCENTILE),
        upper: percentile(&means, UPPER_SPLIT_PERCENTILE),
    };
    let ranges = task_ranges(bounds);
    let mut members: [Vec<Event>; 3] = Default::default();
    for (event, &m) in events.iter().zip(&means) {
        let slot = ranges
            .iter()
            .position(|r| r.contains(m))
            .ok_or_else(|| Error::InvalidInput(format!("event {} has mean speed {m} outside every task", event.event_id)))?;
        members[slot].push(event.clone());
    }
    let mut tasks = Vec::with_capacity(3);
    for (i, (mut list, range)) in members.into_iter().zip(ranges).enumerate() {
        let task_id = i as u8 + 1;
        if list.is_empty() {
            return Err(Error::InvalidInput(format!(
                "task {task_id} {range} received no events (degenerate speed distribution)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(task_id as u64));
        list.shuffle(&mut rng);
        let (n_train, n_val, _) = partition_sizes(list.len());
        let test = list.split_off(n_train + n_val);
        let val = list.split_off(n_train);
        tasks.push(TaskSet {
            task_id,
            speed_range: range,
            train: list,
            val,
            test,
        });
    }
    let tasks: [TaskSet; 3] = tasks.try_into().expect("three tasks");
    Ok((tasks, bounds))
}

// ---------------------------------------------------------------------------
// File I/O

#[derive(Serialize, Deserialize)]
struct EventRecord {
    event_id: String,
    dt: f64,
    lv_speed: Vec<f64>,
    fv_speed: Vec<f64>,
    spacing: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

fn parse_error(path: &Path, line: usize, event_id: Option<&str>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        event_id: event_id.map(str::to_owned),
        message: message.into(),
    }
}

fn check_record(path: &Path, line: usize, e: &Event) -> Result<()> {
    let id = Some(e.event_id.as_str());
    if !(e.dt > 0.0) || !e.dt.is_finite() {
        return Err(parse_error(path, line, id, format!("dt must be positive, got {}", e.dt)));
    }
    if e.lv_speed.len() != e.fv_speed.len() || e.spacing.len() != e.fv_speed.len() {
        return Err(parse_error(path, line, id, "lv_speed, fv_speed and spacing lengths differ"));
    }
    if let Some(k) = e.spacing.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(parse_error(path, line, id, format!("spacing {} at step {k} must be positive", e.spacing[k])));
    }
    let bad_speed = e
        .lv_speed
        .iter()
        .chain(&e.fv_speed)
        .any(|v| !(*v >= 0.0) || !v.is_finite());
    if bad_speed {
        return Err(parse_error(path, line, id, "speeds must be finite and nonnegative"));
    }
    Ok(())
}

/// Reads an event file. `.csv` files use the long format
/// `event_id,t,lv_speed,fv_speed,spacing`; anything else is JSON-Lines.
pub fn load_events(path: &Path) -> Result<Vec<Event>> {
    Ok(load_tagged_events(path)?.into_iter().map(|(e, _)| e).collect())
}

/// Like [`load_events`] but keeps the optional per-event split tag.
pub fn load_tagged_events(path: &Path) -> Result<Vec<(Event, Option<Split>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("csv")) {
        return load_csv(path, reader).map(|v| v.into_iter().map(|e| (e, None)).collect());
    }
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| {
            // best effort at naming the event in a malformed record
            let id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("event_id").and_then(|x| x.as_str()).map(str::to_owned));
            parse_error(path, line_no, id.as_deref(), e.to_string())
        })?;
        let event = Event {
            event_id: rec.event_id,
            dt: rec.dt,
            lv_speed: rec.lv_speed,
            fv_speed: rec.fv_speed,
            spacing: rec.spacing,
        };
        check_record(path, line_no, &event)?;
        out.push((event, rec.split));
    }
    Ok(out)
}

fn load_csv(path: &Path, reader: impl BufRead) -> Result<Vec<Event>> {
    struct Partial {
        event: Event,
        times: Vec<f64>,
        first_line: usize,
    }
    let mut order: Vec<String> = Vec::new();
    let mut partial: HashMap<String, Partial> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 && trimmed.starts_with("event_id") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(parse_error(path, line_no, fields.first().copied(), format!("expected 5 columns, got {}", fields.len())));
        }
        let id = fields[0];
        let mut nums = [0.0; 4];
        for (slot, raw) in nums.iter_mut().zip(&fields[1..]) {
            *slot = raw
                .parse()
                .map_err(|_| parse_error(path, line_no, Some(id), format!("not a number: {raw:?}")))?;
        }
        let [t, lv, fv, s] = nums;
        if !(s > 0.0) {
            return Err(parse_error(path, line_no, Some(id), format!("spacing {s} must be positive")));
        }
        if !(lv >= 0.0) || !(fv >= 0.0) {
            return Err(parse_error(path, line_no, Some(id), "speeds must be nonnegative"));
        }
        let entry = partial.entry(id.to_owned()).or_insert_with(|| {
            order.push(id.to_owned());
            Partial {
                event: Event {
                    event_id: id.to_owned(),
                    dt: 0.0,
                    lv_speed: Vec::new(),
                    fv_speed: Vec::new(),
                    spacing: Vec::new(),
                },
                times: Vec::new(),
                first_line: line_no,
            }
        });
        if let Some(&prev) = entry.times.last() {
            let step = t - prev;
            if entry.times.len() == 1 {
                if !(step > 0.0) {
                    return Err(parse_error(path, line_no, Some(id), "time must increase"));
                }
                entry.event.dt = step;
            } else if (step - entry.event.dt).abs() > 1e-6 * entry.event.dt.max(1.0) {
                return Err(parse_error(
                    path,
                    line_no,
                    Some(id),
                    format!("inconsistent dt: {step} after {}", entry.event.dt),
                ));
            }
        }
        entry.times.push(t);
        entry.event.lv_speed.push(lv);
        entry.event.fv_speed.push(fv);
        entry.event.spacing.push(s);
    }
    order
        .into_iter()
        .map(|id| {
            let p = partial.remove(&id).expect("recorded id");
            if p.times.len() < 2 {
                return Err(parse_error(path, p.first_line, Some(&id), "event needs at least two rows"));
            }
            Ok(p.event)
        })
        .collect()
}

pub fn save_events(events: &[Event], path: &Path) -> Result<()> {
    let tagged: Vec<(&Event, Option<Split>)> = events.iter().map(|e| (e, None)).collect();
    save_tagged(&tagged, path)
}

/// Writes events as JSON-Lines (or long CSV for `.csv` paths), with an
/// optional split tag on each line.
pub fn save_tagged(events: &[(&Event, Option<Split>)], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let is_csv = path.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("csv"));
    let io = |e| Error::io(path, e);
    if is_csv {
        writeln!(w, "event_id,t,lv_speed,fv_speed,spacing").map_err(io)?;
        for (e, _) in events {
            for k in 0..e.len() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    e.event_id,
                    k as f64 * e.dt,
                    e.lv_speed[k],
                    e.fv_speed[k],
                    e.spacing[k]
                )
                .map_err(io)?;
            }
        }
    } else {
        for (e, split) in events {
            let rec = EventRecord {
                event_id: e.event_id.clone(),
                dt: e.dt,
                lv_speed: e.lv_speed.clone(),
                fv_speed: e.fv_speed.clone(),
                spacing: e.spacing.clone(),
                split: *split,
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::InvalidState(e.to_string()))?;
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Contents of `manifest.json` in a task directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub source: String,
    pub lower_percentile: f64,
    pub upper_percentile: f64,
    pub boundaries: SplitBoundaries,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: u8,
    pub file: String,
    pub speed_range: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn task_file_name(task_id: u8) -> String {
    format!("task{task_id}.jsonl")
}

impl SplitManifest {
    pub fn new(tasks: &[TaskSet; 3], boundaries: SplitBoundaries, seed: u64, source: &str) -> Self {
        SplitManifest {
            seed,
            source: source.to_owned(),
            lower_percentile: LOWER_SPLIT_PERCENTILE,
            upper_percentile: UPPER_SPLIT_PERCENTILE,
            boundaries,
            tasks: tasks
                .iter()
                .map(|t| TaskSummary {
                    task_id: t.task_id,
                    file: task_file_name(t.task_id),
                    speed_range: t.speed_range.to_string(),
                    train: t.train.len(),
                    val: t.val.len(),
                    test: t.test.len(),
                })
                .collect(),
        }
    }
}

/// Writes `task1..3.jsonl` (events tagged with their split) and the manifest.
pub fn save_task_dir(dir: &Path, tasks: &[TaskSet; 3], manifest: &SplitManifest) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(4);
    for t in tasks {
        let tagged: Vec<(&Event, Option<Split>)> = [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .flat_map(|s| t.split(s).iter().map(move |e| (e, Some(s))))
            .collect();
        let path = dir.join(task_file_name(t.task_id));
        save_tagged(&tagged, &path)?;
        written.push(path);
    }
    let path = dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(manifest).map_err(|e| Error::InvalidState(e.to_string()))?;
    fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Reads a directory written by [`save_task_dir`]. Every event must carry a
/// split tag.
pub fn load_task_dir(dir: &Path) -> Result<([TaskSet; 3], SplitManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        line: e.line(),
        event_id: None,
        message: e.to_string(),
    })?;
    let ranges = task_ranges(manifest.boundaries);
    let mut tasks = Vec::with_capacity(3);
    for (i, range) in ranges.into_iter().enumerate() {
        let task_id = i as u8 + 1;
        let path = dir.join(task_file_name(task_id));
        let mut task = TaskSet {
            task_id,
            speed_range: range,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (line, (event, split)) in load_tagged_events(&path)?.into_iter().enumerate() {
            match split {
                Some(Split::Train) => task.train.push(event),
                Some(Split::Val) => task.val.push(event),
                Some(Split::Test) => task.test.push(event),
                None => {
                    return Err(parse_error(&path, line + 1, Some(&event.event_id), "missing split tag"));
                }
            }
        }
        tasks.push(task);
    }
    Ok((tasks.try_into().expect("three tasks"), manifest))
}

/// Default minimum event length accepted by the pipeline.
pub const MIN_EVENT_STEPS: usize = DEFAULT_HORIZON + 2;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant_event(id: &str, speed: f64, steps: usize) -> Event {
        Event {
            event_id: id.into(),
            dt: 0.1,
            lv_speed: vec![speed; steps],
            fv_speed: vec![speed; steps],
            spacing: vec![20.0; steps],
        }
    }

    #[test]
    fn mean_speed() {
        assert_eq!(mean_fv_speed(&constant_event("a", 10.0, 12)), 10.0);
        let mut e = constant_event("b", 0.0, 2);
        e.fv_speed = vec![8.0, 12.0];
        assert_eq!(mean_fv_speed(&e), 10.0);
    }

    #[test]
    fn idm_limits() {
        let p = IdmParams::default();
        let a = idm_accel(p.desired_speed, 0.0, 1e6, &p).unwrap();
        assert!(a.abs() < 1e-3);
        let a = idm_accel(0.0, 0.0, 1e9, &p).unwrap();
        assert!((a - p.max_accel).abs() < 1e-6);
        assert!(idm_accel(5.0, 0.0, 0.0, &p).is_err());
        assert!(idm_accel(5.0, 0.0, -1.0, &p).is_err());
    }

    #[test]
    fn idm_equilibrium_by_bisection() {
        let p = IdmParams::default();
        for v in [2.0, 10.0, 20.0] {
            // accel increases with gap; bracket the root and bisect
            let (mut lo, mut hi) = (1e-3, 1e4);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if idm_accel(v, 0.0, mid, &p).unwrap() < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let gap = 0.5 * (lo + hi);
            assert!(idm_accel(v, 0.0, gap, &p).unwrap().abs() < 1e-9);
            assert!((gap - p.equilibrium_gap(v)).abs() < 1e-6 * gap);
        }
    }

    #[test]
    fn percentile_for_nine_values() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        assert!((percentile(&v, 33.3) - 3.664).abs() < 1e-12);
        assert!((percentile(&v, 66.7) - 6.336).abs() < 1e-12);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 9.0);
    }

    #[test]
    fn nine_events_split_three_ways() {
        let events: Vec<Event> = (1..=9).map(|s| constant_event(&format!("e{s}"), s as f64, 12)).collect();
        let (tasks, bounds) = split_tasks(&events, 42).unwrap();
        assert!(bounds.lower < bounds.upper);
        for t in &tasks {
            assert_eq!(t.len(), 3);
        }
        let mut fast: Vec<f64> = tasks[0]
            .train
            .iter()
            .chain(&tasks[0].val)
            .chain(&tasks[0].test)
            .map(mean_fv_speed)
            .collect();
        fast.sort_by(f64::total_cmp);
        assert_eq!(fast, vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn identical_speeds_degenerate() {
        let events: Vec<Event> = (0..12).map(|i| constant_event(&format!("e{i}"), 5.0, 12)).collect();
        assert!(matches!(split_tasks(&events, 1), Err(Error::InvalidInput(_))));
        assert!(matches!(split_tasks(&events[..8], 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn partition_sizes_follow_fractions() {
        assert_eq!(partition_sizes(100), (70, 15, 15));
        assert_eq!(partition_sizes(200), (140, 30, 30));
        for n in 1..300 {
            let (a, b, c) = partition_sizes(n);
            assert_eq!(a + b + c, n);
            assert!((a as f64 - 0.7 * n as f64).abs() <= 1.0);
            assert!((c as f64 - 0.15 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_events(Regime::Mid, 5, 0.1, 3).unwrap();
        let b = generate_events(Regime::Mid, 5, 0.1, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_events(Regime::Mid, 5, 0.1, 4).unwrap();
        assert_ne!(a, c);
        assert!(generate_events(Regime::Mid, 0, 0.1, 3).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let events = generate_events(Regime::Low, 3, 0.1, 1).unwrap();
        save_events(&events, &path).unwrap();
        let back = load_events(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in events.iter().zip(&back) {
            assert_eq!(a.fv_speed, b.fv_speed);
            assert_eq!(a.spacing, b.spacing);
            assert!((a.dt - b.dt).abs() < 1e-9);
        }

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "event_id,t,lv_speed,fv_speed,spacing\nx,0,1,1,5\nx,0.1,1,1,5\nx,0.3,1,1,5\n").unwrap();
        match load_events(&bad) {
            Err(Error::Parse { line, event_id, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(event_id.as_deref(), Some("x"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&bad, "event_id,t,lv_speed,fv_speed,spacing\nx,0,1,1,5\nx,0.1,1,1,-2\n").unwrap();
        assert!(matches!(load_events(&bad), Err(Error::Parse { line: 3, .. })));
    }

    proptest! {
        #[test]
        fn percentile_matches_sort_and_interpolate(values in prop::collection::vec(-100.0f64..100.0, 1..50), p in 0.0f64..=100.0) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let rank = p / 100.0 * (sorted.len() - 1) as f64;
            let below = rank.floor() as usize;
            let expected = if below + 1 < sorted.len() {
                sorted[below] * (1.0 - (rank - below as f64)) + sorted[below + 1] * (rank - below as f64)
            } else {
                sorted[below]
            };
            let got = percentile(&values, p);
            prop_assert!((got - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
        }

        #[test]
        fn split_partitions_exactly(speeds in prop::collection::vec(0.5f64..30.0, 9..60), seed in 0u64..1000) {
            let events: Vec<Event> = speeds
                .iter()
                .enumerate()
                .map(|(i, &s)| constant_event(&format!("e{i}"), s, 12))
                .collect();
            if let Ok((tasks, _)) = split_tasks(&events, seed) {
                let mut ids: Vec<String> = tasks
                    .iter()
                    .flat_map(|t| t.train.iter().chain(&t.val).chain(&t.test))
                    .map(|e| e.event_id.clone())
                    .collect();
                ids.sort();
                let mut expected: Vec<String> = events.iter().map(|e| e.event_id.clone()).collect();
                expected.sort();
                prop_assert_eq!(ids, expected);
                for t in &tasks {
                    for e in t.train.iter().chain(&t.val).chain(&t.test) {
                        prop_assert!(t.speed_range.contains(mean_fv_speed(e)));
                    }
                }
            }
        }
    }
}
