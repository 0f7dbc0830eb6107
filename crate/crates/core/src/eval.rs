//! Stage-matrix evaluation: pooled spacing/speed MSE and collision rate per
//! (method, task, stage), forgetting scores, and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Event, TaskSet};
use crate::error::{Error, Result};
use crate::sim::{self, Controller, RolloutConfig, SimTrajectory};
use crate::train::{Checkpoint, Method};

/// Squared-error sums of one closed-loop evaluation rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventMetrics {
    pub se_spacing: f64,
    pub se_speed: f64,
    pub n_steps: usize,
    pub collided: bool,
}

/// Sums squared errors of a finished trajectory against its event.
pub fn trajectory_metrics(event: &Event, traj: &SimTrajectory) -> EventMetrics {
    let mut se_spacing = 0.0;
    let mut se_speed = 0.0;
    for p in &traj.points {
        let ds = p.spacing - event.spacing[p.t_index];
        let dv = p.sv_speed - event.fv_speed[p.t_index];
        se_spacing += ds * ds;
        se_speed += dv * dv;
    }
    EventMetrics {
        se_spacing,
        se_speed,
        n_steps: traj.len(),
        collided: sim::detect_collision(traj),
    }
}

/// Evaluates `controller` on one event. Collisions never stop the rollout.
pub fn event_metrics<C: Controller + ?Sized>(controller: &C, event: &Event, cfg: &RolloutConfig) -> Result<EventMetrics> {
    let cfg = RolloutConfig {
        stop_on_collision: false,
        ..*cfg
    };
    let traj = sim::rollout(controller, event, &cfg)?;
    Ok(trajectory_metrics(event, &traj))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricCell {
    /// Step-pooled spacing MSE, m².
    pub mse_spacing: f64,
    /// Step-pooled speed MSE, (m/s)².
    pub mse_speed: f64,
    /// Percent of events with at least one collision.
    pub collision_rate: f64,
    pub n_events: usize,
    /// Mean of per-event MSEs, for comparison with the pooled figures.
    pub event_mean_mse_spacing: f64,
    pub event_mean_mse_speed: f64,
}

/// `100 · collisions / events`.
pub fn collision_rate(collisions: usize, events: usize) -> f64 {
    if events == 0 {
        return 0.0;
    }
    100.0 * collisions as f64 / events as f64
}

/// Pools per-event sums into a cell.
pub fn pool(metrics: &[EventMetrics]) -> MetricCell {
    let mut se_sp = 0.0;
    let mut se_sv = 0.0;
    let mut steps = 0usize;
    let mut collisions = 0usize;
    let mut ev_sp = 0.0;
    let mut ev_sv = 0.0;
    for m in metrics {
        se_sp += m.se_spacing;
        se_sv += m.se_speed;
        steps += m.n_steps;
        collisions += m.collided as usize;
        if m.n_steps > 0 {
            ev_sp += m.se_spacing / m.n_steps as f64;
            ev_sv += m.se_speed / m.n_steps as f64;
        }
    }
    let n = metrics.len().max(1) as f64;
    let steps = steps.max(1) as f64;
    MetricCell {
        mse_spacing: se_sp / steps,
        mse_speed: se_sv / steps,
        collision_rate: collision_rate(collisions, metrics.len()),
        n_events: metrics.len(),
        event_mean_mse_spacing: ev_sp / n,
        event_mean_mse_speed: ev_sv / n,
    }
}

/// Evaluates every event (in parallel) and pools in event order.
pub fn pooled_metrics<C: Controller + Sync + ?Sized>(controller: &C, events: &[Event], cfg: &RolloutConfig) -> Result<MetricCell> {
    if events.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty event list".into()));
    }
    let per_event: Vec<EventMetrics> = events
        .par_iter()
        .map(|e| event_metrics(controller, e, cfg))
        .collect::<Result<_>>()?;
    Ok(pool(&per_event))
}

/// Metrics of a checkpoint on a task's test split.
pub fn taskset_metrics(checkpoint: &Checkpoint, task: &TaskSet, dt: f64) -> Result<MetricCell> {
    if task.test.is_empty() {
        return Err(Error::InvalidArgument(format!("task {} has an empty test split", task.task_id)));
    }
    let cfg = RolloutConfig {
        horizon: checkpoint.horizon,
        dt,
        stop_on_collision: false,
    };
    pooled_metrics(&checkpoint.controller(), &task.test, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub method: Method,
    pub task: u8,
    pub stage: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageMatrix {
    cells: BTreeMap<CellKey, MetricCell>,
}

impl StageMatrix {
    pub fn insert(&mut self, method: Method, task: u8, stage: u8, cell: MetricCell) -> Result<()> {
        let valid = (1..=3).contains(&task)
            && (1..=3).contains(&stage)
            && if method.is_continual() { task <= stage } else { stage == 3 };
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "cell ({method}, task {task}, stage {stage}) violates the stage index discipline"
            )));
        }
        self.cells.insert(CellKey { method, task, stage }, cell);
        Ok(())
    }

    pub fn get(&self, method: Method, task: u8, stage: u8) -> Option<&MetricCell> {
        self.cells.get(&CellKey { method, task, stage })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CellKey, &MetricCell)> {
        self.cells.iter()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.cells.keys().map(|k| k.method).collect();
        m.dedup();
        m
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,task,stage,mse_spacing,mse_speed,collision_rate_pct,n_events,event_mean_mse_spacing,event_mean_mse_speed\n",
        );
        for (k, c) in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                k.method,
                k.task,
                k.stage,
                c.mse_spacing,
                c.mse_speed,
                c.collision_rate,
                c.n_events,
                c.event_mean_mse_spacing,
                c.event_mean_mse_speed
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut m = StageMatrix::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::InvalidInput(format!("stage matrix line {}: bad {what}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 7 {
                return Err(bad("column count"));
            }
            let num = |j: usize| f.get(j).and_then(|s| s.parse::<f64>().ok());
            let cell = MetricCell {
                mse_spacing: num(3).ok_or_else(|| bad("mse_spacing"))?,
                mse_speed: num(4).ok_or_else(|| bad("mse_speed"))?,
                collision_rate: num(5).ok_or_else(|| bad("collision_rate_pct"))?,
                n_events: f[6].parse().map_err(|_| bad("n_events"))?,
                event_mean_mse_spacing: num(7).unwrap_or(f64::NAN),
                event_mean_mse_speed: num(8).unwrap_or(f64::NAN),
            };
            let method: Method = f[0].parse()?;
            let task = f[1].parse().map_err(|_| bad("task"))?;
            let stage = f[2].parse().map_err(|_| bad("stage"))?;
            m.insert(method, task, stage, cell)?;
        }
        Ok(m)
    }
}

/// Evaluates every checkpoint on the test splits of the tasks it has seen.
pub fn build_stage_matrix(checkpoints: &[Checkpoint], tasks: &[TaskSet; 3], dt: f64) -> Result<StageMatrix> {
    let mut by_method: BTreeMap<Method, BTreeMap<u8, &Checkpoint>> = BTreeMap::new();
    for c in checkpoints {
        by_method.entry(c.method).or_default().insert(c.stage, c);
    }
    let mut matrix = StageMatrix::default();
    for (method, stages) in &by_method {
        let needed: &[u8] = if method.is_continual() { &[1, 2, 3] } else { &[3] };
        for &stage in needed {
            let ckpt = stages.get(&stage).ok_or_else(|| {
                Error::InvalidState(format!("missing {method} checkpoint for stage {stage}"))
            })?;
            let task_ids: Vec<u8> = if method.is_continual() { (1..=stage).collect() } else { vec![1, 2, 3] };
            for task in task_ids {
                let cell = taskset_metrics(ckpt, &tasks[task as usize - 1], dt)?;
                matrix.insert(*method, task, stage, cell)?;
            }
        }
    }
    Ok(matrix)
}

/// `100 · (last − first) / first`, undefined when `first` is zero.
pub fn relative_increase(first: f64, last: f64) -> Option<f64> {
    if first == 0.0 || !first.is_finite() || !last.is_finite() {
        return None;
    }
    Some(100.0 * (last - first) / first)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForgettingScore {
    pub spacing: Option<f64>,
    pub speed: Option<f64>,
}

/// Relative MSE change on `task` from the stage it was first trained at to
/// stage 3.
pub fn forgetting_score(matrix: &StageMatrix, method: Method, task: u8) -> Result<ForgettingScore> {
    let first_stage = if method.is_continual() { task } else { 3 };
    let (first, last) = match (matrix.get(method, task, first_stage), matrix.get(method, task, 3)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidState(format!(
                "stage matrix lacks {method} cells for task {task}"
            )))
        }
    };
    Ok(ForgettingScore {
        spacing: relative_increase(first.mse_spacing, last.mse_spacing),
        speed: relative_increase(first.mse_speed, last.mse_speed),
    })
}

fn fmt_score(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:+.1}%"),
        None => "undefined".into(),
    }
}

fn markdown_table(matrix: &StageMatrix, title: &str, value: impl Fn(&MetricCell) -> f64) -> String {
    let mut out = format!("## {title}\n\n| Model | Task Set | Stage 1 | Stage 2 | Stage 3 |\n|---|---|---|---|---|\n");
    for method in matrix.methods() {
        for task in 1..=3u8 {
            let _ = write!(out, "| {} | {task} |", method.label());
            for stage in 1..=3u8 {
                match matrix.get(method, task, stage) {
                    Some(c) => {
                        let _ = write!(out, " {:.2} |", value(c));
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    out.push('\n');
    out
}

/// Markdown body of `report.md`.
pub fn report_markdown(matrix: &StageMatrix) -> String {
    let mut out = String::from("# Continual car-following evaluation\n\n");
    out.push_str("Closed-loop rollouts on each task's test split. MSEs pool squared errors over all scored steps.\n\n");
    out.push_str(&markdown_table(matrix, "MSE in spacing (m²)", |c| c.mse_spacing));
    out.push_str(&markdown_table(matrix, "MSE in speed ((m/s)²)", |c| c.mse_speed));
    out.push_str(&markdown_table(matrix, "Collision rate (%)", |c| c.collision_rate));

    out.push_str("## Forgetting scores\n\nRelative MSE change from the stage a task was first trained at to stage 3.\n\n");
    out.push_str("| Model | Task Set | Spacing | Speed |\n|---|---|---|---|\n");
    for method in matrix.methods().into_iter().filter(|m| m.is_continual()) {
        for task in 1..=2u8 {
            if let Ok(s) = forgetting_score(matrix, method, task) {
                let _ = writeln!(out, "| {} | {task} | {} | {} |", method.label(), fmt_score(s.spacing), fmt_score(s.speed));
            }
        }
    }
    out.push('\n');
    out
}

/// Report inputs beyond the matrix: the checkpoints and tasks used for the
/// trajectory comparison exports.
pub struct ReportContext<'a> {
    pub checkpoints: &'a [Checkpoint],
    pub tasks: &'a [TaskSet; 3],
    pub dt: f64,
    pub seed: u64,
}

/// Writes `report.md`, `stage_matrix.csv` and `traj_task<k>.csv`. Returns
/// the written paths.
pub fn render_report(matrix: &StageMatrix, ctx: Option<&ReportContext<'_>>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let write = |name: &str, body: &str, written: &mut Vec<PathBuf>| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    write("report.md", &report_markdown(matrix), &mut written)?;
    write("stage_matrix.csv", &matrix.to_csv(), &mut written)?;

    if let Some(ctx) = ctx {
        let finals: Vec<&Checkpoint> = {
            let mut v: Vec<&Checkpoint> = ctx.checkpoints.iter().filter(|c| c.stage == 3).collect();
            v.sort_by_key(|c| c.method);
            v
        };
        for task in ctx.tasks {
            if task.test.is_empty() || finals.is_empty() {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ (0x7472_616a << 8 | task.task_id as u64));
            let event = &task.test[rng.gen_range(0..task.test.len())];
            let path = out_dir.join(format!("traj_task{}.csv", task.task_id));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for (i, c) in finals.iter().enumerate() {
                let cfg = RolloutConfig {
                    horizon: c.horizon,
                    dt: ctx.dt,
                    stop_on_collision: false,
                };
                let traj = sim::rollout(&c.controller(), event, &cfg)?;
                sim::write_trajectory_csv(&mut w, event, &traj, Some(c.method.name()), i == 0)
                    .map_err(|e| Error::io(&path, e))?;
            }
            std::io::Write::flush(&mut w).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(sp: f64) -> MetricCell {
        MetricCell {
            mse_spacing: sp,
            mse_speed: sp / 10.0,
            collision_rate: 0.0,
            n_events: 10,
            event_mean_mse_spacing: sp,
            event_mean_mse_speed: sp / 10.0,
        }
    }

    #[test]
    fn collision_rate_arithmetic() {
        assert_eq!(collision_rate(0, 40), 0.0);
        assert_eq!(collision_rate(5, 200), 2.5);
    }

    #[test]
    fn mse_of_two_steps() {
        let m = pool(&[EventMetrics {
            se_spacing: (2.0f64 - 0.0).powi(2) + 0.0,
            se_speed: 0.0,
            n_steps: 2,
            collided: false,
        }]);
        assert_eq!(m.mse_spacing, 2.0);
    }

    #[test]
    fn forgetting_matches_reference_numbers() {
        let s = relative_increase(23.01, 81.35).unwrap();
        assert!((s - 253.6).abs() < 0.5, "{s}");
        assert_eq!(relative_increase(5.0, 5.0), Some(0.0));
        assert!(relative_increase(5.0, 4.0).unwrap() < 0.0);
        assert_eq!(relative_increase(0.0, 4.0), None);
    }

    #[test]
    fn forgetting_from_matrix() {
        let mut m = StageMatrix::default();
        m.insert(Method::Baseline, 1, 1, cell(23.01)).unwrap();
        m.insert(Method::Baseline, 1, 2, cell(47.78)).unwrap();
        m.insert(Method::Baseline, 1, 3, cell(81.35)).unwrap();
        let f = forgetting_score(&m, Method::Baseline, 1).unwrap();
        assert!((f.spacing.unwrap() - 253.5).abs() < 0.1);
        assert!(forgetting_score(&m, Method::Baseline, 2).is_err());
        m.insert(Method::Ewc, 1, 1, cell(0.0)).unwrap();
        m.insert(Method::Ewc, 1, 3, cell(1.0)).unwrap();
        assert_eq!(forgetting_score(&m, Method::Ewc, 1).unwrap().spacing, None);
    }

    #[test]
    fn index_discipline_enforced() {
        let mut m = StageMatrix::default();
        assert!(m.insert(Method::Baseline, 2, 1, cell(1.0)).is_err());
        assert!(m.insert(Method::Joint, 1, 2, cell(1.0)).is_err());
        assert!(m.insert(Method::Joint, 1, 3, cell(1.0)).is_ok());
        assert!(m.insert(Method::Mas, 4, 3, cell(1.0)).is_err());
    }

    #[test]
    fn csv_round_trip_exact() {
        let mut m = StageMatrix::default();
        m.insert(Method::Mas, 1, 2, cell(0.1 + 0.2)).unwrap();
        m.insert(Method::Joint, 3, 3, cell(1.0 / 3.0)).unwrap();
        let back = StageMatrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn report_tables_follow_matrix() {
        let mut m = StageMatrix::default();
        for stage in 1..=3 {
            for task in 1..=stage {
                m.insert(Method::Baseline, task, stage, cell(task as f64 * stage as f64)).unwrap();
            }
        }
        for task in 1..=3 {
            m.insert(Method::Joint, task, 3, cell(1.0)).unwrap();
        }
        let md = report_markdown(&m);
        assert_eq!(md.matches("| CL-Baseline |").count(), 3 * 3 + 2);
        assert_eq!(md.matches("| LSTM |").count(), 3 * 3);
        assert_eq!(md, report_markdown(&m));
    }

    proptest! {
        #[test]
        fn pooled_mse_equals_flat_list(errors in prop::collection::vec(prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20), 1..8), hits in prop::collection::vec(any::<bool>(), 8)) {
            let metrics: Vec<EventMetrics> = errors
                .iter()
                .zip(&hits)
                .map(|(steps, &c)| EventMetrics {
                    se_spacing: steps.iter().map(|e| e.0 * e.0).sum(),
                    se_speed: steps.iter().map(|e| e.1 * e.1).sum(),
                    n_steps: steps.len(),
                    collided: c,
                })
                .collect();
            let flat: Vec<(f64, f64)> = errors.iter().flatten().copied().collect();
            let cell = pool(&metrics);
            let want_sp = flat.iter().map(|e| e.0 * e.0).sum::<f64>() / flat.len() as f64;
            prop_assert!((cell.mse_spacing - want_sp).abs() <= 1e-12 * (1.0 + want_sp));
            let collided = hits.iter().take(metrics.len()).filter(|&&c| c).count();
            prop_assert_eq!(cell.collision_rate, 100.0 * collided as f64 / metrics.len() as f64);
        }
    }
}
