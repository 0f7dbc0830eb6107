//! Closed-loop longitudinal simulator.
//!
//! The simulated vehicle replaces the recorded follower after a warm-up of
//! `H` recorded steps. Each step the controller sees the last `H` feature
//! rows, commands an acceleration and the state advances by forward Euler
//! using step-start speeds:
//!
//! ```text
//! sv'      = max(0, sv + a·dt)
//! spacing' = spacing + (lv − sv)·dt
//! ```
//!
//! [`rollout_mse_grad`] additionally back-propagates the squared tracking
//! error through the Euler updates and the controller, in chunks of
//! `chunk` steps (state values carry over chunk boundaries, gradients do
//! not).

use std::io::Write;

use crate::data::Event;
use crate::error::{Error, Result};
use crate::nn::INPUTS;

pub type Row = [f64; INPUTS];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimState {
    pub sv_speed: f64,
    pub spacing: f64,
    pub t_index: usize,
}

/// Advances one Euler step. The flag reports whether the speed clamp at
/// zero fired.
pub fn step(state: SimState, accel: f64, lv_speed: f64, dt: f64) -> Result<(SimState, bool)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if ![state.sv_speed, state.spacing, accel, lv_speed].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite simulator input".into()));
    }
    let raw = state.sv_speed + accel * dt;
    let clamped = raw < 0.0;
    let next = SimState {
        sv_speed: if clamped { 0.0 } else { raw },
        spacing: state.spacing + (lv_speed - state.sv_speed) * dt,
        t_index: state.t_index + 1,
    };
    Ok((next, clamped))
}

/// Something that commands an acceleration from a window of physical
/// feature rows `[sv, lv, lv − sv, spacing]`. `t` is the event index of the
/// newest row.
pub trait Controller {
    fn accel(&self, t: usize, window: &[Row]) -> Result<f64>;
}

/// A controller whose output can be differentiated with respect to its
/// parameters and its input rows.
pub trait DifferentiableController: Controller {
    type Cache;

    fn param_len(&self) -> usize;

    fn forward(&self, t: usize, window: &[Row]) -> Result<(f64, Self::Cache)>;

    /// Accumulates `upstream · ∂a/∂θ` into `grad` and `upstream · ∂a/∂row`
    /// into `row_grads`.
    fn backward(&self, cache: &Self::Cache, upstream: f64, grad: &mut [f64], row_grads: &mut [Row]) -> Result<()>;
}

/// Always commands zero acceleration.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroController;

impl Controller for ZeroController {
    fn accel(&self, _t: usize, _window: &[Row]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Parameter-free: contributes no gradient.
impl DifferentiableController for ZeroController {
    type Cache = ();

    fn param_len(&self) -> usize {
        0
    }

    fn forward(&self, _t: usize, _window: &[Row]) -> Result<(f64, ())> {
        Ok((0.0, ()))
    }

    fn backward(&self, _cache: &(), _upstream: f64, _grad: &mut [f64], _row_grads: &mut [Row]) -> Result<()> {
        Ok(())
    }
}

/// Replays the accelerations implied by an event's recorded follower speed.
#[derive(Debug, Clone)]
pub struct ReplayController {
    accels: Vec<f64>,
}

impl ReplayController {
    pub fn new(event: &Event) -> Self {
        ReplayController {
            accels: reconstructed_accels(event),
        }
    }
}

impl Controller for ReplayController {
    fn accel(&self, t: usize, _window: &[Row]) -> Result<f64> {
        self.accels
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no recorded acceleration at step {t}")))
    }
}

/// Open-loop and parameter-free: contributes no gradient.
impl DifferentiableController for ReplayController {
    type Cache = ();

    fn param_len(&self) -> usize {
        0
    }

    fn forward(&self, t: usize, window: &[Row]) -> Result<(f64, ())> {
        Ok((self.accel(t, window)?, ()))
    }

    fn backward(&self, _cache: &(), _upstream: f64, _grad: &mut [f64], _row_grads: &mut [Row]) -> Result<()> {
        Ok(())
    }
}

/// `(fv[k+1] − fv[k]) / dt` for every step but the last.
pub fn reconstructed_accels(event: &Event) -> Vec<f64> {
    event.fv_speed.windows(2).map(|w| (w[1] - w[0]) / event.dt).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    /// Event index of this state.
    pub t_index: usize,
    pub sv_speed: f64,
    pub spacing: f64,
    /// Acceleration commanded on the step that produced this state.
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrajectory {
    pub points: Vec<TrajPoint>,
    /// Number of closed-loop steps taken when spacing first reached ≤ 0;
    /// the colliding state is `points[collision_step - 1]`.
    pub collision_step: Option<usize>,
    pub backward_clamp_count: usize,
}

impl SimTrajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn detect_collision(traj: &SimTrajectory) -> bool {
    traj.collision_step.is_some()
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub dt: f64,
    pub stop_on_collision: bool,
}

fn check_event(event: &Event, cfg: &RolloutConfig) -> Result<()> {
    if event.len() < cfg.horizon + 2 {
        return Err(Error::InvalidArgument(format!(
            "event {} has {} steps, rollout needs at least {}",
            event.event_id,
            event.len(),
            cfg.horizon + 2
        )));
    }
    if (event.dt - cfg.dt).abs() > 1e-9 * cfg.dt {
        return Err(Error::InvalidArgument(format!(
            "event {} sampled at dt={} but simulator runs at dt={}",
            event.event_id, event.dt, cfg.dt
        )));
    }
    Ok(())
}

/// Per-index simulator state buffer shared by the plain and differentiable
/// rollouts. Indices below `horizon` hold recorded values.
struct StateTrace<'a> {
    event: &'a Event,
    sv: Vec<f64>,
    sp: Vec<f64>,
}

impl<'a> StateTrace<'a> {
    fn new(event: &'a Event, horizon: usize) -> Self {
        let mut sv = Vec::with_capacity(event.len());
        let mut sp = Vec::with_capacity(event.len());
        sv.extend_from_slice(&event.fv_speed[..horizon]);
        sp.extend_from_slice(&event.spacing[..horizon]);
        StateTrace { event, sv, sp }
    }

    fn window(&self, t: usize, horizon: usize, out: &mut Vec<Row>) {
        out.clear();
        for k in t + 1 - horizon..=t {
            let (sv, lv, sp) = (self.sv[k], self.event.lv_speed[k], self.sp[k]);
            out.push([sv, lv, lv - sv, sp]);
        }
    }

    fn state(&self, t: usize) -> SimState {
        SimState {
            sv_speed: self.sv[t],
            spacing: self.sp[t],
            t_index: t,
        }
    }

    fn push(&mut self, s: SimState) {
        self.sv.push(s.sv_speed);
        self.sp.push(s.spacing);
    }
}

/// Closed-loop rollout of `controller` over `event`.
pub fn rollout<C: Controller + ?Sized>(controller: &C, event: &Event, cfg: &RolloutConfig) -> Result<SimTrajectory> {
    check_event(event, cfg)?;
    let h = cfg.horizon;
    let mut trace = StateTrace::new(event, h);
    let mut window = Vec::with_capacity(h);
    let mut traj = SimTrajectory {
        points: Vec::with_capacity(event.len() - h),
        collision_step: None,
        backward_clamp_count: 0,
    };
    for t in h - 1..event.len() - 1 {
        trace.window(t, h, &mut window);
        let a = controller.accel(t, &window)?;
        let (next, clamped) = step(trace.state(t), a, event.lv_speed[t], cfg.dt)?;
        trace.push(next);
        traj.backward_clamp_count += clamped as usize;
        traj.points.push(TrajPoint {
            t_index: next.t_index,
            sv_speed: next.sv_speed,
            spacing: next.spacing,
            accel: a,
        });
        if next.spacing <= 0.0 && traj.collision_step.is_none() {
            traj.collision_step = Some(traj.points.len());
            if cfg.stop_on_collision {
                break;
            }
        }
    }
    Ok(traj)
}

/// Relative weights of the spacing and speed squared errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseWeights {
    pub spacing: f64,
    pub speed: f64,
}

impl Default for MseWeights {
    fn default() -> Self {
        MseWeights {
            spacing: 1.0,
            speed: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutGrad {
    pub trajectory: SimTrajectory,
    /// Mean over simulated steps of the weighted squared errors.
    pub mse: f64,
    /// Gradient of `mse` with respect to the controller parameters.
    pub grad: Vec<f64>,
}

/// Rollout plus the gradient of the mean weighted squared tracking error.
///
/// Gradients are truncated every `chunk` steps. The speed clamp contributes
/// a zero subgradient when active.
pub fn rollout_mse_grad<C: DifferentiableController>(
    controller: &C,
    event: &Event,
    cfg: &RolloutConfig,
    weights: MseWeights,
    chunk: usize,
) -> Result<RolloutGrad> {
    check_event(event, cfg)?;
    if chunk == 0 {
        return Err(Error::InvalidArgument("rollout chunk must be at least 1".into()));
    }
    let h = cfg.horizon;
    let dt = cfg.dt;
    let last_query = event.len() - 1;
    let mut trace = StateTrace::new(event, h);
    let mut window = Vec::with_capacity(h);
    let mut traj = SimTrajectory {
        points: Vec::with_capacity(event.len() - h),
        collision_step: None,
        backward_clamp_count: 0,
    };
    let mut grad = vec![0.0; controller.param_len()];
    let mut sq_sum = 0.0;
    let mut caches: Vec<C::Cache> = Vec::with_capacity(chunk);
    let mut clamped_flags: Vec<bool> = Vec::with_capacity(chunk);
    let mut row_grads = vec![[0.0; INPUTS]; h];
    let mut g_sv = vec![0.0; chunk + 1];
    let mut g_sp = vec![0.0; chunk + 1];

    let mut start = h - 1;
    let mut stop = false;
    while start < last_query && !stop {
        let end = (start + chunk).min(last_query);
        caches.clear();
        clamped_flags.clear();
        for t in start..end {
            trace.window(t, h, &mut window);
            let (a, cache) = controller.forward(t, &window)?;
            let (next, clamped) = step(trace.state(t), a, event.lv_speed[t], dt)?;
            trace.push(next);
            caches.push(cache);
            clamped_flags.push(clamped);
            traj.backward_clamp_count += clamped as usize;
            traj.points.push(TrajPoint {
                t_index: next.t_index,
                sv_speed: next.sv_speed,
                spacing: next.spacing,
                accel: a,
            });
            let e_sp = next.spacing - event.spacing[t + 1];
            let e_sv = next.sv_speed - event.fv_speed[t + 1];
            sq_sum += weights.spacing * e_sp * e_sp + weights.speed * e_sv * e_sv;
            if next.spacing <= 0.0 && traj.collision_step.is_none() {
                traj.collision_step = Some(traj.points.len());
                if cfg.stop_on_collision {
                    stop = true;
                    break;
                }
            }
        }

        // Reverse sweep. Local index j ↔ event index start + j; j = 0 is the
        // detached chunk-entry state.
        let steps = caches.len();
        g_sv[..=steps].fill(0.0);
        g_sp[..=steps].fill(0.0);
        for j in 1..=steps {
            let t = start + j;
            g_sp[j] = 2.0 * weights.spacing * (trace.sp[t] - event.spacing[t]);
            g_sv[j] = 2.0 * weights.speed * (trace.sv[t] - event.fv_speed[t]);
        }
        for j in (0..steps).rev() {
            let t = start + j;
            // spacing_{t+1} = spacing_t + (lv_t − sv_t)·dt
            g_sp[j] += g_sp[j + 1];
            g_sv[j] -= dt * g_sp[j + 1];
            let upstream = if clamped_flags[j] {
                0.0
            } else {
                g_sv[j] += g_sv[j + 1];
                g_sv[j + 1] * dt
            };
            if upstream == 0.0 {
                continue;
            }
            row_grads.iter_mut().for_each(|r| *r = [0.0; INPUTS]);
            controller.backward(&caches[j], upstream, &mut grad, &mut row_grads)?;
            // row r holds event index t + 1 − h + r; only states produced
            // inside this chunk receive gradient
            let first = t + 1 - h;
            for (r, rg) in row_grads.iter().enumerate() {
                let k = first + r;
                if k <= start {
                    continue;
                }
                let local = k - start;
                g_sv[local] += rg[0] - rg[2];
                g_sp[local] += rg[3];
            }
        }
        start = end;
    }

    let n = traj.points.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok(RolloutGrad {
        trajectory: traj,
        mse: sq_sum / n,
        grad,
    })
}

/// Writes the recorded-vs-simulated comparison for one rollout. When
/// `method` is given it becomes the first column.
pub fn write_trajectory_csv<W: Write>(
    out: &mut W,
    event: &Event,
    traj: &SimTrajectory,
    method: Option<&str>,
    header: bool,
) -> std::io::Result<()> {
    if header {
        if method.is_some() {
            write!(out, "method,")?;
        }
        writeln!(out, "t,lv_speed,fv_speed_recorded,sv_speed_sim,spacing_recorded,spacing_sim,accel")?;
    }
    for p in &traj.points {
        if let Some(m) = method {
            write!(out, "{m},")?;
        }
        let k = p.t_index;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            k as f64 * event.dt,
            event.lv_speed[k],
            event.fv_speed[k],
            p.sv_speed,
            event.spacing[k],
            p.spacing,
            p.accel
        )?;
    }
    Ok(())
}
