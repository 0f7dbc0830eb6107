//! Single-layer LSTM regressor with a scalar acceleration head.
//!
//! The network reads a window of `H` feature rows (SV speed, LV speed,
//! relative speed, spacing), runs the LSTM recursion from a zero state and
//! maps the final hidden state through an affine head. The head output is
//! squashed with `8·tanh(raw/8)` so the commanded acceleration always lies
//! strictly inside (−8, 8) m/s².
//!
//! Gradients are computed by hand-written backpropagation through time.
//! [`finite_diff_grad`] is the central-difference oracle used to check them.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of features per window row.
pub const INPUTS: usize = 4;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_HORIZON: usize = 10;
/// Bound of the smooth output saturation, m/s².
pub const ACCEL_LIMIT: f64 = 8.0;

const REL_SPEED_TOL: f64 = 1e-9;

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

/// Offsets of the named parameter slices inside a [`ParamVector`].
///
/// Gate rows are ordered input, forget, cell, output; each gate owns
/// `hidden` consecutive rows. Weight matrices are stored column-major so a
/// column (all gate rows for one input or hidden unit) is contiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub hidden: usize,
}

impl Layout {
    pub fn new(hidden: usize) -> Self {
        Layout { hidden }
    }

    /// Rows of the stacked gate pre-activation.
    pub fn gate_rows(&self) -> usize {
        4 * self.hidden
    }

    pub fn param_count(&self) -> usize {
        let n = self.hidden;
        4 * n * (INPUTS + n) + 4 * n + n + 1
    }

    pub fn input_weights(&self) -> std::ops::Range<usize> {
        0..INPUTS * self.gate_rows()
    }

    pub fn recurrent_weights(&self) -> std::ops::Range<usize> {
        let start = self.input_weights().end;
        start..start + self.hidden * self.gate_rows()
    }

    pub fn gate_biases(&self) -> std::ops::Range<usize> {
        let start = self.recurrent_weights().end;
        start..start + self.gate_rows()
    }

    pub fn head_weight(&self) -> std::ops::Range<usize> {
        let start = self.gate_biases().end;
        start..start + self.hidden
    }

    pub fn head_bias(&self) -> usize {
        self.head_weight().end
    }

    /// All named slices in storage order.
    pub fn slices(&self) -> [(&'static str, std::ops::Range<usize>); 5] {
        let hb = self.head_bias();
        [
            ("input_weights", self.input_weights()),
            ("recurrent_weights", self.recurrent_weights()),
            ("gate_biases", self.gate_biases()),
            ("head_weight", self.head_weight()),
            ("head_bias", hb..hb + 1),
        ]
    }
}

/// Flat vector of every trainable LSTM parameter.
#[derive(Debug, Clone)]
pub struct ParamVector {
    hidden: usize,
    values: Vec<f64>,
    // Changes whenever the values may have changed; lets backward reject
    // caches built from other weights.
    revision: u64,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.hidden == other.hidden && self.values == other.values
    }
}

impl ParamVector {
    pub fn zeros(hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden_size must be at least 1".into()));
        }
        Ok(ParamVector {
            hidden,
            values: vec![0.0; Layout::new(hidden).param_count()],
            revision: next_revision(),
        })
    }

    pub fn from_values(hidden: usize, values: Vec<f64>) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden_size must be at least 1".into()));
        }
        let expected = Layout::new(hidden).param_count();
        if values.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "hidden_size {hidden} needs {expected} parameters, got {}",
                values.len()
            )));
        }
        Ok(ParamVector {
            hidden,
            values,
            revision: next_revision(),
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.hidden)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.revision = next_revision();
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }
}

/// Uniform fan-in initialization: every weight in `[-k, k]` with
/// `k = 1/sqrt(hidden)`, forget-gate biases 1.0, other biases 0.
pub fn init_params(hidden: usize, seed: u64) -> Result<ParamVector> {
    let mut params = ParamVector::zeros(hidden)?;
    let layout = params.layout();
    let k = 1.0 / (hidden as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = params.values_mut();
    for range in [
        layout.input_weights(),
        layout.recurrent_weights(),
        layout.head_weight(),
    ] {
        for v in &mut values[range] {
            *v = rng.gen_range(-k..=k);
        }
    }
    let biases = layout.gate_biases();
    for v in &mut values[biases.start + hidden..biases.start + 2 * hidden] {
        *v = 1.0;
    }
    Ok(params)
}

/// Gradient aligned index-for-index with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `H` rows of physical car-following features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    rows: Vec<[f64; INPUTS]>,
}

impl FeatureWindow {
    /// Rows are `[sv_speed, lv_speed, relative_speed, spacing]`.
    pub fn new(rows: Vec<[f64; INPUTS]>, horizon: usize) -> Result<Self> {
        if rows.len() != horizon {
            return Err(Error::InvalidInput(format!(
                "window has {} rows, horizon is {horizon}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("row {i} has a non-finite value")));
            }
            if row[3] <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "row {i}: spacing {} must be positive",
                    row[3]
                )));
            }
            if (row[2] - (row[1] - row[0])).abs() > REL_SPEED_TOL {
                return Err(Error::InvalidInput(format!(
                    "row {i}: relative speed {} != lv - sv",
                    row[2]
                )));
            }
        }
        Ok(FeatureWindow { rows })
    }

    /// Builds rows from per-step SV speed, LV speed and spacing.
    pub fn from_series(sv: &[f64], lv: &[f64], spacing: &[f64]) -> Result<Self> {
        if sv.len() != lv.len() || sv.len() != spacing.len() {
            return Err(Error::InvalidInput("series lengths differ".into()));
        }
        let rows = sv
            .iter()
            .zip(lv)
            .zip(spacing)
            .map(|((&s, &l), &d)| [s, l, l - s, d])
            .collect::<Vec<_>>();
        let horizon = rows.len();
        Self::new(rows, horizon)
    }

    pub fn rows(&self) -> &[[f64; INPUTS]] {
        &self.rows
    }

    pub fn horizon(&self) -> usize {
        self.rows.len()
    }
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: usize,
    revision: u64,
    inputs: Vec<[f64; INPUTS]>,
    // steps × 4n post-activation gates (i, f, g, o)
    gates: Vec<f64>,
    // (steps + 1) × n, index 0 is the zero initial state
    cells: Vec<f64>,
    hiddens: Vec<f64>,
    // steps × n, tanh(c_t)
    cell_tanh: Vec<f64>,
    accel: f64,
}

impl ForwardCache {
    pub fn accel(&self) -> f64 {
        self.accel
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

// exp without branches or libm calls so the gate loops vectorize:
// 2^k · e^r with |r| ≤ ln2/2 and a degree-13 Taylor polynomial for e^r
// (truncation below 1e-17 relative).
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52

#[inline(always)]
fn exp(x: f64) -> f64 {
    let x = x.clamp(-708.0, 709.0);
    let shifted = x * std::f64::consts::LOG2_E + ROUND_MAGIC;
    let k = shifted - ROUND_MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // k lies in [-1021, 1023] after the clamp, so 2^k is a normal number
    let ki = shifted.to_bits() as i64 - ROUND_MAGIC.to_bits() as i64;
    p * f64::from_bits(((ki + 1023) as u64) << 52)
}

#[inline(always)]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

/// `tanh` through `exp`; absolute error a few ulp of 1.
#[inline(always)]
fn tanh(x: f64) -> f64 {
    let e = exp(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

#[inline]
fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // eight independent lanes, combined pairwise at the end
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Forward pass over a validated physical window.
pub fn forward(window: &FeatureWindow, params: &ParamVector) -> Result<(f64, ForwardCache)> {
    forward_rows(window.rows(), params)
}

/// Forward pass over arbitrary (for example standardized) input rows.
pub fn forward_rows(rows: &[[f64; INPUTS]], params: &ParamVector) -> Result<(f64, ForwardCache)> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("window has no rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("window contains a non-finite value".into()));
    }
    let layout = params.layout();
    let n = layout.hidden;
    let g_rows = layout.gate_rows();
    let steps = rows.len();
    let w = params.values();
    let wx = &w[layout.input_weights()];
    let wh = &w[layout.recurrent_weights()];
    let bias = &w[layout.gate_biases()];

    let mut gates = vec![0.0; steps * g_rows];
    let mut cells = vec![0.0; (steps + 1) * n];
    let mut hiddens = vec![0.0; (steps + 1) * n];
    let mut cell_tanh = vec![0.0; steps * n];

    for t in 0..steps {
        let pre = &mut gates[t * g_rows..(t + 1) * g_rows];
        pre.copy_from_slice(bias);
        for (k, &x) in rows[t].iter().enumerate() {
            axpy(pre, x, &wx[k * g_rows..(k + 1) * g_rows]);
        }
        if t > 0 {
            let h_prev = &hiddens[t * n..(t + 1) * n];
            for (j, &h) in h_prev.iter().enumerate() {
                if h != 0.0 {
                    axpy(pre, h, &wh[j * g_rows..(j + 1) * g_rows]);
                }
            }
        }
        for v in &mut pre[..2 * n] {
            *v = sigmoid(*v);
        }
        for v in &mut pre[2 * n..3 * n] {
            *v = tanh(*v);
        }
        for v in &mut pre[3 * n..] {
            *v = sigmoid(*v);
        }
        let (c_prev_all, c_next_all) = cells.split_at_mut((t + 1) * n);
        let c_prev = &c_prev_all[t * n..];
        let c_next = &mut c_next_all[..n];
        let h_next = &mut hiddens[(t + 1) * n..(t + 2) * n];
        let tc = &mut cell_tanh[t * n..(t + 1) * n];
        for u in 0..n {
            let c = pre[n + u] * c_prev[u] + pre[u] * pre[2 * n + u];
            c_next[u] = c;
            tc[u] = tanh(c);
            h_next[u] = pre[3 * n + u] * tc[u];
        }
    }

    let h_last = &hiddens[steps * n..];
    let raw = dot(&w[layout.head_weight()], h_last) + w[layout.head_bias()];
    let accel = ACCEL_LIMIT * tanh(raw / ACCEL_LIMIT);
    let cache = ForwardCache {
        hidden: n,
        revision: params.revision(),
        inputs: rows.to_vec(),
        gates,
        cells,
        hiddens,
        cell_tanh,
        accel,
    };
    Ok((accel, cache))
}

/// `upstream · d(accel)/dθ` for the pass recorded in `cache`.
pub fn backward(cache: &ForwardCache, params: &ParamVector, upstream: f64) -> Result<GradVector> {
    let mut grad = GradVector::zeros(params.len());
    backward_into(cache, params, upstream, &mut grad.values, None)?;
    Ok(grad)
}

/// Accumulates `upstream · d(accel)/dθ` into `grad` and, when given,
/// `upstream · d(accel)/d(row)` into `input_grads`.
pub fn backward_into(
    cache: &ForwardCache,
    params: &ParamVector,
    upstream: f64,
    grad: &mut [f64],
    mut input_grads: Option<&mut [[f64; INPUTS]]>,
) -> Result<()> {
    if cache.hidden != params.hidden_size() || cache.revision != params.revision() {
        return Err(Error::InvalidState(
            "forward cache does not belong to these parameters".into(),
        ));
    }
    if grad.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient buffer has {} entries, expected {}",
            grad.len(),
            params.len()
        )));
    }
    if let Some(ig) = input_grads.as_deref() {
        if ig.len() != cache.steps() {
            return Err(Error::InvalidArgument("input gradient buffer length mismatch".into()));
        }
    }
    if upstream == 0.0 {
        return Ok(());
    }

    let layout = params.layout();
    let n = layout.hidden;
    let g_rows = layout.gate_rows();
    let steps = cache.steps();
    let w = params.values();
    let wx = &w[layout.input_weights()];
    let wh = &w[layout.recurrent_weights()];
    let head_w = &w[layout.head_weight()];

    let sat = cache.accel / ACCEL_LIMIT;
    let d_raw = upstream * (1.0 - sat * sat);

    let h_last = &cache.hiddens[steps * n..];
    axpy(&mut grad[layout.head_weight()], d_raw, h_last);
    grad[layout.head_bias()] += d_raw;

    let mut dh: Vec<f64> = head_w.iter().map(|&v| d_raw * v).collect();
    let mut dc = vec![0.0; n];
    let mut dpre = vec![0.0; g_rows];

    let (gx, rest) = grad.split_at_mut(layout.recurrent_weights().start);
    let (gh, rest) = rest.split_at_mut(n * g_rows);
    let gb = &mut rest[..g_rows];

    for t in (0..steps).rev() {
        let gt = &cache.gates[t * g_rows..(t + 1) * g_rows];
        let c_prev = &cache.cells[t * n..(t + 1) * n];
        let tc = &cache.cell_tanh[t * n..(t + 1) * n];
        for u in 0..n {
            let (i, f, g, o) = (gt[u], gt[n + u], gt[2 * n + u], gt[3 * n + u]);
            let d_o = dh[u] * tc[u];
            let dcu = dc[u] + dh[u] * o * (1.0 - tc[u] * tc[u]);
            dpre[u] = dcu * g * i * (1.0 - i);
            dpre[n + u] = dcu * c_prev[u] * f * (1.0 - f);
            dpre[2 * n + u] = dcu * i * (1.0 - g * g);
            dpre[3 * n + u] = d_o * o * (1.0 - o);
            dc[u] = dcu * f;
        }
        for (b, &d) in gb.iter_mut().zip(&dpre) {
            *b += d;
        }
        let x = &cache.inputs[t];
        for k in 0..INPUTS {
            axpy(&mut gx[k * g_rows..(k + 1) * g_rows], x[k], &dpre);
        }
        if let Some(ig) = input_grads.as_deref_mut() {
            for k in 0..INPUTS {
                ig[t][k] += dot(&wx[k * g_rows..(k + 1) * g_rows], &dpre);
            }
        }
        if t > 0 {
            let h_prev = &cache.hiddens[t * n..(t + 1) * n];
            for j in 0..n {
                let col = j * g_rows..(j + 1) * g_rows;
                axpy(&mut gh[col.clone()], h_prev[j], &dpre);
                dh[j] = dot(&wh[col], &dpre);
            }
        }
    }
    Ok(())
}

/// Central differences `(f(θ+εe_i) − f(θ−εe_i)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}
