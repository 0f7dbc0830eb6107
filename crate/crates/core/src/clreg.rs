//! Per-parameter importance estimation and the quadratic consolidation
//! penalty used by the EWC and MAS learners.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImportanceKind {
    /// Diagonal Fisher information.
    Fisher,
    /// Memory-aware-synapses output sensitivity.
    Mas,
}

impl ImportanceKind {
    pub fn tag(self) -> u8 {
        match self {
            ImportanceKind::Fisher => 1,
            ImportanceKind::Mas => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ImportanceKind::Fisher),
            2 => Some(ImportanceKind::Mas),
            _ => None,
        }
    }
}

impl fmt::Display for ImportanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImportanceKind::Fisher => "fisher",
            ImportanceKind::Mas => "mas",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    #[default]
    Sum,
    RunningMean,
}

impl fmt::Display for Accumulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Accumulation::Sum => "sum",
            Accumulation::RunningMean => "running-mean",
        })
    }
}

impl FromStr for Accumulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Accumulation::Sum),
            "running-mean" | "running_mean" | "mean" => Ok(Accumulation::RunningMean),
            other => Err(Error::InvalidArgument(format!("unknown accumulation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    pub lambda: f64,
    pub accumulation: Accumulation,
}

impl RegConfig {
    pub const EWC_DEFAULT_LAMBDA: f64 = 100.0;
    pub const MAS_DEFAULT_LAMBDA: f64 = 1000.0;

    pub fn new(lambda: f64, accumulation: Accumulation) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(RegConfig { lambda, accumulation })
    }

    pub fn default_for(kind: ImportanceKind) -> Self {
        let lambda = match kind {
            ImportanceKind::Fisher => Self::EWC_DEFAULT_LAMBDA,
            ImportanceKind::Mas => Self::MAS_DEFAULT_LAMBDA,
        };
        RegConfig {
            lambda,
            accumulation: Accumulation::Sum,
        }
    }
}

/// Nonnegative per-parameter weights anchored at a parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    kind: ImportanceKind,
    weights: Vec<f64>,
    anchor: Vec<f64>,
    tasks_seen: u64,
}

impl ImportanceVector {
    pub fn new(kind: ImportanceKind, weights: Vec<f64>, anchor: Vec<f64>, tasks_seen: u64) -> Result<Self> {
        if weights.len() != anchor.len() {
            return Err(Error::InvalidArgument(format!(
                "importance has {} weights but anchor has {} entries",
                weights.len(),
                anchor.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "importance weight {i} is {} (must be finite and >= 0)",
                weights[i]
            )));
        }
        if tasks_seen == 0 {
            return Err(Error::InvalidArgument("tasks_seen must be at least 1".into()));
        }
        Ok(ImportanceVector {
            kind,
            weights,
            anchor,
            tasks_seen,
        })
    }

    pub fn kind(&self) -> ImportanceKind {
        self.kind
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn tasks_seen(&self) -> u64 {
        self.tasks_seen
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Samples are processed in blocks of this size; gradients inside a block
/// are computed in parallel and reduced in sample order.
const REDUCE_BLOCK: usize = 32;

/// Diagonal Fisher: mean over samples of the squared per-sample loss
/// gradient at `params`.
pub fn estimate_fisher<S, F>(params: &[f64], samples: &[S], loss_grad: F) -> Result<ImportanceVector>
where
    S: Sync,
    F: Fn(&[f64], &S) -> Result<Vec<f64>> + Sync,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot estimate Fisher information from no samples".into()));
    }
    let weights = mean_over(params.len(), samples, |s| loss_grad(params, s), |g| g * g)?;
    ImportanceVector::new(ImportanceKind::Fisher, weights, params.to_vec(), 1)
}

/// MAS importance. `output_grad` returns the scalar model output `f` and
/// `∇f`; the per-sample gradient of `f²` is `2f∇f` and the importance is
/// the mean of its absolute value.
pub fn estimate_mas_importance<S, F>(params: &[f64], samples: &[S], output_grad: F) -> Result<ImportanceVector>
where
    S: Sync,
    F: Fn(&[f64], &S) -> Result<(f64, Vec<f64>)> + Sync,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot estimate MAS importance from no samples".into()));
    }
    let per_sample = |s: &S| {
        let (out, mut g) = output_grad(params, s)?;
        for v in &mut g {
            *v *= 2.0 * out;
        }
        Ok(g)
    };
    let weights = mean_over(params.len(), samples, per_sample, f64::abs)?;
    ImportanceVector::new(ImportanceKind::Mas, weights, params.to_vec(), 1)
}

fn mean_over<S, G>(len: usize, samples: &[S], grad: G, map: impl Fn(f64) -> f64) -> Result<Vec<f64>>
where
    S: Sync,
    G: Fn(&S) -> Result<Vec<f64>> + Sync,
{
    let mut acc = vec![0.0; len];
    for block in samples.chunks(REDUCE_BLOCK) {
        let grads: Vec<Vec<f64>> = block.par_iter().map(&grad).collect::<Result<_>>()?;
        for g in grads {
            if g.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "per-sample gradient has {} entries, expected {len}",
                    g.len()
                )));
            }
            for (a, &v) in acc.iter_mut().zip(&g) {
                *a += map(v);
            }
        }
    }
    let n = samples.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// Consolidation penalty and its gradient.
///
/// Fisher: `(λ/2) Σ F_i (θ_i − θ*_i)²`. MAS: `λ Σ Ω_i (θ_i − θ*_i)²`.
pub fn penalty(params: &[f64], imp: &ImportanceVector, cfg: &RegConfig) -> Result<(f64, Vec<f64>)> {
    if params.len() != imp.len() {
        return Err(Error::InvalidArgument(format!(
            "parameters have {} entries, importance has {}",
            params.len(),
            imp.len()
        )));
    }
    let (value_scale, grad_scale) = match imp.kind {
        ImportanceKind::Fisher => (cfg.lambda / 2.0, cfg.lambda),
        ImportanceKind::Mas => (cfg.lambda, 2.0 * cfg.lambda),
    };
    let mut sum = 0.0;
    let grad = params
        .iter()
        .zip(&imp.anchor)
        .zip(&imp.weights)
        .map(|((&p, &a), &w)| {
            let d = p - a;
            sum += w * d * d;
            grad_scale * w * d
        })
        .collect();
    Ok((value_scale * sum, grad))
}

/// Folds the importance of a newly finished task into the running total.
pub fn accumulate(prev: &ImportanceVector, new: &ImportanceVector, cfg: &RegConfig) -> Result<ImportanceVector> {
    if prev.kind != new.kind {
        return Err(Error::InvalidArgument(format!(
            "cannot accumulate {} importance into {}",
            new.kind, prev.kind
        )));
    }
    if prev.len() != new.len() {
        return Err(Error::InvalidArgument("importance lengths differ".into()));
    }
    let seen = prev.tasks_seen as f64;
    let weights = prev
        .weights
        .iter()
        .zip(&new.weights)
        .map(|(&p, &n)| match cfg.accumulation {
            Accumulation::Sum => p + n,
            Accumulation::RunningMean => (p * seen + n) / (seen + 1.0),
        })
        .collect();
    ImportanceVector::new(prev.kind, weights, new.anchor.clone(), prev.tasks_seen + 1)
}
