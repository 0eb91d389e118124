//! Directed information and its per-lag RUS decomposition.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{build_lag_dataset, conditional_joint, ContextJoint, SequenceBundle};
use crate::error::{Error, Result};
use crate::info;
use crate::pid::{decompose_with, SolverOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalOptions {
    /// Length of the target history conditioned on.
    pub markov_order: usize,
    /// Contexts seen fewer times are pooled together.
    pub min_context_count: usize,
    /// Report per-step values instead of the raw sum over timesteps.
    pub normalized: bool,
    pub solver: SolverOptions,
}

impl Default for TemporalOptions {
    fn default() -> Self {
        Self {
            markov_order: 1,
            min_context_count: 5,
            normalized: true,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagDecomposition {
    pub lag: usize,
    pub redundancy: f64,
    pub unique1: f64,
    pub unique2: f64,
    pub synergy: f64,
    pub di: f64,
    /// Number of lag tuples, `n - lag`.
    pub samples: usize,
    pub contexts: usize,
}

fn contexts(bundle: &SequenceBundle, pair: (usize, usize), lag: usize, opts: &TemporalOptions) -> Result<(usize, Vec<ContextJoint>)> {
    let ds = build_lag_dataset(bundle, pair, lag, opts.markov_order)?;
    let n = ds.len();
    Ok((n, conditional_joint(&ds, opts.min_context_count)?))
}

fn scale(opts: &TemporalOptions, samples: usize) -> f64 {
    if opts.normalized {
        1.0
    } else {
        samples as f64
    }
}

/// `DI(lag)`: the context-weighted plug-in `I(Y_t; X1_{t-lag}, X2_{t-lag} | Y history)`,
/// per step or summed over the `n - lag` steps.
pub fn directed_information(bundle: &SequenceBundle, pair: (usize, usize), lag: usize, opts: &TemporalOptions) -> Result<f64> {
    let (n, groups) = contexts(bundle, pair, lag, opts)?;
    let per_step: f64 = groups.iter().map(|g| g.weight * info::mi_joint(&g.joint)).sum();
    Ok(per_step * scale(opts, n))
}

/// Per-context PID at one lag, averaged with the context weights.
pub fn decompose_lag(bundle: &SequenceBundle, pair: (usize, usize), lag: usize, opts: &TemporalOptions) -> Result<LagDecomposition> {
    let (n, groups) = contexts(bundle, pair, lag, opts)?;
    let mut acc = [0.0; 5];
    for g in &groups {
        let pid = decompose_with(&g.joint, &opts.solver)?;
        for (a, v) in acc.iter_mut().zip([pid.redundancy, pid.unique1, pid.unique2, pid.synergy, pid.total]) {
            *a += g.weight * v;
        }
    }
    let s = scale(opts, n);
    Ok(LagDecomposition {
        lag,
        redundancy: acc[0] * s,
        unique1: acc[1] * s,
        unique2: acc[2] * s,
        synergy: acc[3] * s,
        di: acc[4] * s,
        samples: n,
        contexts: groups.len(),
    })
}

/// Per-lag RUS of one modality pair over lags `1..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RusTrajectory {
    pub pair: [String; 2],
    pub lags: Vec<usize>,
    #[serde(rename = "R")]
    pub redundancy: Vec<f64>,
    #[serde(rename = "U1")]
    pub unique1: Vec<f64>,
    #[serde(rename = "U2")]
    pub unique2: Vec<f64>,
    #[serde(rename = "S")]
    pub synergy: Vec<f64>,
    #[serde(rename = "DI")]
    pub di: Vec<f64>,
    pub normalized: bool,
    pub k: usize,
    #[serde(default)]
    pub samples: Vec<usize>,
}

impl RusTrajectory {
    pub fn from_lags(pair: [String; 2], rows: &[LagDecomposition], normalized: bool, k: usize) -> Self {
        Self {
            pair,
            lags: rows.iter().map(|r| r.lag).collect(),
            redundancy: rows.iter().map(|r| r.redundancy).collect(),
            unique1: rows.iter().map(|r| r.unique1).collect(),
            unique2: rows.iter().map(|r| r.unique2).collect(),
            synergy: rows.iter().map(|r| r.synergy).collect(),
            di: rows.iter().map(|r| r.di).collect(),
            normalized,
            k,
            samples: rows.iter().map(|r| r.samples).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    /// Component series by name: `R`, `U1`, `U2`, `S` or `DI`.
    pub fn component(&self, name: &str) -> Option<&[f64]> {
        match name {
            "R" => Some(&self.redundancy),
            "U1" => Some(&self.unique1),
            "U2" => Some(&self.unique2),
            "S" => Some(&self.synergy),
            "DI" => Some(&self.di),
            _ => None,
        }
    }

    /// Lag at which a component series is largest (first on ties).
    pub fn argmax_lag(&self, name: &str) -> Option<usize> {
        let xs = self.component(name)?;
        let mut best = 0;
        for (i, &x) in xs.iter().enumerate() {
            if x > xs[best] {
                best = i;
            }
        }
        self.lags.get(best).copied()
    }

    /// Largest `|R + U1 + U2 + S - DI|` over lags.
    pub fn sum_identity_gap(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.redundancy[i] + self.unique1[i] + self.unique2[i] + self.synergy[i] - self.di[i]).abs())
            .fold(0.0, f64::max)
    }
}

/// Decomposes lags `1..=max_lag` concurrently.
pub fn compute_trajectory(bundle: &SequenceBundle, pair: (usize, usize), max_lag: usize, opts: &TemporalOptions) -> Result<RusTrajectory> {
    if max_lag == 0 {
        return Err(Error::Invalid("max lag must be at least 1".into()));
    }
    let n = bundle.len();
    if n < 2 || max_lag > n - 2 {
        return Err(Error::LagRange { lag: max_lag, len: n });
    }
    if pair.0 == pair.1 {
        return Err(Error::Invalid("a pair needs two distinct modalities".into()));
    }
    let rows = (1..=max_lag)
        .into_par_iter()
        .map(|lag| decompose_lag(bundle, pair, lag, opts))
        .collect::<Result<Vec<_>>>()?;
    let names = bundle.names();
    let (a, b) = (
        names.get(pair.0).ok_or_else(|| Error::Invalid(format!("modality index {} out of range", pair.0)))?,
        names.get(pair.1).ok_or_else(|| Error::Invalid(format!("modality index {} out of range", pair.1)))?,
    );
    Ok(RusTrajectory::from_lags(
        [a.to_string(), b.to_string()],
        &rows,
        opts.normalized,
        opts.markov_order,
    ))
}

/// Per-modality uniqueness `U_m(lag)`: the minimum of `m`'s uniqueness over
/// every pair trajectory that contains `m`, i.e. information `m` holds that
/// no single other modality duplicates.
pub fn aggregate_uniqueness(trajectories: &[RusTrajectory]) -> Result<BTreeMap<String, Vec<f64>>> {
    let Some(first) = trajectories.first() else {
        return Ok(BTreeMap::new());
    };
    let mut mins: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for tr in trajectories {
        if tr.lags != first.lags {
            return Err(Error::Invalid(format!(
                "trajectory {:?} uses a different lag grid",
                tr.pair
            )));
        }
        for (name, series) in [(&tr.pair[0], &tr.unique1), (&tr.pair[1], &tr.unique2)] {
            let entry = mins
                .entry(name.clone())
                .or_insert_with(|| vec![f64::INFINITY; series.len()]);
            entry.iter_mut().zip(series).for_each(|(a, b)| *a = a.min(*b));
        }
    }
    Ok(mins)
}
