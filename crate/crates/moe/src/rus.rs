use serde::{Deserialize, Serialize};
use timemoe_core::{aggregate_uniqueness, compute_trajectory, RusTrajectory, SequenceBundle, TemporalOptions};

use crate::config::ModelConfig;
use crate::error::{contract, Result};

/// Redundancy and synergy of one modality with `other`, indexed by lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRus {
    pub other: usize,
    pub redundancy: Vec<f64>,
    pub synergy: Vec<f64>,
}

/// Router-side view of the temporal RUS trajectories on lags `1..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RusContextInput {
    pub modalities: Vec<String>,
    pub lags: Vec<usize>,
    /// `pairs[m]`: one entry per other modality with a trajectory.
    pub pairs: Vec<Vec<PairRus>>,
    /// `uniqueness[m][lag index]`.
    pub uniqueness: Vec<Vec<f64>>,
    pub repeat: usize,
}

// Exact solvers return values like -1e-15 for true zeros.
const ZERO_SLACK: f64 = 1e-9;

fn clean(op: &'static str, what: &str, v: &mut [f64]) -> Result<()> {
    for x in v.iter_mut() {
        if !x.is_finite() || *x < -ZERO_SLACK {
            return contract(op, format!("{what} contains {x}"));
        }
        *x = x.max(0.0);
    }
    Ok(())
}

impl RusContextInput {
    pub fn new(
        modalities: Vec<String>,
        lags: Vec<usize>,
        mut pairs: Vec<Vec<PairRus>>,
        mut uniqueness: Vec<Vec<f64>>,
        repeat: usize,
    ) -> Result<Self> {
        const OP: &str = "rus_context_input";
        let m = modalities.len();
        let k = lags.len();
        if k == 0 || lags.iter().enumerate().any(|(i, &l)| l != i + 1) {
            return contract(OP, format!("lags must be 1..=K, got {lags:?}"));
        }
        if repeat == 0 {
            return contract(OP, "repeat must be positive");
        }
        if pairs.len() != m || uniqueness.len() != m {
            return contract(OP, format!("expected per-modality entries for {m} modalities"));
        }
        for (i, (ps, u)) in pairs.iter_mut().zip(uniqueness.iter_mut()).enumerate() {
            if u.len() != k {
                return contract(OP, format!("uniqueness of {} has {} lags, expected {k}", modalities[i], u.len()));
            }
            clean(OP, "uniqueness", u)?;
            for p in ps.iter_mut() {
                if p.other >= m || p.other == i {
                    return contract(OP, format!("pair ({i}, {}) is invalid", p.other));
                }
                if p.redundancy.len() != k || p.synergy.len() != k {
                    return contract(OP, format!("pair ({i}, {}) is not on the shared lag grid", p.other));
                }
                clean(OP, "redundancy", &mut p.redundancy)?;
                clean(OP, "synergy", &mut p.synergy)?;
            }
        }
        Ok(Self {
            modalities,
            lags,
            pairs,
            uniqueness,
            repeat,
        })
    }

    /// Builds the input from pairwise trajectories over `modalities`.
    ///
    /// Uniqueness per modality is the minimum over its pairs.
    pub fn from_trajectories(modalities: &[String], trajectories: &[RusTrajectory], repeat: usize) -> Result<Self> {
        const OP: &str = "rus_context_input";
        let Some(first) = trajectories.first() else {
            return contract(OP, "no trajectories");
        };
        let index = |name: &str| -> Result<usize> {
            match modalities.iter().position(|m| m == name) {
                Some(i) => Ok(i),
                None => contract(OP, format!("trajectory names unknown modality {name}")),
            }
        };
        let mut pairs: Vec<Vec<PairRus>> = vec![Vec::new(); modalities.len()];
        for tr in trajectories {
            if tr.lags != first.lags {
                return contract(OP, format!("trajectory {:?} uses a different lag grid", tr.pair));
            }
            let (a, b) = (index(&tr.pair[0])?, index(&tr.pair[1])?);
            if a == b || pairs[a].iter().any(|p| p.other == b) {
                return contract(OP, format!("duplicate or degenerate pair {:?}", tr.pair));
            }
            for (x, y) in [(a, b), (b, a)] {
                pairs[x].push(PairRus {
                    other: y,
                    redundancy: tr.redundancy.clone(),
                    synergy: tr.synergy.clone(),
                });
            }
        }
        pairs.iter_mut().for_each(|ps| ps.sort_by_key(|p| p.other));
        let agg = aggregate_uniqueness(trajectories)?;
        let uniqueness = modalities
            .iter()
            .map(|m| agg.get(m).cloned().unwrap_or_else(|| vec![0.0; first.lags.len()]))
            .collect();
        Self::new(modalities.to_vec(), first.lags.clone(), pairs, uniqueness, repeat)
    }

    /// Exact trajectories of every modality pair of `bundle` over lags
    /// `1..=max_lag`, and the router input built from them.
    pub fn exact(bundle: &SequenceBundle, max_lag: usize, opts: &TemporalOptions, repeat: usize) -> Result<(Self, Vec<RusTrajectory>)> {
        let m = bundle.modalities().len();
        let mut trajectories = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
        for a in 0..m {
            for b in a + 1..m {
                trajectories.push(compute_trajectory(bundle, (a, b), max_lag, opts)?);
            }
        }
        let names: Vec<String> = bundle.names().iter().map(|s| s.to_string()).collect();
        Ok((Self::from_trajectories(&names, &trajectories, repeat)?, trajectories))
    }

    pub fn max_lag(&self) -> usize {
        self.lags.len()
    }

    /// GRU sequence length after repetition.
    pub fn sequence_len(&self) -> usize {
        self.lags.len() * self.repeat
    }

    /// Lag index used by the token `t` steps before the target: `min(t, K) - 1`.
    pub fn lag_index(&self, t: usize) -> usize {
        t.clamp(1, self.max_lag()) - 1
    }

    fn pair(&self, m1: usize, m2: usize) -> Option<&PairRus> {
        self.pairs.get(m1)?.iter().find(|p| p.other == m2)
    }

    pub fn redundancy(&self, m1: usize, m2: usize, lag_index: usize) -> Option<f64> {
        self.pair(m1, m2).map(|p| p.redundancy[lag_index])
    }

    pub fn synergy(&self, m1: usize, m2: usize, lag_index: usize) -> Option<f64> {
        self.pair(m1, m2).map(|p| p.synergy[lag_index])
    }

    pub fn unique(&self, m: usize, lag_index: usize) -> f64 {
        self.uniqueness[m][lag_index]
    }

    /// Unordered pairs `(m1 < m2)` with a trajectory.
    pub fn pair_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (m1, ps) in self.pairs.iter().enumerate() {
            out.extend(ps.iter().filter(|p| p.other > m1).map(|p| (m1, p.other)));
        }
        out
    }
}

/// `q`-quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Gating thresholds of the three auxiliary terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub redundancy: f64,
    pub uniqueness: f64,
    pub synergy: f64,
}

impl Thresholds {
    /// Config overrides, otherwise the configured quantile of each
    /// component over all pairs (modalities for uniqueness) and lags.
    pub fn resolve(cfg: &ModelConfig, rus: &RusContextInput) -> Self {
        let (mut r, mut s) = (Vec::new(), Vec::new());
        for (m1, m2) in rus.pair_list() {
            let p = rus.pair(m1, m2).expect("listed pair");
            r.extend_from_slice(&p.redundancy);
            s.extend_from_slice(&p.synergy);
        }
        let u: Vec<f64> = rus.uniqueness.iter().flatten().copied().collect();
        let q = cfg.tau_quantile;
        Self {
            redundancy: cfg.tau_r.unwrap_or_else(|| quantile(&r, q)),
            uniqueness: cfg.tau_u.unwrap_or_else(|| quantile(&u, q)),
            synergy: cfg.tau_s.unwrap_or_else(|| quantile(&s, q)),
        }
    }
}
