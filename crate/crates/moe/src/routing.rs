use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::rus::{RusContextInput, Thresholds};

/// Smoothing inside the logs of every JSD.
pub const JSD_EPS: f64 = 1e-12;

/// Routing of one token: softmax distribution and renormalized top-k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub probs: Vec<f64>,
    pub topk: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// The `k` largest entries, ties going to the lower index.
pub fn top_k_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn route(logits: &[f64], top_k: usize) -> RouteDecision {
    decide(softmax(logits), top_k)
}

pub(crate) fn decide(probs: Vec<f64>, top_k: usize) -> RouteDecision {
    let topk = top_k_indices(&probs, top_k);
    let z: f64 = topk.iter().map(|&e| probs[e]).sum();
    let weights = topk.iter().map(|&e| probs[e] / z).collect();
    RouteDecision { probs, topk, weights }
}

/// Mass on the synergy experts (the last `n_syn` indices).
pub fn p_syn(probs: &[f64], n_syn: usize) -> f64 {
    probs[probs.len() - n_syn..].iter().sum()
}

/// Jensen-Shannon divergence in bits with `JSD_EPS` smoothing.
pub fn jsd_bits(p: &[f64], q: &[f64]) -> f64 {
    timemoe_core::info::jsd(p, q, JSD_EPS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingEntry {
    pub probs: Vec<f64>,
    pub topk: Vec<usize>,
    pub weights: Vec<f64>,
    pub p_syn: f64,
}

/// Routing of every token of a set of samples at one MoE layer.
///
/// Entry `(m, sample, t)` is stored at `(m * samples + sample) * window + t - 1`,
/// where `t` counts steps back from the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub modalities: Vec<String>,
    pub samples: usize,
    pub window: usize,
    pub n_expert: usize,
    pub n_syn: usize,
    pub entries: Vec<RoutingEntry>,
}

/// One row of the routing dump: the sample-averaged distribution of a
/// modality's tokens `t` steps before the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDumpRow {
    pub modality: String,
    pub t: usize,
    pub probs: Vec<f64>,
    pub topk: Vec<usize>,
    pub p_syn: f64,
}

/// Sum of each auxiliary term, already weighted by its lambda.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxLosses {
    pub redundancy: f64,
    pub uniqueness: f64,
    pub synergy: f64,
}

impl AuxLosses {
    pub fn total(&self) -> f64 {
        self.redundancy + self.uniqueness + self.synergy
    }
}

impl RoutingRecord {
    pub fn empty(modalities: Vec<String>, window: usize, n_expert: usize, n_syn: usize) -> Self {
        Self {
            modalities,
            samples: 0,
            window,
            n_expert,
            n_syn,
            entries: Vec::new(),
        }
    }

    fn slot(&self, m: usize, sample: usize, t: usize) -> usize {
        (m * self.samples + sample) * self.window + t - 1
    }

    pub fn get(&self, m: usize, sample: usize, t: usize) -> &RoutingEntry {
        &self.entries[self.slot(m, sample, t)]
    }

    /// Appends the samples of `other` after this record's samples.
    pub fn extend(&mut self, other: RoutingRecord) {
        let m = self.modalities.len();
        let (a, b) = (self.samples, other.samples);
        let mut entries = Vec::with_capacity((a + b) * m * self.window);
        let mut mine = std::mem::take(&mut self.entries).into_iter();
        let mut theirs = other.entries.into_iter();
        for _ in 0..m {
            entries.extend(mine.by_ref().take(a * self.window));
            entries.extend(theirs.by_ref().take(b * self.window));
        }
        self.entries = entries;
        self.samples = a + b;
    }

    /// Checks normalization of every distribution and top-k weight set.
    pub fn validate(&self) -> Result<()> {
        let want = self.modalities.len() * self.samples * self.window;
        if self.entries.len() != want {
            return contract("routing_record", format!("{} entries, expected {want}", self.entries.len()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            let s: f64 = e.probs.iter().sum();
            let w: f64 = e.weights.iter().sum();
            if e.probs.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-9 || (w - 1.0).abs() > 1e-9 {
                return contract("routing_record", format!("entry {i} is not normalized"));
            }
        }
        Ok(())
    }

    fn pair_mean(&self, m1: usize, m2: usize, f: impl Fn(&RoutingEntry, &RoutingEntry) -> f64) -> f64 {
        let n = self.samples * self.window;
        if n == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for s in 0..self.samples {
            for t in 1..=self.window {
                total += f(self.get(m1, s, t), self.get(m2, s, t));
            }
        }
        total / n as f64
    }

    /// Mean JSD between the two modalities' tokens at matching steps.
    pub fn pair_jsd(&self, m1: usize, m2: usize) -> f64 {
        self.pair_mean(m1, m2, |a, b| jsd_bits(&a.probs, &b.probs))
    }

    /// Mean `(P_syn(m1) + P_syn(m2)) / 2` over matching steps.
    pub fn pair_p_syn(&self, m1: usize, m2: usize) -> f64 {
        self.pair_mean(m1, m2, |a, b| 0.5 * (a.p_syn + b.p_syn))
    }

    /// `[modality][expert]` share of top-k selections.
    pub fn utilization(&self) -> Vec<Vec<f64>> {
        let per = self.samples * self.window;
        self.entries
            .chunks(per.max(1))
            .take(self.modalities.len())
            .map(|chunk| {
                let mut counts = vec![0.0; self.n_expert];
                let mut total = 0.0;
                for e in chunk {
                    for &x in &e.topk {
                        counts[x] += 1.0;
                        total += 1.0;
                    }
                }
                counts.iter().map(|c| if total > 0.0 { c / total } else { 0.0 }).collect()
            })
            .collect()
    }

    /// Per `(modality, t)` mean distribution with its top-k and P_syn.
    pub fn dump(&self, top_k: usize) -> Vec<RoutingDumpRow> {
        let mut rows = Vec::with_capacity(self.modalities.len() * self.window);
        for (m, name) in self.modalities.iter().enumerate() {
            for t in 1..=self.window {
                let mut probs = vec![0.0; self.n_expert];
                for s in 0..self.samples {
                    for (a, b) in probs.iter_mut().zip(&self.get(m, s, t).probs) {
                        *a += b / self.samples as f64;
                    }
                }
                rows.push(RoutingDumpRow {
                    modality: name.clone(),
                    t,
                    topk: top_k_indices(&probs, top_k),
                    p_syn: p_syn(&probs, self.n_syn),
                    probs,
                });
            }
        }
        rows
    }

    /// Mean pairwise JSD and pair P_syn keyed `"a|b"`.
    pub fn pair_summaries(&self) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
        let (mut jsd, mut syn) = (BTreeMap::new(), BTreeMap::new());
        let m = self.modalities.len();
        for a in 0..m {
            for b in a + 1..m {
                let key = format!("{}|{}", self.modalities[a], self.modalities[b]);
                jsd.insert(key.clone(), self.pair_jsd(a, b));
                syn.insert(key, self.pair_p_syn(a, b));
            }
        }
        (jsd, syn)
    }
}

/// Which token pairs each auxiliary term covers.
///
/// Each list holds `(m1, m2, sample, t)` with `m1 < m2`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Triggered {
    pub redundancy: Vec<(usize, usize, usize, usize)>,
    pub uniqueness: Vec<(usize, usize, usize, usize)>,
    pub synergy: Vec<(usize, usize, usize, usize)>,
}

/// Gating of the three terms for `samples` windows of length `window`.
pub fn triggered_pairs(rus: &RusContextInput, th: &Thresholds, samples: usize, window: usize) -> Triggered {
    let mut out = Triggered::default();
    for (m1, m2) in rus.pair_list() {
        for t in 1..=window {
            let l = rus.lag_index(t);
            let r = rus.redundancy(m1, m2, l).unwrap_or(0.0) > th.redundancy;
            let u = rus.unique(m1, l) > th.uniqueness && rus.unique(m2, l) > th.uniqueness;
            let s = rus.synergy(m1, m2, l).unwrap_or(0.0) > th.synergy;
            for sample in 0..samples {
                if r {
                    out.redundancy.push((m1, m2, sample, t));
                }
                if u {
                    out.uniqueness.push((m1, m2, sample, t));
                }
                if s {
                    out.synergy.push((m1, m2, sample, t));
                }
            }
        }
    }
    out
}

/// Redundancy, uniqueness and synergy losses of a routing record.
///
/// Empty trigger sets contribute 0.
pub fn auxiliary_losses(record: &RoutingRecord, rus: &RusContextInput, th: &Thresholds, cfg: &ModelConfig) -> AuxLosses {
    let trig = triggered_pairs(rus, th, record.samples, record.window);
    let mean = |set: &[(usize, usize, usize, usize)], f: &dyn Fn(&RoutingEntry, &RoutingEntry) -> f64| {
        if set.is_empty() {
            return 0.0;
        }
        set.iter()
            .map(|&(a, b, s, t)| f(record.get(a, s, t), record.get(b, s, t)))
            .sum::<f64>()
            / set.len() as f64
    };
    let jsd = |a: &RoutingEntry, b: &RoutingEntry| jsd_bits(&a.probs, &b.probs);
    AuxLosses {
        redundancy: cfg.lambda_r * mean(&trig.redundancy, &jsd),
        uniqueness: 0.0 - cfg.lambda_u * mean(&trig.uniqueness, &jsd),
        synergy: cfg.lambda_s * mean(&trig.synergy, &|a, b| 1.0 - 0.5 * (a.p_syn + b.p_syn)),
    }
}
