//! Phase 3: per-lag RUS from trained discriminators and aligned couplings.

use serde::{Deserialize, Serialize};
use timemoe_core::RusTrajectory;

use crate::data::{LagSamples, MultiLagData};
use crate::error::{contract, Error, Result};
use crate::model::{coupling_targets, Branch, EstimatorModel, Stage};
use crate::sinkhorn::{sinkhorn_normalize, AlignmentTensor};

/// Components this far below zero are reported as estimation failures
/// before being clamped.
pub const CLAMP_TOLERANCE: f64 = 0.02;

/// Raw and derived quantities for one lag, in bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagEstimate {
    pub lag: usize,
    pub samples: usize,
    pub mi1: f64,
    pub mi2: f64,
    pub mi12: f64,
    /// Sample-weighted mean batch I_Q(X1,X2;Y) under the normalized alignment.
    pub mi_q: f64,
    pub sinkhorn_residual: f64,
    pub redundancy: f64,
    pub unique1: f64,
    pub unique2: f64,
    pub synergy: f64,
    /// Components that fell below `-CLAMP_TOLERANCE` before clamping.
    pub flagged: Vec<String>,
}

fn entropy_bits(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.log2()).sum()
}

/// `H(Y) - CE` on the given samples, both in bits.
fn plug_in_mi(probs: &[f64], y: &[usize], c: usize) -> f64 {
    let mut freq = vec![0.0; c];
    for &l in y {
        freq[l] += 1.0 / y.len() as f64;
    }
    let ce: f64 = y
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs[i * c + l].max(1e-300).log2())
        .sum::<f64>()
        / y.len() as f64;
    entropy_bits(&freq) - ce
}

/// I_Q(X1,X2;Y) in bits of the coupling `w_k * T[k]`.
fn coupling_mi(t: &AlignmentTensor, w: &[f64]) -> f64 {
    let (n, c) = (t.n(), t.classes());
    let mut q = Vec::with_capacity(n * n * c);
    for k in 0..c {
        q.extend(t.slice(k).iter().map(|v| v * w[k]));
    }
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    let mut qx = vec![0.0; n * n];
    let mut qy = vec![0.0; c];
    for k in 0..c {
        for (qxv, v) in qx.iter_mut().zip(&q[k * n * n..(k + 1) * n * n]) {
            *qxv += v;
            qy[k] += v;
        }
    }
    let mut mi = 0.0;
    for k in 0..c {
        for (ij, &v) in q[k * n * n..(k + 1) * n * n].iter().enumerate() {
            if v > 0.0 {
                mi += v * (v / (qx[ij] * qy[k])).log2();
            }
        }
    }
    mi
}

/// Alignment with each class slice shifted by its largest exponent; the
/// shift cancels in Sinkhorn normalization and keeps `exp` finite.
fn stable_alignment(q1: &[f64], q2: &[f64], n: usize, c: usize, d: usize) -> Result<AlignmentTensor> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut values = vec![0.0; n * n * c];
    for k in 0..c {
        let slice = &mut values[k * n * n..(k + 1) * n * n];
        for i in 0..n {
            let a = &q1[(i * c + k) * d..(i * c + k + 1) * d];
            for j in 0..n {
                let b = &q2[(j * c + k) * d..(j * c + k + 1) * d];
                slice[i * n + j] = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * scale;
            }
        }
        let mx = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        slice.iter_mut().for_each(|v| *v = (*v - mx).exp().max(1e-300));
    }
    AlignmentTensor::from_slices(n, c, values)
}

fn rows_of(s: &LagSamples, idx: &[usize], d1: usize, d2: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut x1 = Vec::with_capacity(idx.len() * d1);
    let mut x2 = Vec::with_capacity(idx.len() * d2);
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x1.extend_from_slice(&s.x1[i * d1..(i + 1) * d1]);
        x2.extend_from_slice(&s.x2[i * d2..(i + 1) * d2]);
        y.push(s.y[i]);
    }
    (x1, x2, y)
}

fn estimate_lag(model: &EstimatorModel, data: &MultiLagData, s: &LagSamples) -> Result<LagEstimate> {
    let cfg = model.config();
    let c = data.classes;
    let (train, held) = model.split_for(s);
    let idx = if cfg.heldout_eval && !held.is_empty() { held } else { train };
    if idx.len() < 2 {
        return contract("estimate_rus_multilag", format!("lag {}: fewer than 2 evaluation samples", s.lag));
    }
    let (x1, x2, y) = rows_of(s, &idx, data.d1, data.d2);
    let mi1 = plug_in_mi(&model.predict_proba(Branch::First, &x1, &x2, s.lag)?, &y, c);
    let mi2 = plug_in_mi(&model.predict_proba(Branch::Second, &x1, &x2, s.lag)?, &y, c);
    let mi12 = plug_in_mi(&model.predict_proba(Branch::Joint, &x1, &x2, s.lag)?, &y, c);

    let chunks = (idx.len() / cfg.eval_batch).max(1);
    let (mut mi_q, mut residual) = (0.0, 0.0f64);
    for b in 0..chunks {
        let (lo, hi) = (b * idx.len() / chunks, (b + 1) * idx.len() / chunks);
        let n = hi - lo;
        let (bx1, bx2, _) = rows_of(s, &idx[lo..hi], data.d1, data.d2);
        let [q1, q2, p1, p2] = model.embeddings(&bx1, &bx2, s.lag)?;
        let (rows, cols, w) = coupling_targets(&p1, &p2, n, c);
        let t = stable_alignment(&q1, &q2, n, c, cfg.d_q)?;
        let out = sinkhorn_normalize(&t, &rows, &cols, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol)?;
        if !out.converged {
            log::warn!("lag {}: sinkhorn stopped at residual {:e}", s.lag, out.residual);
        }
        residual = residual.max(out.residual);
        mi_q += coupling_mi(&out.tensor, &w) * n as f64 / idx.len() as f64;
    }

    // Negative plug-in MI is sampling noise. I_Q* of any feasible coupling
    // lies in [max(I1, I2), min(I12, I1 + I2)].
    let (i1, i2, i12) = (mi1.max(0.0), mi2.max(0.0), mi12.max(0.0));
    let lo = i1.max(i2);
    let hi = lo.max(i12.min(i1 + i2));
    let iq = mi_q.clamp(lo, hi);
    let raw = [
        ("R", i1 + i2 - iq),
        ("U1", iq - i2),
        ("U2", iq - i1),
        ("S", i12 - iq),
    ];
    let mut flagged = Vec::new();
    let mut comp = [0.0; 4];
    for (slot, (name, v)) in comp.iter_mut().zip(raw) {
        if v < -CLAMP_TOLERANCE {
            log::warn!("lag {}: {name} = {v:.4} bits is below the clamp tolerance", s.lag);
            flagged.push(name.to_string());
        }
        *slot = v.max(0.0);
    }
    Ok(LagEstimate {
        lag: s.lag,
        samples: idx.len(),
        mi1,
        mi2,
        mi12,
        mi_q,
        sinkhorn_residual: residual,
        redundancy: comp[0],
        unique1: comp[1],
        unique2: comp[2],
        synergy: comp[3],
        flagged,
    })
}

/// Per-lag estimates for `lags` (all lags in `data` when empty).
pub fn lag_estimates(model: &EstimatorModel, data: &MultiLagData, lags: &[usize]) -> Result<Vec<LagEstimate>> {
    match model.stage() {
        Stage::Untrained => return Err(Error::State("model is untrained".into())),
        Stage::Discriminators => return Err(Error::State("alignment has not been trained".into())),
        Stage::Aligned => {}
    }
    let wanted: Vec<usize> = if lags.is_empty() { data.lag_values() } else { lags.to_vec() };
    wanted
        .iter()
        .map(|&lag| {
            let s = data
                .lags
                .iter()
                .find(|s| s.lag == lag)
                .ok_or_else(|| Error::Contract {
                    op: "estimate_rus_multilag",
                    msg: format!("lag {lag} is not in the data"),
                })?;
            estimate_lag(model, data, s)
        })
        .collect()
}

/// Per-step RUS trajectory of the data's modality pair over `lags`.
///
/// `DI` is the sum of the clamped components.
pub fn estimate_rus_multilag(model: &EstimatorModel, data: &MultiLagData, lags: &[usize]) -> Result<RusTrajectory> {
    let rows = lag_estimates(model, data, lags)?;
    Ok(RusTrajectory {
        pair: data.pair.clone(),
        lags: rows.iter().map(|r| r.lag).collect(),
        redundancy: rows.iter().map(|r| r.redundancy).collect(),
        unique1: rows.iter().map(|r| r.unique1).collect(),
        unique2: rows.iter().map(|r| r.unique2).collect(),
        synergy: rows.iter().map(|r| r.synergy).collect(),
        di: rows
            .iter()
            .map(|r| r.redundancy + r.unique1 + r.unique2 + r.synergy)
            .collect(),
        normalized: true,
        k: 0,
        samples: rows.iter().map(|r| r.samples).collect(),
    })
}
