//! Lag-conditioned discriminators and alignment q-heads.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use timemoe_autodiff::nn::Linear;
use timemoe_autodiff::{read_checkpoint, write_checkpoint, Adam, Init, Mode, Optimizer, ParamId, ParamStore, Tape, Tensor, Var};

use crate::data::{split, LagSamples, MultiLagData};
use crate::error::{contract, Error, Result};
use crate::sinkhorn::{alignment_from_embeddings, AlignmentTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Encoder width (two relu layers).
    pub hidden: usize,
    pub d_lag: usize,
    /// Width of the per-class q-embeddings.
    pub d_q: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Alignment steps per lag.
    pub align_steps: usize,
    pub align_batch: usize,
    pub align_lr: f64,
    /// Sinkhorn iterations unrolled on the tape while training the q-heads.
    pub sinkhorn_unroll: usize,
    /// Weight of the mean squared q-embedding added to the alignment loss;
    /// keeps exponents bounded for classes the batch barely contains.
    pub q_penalty: f64,
    pub eval_batch: usize,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub holdout: f64,
    /// Evaluate MI terms on the held-out split instead of the training split.
    pub heldout_eval: bool,
    /// Lag sampling weights, uniform when absent.
    pub lag_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            d_lag: 16,
            d_q: 16,
            epochs: 30,
            batch_size: 256,
            lr: 2e-3,
            align_steps: 150,
            align_batch: 64,
            align_lr: 1e-2,
            sinkhorn_unroll: 20,
            q_penalty: 1e-4,
            eval_batch: 128,
            sinkhorn_tol: 1e-6,
            sinkhorn_max_iter: 2000,
            holdout: 0.2,
            heldout_eval: true,
            lag_weights: None,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("d_lag", self.d_lag),
            ("d_q", self.d_q),
            ("batch_size", self.batch_size),
            ("eval_batch", self.eval_batch),
            ("sinkhorn_unroll", self.sinkhorn_unroll),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name}: must be positive")));
        }
        if self.align_batch < 2 {
            return Err(Error::Config("align_batch: must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.align_lr > 0.0) {
            return Err(Error::Config("lr: learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout: {} is outside [0, 1)", self.holdout)));
        }
        if !(self.q_penalty >= 0.0) {
            return Err(Error::Config("q_penalty: must be nonnegative".into()));
        }
        if !(self.sinkhorn_tol > 0.0) {
            return Err(Error::Config("sinkhorn_tol: must be positive".into()));
        }
        if let Some(w) = &self.lag_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("lag_weights: must be nonnegative with positive sum".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Untrained,
    Discriminators,
    Aligned,
}

/// Which discriminator to query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    First,
    Second,
    Joint,
}

/// Per-epoch mean losses in bits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub discriminator: Vec<f64>,
    /// Mean batch I_Q(X1,X2;Y) per pass over the lags while fitting the q-heads.
    pub alignment: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Tower {
    enc1: Linear,
    enc2: Linear,
    fuse: Linear,
    head: Linear,
}

impl Tower {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, cfg: &EstimatorConfig, classes: usize) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            enc1: Linear::new(store, &format!("g{name}.l1"), d_in, h, true)?,
            enc2: Linear::new(store, &format!("g{name}.l2"), h, h, true)?,
            fuse: Linear::new(store, &format!("phi{name}"), h + cfg.d_lag, h, true)?,
            head: Linear::new(store, &format!("d{name}"), h, classes, true)?,
        })
    }

    /// Returns (fused features, logits).
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, lag_rows: Var) -> Result<(Var, Var)> {
        let h = self.enc1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.enc2.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let z = tape.concat(&[h, lag_rows], 1)?;
        let z = self.fuse.forward(tape, store, z)?;
        let f = tape.relu(z)?;
        let logits = self.head.forward(tape, store, f)?;
        Ok((f, logits))
    }
}

#[derive(Clone, Debug)]
struct QHead {
    l1: Linear,
    l2: Linear,
}

impl QHead {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, f)?;
        let h = tape.relu(h)?;
        Ok(self.l2.forward(tape, store, h)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    config: EstimatorConfig,
    lags: Vec<usize>,
    d1: usize,
    d2: usize,
    classes: usize,
    stage: Stage,
    history: TrainingHistory,
}

/// Shared encoders, lag embeddings, three discriminators and two q-heads.
#[derive(Clone, Debug)]
pub struct EstimatorModel {
    config: EstimatorConfig,
    store: ParamStore,
    lags: Vec<usize>,
    d1: usize,
    d2: usize,
    classes: usize,
    towers: [Tower; 3],
    lag_embed: ParamId,
    qheads: [QHead; 2],
    stage: Stage,
    history: TrainingHistory,
}

struct Batch {
    x1: Tensor,
    x2: Tensor,
    y: Vec<usize>,
    lag_idx: Vec<usize>,
}

fn gather(s: &LagSamples, idx: &[usize], d1: usize, d2: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
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

fn step_seed(seed: u64, phase: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (phase << 56) ^ step
}

impl EstimatorModel {
    pub fn new(d1: usize, d2: usize, classes: usize, lags: &[usize], config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        if lags.is_empty() {
            return contract("estimator", "at least one lag is required");
        }
        if classes < 2 {
            return contract("estimator", format!("need at least 2 classes, got {classes}"));
        }
        if let Some(w) = &config.lag_weights {
            if w.len() != lags.len() {
                return Err(Error::Config(format!(
                    "lag_weights: {} weights for {} lags",
                    w.len(),
                    lags.len()
                )));
            }
        }
        let mut store = ParamStore::new(config.seed);
        let towers = [
            Tower::new(&mut store, "1", d1, &config, classes)?,
            Tower::new(&mut store, "2", d2, &config, classes)?,
            Tower::new(&mut store, "12", d1 + d2, &config, classes)?,
        ];
        let lag_embed = store.add("lag_embed", &[lags.len(), config.d_lag], Init::Uniform(0.05))?;
        let qhead = |store: &mut ParamStore, name: &str| -> Result<QHead> {
            Ok(QHead {
                l1: Linear::new(store, &format!("{name}.l1"), config.hidden, config.hidden, true)?,
                l2: Linear::new(store, &format!("{name}.l2"), config.hidden, classes * config.d_q, true)?,
            })
        };
        let qheads = [qhead(&mut store, "nn1")?, qhead(&mut store, "nn2")?];
        Ok(Self {
            config,
            store,
            lags: lags.to_vec(),
            d1,
            d2,
            classes,
            towers,
            lag_embed,
            qheads,
            stage: Stage::Untrained,
            history: TrainingHistory::default(),
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn history(&self) -> &TrainingHistory {
        &self.history
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn lag_index(&self, lag: usize) -> Result<usize> {
        self.lags
            .iter()
            .position(|&l| l == lag)
            .ok_or_else(|| Error::Contract {
                op: "estimator",
                msg: format!("lag {lag} has no embedding (model lags {:?})", self.lags),
            })
    }

    fn check_data(&self, data: &MultiLagData) -> Result<()> {
        if (data.d1, data.d2, data.classes) != (self.d1, self.d2, self.classes) {
            return contract(
                "estimator",
                format!(
                    "data shape (d1={}, d2={}, C={}) does not match model (d1={}, d2={}, C={})",
                    data.d1, data.d2, data.classes, self.d1, self.d2, self.classes
                ),
            );
        }
        for s in &data.lags {
            self.lag_index(s.lag)?;
        }
        Ok(())
    }

    /// Train / held-out split for one lag's samples; fixed by the model seed.
    pub(crate) fn split_for(&self, s: &LagSamples) -> (Vec<usize>, Vec<usize>) {
        split(s.len(), self.config.holdout, self.config.seed ^ (s.lag as u64).wrapping_mul(0x517C_C1B7_2722_0A95))
    }

    /// Normalized sampling weight of each lag in `data`.
    fn lag_weights(&self, data: &MultiLagData) -> Vec<f64> {
        let w: Vec<f64> = match &self.config.lag_weights {
            Some(w) => data
                .lags
                .iter()
                .map(|s| w[self.lag_index(s.lag).expect("checked")])
                .collect(),
            None => vec![1.0; data.lags.len()],
        };
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    fn lag_sampler(&self, data: &MultiLagData) -> Result<WeightedIndex<f64>> {
        WeightedIndex::new(self.lag_weights(data)).map_err(|e| Error::Config(format!("lag_weights: {e}")))
    }

    /// Lag-weighted summed cross-entropy (bits) of the three discriminators
    /// over the training split.
    fn training_loss(&self, data: &MultiLagData, splits: &[Vec<usize>], weights: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for ((s, idx), w) in data.lags.iter().zip(splits).zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let (x1, x2, y) = gather(s, idx, self.d1, self.d2);
            let mut ce = 0.0;
            for branch in [Branch::First, Branch::Second, Branch::Joint] {
                let p = self.predict_proba(branch, &x1, &x2, s.lag)?;
                ce -= y
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| p[i * self.classes + l].max(1e-300).log2())
                    .sum::<f64>();
            }
            total += w * ce / y.len() as f64;
        }
        Ok(total)
    }

    fn inputs(&self, tape: &mut Tape, batch: &Batch) -> (Var, Var, Var, Var) {
        let x1 = tape.constant(batch.x1.clone());
        let x2 = tape.constant(batch.x2.clone());
        let x12 = tape.concat(&[x1, x2], 1).expect("same rows");
        let table = tape.param(&self.store, self.lag_embed);
        let rows = tape.index_select(table, &batch.lag_idx).expect("valid lag index");
        (x1, x2, x12, rows)
    }

    /// Phase 1: minimizes the summed cross-entropy of the three discriminators.
    pub fn train_discriminators(&mut self, data: &MultiLagData) -> Result<&[f64]> {
        self.check_data(data)?;
        let cfg = self.config.clone();
        let splits: Vec<Vec<usize>> = data.lags.iter().map(|s| self.split_for(s).0).collect();
        if let Some(s) = data.lags.iter().zip(&splits).find(|(_, t)| t.is_empty()) {
            return contract("train_discriminators", format!("lag {} has no training samples", s.0.lag));
        }
        let lag_idx: Vec<usize> = data.lags.iter().map(|s| self.lag_index(s.lag).expect("checked")).collect();
        let sampler = self.lag_sampler(data)?;
        let weights = self.lag_weights(data);
        self.store.set_trainable_prefix("", true);
        self.store.set_trainable_prefix("nn", false);
        let mut opt = Adam::new(cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, 1, 0));
        let total: usize = splits.iter().map(Vec::len).sum();
        let steps = total.div_ceil(cfg.batch_size).max(1);
        self.history.discriminator.clear();
        for epoch in 0..cfg.epochs {
            let mut acc = 0.0;
            // Cosine decay to a tenth of the base rate.
            let progress = epoch as f64 / cfg.epochs.max(1) as f64;
            opt.lr = cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
            for step in 0..steps {
                let b = cfg.batch_size;
                let mut x1 = Vec::with_capacity(b * self.d1);
                let mut x2 = Vec::with_capacity(b * self.d2);
                let mut y = Vec::with_capacity(b);
                let mut li = Vec::with_capacity(b);
                for _ in 0..b {
                    let l = sampler.sample(&mut rng);
                    let i = splits[l][rng.gen_range(0..splits[l].len())];
                    let s = &data.lags[l];
                    x1.extend_from_slice(&s.x1[i * self.d1..(i + 1) * self.d1]);
                    x2.extend_from_slice(&s.x2[i * self.d2..(i + 1) * self.d2]);
                    y.push(s.y[i]);
                    li.push(lag_idx[l]);
                }
                let batch = Batch {
                    x1: Tensor::new(vec![b, self.d1], x1)?,
                    x2: Tensor::new(vec![b, self.d2], x2)?,
                    y,
                    lag_idx: li,
                };
                let mut tape = Tape::new(Mode::Train, step_seed(cfg.seed, 1, (epoch * steps + step) as u64));
                tape.set_check_finite(false);
                let (x1, x2, x12, rows) = self.inputs(&mut tape, &batch);
                let mut loss = None;
                for (tower, x) in self.towers.iter().zip([x1, x2, x12]) {
                    let (_, logits) = tower.forward(&mut tape, &self.store, x, rows)?;
                    let ce = tape.cross_entropy(logits, &batch.y)?;
                    loss = Some(match loss {
                        None => ce,
                        Some(l) => tape.add(l, ce)?,
                    });
                }
                let loss = loss.expect("three towers");
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Training { epoch, loss: value });
                }
                acc += value;
                let grads = tape.backward(loss)?;
                self.store.zero_grad();
                tape.accumulate(&grads, &mut self.store);
                opt.step(&mut self.store);
            }
            let full = self.training_loss(data, &splits, &weights)?;
            if !full.is_finite() {
                return Err(Error::Training { epoch, loss: full });
            }
            log::debug!(
                "discriminators epoch {epoch}: batch mean {:.5}, training split {full:.5} bits",
                acc / steps as f64 / std::f64::consts::LN_2
            );
            self.history.discriminator.push(full);
        }
        self.stage = Stage::Discriminators;
        Ok(&self.history.discriminator)
    }

    /// Phase 2: fits the q-heads so the Sinkhorn-coupled batch distribution
    /// has minimal I_Q(X1,X2;Y) under the discriminator-implied marginals.
    pub fn train_alignment(&mut self, data: &MultiLagData) -> Result<&[f64]> {
        if self.stage == Stage::Untrained {
            return Err(Error::State("alignment needs trained discriminators".into()));
        }
        self.check_data(data)?;
        let cfg = self.config.clone();
        let splits: Vec<Vec<usize>> = data.lags.iter().map(|s| self.split_for(s).0).collect();
        if let Some(s) = data.lags.iter().zip(&splits).find(|(_, t)| t.len() < 2) {
            return contract("train_alignment", format!("lag {} has fewer than 2 training samples", s.0.lag));
        }
        let sampler = self.lag_sampler(data)?;
        self.store.set_trainable_prefix("", false);
        self.store.set_trainable_prefix("nn", true);
        let mut opt = Adam::new(cfg.align_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, 2, 0));
        let per_pass = data.lags.len();
        let total = cfg.align_steps * per_pass;
        self.history.alignment.clear();
        let mut acc = 0.0;
        for step in 0..total {
            let l = sampler.sample(&mut rng);
            let s = &data.lags[l];
            let n = cfg.align_batch.min(splits[l].len());
            let idx: Vec<usize> = splits[l].choose_multiple(&mut rng, n).copied().collect();
            let mut tape = Tape::new(Mode::Train, step_seed(cfg.seed, 2, step as u64));
            tape.set_check_finite(false);
            let (iq, loss) = self.batch_iq(&mut tape, s, &idx)?;
            let value = tape.value(iq).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch: step / per_pass,
                    loss: value,
                });
            }
            acc += value;
            let grads = tape.backward(loss)?;
            self.store.zero_grad();
            tape.accumulate(&grads, &mut self.store);
            opt.step(&mut self.store);
            if (step + 1) % per_pass == 0 || step + 1 == total {
                let count = (step % per_pass) + 1;
                self.history.alignment.push(acc / count as f64 / std::f64::consts::LN_2);
                acc = 0.0;
            }
        }
        self.store.set_trainable_prefix("", true);
        self.stage = Stage::Aligned;
        Ok(&self.history.alignment)
    }

    /// Batch I_Q in nats with the Sinkhorn iterations recorded on `tape`,
    /// and the penalized training loss.
    fn batch_iq(&self, tape: &mut Tape, s: &LagSamples, idx: &[usize]) -> Result<(Var, Var)> {
        let (n, c, d) = (idx.len(), self.classes, self.config.d_q);
        let (x1, x2, _) = gather(s, idx, self.d1, self.d2);
        let batch = Batch {
            x1: Tensor::new(vec![n, self.d1], x1)?,
            x2: Tensor::new(vec![n, self.d2], x2)?,
            y: Vec::new(),
            lag_idx: vec![self.lag_index(s.lag)?; n],
        };
        let (x1, x2, _, rows) = self.inputs(tape, &batch);
        let (f1, l1) = self.towers[0].forward(tape, &self.store, x1, rows)?;
        let (f2, l2) = self.towers[1].forward(tape, &self.store, x2, rows)?;
        let p1 = softmax_rows(tape.value(l1).data(), c);
        let p2 = softmax_rows(tape.value(l2).data(), c);
        let (r, cm, w) = coupling_targets(&p1, &p2, n, c);
        let r = tape.constant(Tensor::new(vec![c, n], r.concat())?);
        let cm = tape.constant(Tensor::new(vec![c, n], cm.concat())?);
        let wv = tape.constant(Tensor::new(vec![c], w.clone())?);

        let q1 = self.qheads[0].forward(tape, &self.store, f1)?;
        let q2 = self.qheads[1].forward(tape, &self.store, f2)?;
        let mut slices = Vec::with_capacity(c);
        for k in 0..c {
            let a = tape.slice(q1, 1, k * d, d)?;
            let b = tape.slice(q2, 1, k * d, d)?;
            let bt = tape.transpose(b)?;
            slices.push(tape.matmul(a, bt)?);
        }
        let scores = tape.concat(&slices, 0)?;
        let scores = tape.reshape(scores, &[c, n, n])?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        // Per-class shift; Sinkhorn scaling cancels it.
        let shift: Vec<f64> = tape
            .value(scores)
            .data()
            .chunks(n * n)
            .flat_map(|s| {
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                std::iter::repeat(-mx).take(n * n)
            })
            .collect();
        let shift = tape.constant(Tensor::new(vec![c, n, n], shift)?);
        let scores = tape.add(scores, shift)?;
        let a = tape.exp(scores)?;
        let mut a = tape.add_scalar(a, 1e-300)?;
        for _ in 0..self.config.sinkhorn_unroll {
            let rs = tape.sum_axis(a, 2)?;
            let f = tape.div(r, rs)?;
            a = tape.scale_rows(a, f)?;
            let at = tape.transpose(a)?;
            let cs = tape.sum_axis(at, 2)?;
            let g = tape.div(cm, cs)?;
            let at = tape.scale_rows(at, g)?;
            a = tape.transpose(at)?;
        }
        let flat = tape.reshape(a, &[c, n * n])?;
        let q = tape.scale_rows(flat, wv)?;
        let lq = tape.log(q)?;
        let t1 = tape.mul(q, lq)?;
        let t1 = tape.sum(t1)?;
        let qx = tape.sum_axis(q, 0)?;
        let lqx = tape.log(qx)?;
        let t2 = tape.mul(qx, lqx)?;
        let t2 = tape.sum(t2)?;
        let hw: f64 = w.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
        let i = tape.sub(t1, t2)?;
        let iq = tape.add_scalar(i, hw)?;
        let sq1 = tape.mul(q1, q1)?;
        let sq2 = tape.mul(q2, q2)?;
        let sq = tape.concat(&[sq1, sq2], 1)?;
        let reg = tape.mean(sq)?;
        let reg = tape.scale(reg, self.config.q_penalty)?;
        let loss = tape.add(iq, reg)?;
        Ok((iq, loss))
    }

    /// Softmax outputs `[N][C]` of one discriminator at `lag`.
    pub fn predict_proba(&self, branch: Branch, x1: &[f64], x2: &[f64], lag: usize) -> Result<Vec<f64>> {
        let n = self.rows(x1, x2)?;
        let li = self.lag_index(lag)?;
        let mut out = Vec::with_capacity(n * self.classes);
        for start in (0..n).step_by(self.config.eval_batch.max(1) * 4) {
            let m = (n - start).min(self.config.eval_batch * 4);
            let batch = self.eval_batch(x1, x2, start, m, li)?;
            let mut tape = Tape::new(Mode::Eval, 0);
            let (v1, v2, v12, rows) = self.inputs(&mut tape, &batch);
            let (tower, x) = match branch {
                Branch::First => (&self.towers[0], v1),
                Branch::Second => (&self.towers[1], v2),
                Branch::Joint => (&self.towers[2], v12),
            };
            let (_, logits) = tower.forward(&mut tape, &self.store, x, rows)?;
            out.extend(softmax_rows(tape.value(logits).data(), self.classes));
        }
        Ok(out)
    }

    /// Per-class q-embeddings `[N][C][d]` for both sources plus the first and
    /// second discriminator posteriors `[N][C]`.
    pub(crate) fn embeddings(&self, x1: &[f64], x2: &[f64], lag: usize) -> Result<[Vec<f64>; 4]> {
        let n = self.rows(x1, x2)?;
        let li = self.lag_index(lag)?;
        let batch = self.eval_batch(x1, x2, 0, n, li)?;
        let mut tape = Tape::new(Mode::Eval, 0);
        let (v1, v2, _, rows) = self.inputs(&mut tape, &batch);
        let (f1, l1) = self.towers[0].forward(&mut tape, &self.store, v1, rows)?;
        let (f2, l2) = self.towers[1].forward(&mut tape, &self.store, v2, rows)?;
        let q1 = self.qheads[0].forward(&mut tape, &self.store, f1)?;
        let q2 = self.qheads[1].forward(&mut tape, &self.store, f2)?;
        Ok([
            tape.value(q1).data().to_vec(),
            tape.value(q2).data().to_vec(),
            softmax_rows(tape.value(l1).data(), self.classes),
            softmax_rows(tape.value(l2).data(), self.classes),
        ])
    }

    /// Alignment tensor of a batch at `lag`.
    pub fn build_alignment(&self, x1: &[f64], x2: &[f64], lag: usize) -> Result<AlignmentTensor> {
        let n = self.rows(x1, x2)?;
        if n < 2 {
            return contract("build_alignment", format!("batch size {n} < 2"));
        }
        let [q1, q2, _, _] = self.embeddings(x1, x2, lag)?;
        alignment_from_embeddings(&q1, &q2, n, self.classes, self.config.d_q)
    }

    fn rows(&self, x1: &[f64], x2: &[f64]) -> Result<usize> {
        let n = x1.len() / self.d1;
        if x1.len() != n * self.d1 || x2.len() != n * self.d2 {
            return contract(
                "estimator",
                format!("feature lengths {} and {} are not whole rows of width {} and {}", x1.len(), x2.len(), self.d1, self.d2),
            );
        }
        if x2.len() / self.d2 != n || n == 0 {
            return contract("estimator", "sources must have the same positive number of rows");
        }
        Ok(n)
    }

    fn eval_batch(&self, x1: &[f64], x2: &[f64], start: usize, m: usize, li: usize) -> Result<Batch> {
        Ok(Batch {
            x1: Tensor::new(vec![m, self.d1], x1[start * self.d1..(start + m) * self.d1].to_vec())?,
            x2: Tensor::new(vec![m, self.d2], x2[start * self.d2..(start + m) * self.d2].to_vec())?,
            y: Vec::new(),
            lag_idx: vec![li; m],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            lags: self.lags.clone(),
            d1: self.d1,
            d2: self.d2,
            classes: self.classes,
            stage: self.stage,
            history: self.history.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::State(e.to_string()))?;
        Ok(write_checkpoint(path, meta, &self.store)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, entries) = read_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(header.meta).map_err(|e| Error::State(format!("checkpoint metadata: {e}")))?;
        let mut model = Self::new(meta.d1, meta.d2, meta.classes, &meta.lags, meta.config)?;
        model.store.load(&entries)?;
        model.stage = meta.stage;
        model.history = meta.history;
        Ok(model)
    }
}

pub(crate) fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

/// Per-class row and column marginals and class weights of the batch
/// coupling implied by discriminator posteriors `[N][C]`.
pub(crate) fn coupling_targets(p1: &[f64], p2: &[f64], n: usize, c: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    const FLOOR: f64 = 1e-12;
    let norm = |p: &[f64], k: usize| -> Vec<f64> {
        let col: Vec<f64> = (0..n).map(|i| p[i * c + k].max(FLOOR)).collect();
        let s: f64 = col.iter().sum();
        col.iter().map(|v| v / s).collect()
    };
    let rows = (0..c).map(|k| norm(p1, k)).collect();
    let cols = (0..c).map(|k| norm(p2, k)).collect();
    let mut w: Vec<f64> = (0..c)
        .map(|k| {
            let a: f64 = (0..n).map(|i| p1[i * c + k]).sum::<f64>() / n as f64;
            let b: f64 = (0..n).map(|i| p2[i * c + k]).sum::<f64>() / n as f64;
            (0.5 * (a + b)).max(FLOOR)
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    (rows, cols, w)
}

/// Builds and trains a model on `data` (phases 1 and 2).
pub fn fit(data: &MultiLagData, config: EstimatorConfig) -> Result<EstimatorModel> {
    let mut m = EstimatorModel::new(data.d1, data.d2, data.classes, &data.lag_values(), config)?;
    m.train_discriminators(data)?;
    m.train_alignment(data)?;
    Ok(m)
}

/// Builds a model for the lags in `data` and runs phase 1 only.
pub fn train_discriminators(data: &MultiLagData, config: EstimatorConfig) -> Result<EstimatorModel> {
    let mut m = EstimatorModel::new(data.d1, data.d2, data.classes, &data.lag_values(), config)?;
    m.train_discriminators(data)?;
    Ok(m)
}
