use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use timemoe_autodiff::{Mode, Optimizer, Sgd, Tape};

use crate::config::ModelConfig;
use crate::data::WindowDataset;
use crate::error::{contract, Error, Result};
use crate::model::{Evaluation, TimeMoe};
use crate::routing::RoutingRecord;
use crate::rus::{RusContextInput, Thresholds};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Batch means over the epoch.
    pub loss: f64,
    pub task_loss: f64,
    pub l_red: f64,
    pub l_uniq: f64,
    pub l_syn: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Share of top-k selections per expert on the test set, all modalities.
    pub expert_utilization: Vec<f64>,
    /// Test-set mean JSD per modality pair `"a|b"` (last MoE layer).
    pub pair_jsd: BTreeMap<String, f64>,
    /// Test-set mean pair P_syn per modality pair.
    pub pair_p_syn: BTreeMap<String, f64>,
    /// Test-set mean P_syn per modality.
    pub p_syn: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TimeMoe,
    pub thresholds: Thresholds,
    pub metrics: Vec<EpochMetrics>,
    /// Last-layer test routing after the final epoch.
    pub routing: RoutingRecord,
}

fn summarize(epoch: usize, sums: [f64; 5], batches: usize, eval: &Evaluation) -> EpochMetrics {
    let n = batches.max(1) as f64;
    let rec = &eval.record;
    let util = rec.utilization();
    let m = util.len().max(1) as f64;
    let mut expert_utilization = vec![0.0; rec.n_expert];
    for row in &util {
        for (a, b) in expert_utilization.iter_mut().zip(row) {
            *a += b / m;
        }
    }
    let (pair_jsd, pair_p_syn) = rec.pair_summaries();
    let per = (rec.samples * rec.window).max(1) as f64;
    let p_syn = rec
        .modalities
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let s: f64 = rec.entries[i * rec.samples * rec.window..(i + 1) * rec.samples * rec.window]
                .iter()
                .map(|e| e.p_syn)
                .sum();
            (name.clone(), s / per)
        })
        .collect();
    EpochMetrics {
        epoch,
        loss: sums[0] / n,
        task_loss: sums[1] / n,
        l_red: sums[2] / n,
        l_uniq: sums[3] / n,
        l_syn: sums[4] / n,
        test_loss: eval.loss,
        test_accuracy: eval.accuracy,
        expert_utilization,
        pair_jsd,
        pair_p_syn,
        p_syn,
    }
}

/// Trains on `train` with SGD + momentum, evaluating on `test` after every
/// epoch. `rus` must come from the same training split.
pub fn train(train: &WindowDataset, test: &WindowDataset, rus: &RusContextInput, cfg: &ModelConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return contract("train", "empty train or test set");
    }
    if train.modalities != test.modalities || train.dims != test.dims {
        return contract("train", "train and test modalities differ");
    }
    let mut model = TimeMoe::for_dataset(cfg.clone(), train)?;
    model.check_rus(rus)?;
    let thresholds = Thresholds::resolve(cfg, rus);
    log::info!(
        "thresholds R {:.4} U {:.4} S {:.4}; {} trainable values",
        thresholds.redundancy,
        thresholds.uniqueness,
        thresholds.synergy,
        model.params().num_trainable()
    );
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut last_eval = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(chunk)?;
            let tape_seed = cfg.seed ^ ((epoch as u64) << 32 | bi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut tape = Tape::new(Mode::Train, tape_seed);
            let non_finite = |e: Error| match e {
                Error::Autodiff(timemoe_autodiff::Error::NonFinite { op }) => Error::Training {
                    epoch,
                    batch: bi,
                    detail: format!("non-finite value in {op}"),
                },
                e => e,
            };
            let out = model.forward(&mut tape, &x, rus).map_err(non_finite)?;
            let parts = model.loss(&mut tape, &out, &y, rus, &thresholds).map_err(non_finite)?;
            let total = tape.value(parts.total).item();
            if !total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    detail: format!(
                        "total {total}, task {}, redundancy {}, uniqueness {}, synergy {}",
                        parts.task, parts.aux.redundancy, parts.aux.uniqueness, parts.aux.synergy
                    ),
                });
            }
            let grads = tape.backward(parts.total).map_err(|e| non_finite(e.into()))?;
            let store = model.params_mut();
            store.zero_grad();
            tape.accumulate(&grads, store);
            let norm = store.grad_norm();
            if !norm.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    detail: format!("gradient norm {norm}"),
                });
            }
            if let Some(c) = cfg.grad_clip {
                store.clip_grad_norm(c);
            }
            opt.step(store);
            tape.apply_buffers(store);
            for (s, v) in sums.iter_mut().zip([total, parts.task, parts.aux.redundancy, parts.aux.uniqueness, parts.aux.synergy]) {
                *s += v;
            }
            batches += 1;
        }
        let eval = model.evaluate(test, rus, cfg.batch_size.max(64))?;
        let m = summarize(epoch, sums, batches, &eval);
        log::info!(
            "epoch {epoch}: loss {:.4} task {:.4} test acc {:.3}",
            m.loss,
            m.task_loss,
            m.test_accuracy
        );
        metrics.push(m);
        last_eval = Some(eval);
    }
    let routing = match last_eval {
        Some(e) => e.record,
        None => model.evaluate(test, rus, cfg.batch_size.max(64))?.record,
    };
    Ok(TrainOutcome {
        model,
        thresholds,
        metrics,
        routing,
    })
}

/// Writes one JSON object per epoch.
pub fn write_metrics_jsonl(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        serde_json::to_writer(&mut f, m)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
