use std::path::Path;

use serde::{Deserialize, Serialize};
use timemoe_autodiff::nn::Linear;
use timemoe_autodiff::{read_checkpoint, write_checkpoint, Mode, ParamStore, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::data::WindowDataset;
use crate::error::{contract, Error, Result};
use crate::layers::{position_encoding, ModalityEncoder, TransformerLayer};
use crate::moe::{LayerRouting, MoeLayer};
use crate::routing::{decide, p_syn, triggered_pairs, AuxLosses, RoutingEntry, RoutingRecord, JSD_EPS};
use crate::rus::{RusContextInput, Thresholds};

/// Modality encoders, alternating transformer / MoE blocks and a linear
/// classification head over all final token states.
#[derive(Clone, Debug)]
pub struct TimeMoe {
    config: ModelConfig,
    modalities: Vec<String>,
    dims: Vec<usize>,
    classes: usize,
    store: ParamStore,
    encoders: Vec<ModalityEncoder>,
    blocks: Vec<(TransformerLayer, MoeLayer)>,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, classes]`.
    pub logits: Var,
    pub routing: Vec<LayerRouting>,
    pub batch: usize,
}

/// Scalar loss on the tape and the values of its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    /// Mean cross-entropy in nats.
    pub task: f64,
    /// Auxiliary terms averaged over MoE layers.
    pub aux: AuxLosses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// Routing of the last MoE layer.
    pub record: RoutingRecord,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    modalities: Vec<String>,
    dims: Vec<usize>,
    classes: usize,
}

type Rows = Vec<(usize, usize, usize, usize)>;

impl TimeMoe {
    pub fn new(config: ModelConfig, modalities: Vec<String>, dims: Vec<usize>, classes: usize) -> Result<Self> {
        config.validate()?;
        if modalities.is_empty() || modalities.len() != dims.len() || dims.contains(&0) {
            return contract("time_moe", "need one positive feature width per modality");
        }
        if config.n_syn > 0 && modalities.len() < 2 {
            return contract("time_moe", "synergy experts need at least two modalities");
        }
        if classes < 2 {
            return contract("time_moe", format!("{classes} classes"));
        }
        let mut store = ParamStore::new(config.seed);
        let encoders = modalities
            .iter()
            .zip(&dims)
            .enumerate()
            .map(|(i, (_, &d))| ModalityEncoder::new(&mut store, &format!("enc{i}"), d, &config))
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let tr = TransformerLayer::new(&mut store, &format!("block{b}.tr"), config.d_model, config.h, config.d_ff, config.p_drop)?;
            let moe = MoeLayer::new(&mut store, &format!("block{b}.moe"), &config)?;
            blocks.push((tr, moe));
        }
        let head = Linear::new(&mut store, "head", modalities.len() * config.window * config.d_model, classes, true)?;
        Ok(Self {
            config,
            modalities,
            dims,
            classes,
            store,
            encoders,
            blocks,
            head,
        })
    }

    pub fn for_dataset(config: ModelConfig, data: &WindowDataset) -> Result<Self> {
        if data.window != config.window {
            return contract("time_moe", format!("data window {} != config window {}", data.window, config.window));
        }
        Self::new(config, data.modalities.clone(), data.dims.clone(), data.classes)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().map(|(_, m)| m)
    }

    pub fn encoder(&self, m: usize) -> &ModalityEncoder {
        &self.encoders[m]
    }

    pub(crate) fn check_rus(&self, rus: &RusContextInput) -> Result<()> {
        if rus.modalities != self.modalities {
            return contract("time_moe", format!("RUS modalities {:?} != model {:?}", rus.modalities, self.modalities));
        }
        Ok(())
    }

    /// `x[m]: [B, window, dims[m]]`.
    pub fn forward(&self, tape: &mut Tape, x: &[Tensor], rus: &RusContextInput) -> Result<ForwardOutput> {
        self.check_rus(rus)?;
        if x.len() != self.modalities.len() {
            return contract("time_moe", format!("{} inputs for {} modalities", x.len(), self.modalities.len()));
        }
        let b = x[0].shape()[0];
        for (xi, &d) in x.iter().zip(&self.dims) {
            if xi.shape() != [b, self.config.window, d] {
                return contract("encode_modality", format!("input {:?}, expected [{b}, {}, {d}]", xi.shape(), self.config.window));
            }
        }
        let pe = position_encoding(tape, b, self.config.window, self.config.d_model);
        let mut states = Vec::with_capacity(x.len());
        for (enc, xi) in self.encoders.iter().zip(x) {
            let v = tape.input(xi.clone());
            states.push(enc.forward(tape, &self.store, v, pe)?);
        }
        let mut routing = Vec::with_capacity(self.blocks.len());
        for (tr, moe) in &self.blocks {
            for s in states.iter_mut() {
                *s = tr.forward(tape, &self.store, *s, pe)?;
            }
            let (next, r) = moe.forward(tape, &self.store, &states, pe, rus)?;
            states = next;
            routing.push(r);
        }
        let mut flat = Vec::with_capacity(states.len());
        let width = self.config.window * self.config.d_model;
        for s in states {
            flat.push(tape.reshape(s, &[b, width])?);
        }
        let cat = if flat.len() == 1 { flat[0] } else { tape.concat(&flat, 1)? };
        let logits = self.head.forward(tape, &self.store, cat)?;
        Ok(ForwardOutput { logits, routing, batch: b })
    }

    /// Task cross-entropy plus the auxiliary terms of every MoE layer.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, labels: &[usize], rus: &RusContextInput, th: &Thresholds) -> Result<LossBreakdown> {
        let ce = tape.cross_entropy(out.logits, labels)?;
        let task = tape.value(ce).item();
        let trig = triggered_pairs(rus, th, out.batch, self.config.window);
        let cfg = &self.config;
        let layers = out.routing.len().max(1) as f64;
        let mut total = ce;
        let mut aux = AuxLosses::default();
        let rows = |set: &Rows| -> (Vec<usize>, Vec<usize>) {
            set.iter()
                .map(|&(a, c, s, t)| (self.row(out.batch, a, s, t), self.row(out.batch, c, s, t)))
                .unzip()
        };
        for r in &out.routing {
            let terms = [
                (cfg.lambda_r, &trig.redundancy, 0),
                (-cfg.lambda_u, &trig.uniqueness, 1),
                (cfg.lambda_s, &trig.synergy, 2),
            ];
            for (lambda, set, kind) in terms {
                if lambda == 0.0 || set.is_empty() {
                    continue;
                }
                let (i1, i2) = rows(set);
                let mean = if kind == 2 {
                    self.syn_shortfall(tape, r.probs, &i1, &i2)?
                } else {
                    mean_jsd(tape, r.probs, &i1, &i2)?
                };
                let term = tape.scale(mean, lambda / layers)?;
                let v = tape.value(term).item();
                match kind {
                    0 => aux.redundancy += v,
                    1 => aux.uniqueness += v,
                    _ => aux.synergy += v,
                }
                total = tape.add(total, term)?;
            }
        }
        Ok(LossBreakdown { total, task, aux })
    }

    fn row(&self, batch: usize, m: usize, sample: usize, t: usize) -> usize {
        let w = self.config.window;
        (m * batch + sample) * w + (w - t)
    }

    /// Mean of `1 - (P_syn(a) + P_syn(b)) / 2` over the row pairs.
    fn syn_shortfall(&self, tape: &mut Tape, probs: Var, i1: &[usize], i2: &[usize]) -> Result<Var> {
        let e = self.config.n_expert;
        let ns = self.config.n_syn;
        if ns == 0 {
            return Ok(tape.constant(Tensor::scalar(1.0)));
        }
        let syn = tape.slice(probs, 1, e - ns, ns)?;
        let ps = tape.sum_axis(syn, 1)?;
        let a = tape.take(ps, i1.to_vec(), &[i1.len()])?;
        let b = tape.take(ps, i2.to_vec(), &[i2.len()])?;
        let s = tape.add(a, b)?;
        let s = tape.sum(s)?;
        let s = tape.scale(s, -0.5 / i1.len() as f64)?;
        Ok(tape.add_scalar(s, 1.0)?)
    }

    /// Converts one layer's routing into a record with `t` counted back
    /// from the target.
    pub fn record(&self, tape: &Tape, r: &LayerRouting, batch: usize) -> RoutingRecord {
        let probs = tape.value(r.probs);
        let mut rec = RoutingRecord::empty(self.modalities.clone(), self.config.window, self.config.n_expert, self.config.n_syn);
        rec.samples = batch;
        for m in 0..self.modalities.len() {
            for s in 0..batch {
                for t in 1..=self.config.window {
                    let row = self.row(batch, m, s, t);
                    let d = decide(probs.row(row).to_vec(), self.config.top_k);
                    rec.entries.push(RoutingEntry {
                        p_syn: p_syn(&d.probs, self.config.n_syn),
                        probs: d.probs,
                        topk: d.topk,
                        weights: d.weights,
                    });
                }
            }
        }
        rec
    }

    /// Accuracy, mean cross-entropy (nats) and last-layer routing on `data`.
    pub fn evaluate(&self, data: &WindowDataset, rus: &RusContextInput, batch: usize) -> Result<Evaluation> {
        if data.is_empty() {
            return contract("evaluate", "empty dataset");
        }
        let mut record = RoutingRecord::empty(self.modalities.clone(), self.config.window, self.config.n_expert, self.config.n_syn);
        let (mut correct, mut loss) = (0usize, 0.0);
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let (x, y) = data.batch(chunk)?;
            let mut tape = Tape::new(Mode::Eval, 0);
            let out = self.forward(&mut tape, &x, rus)?;
            let ce = tape.cross_entropy(out.logits, &y)?;
            loss += tape.value(ce).item() * chunk.len() as f64;
            let logits = tape.value(out.logits);
            for (i, &label) in y.iter().enumerate() {
                let row = logits.row(i);
                let pred = (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best });
                correct += usize::from(pred == label);
            }
            if let Some(last) = out.routing.last() {
                record.extend(self.record(&tape, last, chunk.len()));
            }
        }
        Ok(Evaluation {
            accuracy: correct as f64 / data.len() as f64,
            loss: loss / data.len() as f64,
            record,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            modalities: self.modalities.clone(),
            dims: self.dims.clone(),
            classes: self.classes,
        };
        write_checkpoint(path, serde_json::to_value(meta)?, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, entries) = read_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(header.meta).map_err(Error::Json)?;
        let mut model = Self::new(meta.config, meta.modalities, meta.dims, meta.classes)?;
        model.store.load(&entries)?;
        Ok(model)
    }
}

/// Mean JSD in bits between rows `i1` and `i2` of `probs`.
fn mean_jsd(tape: &mut Tape, probs: Var, i1: &[usize], i2: &[usize]) -> Result<Var> {
    let p = tape.index_select(probs, i1)?;
    let q = tape.index_select(probs, i2)?;
    let s = tape.add(p, q)?;
    let mid = tape.scale(s, 0.5)?;
    let log_of = |tape: &mut Tape, v: Var| -> Result<Var> {
        let e = tape.add_scalar(v, JSD_EPS)?;
        Ok(tape.log(e)?)
    };
    let lp = log_of(tape, p)?;
    let lq = log_of(tape, q)?;
    let lm = log_of(tape, mid)?;
    let dp = tape.sub(lp, lm)?;
    let dq = tape.sub(lq, lm)?;
    let tp = tape.mul(p, dp)?;
    let tq = tape.mul(q, dq)?;
    let both = tape.add(tp, tq)?;
    let total = tape.sum(both)?;
    Ok(tape.scale(total, 0.5 / std::f64::consts::LN_2 / i1.len() as f64)?)
}
