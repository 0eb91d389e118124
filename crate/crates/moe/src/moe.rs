use timemoe_autodiff::nn::LayerNorm;
use timemoe_autodiff::{ParamStore, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::layers::{FfnExpert, SynergyExpert};
use crate::router::Router;
use crate::routing::top_k_indices;
use crate::rus::RusContextInput;

/// Routing produced by one MoE layer for `M * B * T` token rows, ordered
/// modality, sample, then chronological position.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    /// `[rows, n_expert]` softmax distributions.
    pub probs: Var,
    pub selected: Vec<Vec<usize>>,
}

/// Router, regular experts and synergy experts with top-k dispatch and a
/// residual layer norm.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub router: Router,
    regular: Vec<FfnExpert>,
    synergy: Vec<SynergyExpert>,
    ln: LayerNorm,
    top_k: usize,
}

impl MoeLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let regular = (0..cfg.n_regular())
            .map(|e| FfnExpert::new(store, &format!("{name}.expert{e}"), cfg.d_model, cfg.d_expert, cfg.p_drop))
            .collect::<Result<Vec<_>>>()?;
        let synergy = (cfg.n_regular()..cfg.n_expert)
            .map(|e| SynergyExpert::new(store, &format!("{name}.expert{e}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            router: Router::new(store, &format!("{name}.router"), cfg)?,
            regular,
            synergy,
            ln: LayerNorm::new(store, &format!("{name}.ln"), cfg.d_model)?,
            top_k: cfg.top_k,
        })
    }

    pub fn n_expert(&self) -> usize {
        self.regular.len() + self.synergy.len()
    }

    /// Routing distributions `[M * B * T, n_expert]` for per-modality
    /// states `[B, T, d]`.
    pub fn route(&self, tape: &mut Tape, store: &ParamStore, states: &[Var], rus: &RusContextInput) -> Result<Var> {
        let mut probs = Vec::with_capacity(states.len());
        for (m, &s) in states.iter().enumerate() {
            let sh = tape.shape(s).to_vec();
            let (b, t, d) = (sh[0], sh[1], sh[2]);
            let rows = tape.reshape(s, &[b * t, d])?;
            let lag_index: Vec<usize> = (0..b * t).map(|r| rus.lag_index(t - r % t)).collect();
            let feats = self.router.token_features(tape, store, rows)?;
            let ctx = self.router.rus_context(tape, store, rus, m, feats, &lag_index)?;
            let logits = self.router.logits(tape, store, feats, ctx.context)?;
            probs.push(tape.softmax(logits)?);
        }
        Ok(if probs.len() == 1 { probs[0] } else { tape.concat(&probs, 0)? })
    }

    /// Weighted sum of the selected experts' outputs for every token row.
    ///
    /// `gate: [rows, n_expert]` holds the mixing weights; `selected[r]`
    /// lists the experts of row `r` (same count for every row).
    pub fn dispatch(&self, tape: &mut Tape, store: &ParamStore, states: &[Var], pe: Var, gate: Var, selected: &[Vec<usize>]) -> Result<Var> {
        let e_total = self.n_expert();
        let sh = tape.shape(states[0]).to_vec();
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        let rows = states.len() * b * t;
        let k = selected.first().map_or(0, |s| s.len());
        if selected.len() != rows || k == 0 || selected.iter().any(|s| s.len() != k) {
            return contract("expert_forward", format!("assignment must list the same nonzero number of experts for all {rows} rows"));
        }
        if let Some(&e) = selected.iter().flatten().find(|&&e| e >= e_total) {
            return contract("expert_forward", format!("expert {e} out of range (n_expert = {e_total})"));
        }
        if tape.shape(gate) != [rows, e_total] {
            return contract("expert_forward", format!("gate shape {:?}, expected [{rows}, {e_total}]", tape.shape(gate)));
        }
        let mut flat = Vec::with_capacity(states.len());
        for &s in states {
            flat.push(tape.reshape(s, &[b * t, d])?);
        }
        let all = if flat.len() == 1 { flat[0] } else { tape.concat(&flat, 0)? };

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); e_total];
        for (r, sel) in selected.iter().enumerate() {
            for &e in sel {
                members[e].push(r);
            }
        }
        // position[r][j]: row of expert output piece for slot j of row r
        let mut keyed = Vec::new();
        if !self.synergy.is_empty() && members[self.regular.len()..].iter().any(|m| !m.is_empty()) {
            for &s in states {
                keyed.push(tape.add(s, pe)?);
            }
        }
        let mut position = vec![vec![0usize; k]; rows];
        let mut pieces = Vec::new();
        let mut offset = 0;
        for (e, rows_e) in members.iter().enumerate() {
            if rows_e.is_empty() {
                continue;
            }
            let out = if e < self.regular.len() {
                let x = tape.index_select(all, rows_e)?;
                self.regular[e].forward(tape, store, x)?
            } else {
                let dense = self.synergy_dense(tape, store, e - self.regular.len(), states, &keyed)?;
                tape.index_select(dense, rows_e)?
            };
            let w = tape.take(gate, rows_e.iter().map(|&r| r * e_total + e).collect(), &[rows_e.len()])?;
            pieces.push(tape.scale_rows(out, w)?);
            for (i, &r) in rows_e.iter().enumerate() {
                let j = selected[r].iter().position(|&x| x == e).expect("member");
                position[r][j] = offset + i;
            }
            offset += rows_e.len();
        }
        let cat = if pieces.len() == 1 { pieces[0] } else { tape.concat(&pieces, 0)? };
        let mut acc = None;
        for j in 0..k {
            let idx: Vec<usize> = position.iter().map(|p| p[j]).collect();
            let part = tape.index_select(cat, &idx)?;
            acc = Some(match acc {
                None => part,
                Some(a) => tape.add(a, part)?,
            });
        }
        Ok(acc.expect("k > 0"))
    }

    /// Synergy expert `i` on every token row: each modality's tokens attend
    /// to the concatenated tokens of all other modalities.
    fn synergy_dense(&self, tape: &mut Tape, store: &ParamStore, i: usize, states: &[Var], keyed: &[Var]) -> Result<Var> {
        if states.len() < 2 {
            return contract("expert_forward", "synergy experts need at least two modalities");
        }
        let sh = tape.shape(states[0]).to_vec();
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        let mut outs = Vec::with_capacity(states.len());
        for (m, &q) in states.iter().enumerate() {
            let pick = |vs: &[Var]| -> Vec<Var> { vs.iter().enumerate().filter(|(o, _)| *o != m).map(|(_, &v)| v).collect() };
            let (others, other_keys) = (pick(states), pick(keyed));
            let (ctx, key) = if others.len() == 1 {
                (others[0], other_keys[0])
            } else {
                (tape.concat(&others, 1)?, tape.concat(&other_keys, 1)?)
            };
            let y = self.synergy[i].forward(tape, store, q, keyed[m], key, ctx)?;
            outs.push(tape.reshape(y, &[b * t, d])?);
        }
        Ok(tape.concat(&outs, 0)?)
    }

    /// Routes, dispatches and applies `LN(x + MoE(x))` per modality.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, states: &[Var], pe: Var, rus: &RusContextInput) -> Result<(Vec<Var>, LayerRouting)> {
        let probs = self.route(tape, store, states, rus)?;
        let pv = tape.value(probs).clone();
        let e_total = self.n_expert();
        let rows = pv.len() / e_total;
        let mut mask = vec![0.0; pv.len()];
        let mut selected = Vec::with_capacity(rows);
        for r in 0..rows {
            let sel = top_k_indices(pv.row(r), self.top_k);
            for &e in &sel {
                mask[r * e_total + e] = 1.0;
            }
            selected.push(sel);
        }
        let mask = tape.constant(Tensor::new(vec![rows, e_total], mask)?);
        let kept = tape.mul(probs, mask)?;
        let z = tape.sum_axis(kept, 1)?;
        let ones = tape.constant(Tensor::ones(&[rows]));
        let inv = tape.div(ones, z)?;
        let gate = tape.scale_rows(kept, inv)?;
        let mixed = self.dispatch(tape, store, states, pe, gate, &selected)?;

        let sh = tape.shape(states[0]).to_vec();
        let per = sh[0] * sh[1];
        let mut outs = Vec::with_capacity(states.len());
        for (m, &s) in states.iter().enumerate() {
            let part = tape.slice(mixed, 0, m * per, per)?;
            let part = tape.reshape(part, &sh)?;
            let r = tape.add(s, part)?;
            outs.push(self.ln.forward(tape, store, r)?);
        }
        Ok((outs, LayerRouting { probs, selected }))
    }
}
