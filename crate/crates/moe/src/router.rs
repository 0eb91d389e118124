use timemoe_autodiff::nn::{GruCell, Linear};
use timemoe_autodiff::{ParamStore, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::rus::RusContextInput;

/// Router combining token features with attention over pairwise
/// (redundancy, synergy) values and a GRU over the uniqueness sequence.
#[derive(Clone, Debug)]
pub struct Router {
    token: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    gru: GruCell,
    mlp1: Linear,
    mlp2: Linear,
    d_k: usize,
}

/// Router context for a set of token rows.
#[derive(Clone, Copy, Debug)]
pub struct RusContext {
    /// `[N, L, P]` attention over the `P` pairs at each GRU step.
    pub attention: Var,
    /// `[N, d_v + d_gru]`: attention context at the row's lag, then the
    /// final GRU state.
    pub context: Var,
}

impl Router {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let fused = cfg.d_token + cfg.d_v + cfg.d_gru;
        Ok(Self {
            token: Linear::new(store, &format!("{name}.token"), cfg.d_model, cfg.d_token, true)?,
            query: Linear::new(store, &format!("{name}.query"), cfg.d_token, cfg.d_k, true)?,
            key: Linear::new(store, &format!("{name}.key"), 2, cfg.d_k, true)?,
            value: Linear::new(store, &format!("{name}.value"), 2, cfg.d_v, true)?,
            gru: GruCell::new(store, &format!("{name}.gru"), 1 + cfg.d_v, cfg.d_gru)?,
            mlp1: Linear::new(store, &format!("{name}.mlp1"), fused, cfg.d_token, true)?,
            mlp2: Linear::new(store, &format!("{name}.mlp2"), cfg.d_token, cfg.n_expert, true)?,
            d_k: cfg.d_k,
        })
    }

    /// `relu(x W + b)` for token rows `x: [N, d_model]`.
    pub fn token_features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.token.forward(tape, store, x)?;
        Ok(tape.relu(h)?)
    }

    /// Context of modality `m` for token rows with features `feats: [N, d_token]`;
    /// row `i` reads the attention output at `lag_index[i]`.
    pub fn rus_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rus: &RusContextInput,
        m: usize,
        feats: Var,
        lag_index: &[usize],
    ) -> Result<RusContext> {
        let pairs = &rus.pairs[m];
        let p = pairs.len();
        if p == 0 {
            return contract("rus_context", format!("modality {} has no pairwise RUS", rus.modalities[m]));
        }
        let n = tape.shape(feats)[0];
        if lag_index.len() != n {
            return contract("rus_context", format!("{} lag indices for {n} rows", lag_index.len()));
        }
        let k = rus.max_lag();
        let l = rus.sequence_len();
        let mut rs = Vec::with_capacity(l * p * 2);
        for step in 0..l {
            for pair in pairs {
                rs.push(pair.redundancy[step % k]);
                rs.push(pair.synergy[step % k]);
            }
        }
        let rs = tape.constant(Tensor::new(vec![l * p, 2], rs)?);
        let keys = self.key.forward(tape, store, rs)?;
        let values = self.value.forward(tape, store, rs)?;
        let q = self.query.forward(tape, store, feats)?;
        let kt = tape.transpose(keys)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.d_k as f64).sqrt())?;
        let scores = tape.reshape(scores, &[n, l, p])?;
        let attention = tape.softmax(scores)?;

        let mut h = tape.constant(Tensor::zeros(&[n, self.gru.hidden]));
        let mut contexts = Vec::with_capacity(k);
        for step in 0..l {
            let a = tape.slice(attention, 1, step, 1)?;
            let a = tape.reshape(a, &[n, p])?;
            let v = tape.slice(values, 0, step * p, p)?;
            let ctx = tape.matmul(a, v)?;
            if step < k {
                contexts.push(ctx);
            }
            let u = tape.constant(Tensor::full(&[n, 1], rus.uniqueness[m][step % k]));
            let x = tape.concat(&[u, ctx], 1)?;
            h = self.gru.step(tape, store, x, h)?;
        }
        let stacked = if contexts.len() == 1 { contexts[0] } else { tape.concat(&contexts, 0)? };
        let rows: Vec<usize> = lag_index.iter().enumerate().map(|(i, &li)| li.min(k - 1) * n + i).collect();
        let picked = tape.index_select(stacked, &rows)?;
        let context = tape.concat(&[picked, h], 1)?;
        Ok(RusContext { attention, context })
    }

    /// Expert logits `[N, n_expert]` from token features and router context.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, feats: Var, context: Var) -> Result<Var> {
        let x = tape.concat(&[feats, context], 1)?;
        let h = self.mlp1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        Ok(self.mlp2.forward(tape, store, h)?)
    }
}
