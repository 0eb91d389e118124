use timemoe_autodiff::nn::{BatchNorm, Conv1d, LayerNorm, Linear, MultiHeadAttention};
use timemoe_autodiff::{ParamStore, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{contract, Result};

/// Sinusoidal encoding of each token's distance to the target, `[B, T, d]`;
/// position `p` (chronological) encodes `T - p`.
pub fn position_encoding(tape: &mut Tape, batch: usize, window: usize, d: usize) -> Var {
    let mut one = Vec::with_capacity(window * d);
    for p in 0..window {
        let pos = (window - p) as f64;
        for i in 0..d {
            let freq = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
            one.push(if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() });
        }
    }
    let data = one.iter().copied().cycle().take(batch * window * d).collect();
    tape.constant(Tensor::new(vec![batch, window, d], data).expect("sized"))
}

/// Post-norm transformer encoder layer. Position encodings enter the
/// attention queries and keys only.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    p_drop: f64,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, d_ff: usize, p_drop: f64) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, d_ff, true)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), d_ff, d, true)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            p_drop,
        })
    }

    /// `x, pe: [B, T, d]` → `[B, T, d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, pe: Var) -> Result<Var> {
        let qk = tape.add(x, pe)?;
        let a = self.attn.attend(tape, store, qk, qk, x)?;
        let a = tape.dropout(a, self.p_drop)?;
        let r = tape.add(x, a)?;
        let x = self.ln1.forward(tape, store, r)?;
        let f = self.ff1.forward(tape, store, x)?;
        let f = tape.relu(f)?;
        let f = tape.dropout(f, self.p_drop)?;
        let f = self.ff2.forward(tape, store, f)?;
        let f = tape.dropout(f, self.p_drop)?;
        let r = tape.add(x, f)?;
        Ok(self.ln2.forward(tape, store, r)?)
    }
}

/// Projection, `sqrt(d_model)` scaling, optional residual conv stack,
/// transformer layers and a final layer norm.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub d_in: usize,
    proj: Linear,
    scale: f64,
    convs: Vec<(Conv1d, BatchNorm)>,
    layers: Vec<TransformerLayer>,
    ln: LayerNorm,
}

impl ModalityEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let mut convs = Vec::new();
        if cfg.conv {
            for i in 0..2 {
                convs.push((
                    Conv1d::new(store, &format!("{name}.conv{i}"), d, d, cfg.conv_kernel)?,
                    BatchNorm::new(store, &format!("{name}.bn{i}"), d)?,
                ));
            }
        }
        let layers = (0..cfg.l_enc)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), d, cfg.h, cfg.d_ff, cfg.p_drop))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d_in,
            proj: Linear::new(store, &format!("{name}.proj"), d_in, d, true)?,
            scale: (d as f64).sqrt(),
            convs,
            layers,
            ln: LayerNorm::new(store, &format!("{name}.ln"), d)?,
        })
    }

    /// Pre-attention embedding of `x: [B, T, d_in]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_in {
            return contract("encode_modality", format!("expected [B, T, {}] input, got {s:?}", self.d_in));
        }
        let p = self.proj.forward(tape, store, x)?;
        let mut h = tape.scale(p, self.scale)?;
        for (conv, bn) in &self.convs {
            let c = conv.forward(tape, store, h)?;
            let c = bn.forward(tape, store, c)?;
            let c = tape.relu(c)?;
            h = tape.add(h, c)?;
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, pe: Var) -> Result<Var> {
        let mut h = self.embed(tape, store, x)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, pe)?;
        }
        Ok(self.ln.forward(tape, store, h)?)
    }
}

/// Two-layer feed-forward expert applied row-wise.
#[derive(Clone, Debug)]
pub struct FfnExpert {
    l1: Linear,
    l2: Linear,
    p_drop: f64,
}

impl FfnExpert {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_expert: usize, p_drop: f64) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d, d_expert, true)?,
            l2: Linear::new(store, &format!("{name}.l2"), d_expert, d, true)?,
            p_drop,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, self.p_drop)?;
        Ok(self.l2.forward(tape, store, h)?)
    }
}

/// Cross-attention from one modality's tokens to the other modalities'
/// tokens, followed by a position-wise feed-forward block.
#[derive(Clone, Debug)]
pub struct SynergyExpert {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    p_drop: f64,
}

impl SynergyExpert {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.h_syn)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.d_expert, true)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.d_expert, d, true)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            p_drop: cfg.p_drop,
        })
    }

    /// `query: [B, T, d]`, `context: [B, T', d]` → `[B, T, d]`; the
    /// position-encoded `query_pe` and `key` drive the attention weights.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, query_pe: Var, key: Var, context: Var) -> Result<Var> {
        let a = self.attn.attend(tape, store, query_pe, key, context)?;
        let a = tape.dropout(a, self.p_drop)?;
        let r = tape.add(query, a)?;
        let x = self.ln1.forward(tape, store, r)?;
        let f = self.ff1.forward(tape, store, x)?;
        let f = tape.relu(f)?;
        let f = self.ff2.forward(tape, store, f)?;
        let f = tape.dropout(f, self.p_drop)?;
        let r = tape.add(x, f)?;
        Ok(self.ln2.forward(tape, store, r)?)
    }
}
