//! Layers composed from tape primitives.

use crate::error::{contract, shape_err, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), &[d_in, d_out], Init::Xavier)?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// `gamma * normalize(x) + beta` over the last axis.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let n = tape.normalize(x, eps)?;
    let s = tape.mul_row(n, gamma)?;
    tape.add_row(s, beta)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: store.add(&format!("{name}.beta"), &[d], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        layer_norm(tape, x, g, b, self.eps)
    }
}

/// Batch normalization over every leading index, per channel (last axis).
///
/// Training mode normalizes with batch statistics and queues updated
/// running statistics on the tape; evaluation mode uses the running ones.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: store.add(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let c = *shape.last().expect("non-empty shape");
        let rows = tape.value(x).len() / c;
        let normalized = match tape.mode() {
            Mode::Train => {
                let flat = tape.reshape(x, &[rows, c])?;
                let t = tape.transpose(flat)?;
                let n = tape.normalize(t, self.eps)?;
                let back = tape.transpose(n)?;
                let (mean, var) = column_stats(tape.value(flat));
                let unbias = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
                let m = self.momentum;
                let rm: Vec<f64> = store
                    .value(self.running_mean)
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect();
                let rv: Vec<f64> = store
                    .value(self.running_var)
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                    .collect();
                tape.record_buffer(self.running_mean, rm);
                tape.record_buffer(self.running_var, rv);
                tape.reshape(back, &shape)?
            }
            Mode::Eval => {
                let neg_mean: Vec<f64> = store.value(self.running_mean).data().iter().map(|v| -v).collect();
                let inv_std: Vec<f64> = store
                    .value(self.running_var)
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + self.eps).sqrt())
                    .collect();
                let nm = tape.constant(Tensor::from_vec(neg_mean));
                let is = tape.constant(Tensor::from_vec(inv_std));
                let centered = tape.add_row(x, nm)?;
                tape.mul_row(centered, is)?
            }
        };
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let s = tape.mul_row(normalized, g)?;
        tape.add_row(s, b)
    }
}

fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = t.last_dim();
    let rows = t.len() / c;
    let mut mean = vec![0.0; c];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(t.row(r)) {
            *m += v / rows as f64;
        }
    }
    let mut var = vec![0.0; c];
    for r in 0..rows {
        for j in 0..c {
            let d = t.row(r)[j] - mean[j];
            var[j] += d * d / rows as f64;
        }
    }
    (mean, var)
}

/// Same-padded temporal convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return contract("conv1d", format!("kernel size {kernel} must be odd"));
        }
        let a = (6.0 / ((c_in + c_out) * kernel) as f64).sqrt();
        Ok(Self {
            w: store.add(&format!("{name}.w"), &[c_out, c_in, kernel], Init::Uniform(a))?,
            b: store.add(&format!("{name}.b"), &[c_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv1d(x, w)?;
        tape.add_row(y, b)
    }
}

/// `softmax(q k^T / sqrt(d)) v` for `q: [B, Tq, d]`, `k, v: [B, Tk, d]`.
pub fn scaled_dot_product_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return shape_err("attention", &sq, &sk);
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (sq[2] as f64).sqrt())?;
    let w = tape.softmax(scaled)?;
    tape.matmul(w, v)
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return contract("attention", format!("d_model {d_model} not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, true)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, true)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, true)?,
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, true)?,
            heads,
        })
    }

    /// `query: [B, Tq, d]`, `context: [B, Tk, d]` → `[B, Tq, d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, context: Var) -> Result<Var> {
        self.attend(tape, store, query, context, context)
    }

    /// Attention with separate key and value inputs (`[B, Tk, d]` each).
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, query: Var, key: Var, value: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, key)?;
        let v = self.v.forward(tape, store, value)?;
        let d = *tape.shape(q).last().expect("rank 3");
        let dh = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 2, h * dh, dh)?;
            let kh = tape.slice(k, 2, h * dh, dh)?;
            let vh = tape.slice(v, 2, h * dh, dh)?;
            outs.push(scaled_dot_product_attention(tape, qh, kh, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2)? };
        self.o.forward(tape, store, cat)
    }
}

/// Three-gate GRU cell (reset, update, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub ih: Linear,
    pub hh: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ih: Linear::new(store, &format!("{name}.ih"), d_in, 3 * hidden, true)?,
            hh: Linear::new(store, &format!("{name}.hh"), hidden, 3 * hidden, true)?,
            hidden,
        })
    }

    /// One step: `x: [N, d_in]`, `h: [N, hidden]` → `[N, hidden]`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let gi = self.ih.forward(tape, store, x)?;
        let gh = self.hh.forward(tape, store, h)?;
        let axis = tape.shape(gi).len() - 1;
        let n = self.hidden;
        let (ir, iz, in_) = (tape.slice(gi, axis, 0, n)?, tape.slice(gi, axis, n, n)?, tape.slice(gi, axis, 2 * n, n)?);
        let (hr, hz, hn) = (tape.slice(gh, axis, 0, n)?, tape.slice(gh, axis, n, n)?, tape.slice(gh, axis, 2 * n, n)?);
        let r_pre = tape.add(ir, hr)?;
        let r = tape.sigmoid(r_pre)?;
        let z_pre = tape.add(iz, hz)?;
        let z = tape.sigmoid(z_pre)?;
        let rhn = tape.mul(r, hn)?;
        let n_pre = tape.add(in_, rhn)?;
        let cand = tape.tanh(n_pre)?;
        // h' = n + z * (h - n)
        let diff = tape.sub(h, cand)?;
        let zd = tape.mul(z, diff)?;
        tape.add(cand, zd)
    }
}
