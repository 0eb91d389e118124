//! Wengert tape: every forward primitive appends a node holding its value
//! and the data its backward rule needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Training mode enables dropout; evaluation mode makes it the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ScaleRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        shared_rhs: bool,
    },
    Transpose(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Take {
        a: usize,
        positions: Vec<usize>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Normalize {
        a: usize,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: usize,
        w: usize,
        batch: usize,
        len: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(usize),
    SumAxis {
        a: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    check_finite: bool,
    buffer_updates: Vec<(ParamId, Vec<f64>)>,
}

fn strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn unary_map(v: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        .expect("same shape")
}

/// `out[n,m] += a[n,k] * b[k,m]`
fn mm(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,k] += g[n,m] * b[k,m]^T`
fn mm_bt(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += s;
        }
    }
}

/// `out[k,m] += a[n,k]^T * g[n,m]`
fn mm_at(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl Tape {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            check_finite: cfg!(debug_assertions),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Enables or disables the per-operation NaN/Inf scan.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name(&op),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter from `store`. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: trainable,
            param: trainable.then_some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(op, va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same("add", a, b, |x, y| x + y)?;
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same("sub", a, b, |x, y| x - y)?;
        self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same("mul", a, b, |x, y| x * y)?;
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same("div", a, b, |x, y| x / y)?;
        self.push(v, Op::Div(a.0, b.0), &[a.0, b.0])
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.last_dim();
        if vb.len() != d {
            return shape_err(op, va.shape(), vb.shape());
        }
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % d]))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// `a[..., d] + b[d]`, broadcasting `b` over every leading index.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.row_broadcast("add_row", a, b, |x, y| x + y)?;
        self.push(v, Op::AddRow(a.0, b.0), &[a.0, b.0])
    }

    /// `a[..., d] * b[d]`, broadcasting `b` over every leading index.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.row_broadcast("mul_row", a, b, |x, y| x * y)?;
        self.push(v, Op::MulRow(a.0, b.0), &[a.0, b.0])
    }

    /// Multiplies every last-axis row `i` of `a` by the scalar `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = (self.value(a), self.value(s));
        let d = va.last_dim();
        if vs.len() * d != va.len() {
            return shape_err("scale_rows", va.shape(), vs.shape());
        }
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vs.data()[i / d])
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        self.push(v, Op::ScaleRows(a.0, s.0), &[a.0, s.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = unary_map(self.value(a), |x| x * c);
        self.push(v, Op::Scale(a.0, c), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = unary_map(self.value(a), |x| x + c);
        self.push(v, Op::AddScalar(a.0), &[a.0])
    }

    /// Matrix product.
    ///
    /// `[n,k] x [k,m]`, `[B,n,k] x [B,k,m]` (batched) or `[.., k] x [k,m]`
    /// (shared right-hand side applied to every leading row).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, n, k, m, shared_rhs, out_shape) = match (sa.len(), sb.len()) {
            (ra, 2) if ra >= 1 => {
                let k = sa[ra - 1];
                if sb[0] != k {
                    return shape_err("matmul", &sa, &sb);
                }
                let n = sa[..ra - 1].iter().product::<usize>();
                let mut out = sa[..ra - 1].to_vec();
                out.push(sb[1]);
                (1, n, k, sb[1], true, out)
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return shape_err("matmul", &sa, &sb);
                }
                (sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
            }
            _ => return shape_err("matmul", &sa, &sb),
        };
        let mut out = vec![0.0; batch * n * m];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                mm(
                    &da[bi * n * k..(bi + 1) * n * k],
                    &db[bi * k * m..(bi + 1) * k * m],
                    &mut out[bi * n * m..(bi + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        let v = Tensor::new(out_shape, out)?;
        self.push(
            v,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                n,
                k,
                m,
                shared_rhs,
            },
            &[a.0, b.0],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() < 2 {
            return contract("transpose", format!("rank-{} input", s.len()));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = va.len() / (r * c);
        let mut out = vec![0.0; va.len()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = va.data()[base + i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Transpose(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return shape_err("reshape", va.shape(), shape);
        }
        let v = va.reshaped(shape.to_vec())?;
        self.push(v, Op::Reshape(a.0), &[a.0])
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return contract("concat", "no inputs"),
        };
        if axis >= first.len() {
            return contract("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = strides(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        self.push(
            v,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Sub-range `start..start + len` of `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return contract(
                "slice",
                format!("range {start}..{} invalid for axis {axis} of {s:?}", start + len),
            );
        }
        let (outer, alen, inner) = strides(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::Slice {
                a: a.0,
                axis,
                start,
            },
            &[a.0],
        )
    }

    /// Gathers flat element positions of `a` into a tensor of `shape`.
    pub fn take(&mut self, a: Var, positions: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != positions.len() {
            return shape_err("take", shape, &[positions.len()]);
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= va.len()) {
            return contract("take", format!("position {p} out of range {}", va.len()));
        }
        let data = positions.iter().map(|&p| va.data()[p]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        self.push(v, Op::Take { a: a.0, positions }, &[a.0])
    }

    /// Selects sub-tensors along axis 0; indices may repeat.
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let inner: usize = s[1..].iter().product();
        if let Some(&i) = idx.iter().find(|&&i| i >= s[0]) {
            return contract("index_select", format!("index {i} out of range {}", s[0]));
        }
        let positions = idx
            .iter()
            .flat_map(|&i| i * inner..(i + 1) * inner)
            .collect();
        let mut shape = s;
        shape[0] = idx.len();
        self.take(a, positions, &shape)
    }

    fn last_axis_rows(&self, a: Var) -> (usize, usize) {
        let v = self.value(a);
        let d = v.last_dim();
        (v.len() / d, d)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.last_axis_rows(a);
        let va = self.value(a);
        let mut out = vec![0.0; va.len()];
        for r in 0..rows {
            let x = &va.data()[r * d..(r + 1) * d];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (x[j] - mx).exp();
                out[r * d + j] = e;
                z += e;
            }
            for o in &mut out[r * d..(r + 1) * d] {
                *o /= z;
            }
        }
        let v = Tensor::new(va.shape().to_vec(), out)?;
        self.push(v, Op::Softmax(a.0), &[a.0])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.last_axis_rows(a);
        let va = self.value(a);
        let mut out = vec![0.0; va.len()];
        for r in 0..rows {
            let x = &va.data()[r * d..(r + 1) * d];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + x.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..d {
                out[r * d + j] = x[j] - lse;
            }
        }
        let v = Tensor::new(va.shape().to_vec(), out)?;
        self.push(v, Op::LogSoftmax(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = unary_map(self.value(a), |x| x.max(0.0));
        self.push(v, Op::Relu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = unary_map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = unary_map(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = unary_map(self.value(a), f64::exp);
        self.push(v, Op::Exp(a.0), &[a.0])
    }

    /// Natural logarithm; non-positive inputs produce a non-finite error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let v = unary_map(self.value(a), f64::ln);
        self.push(v, Op::Log(a.0), &[a.0])
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.last_axis_rows(a);
        let va = self.value(a);
        let mut out = vec![0.0; va.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &va.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (x[j] - mean) * rs;
            }
            rstd.push(rs);
        }
        let v = Tensor::new(va.shape().to_vec(), out)?;
        self.push(v, Op::Normalize { a: a.0, rstd }, &[a.0])
    }

    /// Same-padded 1-D convolution over time.
    ///
    /// `x`: `[T, C_in]` or `[B, T, C_in]`; `w`: `[C_out, C_in, K]` with odd `K`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (batch, len, c_in) = match sx.len() {
            2 => (1, sx[0], sx[1]),
            3 => (sx[0], sx[1], sx[2]),
            _ => return shape_err("conv1d", &sx, &sw),
        };
        if sw.len() != 3 || sw[1] != c_in || sw[2] % 2 == 0 {
            return shape_err("conv1d", &sx, &sw);
        }
        let (c_out, kernel) = (sw[0], sw[2]);
        let pad = kernel / 2;
        let mut out = vec![0.0; batch * len * c_out];
        {
            let (dx, dw) = (self.value(x).data(), self.value(w).data());
            for b in 0..batch {
                for t in 0..len {
                    for j in 0..kernel {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let xrow = &dx[(b * len + src as usize) * c_in..][..c_in];
                        for o in 0..c_out {
                            let mut s = 0.0;
                            for c in 0..c_in {
                                s += dw[(o * c_in + c) * kernel + j] * xrow[c];
                            }
                            out[(b * len + t) * c_out + o] += s;
                        }
                    }
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().expect("rank checked") = c_out;
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                batch,
                len,
                c_in,
                c_out,
                kernel,
            },
            &[x.0, w.0],
        )
    }

    /// Mean cross-entropy (nats) of `[N, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, c) = self.last_axis_rows(logits);
        if rows != labels.len() {
            return shape_err("cross_entropy", self.shape(logits), &[labels.len()]);
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return contract("cross_entropy", format!("label {l} outside {c} classes"));
        }
        let vl = self.value(logits);
        let mut probs = vec![0.0; vl.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let x = &vl.data()[r * c..(r + 1) * c];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (x[j] - mx).exp() / z;
            }
            loss += mx + z.ln() - x[labels[r]];
        }
        let v = Tensor::scalar(loss / rows as f64);
        self.push(
            v,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            &[logits.0],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`. Reducing the only axis yields shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return contract("sum_axis", format!("axis {axis} out of range for {s:?}"));
        }
        let (outer, alen, inner) = strides(&s, axis);
        let va = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..alen {
                for i in 0..inner {
                    out[o * inner + i] += va.data()[(o * alen + j) * inner + i];
                }
            }
        }
        let mut shape: Vec<usize> = s
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::SumAxis {
                a: a.0,
                outer,
                axis_len: alen,
                inner,
            },
            &[a.0],
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Inverted dropout with a mask drawn from the tape's seeded generator.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return contract("dropout", format!("probability {p} outside [0, 1)"));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let n = self.value(a).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        self.push(v, Op::Dropout { a: a.0, mask }, &[a.0])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return contract("backward", "empty tape");
        }
        if self.value(loss).len() != 1 {
            return contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Queues a new value for a non-trainable buffer (e.g. running statistics).
    pub fn record_buffer(&mut self, id: ParamId, value: Vec<f64>) {
        self.buffer_updates.push((id, value));
    }

    /// Writes queued buffer values into `store`.
    pub fn apply_buffers(&self, store: &mut ParamStore) {
        for (id, v) in &self.buffer_updates {
            store.value_mut(*id).data_mut().copy_from_slice(v);
        }
    }

    /// Adds parameter gradients from `grads` into `store`.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.add_grad(id, g);
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(slot);
        };
        let val = |j: usize| nodes[j].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / vb[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::AddRow(a, b) => {
                let d = val(*b).len();
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k % d] += gv;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let d = vb.len();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k % d];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..g.len() {
                        s[k % d] += g[k] * va[k];
                    }
                });
            }
            Op::ScaleRows(a, sv) => {
                let (va, vs) = (val(*a), val(*sv));
                let d = va.len() / vs.len();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vs[k / d];
                    }
                });
                acc(*sv, &mut |s| {
                    for k in 0..g.len() {
                        s[k / d] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
            }
            Op::AddScalar(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                shared_rhs,
            } => {
                let (va, vb) = (val(*a), val(*b));
                let (batch, n, k, m) = (*batch, *n, *k, *m);
                acc(*a, &mut |s| {
                    for bi in 0..batch {
                        mm_bt(
                            &g[bi * n * m..(bi + 1) * n * m],
                            &vb[bi * k * m..(bi + 1) * k * m],
                            &mut s[bi * n * k..(bi + 1) * n * k],
                            n,
                            k,
                            m,
                        );
                    }
                });
                acc(*b, &mut |s| {
                    if *shared_rhs {
                        mm_at(va, g, s, n, k, m);
                    } else {
                        for bi in 0..batch {
                            mm_at(
                                &va[bi * n * k..(bi + 1) * n * k],
                                &g[bi * n * m..(bi + 1) * n * m],
                                &mut s[bi * k * m..(bi + 1) * k * m],
                                n,
                                k,
                                m,
                            );
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s_out = nodes[i].value.shape();
                let (r, c) = (s_out[s_out.len() - 2], s_out[s_out.len() - 1]);
                let batch = g.len() / (r * c);
                acc(*a, &mut |s| {
                    for b in 0..batch {
                        let base = b * r * c;
                        for x in 0..r {
                            for y in 0..c {
                                s[base + y * r + x] += g[base + x * c + y];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * mask[k];
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = strides(shape, *axis);
                let mut offset = 0;
                for &x in inputs {
                    let len = nodes[x].value.shape()[*axis];
                    acc(x, &mut |s| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for q in 0..len * inner {
                                s[dst + q] += g[src + q];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = nodes[*a].value.shape();
                let (outer, alen, inner) = strides(in_shape, *axis);
                let len = nodes[i].value.shape()[*axis];
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        let dst = o * alen * inner + start * inner;
                        let src = o * len * inner;
                        for q in 0..len * inner {
                            s[dst + q] += g[src + q];
                        }
                    }
                });
            }
            Op::Take { a, positions } => {
                acc(*a, &mut |s| {
                    for (k, &p) in positions.iter().enumerate() {
                        s[p] += g[k];
                    }
                });
            }
            Op::Softmax(a) => {
                let d = nodes[i].value.last_dim();
                acc(*a, &mut |s| {
                    for r in 0..g.len() / d {
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            s[r * d + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let d = nodes[i].value.last_dim();
                acc(*a, &mut |s| {
                    for r in 0..g.len() / d {
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let gs: f64 = gr.iter().sum();
                        for j in 0..d {
                            s[r * d + j] += gr[j] - y[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if va[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / va[k];
                    }
                });
            }
            Op::Normalize { a, rstd } => {
                let d = nodes[i].value.last_dim();
                acc(*a, &mut |s| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            s[r * d + j] += rs * (gr[j] - mg - y[j] * mgy);
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                batch,
                len,
                c_in,
                c_out,
                kernel,
            } => {
                let (vx, vw) = (val(*x), val(*w));
                let (batch, len, c_in, c_out, kernel) = (*batch, *len, *c_in, *c_out, *kernel);
                let pad = kernel / 2;
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for b in 0..batch {
                        for t in 0..len {
                            for j in 0..kernel {
                                let src = t as isize + j as isize - pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                f(b, t, j, src as usize);
                            }
                        }
                    }
                };
                acc(*x, &mut |s| {
                    taps(&mut |b, t, j, src| {
                        for o in 0..c_out {
                            let gv = g[(b * len + t) * c_out + o];
                            for c in 0..c_in {
                                s[(b * len + src) * c_in + c] += gv * vw[(o * c_in + c) * kernel + j];
                            }
                        }
                    })
                });
                acc(*w, &mut |s| {
                    taps(&mut |b, t, j, src| {
                        for o in 0..c_out {
                            let gv = g[(b * len + t) * c_out + o];
                            for c in 0..c_in {
                                s[(o * c_in + c) * kernel + j] += gv * vx[(b * len + src) * c_in + c];
                            }
                        }
                    })
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |s| {
                    for r in 0..n {
                        for j in 0..c {
                            let target = if labels[r] == j { 1.0 } else { 0.0 };
                            s[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SumAxis {
                a,
                outer,
                axis_len,
                inner,
            } => {
                let (outer, alen, inner) = (*outer, *axis_len, *inner);
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for j in 0..alen {
                            for q in 0..inner {
                                s[(o * alen + j) * inner + q] += g[o * inner + q];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::ScaleRows(..) => "scale_rows",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MatMul { .. } => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Take { .. } => "take",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Normalize { .. } => "normalize",
        Op::Conv1d { .. } => "conv1d",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
        Op::SumAxis { .. } => "sum_axis",
        Op::Dropout { .. } => "dropout",
    }
}
