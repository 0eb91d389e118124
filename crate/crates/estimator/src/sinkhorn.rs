//! Alignment tensors and per-class Sinkhorn-Knopp normalization.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Positive `N x N x C` table of sample compatibilities, one slice per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTensor {
    n: usize,
    classes: usize,
    /// Layout `[class][i][j]`.
    values: Vec<f64>,
}

impl AlignmentTensor {
    /// Builds from a `[N][N][C]` row-major table.
    pub fn from_nnc(n: usize, classes: usize, nnc: &[f64]) -> Result<Self> {
        if nnc.len() != n * n * classes {
            return contract(
                "alignment",
                format!("{} values for N={n}, C={classes}", nnc.len()),
            );
        }
        let mut values = vec![0.0; nnc.len()];
        for i in 0..n {
            for j in 0..n {
                for k in 0..classes {
                    values[(k * n + i) * n + j] = nnc[(i * n + j) * classes + k];
                }
            }
        }
        Self::from_slices(n, classes, values)
    }

    /// Builds from class-major slices, `values[(k * N + i) * N + j]`.
    pub fn from_slices(n: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || classes == 0 || values.len() != n * n * classes {
            return contract(
                "alignment",
                format!("{} values for N={n}, C={classes}", values.len()),
            );
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return contract("alignment", format!("entries must be positive and finite, found {v}"));
        }
        Ok(Self { n, classes, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(k * self.n + i) * self.n + j]
    }

    /// The `N x N` slice of class `k`, row-major.
    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k * self.n * self.n..(k + 1) * self.n * self.n]
    }

    pub fn row_sums(&self, k: usize) -> Vec<f64> {
        self.slice(k).chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.n];
        for row in self.slice(k).chunks(self.n) {
            for (cj, v) in c.iter_mut().zip(row) {
                *cj += v;
            }
        }
        c
    }

    /// Largest per-class L1 deviation of row and column sums from the targets.
    pub fn marginal_residual(&self, rows: &[Vec<f64>], cols: &[Vec<f64>]) -> f64 {
        (0..self.classes)
            .map(|k| {
                let r: f64 = self.row_sums(k).iter().zip(&rows[k]).map(|(a, b)| (a - b).abs()).sum();
                let c: f64 = self.col_sums(k).iter().zip(&cols[k]).map(|(a, b)| (a - b).abs()).sum();
                r.max(c)
            })
            .fold(0.0, f64::max)
    }
}

/// `values[i,j,k] = exp(q1[i,k] . q2[j,k] / sqrt(d))` from `[N][C][d]` embeddings.
pub fn alignment_from_embeddings(q1: &[f64], q2: &[f64], n: usize, classes: usize, d: usize) -> Result<AlignmentTensor> {
    if q1.len() != n * classes * d || q2.len() != n * classes * d {
        return contract(
            "alignment",
            format!("embedding sizes {} and {} do not match N={n}, C={classes}, d={d}", q1.len(), q2.len()),
        );
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut values = vec![0.0; n * n * classes];
    for k in 0..classes {
        for i in 0..n {
            let a = &q1[(i * classes + k) * d..(i * classes + k + 1) * d];
            for j in 0..n {
                let b = &q2[(j * classes + k) * d..(j * classes + k + 1) * d];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                values[(k * n + i) * n + j] = (dot * scale).exp();
            }
        }
    }
    AlignmentTensor::from_slices(n, classes, values)
}

#[derive(Clone, Debug)]
pub struct SinkhornOutcome {
    pub tensor: AlignmentTensor,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

fn check_marginals(name: &str, m: &[Vec<f64>], n: usize, classes: usize) -> Result<()> {
    if m.len() != classes {
        return contract("sinkhorn", format!("{name}: {} classes, expected {classes}", m.len()));
    }
    for (k, v) in m.iter().enumerate() {
        if v.len() != n {
            return contract("sinkhorn", format!("{name}[{k}]: length {}, expected {n}", v.len()));
        }
        if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return contract("sinkhorn", format!("{name}[{k}]: non-positive marginal {x}"));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return contract("sinkhorn", format!("{name}[{k}]: sums to {s}, expected 1"));
        }
    }
    Ok(())
}

/// Alternating row / column scaling of every class slice until each slice
/// has row sums `rows[k]` and column sums `cols[k]` within `tol` (L1).
///
/// Inputs already within `tol` are returned untouched. Hitting `max_iter`
/// is not an error; the outcome reports the residual reached.
pub fn sinkhorn_normalize(
    tensor: &AlignmentTensor,
    rows: &[Vec<f64>],
    cols: &[Vec<f64>],
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornOutcome> {
    let (n, c) = (tensor.n, tensor.classes);
    check_marginals("rows", rows, n, c)?;
    check_marginals("cols", cols, n, c)?;
    let mut t = tensor.clone();
    let mut residual = t.marginal_residual(rows, cols);
    let mut iterations = 0;
    while residual > tol && iterations < max_iter {
        for k in 0..c {
            let slice = &mut t.values[k * n * n..(k + 1) * n * n];
            for (row, &target) in slice.chunks_mut(n).zip(&rows[k]) {
                let s: f64 = row.iter().sum();
                let f = target / s;
                row.iter_mut().for_each(|v| *v *= f);
            }
            let mut colsum = vec![0.0; n];
            for row in slice.chunks(n) {
                for (cs, v) in colsum.iter_mut().zip(row) {
                    *cs += v;
                }
            }
            let f: Vec<f64> = cols[k].iter().zip(&colsum).map(|(a, b)| a / b).collect();
            for row in slice.chunks_mut(n) {
                for (v, fj) in row.iter_mut().zip(&f) {
                    *v *= fj;
                }
            }
        }
        iterations += 1;
        residual = t.marginal_residual(rows, cols);
    }
    Ok(SinkhornOutcome {
        converged: residual <= tol,
        tensor: t,
        iterations,
        residual,
    })
}

/// Uniform `1/N` marginals for every class.
pub fn uniform_marginals(n: usize, classes: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / n as f64; n]; classes]
}
