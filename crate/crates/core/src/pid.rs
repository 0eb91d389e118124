//! Exact static partial information decomposition.
//!
//! `Q*` minimizes `I_Q(X1, X2; Y)` over the distributions that share the
//! `(X1, Y)` and `(X2, Y)` marginals of `P`. The problem is solved with
//! entropic mirror descent; the KL projection back onto the polytope splits
//! into one Sinkhorn scaling per target value.

use serde::{Deserialize, Serialize};

use crate::distributions::JointDistribution;
use crate::error::{Error, Result};
use crate::info;

const CLAMP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Consecutive small-change iterations required to stop.
    pub patience: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 20_000,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// `I_{Q*}(X1, X2; Y)` in bits.
    pub objective: f64,
    /// `I_{Q*}(X1; X2 | Y)` in bits.
    pub conditional_mi: f64,
    /// Largest absolute deviation from the two fixed marginals.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidResult {
    pub redundancy: f64,
    pub unique1: f64,
    pub unique2: f64,
    pub synergy: f64,
    /// `I_P(X1, X2; Y)` in bits.
    pub total: f64,
    pub q_star: JointDistribution,
    pub diagnostics: SolverDiagnostics,
}

impl PidResult {
    pub fn components(&self) -> [f64; 4] {
        [self.redundancy, self.unique1, self.unique2, self.synergy]
    }
}

/// Largest absolute violation of the `(x1, y)` and `(x2, y)` marginals of `p` by `q`.
pub fn marginal_residual(p: &JointDistribution, q: &JointDistribution) -> f64 {
    let (p1, p2) = (p.marginal_x1_y(), p.marginal_x2_y());
    let d1 = p1.iter().zip(q.marginal_x1_y()).map(|(a, b)| (a - b).abs());
    let d2 = p2.iter().zip(q.marginal_x2_y()).map(|(a, b)| (a - b).abs());
    d1.chain(d2).fold(0.0, f64::max)
}

/// Negative conditional entropy `-H_Q(Y | X1, X2)` in nats.
fn objective(q: &[f64], ny: usize) -> f64 {
    q.chunks(ny)
        .map(|row| {
            let m: f64 = row.iter().sum();
            row.iter().filter(|&&v| v > 0.0).map(|&v| v * (v / m).ln()).sum::<f64>()
        })
        .sum()
}

/// `-min(H(Y | X1), H(Y | X2))` in nats: no coupling in the polytope goes
/// below it, so reaching it certifies optimality.
fn objective_floor(p: &JointDistribution) -> f64 {
    let ny = p.dims()[2];
    let cond = |m: Vec<f64>| -> f64 {
        m.chunks(ny)
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().filter(|&&v| v > 0.0).map(|&v| -v * (v / s).ln()).sum::<f64>()
            })
            .sum()
    };
    -cond(p.marginal_x1_y()).min(cond(p.marginal_x2_y()))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + xs.map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// The same objective evaluated from log-probabilities.
fn log_objective(lq: &[f64], ny: usize) -> f64 {
    lq.chunks(ny)
        .map(|row| {
            let lm = log_sum_exp(row.iter().copied());
            row.iter()
                .filter(|l| l.is_finite())
                .map(|&l| l.exp() * (l - lm))
                .sum::<f64>()
        })
        .sum()
}

/// KL projection of the positive matrix `exp(logk)` (`[a, b]`) onto the
/// matrices with row sums `r` and column sums `c`, i.e. the Sinkhorn limit
/// `logk + u_i + v_j`. Solved by damped Newton on the dual, which stays
/// accurate when the limit has entries many orders of magnitude apart.
fn project_slice(logk: &mut [f64], r: &[f64], c: &[f64]) {
    let (a, b) = (r.len(), c.len());
    let ri: Vec<usize> = (0..a).filter(|&i| r[i] > 0.0).collect();
    let cj: Vec<usize> = (0..b).filter(|&j| c[j] > 0.0).collect();
    for i in 0..a {
        for j in 0..b {
            if r[i] <= 0.0 || c[j] <= 0.0 {
                logk[i * b + j] = f64::NEG_INFINITY;
            }
        }
    }
    let (m, n) = (ri.len(), cj.len());
    if m == 0 || n == 0 {
        return;
    }
    let top = logk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logk.iter_mut().for_each(|l| *l -= top);
    let at = |lk: &[f64], i: usize, j: usize| lk[ri[i] * b + cj[j]];
    let mut u: Vec<f64> = (0..m)
        .map(|i| r[ri[i]].ln() - log_sum_exp((0..n).map(|j| at(logk, i, j))))
        .collect();
    let mut v = vec![0.0; n];
    // Dual value and largest marginal violation.
    let dual = |u: &[f64], v: &[f64]| -> (f64, f64) {
        let mut s = 0.0;
        let mut rs = vec![0.0; m];
        let mut cs = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let e = (at(logk, i, j) + u[i] + v[j]).exp();
                s += e;
                rs[i] += e;
                cs[j] += e;
            }
        }
        let err = (0..m)
            .map(|i| (rs[i] - r[ri[i]]).abs())
            .chain((0..n).map(|j| (cs[j] - c[cj[j]]).abs()))
            .fold(0.0, f64::max);
        let value = s - (0..m).map(|i| r[ri[i]] * u[i]).sum::<f64>() - (0..n).map(|j| c[cj[j]] * v[j]).sum::<f64>();
        (value, err)
    };
    let dim = m + n - 1;
    for _ in 0..50 {
        let mut x = vec![0.0; m * n];
        let mut rs = vec![0.0; m];
        let mut cs = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let e = (at(logk, i, j) + u[i] + v[j]).exp();
                x[i * n + j] = e;
                rs[i] += e;
                cs[j] += e;
            }
        }
        let mut g = nalgebra::DVector::zeros(dim);
        for i in 0..m {
            g[i] = rs[i] - r[ri[i]];
        }
        for j in 0..n - 1 {
            g[m + j] = cs[j] - c[cj[j]];
        }
        let err = g.amax().max((cs[n - 1] - c[cj[n - 1]]).abs());
        if err <= 1e-15 {
            break;
        }
        let mut h = nalgebra::DMatrix::zeros(dim, dim);
        for i in 0..m {
            h[(i, i)] = rs[i];
            for j in 0..n - 1 {
                h[(i, m + j)] = x[i * n + j];
                h[(m + j, i)] = x[i * n + j];
            }
        }
        for j in 0..n - 1 {
            h[(m + j, m + j)] = cs[j];
        }
        let ridge = 1e-14 * h.diagonal().amax();
        for k in 0..dim {
            h[(k, k)] += ridge;
        }
        let Some(chol) = h.cholesky() else { break };
        let d = -chol.solve(&g);
        let slope = g.dot(&d);
        let (f0, _) = dual(&u, &v);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let un: Vec<f64> = (0..m).map(|i| u[i] + step * d[i]).collect();
            let vn: Vec<f64> = (0..n).map(|j| if j < n - 1 { v[j] + step * d[m + j] } else { 0.0 }).collect();
            let (fn_, en) = dual(&un, &vn);
            // Near the solution the dual value is dominated by rounding, so a
            // halved violation also counts as progress.
            if fn_ <= f0 + 1e-4 * step * slope || en <= 0.5 * err {
                moved = true;
                u = un;
                v = vn;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    for i in 0..m {
        for j in 0..n {
            logk[ri[i] * b + cj[j]] += u[i] + v[j];
        }
    }
}

struct Polytope {
    dims: [usize; 3],
    /// `P(x1, y)` transposed to `[y][x1]`.
    rows: Vec<Vec<f64>>,
    /// `P(x2, y)` transposed to `[y][x2]`.
    cols: Vec<Vec<f64>>,
}

impl Polytope {
    fn new(p: &JointDistribution) -> Self {
        let [a, b, c] = p.dims();
        let m1 = p.marginal_x1_y();
        let m2 = p.marginal_x2_y();
        Self {
            dims: p.dims(),
            rows: (0..c).map(|y| (0..a).map(|x| m1[x * c + y]).collect()).collect(),
            cols: (0..c).map(|y| (0..b).map(|x| m2[x * c + y]).collect()).collect(),
        }
    }

    /// Projects log-probabilities (`y` fastest) onto the polytope in place.
    fn project(&self, lq: &mut [f64]) {
        let [a, b, c] = self.dims;
        let mut slice = vec![0.0; a * b];
        for y in 0..c {
            for k in 0..a * b {
                slice[k] = lq[k * c + y];
            }
            project_slice(&mut slice, &self.rows[y], &self.cols[y]);
            for k in 0..a * b {
                lq[k * c + y] = slice[k];
            }
        }
    }

    /// Log of the independent coupling `P(x1, y) P(x2, y) / P(y)`.
    fn independent(&self) -> Vec<f64> {
        let [a, b, c] = self.dims;
        let mut lq = vec![f64::NEG_INFINITY; a * b * c];
        for y in 0..c {
            let py: f64 = self.rows[y].iter().sum();
            for x1 in 0..a {
                for x2 in 0..b {
                    let v = self.rows[y][x1] * self.cols[y][x2];
                    if v > 0.0 {
                        lq[(x1 * b + x2) * c + y] = v.ln() - py.ln();
                    }
                }
            }
        }
        lq
    }
}

/// Equality-constrained Newton refinement from a feasible interior point.
///
/// Cells below `1e-13` are held fixed; steps stay inside the positive orthant
/// and are only kept when the objective decreases.
fn newton_polish(polytope: &Polytope, lq: &[f64]) -> Vec<f64> {
    let [a, b, c] = polytope.dims;
    let mut best = lq.to_vec();
    let mut fbest = log_objective(&best, c);
    for _ in 0..40 {
        let q: Vec<f64> = best.iter().map(|l| l.exp()).collect();
        let vars: Vec<usize> = (0..q.len()).filter(|&i| q[i] > 1e-13).collect();
        let nv = vars.len();
        if nv == 0 || nv > 1500 {
            break;
        }
        let masses: Vec<f64> = q.chunks(c).map(|r| r.iter().sum()).collect();
        let nc = c * (a + b);
        let dim = nv + nc;
        let mut kkt = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = nalgebra::DVector::<f64>::zeros(dim);
        for (k, &i) in vars.iter().enumerate() {
            let cell = i / c;
            rhs[k] = -(q[i] / masses[cell]).ln();
            for (k2, &i2) in vars.iter().enumerate() {
                if i2 / c == cell {
                    kkt[(k, k2)] -= 1.0 / masses[cell];
                }
            }
            kkt[(k, k)] += 1.0 / q[i];
            let (x1, x2, y) = (cell / b, cell % b, i % c);
            for con in [y * a + x1, c * a + y * b + x2] {
                kkt[(nv + con, k)] = 1.0;
                kkt[(k, nv + con)] = 1.0;
            }
        }
        let scale = (0..nv).map(|k| kkt[(k, k)].abs()).fold(0.0, f64::max);
        for k in 0..nv {
            kkt[(k, k)] += 1e-13 * scale;
        }
        for k in nv..dim {
            kkt[(k, k)] -= 1e-13;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { break };
        let d: Vec<f64> = (0..nv).map(|k| sol[k]).collect();
        let mut step: f64 = 1.0;
        for (k, &i) in vars.iter().enumerate() {
            if d[k] < 0.0 {
                step = step.min(-0.99 * q[i] / d[k]);
            }
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut cand = q.clone();
            for (k, &i) in vars.iter().enumerate() {
                cand[i] += step * d[k];
            }
            let mut lc: Vec<f64> = cand.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
            polytope.project(&mut lc);
            let fc = log_objective(&lc, c);
            if fc < fbest {
                improved = fbest - fc > 1e-16 * fbest.abs().max(1.0);
                best = lc;
                fbest = fc;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    best
}

/// Mirror step `q * q(y|x1,x2)^(-eta)` in log space.
fn mirror_step(lq: &[f64], ny: usize, eta: f64) -> Vec<f64> {
    let mut out = lq.to_vec();
    for row in out.chunks_mut(ny) {
        let lm = log_sum_exp(row.iter().copied());
        for l in row.iter_mut().filter(|l| l.is_finite()) {
            *l -= eta * (*l - lm);
        }
    }
    out
}

fn diagnostics(p: &JointDistribution, q: &JointDistribution, iterations: usize) -> SolverDiagnostics {
    SolverDiagnostics {
        iterations,
        objective: info::mi_joint(q),
        conditional_mi: info::cmi_x1_x2_given_y(q),
        residual: marginal_residual(p, q),
    }
}

fn solve(p: &JointDistribution, opts: &SolverOptions) -> Result<(JointDistribution, SolverDiagnostics)> {
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid(format!("solver tolerance must be positive, got {}", opts.tol)));
    }
    let dims = p.dims();
    let ny = dims[2];
    let polytope = Polytope::new(p);
    let floor = objective_floor(p);
    let at_floor = |f: f64| f - floor <= opts.tol * floor.abs().max(1.0);
    if at_floor(objective(p.probs(), ny)) {
        return Ok((p.clone(), diagnostics(p, p, 0)));
    }
    let mut lq = polytope.independent();
    let mut f = log_objective(&lq, ny);
    let mut eta = 1.0;
    let mut calm = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let mut cand = mirror_step(&lq, ny, eta);
        polytope.project(&mut cand);
        let fc = log_objective(&cand, ny);
        if fc <= f {
            let change = (f - fc) / f.abs().max(1.0);
            lq = cand;
            f = fc;
            eta = (eta * 2.0).min(1e6);
            calm = if change < opts.tol { calm + 1 } else { 0 };
            if at_floor(f) {
                converged = true;
                break;
            }
        } else {
            eta *= 0.5;
        }
        // A vanishing step size means no descent direction is left.
        if calm >= opts.patience || eta < 1e-10 {
            converged = true;
            break;
        }
    }
    let lq = newton_polish(&polytope, &lq);
    let f = log_objective(&lq, ny);
    let mut q: Vec<f64> = lq.iter().map(|l| l.exp()).collect();
    // P is itself feasible; never report a coupling worse than it.
    if objective(p.probs(), ny) < f {
        q = p.probs().to_vec();
    }
    let q = JointDistribution::from_probs(dims, q)?;
    let diagnostics = diagnostics(p, &q, iterations);
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            objective: diagnostics.objective,
            residual: diagnostics.residual,
            best: Box::new(q),
        });
    }
    Ok((q, diagnostics))
}

/// The synergy-free coupling `Q*` of `P`.
pub fn solve_q_star(p: &JointDistribution, tol: f64, max_iters: usize) -> Result<JointDistribution> {
    let opts = SolverOptions {
        tol,
        max_iters,
        ..SolverOptions::default()
    };
    solve(p, &opts).map(|(q, _)| q)
}

pub fn decompose(p: &JointDistribution) -> Result<PidResult> {
    decompose_with(p, &SolverOptions::default())
}

pub fn decompose_with(p: &JointDistribution, opts: &SolverOptions) -> Result<PidResult> {
    let (q_star, diagnostics) = solve(p, opts)?;
    let i1 = info::mi_x1_y(p);
    let i2 = info::mi_x2_y(p);
    let total = info::mi_joint(p);
    let iq = diagnostics.objective;
    let clamp = |component: &'static str, v: f64| -> Result<f64> {
        if v >= 0.0 {
            Ok(v)
        } else if v >= -CLAMP {
            Ok(0.0)
        } else {
            Err(Error::Invariant { component, value: v })
        }
    };
    Ok(PidResult {
        redundancy: clamp("redundancy", i1 + i2 - iq)?,
        unique1: clamp("unique1", iq - i2)?,
        unique2: clamp("unique2", iq - i1)?,
        synergy: clamp("synergy", total - iq)?,
        total,
        q_star,
        diagnostics,
    })
}
