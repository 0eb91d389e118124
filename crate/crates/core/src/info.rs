//! Plug-in entropies and mutual informations in bits.

use crate::distributions::JointDistribution;

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.log2()).sum::<f64>()
}

/// Mutual information of a 2-D table `[rows, cols]` (row-major).
pub fn mutual_information_2d(table: &[f64], rows: usize, cols: usize) -> f64 {
    let mut pr = vec![0.0; rows];
    let mut pc = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            pr[r] += table[r * cols + c];
            pc[c] += table[r * cols + c];
        }
    }
    let mut mi = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let p = table[r * cols + c];
            if p > 0.0 {
                mi += p * (p / (pr[r] * pc[c])).log2();
            }
        }
    }
    mi.max(0.0)
}

/// `I(X1; Y)`.
pub fn mi_x1_y(p: &JointDistribution) -> f64 {
    let [a, _, c] = p.dims();
    mutual_information_2d(&p.marginal_x1_y(), a, c)
}

/// `I(X2; Y)`.
pub fn mi_x2_y(p: &JointDistribution) -> f64 {
    let [_, b, c] = p.dims();
    mutual_information_2d(&p.marginal_x2_y(), b, c)
}

/// `I(X1, X2; Y)`.
pub fn mi_joint(p: &JointDistribution) -> f64 {
    let [a, b, c] = p.dims();
    mutual_information_2d(p.probs(), a * b, c)
}

/// `H(Y | X1, X2)`.
pub fn conditional_entropy_y(p: &JointDistribution) -> f64 {
    let c = p.dims()[2];
    p.probs()
        .chunks(c)
        .map(|row| {
            let m: f64 = row.iter().sum();
            row.iter().filter(|&&q| q > 0.0).map(|&q| -q * (q / m).log2()).sum::<f64>()
        })
        .sum()
}

/// `I(X1; X2 | Y)`.
pub fn cmi_x1_x2_given_y(p: &JointDistribution) -> f64 {
    let [a, b, c] = p.dims();
    let py = p.marginal_y();
    let p1 = p.marginal_x1_y();
    let p2 = p.marginal_x2_y();
    let mut v = 0.0;
    for x1 in 0..a {
        for x2 in 0..b {
            for y in 0..c {
                let q = p.get(x1, x2, y);
                if q > 0.0 {
                    v += q * (q * py[y] / (p1[x1 * c + y] * p2[x2 * c + y])).log2();
                }
            }
        }
    }
    v.max(0.0)
}

/// Binary entropy `H_b(e)` in bits.
pub fn binary_entropy(e: f64) -> f64 {
    entropy(&[e, 1.0 - e])
}

/// Jensen-Shannon divergence in bits with `eps` smoothing inside the logs.
pub fn jsd(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .map(|(&x, &y)| x * ((x + eps) / (y + eps)).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}
