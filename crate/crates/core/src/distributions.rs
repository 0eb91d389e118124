//! Finite joint distributions over `(X1, X2, Y)` and the multimodal
//! sequences they are estimated from.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability table over `(x1, x2, y)`, stored row-major with `y` fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    dims: [usize; 3],
    prob: Vec<f64>,
}

impl JointDistribution {
    /// Normalizes a nonnegative count table of shape `dims`.
    pub fn from_counts(dims: [usize; 3], counts: &[u64]) -> Result<Self> {
        check_dims(dims, counts.len())?;
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyData("all counts are zero".into()));
        }
        let prob = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { dims, prob })
    }

    /// Wraps a probability table, renormalizing away rounding error.
    pub fn from_probs(dims: [usize; 3], probs: Vec<f64>) -> Result<Self> {
        check_dims(dims, probs.len())?;
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invalid("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyData("probability table sums to zero".into()));
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self {
            dims,
            prob: probs.into_iter().map(|p| p / total).collect(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.prob
    }

    pub fn index(&self, x1: usize, x2: usize, y: usize) -> usize {
        (x1 * self.dims[1] + x2) * self.dims[2] + y
    }

    pub fn get(&self, x1: usize, x2: usize, y: usize) -> f64 {
        self.prob[self.index(x1, x2, y)]
    }

    /// `P(x1, y)` as a `[|X1|, |Y|]` table.
    pub fn marginal_x1_y(&self) -> Vec<f64> {
        let [a, b, c] = self.dims;
        let mut out = vec![0.0; a * c];
        for x1 in 0..a {
            for x2 in 0..b {
                for y in 0..c {
                    out[x1 * c + y] += self.get(x1, x2, y);
                }
            }
        }
        out
    }

    /// `P(x2, y)` as a `[|X2|, |Y|]` table.
    pub fn marginal_x2_y(&self) -> Vec<f64> {
        let [a, b, c] = self.dims;
        let mut out = vec![0.0; b * c];
        for x1 in 0..a {
            for x2 in 0..b {
                for y in 0..c {
                    out[x2 * c + y] += self.get(x1, x2, y);
                }
            }
        }
        out
    }

    /// `P(x1, x2)` as a `[|X1|, |X2|]` table.
    pub fn marginal_x1_x2(&self) -> Vec<f64> {
        let c = self.dims[2];
        self.prob.chunks(c).map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let c = self.dims[2];
        let mut out = vec![0.0; c];
        for (i, p) in self.prob.iter().enumerate() {
            out[i % c] += p;
        }
        out
    }

    /// The same distribution with the roles of `X1` and `X2` exchanged.
    pub fn swap_sources(&self) -> Self {
        let [a, b, c] = self.dims;
        let mut prob = vec![0.0; self.prob.len()];
        for x1 in 0..a {
            for x2 in 0..b {
                for y in 0..c {
                    prob[(x2 * a + x1) * c + y] = self.get(x1, x2, y);
                }
            }
        }
        Self {
            dims: [b, a, c],
            prob,
        }
    }
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Invalid(format!("support sizes must be positive, got {dims:?}")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::Invalid(format!("table of {len} cells does not match {dims:?}")));
    }
    Ok(())
}

/// Per-timestep observations of one modality.
#[derive(Clone, Debug, PartialEq)]
pub enum ModalityData {
    Discrete { alphabet: usize, symbols: Vec<u32> },
    /// Row-major `[n, dim]` feature matrix.
    Continuous { dim: usize, values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Modality {
    pub name: String,
    pub data: ModalityData,
}

impl Modality {
    pub fn len(&self) -> usize {
        match &self.data {
            ModalityData::Discrete { symbols, .. } => symbols.len(),
            ModalityData::Continuous { dim, values } => values.len() / dim.max(&1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of the neural-path feature vector (one-hot width for discrete data).
    pub fn feature_dim(&self) -> usize {
        match &self.data {
            ModalityData::Discrete { alphabet, .. } => *alphabet,
            ModalityData::Continuous { dim, .. } => *dim,
        }
    }

    /// Feature vector at time `t` (0-based); discrete symbols are one-hot encoded.
    pub fn features_at(&self, t: usize) -> Vec<f64> {
        match &self.data {
            ModalityData::Discrete { alphabet, symbols } => {
                let mut v = vec![0.0; *alphabet];
                v[symbols[t] as usize] = 1.0;
                v
            }
            ModalityData::Continuous { dim, values } => values[t * dim..(t + 1) * dim].to_vec(),
        }
    }
}

/// Aligned multimodal sequences plus a discrete target sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBundle {
    modalities: Vec<Modality>,
    target: Vec<u32>,
    target_alphabet: usize,
}

impl SequenceBundle {
    pub fn new(modalities: Vec<Modality>, target: Vec<u32>, target_alphabet: usize) -> Result<Self> {
        let n = target.len();
        if n == 0 {
            return Err(Error::EmptyData("empty target sequence".into()));
        }
        if modalities.is_empty() {
            return Err(Error::Invalid("bundle needs at least one modality".into()));
        }
        if let Some(&y) = target.iter().find(|&&y| y as usize >= target_alphabet) {
            return Err(Error::Invalid(format!("target symbol {y} outside alphabet {target_alphabet}")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &modalities {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate modality name {}", m.name)));
            }
            if m.len() != n {
                return Err(Error::Invalid(format!(
                    "modality {} has length {}, target has {n}",
                    m.name,
                    m.len()
                )));
            }
            match &m.data {
                ModalityData::Discrete { alphabet, symbols } => {
                    if let Some(&s) = symbols.iter().find(|&&s| s as usize >= *alphabet) {
                        return Err(Error::Invalid(format!(
                            "modality {}: symbol {s} outside alphabet {alphabet}",
                            m.name
                        )));
                    }
                }
                ModalityData::Continuous { dim, values } => {
                    if *dim == 0 || values.len() != n * dim {
                        return Err(Error::Invalid(format!("modality {}: bad feature matrix", m.name)));
                    }
                }
            }
        }
        Ok(Self {
            modalities,
            target,
            target_alphabet,
        })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn target(&self) -> &[u32] {
        &self.target
    }

    pub fn target_alphabet(&self) -> usize {
        self.target_alphabet
    }

    pub fn names(&self) -> Vec<&str> {
        self.modalities.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Invalid(format!("unknown modality {name}")))
    }

    /// Copy of the bundle restricted to timesteps `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let modalities = self
            .modalities
            .iter()
            .map(|m| Modality {
                name: m.name.clone(),
                data: match &m.data {
                    ModalityData::Discrete { alphabet, symbols } => ModalityData::Discrete {
                        alphabet: *alphabet,
                        symbols: symbols[range.clone()].to_vec(),
                    },
                    ModalityData::Continuous { dim, values } => ModalityData::Continuous {
                        dim: *dim,
                        values: values[range.start * dim..range.end * dim].to_vec(),
                    },
                },
            })
            .collect();
        Self::new(modalities, self.target[range].to_vec(), self.target_alphabet)
    }

    /// Quantizes every continuous modality with per-dimension equal-frequency
    /// bins and folds the per-dimension bins into one mixed-radix symbol.
    pub fn discretized(&self, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Invalid("need at least 2 bins".into()));
        }
        let n = self.len();
        let modalities = self
            .modalities
            .iter()
            .map(|m| -> Result<Modality> {
                let data = match &m.data {
                    ModalityData::Discrete { .. } => m.data.clone(),
                    ModalityData::Continuous { dim, values } => {
                        let alphabet = bins
                            .checked_pow(*dim as u32)
                            .filter(|&a| a <= 1 << 20)
                            .ok_or_else(|| {
                                Error::Invalid(format!(
                                    "modality {}: {bins}^{dim} symbols is too many for exact estimation",
                                    m.name
                                ))
                            })?;
                        let mut symbols = vec![0u32; n];
                        let mut radix = 1u32;
                        for d in 0..*dim {
                            let column: Vec<f64> = (0..n).map(|t| values[t * dim + d]).collect();
                            for (s, b) in symbols.iter_mut().zip(quantize_equal_frequency(&column, bins)) {
                                *s += b * radix;
                            }
                            radix *= bins as u32;
                        }
                        ModalityData::Discrete { alphabet, symbols }
                    }
                };
                Ok(Modality {
                    name: m.name.clone(),
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(modalities, self.target.clone(), self.target_alphabet)
    }
}

/// Equal-frequency binning: cut points at the empirical `i / bins` quantiles.
/// Tied values always share a bin.
pub fn quantize_equal_frequency(values: &[f64], bins: usize) -> Vec<u32> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let cuts: Vec<f64> = (1..bins).map(|i| sorted[(i * n / bins).min(n.saturating_sub(1))]).collect();
    values
        .iter()
        .map(|v| cuts.iter().filter(|&&c| *v >= c).count() as u32)
        .collect()
}

/// Samples `(x1_{t-lag}, x2_{t-lag}, y_t, y_{t-k..t})` for one modality pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LagDataset {
    pub lag: usize,
    pub order: usize,
    pub dims: [usize; 3],
    pub x1: Vec<u32>,
    pub x2: Vec<u32>,
    pub y: Vec<u32>,
    /// Target history preceding each sample; shorter than `order` only
    /// near the start of the sequence.
    pub contexts: Vec<Vec<u32>>,
}

impl LagDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn discrete(m: &Modality) -> Result<(usize, &[u32])> {
    match &m.data {
        ModalityData::Discrete { alphabet, symbols } => Ok((*alphabet, symbols)),
        ModalityData::Continuous { .. } => Err(Error::NotDiscrete(m.name.clone())),
    }
}

/// Builds the lag-`lag` dataset of a modality pair: one tuple per
/// 1-based `t` in `lag+1..=n`.
pub fn build_lag_dataset(bundle: &SequenceBundle, pair: (usize, usize), lag: usize, order: usize) -> Result<LagDataset> {
    let n = bundle.len();
    if n < 2 || lag > n - 2 {
        return Err(Error::LagRange { lag, len: n });
    }
    let mods = bundle.modalities();
    let get = |i: usize| mods.get(i).ok_or_else(|| Error::Invalid(format!("modality index {i} out of range")));
    let (a1, s1) = discrete(get(pair.0)?)?;
    let (a2, s2) = discrete(get(pair.1)?)?;
    let y = bundle.target();
    let count = n - lag;
    let mut ds = LagDataset {
        lag,
        order,
        dims: [a1, a2, bundle.target_alphabet()],
        x1: Vec::with_capacity(count),
        x2: Vec::with_capacity(count),
        y: Vec::with_capacity(count),
        contexts: Vec::with_capacity(count),
    };
    for t in lag..n {
        ds.x1.push(s1[t - lag]);
        ds.x2.push(s2[t - lag]);
        ds.y.push(y[t]);
        ds.contexts.push(y[t.saturating_sub(order)..t].to_vec());
    }
    Ok(ds)
}

/// Identity of a conditioning group.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Context {
    Observed(Vec<u32>),
    /// Contexts seen fewer times than the merge threshold.
    Rare,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextJoint {
    pub context: Context,
    pub weight: f64,
    pub count: usize,
    pub joint: JointDistribution,
}

/// Splits a lag dataset by target-history context into weighted empirical joints.
///
/// Contexts with fewer than `min_count` samples are pooled into
/// [`Context::Rare`]; a rare pool that is itself below `min_count` is
/// folded into the most frequent context.
pub fn conditional_joint(ds: &LagDataset, min_count: usize) -> Result<Vec<ContextJoint>> {
    if ds.is_empty() {
        return Err(Error::EmptyData("empty lag dataset".into()));
    }
    if ds.len() < min_count.max(1) {
        return Err(Error::Estimation(format!(
            "{} samples at lag {} is below the minimum context size {min_count}",
            ds.len(),
            ds.lag
        )));
    }
    let cells: usize = ds.dims.iter().product();
    let mut groups: BTreeMap<&[u32], Vec<u64>> = BTreeMap::new();
    for i in 0..ds.len() {
        let idx = (ds.x1[i] as usize * ds.dims[1] + ds.x2[i] as usize) * ds.dims[2] + ds.y[i] as usize;
        groups.entry(ds.contexts[i].as_slice()).or_insert_with(|| vec![0; cells])[idx] += 1;
    }
    let mut kept: Vec<(Context, Vec<u64>)> = Vec::new();
    let mut rare: Option<Vec<u64>> = None;
    for (ctx, counts) in groups {
        let c: u64 = counts.iter().sum();
        if (c as usize) < min_count {
            let r = rare.get_or_insert_with(|| vec![0; cells]);
            r.iter_mut().zip(&counts).for_each(|(a, b)| *a += b);
        } else {
            kept.push((Context::Observed(ctx.to_vec()), counts));
        }
    }
    if let Some(r) = rare {
        let rc: u64 = r.iter().sum();
        if (rc as usize) >= min_count || kept.is_empty() {
            kept.push((Context::Rare, r));
        } else {
            let largest = kept
                .iter_mut()
                .max_by_key(|(_, c)| c.iter().sum::<u64>())
                .expect("non-empty");
            largest.1.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        }
    }
    let total = ds.len() as f64;
    kept.into_iter()
        .map(|(context, counts)| {
            let count = counts.iter().sum::<u64>() as usize;
            Ok(ContextJoint {
                context,
                weight: count as f64 / total,
                count,
                joint: JointDistribution::from_counts(ds.dims, &counts)?,
            })
        })
        .collect()
}
