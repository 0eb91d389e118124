//! Sequence generators with planted lag-specific interactions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distributions::{Modality, ModalityData, SequenceBundle};
use crate::error::{Error, Result};
use crate::info::binary_entropy;
use crate::temporal::RusTrajectory;

fn binary() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    #[serde(default = "binary")]
    pub alphabet: usize,
    /// Emit noisy one-hot feature vectors with this standard deviation
    /// instead of symbols.
    #[serde(default)]
    pub feature_sigma: Option<f64>,
}

/// How the target depends on the lagged sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rule {
    /// `Y_t = X_{t-lag}`.
    LaggedCopy { source: String, lag: usize },
    /// The second source duplicates the first and `Y_t = X1_{t-lag}`.
    LaggedRedundant { sources: [String; 2], lag: usize },
    /// `Y_t = X1_{t-lag} xor X2_{t-lag}`.
    LaggedXor { sources: [String; 2], lag: usize },
    /// Two-bit target over 4-symbol modalities. The high bit is shared by
    /// both `redundant` modalities and copied into `Y`; the low bit of `Y`
    /// is the xor of the low bits of the `synergistic` modalities.
    Mixture {
        redundant: [String; 2],
        synergistic: [String; 2],
        lag: usize,
    },
}

impl Rule {
    pub fn lag(&self) -> usize {
        match self {
            Rule::LaggedCopy { lag, .. }
            | Rule::LaggedRedundant { lag, .. }
            | Rule::LaggedXor { lag, .. }
            | Rule::Mixture { lag, .. } => *lag,
        }
    }

    fn target_alphabet(&self) -> usize {
        match self {
            Rule::Mixture { .. } => 4,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub modalities: Vec<ModalitySpec>,
    pub rule: Rule,
    /// Probability of flipping each target bit.
    #[serde(default)]
    pub noise: f64,
    pub length: usize,
    pub seed: u64,
}

impl PlantSpec {
    /// Binary modalities named `names` with the given rule.
    pub fn binary(names: &[&str], rule: Rule, noise: f64, length: usize, seed: u64) -> Self {
        Self {
            modalities: names
                .iter()
                .map(|n| ModalitySpec {
                    name: n.to_string(),
                    alphabet: 2,
                    feature_sigma: None,
                })
                .collect(),
            rule,
            noise,
            length,
            seed,
        }
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Spec(format!("rule references unknown modality {name}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Spec("modalities: at least one modality is required".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.alphabet < 2 {
                return Err(Error::Spec(format!("modalities[{i}].alphabet: must be at least 2")));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Spec(format!("modalities[{i}].name: duplicate name {}", m.name)));
            }
            if let Some(s) = m.feature_sigma {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::Spec(format!("modalities[{i}].feature_sigma: must be finite and nonnegative")));
                }
            }
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Spec(format!("noise: {} is outside [0, 0.5)", self.noise)));
        }
        let lag = self.rule.lag();
        if lag == 0 {
            return Err(Error::Spec("rule.lag: must be at least 1".into()));
        }
        if self.length < lag + 2 {
            return Err(Error::Spec(format!("length: {} is too short for lag {lag}", self.length)));
        }
        let need = |name: &str, alphabet: usize| -> Result<usize> {
            let i = self.index(name)?;
            if self.modalities[i].alphabet != alphabet {
                return Err(Error::Spec(format!(
                    "modalities[{i}].alphabet: rule needs {alphabet} symbols for {name}"
                )));
            }
            Ok(i)
        };
        let distinct = |a: usize, b: usize| -> Result<()> {
            if a == b {
                return Err(Error::Spec("rule: sources must be distinct".into()));
            }
            Ok(())
        };
        match &self.rule {
            Rule::LaggedCopy { source, .. } => {
                need(source, 2)?;
            }
            Rule::LaggedRedundant { sources, .. } | Rule::LaggedXor { sources, .. } => {
                distinct(need(&sources[0], 2)?, need(&sources[1], 2)?)?;
            }
            Rule::Mixture {
                redundant, synergistic, ..
            } => {
                distinct(need(&redundant[0], 4)?, need(&redundant[1], 4)?)?;
                distinct(need(&synergistic[0], 4)?, need(&synergistic[1], 4)?)?;
            }
        }
        Ok(())
    }
}

/// Draws a bundle following the planted rule; deterministic per seed.
pub fn generate(spec: &PlantSpec) -> Result<SequenceBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.length;
    let mut symbols: Vec<Vec<u32>> = spec
        .modalities
        .iter()
        .map(|m| (0..n).map(|_| rng.gen_range(0..m.alphabet as u32)).collect())
        .collect();
    let lag = spec.rule.lag();
    let ny = spec.rule.target_alphabet() as u32;
    let flip = |rng: &mut ChaCha8Rng| u32::from(rng.gen::<f64>() < spec.noise);
    let mut y = vec![0u32; n];
    match &spec.rule {
        Rule::LaggedCopy { source, .. } => {
            let s = spec.index(source)?;
            for t in 0..n {
                y[t] = if t >= lag { symbols[s][t - lag] ^ flip(&mut rng) } else { rng.gen_range(0..ny) };
            }
        }
        Rule::LaggedRedundant { sources, .. } => {
            let (a, b) = (spec.index(&sources[0])?, spec.index(&sources[1])?);
            symbols[b] = symbols[a].clone();
            for t in 0..n {
                y[t] = if t >= lag { symbols[a][t - lag] ^ flip(&mut rng) } else { rng.gen_range(0..ny) };
            }
        }
        Rule::LaggedXor { sources, .. } => {
            let (a, b) = (spec.index(&sources[0])?, spec.index(&sources[1])?);
            for t in 0..n {
                y[t] = if t >= lag {
                    symbols[a][t - lag] ^ symbols[b][t - lag] ^ flip(&mut rng)
                } else {
                    rng.gen_range(0..ny)
                };
            }
        }
        Rule::Mixture {
            redundant, synergistic, ..
        } => {
            let (r0, r1) = (spec.index(&redundant[0])?, spec.index(&redundant[1])?);
            let (s0, s1) = (spec.index(&synergistic[0])?, spec.index(&synergistic[1])?);
            for t in 0..n {
                symbols[r1][t] = (symbols[r0][t] & 2) | (symbols[r1][t] & 1);
            }
            for t in 0..n {
                y[t] = if t >= lag {
                    let hi = (symbols[r0][t - lag] >> 1) ^ flip(&mut rng);
                    let lo = (symbols[s0][t - lag] & 1) ^ (symbols[s1][t - lag] & 1) ^ flip(&mut rng);
                    hi << 1 | lo
                } else {
                    rng.gen_range(0..ny)
                };
            }
        }
    }
    let modalities = spec
        .modalities
        .iter()
        .zip(symbols)
        .map(|(m, s)| -> Result<Modality> {
            let data = match m.feature_sigma {
                None => ModalityData::Discrete {
                    alphabet: m.alphabet,
                    symbols: s,
                },
                Some(sigma) => {
                    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Spec(e.to_string()))?;
                    let mut values = Vec::with_capacity(n * m.alphabet);
                    for &sym in &s {
                        for d in 0..m.alphabet {
                            let hot = if d == sym as usize { 1.0 } else { 0.0 };
                            values.push(hot + normal.sample(&mut rng));
                        }
                    }
                    ModalityData::Continuous { dim: m.alphabet, values }
                }
            };
            Ok(Modality {
                name: m.name.clone(),
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SequenceBundle::new(modalities, y, ny as usize)
}

/// Analytic per-step trajectory of the planted pair over lags `1..=max_lag`.
///
/// The planted component carries `1 - H_b(noise)` bits at the planted lag.
/// For a copy rule the pair is the source and the first other modality.
pub fn ground_truth_rus(spec: &PlantSpec, max_lag: usize) -> Result<RusTrajectory> {
    spec.validate()?;
    let lag = spec.rule.lag();
    let (pair, component) = match &spec.rule {
        Rule::LaggedCopy { source, .. } => {
            let other = spec
                .modalities
                .iter()
                .find(|m| &m.name != source)
                .ok_or_else(|| Error::Spec("modalities: a copy rule needs a second modality to pair with".into()))?;
            ([source.clone(), other.name.clone()], 1)
        }
        Rule::LaggedRedundant { sources, .. } => (sources.clone(), 0),
        Rule::LaggedXor { sources, .. } => (sources.clone(), 3),
        Rule::Mixture { .. } => {
            return Err(Error::Spec(
                "rule: no analytic ground truth for mixture rules; use the empirical estimator".into(),
            ))
        }
    };
    let value = 1.0 - binary_entropy(spec.noise);
    let lags: Vec<usize> = (1..=max_lag).collect();
    let mut series = vec![vec![0.0; max_lag]; 4];
    let mut di = vec![0.0; max_lag];
    if (1..=max_lag).contains(&lag) {
        series[component][lag - 1] = value;
        di[lag - 1] = value;
    }
    let [r, u1, u2, s]: [Vec<f64>; 4] = series.try_into().expect("four components");
    Ok(RusTrajectory {
        pair,
        lags,
        redundancy: r,
        unique1: u1,
        unique2: u2,
        synergy: s,
        di,
        normalized: true,
        k: 0,
        samples: Vec::new(),
    })
}
