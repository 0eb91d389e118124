//! Lagged feature datasets for the neural path.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timemoe_core::SequenceBundle;

use crate::error::{contract, Result};

/// Samples `(x1_{t-lag}, x2_{t-lag}, y_t)` for one lag, features flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LagSamples {
    pub lag: usize,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y: Vec<usize>,
}

impl LagSamples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// One [`LagSamples`] per lag, sharing feature widths and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLagData {
    pub pair: [String; 2],
    pub d1: usize,
    pub d2: usize,
    pub classes: usize,
    pub lags: Vec<LagSamples>,
}

impl MultiLagData {
    pub fn new(pair: [String; 2], d1: usize, d2: usize, classes: usize, lags: Vec<LagSamples>) -> Result<Self> {
        if d1 == 0 || d2 == 0 {
            return contract("data", "feature widths must be positive");
        }
        if classes < 2 {
            return contract("data", format!("need at least 2 classes, got {classes}"));
        }
        if lags.is_empty() {
            return contract("data", "no lags");
        }
        for s in &lags {
            if s.is_empty() {
                return contract("data", format!("lag {} has no samples", s.lag));
            }
            if s.x1.len() != s.len() * d1 || s.x2.len() != s.len() * d2 {
                return contract("data", format!("lag {}: feature rows do not match labels", s.lag));
            }
            if let Some(&y) = s.y.iter().find(|&&y| y >= classes) {
                return contract("data", format!("lag {}: label {y} outside {classes} classes", s.lag));
            }
        }
        let mut seen: Vec<usize> = lags.iter().map(|s| s.lag).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return contract("data", "duplicate lag");
        }
        Ok(Self {
            pair,
            d1,
            d2,
            classes,
            lags,
        })
    }

    /// Builds lagged samples of modalities `pair` against the bundle target.
    pub fn from_bundle(bundle: &SequenceBundle, pair: (usize, usize), lags: &[usize]) -> Result<Self> {
        let n = bundle.len();
        let mods = bundle.modalities();
        if pair.0 >= mods.len() || pair.1 >= mods.len() {
            return contract("data", format!("pair {pair:?} out of range for {} modalities", mods.len()));
        }
        let (m1, m2) = (&mods[pair.0], &mods[pair.1]);
        let mut out = Vec::with_capacity(lags.len());
        for &lag in lags {
            if lag == 0 || lag + 2 > n {
                return Err(timemoe_core::Error::LagRange { lag, len: n }.into());
            }
            let mut s = LagSamples {
                lag,
                x1: Vec::with_capacity((n - lag) * m1.feature_dim()),
                x2: Vec::with_capacity((n - lag) * m2.feature_dim()),
                y: Vec::with_capacity(n - lag),
            };
            for t in lag..n {
                s.x1.extend(m1.features_at(t - lag));
                s.x2.extend(m2.features_at(t - lag));
                s.y.push(bundle.target()[t] as usize);
            }
            out.push(s);
        }
        Self::new(
            [m1.name.clone(), m2.name.clone()],
            m1.feature_dim(),
            m2.feature_dim(),
            bundle.target_alphabet(),
            out,
        )
    }

    pub fn lag_values(&self) -> Vec<usize> {
        self.lags.iter().map(|s| s.lag).collect()
    }
}

/// Seeded train / held-out index split of `len` samples.
pub(crate) fn split(len: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let h = ((len as f64 * holdout).round() as usize).min(len.saturating_sub(1));
    let held = idx[..h].to_vec();
    let train = idx[h..].to_vec();
    (train, held)
}
