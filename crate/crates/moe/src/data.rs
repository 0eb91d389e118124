use timemoe_autodiff::Tensor;
use timemoe_core::SequenceBundle;

use crate::error::{contract, Result};

/// Fixed-length token windows with the target one step after the window.
///
/// Sample `i` holds tokens for steps `e - window .. e` and label `Y_e`,
/// where `e = targets_at[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    pub modalities: Vec<String>,
    pub dims: Vec<usize>,
    pub window: usize,
    pub classes: usize,
    /// `inputs[m]`: row-major `[samples, window, dims[m]]`.
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub targets_at: Vec<usize>,
}

impl WindowDataset {
    pub fn from_bundle(bundle: &SequenceBundle, window: usize) -> Result<Self> {
        let n = bundle.len();
        if window == 0 || window >= n {
            return contract("window_dataset", format!("window {window} needs a sequence longer than {n}"));
        }
        let mods = bundle.modalities();
        let dims: Vec<usize> = mods.iter().map(|m| m.feature_dim()).collect();
        let mut inputs: Vec<Vec<f64>> = dims.iter().map(|d| Vec::with_capacity((n - window) * window * d)).collect();
        // Features are read once per step, then copied into each window.
        let feats: Vec<Vec<Vec<f64>>> = mods.iter().map(|m| (0..n).map(|t| m.features_at(t)).collect()).collect();
        let mut labels = Vec::with_capacity(n - window);
        let mut targets_at = Vec::with_capacity(n - window);
        for e in window..n {
            for (buf, f) in inputs.iter_mut().zip(&feats) {
                for row in &f[e - window..e] {
                    buf.extend_from_slice(row);
                }
            }
            labels.push(bundle.target()[e] as usize);
            targets_at.push(e);
        }
        Ok(Self {
            modalities: bundle.names().iter().map(|s| s.to_string()).collect(),
            dims,
            window,
            classes: bundle.target_alphabet(),
            inputs,
            labels,
            targets_at,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-modality `[idx.len(), window, dim]` tensors and their labels.
    pub fn batch(&self, idx: &[usize]) -> Result<(Vec<Tensor>, Vec<usize>)> {
        let mut xs = Vec::with_capacity(self.dims.len());
        for (buf, &d) in self.inputs.iter().zip(&self.dims) {
            let w = self.window * d;
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(&buf[i * w..(i + 1) * w]);
            }
            xs.push(Tensor::new(vec![idx.len(), self.window, d], data)?);
        }
        Ok((xs, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Splits a bundle in time: the first `1 - holdout` fraction for training
/// (and its RUS trajectories), the remainder for testing.
pub fn chronological_split(bundle: &SequenceBundle, holdout: f64) -> Result<(SequenceBundle, SequenceBundle)> {
    if !(0.0..1.0).contains(&holdout) || holdout == 0.0 {
        return contract("chronological_split", format!("holdout {holdout} must lie in (0, 1)"));
    }
    let n = bundle.len();
    let cut = ((n as f64) * (1.0 - holdout)).round() as usize;
    if cut == 0 || cut >= n {
        return contract("chronological_split", format!("holdout {holdout} leaves an empty side of {n} steps"));
    }
    Ok((bundle.slice(0..cut)?, bundle.slice(cut..n)?))
}
