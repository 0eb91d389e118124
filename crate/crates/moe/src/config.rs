use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture, auxiliary-loss and optimization settings.
///
/// Field names double as the JSON config keys; missing keys take the
/// defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Transformer layers inside each modality encoder.
    pub l_enc: usize,
    /// Attention heads of the encoder and backbone transformer layers.
    pub h: usize,
    pub d_ff: usize,
    pub p_drop: f64,
    /// Two residual conv + batch-norm layers after the input projection.
    pub conv: bool,
    pub conv_kernel: usize,
    /// Alternating (transformer layer, MoE layer) pairs after the encoders.
    pub blocks: usize,
    pub d_expert: usize,
    pub n_expert: usize,
    /// Synergy experts; they take the last `n_syn` expert indices.
    pub n_syn: usize,
    pub h_syn: usize,
    pub d_gru: usize,
    pub d_token: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub top_k: usize,
    pub lambda_r: f64,
    pub lambda_u: f64,
    pub lambda_s: f64,
    /// Fixed gating thresholds; `None` uses `tau_quantile` of the
    /// training trajectories.
    pub tau_r: Option<f64>,
    pub tau_u: Option<f64>,
    pub tau_s: Option<f64>,
    pub tau_quantile: f64,
    /// Times the lag-indexed RUS segment is repeated for the router GRU.
    pub rus_repeat: usize,
    /// Tokens per sample; token `t` (1-based, counted back from the
    /// target step) sits `t` steps before the target.
    pub window: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            l_enc: 2,
            h: 4,
            d_ff: 256,
            p_drop: 0.1,
            conv: true,
            conv_kernel: 3,
            blocks: 2,
            d_expert: 128,
            n_expert: 8,
            n_syn: 2,
            h_syn: 4,
            d_gru: 64,
            d_token: 64,
            d_k: 32,
            d_v: 32,
            top_k: 2,
            lambda_r: 0.01,
            lambda_u: 0.01,
            lambda_s: 0.01,
            tau_r: None,
            tau_u: None,
            tau_s: None,
            tau_quantile: 0.7,
            rus_repeat: 1,
            window: 8,
            lr: 1e-3,
            momentum: 0.9,
            grad_clip: None,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// One auxiliary term, as named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Redundancy,
    Uniqueness,
    Synergy,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Redundancy, Ablation::Uniqueness, Ablation::Synergy];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Redundancy => "redundancy",
            Ablation::Uniqueness => "uniqueness",
            Ablation::Synergy => "synergy",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (redundancy|uniqueness|synergy)")))
    }
}

impl ModelConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Zeroes the weight of one auxiliary term.
    pub fn ablate(&mut self, a: Ablation) {
        match a {
            Ablation::Redundancy => self.lambda_r = 0.0,
            Ablation::Uniqueness => self.lambda_u = 0.0,
            Ablation::Synergy => self.lambda_s = 0.0,
        }
    }

    /// Standard MoE: every auxiliary weight zero.
    pub fn baseline(&mut self) {
        Ablation::ALL.into_iter().for_each(|a| self.ablate(a));
    }

    pub fn n_regular(&self) -> usize {
        self.n_expert - self.n_syn
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let dims = [
            ("d_model", self.d_model),
            ("h", self.h),
            ("d_ff", self.d_ff),
            ("conv_kernel", self.conv_kernel),
            ("d_expert", self.d_expert),
            ("n_expert", self.n_expert),
            ("h_syn", self.h_syn),
            ("d_gru", self.d_gru),
            ("d_token", self.d_token),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("top_k", self.top_k),
            ("rus_repeat", self.rus_repeat),
            ("window", self.window),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.n_syn >= self.n_expert {
            return bad(format!("n_syn ({}) must be below n_expert ({})", self.n_syn, self.n_expert));
        }
        if self.top_k > self.n_expert {
            return bad(format!("top_k ({}) exceeds n_expert ({})", self.top_k, self.n_expert));
        }
        if self.d_model % self.h != 0 || self.d_model % self.h_syn != 0 {
            return bad(format!(
                "d_model ({}) must be divisible by h ({}) and h_syn ({})",
                self.d_model, self.h, self.h_syn
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel ({}) must be odd", self.conv_kernel));
        }
        for (name, v) in [("lambda_r", self.lambda_r), ("lambda_u", self.lambda_u), ("lambda_s", self.lambda_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("tau_r", self.tau_r), ("tau_u", self.tau_u), ("tau_s", self.tau_s)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return bad(format!("{name} must be finite"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.tau_quantile) {
            return bad(format!("tau_quantile must lie in [0, 1], got {}", self.tau_quantile));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop must lie in [0, 1), got {}", self.p_drop));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}
