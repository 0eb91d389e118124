use clap::ValueEnum;
use serde::Serialize;
use timemoe_core::{compute_trajectory, sequence_csv, RusTrajectory, SequenceBundle, TemporalOptions};
use timemoe_estimator::{estimate_rus_multilag, fit, EstimatorConfig, MultiLagData};

use crate::error::{self, usage, Result};
use crate::manifest::{self, sidecar, RunManifest};
use crate::{parse_json, RusArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    /// Plug-in distributions and the exact convex decomposition.
    Exact,
    /// The neural batch estimator.
    Neural,
}

/// Trajectories over lags `1..=max_lag` for each `(a, b)` modality pair.
pub fn estimate_pairs(
    bundle: &SequenceBundle,
    pairs: &[(usize, usize)],
    max_lag: usize,
    mode: EstimateMode,
    opts: &TemporalOptions,
    est: &EstimatorConfig,
) -> Result<Vec<RusTrajectory>> {
    let n = bundle.len();
    if max_lag == 0 || max_lag + 2 > n {
        return usage(format!("--max-lag {max_lag} must lie in 1..={} for {n} steps", n.saturating_sub(2)));
    }
    let lags: Vec<usize> = (1..=max_lag).collect();
    pairs
        .iter()
        .map(|&pair| match mode {
            EstimateMode::Exact => Ok(compute_trajectory(bundle, pair, max_lag, opts)?),
            EstimateMode::Neural => {
                let data = MultiLagData::from_bundle(bundle, pair, &lags)?;
                let model = fit(&data, est.clone())?;
                Ok(estimate_rus_multilag(&model, &data, &lags)?)
            }
        })
        .collect()
}

#[derive(Serialize)]
struct Resolved<'a> {
    pairs: Vec<[&'a str; 2]>,
    max_lag: usize,
    mode: EstimateMode,
    temporal: &'a TemporalOptions,
    estimator: Option<&'a EstimatorConfig>,
}

pub(crate) fn cmd_rus(a: &RusArgs) -> Result<()> {
    let started = manifest::now();
    let data = error::read(&a.data)?;
    let bundle = sequence_csv::read_bundle(data.as_slice())?;
    let names = bundle.names();
    let pairs: Vec<(usize, usize)> = match &a.pair {
        Some(p) if p.len() != 2 => return usage(format!("--pair takes two modality names, got {}", p.len())),
        Some(p) => {
            let (i, j) = (bundle.modality_index(&p[0])?, bundle.modality_index(&p[1])?);
            if i == j {
                return usage("--pair needs two distinct modalities");
            }
            vec![(i, j)]
        }
        None => (0..names.len()).flat_map(|i| (i + 1..names.len()).map(move |j| (i, j))).collect(),
    };
    if pairs.is_empty() {
        return usage("the data has a single modality; RUS needs a pair");
    }
    let opts = TemporalOptions {
        markov_order: a.markov_order,
        ..Default::default()
    };
    let mut est = EstimatorConfig::default();
    let mut cfg_bytes = None;
    if let Some(path) = &a.config {
        let bytes = error::read(path)?;
        est = parse_json(path, &bytes)?;
        cfg_bytes = Some((path, bytes));
    }
    if let Some(s) = a.seed {
        est.seed = s;
    }
    est.validate()?;
    let trajectories = estimate_pairs(&bundle, &pairs, a.max_lag, a.mode, &opts, &est)?;
    manifest::write_json(&a.out, &trajectories)?;

    let neural = a.mode == EstimateMode::Neural;
    let resolved = Resolved {
        pairs: pairs.iter().map(|&(i, j)| [names[i], names[j]]).collect(),
        max_lag: a.max_lag,
        mode: a.mode,
        temporal: &opts,
        estimator: neural.then_some(&est),
    };
    let mut m = RunManifest::new("rus", serde_json::to_value(&resolved)?, neural.then_some(est.seed), started);
    m.add_input(&a.data, &data);
    if let Some((path, bytes)) = cfg_bytes {
        m.add_input(path, &bytes);
    }
    m.add_output(&a.out);
    m.finish(&sidecar(&a.out))
}
