use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use timemoe_core::{sequence_csv, RusTrajectory, SequenceBundle, TemporalOptions};
use timemoe_moe::{
    chronological_split, train, write_metrics_jsonl, Ablation, ModelConfig, RusContextInput, Thresholds, TrainOutcome,
    WindowDataset,
};

use crate::error::{self, usage, Result};
use crate::manifest::{self, RunManifest};
use crate::{parse_json, TrainArgs};

/// Everything a training run depends on besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub holdout: f64,
    /// Used only when no trajectories are supplied.
    pub max_lag: usize,
    pub markov_order: usize,
    pub variant: String,
}

/// Final-epoch results of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub modalities: Vec<String>,
    pub n_syn: usize,
    pub thresholds: Thresholds,
    /// `[modality][expert]` share of top-k selections on the test split.
    pub utilization: Vec<Vec<f64>>,
    pub pair_jsd: BTreeMap<String, f64>,
    pub pair_p_syn: BTreeMap<String, f64>,
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub summary: RunSummary,
    pub trajectories: Vec<RusTrajectory>,
}

/// `full`, `baseline` or `ablate-<term>[+<term>...]`.
pub fn variant_name(baseline: bool, ablate: &[Ablation]) -> String {
    if baseline {
        return "baseline".into();
    }
    if ablate.is_empty() {
        return "full".into();
    }
    let mut names: Vec<&str> = ablate.iter().map(|a| a.name()).collect();
    names.sort_unstable();
    names.dedup();
    format!("ablate-{}", names.join("+"))
}

/// Splits `bundle` in time, builds the router RUS input (from
/// `trajectories`, or exactly on the training split) and trains.
pub fn run_training(bundle: &SequenceBundle, trajectories: Option<&[RusTrajectory]>, s: &TrainSettings) -> Result<TrainRun> {
    let (tr, te) = chronological_split(bundle, s.holdout)?;
    let repeat = s.model.rus_repeat;
    let (rus, trajectories) = match trajectories {
        Some(t) => {
            let names: Vec<String> = bundle.names().iter().map(|n| n.to_string()).collect();
            (RusContextInput::from_trajectories(&names, t, repeat)?, t.to_vec())
        }
        None => {
            if s.max_lag == 0 || s.max_lag + 2 > tr.len() {
                return usage(format!("--max-lag {} does not fit a training split of {} steps", s.max_lag, tr.len()));
            }
            let opts = TemporalOptions {
                markov_order: s.markov_order,
                ..Default::default()
            };
            RusContextInput::exact(&tr, s.max_lag, &opts, repeat)?
        }
    };
    let train_ds = WindowDataset::from_bundle(&tr, s.model.window)?;
    let test_ds = WindowDataset::from_bundle(&te, s.model.window)?;
    let outcome = train(&train_ds, &test_ds, &rus, &s.model)?;
    let last = outcome.metrics.last().expect("at least one epoch");
    let summary = RunSummary {
        variant: s.variant.clone(),
        seed: s.model.seed,
        epochs: outcome.metrics.len(),
        test_accuracy: last.test_accuracy,
        test_loss: last.test_loss,
        modalities: rus.modalities.clone(),
        n_syn: s.model.n_syn,
        thresholds: outcome.thresholds,
        utilization: outcome.routing.utilization(),
        pair_jsd: last.pair_jsd.clone(),
        pair_p_syn: last.pair_p_syn.clone(),
    };
    Ok(TrainRun {
        outcome,
        summary,
        trajectories,
    })
}

fn write_run(dir: &Path, run: &TrainRun, settings: &TrainSettings, inputs: &[(PathBuf, Vec<u8>)], started: String) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut m = RunManifest::new("train", serde_json::to_value(settings)?, Some(settings.model.seed), started);
    for (p, b) in inputs {
        m.add_input(p, b);
    }
    let ckpt = dir.join("model.ckpt");
    run.outcome.model.save(&ckpt)?;
    let metrics = dir.join("metrics.jsonl");
    write_metrics_jsonl(&metrics, &run.outcome.metrics)?;
    let routing = dir.join("routing.json");
    manifest::write_json(&routing, &run.outcome.routing.dump(settings.model.top_k))?;
    let rus = dir.join("rus.json");
    manifest::write_json(&rus, &run.trajectories)?;
    let summary = dir.join("summary.json");
    manifest::write_json(&summary, &run.summary)?;
    for p in [&ckpt, &metrics, &routing, &rus, &summary] {
        m.add_output(p);
    }
    m.finish(&dir.join("manifest.json"))
}

pub(crate) fn cmd_train(a: &TrainArgs) -> Result<()> {
    let started = manifest::now();
    let data = error::read(&a.data)?;
    let bundle = sequence_csv::read_bundle(data.as_slice())?;
    let mut inputs = vec![(a.data.clone(), data)];

    let mut model = ModelConfig::default();
    if let Some(path) = &a.config {
        let bytes = error::read(path)?;
        model = parse_json(path, &bytes)?;
        inputs.push((path.clone(), bytes));
    }
    if let Some(k) = a.top_k {
        model.top_k = k;
    }
    if let Some(r) = a.rus_repeat {
        model.rus_repeat = r;
    }
    if let Some(e) = a.epochs {
        model.epochs = e;
    }
    if let Some(s) = a.seed {
        model.seed = s;
    }
    if a.baseline {
        model.baseline();
    }
    for &x in &a.ablate {
        model.ablate(x);
    }
    model.validate()?;
    if model.epochs == 0 {
        return usage("epochs must be positive");
    }

    let mut trajectories = Vec::new();
    for path in &a.rus {
        let bytes = error::read(path)?;
        let parsed: Vec<RusTrajectory> = if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'[') {
            parse_json(path, &bytes)?
        } else {
            vec![parse_json(path, &bytes)?]
        };
        trajectories.extend(parsed);
        inputs.push((path.clone(), bytes));
    }
    let supplied = (!trajectories.is_empty()).then_some(trajectories.as_slice());

    let settings = TrainSettings {
        model,
        holdout: a.holdout,
        max_lag: a.max_lag,
        markov_order: a.markov_order,
        variant: variant_name(a.baseline, &a.ablate),
    };
    let runs: Vec<(PathBuf, TrainSettings)> = match &a.seeds {
        None => vec![(a.out.clone(), settings)],
        Some(seeds) => seeds
            .iter()
            .map(|&s| {
                let mut st = settings.clone();
                st.model.seed = s;
                (a.out.join(format!("seed-{s}")), st)
            })
            .collect(),
    };
    runs.par_iter().try_for_each(|(dir, st)| -> Result<()> {
        let run = run_training(&bundle, supplied, st)?;
        log::info!("{} seed {}: test accuracy {:.4}", st.variant, st.model.seed, run.summary.test_accuracy);
        write_run(dir, &run, st, &inputs, started.clone())
    })
}
