use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use timemoe_core::RusTrajectory;

use crate::error::{self, usage, Result};
use crate::manifest::{self, sidecar, RunManifest};
use crate::train::RunSummary;
use crate::{parse_json, ReportArgs, ReportKind};

/// `expert,kind,<modality>...` with one row per expert.
pub fn routing_csv(s: &RunSummary) -> String {
    let mut out = String::from("expert,kind");
    for m in &s.modalities {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    let n_expert = s.utilization.first().map_or(0, |r| r.len());
    for e in 0..n_expert {
        let kind = if e + s.n_syn >= n_expert { "synergy" } else { "regular" };
        write!(out, "{e},{kind}").unwrap();
        for row in &s.utilization {
            write!(out, ",{}", row[e]).unwrap();
        }
        out.push('\n');
    }
    out
}

/// `pair,lag,component,value` for every component of every trajectory.
pub fn rus_csv(trajectories: &[RusTrajectory]) -> String {
    let mut out = String::from("pair,lag,component,value\n");
    for t in trajectories {
        for (i, lag) in t.lags.iter().enumerate() {
            for c in ["R", "U1", "U2", "S", "DI"] {
                let v = t.component(c).expect("known component")[i];
                writeln!(out, "{}|{},{lag},{c},{v}", t.pair[0], t.pair[1]).unwrap();
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// `None` for the per-variant mean row.
    pub seed: Option<u64>,
    pub accuracy: f64,
    pub full_accuracy: f64,
    /// `accuracy - full_accuracy`.
    pub delta: f64,
}

/// Pairs every non-full run with the full run of the same seed; one row
/// per pair plus a mean row per variant. Variants sort by name.
pub fn ablation_rows(summaries: &[RunSummary]) -> Result<Vec<AblationRow>> {
    let full: BTreeMap<u64, f64> = summaries
        .iter()
        .filter(|s| s.variant == "full")
        .map(|s| (s.seed, s.test_accuracy))
        .collect();
    if full.is_empty() {
        return usage("no full-model run found; ablation deltas need one per seed");
    }
    let mut by_variant: BTreeMap<&str, Vec<AblationRow>> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.variant != "full") {
        let Some(&f) = full.get(&s.seed) else {
            log::warn!("{} seed {} has no full-model run; skipped", s.variant, s.seed);
            continue;
        };
        by_variant.entry(&s.variant).or_default().push(AblationRow {
            variant: s.variant.clone(),
            seed: Some(s.seed),
            accuracy: s.test_accuracy,
            full_accuracy: f,
            delta: s.test_accuracy - f,
        });
    }
    let mut out = Vec::new();
    for (variant, mut rows) in by_variant {
        rows.sort_by_key(|r| r.seed);
        let n = rows.len() as f64;
        let mean = |f: fn(&AblationRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let summary = AblationRow {
            variant: variant.to_string(),
            seed: None,
            accuracy: mean(|r| r.accuracy),
            full_accuracy: mean(|r| r.full_accuracy),
            delta: mean(|r| r.delta),
        };
        out.extend(rows);
        out.push(summary);
    }
    Ok(out)
}

/// `variant,seed,accuracy,full_accuracy,delta`; mean rows carry seed `mean`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,accuracy,full_accuracy,delta\n");
    for r in rows {
        let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
        writeln!(out, "{},{seed},{},{},{}", r.variant, r.accuracy, r.full_accuracy, r.delta).unwrap();
    }
    out
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "summary.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Every `summary.json` below `dir`, in path order.
pub fn collect_summaries(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>, RunSummary)>> {
    let mut paths = Vec::new();
    find_summaries(dir, &mut paths)?;
    paths
        .into_iter()
        .map(|p| {
            let bytes = error::read(&p)?;
            let s = parse_json(&p, &bytes)?;
            Ok((p, bytes, s))
        })
        .collect()
}

pub(crate) fn cmd_report(a: &ReportArgs) -> Result<()> {
    let started = manifest::now();
    let mut m = RunManifest::new("report", serde_json::json!({ "kind": format!("{:?}", a.kind).to_lowercase() }), None, started);
    let text = match a.kind {
        ReportKind::Routing => {
            let path = a.run.join("summary.json");
            let bytes = error::read(&path)?;
            let s: RunSummary = parse_json(&path, &bytes)?;
            m.add_input(&path, &bytes);
            routing_csv(&s)
        }
        ReportKind::Rus => {
            let path = if a.run.is_dir() { a.run.join("rus.json") } else { a.run.clone() };
            let bytes = error::read(&path)?;
            let t: Vec<RusTrajectory> = parse_json(&path, &bytes)?;
            m.add_input(&path, &bytes);
            rus_csv(&t)
        }
        ReportKind::Ablation => {
            if !a.run.is_dir() {
                return usage(format!("{} is not a directory", a.run.display()));
            }
            let found = collect_summaries(&a.run)?;
            let summaries: Vec<RunSummary> = found.iter().map(|(_, _, s)| s.clone()).collect();
            for (p, b, _) in &found {
                m.add_input(p, b);
            }
            ablation_csv(&ablation_rows(&summaries)?)
        }
    };
    std::fs::write(&a.out, text)?;
    m.add_output(&a.out);
    m.finish(&sidecar(&a.out))
}
