//! Cross-run comparison: a summary table and charts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::metrics::{load_metrics, format_float, MetricsRecord, Phase};
use super::svg::{box_chart, line_chart};
use super::{mean_std, ExperimentConfig, EXPERIMENT_FILE, METRICS_FILE};
use crate::agents::Architecture;
use crate::env::EnvKind;
use crate::error::{Error, Result};

pub const COMPARISON_FILE: &str = "comparison.csv";
pub const TRAIN_CURVE_FILE: &str = "train_curve.svg";
pub const IID_BOX_FILE: &str = "iid_box.svg";
pub const OOD_BOX_FILE: &str = "ood_box.svg";

/// Moving-average window of the training curves.
pub const CURVE_SMOOTHING: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Emit {
    pub csv: bool,
    pub svg: bool,
}

/// Metrics of every seed of one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub task: EnvKind,
    pub hypothesis: Architecture,
    pub seeds: BTreeMap<u64, Vec<MetricsRecord>>,
}

/// Test performance of one hypothesis: statistics over per-seed mean
/// test rewards (population standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub hypothesis: Architecture,
    pub phase: Phase,
    pub n_seeds: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn load_run(dir: &Path) -> Result<RunData> {
    let cfg = ExperimentConfig::load(&dir.join(EXPERIMENT_FILE))?;
    let mut seeds = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(seed) = name.to_str().and_then(|n| n.strip_prefix("seed_")).and_then(|s| s.parse().ok()) else {
            continue;
        };
        let rows = load_metrics(&entry.path().join(METRICS_FILE))?;
        if let Some(r) = rows.iter().find(|r| r.seed != seed || r.hypothesis != cfg.hypothesis || r.task != cfg.task) {
            return Err(Error::Format(format!(
                "{}: row for seed {} {} {} does not belong to this run",
                entry.path().display(),
                r.seed,
                r.hypothesis,
                r.task
            )));
        }
        seeds.insert(seed, rows);
    }
    if seeds.is_empty() {
        return Err(Error::Format(format!("{}: no seed directories", dir.display())));
    }
    Ok(RunData {
        task: cfg.task,
        hypothesis: cfg.hypothesis,
        seeds,
    })
}

/// Merge runs by hypothesis. All runs must share one task and no
/// (hypothesis, seed) pair may repeat.
pub fn merge_runs(runs: &[RunData]) -> Result<BTreeMap<Architecture, BTreeMap<u64, Vec<MetricsRecord>>>> {
    if let Some(first) = runs.first() {
        if let Some(other) = runs.iter().find(|r| r.task != first.task) {
            return Err(Error::Config(format!(
                "cannot compare runs of different tasks ({} and {})",
                first.task, other.task
            )));
        }
    }
    let mut merged: BTreeMap<Architecture, BTreeMap<u64, Vec<MetricsRecord>>> = BTreeMap::new();
    for run in runs {
        let by_seed = merged.entry(run.hypothesis).or_default();
        for (&seed, rows) in &run.seeds {
            if by_seed.insert(seed, rows.clone()).is_some() {
                return Err(Error::Config(format!("{} seed {seed} appears in more than one run", run.hypothesis)));
            }
        }
    }
    Ok(merged)
}

fn phase_rewards(rows: &[MetricsRecord], phase: Phase) -> Vec<f64> {
    rows.iter().filter(|r| r.phase == phase).map(|r| r.episode_reward).collect()
}

/// One row per (hypothesis, test phase) with at least one seed that has
/// test episodes in that phase.
pub fn comparison_rows(runs: &[RunData]) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for (hypothesis, seeds) in merge_runs(runs)? {
        for phase in [Phase::IidTest, Phase::OodTest] {
            let seed_means: Vec<f64> = seeds
                .values()
                .filter_map(|rows| mean_std(&phase_rewards(rows, phase)).map(|(m, _)| m))
                .collect();
            if let Some((mean, std)) = mean_std(&seed_means) {
                rows.push(ComparisonRow {
                    hypothesis,
                    phase,
                    n_seeds: seed_means.len(),
                    mean,
                    std,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["hypothesis", "phase", "n_seeds", "mean", "std"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.hypothesis.to_string(),
            r.phase.to_string(),
            r.n_seeds.to_string(),
            format_float(r.mean),
            format_float(r.std),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trailing moving average with a window of up to `window` points.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut sum = 0.0;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            sum += x;
            if i >= window {
                sum -= xs[i - window];
            }
            sum / (i + 1).min(window) as f64
        })
        .collect()
}

/// Per-episode training reward averaged over seeds, truncated to the
/// shortest seed.
fn mean_train_curve(seeds: &BTreeMap<u64, Vec<MetricsRecord>>) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = seeds.values().map(|rows| phase_rewards(rows, Phase::Train)).collect();
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect()
}

/// Load every run directory and write the requested outputs into `out`.
pub fn aggregate_and_emit(run_dirs: &[PathBuf], out: &Path, emit: Emit) -> Result<Vec<ComparisonRow>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let rows = comparison_rows(&runs)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if emit.csv {
        write_comparison(&out.join(COMPARISON_FILE), &rows)?;
    }
    if emit.svg {
        let merged = merge_runs(&runs)?;
        let task = runs[0].task;
        let curves: Vec<(String, Vec<f64>)> = merged
            .iter()
            .map(|(h, seeds)| (h.to_string(), moving_average(&mean_train_curve(seeds), CURVE_SMOOTHING)))
            .collect();
        let svg = line_chart(
            &format!("{task}: training reward ({CURVE_SMOOTHING}-episode moving average)"),
            "episode",
            "episode reward",
            &curves,
        );
        write_text(&out.join(TRAIN_CURVE_FILE), &svg)?;
        for (phase, file, label) in [
            (Phase::IidTest, IID_BOX_FILE, "in-distribution"),
            (Phase::OodTest, OOD_BOX_FILE, "out-of-distribution"),
        ] {
            let groups: Vec<(String, Vec<f64>)> = merged
                .iter()
                .map(|(h, seeds)| (h.to_string(), seeds.values().flat_map(|r| phase_rewards(r, phase)).collect()))
                .collect();
            let svg = box_chart(&format!("{task}: {label} test reward"), "episode reward", &groups);
            write_text(&out.join(file), &svg)?;
        }
    }
    Ok(rows)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
