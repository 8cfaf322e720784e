//! Cross-run aggregation: strategy comparison tables and sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::SnapshotKind;
use crate::config::{ExperimentConfig, SweepMode};
use crate::engine::StrategyKind;
use crate::error::{Error, Result};
use crate::run::{run_dir, run_experiment, RunOptions, RunSummary, SCHEMA_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub frechet: Vec<f64>,
    pub median_frechet: f64,
    pub median_modes: Option<f64>,
    pub modes_total: Option<usize>,
    pub mean_mask_fraction: f64,
    pub median_historical_accuracy: Option<f64>,
    pub median_current_accuracy: Option<f64>,
    pub median_future_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub title: String,
    /// Rows sorted ascending by median Fréchet distance.
    pub ranked: bool,
    pub rows: Vec<ReportRow>,
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Groups summaries by label, keeping first-appearance order.
pub fn summarize(title: &str, summaries: &[RunSummary], ranked: bool) -> Report {
    let mut labels: Vec<&str> = Vec::new();
    for s in summaries {
        if !labels.contains(&s.label.as_str()) {
            labels.push(&s.label);
        }
    }
    let mut rows: Vec<ReportRow> = labels
        .iter()
        .map(|label| {
            let group: Vec<&RunSummary> = summaries.iter().filter(|s| s.label == *label).collect();
            let frechet: Vec<f64> = group.iter().map(|s| s.final_frechet).collect();
            let modes: Vec<f64> = group.iter().filter_map(|s| s.modes_covered.map(|m| m as f64)).collect();
            let acc = |kind: SnapshotKind| {
                let v: Vec<f64> = group
                    .iter()
                    .filter_map(|s| s.retention.as_ref().and_then(|t| t.accuracy(kind)))
                    .collect();
                median(&v)
            };
            ReportRow {
                label: label.to_string(),
                strategy: group[0].strategy.clone(),
                seeds: group.iter().map(|s| s.seed).collect(),
                median_frechet: median(&frechet).unwrap_or(f64::NAN),
                frechet,
                median_modes: median(&modes),
                modes_total: group[0].modes_total,
                mean_mask_fraction: group.iter().map(|s| s.mask_fraction).sum::<f64>() / group.len() as f64,
                median_historical_accuracy: acc(SnapshotKind::Historical),
                median_current_accuracy: acc(SnapshotKind::Current),
                median_future_accuracy: acc(SnapshotKind::Future),
            }
        })
        .collect();
    if ranked {
        rows.sort_by(|a, b| a.median_frechet.total_cmp(&b.median_frechet));
    }
    Report {
        schema_version: SCHEMA_VERSION,
        title: title.to_string(),
        ranked,
        rows,
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "–".into(), |x| format!("{x:.digits$}"))
}

impl Report {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// 1-based rank of `label` by median Fréchet distance.
    pub fn rank_of(&self, label: &str) -> Option<usize> {
        let target = self.row(label)?.median_frechet;
        Some(1 + self.rows.iter().filter(|r| r.median_frechet < target).count())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## {}\n", self.title);
        s.push_str("| Method | Fréchet ↓ (median) | Modes (median) | Mask fraction | Hist. acc. | Current acc. | Future acc. | Seeds |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let modes = match (r.median_modes, r.modes_total) {
                (Some(m), Some(t)) => format!("{m} / {t}"),
                _ => "–".into(),
            };
            let _ = writeln!(
                s,
                "| {} | {:.4} | {} | {:.3} | {} | {} | {} | {} |",
                r.label,
                r.median_frechet,
                modes,
                r.mean_mask_fraction,
                opt(r.median_historical_accuracy, 4),
                opt(r.median_current_accuracy, 4),
                opt(r.median_future_accuracy, 4),
                r.seeds.len()
            );
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.md` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join(format!("{stem}.md")), self.to_markdown())?;
        Ok(())
    }
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let s: RunSummary = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if s.schema_version != SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            s.schema_version
        )));
    }
    Ok(s)
}

/// Run directories below `root`: `root` itself or any descendant holding a `summary.json`.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("summary.json").exists() {
            found.push(dir);
            continue;
        }
        if dir.is_dir() {
            for e in std::fs::read_dir(&dir)? {
                let p = e?.path();
                if p.is_dir() && p.file_name().is_some_and(|n| n != "analysis" && n != "snapshots") {
                    stack.push(p);
                }
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Aggregates every run found under `roots` into `report.json` / `report.md` in `out`.
pub fn emit_report(roots: &[PathBuf], out: &Path) -> Result<Report> {
    let mut summaries = Vec::new();
    for root in roots {
        if !root.exists() {
            return Err(Error::MissingArtifact(root.clone()));
        }
        let runs = find_runs(root)?;
        if runs.is_empty() {
            return Err(Error::MissingArtifact(root.join("summary.json")));
        }
        for dir in runs {
            summaries.push(load_summary(&dir)?);
        }
    }
    summaries.sort_by_key(|s| (strategy_order(&s.strategy), s.label.clone(), s.seed));
    let report = summarize("Strategy comparison", &summaries, false);
    report.write(out, "report")?;
    Ok(report)
}

/// Table order mirroring the ablation tables: baseline first, then the method, then ablations.
fn strategy_order(name: &str) -> usize {
    match name.parse::<StrategyKind>() {
        Ok(StrategyKind::Baseline) => 0,
        Ok(StrategyKind::FeatureMask) => 1,
        Ok(StrategyKind::VanillaDropout) => 2,
        Ok(StrategyKind::InputMask) => 3,
        Ok(StrategyKind::DynamicHead) => 4,
        Ok(StrategyKind::FixedInterval { .. }) => 5,
        Ok(StrategyKind::Ccd(_)) => 6,
        Err(_) => 7,
    }
}

/// One sweep cell: a label and the config it runs.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Cells of the configured sweep; every cell is validated before any runs.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    match cfg.sweep {
        SweepMode::Grid => {
            for &d in &cfg.sweep_layers {
                for &r in &cfg.sweep_ratios {
                    for &p in &cfg.sweep_probabilities {
                        let mut c = cfg.clone();
                        c.strategy = StrategyKind::FeatureMask;
                        c.layer = Some(d);
                        c.ratio = r;
                        c.probability = p;
                        cells.push(SweepCell {
                            label: format!("d{d}-r{r}-p{p}"),
                            config: c,
                        });
                    }
                }
            }
        }
        SweepMode::Strategies => {
            for &s in &cfg.sweep_strategies {
                let mut c = cfg.clone();
                c.strategy = s;
                if s == StrategyKind::DynamicHead && c.heads < 2 {
                    c.heads = 8;
                }
                cells.push(SweepCell {
                    label: s.to_string(),
                    config: c,
                });
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::config("sweep", "grid is empty"));
    }
    for cell in &cells {
        cell.config.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(field, format!("cell {}: {message}", cell.label)),
            other => other,
        })?;
    }
    Ok(cells)
}

/// Runs every cell for every seed and writes the ranked `sweep.json` / `sweep.md`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let cells = sweep_cells(cfg)?;
    let mut summaries = Vec::new();
    for cell in &cells {
        for &seed in &cfg.seeds {
            let opts = RunOptions {
                label: Some(cell.label.clone()),
                dir: Some(run_dir(&cfg.out, &cell.label, seed)),
                ..RunOptions::default()
            };
            let s = run_experiment(&cell.config, seed, &opts)?;
            log::info!("{} seed {seed}: Fréchet {:.4}", cell.label, s.final_frechet);
            summaries.push(s);
        }
    }
    let report = summarize("Sweep", &summaries, true);
    report.write(&cfg.out, "sweep")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(label: &str, seed: u64, f: f64) -> RunSummary {
        RunSummary {
            schema_version: SCHEMA_VERSION,
            label: label.into(),
            strategy: label.into(),
            seed,
            steps: 10,
            fingerprint: "x".into(),
            final_frechet: f,
            modes_covered: Some(8),
            modes_total: Some(8),
            mask_fraction: 0.5,
            toggles: 0,
            detections: 0,
            retarded_detections: 0,
            lambda: f64::INFINITY,
            ratio: 0.3,
            layer: 5,
            probability: 1.0,
            param_hash: "h".into(),
            retention: None,
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn empty_comparison_is_header_only() {
        let md = summarize("t", &[], false).to_markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with('|')).count(), 2);
    }

    #[test]
    fn ranked_ascending() {
        let s = vec![summary("b", 0, 3.0), summary("a", 0, 1.0), summary("c", 0, 2.0)];
        let r = summarize("t", &s, true);
        let labels: Vec<&str> = r.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["a", "c", "b"]);
        assert_eq!(r.rank_of("c"), Some(2));
    }

    #[test]
    fn summary_json_round_trips() {
        let s = summary("dmd", 1, 0.25);
        let back: RunSummary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn grid_cardinality_and_validation() {
        let cfg = ExperimentConfig::default();
        let cells = sweep_cells(&cfg).unwrap();
        assert_eq!(cells.len(), 12);
        let mut bad = cfg.clone();
        bad.sweep_layers = vec![3, 9];
        assert!(matches!(sweep_cells(&bad), Err(Error::Config { .. })));
    }
}
