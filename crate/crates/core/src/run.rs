//! One training run end to end: periodic analytics, parameter snapshots,
//! checkpoints and the artifact files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::analytics::{
    attention_drift, frechet, interval_stats, param_diff, retention_eval, AttentionRecord, DriftRecord, Embedding,
    IntervalStats, LabeledBatch, ParamDiffRecord, RetentionTable, SnapshotKind,
};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{modes_covered, DatasetKind, Sampler};
use crate::engine::DetectionRecord;
use crate::error::{Error, Result};
use crate::gan::{latent_batch, Discriminator, Generator};
use crate::svg::{line_chart, Series};
use crate::tensor::Tensor;
use crate::trainer::{get_layers, put_layers, stream_seed, Stream, Trainer};

pub const SCHEMA_VERSION: u32 = 1;
/// Minimum share of samples a mode needs to count as covered.
pub const MODE_FRACTION: f64 = 0.01;

/// Outcome of one run, written as `summary.json`.
///
/// Every field is a deterministic function of (config, seed) except
/// `wall_clock_secs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    /// Row label in reports: the strategy name or a sweep cell name.
    pub label: String,
    pub strategy: String,
    pub seed: u64,
    pub steps: u64,
    pub fingerprint: String,
    pub final_frechet: f64,
    pub modes_covered: Option<usize>,
    pub modes_total: Option<usize>,
    pub mask_fraction: f64,
    pub toggles: u64,
    pub detections: usize,
    pub retarded_detections: usize,
    #[serde(with = "extended_f64")]
    pub lambda: f64,
    pub ratio: f64,
    pub layer: usize,
    pub probability: f64,
    pub param_hash: String,
    pub retention: Option<RetentionTable>,
    pub wall_clock_secs: f64,
}

/// JSON numbers for finite values, `"inf"` / `"-inf"` strings otherwise.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| serde::de::Error::custom("bad number")),
            serde_json::Value::String(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float `{other}`"))),
            },
            other => Err(serde::de::Error::custom(format!("expected number, got {other}"))),
        }
    }
}

/// Steps whose generator snapshots feed the retention table:
/// `T/4`, `3T/4`, `T` and `1.25T` with `T = 0.8 · steps`.
pub fn retention_steps(steps: u64) -> (Vec<u64>, u64, u64) {
    let t = ((0.8 * steps as f64).round() as u64).max(1);
    let future = ((1.25 * t as f64).round() as u64).min(steps).max(t);
    (vec![(t / 4).max(1), (3 * t / 4).max(1)], t, future)
}

/// Fixed evaluation inputs, drawn once from the analytics stream.
struct EvalSet {
    embedding: Embedding,
    real_stats: IntervalStats,
    eval_z: Tensor,
    attention_probe: Tensor,
    retention_real: Vec<Tensor>,
}

impl EvalSet {
    fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let aseed = stream_seed(seed, Stream::Analytics);
        let mut sampler = Sampler::new(cfg.dataset.clone(), aseed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(aseed ^ 0x9e37_79b9_7f4a_7c15);
        let embedding = Embedding::frozen(cfg.dataset.shape().numel(), cfg.embed_hidden, cfg.embed_dim);
        let real = sampler.batch(cfg.eval_samples);
        let real_stats = interval_stats(&real, &embedding, (0, 0))?;
        let eval_z = latent_batch(cfg.eval_samples, cfg.network.latent_dim, &mut rng);
        let attention_probe = sampler.batch(cfg.probe_size);
        let half = (cfg.eval_samples / 2).max(1);
        let retention_real = (0..4).map(|_| sampler.batch(half)).collect();
        Ok(Self {
            embedding,
            real_stats,
            eval_z,
            attention_probe,
            retention_real,
        })
    }

    fn half_z(&self) -> Result<Tensor> {
        let half = self.retention_real[0].shape()[0];
        let dim = self.eval_z.shape()[1];
        Tensor::new(vec![half, dim], self.eval_z.data()[..half * dim].to_vec())
    }
}

/// Everything a run records besides the trainer state.
pub struct Recorder {
    cfg: ExperimentConfig,
    eval: EvalSet,
    prev_stats: Option<IntervalStats>,
    prev_disc: Discriminator,
    hist_steps: Vec<u64>,
    current_step: u64,
    future_step: u64,
    gens: BTreeMap<u64, Generator>,
    disc_at_current: Option<Discriminator>,
    pub detections: Vec<DetectionRecord>,
    pub drift: Vec<DriftRecord>,
    pub paramdiff: Vec<ParamDiffRecord>,
    pub attention: Vec<AttentionRecord>,
}

impl Recorder {
    pub fn new(trainer: &Trainer) -> Result<Self> {
        let cfg = trainer.cfg.clone();
        let eval = EvalSet::new(&cfg, trainer.seed)?;
        let (hist_steps, current_step, future_step) = retention_steps(cfg.steps);
        let mut r = Self {
            cfg,
            eval,
            prev_stats: None,
            prev_disc: trainer.disc.clone(),
            hist_steps,
            current_step,
            future_step,
            gens: BTreeMap::new(),
            disc_at_current: None,
            detections: Vec::new(),
            drift: Vec::new(),
            paramdiff: Vec::new(),
            attention: Vec::new(),
        };
        if trainer.step_count() == 0 {
            r.snapshot(trainer)?;
        }
        Ok(r)
    }

    fn retention_points(&self) -> Vec<u64> {
        let mut v = self.hist_steps.clone();
        v.push(self.current_step);
        v.push(self.future_step);
        v
    }

    /// Final-state samples from the fixed evaluation latents.
    pub fn eval_samples(&self, gen: &Generator) -> Result<Tensor> {
        gen.generate(&self.eval.eval_z)
    }

    pub fn frechet_to_real(&self, gen: &Generator) -> Result<f64> {
        let stats = interval_stats(&self.eval_samples(gen)?, &self.eval.embedding, (gen.step, gen.step))?;
        frechet(&stats, &self.eval.real_stats)
    }

    fn snapshot(&mut self, trainer: &Trainer) -> Result<()> {
        let step = trainer.step_count();
        let start = self.prev_stats.as_ref().map_or(0, |s| s.interval.1);
        let fake = self.eval_samples(&trainer.gen)?;
        let stats = interval_stats(&fake, &self.eval.embedding, (start, step))?;
        let frechet_prev = match &self.prev_stats {
            Some(p) => Some(frechet(p, &stats)?),
            None => None,
        };
        self.drift.push(DriftRecord {
            step,
            mean_norm: stats.mean_norm(),
            cov_trace: stats.cov_trace(),
            frechet_prev,
            frechet_real: frechet(&stats, &self.eval.real_stats)?,
        });
        if step > 0 {
            for (prev, curr) in self.prev_disc.layers.iter().zip(&trainer.disc.layers) {
                self.paramdiff.push(param_diff(prev, curr, step)?);
            }
            let layer = self.cfg.resolved_layer();
            self.attention.push(AttentionRecord {
                step,
                layer,
                cosine: attention_drift(&self.prev_disc, &trainer.disc, &self.eval.attention_probe, layer)?,
            });
        }
        self.prev_stats = Some(stats);
        self.prev_disc = trainer.disc.clone();
        Ok(())
    }

    /// Per-step hook: detections, periodic analytics and retention snapshots.
    pub fn observe(&mut self, trainer: &Trainer, detection: Option<&DetectionRecord>) -> Result<()> {
        if let Some(d) = detection {
            self.detections.push(d.clone());
        }
        let step = trainer.step_count();
        if step % self.cfg.snapshot_every == 0 {
            self.snapshot(trainer)?;
        }
        if self.cfg.retention && self.retention_points().contains(&step) {
            self.gens.insert(step, trainer.gen.clone());
            if step == self.current_step {
                self.disc_at_current = Some(trainer.disc.clone());
            }
        }
        Ok(())
    }

    /// Accuracy of the discriminator frozen at `T` on historical, current and future batches.
    pub fn retention(&self) -> Result<Option<RetentionTable>> {
        let Some(disc) = &self.disc_at_current else {
            return Ok(None);
        };
        let z = self.eval.half_z()?;
        let mut batches = Vec::new();
        for (i, step) in self.retention_points().into_iter().enumerate() {
            let Some(gen) = self.gens.get(&step) else {
                return Ok(None);
            };
            batches.push(LabeledBatch::balanced(step, &self.eval.retention_real[i], &gen.generate(&z)?)?);
        }
        Ok(Some(retention_eval(disc, self.current_step, &batches)?))
    }

    fn put_state(&self, c: &mut Checkpoint) {
        put_layers(c, "analytics.prev_disc", &self.prev_disc.layers);
        if let Some(s) = &self.prev_stats {
            c.put("analytics.prev_stats.start", s.interval.0);
            c.put("analytics.prev_stats.end", s.interval.1);
            c.put("analytics.prev_stats.count", s.count);
            c.put("analytics.prev_stats.ridge", s.ridge);
            c.put_f64s("analytics.prev_stats.mean", &s.mean);
            c.put_f64s("analytics.prev_stats.cov", &s.cov);
        }
        let steps: Vec<String> = self.gens.keys().map(u64::to_string).collect();
        c.put("analytics.gens", steps.join(","));
        for (step, g) in &self.gens {
            put_layers(c, &format!("analytics.gen.{step}"), &g.layers);
        }
        if let Some(d) = &self.disc_at_current {
            put_layers(c, "analytics.disc_at_current", &d.layers);
        }
    }

    fn restore_state(&mut self, trainer: &Trainer, c: &Checkpoint) -> Result<()> {
        get_layers(c, "analytics.prev_disc", &mut self.prev_disc.layers)?;
        if c.contains("analytics.prev_stats.mean") {
            self.prev_stats = Some(IntervalStats {
                interval: (c.get("analytics.prev_stats.start")?, c.get("analytics.prev_stats.end")?),
                mean: c.get_f64s("analytics.prev_stats.mean")?,
                cov: c.get_f64s("analytics.prev_stats.cov")?,
                count: c.get("analytics.prev_stats.count")?,
                ridge: c.get("analytics.prev_stats.ridge")?,
            });
        }
        let list = c.get_str("analytics.gens")?;
        for s in list.split(',').filter(|s| !s.is_empty()) {
            let step: u64 = s.parse().map_err(|_| Error::Checkpoint(format!("bad step `{s}` in analytics.gens")))?;
            let mut g = trainer.gen.clone();
            get_layers(c, &format!("analytics.gen.{step}"), &mut g.layers)?;
            g.step = step;
            self.gens.insert(step, g);
        }
        if c.contains("analytics.disc_at_current.layers") {
            let mut d = trainer.disc.clone();
            get_layers(c, "analytics.disc_at_current", &mut d.layers)?;
            self.disc_at_current = Some(d);
        }
        Ok(())
    }
}

pub fn run_dir(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join(label).join(format!("seed-{seed}"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        std::fs::write(path, format!("{}\n", header.join(",")))?;
        Ok(())
    } else {
        write_csv(path, rows)
    }
}

/// Rows of an existing CSV artifact up to and including `max_step`.
fn read_csv_until<T: DeserializeOwned>(path: &Path, max_step: u64, step_of: impl Fn(&T) -> u64) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: T = row.map_err(csv_err)?;
        if step_of(&row) <= max_step {
            out.push(row);
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RetentionCsvRow {
    reference_step: u64,
    kind: String,
    step: u64,
    accuracy: f64,
}

fn kind_name(k: SnapshotKind) -> &'static str {
    match k {
        SnapshotKind::Historical => "historical",
        SnapshotKind::Current => "current",
        SnapshotKind::Future => "future",
    }
}

/// Params-only snapshot used by `analyze`.
fn save_param_snapshot(dir: &Path, trainer: &Trainer) -> Result<()> {
    let mut c = Checkpoint::new();
    c.put("fingerprint", trainer.cfg.fingerprint());
    c.put("seed", trainer.seed);
    c.put("step", trainer.step_count());
    put_layers(&mut c, "gen", &trainer.gen.layers);
    put_layers(&mut c, "disc", &trainer.disc.layers);
    c.save(&dir.join("snapshots").join(format!("step-{:08}.ckpt", trainer.step_count())))
}

/// Options for [`run_experiment`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Report row label; defaults to the strategy name.
    pub label: Option<String>,
    /// Directory to write into; defaults to `<out>/<label>/seed-<seed>`.
    pub dir: Option<PathBuf>,
    /// Resume from the directory's `checkpoint.ckpt`.
    pub resume: bool,
    /// Stop after this many steps (the run stays resumable).
    pub stop_at: Option<u64>,
}

/// Trains one seed to completion, writing every artifact.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let label = opts.label.clone().unwrap_or_else(|| cfg.strategy.to_string());
    let dir = opts.dir.clone().unwrap_or_else(|| run_dir(&cfg.out, &label, seed));
    std::fs::create_dir_all(&dir)?;
    let clock = Instant::now();

    let (mut trainer, mut rec) = if opts.resume {
        let ckpt = Checkpoint::load(&dir.join("checkpoint.ckpt"))?;
        let trainer = Trainer::resume(cfg, &ckpt)?;
        if trainer.seed != seed {
            return Err(Error::Checkpoint(format!("checkpoint seed {} differs from {seed}", trainer.seed)));
        }
        let mut rec = Recorder::new(&trainer)?;
        rec.restore_state(&trainer, &ckpt)?;
        let at = trainer.step_count();
        rec.detections = read_csv_until(&dir.join("detections.csv"), at, |r: &DetectionRecord| r.step)?;
        rec.drift = read_csv_until(&dir.join("drift.csv"), at, |r: &DriftRecord| r.step)?;
        rec.paramdiff = read_csv_until(&dir.join("paramdiff.csv"), at, |r: &ParamDiffRecord| r.step)?;
        rec.attention = read_csv_until(&dir.join("attention.csv"), at, |r: &AttentionRecord| r.step)?;
        log::info!("resumed {} at step {at}", dir.display());
        (trainer, rec)
    } else {
        let trainer = Trainer::new(cfg, seed)?;
        let rec = Recorder::new(&trainer)?;
        (trainer, rec)
    };
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;

    let target = opts.stop_at.unwrap_or(cfg.steps).min(cfg.steps);
    let keep: Vec<u64> = {
        let (mut v, t, f) = retention_steps(cfg.steps);
        v.extend([t, f, cfg.steps]);
        v
    };
    trainer.run_until(target, |t, out| {
        rec.observe(t, out.detection.as_ref().map(|(_, r)| r))?;
        let step = t.step_count();
        if step % cfg.keep_every == 0 || keep.contains(&step) {
            save_param_snapshot(&dir, t)?;
        }
        if step % cfg.keep_every == 0 || step == target {
            let mut c = t.checkpoint();
            rec.put_state(&mut c);
            c.save(&dir.join("checkpoint.ckpt"))?;
        }
        if step % 1000 == 0 {
            log::debug!("{} step {step}: d={:.4} g={:.4}", dir.display(), out.d_loss, out.g_loss);
        }
        Ok(())
    })?;

    let final_frechet = rec.frechet_to_real(&trainer.gen)?;
    if !final_frechet.is_finite() {
        return Err(Error::Numerical(format!("final Fréchet distance is {final_frechet}")));
    }
    let samples = rec.eval_samples(&trainer.gen)?;
    let retention = if trainer.step_count() == cfg.steps && cfg.retention {
        rec.retention()?
    } else {
        None
    };
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        label,
        strategy: cfg.strategy.to_string(),
        seed,
        steps: trainer.step_count(),
        fingerprint: cfg.fingerprint(),
        final_frechet,
        modes_covered: modes_covered(&cfg.dataset, &samples, MODE_FRACTION),
        modes_total: cfg.dataset.centers().map(|c| c.len()),
        mask_fraction: trainer.engine.masked_fraction(),
        toggles: trainer.engine.toggles(),
        detections: rec.detections.len(),
        retarded_detections: rec.detections.iter().filter(|d| d.retarded).count(),
        lambda: cfg.lambda,
        ratio: cfg.ratio,
        layer: cfg.resolved_layer(),
        probability: cfg.probability,
        param_hash: trainer.param_hash(),
        retention,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    };
    write_artifacts(&dir, &rec, &summary, &cfg.dataset, &samples)?;
    Ok(summary)
}

fn write_artifacts(dir: &Path, rec: &Recorder, summary: &RunSummary, dataset: &DatasetKind, samples: &Tensor) -> Result<()> {
    write_csv_with_header(
        &dir.join("detections.csv"),
        &["step", "R_t", "lambda", "decision", "active_strategy", "ratio", "layer_index", "mask_hash"],
        &rec.detections,
    )?;
    write_csv_with_header(
        &dir.join("drift.csv"),
        &["step", "mu_norm", "sigma_trace", "frechet_prev", "frechet_real"],
        &rec.drift,
    )?;
    write_csv_with_header(&dir.join("paramdiff.csv"), &["step", "layer", "value"], &rec.paramdiff)?;
    write_csv_with_header(&dir.join("attention.csv"), &["step", "layer", "cosine"], &rec.attention)?;
    let retention_rows: Vec<RetentionCsvRow> = summary
        .retention
        .iter()
        .flat_map(|t| {
            t.rows.iter().map(move |r| RetentionCsvRow {
                reference_step: t.reference_step,
                kind: kind_name(r.kind).into(),
                step: r.step,
                accuracy: r.accuracy,
            })
        })
        .collect();
    write_csv_with_header(
        &dir.join("retention.csv"),
        &["reference_step", "kind", "step", "accuracy"],
        &retention_rows,
    )?;
    write_charts(dir, rec, &retention_rows)?;
    if matches!(dataset, DatasetKind::Ring { .. } | DatasetKind::Spiral { .. }) {
        let rows: Vec<(f64, f64)> = samples.data().chunks(2).map(|c| (c[0], c[1])).collect();
        let mut w = csv::Writer::from_path(dir.join("samples.csv")).map_err(csv_err)?;
        w.write_record(["x", "y"]).map_err(csv_err)?;
        for (x, y) in rows {
            w.write_record([x.to_string(), y.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
    }
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

fn write_charts(dir: &Path, rec: &Recorder, retention: &[RetentionCsvRow]) -> Result<()> {
    let svg = |name: &str, body: String| std::fs::write(dir.join(name), body);
    svg(
        "detections.svg",
        line_chart(
            "Retardation metric",
            "step",
            "R_t",
            &[
                Series::new("R_t", rec.detections.iter().map(|d| (d.step as f64, d.value)).collect()),
                Series::new(
                    "lambda",
                    rec.detections
                        .iter()
                        .filter(|d| d.threshold.is_finite())
                        .map(|d| (d.step as f64, d.threshold))
                        .collect(),
                ),
            ],
        ),
    )?;
    svg(
        "drift.svg",
        line_chart(
            "Generated distribution drift",
            "step",
            "Fréchet distance",
            &[
                Series::new("vs real", rec.drift.iter().map(|d| (d.step as f64, d.frechet_real)).collect()),
                Series::new(
                    "vs previous",
                    rec.drift
                        .iter()
                        .filter_map(|d| d.frechet_prev.map(|f| (d.step as f64, f)))
                        .collect(),
                ),
            ],
        ),
    )?;
    let mut by_layer: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rec.paramdiff {
        by_layer.entry(r.layer).or_default().push((r.step as f64, r.value));
    }
    let series: Vec<Series> = by_layer
        .into_iter()
        .map(|(l, pts)| Series::new(format!("layer {l}"), pts))
        .collect();
    svg(
        "paramdiff.svg",
        line_chart("Discriminator parameter difference", "step", "squared L2 delta", &series),
    )?;
    svg(
        "attention.svg",
        line_chart(
            "Feature drift between snapshots",
            "step",
            "mean cosine",
            &[Series::new("cosine", rec.attention.iter().map(|a| (a.step as f64, a.cosine)).collect())],
        ),
    )?;
    svg(
        "retention.svg",
        line_chart(
            "Retention of the discriminator frozen at T",
            "snapshot step",
            "accuracy",
            &[Series::new("accuracy", retention.iter().map(|r| (r.step as f64, r.accuracy)).collect())],
        ),
    )?;
    Ok(())
}

/// Recomputes the analytics of a finished run from its parameter snapshots
/// into `<dir>/analysis/`.
pub fn analyze(dir: &Path) -> Result<PathBuf> {
    let cfg_path = dir.join("config.txt");
    if !cfg_path.exists() {
        return Err(Error::MissingArtifact(cfg_path));
    }
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let snap_dir = dir.join("snapshots");
    if !snap_dir.exists() {
        return Err(Error::MissingArtifact(snap_dir));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&snap_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::MissingArtifact(snap_dir.join("step-*.ckpt")));
    }
    let first = Checkpoint::load(&paths[0])?;
    let seed: u64 = first.get("seed")?;
    let mut trainer = Trainer::new(&cfg, seed)?;
    let mut rec = Recorder::new(&trainer)?;
    rec.cfg.snapshot_every = 1;
    let (hist, current, future) = retention_steps(cfg.steps);
    for p in &paths {
        let c = Checkpoint::load(p)?;
        if c.get_str("fingerprint")? != cfg.fingerprint() {
            return Err(Error::Checkpoint(format!("{} belongs to another config", p.display())));
        }
        let step: u64 = c.get("step")?;
        get_layers(&c, "gen", &mut trainer.gen.layers)?;
        get_layers(&c, "disc", &mut trainer.disc.layers)?;
        trainer.gen.step = step;
        trainer.set_step_for_analysis(step);
        rec.snapshot(&trainer)?;
        if hist.contains(&step) || step == current || step == future {
            rec.gens.insert(step, trainer.gen.clone());
            if step == current {
                rec.disc_at_current = Some(trainer.disc.clone());
            }
        }
    }
    let out = dir.join("analysis");
    std::fs::create_dir_all(&out)?;
    let samples = rec.eval_samples(&trainer.gen)?;
    let final_frechet = rec.frechet_to_real(&trainer.gen)?;
    let mut summary: RunSummary = match std::fs::read_to_string(dir.join("summary.json")) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => return Err(Error::MissingArtifact(dir.join("summary.json"))),
    };
    summary.final_frechet = final_frechet;
    summary.retention = rec.retention()?;
    write_artifacts(&out, &rec, &summary, &cfg.dataset, &samples)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retention_schedule() {
        assert_eq!(retention_steps(25_000), (vec![5_000, 15_000], 20_000, 25_000));
        let (h, t, f) = retention_steps(100);
        assert_eq!((h, t, f), (vec![20, 60], 80, 100));
    }
}
