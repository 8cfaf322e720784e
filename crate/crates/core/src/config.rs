//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys and malformed
//! values are errors naming the key. [`ExperimentConfig::to_text`] writes the
//! full effective configuration in the same format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::DatasetKind;
use crate::engine::{EngineConfig, MaskGranularity, RampDirection, StrategyKind};
use crate::error::{Error, Result};
use crate::gan::NetworkSpec;
use crate::nn::AdamConfig;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "DMD_OUT_ROOT";

/// Which grid `dmd sweep` enumerates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SweepMode {
    /// Depth × ratio × probability cells of the feature-mask strategy.
    Grid,
    /// One cell per listed strategy.
    Strategies,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub network: NetworkSpec,
    /// Discriminator logits; the dynamic-head strategy needs more than one.
    pub heads: usize,
    /// Generator output scale; `None` derives it from the dataset extent.
    pub output_scale: Option<f64>,
    pub strategy: StrategyKind,
    pub lambda: f64,
    pub ratio: f64,
    /// Masked layer `d`; `None` picks layer 5, or the penultimate layer when
    /// the discriminator is shallower.
    pub layer: Option<usize>,
    pub cadence: u64,
    pub probability: f64,
    pub dropout_rate: f64,
    pub rescale: bool,
    pub granularity: MaskGranularity,
    pub detect_while_masked: bool,
    pub probe_size: usize,
    pub optimizer: AdamConfig,
    pub steps: u64,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub snapshot_every: u64,
    /// Parameter snapshots kept on disk for `analyze`, in steps.
    pub keep_every: u64,
    pub eval_samples: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub retention: bool,
    pub sweep: SweepMode,
    pub sweep_layers: Vec<usize>,
    pub sweep_ratios: Vec<f64>,
    pub sweep_probabilities: Vec<f64>,
    pub sweep_strategies: Vec<StrategyKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::ring(),
            network: NetworkSpec::default(),
            heads: 1,
            output_scale: None,
            strategy: StrategyKind::FeatureMask,
            lambda: 0.85,
            ratio: 0.3,
            layer: None,
            cadence: 31,
            probability: 1.0,
            dropout_rate: 0.5,
            rescale: false,
            granularity: MaskGranularity::Element,
            detect_while_masked: true,
            probe_size: 64,
            optimizer: AdamConfig::default(),
            steps: 25_000,
            batch: 128,
            seeds: vec![0, 1, 2, 3, 4],
            out: default_out_root(),
            snapshot_every: 500,
            keep_every: 2500,
            eval_samples: 2048,
            embed_hidden: 64,
            embed_dim: 16,
            retention: true,
            sweep: SweepMode::Grid,
            sweep_layers: vec![3, 5],
            sweep_ratios: vec![0.1, 0.3, 0.5],
            sweep_probabilities: vec![0.5, 1.0],
            sweep_strategies: default_comparison(),
        }
    }
}

/// Output root from the environment, else `runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Rows of the strategy comparison table.
pub fn default_comparison() -> Vec<StrategyKind> {
    vec![
        StrategyKind::Baseline,
        StrategyKind::FeatureMask,
        StrategyKind::VanillaDropout,
        StrategyKind::InputMask,
        StrategyKind::DynamicHead,
        StrategyKind::FixedInterval {
            period: kimg_to_steps(8.0, 128),
        },
        StrategyKind::Ccd(RampDirection::Increasing),
    ]
}

/// Steps consuming `kimg` thousand samples at `batch` samples per step.
pub fn kimg_to_steps(kimg: f64, batch: usize) -> u64 {
    ((kimg * 1000.0 / batch as f64).round() as u64).max(1)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::config(key, format!("expected true/false, got `{other}`"))),
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    match value.trim() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        v => parse(key, v),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let cfg = Self::parse_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` lines over the defaults without validating.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", no + 1), format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                let kind: DatasetKind = value.parse()?;
                if kind.name() != self.dataset.name() {
                    self.dataset = kind;
                }
            }
            "ring_k" | "ring_radius" | "ring_sigma" => {
                let DatasetKind::Ring { k, radius, sigma } = &mut self.dataset else {
                    return Err(Error::config(key, "only valid with dataset = ring (set dataset first)"));
                };
                match key {
                    "ring_k" => *k = parse(key, value)?,
                    "ring_radius" => *radius = parse(key, value)?,
                    _ => *sigma = parse(key, value)?,
                }
            }
            "spiral_turns" | "spiral_radius" | "spiral_noise" => {
                let DatasetKind::Spiral { turns, radius, noise } = &mut self.dataset else {
                    return Err(Error::config(key, "only valid with dataset = spiral (set dataset first)"));
                };
                match key {
                    "spiral_turns" => *turns = parse(key, value)?,
                    "spiral_radius" => *radius = parse(key, value)?,
                    _ => *noise = parse(key, value)?,
                }
            }
            "image_k" | "image_size" | "image_noise" => {
                let DatasetKind::MicroImages { k, size, noise } = &mut self.dataset else {
                    return Err(Error::config(key, "only valid with dataset = micro-images (set dataset first)"));
                };
                match key {
                    "image_k" => *k = parse(key, value)?,
                    "image_size" => *size = parse(key, value)?,
                    _ => *noise = parse(key, value)?,
                }
            }
            "latent_dim" => self.network.latent_dim = parse(key, value)?,
            "gen_hidden" => self.network.gen_hidden = parse_list(key, value)?,
            "disc_hidden" => self.network.disc_hidden = parse_list(key, value)?,
            "conv_channels" => self.network.conv_channels = parse_list(key, value)?,
            "kernel" => self.network.kernel = parse(key, value)?,
            "slope" => self.network.slope = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "output_scale" => {
                self.output_scale = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "strategy" => {
                self.strategy = match value {
                    "fixed" | "fixed-interval" => StrategyKind::FixedInterval {
                        period: match self.strategy {
                            StrategyKind::FixedInterval { period } => period,
                            _ => kimg_to_steps(8.0, self.batch),
                        },
                    },
                    v => v.parse().map_err(|e: Error| match e {
                        Error::Config { message, .. } => Error::config(key, message),
                        other => other,
                    })?,
                };
                if self.strategy == StrategyKind::DynamicHead && self.heads == 1 {
                    self.heads = 8;
                }
            }
            "period" | "period_kimg" => {
                let period = if key == "period" {
                    parse(key, value)?
                } else {
                    kimg_to_steps(parse(key, value)?, self.batch)
                };
                if period == 0 {
                    return Err(Error::config(key, "must be ≥ 1"));
                }
                self.strategy = StrategyKind::FixedInterval { period };
            }
            "ccd_direction" => {
                let dir = match value {
                    "increasing" | "up" => RampDirection::Increasing,
                    "decreasing" | "down" => RampDirection::Decreasing,
                    other => return Err(Error::config(key, format!("expected increasing/decreasing, got `{other}`"))),
                };
                self.strategy = StrategyKind::Ccd(dir);
            }
            "lambda" => self.lambda = parse_f64(key, value)?,
            "ratio" => self.ratio = parse(key, value)?,
            "layer" => self.layer = if value == "auto" { None } else { Some(parse(key, value)?) },
            "cadence" => self.cadence = parse(key, value)?,
            "probability" => self.probability = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "rescale" => self.rescale = parse_bool(key, value)?,
            "granularity" => {
                self.granularity = match value {
                    "element" => MaskGranularity::Element,
                    "channel" => MaskGranularity::Channel,
                    other => return Err(Error::config(key, format!("expected element/channel, got `{other}`"))),
                }
            }
            "detect_while_masked" => self.detect_while_masked = parse_bool(key, value)?,
            "probe_size" => self.probe_size = parse(key, value)?,
            "lr" => self.optimizer.lr = parse(key, value)?,
            "beta1" => self.optimizer.beta1 = parse(key, value)?,
            "beta2" => self.optimizer.beta2 = parse(key, value)?,
            "eps" => self.optimizer.eps = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "snapshot_every" => self.snapshot_every = parse(key, value)?,
            "keep_every" => self.keep_every = parse(key, value)?,
            "eval_samples" => self.eval_samples = parse(key, value)?,
            "embed_hidden" => self.embed_hidden = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "retention" => self.retention = parse_bool(key, value)?,
            "sweep" => {
                self.sweep = match value {
                    "grid" => SweepMode::Grid,
                    "strategies" => SweepMode::Strategies,
                    other => return Err(Error::config(key, format!("expected grid/strategies, got `{other}`"))),
                }
            }
            "sweep_layers" => self.sweep_layers = parse_list(key, value)?,
            "sweep_ratios" => self.sweep_ratios = parse_list(key, value)?,
            "sweep_probabilities" => self.sweep_probabilities = parse_list(key, value)?,
            "sweep_strategies" => {
                self.sweep_strategies = parse_list::<String>(key, value)?
                    .iter()
                    .map(|s| s.parse().map_err(|_| Error::config(key, format!("unknown strategy `{s}`"))))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Number of discriminator layers, head included.
    pub fn disc_layers(&self) -> usize {
        self.network.disc_layers(self.dataset.shape())
    }

    pub fn resolved_layer(&self) -> usize {
        self.layer.unwrap_or_else(|| default_layer(self.disc_layers()))
    }

    pub fn resolved_output_scale(&self) -> f64 {
        self.output_scale.unwrap_or_else(|| match self.dataset {
            DatasetKind::MicroImages { .. } => 1.0,
            _ => 1.5 * self.dataset.extent(),
        })
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            strategy: self.strategy,
            threshold: self.lambda,
            ratio: self.ratio,
            layer_index: self.resolved_layer(),
            cadence: self.cadence,
            mask_probability: self.probability,
            dropout_rate: self.dropout_rate,
            rescale: self.rescale,
            granularity: self.granularity,
            total_steps: self.steps,
            detect_while_masked: self.detect_while_masked,
        }
    }

    /// Checks every field; the error names the first offending key.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let layers = self.disc_layers();
        if self.network.disc_hidden.is_empty() {
            return Err(Error::config("disc_hidden", "needs at least one hidden layer"));
        }
        if self.network.gen_hidden.iter().chain(&self.network.disc_hidden).any(|&w| w == 0) {
            return Err(Error::config("gen_hidden", "layer widths must be positive"));
        }
        if self.network.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be positive"));
        }
        if self.network.kernel % 2 == 0 {
            return Err(Error::config("kernel", "must be odd"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be ≥ 1"));
        }
        if let Some(s) = self.output_scale {
            if !(s > 0.0) {
                return Err(Error::config("output_scale", "must be positive"));
            }
        }
        let d = self.resolved_layer();
        if d == 0 || d > layers {
            return Err(Error::config(
                "layer",
                format!("layer {d} does not exist (discriminator has {layers} layers)"),
            ));
        }
        if self.lambda.is_nan() {
            return Err(Error::config("lambda", "must not be NaN"));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::config("ratio", format!("{} outside [0, 1]", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("probability", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1]"));
        }
        if self.cadence == 0 {
            return Err(Error::config("cadence", "must be ≥ 1"));
        }
        if self.strategy == StrategyKind::DynamicHead {
            if self.heads < 2 {
                return Err(Error::config("heads", "dynamic head needs at least 2 logits"));
            }
            if (self.ratio * self.heads as f64).round() as usize >= self.heads {
                return Err(Error::config("ratio", "dynamic head mask would remove every logit"));
            }
        }
        if self.probe_size == 0 {
            return Err(Error::config("probe_size", "must be ≥ 1"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.steps < self.cadence {
            return Err(Error::config("steps", format!("{} is below the cadence {}", self.steps, self.cadence)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be ≥ 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::config("snapshot_every", "must be ≥ 1"));
        }
        if self.keep_every == 0 {
            return Err(Error::config("keep_every", "must be ≥ 1"));
        }
        if self.eval_samples < 2 {
            return Err(Error::config("eval_samples", "must be ≥ 2"));
        }
        if self.embed_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "embedding sizes must be positive"));
        }
        if let Some(&bad) = self.sweep_layers.iter().find(|&&l| l == 0 || l > layers) {
            return Err(Error::config(
                "sweep_layers",
                format!("layer {bad} does not exist (discriminator has {layers} layers)"),
            ));
        }
        if let Some(bad) = self.sweep_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::config("sweep_ratios", format!("{bad} outside [0, 1]")));
        }
        if let Some(bad) = self.sweep_probabilities.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::config("sweep_probabilities", format!("{bad} outside [0, 1]")));
        }
        Ok(())
    }

    /// Full effective configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", self.dataset.name().into());
        match self.dataset {
            DatasetKind::Ring { k, radius, sigma } => {
                kv("ring_k", k.to_string());
                kv("ring_radius", radius.to_string());
                kv("ring_sigma", sigma.to_string());
            }
            DatasetKind::Spiral { turns, radius, noise } => {
                kv("spiral_turns", turns.to_string());
                kv("spiral_radius", radius.to_string());
                kv("spiral_noise", noise.to_string());
            }
            DatasetKind::MicroImages { k, size, noise } => {
                kv("image_k", k.to_string());
                kv("image_size", size.to_string());
                kv("image_noise", noise.to_string());
            }
        }
        let n = &self.network;
        kv("latent_dim", n.latent_dim.to_string());
        kv("gen_hidden", join(&n.gen_hidden));
        kv("disc_hidden", join(&n.disc_hidden));
        kv("conv_channels", join(&n.conv_channels));
        kv("kernel", n.kernel.to_string());
        kv("slope", n.slope.to_string());
        kv("heads", self.heads.to_string());
        kv(
            "output_scale",
            self.output_scale.map_or_else(|| "auto".into(), |v| v.to_string()),
        );
        match self.strategy {
            StrategyKind::FixedInterval { period } => {
                kv("strategy", "fixed".into());
                kv("period", period.to_string());
            }
            other => kv("strategy", other.to_string()),
        }
        kv("lambda", fmt_f64(self.lambda));
        kv("ratio", self.ratio.to_string());
        kv("layer", self.layer.map_or_else(|| "auto".into(), |v| v.to_string()));
        kv("cadence", self.cadence.to_string());
        kv("probability", self.probability.to_string());
        kv("dropout_rate", self.dropout_rate.to_string());
        kv("rescale", self.rescale.to_string());
        kv(
            "granularity",
            match self.granularity {
                MaskGranularity::Element => "element".into(),
                MaskGranularity::Channel => "channel".into(),
            },
        );
        kv("detect_while_masked", self.detect_while_masked.to_string());
        kv("probe_size", self.probe_size.to_string());
        kv("lr", self.optimizer.lr.to_string());
        kv("beta1", self.optimizer.beta1.to_string());
        kv("beta2", self.optimizer.beta2.to_string());
        kv("eps", self.optimizer.eps.to_string());
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("seeds", join(&self.seeds));
        kv("out", self.out.display().to_string());
        kv("snapshot_every", self.snapshot_every.to_string());
        kv("keep_every", self.keep_every.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("embed_hidden", self.embed_hidden.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("retention", self.retention.to_string());
        kv(
            "sweep",
            match self.sweep {
                SweepMode::Grid => "grid".into(),
                SweepMode::Strategies => "strategies".into(),
            },
        );
        kv("sweep_layers", join(&self.sweep_layers));
        kv("sweep_ratios", join(&self.sweep_ratios));
        kv("sweep_probabilities", join(&self.sweep_probabilities));
        kv("sweep_strategies", join(&self.sweep_strategies));
        s
    }

    /// Hash of every setting that shapes a training trajectory.
    ///
    /// Output location and the seed list are excluded, so a run can resume
    /// into another directory.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for line in self.to_text().lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if matches!(key, "out" | "seeds") || key.starts_with("sweep") {
                continue;
            }
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.to_string()
    }
}

/// Layer 5 when the discriminator has at least 5 layers, else the penultimate one.
pub fn default_layer(layers: usize) -> usize {
    if layers >= 5 {
        5
    } else {
        layers.saturating_sub(1).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.disc_layers(), 6);
        assert_eq!(c.resolved_layer(), 5);
        assert_eq!(c.resolved_output_scale(), 1.5 * 2.06);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("strategy", "fixed").unwrap();
        c.set("period_kimg", "16").unwrap();
        c.set("lambda", "inf").unwrap();
        c.set("seeds", "7,9").unwrap();
        let back = ExperimentConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.strategy, StrategyKind::FixedInterval { period: 125 });
        assert_eq!(back.fingerprint(), c.fingerprint());
    }

    #[test]
    fn errors_name_the_field() {
        let field = |text: &str| match ExperimentConfig::parse_text(text).and_then(|c| c.validate()) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field("ratio = 1.5"), "ratio");
        assert_eq!(field("layer = 9"), "layer");
        assert_eq!(field("seeds ="), "seeds");
        assert_eq!(field("steps = 10\ncadence = 20"), "steps");
        assert_eq!(field("strategy = attention"), "strategy");
        assert_eq!(field("colour = red"), "colour");
        assert_eq!(field("batch = many"), "batch");
        assert_eq!(field("sweep_layers = 3,8"), "sweep_layers");
    }

    #[test]
    fn default_layer_rule() {
        assert_eq!(default_layer(6), 5);
        assert_eq!(default_layer(4), 3);
        assert_eq!(default_layer(2), 1);
    }

    #[test]
    fn kimg_mapping() {
        assert_eq!(kimg_to_steps(4.0, 128), 31);
        assert_eq!(kimg_to_steps(8.0, 128), 63);
        assert_eq!(kimg_to_steps(24.0, 128), 188);
    }
}
