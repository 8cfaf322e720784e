//! Retardation detection, mask lifecycle and the masking strategies.
//!
//! The default strategy ([`StrategyKind::FeatureMask`]) keeps a pending mask
//! for one discriminator layer. At every detection boundary the layer's
//! response to probe samples is compared with and without that mask; when the
//! mean cosine similarity exceeds `λ` the pending mask becomes the training
//! mask for the next interval, otherwise training continues unmasked and a
//! fresh pending mask is drawn.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gan::{Discriminator, LayerMask, PhaseIndicator, StepMasks};
use crate::tensor::{dot, Tensor};

/// Zeroing granularity of a sampled mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskGranularity {
    /// Individual feature elements.
    #[default]
    Element,
    /// Whole channels (leading per-sample dimension).
    Channel,
}

/// A frozen binary mask for the input of one discriminator layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub layer_index: usize,
    pub mask: Tensor,
    pub ratio: f64,
    /// Steps `(start, end]` the mask governs; `end` is open until known.
    pub interval: (u64, Option<u64>),
    pub seed: u64,
}

impl MaskSpec {
    pub fn zeros(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 0.0).count()
    }

    /// Short content hash of the mask values.
    pub fn hash(&self) -> String {
        tensor_hash(&self.mask)
    }

    pub fn as_layer_mask(&self) -> LayerMask {
        LayerMask {
            layer_index: self.layer_index,
            values: self.mask.clone(),
        }
    }
}

/// First 16 hex digits of the SHA-256 of a tensor's bit patterns.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    Ok(())
}

/// Samples a mask with exactly `round(ratio · numel)` zeros.
///
/// Zero positions are drawn uniformly without replacement from `seed`.
pub fn sample_mask(layer_index: usize, shape: &[usize], ratio: f64, seed: u64) -> Result<MaskSpec> {
    sample_mask_with(layer_index, shape, ratio, seed, MaskGranularity::Element)
}

pub fn sample_mask_with(
    layer_index: usize,
    shape: &[usize],
    ratio: f64,
    seed: u64,
    granularity: MaskGranularity,
) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let numel: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![1.0; numel];
    match granularity {
        MaskGranularity::Element => {
            let zeros = (ratio * numel as f64).round() as usize;
            for i in index::sample(&mut rng, numel, zeros.min(numel)) {
                data[i] = 0.0;
            }
        }
        MaskGranularity::Channel => {
            let channels = shape.first().copied().unwrap_or(1).max(1);
            let per = numel / channels;
            let zeros = (ratio * channels as f64).round() as usize;
            for c in index::sample(&mut rng, channels, zeros.min(channels)) {
                data[c * per..(c + 1) * per].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(MaskSpec {
        layer_index,
        mask: Tensor::new(shape.to_vec(), data)?,
        ratio,
        interval: (0, None),
        seed,
    })
}

/// Outcome of one retardation check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetardationReport {
    pub step: u64,
    /// Mean cosine similarity between masked and unmasked features.
    pub value: f64,
    pub threshold: f64,
    pub samples: usize,
    pub retarded: bool,
}

impl RetardationReport {
    pub fn new(step: u64, value: f64, threshold: f64, samples: usize) -> Self {
        Self {
            step,
            value,
            threshold,
            samples,
            retarded: value > threshold,
        }
    }
}

/// Cosine similarity, with `0` for a zero-norm operand.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm feature vector; cosine taken as 0");
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean row-wise cosine between two equally shaped batches.
pub fn mean_cosine(plain: &Tensor, masked: &Tensor) -> Result<f64> {
    if plain.shape() != masked.shape() {
        return Err(Error::ShapeMismatch {
            op: "mean_cosine",
            left: plain.shape().to_vec(),
            right: masked.shape().to_vec(),
        });
    }
    let rows = plain.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::EmptyBatch("retardation probe"));
    }
    let width = plain.numel() / rows;
    let total: f64 = plain
        .data()
        .chunks(width)
        .zip(masked.data().chunks(width))
        .map(|(a, b)| cosine(a, b))
        .sum();
    Ok(total / rows as f64)
}

/// Retardation metric with the mask applied at and tapped from the same layer.
pub fn retardation(
    disc: &Discriminator,
    probe: &Tensor,
    mask: &MaskSpec,
    threshold: f64,
    step: u64,
) -> Result<RetardationReport> {
    retardation_at(disc, probe, mask, mask.layer_index, threshold, step)
}

/// Retardation metric comparing `F^(tap_layer)` with and without `mask`.
pub fn retardation_at(
    disc: &Discriminator,
    probe: &Tensor,
    mask: &MaskSpec,
    tap_layer: usize,
    threshold: f64,
    step: u64,
) -> Result<RetardationReport> {
    let rows = probe.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::EmptyBatch("retardation probe"));
    }
    disc.layer(tap_layer)?;
    let pick = |taps: Vec<crate::gan::FeatureTap>| {
        taps.into_iter()
            .find(|t| t.layer_index == tap_layer)
            .map(|t| t.output)
            .ok_or(Error::LayerIndex {
                index: tap_layer,
                layers: disc.num_layers(),
            })
    };
    let plain = pick(disc.features(probe, None)?.1)?;
    let masked = pick(disc.features(probe, Some(&mask.as_layer_mask()))?.1)?;
    let value = mean_cosine(&plain, &masked)?;
    Ok(RetardationReport::new(step, value, threshold, rows))
}

/// Retardation metric on the output logits under a logit mask.
pub fn head_retardation(
    disc: &Discriminator,
    probe: &Tensor,
    head_mask: &Tensor,
    threshold: f64,
    step: u64,
) -> Result<RetardationReport> {
    let rows = probe.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::EmptyBatch("retardation probe"));
    }
    if head_mask.shape() != [disc.heads] {
        return Err(Error::ShapeMismatch {
            op: "head mask",
            left: vec![disc.heads],
            right: head_mask.shape().to_vec(),
        });
    }
    let (logits, _) = disc.features(probe, None)?;
    let masked: Vec<f64> = logits
        .data()
        .chunks(disc.heads)
        .flat_map(|row| row.iter().zip(head_mask.data()).map(|(a, m)| a * m).collect::<Vec<_>>())
        .collect();
    let masked = Tensor::new(logits.shape().to_vec(), masked)?;
    let value = mean_cosine(&logits, &masked)?;
    Ok(RetardationReport::new(step, value, threshold, rows))
}

/// How fresh masks are drawn for the scheduler.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub layer_index: usize,
    pub shape: Vec<usize>,
    pub ratio: f64,
    pub granularity: MaskGranularity,
    /// Length of the interval a newly activated mask governs.
    pub interval: u64,
}

impl MaskConfig {
    pub fn new(layer_index: usize, shape: Vec<usize>, ratio: f64, interval: u64) -> Result<Self> {
        check_ratio(ratio)?;
        Ok(Self {
            layer_index,
            shape,
            ratio,
            granularity: MaskGranularity::Element,
            interval,
        })
    }

    pub fn sample(&self, seed: u64) -> MaskSpec {
        sample_mask_with(self.layer_index, &self.shape, self.ratio, seed, self.granularity)
            .expect("ratio validated at construction")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PhaseState {
    NonMasked,
    Masked(MaskSpec),
}

/// Scheduler state: which discriminator trains and the mask to probe next.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorPhase {
    pub state: PhaseState,
    pub steps_in_state: u64,
    /// `M_T`: the mask the next detection probes with.
    pub pending: MaskSpec,
    pub config: MaskConfig,
}

impl DiscriminatorPhase {
    pub fn new(config: MaskConfig, rng: &mut impl RngCore) -> Self {
        let pending = config.sample(rng.next_u64());
        Self {
            state: PhaseState::NonMasked,
            steps_in_state: 0,
            pending,
            config,
        }
    }

    pub fn is_masked(&self) -> bool {
        matches!(self.state, PhaseState::Masked(_))
    }

    pub fn active_mask(&self) -> Option<&MaskSpec> {
        match &self.state {
            PhaseState::Masked(m) => Some(m),
            PhaseState::NonMasked => None,
        }
    }

    pub fn tick(&mut self) {
        self.steps_in_state += 1;
    }
}

/// One scheduler transition at a detection boundary.
///
/// A retarded report activates the probed mask for the next interval and keeps
/// it as the pending mask; otherwise training goes unmasked and a fresh
/// pending mask is drawn from `rng`.
pub fn scheduler_step(
    phase: &DiscriminatorPhase,
    report: &RetardationReport,
    rng: &mut impl RngCore,
) -> DiscriminatorPhase {
    let mut next = phase.clone();
    if report.retarded {
        let mut active = phase.pending.clone();
        active.interval = (report.step, Some(report.step + phase.config.interval));
        let same = phase.active_mask().map(|m| m.mask == active.mask).unwrap_or(false);
        if !same {
            next.steps_in_state = 0;
        }
        next.pending = active.clone();
        next.state = PhaseState::Masked(active);
    } else {
        if phase.is_masked() {
            next.steps_in_state = 0;
        }
        next.state = PhaseState::NonMasked;
        let mut fresh = phase.config.sample(rng.next_u64());
        fresh.interval = (report.step, None);
        next.pending = fresh;
    }
    next
}

/// `true` iff `step` is a detection boundary for `cadence`.
pub fn detection_cadence(step: u64, cadence: u64) -> bool {
    cadence >= 1 && step % cadence == 0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RampDirection {
    Increasing,
    Decreasing,
}

/// Linear mask-ratio ramp between 0.1 and 0.9 over the run.
pub fn ccd_ratio(direction: RampDirection, run_fraction: f64) -> f64 {
    let f = run_fraction.clamp(0.0, 1.0);
    match direction {
        RampDirection::Increasing => 0.1 + 0.8 * f,
        RampDirection::Decreasing => 0.9 - 0.8 * f,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Plain discriminator, no masking or detection.
    Baseline,
    /// Detection-driven feature mask at layer `d`.
    FeatureMask,
    /// Detection-driven mask on the raw discriminator input.
    InputMask,
    /// Detection-driven mask over `k` output logits.
    DynamicHead,
    /// Per-step Bernoulli masks at layer `d`, never held fixed.
    VanillaDropout,
    /// Mask toggled every `period` steps, ignoring detection.
    FixedInterval { period: u64 },
    /// Always-on mask with a linearly ramped ratio, resampled per boundary.
    Ccd(RampDirection),
}

impl StrategyKind {
    pub fn uses_detection(&self) -> bool {
        matches!(
            self,
            StrategyKind::FeatureMask | StrategyKind::InputMask | StrategyKind::DynamicHead
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyKind::Baseline => f.write_str("baseline"),
            StrategyKind::FeatureMask => f.write_str("dmd"),
            StrategyKind::InputMask => f.write_str("input-mask"),
            StrategyKind::DynamicHead => f.write_str("dynamic-head"),
            StrategyKind::VanillaDropout => f.write_str("dropout"),
            StrategyKind::FixedInterval { period } => write!(f, "fixed-{period}"),
            StrategyKind::Ccd(RampDirection::Increasing) => f.write_str("ccd-up"),
            StrategyKind::Ccd(RampDirection::Decreasing) => f.write_str("ccd-down"),
        }
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim() {
            "baseline" => StrategyKind::Baseline,
            "dmd" | "feature-mask" => StrategyKind::FeatureMask,
            "input-mask" => StrategyKind::InputMask,
            "dynamic-head" => StrategyKind::DynamicHead,
            "dropout" | "vanilla-dropout" => StrategyKind::VanillaDropout,
            "ccd" | "ccd-up" => StrategyKind::Ccd(RampDirection::Increasing),
            "ccd-down" => StrategyKind::Ccd(RampDirection::Decreasing),
            other => match other.strip_prefix("fixed-") {
                Some(p) => {
                    let period: u64 = p
                        .parse()
                        .map_err(|_| Error::config("strategy", format!("bad period in `{other}`")))?;
                    if period == 0 {
                        return Err(Error::config("strategy", "fixed-interval period must be ≥ 1"));
                    }
                    StrategyKind::FixedInterval { period }
                }
                None => return Err(Error::config("strategy", format!("unknown strategy `{other}`"))),
            },
        };
        Ok(kind)
    }
}

/// Engine settings shared by all strategies.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub strategy: StrategyKind,
    /// `λ`
    pub threshold: f64,
    pub ratio: f64,
    /// Layer `d` whose input is masked and whose output is probed.
    pub layer_index: usize,
    pub cadence: u64,
    pub mask_probability: f64,
    pub dropout_rate: f64,
    /// Inverted-dropout rescaling of kept features.
    pub rescale: bool,
    pub granularity: MaskGranularity,
    pub total_steps: u64,
    /// Whether detection also runs while a mask is active.
    pub detect_while_masked: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::FeatureMask,
            threshold: 0.85,
            ratio: 0.3,
            layer_index: 5,
            cadence: 31,
            mask_probability: 1.0,
            dropout_rate: 0.5,
            rescale: false,
            granularity: MaskGranularity::Element,
            total_steps: 25_000,
            detect_while_masked: true,
        }
    }
}

/// Where a step's mask is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPlacement {
    None,
    Feature { layer_index: usize },
    Input,
    Logits,
    Dropout { layer_index: usize },
}

/// Everything a training step needs from the engine.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub phase: PhaseIndicator,
    pub placement: MaskPlacement,
    pub d_masks: StepMasks,
    pub g_masks: StepMasks,
}

/// One row of the detection log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub step: u64,
    #[serde(rename = "R_t")]
    pub value: f64,
    #[serde(rename = "lambda")]
    pub threshold: f64,
    #[serde(rename = "decision")]
    pub retarded: bool,
    #[serde(rename = "active_strategy")]
    pub strategy: String,
    pub ratio: f64,
    pub layer_index: usize,
    pub mask_hash: String,
}

/// Per-run strategy state, advanced once per training step.
#[derive(Clone, Debug)]
pub struct DmdEngine {
    config: EngineConfig,
    phase: DiscriminatorPhase,
    rng: ChaCha8Rng,
    toggles: u64,
    masked_steps: u64,
    steps: u64,
}

impl DmdEngine {
    pub fn new(config: EngineConfig, disc: &Discriminator, seed: u64) -> Result<Self> {
        validate_engine(&config, disc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask_config = mask_config_for(&config, disc)?;
        let mut phase = DiscriminatorPhase::new(mask_config, &mut rng);
        if config.strategy.uses_detection() {
            // The scheduler starts from R = 0 before any detection has run.
            let initial = RetardationReport::new(0, 0.0, config.threshold, 1);
            phase = scheduler_step(&phase, &initial, &mut rng);
        }
        if let StrategyKind::Ccd(dir) = config.strategy {
            phase.config.ratio = ccd_ratio(dir, 0.0);
            let m = phase.config.sample(rng.next_u64());
            phase.pending = m.clone();
            phase.state = PhaseState::Masked(m);
        }
        Ok(Self {
            config,
            phase,
            rng,
            toggles: 0,
            masked_steps: 0,
            steps: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn phase(&self) -> &DiscriminatorPhase {
        &self.phase
    }

    pub fn toggles(&self) -> u64 {
        self.toggles
    }

    /// Fraction of steps so far that trained the masked discriminator.
    pub fn masked_fraction(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.masked_steps as f64 / self.steps as f64
        }
    }

    /// Whether `step` needs a probe batch for [`DmdEngine::boundary`].
    pub fn needs_probe(&self, step: u64) -> bool {
        self.config.strategy.uses_detection()
            && detection_cadence(step, self.config.cadence)
            && (self.config.detect_while_masked || !self.phase.is_masked())
    }

    /// Runs the per-step boundary logic before training at `step`.
    ///
    /// Returns a detection record when a retardation check ran.
    pub fn boundary(
        &mut self,
        step: u64,
        disc: &Discriminator,
        probe: Option<&Tensor>,
    ) -> Result<Option<(RetardationReport, DetectionRecord)>> {
        let cadence = self.config.cadence;
        match self.config.strategy {
            StrategyKind::Baseline | StrategyKind::VanillaDropout => Ok(None),
            StrategyKind::FixedInterval { period } => {
                if step % period == 0 {
                    self.toggles += 1;
                    if self.phase.is_masked() {
                        self.phase.state = PhaseState::NonMasked;
                    } else {
                        let mut m = self.phase.config.sample(self.rng.next_u64());
                        m.interval = (step, Some(step + period));
                        self.phase.pending = m.clone();
                        self.phase.state = PhaseState::Masked(m);
                    }
                    self.phase.steps_in_state = 0;
                }
                Ok(None)
            }
            StrategyKind::Ccd(dir) => {
                if detection_cadence(step, cadence) {
                    let frac = step as f64 / self.config.total_steps.max(1) as f64;
                    self.phase.config.ratio = ccd_ratio(dir, frac);
                    let mut m = self.phase.config.sample(self.rng.next_u64());
                    m.interval = (step, Some(step + cadence));
                    self.phase.pending = m.clone();
                    self.phase.state = PhaseState::Masked(m);
                    self.phase.steps_in_state = 0;
                }
                Ok(None)
            }
            StrategyKind::FeatureMask | StrategyKind::InputMask | StrategyKind::DynamicHead => {
                if !detection_cadence(step, cadence) {
                    return Ok(None);
                }
                if self.phase.is_masked() && !self.config.detect_while_masked {
                    // Interval over: unmask and draw the next probe mask.
                    let skip = RetardationReport::new(step, f64::NEG_INFINITY, self.config.threshold, 1);
                    self.phase = scheduler_step(&self.phase, &skip, &mut self.rng);
                    self.toggles += 1;
                    return Ok(None);
                }
                let probe = probe.ok_or(Error::EmptyBatch("retardation probe"))?;
                let pending = &self.phase.pending;
                let report = match self.config.strategy {
                    StrategyKind::FeatureMask => {
                        retardation(disc, probe, pending, self.config.threshold, step)?
                    }
                    StrategyKind::InputMask => retardation_at(
                        disc,
                        probe,
                        pending,
                        self.config.layer_index,
                        self.config.threshold,
                        step,
                    )?,
                    _ => head_retardation(disc, probe, &pending.mask, self.config.threshold, step)?,
                };
                let record = DetectionRecord {
                    step,
                    value: report.value,
                    threshold: report.threshold,
                    retarded: report.retarded,
                    strategy: self.config.strategy.to_string(),
                    ratio: pending.ratio,
                    layer_index: self.config.layer_index,
                    mask_hash: pending.hash(),
                };
                let was_masked = self.phase.is_masked();
                self.phase = scheduler_step(&self.phase, &report, &mut self.rng);
                if was_masked != self.phase.is_masked() {
                    self.toggles += 1;
                }
                Ok(Some((report, record)))
            }
        }
    }

    /// Effective mask placement for the step that follows [`DmdEngine::boundary`].
    pub fn apply_strategy(&mut self, batch: usize) -> Result<StepPlan> {
        self.steps += 1;
        self.phase.tick();
        let p = self.config.mask_probability;
        let plan = match self.config.strategy {
            StrategyKind::Baseline => StepPlan::unmasked(),
            StrategyKind::VanillaDropout => {
                let d = self.config.layer_index;
                let real = self.dropout_mask(d, batch);
                let fake = self.dropout_mask(d, batch);
                let gen = self.dropout_mask(d, batch);
                StepPlan {
                    phase: PhaseIndicator::masked(),
                    placement: MaskPlacement::Dropout { layer_index: d },
                    d_masks: StepMasks {
                        real: Some(real),
                        fake: Some(fake),
                        head: None,
                    },
                    g_masks: StepMasks {
                        real: None,
                        fake: Some(gen),
                        head: None,
                    },
                }
            }
            _ => match self.phase.active_mask() {
                None => StepPlan::unmasked(),
                Some(active) => {
                    let use_mask = p >= 1.0 || self.rng.random::<f64>() < p;
                    let (placement, masks) = match self.config.strategy {
                        StrategyKind::DynamicHead => {
                            (MaskPlacement::Logits, StepMasks::head(active.mask.clone()))
                        }
                        StrategyKind::InputMask => {
                            (MaskPlacement::Input, StepMasks::shared(self.scaled(active)))
                        }
                        _ => (
                            MaskPlacement::Feature {
                                layer_index: active.layer_index,
                            },
                            StepMasks::shared(self.scaled(active)),
                        ),
                    };
                    StepPlan {
                        phase: PhaseIndicator {
                            use_mask,
                            mask_probability: p,
                        },
                        placement: if use_mask { placement } else { MaskPlacement::None },
                        g_masks: masks.clone(),
                        d_masks: masks,
                    }
                }
            },
        };
        if plan.phase.use_mask {
            self.masked_steps += 1;
        }
        Ok(plan)
    }

    fn scaled(&self, active: &MaskSpec) -> LayerMask {
        let mut m = active.as_layer_mask();
        if self.config.rescale && active.ratio < 1.0 {
            let keep = 1.0 / (1.0 - active.ratio);
            m.values.data_mut().iter_mut().for_each(|v| *v *= keep);
        }
        m
    }

    fn dropout_mask(&mut self, layer_index: usize, batch: usize) -> LayerMask {
        let per = &self.phase.config.shape;
        let n: usize = per.iter().product::<usize>() * batch;
        let rate = self.config.dropout_rate;
        let keep = if self.config.rescale && rate < 1.0 {
            1.0 / (1.0 - rate)
        } else {
            1.0
        };
        let data = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut shape = vec![batch];
        shape.extend(per);
        LayerMask {
            layer_index,
            values: Tensor::new(shape, data).expect("dropout shape"),
        }
    }

    /// Engine state for checkpoints: RNG cursor and counters.
    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            toggles: self.toggles,
            masked_steps: self.masked_steps,
            steps: self.steps,
            phase: self.phase.clone(),
        }
    }

    pub fn restore(config: EngineConfig, snap: EngineSnapshot) -> Self {
        let mut rng = ChaCha8Rng::from_seed(snap.rng_seed);
        rng.set_stream(snap.rng_stream);
        rng.set_word_pos(snap.rng_word_pos);
        Self {
            config,
            phase: snap.phase,
            rng,
            toggles: snap.toggles,
            masked_steps: snap.masked_steps,
            steps: snap.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineSnapshot {
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub toggles: u64,
    pub masked_steps: u64,
    pub steps: u64,
    pub phase: DiscriminatorPhase,
}

impl StepPlan {
    pub fn unmasked() -> Self {
        Self {
            phase: PhaseIndicator::UNMASKED,
            placement: MaskPlacement::None,
            d_masks: StepMasks::none(),
            g_masks: StepMasks::none(),
        }
    }
}

fn mask_config_for(config: &EngineConfig, disc: &Discriminator) -> Result<MaskConfig> {
    let (layer, shape) = match config.strategy {
        StrategyKind::InputMask => (1, disc.input_shape(1)?),
        StrategyKind::DynamicHead => (disc.num_layers(), vec![disc.heads]),
        _ => (config.layer_index, disc.input_shape(config.layer_index)?),
    };
    let mut mc = MaskConfig::new(layer, shape, config.ratio, config.cadence)?;
    mc.granularity = config.granularity;
    Ok(mc)
}

fn validate_engine(config: &EngineConfig, disc: &Discriminator) -> Result<()> {
    if config.cadence == 0 {
        return Err(Error::config("cadence", "must be ≥ 1"));
    }
    if !(0.0..=1.0).contains(&config.mask_probability) {
        return Err(Error::config("probability", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&config.dropout_rate) {
        return Err(Error::config("dropout_rate", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&config.ratio) {
        return Err(Error::config("ratio", format!("{} outside [0, 1]", config.ratio)));
    }
    if config.layer_index == 0 || config.layer_index > disc.num_layers() {
        return Err(Error::config(
            "layer",
            format!(
                "layer {} does not exist (discriminator has {} layers)",
                config.layer_index,
                disc.num_layers()
            ),
        ));
    }
    if config.threshold.is_nan() {
        return Err(Error::config("lambda", "must not be NaN"));
    }
    if config.strategy == StrategyKind::DynamicHead {
        if disc.heads < 2 && (config.ratio * disc.heads as f64).round() >= disc.heads as f64 {
            return Err(Error::config(
                "heads",
                "dynamic head with a fully masked single logit has no output",
            ));
        }
        if (config.ratio * disc.heads as f64).round() >= disc.heads as f64 {
            return Err(Error::config("ratio", "dynamic head mask would remove every logit"));
        }
    }
    Ok(())
}

/// Summary of observed retardation values, for choosing `λ` from data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub count: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

/// Distribution of the first `first_n` retardation values.
pub fn calibrate(reports: &[RetardationReport], first_n: usize) -> Option<Calibration> {
    let mut v: Vec<f64> = reports.iter().take(first_n).map(|r| r.value).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(Calibration {
        count: v.len(),
        min: v[0],
        q25: q(0.25),
        median: q(0.5),
        q75: q(0.75),
        max: v[v.len() - 1],
        mean: v.iter().sum::<f64>() / v.len() as f64,
    })
}
