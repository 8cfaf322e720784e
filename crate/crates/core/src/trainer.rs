//! Alternating G/D training with checkpoint and resume.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::Sampler;
use crate::engine::{DetectionRecord, DiscriminatorPhase, DmdEngine, EngineSnapshot, PhaseState, RetardationReport, StepPlan};
use crate::error::{Error, Result};
use crate::gan::{d_loss, g_loss, latent_batch, Discriminator, Generator};
use crate::nn::{params_of, params_of_mut, AdamState, LayerParams};
use crate::tensor::Tensor;

/// Independent random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Latent = 2,
    Mask = 3,
    Probe = 4,
    Analytics = 5,
    GenInit = 6,
    DiscInit = 7,
}

/// Seed for one stream of a run.
pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

/// Losses and detection output of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub masked: bool,
    pub detection: Option<(RetardationReport, DetectionRecord)>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub gen: Generator,
    pub disc: Discriminator,
    gen_opt: AdamState,
    disc_opt: AdamState,
    pub engine: DmdEngine,
    data: Sampler,
    latent_rng: ChaCha8Rng,
    probe_rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.dataset.shape();
        let gen = Generator::new(&cfg.network, shape, cfg.resolved_output_scale(), stream_seed(seed, Stream::GenInit))?;
        let disc = Discriminator::new(&cfg.network, shape, cfg.heads, stream_seed(seed, Stream::DiscInit))?;
        let gen_opt = AdamState::new(cfg.optimizer, &params_of(&gen.layers));
        let disc_opt = AdamState::new(cfg.optimizer, &params_of(&disc.layers));
        let engine = DmdEngine::new(cfg.engine_config(), &disc, stream_seed(seed, Stream::Mask))?;
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            gen,
            disc,
            gen_opt,
            disc_opt,
            engine,
            data: Sampler::new(cfg.dataset.clone(), stream_seed(seed, Stream::Data))?,
            latent_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Latent)),
            probe_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Probe)),
            step: 0,
        })
    }

    /// Completed training steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Sets the step counter after parameters were loaded from a snapshot.
    pub(crate) fn set_step_for_analysis(&mut self, step: u64) {
        self.step = step;
    }

    /// One detection boundary, one discriminator update and one generator update.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let t = self.step + 1;
        let batch = self.cfg.batch;
        let latent = self.gen.latent_dim;
        let probe = if self.engine.needs_probe(t) {
            let z = latent_batch(self.cfg.probe_size, latent, &mut self.probe_rng);
            Some(self.gen.generate(&z)?)
        } else {
            None
        };
        let detection = self.engine.boundary(t, &self.disc, probe.as_ref())?;
        let plan: StepPlan = self.engine.apply_strategy(batch)?;

        let real = self.data.batch(batch);
        let z = latent_batch(batch, latent, &mut self.latent_rng);
        let dl = d_loss(&self.gen, &self.disc, plan.phase, &plan.d_masks, &real, &z)?.backward(None, Some(&mut self.disc))?;
        self.disc_opt.step(&mut params_of_mut(&mut self.disc.layers))?;
        self.disc.zero_grad();

        let z = latent_batch(batch, latent, &mut self.latent_rng);
        let gl = g_loss(&self.gen, &self.disc, plan.phase, &plan.g_masks, &z)?.backward(Some(&mut self.gen), None)?;
        self.gen_opt.step(&mut params_of_mut(&mut self.gen.layers))?;
        self.gen.zero_grad();

        if !dl.is_finite() || !gl.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {t}: d={dl}, g={gl}")));
        }
        self.step = t;
        self.gen.step = t;
        Ok(StepOutcome {
            step: t,
            d_loss: dl,
            g_loss: gl,
            masked: plan.phase.use_mask,
            detection,
        })
    }

    /// Trains until `step_count() == target`, passing every outcome to `on_step`.
    pub fn run_until(&mut self, target: u64, mut on_step: impl FnMut(&Trainer, &StepOutcome) -> Result<()>) -> Result<()> {
        while self.step < target {
            let out = self.step()?;
            on_step(self, &out)?;
        }
        Ok(())
    }

    /// SHA-256 over the bit patterns of every generator and discriminator parameter.
    pub fn param_hash(&self) -> String {
        param_hash(&self.gen.layers, &self.disc.layers)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put("fingerprint", self.cfg.fingerprint());
        c.put("seed", self.seed);
        c.put("step", self.step);
        put_layers(&mut c, "gen", &self.gen.layers);
        put_layers(&mut c, "disc", &self.disc.layers);
        put_adam(&mut c, "gen_opt", &self.gen_opt);
        put_adam(&mut c, "disc_opt", &self.disc_opt);
        c.put_rng("rng.data", self.data.rng());
        c.put_rng("rng.latent", &self.latent_rng);
        c.put_rng("rng.probe", &self.probe_rng);
        let snap = self.engine.snapshot();
        let mut rng = ChaCha8Rng::from_seed(snap.rng_seed);
        rng.set_stream(snap.rng_stream);
        rng.set_word_pos(snap.rng_word_pos);
        c.put_rng("engine.rng", &rng);
        c.put("engine.toggles", snap.toggles);
        c.put("engine.masked_steps", snap.masked_steps);
        c.put("engine.steps", snap.steps);
        c.put("phase.steps_in_state", snap.phase.steps_in_state);
        c.put("phase.ratio", snap.phase.config.ratio);
        c.put_mask("phase.pending", &snap.phase.pending);
        match &snap.phase.state {
            PhaseState::NonMasked => c.put("phase.state", "unmasked"),
            PhaseState::Masked(m) => {
                c.put("phase.state", "masked");
                c.put_mask("phase.active", m);
            }
        }
        c
    }

    /// Rebuilds a trainer from `ckpt`; `cfg` must have the same fingerprint.
    pub fn resume(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Self> {
        let fp: String = ckpt.get("fingerprint")?;
        if fp != cfg.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "config fingerprint {} does not match checkpoint {fp}",
                cfg.fingerprint()
            )));
        }
        let seed = ckpt.get("seed")?;
        let mut t = Self::new(cfg, seed)?;
        t.step = ckpt.get("step")?;
        t.gen.step = t.step;
        get_layers(ckpt, "gen", &mut t.gen.layers)?;
        get_layers(ckpt, "disc", &mut t.disc.layers)?;
        get_adam(ckpt, "gen_opt", &mut t.gen_opt)?;
        get_adam(ckpt, "disc_opt", &mut t.disc_opt)?;
        *t.data.rng_mut() = ckpt.get_rng("rng.data")?;
        t.latent_rng = ckpt.get_rng("rng.latent")?;
        t.probe_rng = ckpt.get_rng("rng.probe")?;

        let rng = ckpt.get_rng("engine.rng")?;
        let mut config = t.engine.phase().config.clone();
        config.ratio = ckpt.get("phase.ratio")?;
        let state = match ckpt.get_str("phase.state")? {
            "unmasked" => PhaseState::NonMasked,
            "masked" => PhaseState::Masked(ckpt.get_mask("phase.active")?),
            other => return Err(Error::Checkpoint(format!("unknown phase state `{other}`"))),
        };
        let snap = EngineSnapshot {
            rng_seed: rng.get_seed(),
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
            toggles: ckpt.get("engine.toggles")?,
            masked_steps: ckpt.get("engine.masked_steps")?,
            steps: ckpt.get("engine.steps")?,
            phase: DiscriminatorPhase {
                state,
                steps_in_state: ckpt.get("phase.steps_in_state")?,
                pending: ckpt.get_mask("phase.pending")?,
                config,
            },
        };
        t.engine = DmdEngine::restore(cfg.engine_config(), snap);
        Ok(t)
    }
}

pub fn param_hash(gen: &[LayerParams], disc: &[LayerParams]) -> String {
    let mut h = Sha256::new();
    for t in params_of(gen).into_iter().chain(params_of(disc)) {
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

pub fn put_layers(c: &mut Checkpoint, key: &str, layers: &[LayerParams]) {
    c.put(format!("{key}.layers"), layers.len());
    for l in layers {
        c.put_tensor(&format!("{key}.{}.weight", l.layer_index), &l.weight);
        c.put_tensor(&format!("{key}.{}.bias", l.layer_index), &l.bias);
    }
}

/// Overwrites `layers` from checkpoint entries, checking shapes.
pub fn get_layers(c: &Checkpoint, key: &str, layers: &mut [LayerParams]) -> Result<()> {
    let n: usize = c.get(&format!("{key}.layers"))?;
    if n != layers.len() {
        return Err(Error::Checkpoint(format!("{key}: {n} layers stored, network has {}", layers.len())));
    }
    for l in layers.iter_mut() {
        for (name, slot) in [("weight", &mut l.weight), ("bias", &mut l.bias)] {
            let mut t: Tensor = c.get_tensor(&format!("{key}.{}.{name}", l.layer_index))?;
            t.set_requires_grad(slot.requires_grad());
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}.{}.{name}: stored shape {:?}, network expects {:?}",
                    l.layer_index,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    Ok(())
}

fn put_adam(c: &mut Checkpoint, key: &str, a: &AdamState) {
    c.put(format!("{key}.step"), a.step);
    for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
        c.put_f64s(format!("{key}.m.{i}"), m);
        c.put_f64s(format!("{key}.v.{i}"), v);
    }
}

fn get_adam(c: &Checkpoint, key: &str, a: &mut AdamState) -> Result<()> {
    a.step = c.get(&format!("{key}.step"))?;
    for i in 0..a.m.len() {
        let m = c.get_f64s(&format!("{key}.m.{i}"))?;
        let v = c.get_f64s(&format!("{key}.v.{i}"))?;
        if m.len() != a.m[i].len() || v.len() != a.v[i].len() {
            return Err(Error::Checkpoint(format!("{key}: moment {i} has the wrong length")));
        }
        a.m[i] = m;
        a.v[i] = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        for (k, v) in [
            ("gen_hidden", "8,8"),
            ("disc_hidden", "6,6,6,6,6"),
            ("batch", "8"),
            ("probe_size", "4"),
            ("cadence", "3"),
            ("steps", "40"),
            ("lambda", "0.5"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn streams_are_distinct() {
        let s: Vec<u64> = [Stream::Data, Stream::Latent, Stream::Mask, Stream::Probe]
            .iter()
            .map(|&s| stream_seed(0, s))
            .collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = tiny();
        let mut a = Trainer::new(&cfg, 3).unwrap();
        a.run_until(40, |_, _| Ok(())).unwrap();

        let mut b = Trainer::new(&cfg, 3).unwrap();
        b.run_until(17, |_, _| Ok(())).unwrap();
        let text = b.checkpoint().to_text();
        let mut c = Trainer::resume(&cfg, &Checkpoint::parse(&text).unwrap()).unwrap();
        c.run_until(40, |_, _| Ok(())).unwrap();
        assert_eq!(a.param_hash(), c.param_hash());
        assert_eq!(a.engine.masked_fraction(), c.engine.masked_fraction());
    }

    #[test]
    fn resume_rejects_other_config() {
        let cfg = tiny();
        let t = Trainer::new(&cfg, 0).unwrap();
        let mut other = cfg.clone();
        other.ratio = 0.5;
        assert!(matches!(Trainer::resume(&other, &t.checkpoint()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn never_retarded_equals_baseline() {
        let mut dmd = tiny();
        dmd.lambda = f64::INFINITY;
        let mut base = tiny();
        base.strategy = crate::engine::StrategyKind::Baseline;
        let mut a = Trainer::new(&dmd, 1).unwrap();
        let mut b = Trainer::new(&base, 1).unwrap();
        a.run_until(30, |_, _| Ok(())).unwrap();
        b.run_until(30, |_, _| Ok(())).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_eq!(a.engine.masked_fraction(), 0.0);
    }
}
