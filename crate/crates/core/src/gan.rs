//! Generator, discriminator with per-layer feature taps, and the
//! non-saturating losses with masked/unmasked discriminator selection.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BoundLayer, LayerKind, LayerParams};
use crate::tensor::{Tape, Tensor, UnaryOp, Var};

/// Floor applied inside every `log` of the losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// Leaky-ReLU slope used by both networks' hidden layers.
pub const DEFAULT_SLOPE: f64 = 0.2;

/// Shape of one data sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataShape {
    Vector(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl DataShape {
    pub fn numel(&self) -> usize {
        match *self {
            DataShape::Vector(n) => n,
            DataShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            DataShape::Vector(n) => vec![n],
            DataShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }
}

/// Layer widths and activation settings for both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub latent_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    /// Convolution channels placed before the dense discriminator layers
    /// (image data only).
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub slope: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            gen_hidden: vec![64, 64, 64],
            disc_hidden: vec![32, 32, 32, 32, 32],
            conv_channels: vec![4, 8],
            kernel: 3,
            slope: DEFAULT_SLOPE,
        }
    }
}

impl NetworkSpec {
    /// Number of discriminator layers for `data`, including the head.
    pub fn disc_layers(&self, data: DataShape) -> usize {
        let conv = match data {
            DataShape::Image { .. } => self.conv_channels.len(),
            DataShape::Vector(_) => 0,
        };
        conv + self.disc_hidden.len() + 1
    }
}

/// MLP generator `z ↦ scale · tanh(MLP(z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub layers: Vec<LayerParams>,
    pub latent_dim: usize,
    pub data: DataShape,
    pub output_scale: f64,
    pub slope: f64,
    /// Training step the parameters belong to.
    pub step: u64,
}

impl Generator {
    pub fn new(spec: &NetworkSpec, data: DataShape, output_scale: f64, seed: u64) -> Result<Self> {
        if spec.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be positive"));
        }
        let mut sizes = vec![spec.latent_dim];
        sizes.extend(&spec.gen_hidden);
        sizes.push(data.numel());
        let layers = crate::nn::init_network(&sizes, seed)?;
        Ok(Self {
            layers,
            latent_dim: spec.latent_dim,
            data,
            output_scale,
            slope: spec.slope,
            step: 0,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundLayer> {
        self.layers
            .iter()
            .map(|l| if trainable { l.bind(tape) } else { l.bind_frozen(tape) })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[BoundLayer], z: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = z;
        for (i, (layer, b)) in self.layers.iter().zip(bound).enumerate() {
            h = layer.apply(tape, *b, h)?;
            h = if i < last {
                tape.leaky_relu(h, self.slope)
            } else {
                tape.tanh(h)
            };
        }
        if self.output_scale != 1.0 {
            h = tape.scale(h, self.output_scale);
        }
        Ok(h)
    }

    /// Value-only forward pass on a `batch × latent_dim` tensor.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &bound, zv)?;
        Ok(tape.tensor(out))
    }

    pub fn collect_grads(&mut self, tape: &Tape, bound: &[BoundLayer]) -> Result<()> {
        for (l, b) in self.layers.iter_mut().zip(bound) {
            l.collect_grads(tape, *b)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.weight.zero_grad();
            l.bias.zero_grad();
        }
    }
}

/// Draws `n` standard-normal latent vectors.
pub fn latent_batch(n: usize, latent_dim: usize, rng: &mut impl rand::Rng) -> Tensor {
    let data = (0..n * latent_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(vec![n, latent_dim], data).expect("latent shape")
}

/// `n` generated samples, deterministic in `seed`.
pub fn sample(gen: &Generator, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::EmptyBatch("sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = latent_batch(n, gen.latent_dim, &mut rng);
    gen.generate(&z)
}

/// Input and output of one discriminator layer for the latest forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTap {
    pub layer_index: usize,
    /// `F^(d-1)`, before any mask.
    pub input: Tensor,
    /// `F^(d)`, or `F̄^(d)` when the layer's input was masked.
    pub output: Tensor,
}

/// Tape handles of one discriminator layer during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TapVars {
    pub input: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// `batch × heads` logits.
    pub logits: Var,
    /// One entry per layer, in layer order.
    pub taps: Vec<TapVars>,
}

/// A Hadamard mask applied to the input of `layer_index`.
///
/// `values` must broadcast against `batch × input_shape(layer_index)`: a
/// per-sample mask is shared by the whole batch, a batch-shaped mask gives
/// every sample its own mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask {
    pub layer_index: usize,
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub layers: Vec<LayerParams>,
    pub data: DataShape,
    pub slope: f64,
    /// Output arity `k`.
    pub heads: usize,
    taps: BTreeMap<usize, FeatureTap>,
}

impl Discriminator {
    pub fn new(spec: &NetworkSpec, data: DataShape, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 {
            return Err(Error::config("heads", "discriminator needs at least one logit"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut flat = data.numel();
        if let DataShape::Image {
            channels,
            height,
            width,
        } = data
        {
            let mut ch = channels;
            for &out_ch in &spec.conv_channels {
                let kind = LayerKind::Conv2d {
                    in_ch: ch,
                    out_ch,
                    kernel: spec.kernel,
                    height,
                    width,
                };
                layers.push(LayerParams::init(kind, layers.len() + 1, &mut rng));
                ch = out_ch;
            }
            flat = ch * height * width;
        }
        for &width in spec.disc_hidden.iter().chain(std::iter::once(&heads)) {
            let kind = LayerKind::Dense {
                fan_in: flat,
                fan_out: width,
            };
            layers.push(LayerParams::init(kind, layers.len() + 1, &mut rng));
            flat = width;
        }
        Ok(Self {
            layers,
            data,
            slope: spec.slope,
            heads,
            taps: BTreeMap::new(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, index: usize) -> Result<&LayerParams> {
        if index == 0 || index > self.layers.len() {
            return Err(Error::LayerIndex {
                index,
                layers: self.layers.len(),
            });
        }
        Ok(&self.layers[index - 1])
    }

    /// Per-sample shape of `F^(d-1)`.
    pub fn input_shape(&self, layer_index: usize) -> Result<Vec<usize>> {
        Ok(self.layer(layer_index)?.kind.input_shape())
    }

    /// Per-sample shape of `F^(d)`.
    pub fn output_shape(&self, layer_index: usize) -> Result<Vec<usize>> {
        Ok(self.layer(layer_index)?.kind.output_shape())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundLayer> {
        self.layers
            .iter()
            .map(|l| if trainable { l.bind(tape) } else { l.bind_frozen(tape) })
            .collect()
    }

    /// Runs the network; `mask` multiplies the input of its layer first.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[BoundLayer],
        x: Var,
        mask: Option<&LayerMask>,
    ) -> Result<DiscOutput> {
        let batch = *tape
            .shape(x)
            .first()
            .ok_or(Error::EmptyBatch("discriminator"))?;
        if batch == 0 {
            return Err(Error::EmptyBatch("discriminator"));
        }
        if let Some(m) = mask {
            self.check_mask(m, batch)?;
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        let mut taps = Vec::with_capacity(self.layers.len());
        for (i, (layer, b)) in self.layers.iter().zip(bound).enumerate() {
            let mut shape = vec![batch];
            shape.extend(layer.kind.input_shape());
            if tape.shape(h) != shape.as_slice() {
                h = tape.reshape(h, shape)?;
            }
            let input = h;
            if let Some(m) = mask.filter(|m| m.layer_index == layer.layer_index) {
                let mv = tape.constant(m.values.clone());
                h = tape.mul(h, mv)?;
            }
            let out = layer.apply(tape, *b, h)?;
            taps.push(TapVars { input, output: out });
            h = if i < last {
                tape.leaky_relu(out, self.slope)
            } else {
                out
            };
        }
        let out_shape = vec![batch, self.heads];
        let logits = if tape.shape(h) != out_shape.as_slice() {
            tape.reshape(h, out_shape)?
        } else {
            h
        };
        Ok(DiscOutput { logits, taps })
    }

    fn check_mask(&self, mask: &LayerMask, batch: usize) -> Result<()> {
        let per_sample = self.input_shape(mask.layer_index)?;
        let mut batched = vec![batch];
        batched.extend(&per_sample);
        let shape = mask.values.shape();
        if shape != per_sample.as_slice() && shape != batched.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "feature mask",
                left: per_sample,
                right: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Value-only forward that refreshes the stored taps.
    ///
    /// Returns the logits and the taps of every layer.
    pub fn forward_with_tap(
        &mut self,
        x: &Tensor,
        mask: Option<&LayerMask>,
    ) -> Result<(Tensor, Vec<FeatureTap>)> {
        let (logits, taps) = self.features(x, mask)?;
        self.taps = taps.iter().map(|t| (t.layer_index, t.clone())).collect();
        Ok((logits, taps))
    }

    /// Value-only forward returning the logits and every layer's tap.
    pub fn features(&self, x: &Tensor, mask: Option<&LayerMask>) -> Result<(Tensor, Vec<FeatureTap>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, mask)?;
        let taps: Vec<FeatureTap> = out
            .taps
            .iter()
            .zip(&self.layers)
            .map(|(t, l)| FeatureTap {
                layer_index: l.layer_index,
                input: tape.tensor(t.input),
                output: tape.tensor(t.output),
            })
            .collect();
        Ok((tape.tensor(out.logits), taps))
    }

    /// Taps recorded by the latest [`Discriminator::forward_with_tap`].
    pub fn tap(&self, layer_index: usize) -> Option<&FeatureTap> {
        self.taps.get(&layer_index)
    }

    /// Sigmoid probability per sample, averaging heads when `heads > 1`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, None)?;
        let p = self.head_probability(&mut tape, out.logits, None)?;
        Ok(tape.value(p).to_vec())
    }

    /// Reduces `batch × heads` logits to one probability per sample.
    ///
    /// With a head mask the probability is the mean sigmoid over unmasked
    /// heads; without one it is the mean over all heads.
    pub fn head_probability(
        &self,
        tape: &mut Tape,
        logits: Var,
        head_mask: Option<&Tensor>,
    ) -> Result<Var> {
        let p = tape.sigmoid(logits);
        if self.heads == 1 && head_mask.is_none() {
            return Ok(p);
        }
        let (p, active) = match head_mask {
            Some(m) => {
                if m.shape() != [self.heads] {
                    return Err(Error::ShapeMismatch {
                        op: "head mask",
                        left: vec![self.heads],
                        right: m.shape().to_vec(),
                    });
                }
                let active: f64 = m.data().iter().sum();
                if active == 0.0 {
                    return Err(Error::invalid("head mask removes every logit"));
                }
                let mv = tape.constant(m.clone());
                (tape.mul(p, mv)?, active)
            }
            None => (p, self.heads as f64),
        };
        let s = tape.sum_last(p);
        Ok(tape.scale(s, 1.0 / active))
    }

    pub fn collect_grads(&mut self, tape: &Tape, bound: &[BoundLayer]) -> Result<()> {
        for (l, b) in self.layers.iter_mut().zip(bound) {
            l.collect_grads(tape, *b)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.weight.zero_grad();
            l.bias.zero_grad();
        }
    }
}

/// `π(D|t)` for one step: whether the masked discriminator is active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseIndicator {
    pub use_mask: bool,
    /// Within-stage probability of actually applying the mask.
    pub mask_probability: f64,
}

impl PhaseIndicator {
    pub const UNMASKED: PhaseIndicator = PhaseIndicator {
        use_mask: false,
        mask_probability: 1.0,
    };

    pub fn masked() -> Self {
        Self {
            use_mask: true,
            mask_probability: 1.0,
        }
    }
}

/// Masks used by one training step when the phase selects `D_M`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMasks {
    pub real: Option<LayerMask>,
    pub fake: Option<LayerMask>,
    /// Logit mask of the dynamic-head variant.
    pub head: Option<Tensor>,
}

impl StepMasks {
    pub fn none() -> Self {
        Self::default()
    }

    /// The same mask on the real and generated passes.
    pub fn shared(mask: LayerMask) -> Self {
        Self {
            real: Some(mask.clone()),
            fake: Some(mask),
            head: None,
        }
    }

    pub fn head(mask: Tensor) -> Self {
        Self {
            head: Some(mask),
            ..Self::default()
        }
    }
}

/// A recorded loss together with the parameter bindings it needs for backward.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    gen_bound: Option<Vec<BoundLayer>>,
    disc_bound: Option<Vec<BoundLayer>>,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.scalar_value(self.loss)
    }

    /// Backpropagates and accumulates into whichever network was trainable.
    pub fn backward(
        mut self,
        gen: Option<&mut Generator>,
        disc: Option<&mut Discriminator>,
    ) -> Result<f64> {
        let value = self.value();
        self.tape.backward(self.loss)?;
        if let (Some(g), Some(b)) = (gen, &self.gen_bound) {
            g.collect_grads(&self.tape, b)?;
        }
        if let (Some(d), Some(b)) = (disc, &self.disc_bound) {
            d.collect_grads(&self.tape, b)?;
        }
        Ok(value)
    }
}

fn d_prob(
    tape: &mut Tape,
    disc: &Discriminator,
    bound: &[BoundLayer],
    x: Var,
    phase: PhaseIndicator,
    mask: Option<&LayerMask>,
    head: Option<&Tensor>,
) -> Result<Var> {
    let (mask, head) = if phase.use_mask { (mask, head) } else { (None, None) };
    let out = disc.forward(tape, bound, x, mask)?;
    disc.head_probability(tape, out.logits, head)
}

/// `-mean(log(max(p, LOG_FLOOR)))`
fn neg_mean_log(tape: &mut Tape, p: Var) -> Var {
    let l = tape.log(p, LOG_FLOOR);
    let m = tape.mean(l);
    tape.neg(m)
}

/// `1 - p`
fn complement(tape: &mut Tape, p: Var) -> Var {
    let n = tape.neg(p);
    tape.unary(UnaryOp::AddScalar(1.0), n)
}

/// Non-saturating generator loss `-E[log D_active(G(z))]`.
///
/// Only the generator's parameters are trainable on the returned graph.
pub fn g_loss(
    gen: &Generator,
    disc: &Discriminator,
    phase: PhaseIndicator,
    masks: &StepMasks,
    z: &Tensor,
) -> Result<LossGraph> {
    if z.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyBatch("g_loss"));
    }
    let mut tape = Tape::new();
    let gb = gen.bind(&mut tape, true);
    let db = disc.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let fake = gen.forward(&mut tape, &gb, zv)?;
    let p = d_prob(&mut tape, disc, &db, fake, phase, masks.fake.as_ref(), masks.head.as_ref())?;
    let loss = neg_mean_log(&mut tape, p);
    Ok(LossGraph {
        tape,
        loss,
        gen_bound: Some(gb),
        disc_bound: None,
    })
}

/// Discriminator loss `-E[log D_active(I)] - E[log(1 - D_active(G(z)))]`.
///
/// Generated samples enter as constants; only the discriminator trains.
pub fn d_loss(
    gen: &Generator,
    disc: &Discriminator,
    phase: PhaseIndicator,
    masks: &StepMasks,
    real: &Tensor,
    z: &Tensor,
) -> Result<LossGraph> {
    if real.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyBatch("d_loss real"));
    }
    if z.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyBatch("d_loss fake"));
    }
    let fake = gen.generate(z)?;
    d_loss_on(disc, phase, masks, real, &fake)
}

/// [`d_loss`] on an already generated batch.
pub fn d_loss_on(
    disc: &Discriminator,
    phase: PhaseIndicator,
    masks: &StepMasks,
    real: &Tensor,
    fake: &Tensor,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let db = disc.bind(&mut tape, true);
    let rv = tape.constant(real.clone());
    let fv = tape.constant(fake.clone());
    let p_real = d_prob(&mut tape, disc, &db, rv, phase, masks.real.as_ref(), masks.head.as_ref())?;
    let p_fake = d_prob(&mut tape, disc, &db, fv, phase, masks.fake.as_ref(), masks.head.as_ref())?;
    let real_term = neg_mean_log(&mut tape, p_real);
    let q = complement(&mut tape, p_fake);
    let fake_term = neg_mean_log(&mut tape, q);
    let loss = tape.add(real_term, fake_term)?;
    Ok(LossGraph {
        tape,
        loss,
        gen_bound: None,
        disc_bound: Some(db),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            latent_dim: 3,
            gen_hidden: vec![8],
            disc_hidden: vec![6, 6, 5, 4],
            ..NetworkSpec::default()
        }
    }

    /// A discriminator whose head is all zeros outputs exactly 0.5.
    fn half_disc(spec: &NetworkSpec) -> Discriminator {
        let mut d = Discriminator::new(spec, DataShape::Vector(2), 1, 1).unwrap();
        let last = d.layers.last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        d
    }

    fn batch(n: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        latent_batch(n, dim, &mut rng)
    }

    #[test]
    fn losses_at_half() {
        let spec = small_spec();
        let g = Generator::new(&spec, DataShape::Vector(2), 1.0, 0).unwrap();
        let d = half_disc(&spec);
        let z = batch(16, 3, 1);
        let gl = g_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::none(), &z).unwrap();
        assert!((gl.value() - 2f64.ln()).abs() < 1e-15);
        let real = batch(16, 2, 2);
        let dl = d_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::none(), &real, &z).unwrap();
        assert!((dl.value() - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_limits() {
        let spec = small_spec();
        let g = Generator::new(&spec, DataShape::Vector(2), 1.0, 0).unwrap();
        let mut d = half_disc(&spec);
        // Large positive bias: D → 1 everywhere.
        d.layers.last_mut().unwrap().bias.data_mut()[0] = 40.0;
        let z = batch(8, 3, 1);
        let gl = g_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::none(), &z).unwrap();
        assert!(gl.value() >= 0.0 && gl.value() < 1e-15);
    }

    #[test]
    fn perfect_discriminator_loss_vanishes() {
        // Separate real (x0 > 0) from fake (x0 < 0) through a steep linear head.
        let spec = NetworkSpec {
            disc_hidden: vec![],
            ..small_spec()
        };
        let mut d = Discriminator::new(&spec, DataShape::Vector(2), 1, 0).unwrap();
        d.layers[0].weight.data_mut().copy_from_slice(&[60.0, 0.0]);
        let real = Tensor::new(vec![2, 2], vec![1.0, 0.0, 2.0, 0.5]).unwrap();
        let fake = Tensor::new(vec![2, 2], vec![-1.0, 0.0, -2.0, 0.5]).unwrap();
        let dl = d_loss_on(&d, PhaseIndicator::UNMASKED, &StepMasks::none(), &real, &fake).unwrap();
        assert!(dl.value() >= 0.0 && dl.value() < 1e-20);
    }

    #[test]
    fn empty_batches_rejected() {
        let spec = small_spec();
        let g = Generator::new(&spec, DataShape::Vector(2), 1.0, 0).unwrap();
        let d = half_disc(&spec);
        let empty = Tensor::zeros(&[0, 3]);
        assert!(matches!(
            g_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::none(), &empty),
            Err(Error::EmptyBatch(_))
        ));
        let z = batch(4, 3, 0);
        assert!(matches!(
            d_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::none(), &Tensor::zeros(&[0, 2]), &z),
            Err(Error::EmptyBatch(_))
        ));
        assert!(matches!(sample(&g, 0, 1), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn unmasked_phase_ignores_masks_and_ratio_zero_is_identity() {
        let spec = small_spec();
        let g = Generator::new(&spec, DataShape::Vector(2), 1.0, 3).unwrap();
        let d = Discriminator::new(&spec, DataShape::Vector(2), 1, 4).unwrap();
        let z = batch(10, 3, 5);
        let real = batch(10, 2, 6);
        let ones = LayerMask {
            layer_index: 3,
            values: Tensor::ones(&[6]),
        };
        let zeros = LayerMask {
            layer_index: 3,
            values: Tensor::zeros(&[6]),
        };
        let plain = d_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::none(), &real, &z).unwrap();
        let ignored = d_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::shared(zeros), &real, &z).unwrap();
        let ones_mask = d_loss(&g, &d, PhaseIndicator::masked(), &StepMasks::shared(ones.clone()), &real, &z).unwrap();
        assert_eq!(plain.value().to_bits(), ignored.value().to_bits());
        assert_eq!(plain.value().to_bits(), ones_mask.value().to_bits());
        let gp = g_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::none(), &z).unwrap();
        let gm = g_loss(&g, &d, PhaseIndicator::masked(), &StepMasks::shared(ones), &z).unwrap();
        assert_eq!(gp.value().to_bits(), gm.value().to_bits());
    }

    #[test]
    fn gradient_partition() {
        let spec = small_spec();
        let mut g = Generator::new(&spec, DataShape::Vector(2), 1.0, 3).unwrap();
        let mut d = Discriminator::new(&spec, DataShape::Vector(2), 1, 4).unwrap();
        let z = batch(10, 3, 5);
        let real = batch(10, 2, 6);
        let gl = g_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::none(), &z).unwrap();
        gl.backward(Some(&mut g), Some(&mut d)).unwrap();
        assert!(d.layers.iter().all(|l| l.weight.grad().is_none() && l.bias.grad().is_none()));
        assert!(g.layers.iter().all(|l| l.weight.grad().is_some() && l.bias.grad().is_some()));
        g.zero_grad();
        let dl = d_loss(&g, &d, PhaseIndicator::UNMASKED, &StepMasks::none(), &real, &z).unwrap();
        dl.backward(Some(&mut g), Some(&mut d)).unwrap();
        assert!(g.layers.iter().all(|l| l.weight.grad().is_none()));
        assert!(d.layers.iter().all(|l| l.weight.grad().is_some() && l.bias.grad().is_some()));
    }

    #[test]
    fn sample_is_deterministic_and_bounded() {
        let spec = small_spec();
        let g = Generator::new(&spec, DataShape::Vector(2), 1.0, 3).unwrap();
        let a = sample(&g, 5000, 11).unwrap();
        let b = sample(&g, 5000, 11).unwrap();
        assert_eq!(a.shape(), &[5000, 2]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn tap_masking_semantics() {
        let spec = small_spec();
        let mut d = Discriminator::new(&spec, DataShape::Vector(2), 1, 8).unwrap();
        let x = batch(7, 2, 9);
        let (plain, taps) = d.forward_with_tap(&x, None).unwrap();
        assert_eq!(taps.len(), d.num_layers());
        assert!(d.tap(3).is_some() && d.tap(9).is_none());

        let ones = LayerMask {
            layer_index: 3,
            values: Tensor::ones(&[6]),
        };
        let (masked, _) = d.forward_with_tap(&x, Some(&ones)).unwrap();
        assert_eq!(plain.data(), masked.data());

        let zeros = LayerMask {
            layer_index: 3,
            values: Tensor::zeros(&[6]),
        };
        d.forward_with_tap(&x, Some(&zeros)).unwrap();
        let bias = d.layer(3).unwrap().bias.data().to_vec();
        let out = &d.tap(3).unwrap().output;
        for row in out.data().chunks(bias.len()) {
            assert_eq!(row, bias.as_slice());
        }

        let bad = LayerMask {
            layer_index: 3,
            values: Tensor::ones(&[5]),
        };
        assert!(matches!(d.forward_with_tap(&x, Some(&bad)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mask_equals_substituted_input() {
        let spec = small_spec();
        let mut d = Discriminator::new(&spec, DataShape::Vector(2), 1, 8).unwrap();
        let x = batch(5, 2, 10);
        let m = Tensor::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let mask = LayerMask {
            layer_index: 3,
            values: m.clone(),
        };
        d.forward_with_tap(&x, None).unwrap();
        let input = d.tap(3).unwrap().input.clone();
        d.forward_with_tap(&x, Some(&mask)).unwrap();
        let masked_out = d.tap(3).unwrap().output.clone();

        let substituted: Vec<f64> = input
            .data()
            .chunks(6)
            .flat_map(|row| row.iter().zip(m.data()).map(|(a, b)| a * b).collect::<Vec<_>>())
            .collect();
        let layer = d.layer(3).unwrap();
        let mut tape = Tape::new();
        let b = layer.bind(&mut tape);
        let xv = tape.constant(Tensor::new(vec![5, 6], substituted).unwrap());
        let y = layer.apply(&mut tape, b, xv).unwrap();
        assert_eq!(tape.value(y), masked_out.data());
    }

    #[test]
    fn conv_discriminator_runs() {
        let spec = NetworkSpec {
            disc_hidden: vec![16, 8],
            ..small_spec()
        };
        let data = DataShape::Image {
            channels: 1,
            height: 6,
            width: 6,
        };
        let mut d = Discriminator::new(&spec, data, 1, 0).unwrap();
        assert_eq!(d.num_layers(), 5);
        assert_eq!(d.input_shape(2).unwrap(), vec![4, 6, 6]);
        assert_eq!(d.input_shape(3).unwrap(), vec![8 * 36]);
        let x = batch(3, 36, 1);
        let (logits, taps) = d.forward_with_tap(&x, None).unwrap();
        assert_eq!(logits.shape(), &[3, 1]);
        assert_eq!(taps[1].output.shape(), &[3, 8, 6, 6]);
        let mask = LayerMask {
            layer_index: 2,
            values: Tensor::ones(&[4, 6, 6]),
        };
        let (masked, _) = d.forward_with_tap(&x, Some(&mask)).unwrap();
        assert_eq!(logits.data(), masked.data());
    }

    #[test]
    fn dynamic_head_probability() {
        let spec = small_spec();
        let d = Discriminator::new(&spec, DataShape::Vector(2), 4, 0).unwrap();
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 4], vec![0.0, 100.0, -100.0, 0.0]).unwrap());
        let m = Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
        let p = d.head_probability(&mut tape, logits, Some(&m)).unwrap();
        assert!((tape.value(p)[0] - 0.75).abs() < 1e-15);
        let p = d.head_probability(&mut tape, logits, None).unwrap();
        assert!((tape.value(p)[0] - 0.5).abs() < 1e-15);
        let dead = Tensor::zeros(&[4]);
        assert!(d.head_probability(&mut tape, logits, Some(&dead)).is_err());
    }
}
