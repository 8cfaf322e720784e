#![allow(dead_code)]

use std::path::Path;

use dmd_core::config::ExperimentConfig;
use dmd_core::nn::dense_forward;
use dmd_core::tensor::finite_diff_check;
use dmd_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A small random MLP with mixed activations and a logistic loss head.
pub struct RandomNet {
    pub x: Tensor,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub acts: Vec<u8>,
}

impl RandomNet {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let depth = r.random_range(1..=3);
        let batch = r.random_range(1..=4);
        let mut sizes = vec![r.random_range(1..=5)];
        for _ in 0..depth {
            sizes.push(r.random_range(1..=5));
        }
        let x = random_tensor(&[batch, sizes[0]], &mut r);
        let weights = sizes.windows(2).map(|w| random_tensor(&[w[1], w[0]], &mut r)).collect();
        let biases = sizes[1..].iter().map(|&n| random_tensor(&[n], &mut r)).collect();
        let acts = (0..depth).map(|_| r.random_range(0..3)).collect();
        Self { x, weights, biases, acts }
    }

    /// Loss with parameter `slot` (0 = input, then w1, b1, w2, ...) replaced by `v`.
    fn loss(&self, tape: &mut Tape, slot: usize, v: Var) -> dmd_core::Result<Var> {
        let pick = |i: usize, t: &Tensor, tape: &mut Tape| if i == slot { v } else { tape.constant(t.clone()) };
        let mut h = pick(0, &self.x, tape);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wv = pick(1 + 2 * l, w, tape);
            let bv = pick(2 + 2 * l, b, tape);
            h = dense_forward(tape, wv, bv, h)?;
            h = match self.acts[l] {
                0 => tape.leaky_relu(h, 0.2),
                1 => tape.tanh(h),
                _ => tape.sigmoid(h),
            };
        }
        let p = tape.sigmoid(h);
        let l = tape.log(p, 1e-12);
        let m = tape.mean(l);
        Ok(tape.neg(m))
    }

    /// Worst relative error over the input and every parameter.
    pub fn worst_error(&self) -> f64 {
        let mut slots = vec![self.x.clone()];
        for (w, b) in self.weights.iter().zip(&self.biases) {
            slots.push(w.clone());
            slots.push(b.clone());
        }
        slots
            .iter()
            .enumerate()
            .map(|(i, t)| finite_diff_check(|tape, v| self.loss(tape, i, v), t, 1e-6).unwrap())
            .fold(0.0, f64::max)
    }
}

/// Short ring run sized for integration tests.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("gen_hidden", "16,16"),
        ("disc_hidden", "12,12,12,12,12"),
        ("steps", "240"),
        ("batch", "32"),
        ("cadence", "8"),
        ("probe_size", "16"),
        ("snapshot_every", "40"),
        ("keep_every", "80"),
        ("eval_samples", "128"),
        ("seeds", "0"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.out = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}
