//! Synthetic datasets: a ring of Gaussians, a noisy spiral and tiny blob images.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::DataShape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// `k` isotropic Gaussians with centers evenly spaced on a circle.
    Ring { k: usize, radius: f64, sigma: f64 },
    /// Archimedean spiral with `turns` revolutions and Gaussian jitter.
    Spiral { turns: f64, radius: f64, noise: f64 },
    /// `size × size` single-channel images with one blob at one of `k` positions.
    MicroImages { k: usize, size: usize, noise: f64 },
}

impl DatasetKind {
    pub fn ring() -> Self {
        DatasetKind::Ring {
            k: 8,
            radius: 2.0,
            sigma: 0.02,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Ring { .. } => "ring",
            DatasetKind::Spiral { .. } => "spiral",
            DatasetKind::MicroImages { .. } => "micro-images",
        }
    }

    pub fn shape(&self) -> DataShape {
        match *self {
            DatasetKind::Ring { .. } | DatasetKind::Spiral { .. } => DataShape::Vector(2),
            DatasetKind::MicroImages { size, .. } => DataShape::Image {
                channels: 1,
                height: size,
                width: size,
            },
        }
    }

    /// Largest absolute coordinate the data reaches, for sizing the generator head.
    pub fn extent(&self) -> f64 {
        match *self {
            DatasetKind::Ring { radius, sigma, .. } => radius + 3.0 * sigma,
            DatasetKind::Spiral { radius, noise, .. } => radius + 3.0 * noise,
            DatasetKind::MicroImages { .. } => 1.0,
        }
    }

    /// Mode prototypes, when the dataset has discrete modes.
    pub fn centers(&self) -> Option<Vec<Vec<f64>>> {
        match *self {
            DatasetKind::Ring { k, radius, .. } => Some(
                (0..k)
                    .map(|i| {
                        let a = TAU * i as f64 / k as f64;
                        vec![radius * a.cos(), radius * a.sin()]
                    })
                    .collect(),
            ),
            DatasetKind::Spiral { .. } => None,
            DatasetKind::MicroImages { k, size, .. } => Some((0..k).map(|i| blob(i, k, size)).collect()),
        }
    }

    /// Distance within which a sample counts toward a mode.
    pub fn mode_radius(&self) -> Option<f64> {
        match *self {
            DatasetKind::Ring { sigma, .. } => Some(3.0 * sigma),
            DatasetKind::Spiral { .. } => None,
            DatasetKind::MicroImages { size, noise, .. } => Some(3.0 * noise * size as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        match *self {
            DatasetKind::Ring { k, radius, sigma } => {
                if k == 0 {
                    return bad("ring_k", "must be ≥ 1");
                }
                if !(radius > 0.0) {
                    return bad("ring_radius", "must be positive");
                }
                if !(sigma > 0.0) {
                    return bad("ring_sigma", "must be positive");
                }
            }
            DatasetKind::Spiral { turns, radius, noise } => {
                if !(turns > 0.0) || !(radius > 0.0) || !(noise >= 0.0) {
                    return bad("spiral", "turns and radius must be positive, noise non-negative");
                }
            }
            DatasetKind::MicroImages { k, size, noise } => {
                if k == 0 {
                    return bad("image_k", "must be ≥ 1");
                }
                if size < 4 {
                    return bad("image_size", "must be ≥ 4");
                }
                if !(noise >= 0.0) {
                    return bad("image_noise", "must be non-negative");
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    /// Parses a kind name with its default parameters.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ring" => Ok(DatasetKind::ring()),
            "spiral" => Ok(DatasetKind::Spiral {
                turns: 1.5,
                radius: 2.0,
                noise: 0.05,
            }),
            "micro-images" => Ok(DatasetKind::MicroImages {
                k: 8,
                size: 8,
                noise: 0.05,
            }),
            other => Err(Error::config("dataset", format!("unknown dataset `{other}`"))),
        }
    }
}

/// Blob template `i` of `k`: a bump on a ring inside the image, background −1.
fn blob(i: usize, k: usize, size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 / 4.0;
    let a = TAU * i as f64 / k as f64;
    let (cy, cx) = (c + r * a.sin(), c + r * a.cos());
    let width = size as f64 / 8.0;
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            img.push(-1.0 + 2.0 * (-d2 / (2.0 * width * width)).exp());
        }
    }
    img
}

/// Deterministic infinite stream of samples from one dataset.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub kind: DatasetKind,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(kind: DatasetKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(Self {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn batch(&mut self, n: usize) -> Tensor {
        let shape = self.kind.shape();
        let mut data = Vec::with_capacity(n * shape.numel());
        let rng = &mut self.rng;
        match self.kind {
            DatasetKind::Ring { k, radius, sigma } => {
                for _ in 0..n {
                    let a = TAU * rng.random_range(0..k) as f64 / k as f64;
                    let ex: f64 = rng.sample(StandardNormal);
                    let ey: f64 = rng.sample(StandardNormal);
                    data.push(radius * a.cos() + sigma * ex);
                    data.push(radius * a.sin() + sigma * ey);
                }
            }
            DatasetKind::Spiral { turns, radius, noise } => {
                for _ in 0..n {
                    let t: f64 = rng.random::<f64>().sqrt();
                    let a = TAU * turns * t;
                    let ex: f64 = rng.sample(StandardNormal);
                    let ey: f64 = rng.sample(StandardNormal);
                    data.push(radius * t * a.cos() + noise * ex);
                    data.push(radius * t * a.sin() + noise * ey);
                }
            }
            DatasetKind::MicroImages { k, size, noise } => {
                for _ in 0..n {
                    let i = rng.random_range(0..k);
                    for v in blob(i, k, size) {
                        let e: f64 = rng.sample(StandardNormal);
                        data.push((v + noise * e).clamp(-1.0, 1.0));
                    }
                }
            }
        }
        let mut dims = vec![n];
        dims.extend(shape.dims());
        Tensor::new(dims, data).expect("sampler shape")
    }
}

/// Number of modes receiving at least `min_fraction` of the samples within the mode radius.
pub fn modes_covered(kind: &DatasetKind, samples: &Tensor, min_fraction: f64) -> Option<usize> {
    let centers = kind.centers()?;
    let radius = kind.mode_radius()?;
    let n = samples.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Some(0);
    }
    let width = samples.numel() / n;
    let mut hits = vec![0usize; centers.len()];
    for row in samples.data().chunks(width) {
        let (best, dist) = centers
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one center");
        if dist <= radius {
            hits[best] += 1;
        }
    }
    let need = min_fraction * n as f64;
    Some(hits.iter().filter(|&&h| h as f64 >= need && h > 0).count())
}
