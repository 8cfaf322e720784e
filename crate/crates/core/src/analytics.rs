//! Drift diagnostics: moment summaries of generated samples, Fréchet
//! distance, weight deltas, feature drift between snapshots and the
//! retention evaluation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::mean_cosine;
use crate::error::{Error, Result};
use crate::gan::Discriminator;
use crate::nn::LayerParams;
use crate::tensor::Tensor;

/// Eigenvalues down to this (scaled) value are treated as round-off and clamped.
pub const EIGEN_TOLERANCE: f64 = 1e-8;
/// Ridge added to the covariance diagonal when samples do not exceed the dimension.
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Seed of the shared frozen embedding network.
pub const EMBEDDING_SEED: u64 = 0x5eed_f1d0;

/// Fixed feature map applied to samples before taking moments.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedding {
    Identity,
    Frozen(FrozenNet),
}

impl Embedding {
    /// Frozen random `input → hidden → output` network, tanh hidden layer.
    pub fn frozen(input: usize, hidden: usize, output: usize) -> Self {
        Embedding::Frozen(FrozenNet::new(input, hidden, output, EMBEDDING_SEED))
    }

    /// Embeds each row of `samples` (first axis is the batch).
    pub fn apply(&self, samples: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = samples.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Ok(Vec::new());
        }
        let width = samples.numel() / n;
        let rows = samples.data().chunks(width);
        match self {
            Embedding::Identity => Ok(rows.map(<[f64]>::to_vec).collect()),
            Embedding::Frozen(net) => {
                if width != net.input {
                    return Err(Error::ShapeMismatch {
                        op: "embedding",
                        left: vec![net.input],
                        right: samples.shape().to_vec(),
                    });
                }
                Ok(rows.map(|r| net.forward(r)).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNet {
    input: usize,
    hidden: usize,
    output: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

impl FrozenNet {
    pub fn new(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w1 = draw(input * hidden, input);
        let b1 = draw(hidden, input);
        let w2 = draw(hidden * output, hidden);
        Self {
            input,
            hidden,
            output,
            w1,
            b1,
            w2,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let s: f64 = (0..self.input).map(|i| x[i] * self.w1[i * self.hidden + j]).sum();
                (s + self.b1[j]).tanh()
            })
            .collect();
        (0..self.output)
            .map(|k| (0..self.hidden).map(|j| h[j] * self.w2[j * self.output + k]).sum())
            .collect()
    }
}

/// Gaussian moment summary of one batch of (embedded) samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    /// Step range `(start, end]` the samples represent.
    pub interval: (u64, u64),
    pub mean: Vec<f64>,
    /// Row-major `dim × dim` covariance.
    pub cov: Vec<f64>,
    pub count: usize,
    /// Ridge added to the diagonal when the distance is computed, 0 when
    /// the sample count exceeds the dimension.
    pub ridge: f64,
}

impl IntervalStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_norm(&self) -> f64 {
        self.mean.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cov_trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.cov[i * self.dim() + i]).sum()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let m = DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov);
        m + DMatrix::identity(self.dim(), self.dim()) * self.ridge
    }
}

/// Moments of the embedded samples with the unbiased covariance estimator.
pub fn interval_stats(samples: &Tensor, embed: &Embedding, interval: (u64, u64)) -> Result<IntervalStats> {
    let rows = embed.apply(samples)?;
    stats_of_rows(&rows, interval)
}

pub fn stats_of_rows(rows: &[Vec<f64>], interval: (u64, u64)) -> Result<IntervalStats> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::invalid(format!("interval stats need ≥ 2 samples, got {n}")));
    }
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; dim * dim];
    for r in rows {
        for i in 0..dim {
            let di = r[i] - mean[i];
            for j in i..dim {
                cov[i * dim + j] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / (n - 1) as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let ridge = if n <= dim { DEFAULT_RIDGE } else { 0.0 };
    Ok(IntervalStats {
        interval,
        mean,
        cov,
        count: n,
        ridge,
    })
}

/// Square root of a symmetric positive semi-definite matrix.
///
/// Slightly negative eigenvalues (down to `-EIGEN_TOLERANCE · max(1, |λ|max)`)
/// are clamped to zero; anything lower is an error.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -EIGEN_TOLERANCE * scale {
            return Err(Error::NegativeEigenvalue(l));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Fréchet distance between two Gaussian moment summaries.
pub fn frechet(a: &IntervalStats, b: &IntervalStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "frechet",
            left: vec![a.dim()],
            right: vec![b.dim()],
        });
    }
    if a.mean == b.mean && a.cov == b.cov && a.ridge == b.ridge {
        return Ok(0.0);
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = a.cov_matrix();
    let sb = b.cov_matrix();
    let ra = sqrt_psd(&sa)?;
    let cross = sqrt_psd(&(&ra * &sb * &ra))?;
    let trace = sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace).max(0.0))
}

/// Squared L2 norm of a layer's weight change between two snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDiffRecord {
    pub step: u64,
    pub layer: usize,
    pub value: f64,
}

pub fn param_diff(prev: &LayerParams, curr: &LayerParams, step: u64) -> Result<ParamDiffRecord> {
    if prev.weight.shape() != curr.weight.shape() {
        return Err(Error::ShapeMismatch {
            op: "param_diff",
            left: prev.weight.shape().to_vec(),
            right: curr.weight.shape().to_vec(),
        });
    }
    Ok(ParamDiffRecord {
        step,
        layer: curr.layer_index,
        value: squared_delta(prev.weight.data(), curr.weight.data()),
    })
}

pub fn squared_delta(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum()
}

/// Mean cosine between layer-`d` feature maps of two discriminator snapshots.
pub fn attention_drift(prev: &Discriminator, curr: &Discriminator, probe: &Tensor, layer: usize) -> Result<f64> {
    let pick = |d: &Discriminator| -> Result<Tensor> {
        d.layer(layer)?;
        let (_, taps) = d.features(probe, None)?;
        taps.into_iter()
            .find(|t| t.layer_index == layer)
            .map(|t| t.output)
            .ok_or(Error::LayerIndex {
                index: layer,
                layers: d.num_layers(),
            })
    };
    mean_cosine(&pick(prev)?, &pick(curr)?)
}

/// A batch of samples with real (1) / generated (0) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub step: u64,
    pub samples: Tensor,
    pub labels: Vec<u8>,
}

impl LabeledBatch {
    /// Concatenates equally shaped real and generated batches.
    pub fn balanced(step: u64, real: &Tensor, fake: &Tensor) -> Result<Self> {
        if real.shape()[1..] != fake.shape()[1..] {
            return Err(Error::ShapeMismatch {
                op: "labeled batch",
                left: real.shape().to_vec(),
                right: fake.shape().to_vec(),
            });
        }
        let (nr, nf) = (real.shape()[0], fake.shape()[0]);
        let mut shape = real.shape().to_vec();
        shape[0] = nr + nf;
        let mut data = real.data().to_vec();
        data.extend_from_slice(fake.data());
        let mut labels = vec![1u8; nr];
        labels.extend(std::iter::repeat_n(0u8, nf));
        Ok(Self {
            step,
            samples: Tensor::new(shape, data)?,
            labels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotKind {
    Historical,
    Current,
    Future,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub kind: SnapshotKind,
    pub step: u64,
    pub accuracy: f64,
}

/// Accuracy of a discriminator frozen at `reference_step` on snapshot batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionTable {
    pub reference_step: u64,
    pub rows: Vec<RetentionRow>,
}

impl RetentionTable {
    /// Mean accuracy over rows of one kind.
    pub fn accuracy(&self, kind: SnapshotKind) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.kind == kind).map(|r| r.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Fraction of samples whose sigmoid output falls on the side of 0.5 matching the label.
pub fn accuracy(probs: &[f64], labels: &[u8]) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p > 0.5) == (**l == 1))
        .count();
    hits as f64 / probs.len() as f64
}

pub fn retention_eval(disc: &Discriminator, reference_step: u64, batches: &[LabeledBatch]) -> Result<RetentionTable> {
    let mut rows = Vec::with_capacity(batches.len());
    for b in batches {
        let n = b.samples.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptyBatch("retention batch"));
        }
        if b.labels.len() != n {
            return Err(Error::invalid(format!(
                "retention batch at step {} has {} labels for {n} samples",
                b.step,
                b.labels.len()
            )));
        }
        let probs = disc.probabilities(&b.samples)?;
        let kind = match b.step.cmp(&reference_step) {
            std::cmp::Ordering::Less => SnapshotKind::Historical,
            std::cmp::Ordering::Equal => SnapshotKind::Current,
            std::cmp::Ordering::Greater => SnapshotKind::Future,
        };
        rows.push(RetentionRow {
            kind,
            step: b.step,
            accuracy: accuracy(&probs, &b.labels),
        });
    }
    Ok(RetentionTable { reference_step, rows })
}

/// One row of attention.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: u64,
    pub layer: usize,
    pub cosine: f64,
}

/// One row of drift.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub step: u64,
    #[serde(rename = "mu_norm")]
    pub mean_norm: f64,
    #[serde(rename = "sigma_trace")]
    pub cov_trace: f64,
    pub frechet_prev: Option<f64>,
    pub frechet_real: f64,
}
