//! Layers, parameter containers and the Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    /// Stride-1 "same" convolution over `height × width` maps.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
}

impl LayerKind {
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { fan_in, .. } => fan_in,
            LayerKind::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
        }
    }

    /// Per-sample input shape, i.e. the shape of `F^(d-1)` for one sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Dense { fan_in, .. } => vec![fan_in],
            LayerKind::Conv2d {
                in_ch,
                height,
                width,
                ..
            } => vec![in_ch, height, width],
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Dense { fan_out, .. } => vec![fan_out],
            LayerKind::Conv2d {
                out_ch,
                height,
                width,
                ..
            } => vec![out_ch, height, width],
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Dense { fan_in, fan_out } => vec![fan_out, fan_in],
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![out_ch, in_ch, kernel, kernel],
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Dense { fan_out, .. } => fan_out,
            LayerKind::Conv2d { out_ch, .. } => out_ch,
        }
    }
}

/// Weight and bias of one layer; `layer_index` is 1 for the input-facing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub layer_index: usize,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

impl LayerParams {
    pub fn new(kind: LayerKind, weight: Tensor, bias: Tensor, layer_index: usize) -> Result<Self> {
        if weight.shape() != kind.weight_shape().as_slice() {
            return Err(Error::ShapeMismatch {
                op: "layer weight",
                left: kind.weight_shape(),
                right: weight.shape().to_vec(),
            });
        }
        if bias.shape() != [kind.bias_len()] {
            return Err(Error::ShapeMismatch {
                op: "layer bias",
                left: vec![kind.bias_len()],
                right: bias.shape().to_vec(),
            });
        }
        if layer_index == 0 {
            return Err(Error::invalid("layer indices start at 1"));
        }
        Ok(Self {
            kind,
            weight: weight.with_grad(),
            bias: bias.with_grad(),
            layer_index,
        })
    }

    /// He-style uniform init: `U(-√(6/fan_in), √(6/fan_in))`, zero bias.
    pub fn init(kind: LayerKind, layer_index: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / kind.fan_in() as f64).sqrt();
        let shape = kind.weight_shape();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = Tensor::new(shape, data).expect("init shape");
        let bias = Tensor::zeros(&[kind.bias_len()]);
        Self::new(kind, weight, bias, layer_index).expect("init layer")
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLayer {
        BoundLayer {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    /// Binds the parameters as constants so they receive no gradient.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundLayer {
        BoundLayer {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
        }
    }

    /// Applies the layer operator `L` to a batch.
    pub fn apply(&self, tape: &mut Tape, bound: BoundLayer, x: Var) -> Result<Var> {
        match self.kind {
            LayerKind::Dense { .. } => dense_forward(tape, bound.weight, bound.bias, x),
            LayerKind::Conv2d { .. } => {
                let batch = tape.shape(x)[0];
                let mut shape = vec![batch];
                shape.extend(self.kind.input_shape());
                let x = if tape.shape(x) != shape.as_slice() {
                    tape.reshape(x, shape)?
                } else {
                    x
                };
                tape.conv2d(x, bound.weight, bound.bias)
            }
        }
    }

    pub fn collect_grads(&mut self, tape: &Tape, bound: BoundLayer) -> Result<()> {
        if let Some(g) = tape.grad(bound.weight) {
            self.weight.accumulate_grad(g)?;
        }
        if let Some(g) = tape.grad(bound.bias) {
            self.bias.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// `y = x·Wᵀ + b` for `x: batch×fan_in` (or a single `fan_in` vector).
pub fn dense_forward(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
    let fan_in = tape.shape(weight)[1];
    let xs = tape.shape(x).to_vec();
    let per_sample: usize = xs.iter().skip(1).product();
    let single = xs.len() == 1;
    let ok = if single { xs[0] == fan_in } else { per_sample == fan_in };
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "dense_forward",
            left: xs,
            right: tape.shape(weight).to_vec(),
        });
    }
    let rows = if single { 1 } else { xs[0] };
    let x2 = if xs.len() == 2 {
        x
    } else {
        tape.reshape(x, vec![rows, fan_in])?
    };
    let y = tape.matmul_t(x2, weight)?;
    let y = tape.add(y, bias)?;
    if single {
        let out = tape.shape(y)[1];
        tape.reshape(y, vec![out])
    } else {
        Ok(y)
    }
}

/// Builds a dense MLP with `sizes[i] → sizes[i+1]` layers.
pub fn init_network(sizes: &[usize], seed: u64) -> Result<Vec<LayerParams>> {
    if sizes.len() < 2 {
        return Err(Error::invalid("network spec needs at least two sizes"));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("layer sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            LayerParams::init(
                LayerKind::Dense {
                    fan_in: w[0],
                    fan_out: w[1],
                },
                i + 1,
                &mut rng,
            )
        })
        .collect())
}

/// Ordered parameter list of a network: weight then bias per layer.
pub fn params_of(layers: &[LayerParams]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

pub fn params_of_mut(layers: &mut [LayerParams]) -> Vec<&mut Tensor> {
    layers
        .iter_mut()
        .flat_map(|l| [&mut l.weight, &mut l.bias])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for an ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Applies one update in place. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match p.grad() {
                None => return Err(Error::MissingGradient(i)),
                Some(g) if g.len() != self.m[i].len() => {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        left: vec![self.m[i].len()],
                        right: vec![g.len()],
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, &gj), mj), vj) in p.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
