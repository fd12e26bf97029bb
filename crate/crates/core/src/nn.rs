//! Layer building blocks: grouped temporal convolutions, normalization,
//! pooling, dropout and affine maps.
//!
//! Parameters live in a [`crate::model::ParameterStore`]; the functions here
//! take already-recorded [`Var`]s so the same code serves training and
//! inference.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, BnStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub groups: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv1dSpec {
    pub fn depthwise(channels: usize, multiplier: usize, kernel_size: usize, padding: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels * multiplier,
            kernel_size,
            groups: channels,
            padding,
            bias: false,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size: 1,
            groups: 1,
            padding: 0,
            bias: false,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.groups > 0
            && self.in_channels > 0
            && self.out_channels > 0
            && self.in_channels % self.groups == 0
            && self.out_channels % self.groups == 0
            && self.kernel_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!("invalid convolution {self:?}")))
        }
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_size,
        ]
    }

    pub fn output_len(&self, t: usize) -> Result<usize> {
        (t + 2 * self.padding)
            .checked_sub(self.kernel_size)
            .map(|v| v + 1)
            .ok_or_else(|| {
                Error::dim(format!(
                    "output length <= 0 for T={t}, kernel {}, padding {}",
                    self.kernel_size, self.padding
                ))
            })
    }

    fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel_size
    }

    /// Weight from uniform(-s, s), s = 1/sqrt(fan_in); zero bias.
    pub fn init(&self, rng: &mut impl Rng) -> (Tensor, Option<Tensor>) {
        let s = 1.0 / (self.fan_in() as f64).sqrt();
        let dist = Uniform::new_inclusive(-s, s);
        let w = Tensor::from_fn(self.weight_shape().to_vec(), |_| dist.sample(rng)).with_grad();
        let b = self
            .bias
            .then(|| Tensor::zeros(vec![self.out_channels]).with_grad());
        (w, b)
    }

    /// Applies the convolution to a `(B, C, T)` input.
    pub fn forward<'t>(&self, x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        self.validate()?;
        let xs = x.shape();
        if xs.len() != 3 || xs[1] != self.in_channels {
            return Err(Error::dim(format!(
                "conv expects (B, {}, T), got {xs:?}",
                self.in_channels
            )));
        }
        if weight.shape() != self.weight_shape() {
            return Err(Error::dim(format!(
                "conv weight {:?}, expected {:?}",
                weight.shape(),
                self.weight_shape()
            )));
        }
        if self.bias != bias.is_some() {
            return Err(Error::Contract("conv bias presence disagrees with spec".into()));
        }
        x.conv1d(weight, bias, self.groups, self.padding)
    }
}

/// Depthwise convolution: `groups` equals the input channel count.
pub fn depthwise_conv1d<'t>(
    x: Var<'t>,
    spec: &Conv1dSpec,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
) -> Result<Var<'t>> {
    if spec.groups != spec.in_channels {
        return Err(Error::dim(format!(
            "depthwise convolution needs groups == in_channels, got {spec:?}"
        )));
    }
    spec.forward(x, weight, bias)
}

pub fn pointwise_conv1d<'t>(
    x: Var<'t>,
    spec: &Conv1dSpec,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
) -> Result<Var<'t>> {
    if spec.kernel_size != 1 {
        return Err(Error::dim(format!("pointwise convolution with kernel {}", spec.kernel_size)));
    }
    spec.forward(x, weight, bias)
}

/// Depthwise convolution followed by a pointwise channel mix.
#[allow(clippy::too_many_arguments)]
pub fn separable_conv1d<'t>(
    x: Var<'t>,
    depth: &Conv1dSpec,
    depth_w: Var<'t>,
    depth_b: Option<Var<'t>>,
    point: &Conv1dSpec,
    point_w: Var<'t>,
    point_b: Option<Var<'t>>,
) -> Result<Var<'t>> {
    if depth.out_channels != point.in_channels {
        return Err(Error::dim(format!(
            "separable conv: depthwise emits {} channels, pointwise expects {}",
            depth.out_channels, point.in_channels
        )));
    }
    let h = depthwise_conv1d(x, depth, depth_w, depth_b)?;
    pointwise_conv1d(h, point, point_w, point_b)
}

/// Running batch-norm statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `new = (1 - m) * old + m * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = ((1.0 - momentum) * *r + momentum * b).max(0.0);
        }
    }
}

/// Batch norm over `(B, C, T)`. Train mode normalizes with batch statistics
/// and returns them; eval mode uses `running`.
pub fn batch_norm1d<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running: &RunningStats,
    mode: Mode,
) -> Result<(Var<'t>, Option<BatchStats>)> {
    let stats = match mode {
        Mode::Train => BnStats::Batch,
        Mode::Eval => BnStats::Running {
            mean: &running.mean,
            var: &running.var,
        },
    };
    x.batch_norm(gamma, beta, stats, BN_EPS)
}

pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    x.layer_norm(gamma, beta, LN_EPS)
}

pub fn avg_pool1d(x: Var<'_>, pool: usize) -> Result<Var<'_>> {
    x.avg_pool1d(pool)
}

/// Inverted dropout; identity in eval mode or when `p == 0`.
pub fn dropout<'t>(x: Var<'t>, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
    x.mul(x.tape().constant(mask))
}

pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    x.linear(weight, bias)
}

/// `(d_in, d_out)` weight from uniform(-s, s), s = 1/sqrt(d_in).
pub fn init_linear(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Tensor {
    let s = 1.0 / (d_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-s, s);
    Tensor::from_fn(vec![d_in, d_out], |_| dist.sample(rng)).with_grad()
}

/// Convenience for tests and tools: records `t` as a constant on a fresh
/// tape, runs `f`, and returns the value.
pub fn eval_on_fresh_tape(
    t: &Tensor,
    f: impl for<'t> FnOnce(&'t Tape, Var<'t>) -> Result<Var<'t>>,
) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(t.clone());
    Ok(f(&tape, x)?.value())
}
