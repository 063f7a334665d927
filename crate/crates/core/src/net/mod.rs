//! Residual convolutional surrogate `G(x) = x + f(x)`.
//!
//! `f` is: input batch-norm, a bilinear block of three parallel circular
//! convolutions (`a`, `b`, `c`) whose output is `[a, b * c]`, ReLU, a
//! circular convolution, ReLU, and a linear output convolution. All
//! convolutions wrap around the periodic domain, so the network commutes
//! with circular shifts of its input.
//!
//! Parameters live in one flat vector so the optimizer, the gradient and the
//! weights file all share a single layout, see [`Layout`].

mod forward;
mod train;

pub use forward::{forward, forward_batch, jvp, Mode, Surrogate};
pub use train::{
    adagrad_step, backward, loss, train, EpochRecord, OptimizerState, TrainConfig, TrainReport, TrainingBatch,
    TrainingSet,
};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-3;
/// Running-statistics decay per training batch.
pub const BN_MOMENTUM: f64 = 0.99;
/// L2 penalty on the output-layer kernel.
pub const L2_OUTPUT: f64 = 1e-4;

/// Sizes of the convolutional layers behind the batch-norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStack {
    /// Filters in each of the three bilinear branches.
    pub bilinear_filters: usize,
    pub bilinear_kernel: usize,
    pub hidden_filters: usize,
    pub hidden_kernel: usize,
    pub output_kernel: usize,
}

/// Network shape. `stack: None` is the degenerate residual-identity network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub stack: Option<ConvStack>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::reference()
    }
}

impl Architecture {
    /// 24 filters per bilinear branch, 37 hidden filters, kernels 5/5/1.
    pub fn reference() -> Self {
        Self {
            stack: Some(ConvStack {
                bilinear_filters: 24,
                bilinear_kernel: 5,
                hidden_filters: 37,
                hidden_kernel: 5,
                output_kernel: 1,
            }),
        }
    }

    pub fn residual_only() -> Self {
        Self { stack: None }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.stack {
            for (name, k) in [
                ("bilinear_kernel", s.bilinear_kernel),
                ("hidden_kernel", s.hidden_kernel),
                ("output_kernel", s.output_kernel),
            ] {
                if k % 2 == 0 {
                    return Err(Error::InvalidParameter(format!(
                        "{name}={k} must be odd for centred circular padding"
                    )));
                }
            }
            if s.bilinear_filters == 0 || s.hidden_filters == 0 {
                return Err(Error::InvalidParameter(
                    "convolution layers need at least one filter".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    /// Human-readable descriptor, also stored in weights files.
    pub fn descriptor(&self) -> String {
        match &self.stack {
            None => "bn".to_string(),
            Some(s) => format!(
                "bn|bilinear3x{}k{}|conv{}k{}|conv1k{}",
                s.bilinear_filters,
                s.bilinear_kernel,
                s.hidden_filters,
                s.hidden_kernel,
                s.output_kernel
            ),
        }
    }
}

/// Offsets of each parameter group inside the flat trainable vector.
///
/// Order: bn scale, bn shift, bilinear kernel `(k2 x 3F)` row-major with
/// columns `[a | b | c]`, bilinear bias `(3F)`, hidden kernel
/// `(k3*2F x H)` row-major with row `t*2F + channel`, hidden bias `(H)`,
/// output kernel `(k4*H)`, output bias `(1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub bn_scale: usize,
    pub bn_shift: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub w4: usize,
    pub b4: usize,
    pub len: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut off = 2;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        match &arch.stack {
            None => Self {
                bn_scale: 0,
                bn_shift: 1,
                w2: 2,
                b2: 2,
                w3: 2,
                b3: 2,
                w4: 2,
                b4: 2,
                len: 2,
            },
            Some(s) => {
                let f3 = 3 * s.bilinear_filters;
                let c3 = 2 * s.bilinear_filters;
                let w2 = take(s.bilinear_kernel * f3);
                let b2 = take(f3);
                let w3 = take(s.hidden_kernel * c3 * s.hidden_filters);
                let b3 = take(s.hidden_filters);
                let w4 = take(s.output_kernel * s.hidden_filters);
                let b4 = take(1);
                Self {
                    bn_scale: 0,
                    bn_shift: 1,
                    w2,
                    b2,
                    w3,
                    b3,
                    w4,
                    b4,
                    len: off,
                }
            }
        }
    }

    /// Named groups as `(name, start, len)`, in storage order.
    pub fn groups(&self) -> Vec<(&'static str, usize, usize)> {
        let mut g = vec![("bn_scale", self.bn_scale, 1), ("bn_shift", self.bn_shift, 1)];
        if self.len > 2 {
            g.extend([
                ("bilinear_kernel", self.w2, self.b2 - self.w2),
                ("bilinear_bias", self.b2, self.w3 - self.b2),
                ("hidden_kernel", self.w3, self.b3 - self.w3),
                ("hidden_bias", self.b3, self.w4 - self.b3),
                ("output_kernel", self.w4, self.b4 - self.w4),
                ("output_bias", self.b4, 1),
            ]);
        }
        g
    }
}

/// Trainable weights plus the batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters {
    arch: Architecture,
    layout: Layout,
    pub weights: Vec<f64>,
    pub running_mean: f64,
    pub running_var: f64,
}

impl NetworkParameters {
    /// Glorot-uniform kernels, zero biases, identity batch-norm.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut weights = vec![0.0; layout.len];
        weights[layout.bn_scale] = 1.0;
        if let Some(s) = &arch.stack {
            let mut rng = rng::stream(seed, Stream::WeightInit);
            let f = s.bilinear_filters;
            // each bilinear branch is initialized as its own kernel
            let lim2 = glorot(s.bilinear_kernel, s.bilinear_kernel * f);
            let w2 = &mut weights[layout.w2..layout.b2];
            let cols = 3 * f;
            for branch in 0..3 {
                for t in 0..s.bilinear_kernel {
                    for j in 0..f {
                        w2[t * cols + branch * f + j] = uniform(&mut rng, lim2);
                    }
                }
            }
            let lim3 = glorot(
                s.hidden_kernel * 2 * f,
                s.hidden_kernel * s.hidden_filters,
            );
            for w in &mut weights[layout.w3..layout.b3] {
                *w = uniform(&mut rng, lim3);
            }
            let lim4 = glorot(s.output_kernel * s.hidden_filters, s.output_kernel);
            for w in &mut weights[layout.w4..layout.b4] {
                *w = uniform(&mut rng, lim4);
            }
        }
        Ok(Self {
            arch,
            layout,
            weights,
            running_mean: 0.0,
            running_var: 1.0,
        })
    }

    pub fn from_parts(
        arch: Architecture,
        weights: Vec<f64>,
        running_mean: f64,
        running_var: f64,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if weights.len() != layout.len {
            return Err(Error::Dimension {
                context: "network weights",
                expected: layout.len,
                actual: weights.len(),
            });
        }
        if !weights.iter().all(|w| w.is_finite())
            || !running_mean.is_finite()
            || !(running_var >= 0.0 && running_var.is_finite())
        {
            return Err(Error::non_finite("network parameters"));
        }
        Ok(Self {
            arch,
            layout,
            weights,
            running_mean,
            running_var,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn output_kernel(&self) -> &[f64] {
        &self.weights[self.layout.w4..self.layout.b4]
    }

    /// Zeroes the output kernel and bias, making the network the identity.
    pub fn zero_output_layer(&mut self) {
        let (w4, len) = (self.layout.w4, self.layout.len);
        self.weights[w4..len].fill(0.0);
    }
}

/// Number of trainable values (batch-norm affine, kernels, biases).
pub fn param_count(params: &NetworkParameters) -> usize {
    params.layout.len
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform<R: Rng>(rng: &mut R, limit: f64) -> f64 {
    Uniform::new_inclusive(-limit, limit)
        .expect("finite limit")
        .sample(rng)
}
