//! Parameter initialisation, linear layers and pre-norm mixing MLPs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Seeded source of initial parameter values. Values are drawn in `f64` so
/// the same seed yields the same model in either precision.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn xavier<S: Scalar>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<S> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_fn(shape, |_| S::of(dist.sample(&mut self.rng)))
    }

    pub fn normal<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| S::of(dist.sample(&mut self.rng)))
    }
}

/// Standard deviation of pool, dynamic-embedding and positional initialisation.
pub const EMBED_INIT_STD: f64 = 0.02;

/// Fully connected layer `y = x W + b` acting on one axis of its input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.xavier(&[fan_in, fan_out], fan_in, fan_out),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    /// Applies the layer to the last axis.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Applies the layer along `axis`, leaving the other axes in place.
    pub fn forward_axis<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        axis: usize,
    ) -> Result<Var> {
        let rank = tape.shape(x).len();
        if axis + 1 == rank {
            return self.forward(tape, store, x);
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.remove(axis);
        axes.push(axis);
        let xt = tape.permute(x, &axes)?;
        let y = self.forward(tape, store, xt)?;
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        tape.permute(y, &inverse)
    }
}

/// Layer normalisation over the trailing feature axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], S::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let last = tape.shape(x).len() - 1;
        tape.layer_norm(x, last, g, b)
    }
}

/// Axis a [`MixingMlp`] mixes over, for inputs laid out `[B, S, T, d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixAxis {
    Spatial,
    Temporal,
    /// The flattened `T * d` axis.
    SpatioTemporal,
    Feature,
}

/// Pre-norm residual MLP `x + FC2(gelu(FC1(LN(x))))` along one axis.
#[derive(Clone, Debug)]
pub struct MixingMlp {
    pub axis: MixAxis,
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MixingMlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        axis: MixAxis,
        len: usize,
        hidden: usize,
        d: usize,
    ) -> Self {
        MixingMlp {
            axis,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            fc1: Linear::new(store, init, &format!("{name}.fc1"), len, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, len, true),
        }
    }

    pub fn param_count(len: usize, hidden: usize, d: usize) -> usize {
        2 * d + Linear::param_count(len, hidden, true) + Linear::param_count(hidden, len, true)
    }

    fn mlp<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, axis: usize) -> Result<Var> {
        let rank = tape.shape(x).len();
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.remove(axis);
        axes.push(axis);
        let moved = axis + 1 != rank;
        let xt = if moved { tape.permute(x, &axes)? } else { x };
        let h = self.fc1.forward(tape, store, xt)?;
        let h = tape.gelu(h);
        let y = self.fc2.forward(tape, store, h)?;
        if !moved {
            return Ok(y);
        }
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        tape.permute(y, &inverse)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let normed = self.norm.forward(tape, store, x)?;
        let update = match self.axis {
            MixAxis::Spatial => self.mlp(tape, store, normed, 1)?,
            MixAxis::Temporal => self.mlp(tape, store, normed, 2)?,
            MixAxis::Feature => self.mlp(tape, store, normed, 3)?,
            MixAxis::SpatioTemporal => {
                let shape = tape.shape(normed).to_vec();
                let flat = tape.reshape(normed, &[shape[0], shape[1], shape[2] * shape[3]])?;
                let y = self.mlp(tape, store, flat, 2)?;
                tape.reshape(y, &shape)?
            }
        };
        tape.add(x, update)
    }
}
