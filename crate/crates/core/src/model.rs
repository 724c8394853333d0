//! Full forecaster: embedding, stacked mixing blocks, temporal propagation
//! over the resulting pyramid and the regression head.

use crate::config::ModelConfig;
use crate::embedding::{Embedding, StepTime};
use crate::error::{Error, Result};
use crate::nn::{Initializer, Linear};
use crate::stblock::{pol, AdaptiveWeights, MixingCost, StBlock};
use crate::tensor::{gradcheck, GradcheckReport, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Prediction head `FC3(gelu(FC2(P + FC1(E_top))))`.
#[derive(Clone, Debug)]
pub struct Head {
    /// Time axis, `T_L -> T`.
    pub fc1: Linear,
    /// Per node, `T * d -> h`.
    pub fc2: Linear,
    /// Per node, `h -> T_pred`.
    pub fc3: Linear,
}

/// Parameter layout of the model. Values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub embedding: Embedding,
    pub blocks: Vec<StBlock>,
    /// `temporal_up[l]` maps pyramid level `l + 1` onto the length of level
    /// `max(l, 1) - 1`; empty when temporal propagation is disabled.
    pub temporal_up: Vec<Linear>,
    pub head: Head,
    /// Frozen per-node de-normalisation: `y = y' * scale + offset`.
    pub norm_scale: ParamId,
    pub norm_offset: ParamId,
}

/// Recorded activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    /// `[E_1, ..., E_{L+1}]`.
    pub pyramid: Vec<Var>,
    /// Generated matrices per block, one entry per adaptive region mixer.
    pub adaptive: Vec<Vec<AdaptiveWeights>>,
    /// Normalised-scale prediction `[B, N, T_pred]`.
    pub raw: Var,
    /// Prediction in data units.
    pub prediction: Var,
}

/// Scalar pieces of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mae: Var,
    pub pol: Option<Var>,
}

impl Network {
    pub fn build<S: Scalar>(
        cfg: &ModelConfig,
        static_table: &Tensor<f64>,
        store: &mut ParamStore<S>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if static_table.shape() != [cfg.nodes, cfg.d] {
            return Err(Error::shape("static embedding", static_table.shape(), &[cfg.nodes, cfg.d]));
        }
        let mut init = Initializer::new(seed);
        let lengths = cfg.temporal_lengths();
        let embedding = Embedding::new(store, &mut init, static_table, cfg.day_slots())?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            blocks.push(StBlock::new(store, &mut init, &format!("block{}", l + 1), cfg, lengths[l])?);
        }
        let mut temporal_up = Vec::new();
        if !cfg.ablation.no_tp {
            for l in 0..=cfg.blocks {
                let (from, to) = (lengths[l], lengths[l.max(1) - 1]);
                temporal_up.push(Linear::new(store, &mut init, &format!("temporal_up{}", l + 1), from, to, true));
            }
        }
        let (t, top) = (cfg.input_steps, lengths[cfg.blocks]);
        let head = Head {
            fc1: Linear::new(store, &mut init, "head.fc1", top, t, true),
            fc2: Linear::new(store, &mut init, "head.fc2", t * cfg.d, cfg.h, true),
            fc3: Linear::new(store, &mut init, "head.fc3", cfg.h, cfg.output_steps, true),
        };
        let norm_scale = store.add_frozen("norm.scale", Tensor::full(&[cfg.nodes], S::one()));
        let norm_offset = store.add_frozen("norm.offset", Tensor::zeros(&[cfg.nodes]));
        Ok(Network {
            cfg: cfg.clone(),
            embedding,
            blocks,
            temporal_up,
            head,
            norm_scale,
            norm_offset,
        })
    }

    /// `x` is normalised `[B, N, T]`, `times` holds `B * T` entries.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: &Tensor<S>,
        times: &[StepTime],
    ) -> Result<ForwardState> {
        let cfg = &self.cfg;
        let &[b, n, t] = x.shape() else {
            return Err(Error::invalid("forward", "input must be [B, N, T]"));
        };
        if n != cfg.nodes || t != cfg.input_steps {
            return Err(Error::shape("forward", x.shape(), &[b, cfg.nodes, cfg.input_steps]));
        }
        let xv = tape.leaf(x);
        let mut pyramid = vec![self.embedding.embed(tape, store, xv, times)?];
        let mut adaptive = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(tape, store, *pyramid.last().expect("non-empty"))?;
            pyramid.push(out.next);
            adaptive.push(out.adaptive);
        }

        let p = if self.temporal_up.is_empty() {
            pyramid[0]
        } else {
            let levels = pyramid.len();
            let mut carry = self.temporal_up[levels - 1].forward_axis(tape, store, pyramid[levels - 1], 2)?;
            for l in (0..levels - 1).rev() {
                let z = tape.add(pyramid[l], carry)?;
                carry = self.temporal_up[l].forward_axis(tape, store, z, 2)?;
            }
            carry
        };

        let top = *pyramid.last().expect("non-empty");
        let skip = self.head.fc1.forward_axis(tape, store, top, 2)?;
        let z = tape.add(p, skip)?;
        let z = tape.reshape(z, &[b, n, t * cfg.d])?;
        let z = self.head.fc2.forward(tape, store, z)?;
        let z = tape.gelu(z);
        let raw = self.head.fc3.forward(tape, store, z)?;

        let tp = cfg.output_steps;
        let scale = tape.param(store, self.norm_scale);
        let scale = tape.reshape(scale, &[n, 1])?;
        let scale = tape.broadcast_to(scale, &[n, tp])?;
        let offset = tape.param(store, self.norm_offset);
        let offset = tape.reshape(offset, &[n, 1])?;
        let offset = tape.broadcast_to(offset, &[n, tp])?;
        let y = tape.mul(raw, scale)?;
        let prediction = tape.add(y, offset)?;
        Ok(ForwardState {
            pyramid,
            adaptive,
            raw,
            prediction,
        })
    }

    /// `alpha * MAE + beta * POL`, with `y` in data units.
    pub fn loss<S: Scalar>(&self, tape: &mut Tape<S>, state: &ForwardState, y: &Tensor<S>) -> Result<LossTerms> {
        let yv = tape.leaf(y);
        let mae = tape.mean_abs_error(state.prediction, yv)?;
        let mut total = tape.scale(mae, S::of(self.cfg.alpha));
        let mut pol_sum: Option<Var> = None;
        for w in state.adaptive.iter().flatten() {
            let p = pol(tape, w.w1, w.w2)?;
            pol_sum = Some(match pol_sum {
                Some(acc) => tape.add(acc, p)?,
                None => p,
            });
        }
        if let Some(p) = pol_sum {
            let weighted = tape.scale(p, S::of(self.cfg.beta));
            total = tape.add(total, weighted)?;
        }
        Ok(LossTerms {
            total,
            mae,
            pol: pol_sum,
        })
    }
}

/// A [`Network`] together with its parameter values.
#[derive(Clone, Debug)]
pub struct HstMixer<S> {
    pub net: Network,
    pub params: ParamStore<S>,
}

impl<S: Scalar> HstMixer<S> {
    pub fn new(cfg: &ModelConfig, static_table: &Tensor<f64>, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(cfg, static_table, &mut params, seed)?;
        Ok(HstMixer { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Sets the frozen de-normalisation to `y = y' * std + mean`, per node.
    pub fn set_normalization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let n = self.net.cfg.nodes;
        if mean.len() != n || std.len() != n {
            return Err(Error::shape("set_normalization", &[mean.len(), std.len()], &[n, n]));
        }
        for (id, src) in [(self.net.norm_scale, std), (self.net.norm_offset, mean)] {
            for (d, &v) in self.params.get_mut(id).data_mut().iter_mut().zip(src) {
                *d = S::of(v);
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>, times: &[StepTime]) -> Result<ForwardState> {
        self.net.forward(tape, &self.params, x, times)
    }

    /// Prediction in data units, `[B, N, T_pred]`.
    pub fn predict(&self, x: &Tensor<S>, times: &[StepTime]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let state = self.forward(&mut tape, x, times)?;
        Ok(tape.to_tensor(state.prediction))
    }

    pub fn cast<T: Scalar>(&self) -> HstMixer<T> {
        HstMixer {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}

/// Learnable scalar count of a configuration. The frozen static embedding
/// and normalisation vectors are excluded.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let lengths = cfg.temporal_lengths();
    let mut total = Embedding::param_count(cfg.nodes, cfg.d, cfg.day_slots());
    for l in 0..cfg.blocks {
        total += StBlock::param_count(cfg, lengths[l]);
    }
    if !cfg.ablation.no_tp {
        for l in 0..=cfg.blocks {
            total += Linear::param_count(lengths[l], lengths[l.max(1) - 1], true);
        }
    }
    let t = cfg.input_steps;
    total + Linear::param_count(lengths[cfg.blocks], t, true)
        + Linear::param_count(t * cfg.d, cfg.h, true)
        + Linear::param_count(cfg.h, cfg.output_steps, true)
}

/// Multiply-accumulate count of one forward pass for a single sample,
/// counting matrix products only. Exactly affine in `cfg.nodes`.
pub fn flop_estimate(cfg: &ModelConfig) -> u64 {
    let lengths = cfg.temporal_lengths();
    let (n, d, h) = (cfg.nodes as u64, cfg.d as u64, cfg.h as u64);
    let (t0, tp) = (cfg.input_steps as u64, cfg.output_steps as u64);
    let mut total = n * t0 * d;
    for l in 0..cfg.blocks {
        let cost = MixingCost {
            t_in: lengths[l] as u64,
            t: lengths[l + 1] as u64,
            p: cfg.effective_p() as u64,
            d,
            h,
        };
        total += cost.block(cfg, n);
    }
    if !cfg.ablation.no_tp {
        for l in 0..=cfg.blocks {
            total += n * d * lengths[l] as u64 * lengths[l.max(1) - 1] as u64;
        }
    }
    let top = lengths[cfg.blocks] as u64;
    total + n * d * top * t0 + n * t0 * d * h + n * h * tp
}

/// Deterministic inputs for gradient checks and benchmarks.
pub struct SyntheticBatch<S> {
    pub x: Tensor<S>,
    pub y: Tensor<S>,
    pub times: Vec<StepTime>,
}

pub fn synthetic_batch<S: Scalar>(cfg: &ModelConfig, batch: usize, seed: u64) -> SyntheticBatch<S> {
    let mut init = Initializer::new(seed);
    let x = init.normal(&[batch, cfg.nodes, cfg.input_steps], 1.0);
    let y = init.normal(&[batch, cfg.nodes, cfg.output_steps], 1.0);
    let slots = cfg.day_slots();
    let times = (0..batch * cfg.input_steps)
        .map(|i| StepTime {
            slot: (i * 7 + 3) % slots,
            weekday: (i / cfg.input_steps) % 7,
        })
        .collect();
    SyntheticBatch { x, y, times }
}

/// Spectral-free deterministic stand-in for the static node table.
pub fn random_static_table(nodes: usize, d: usize, seed: u64) -> Tensor<f64> {
    Initializer::new(seed ^ 0x5eed).normal(&[nodes, d], 1.0)
}

/// Central-difference check of the full loss at 64-bit precision.
pub fn model_gradcheck(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<GradcheckReport> {
    let static_table = random_static_table(cfg.nodes, cfg.d, seed);
    let mut model = HstMixer::<f64>::new(cfg, &static_table, seed)?;
    let data = synthetic_batch::<f64>(cfg, batch, seed + 1);
    let net = &model.net;
    gradcheck(&mut model.params, 1e-5, |tape, store| {
        let state = net.forward(tape, store, &data.x, &data.times)?;
        Ok(net.loss(tape, &state, &data.y)?.total)
    })
}
