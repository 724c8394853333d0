//! One spatiotemporal mixing block: windowed temporal aggregation, a node
//! mixer plus a cascade of adaptive region mixers, and top-down spatial
//! propagation back to node resolution.
//!
//! All activations are laid out `[B, S, T, d]` where `S` is the node or
//! region count of the current scale.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Initializer, LayerNorm, Linear, MixAxis, MixingMlp, EMBED_INIT_STD};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

/// Denominator guard of the pairwise cosine in [`pol`].
pub const POL_EPS: f64 = 1e-12;

/// One of the two window-mixing branches.
#[derive(Clone, Debug)]
pub struct WindowBranch {
    pub fc1: Linear,
    pub pos: ParamId,
    pub fc2: Linear,
}

impl WindowBranch {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        p: usize,
        t_out: usize,
        d: usize,
        h: usize,
    ) -> Self {
        WindowBranch {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), p * d, h, true),
            pos: store.add(format!("{name}.pos"), init.normal(&[t_out, h], EMBED_INIT_STD)),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), h, d, true),
        }
    }

    fn param_count(p: usize, t_out: usize, d: usize, h: usize) -> usize {
        Linear::param_count(p * d, h, true) + t_out * h + Linear::param_count(h, d, true)
    }

    /// `windows` is `[B, N, T_out, p * d]`.
    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, windows: Var) -> Result<Var> {
        let z = self.fc1.forward(tape, store, windows)?;
        let pos = tape.param(store, self.pos);
        let z = tape.add(z, pos)?;
        let z = tape.gelu(z);
        self.fc2.forward(tape, store, z)
    }
}

/// Gated pair of window MLPs that shortens the time axis by a factor `p`.
#[derive(Clone, Debug)]
pub struct TemporalAggregation {
    pub p: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub branch1: WindowBranch,
    pub branch2: WindowBranch,
}

impl TemporalAggregation {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        p: usize,
        t_in: usize,
        d: usize,
        h: usize,
    ) -> Result<Self> {
        if t_in == 0 || p == 0 {
            return Err(Error::invalid("temporal_aggregate", "time axis and window must be non-empty"));
        }
        let t_out = t_in.div_ceil(p);
        Ok(TemporalAggregation {
            p,
            t_in,
            t_out,
            branch1: WindowBranch::new(store, init, &format!("{name}.branch1"), p, t_out, d, h),
            branch2: WindowBranch::new(store, init, &format!("{name}.branch2"), p, t_out, d, h),
        })
    }

    pub fn param_count(p: usize, t_in: usize, d: usize, h: usize) -> usize {
        2 * WindowBranch::param_count(p, t_in.div_ceil(p), d, h)
    }

    /// `[B, N, T_in, d] -> [B, N, ceil(T_in / p), d]`. A partial last window
    /// is padded by repeating the final step.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let &[b, n, t, d] = tape.shape(x) else {
            return Err(Error::invalid("temporal_aggregate", "input must be [B, N, T, d]"));
        };
        if t != self.t_in {
            return Err(Error::shape("temporal_aggregate", &[b, n, t, d], &[b, n, self.t_in, d]));
        }
        let padded_len = self.t_out * self.p;
        let x = if padded_len > t {
            let last = tape.slice(x, 2, t - 1, t)?;
            let pad = tape.broadcast_to(last, &[b, n, padded_len - t, d])?;
            tape.concat(&[x, pad], 2)?
        } else {
            x
        };
        let windows = tape.reshape(x, &[b, n, self.t_out, self.p * d])?;
        let a = self.branch1.forward(tape, store, windows)?;
        let g = self.branch2.forward(tape, store, windows)?;
        tape.gated_fuse(a, g)
    }
}

/// Keys and base weights from which per-region temporal matrices are generated.
#[derive(Clone, Debug)]
pub struct ParameterPool {
    pub keys: ParamId,
    pub values: ParamId,
    pub size: usize,
    pub t: usize,
    pub h: usize,
}

impl ParameterPool {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        size: usize,
        t: usize,
        h: usize,
    ) -> Self {
        ParameterPool {
            keys: store.add(format!("{name}.keys"), init.normal(&[size, t], EMBED_INIT_STD)),
            values: store.add(format!("{name}.values"), init.normal(&[size, t, h], EMBED_INIT_STD)),
            size,
            t,
            h,
        }
    }

    pub fn param_count(size: usize, t: usize, h: usize) -> usize {
        size * t + size * t * h
    }
}

/// Applies a `[S_out, S_in]` matrix along the spatial axis of `[B, S_in, T, d]`.
pub fn spatial_map<S: Scalar>(tape: &mut Tape<S>, map: Var, x: Var) -> Result<Var> {
    let &[b, s_in, t, d] = tape.shape(x) else {
        return Err(Error::invalid("spatial_map", "input must be [B, S, T, d]"));
    };
    let &[s_out, s_map] = tape.shape(map) else {
        return Err(Error::invalid("spatial_map", "map must be rank 2"));
    };
    if s_map != s_in {
        return Err(Error::shape("spatial_map", &[s_out, s_map], &[b, s_in, t, d]));
    }
    let flat = tape.reshape(x, &[b, s_in, t * d])?;
    let y = tape.matmul(map, flat)?;
    tape.reshape(y, &[b, s_out, t, d])
}

/// Successive soft pooling of nodes into regions: `H_k = A_k H_{k-1}`.
pub fn spatial_aggregate<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    maps: &[ParamId],
    h: Var,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(maps.len());
    let mut cur = h;
    for &a in maps {
        let a = tape.param(store, a);
        cur = spatial_map(tape, a, cur)?;
        out.push(cur);
    }
    Ok(out)
}

/// Generates per-region temporal matrices from a pool.
///
/// Returns `(sim, w)`: `sim` is `[B, S, d, M]`, a distribution over pool
/// entries for every region and feature row; `w` is `[B, S, T, h]` with
/// `w_j = sum_i sim_j[i, :] V`.
pub fn generate_weights<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    pool: &ParameterPool,
    x: Var,
) -> Result<(Var, Var)> {
    let &[b, s, t, d] = tape.shape(x) else {
        return Err(Error::invalid("generate_weights", "input must be [B, S, T, d]"));
    };
    if t != pool.t {
        return Err(Error::shape("generate_weights", &[b, s, t, d], &[pool.size, pool.t]));
    }
    let keys = tape.param(store, pool.keys);
    let keys_t = tape.transpose(keys)?;
    let xt = tape.permute(x, &[0, 1, 3, 2])?;
    let scores = tape.matmul(xt, keys_t)?;
    let sim = tape.softmax(scores, 3)?;
    let mass = tape.sum_axis(sim, 2)?;
    let values = tape.param(store, pool.values);
    let values = tape.reshape(values, &[pool.size, t * pool.h])?;
    let w = tape.matmul(mass, values)?;
    let w = tape.reshape(w, &[b, s, t, pool.h])?;
    Ok((sim, w))
}

/// Region-specific two-step temporal transform: `R_j = H_jᵀ W1_j`,
/// `out_j = W2_j R_jᵀ`. No activation in between.
pub fn adaptive_mix<S: Scalar>(tape: &mut Tape<S>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let (s1, s2) = (tape.shape(w1).to_vec(), tape.shape(w2).to_vec());
    if xs.len() != 4 || s1.len() != 4 || s1 != s2 || s1[..3] != xs[..3] {
        return Err(Error::shape("adaptive_mix", &xs, &s1));
    }
    let xt = tape.permute(x, &[0, 1, 3, 2])?;
    let r = tape.matmul(xt, w1)?;
    let rt = tape.transpose(r)?;
    tape.matmul(w2, rt)
}

/// Parameter orthogonality penalty of one scale: the batch-averaged mean
/// pairwise cosine between the concatenated generated matrices of every
/// pair of regions, diagonal included.
pub fn pol<S: Scalar>(tape: &mut Tape<S>, w1: Var, w2: Var) -> Result<Var> {
    let cat = tape.concat(&[w1, w2], 3)?;
    let &[b, s, t, h2] = tape.shape(cat) else {
        unreachable!("concat keeps rank 4")
    };
    let flat = tape.reshape(cat, &[b, s, t * h2])?;
    let unit = tape.l2_normalize(flat, S::of(POL_EPS))?;
    let unit_t = tape.transpose(unit)?;
    let gram = tape.matmul(unit, unit_t)?;
    Ok(tape.mean(gram))
}

/// Temporal mixing step of a [`Mixer`].
#[derive(Clone, Debug)]
pub enum TemporalMix {
    /// Shared `T -> h -> T` mixing MLP.
    Standard(MixingMlp),
    /// Matrices generated per region from two pools.
    Adaptive {
        norm: LayerNorm,
        pool1: ParameterPool,
        pool2: ParameterPool,
    },
}

/// Residual spatial, temporal, spatiotemporal and feature mixing at one scale.
#[derive(Clone, Debug)]
pub struct Mixer {
    pub spatial: MixingMlp,
    pub temporal: TemporalMix,
    pub spatiotemporal: MixingMlp,
    pub feature: MixingMlp,
}

/// Generated matrices of one adaptive mixer, kept for the orthogonality loss.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveWeights {
    pub w1: Var,
    pub w2: Var,
}

impl Mixer {
    /// `pool` selects the adaptive temporal step with pools of that size.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        s: usize,
        t: usize,
        d: usize,
        h: usize,
        pool: Option<usize>,
    ) -> Self {
        let spatial = MixingMlp::new(store, init, &format!("{name}.spatial"), MixAxis::Spatial, s, h, d);
        let temporal = match pool {
            None => TemporalMix::Standard(MixingMlp::new(
                store,
                init,
                &format!("{name}.temporal"),
                MixAxis::Temporal,
                t,
                h,
                d,
            )),
            Some(m) => TemporalMix::Adaptive {
                norm: LayerNorm::new(store, &format!("{name}.adaptive.norm"), d),
                pool1: ParameterPool::new(store, init, &format!("{name}.adaptive.pool1"), m, t, h),
                pool2: ParameterPool::new(store, init, &format!("{name}.adaptive.pool2"), m, t, h),
            },
        };
        let spatiotemporal = MixingMlp::new(
            store,
            init,
            &format!("{name}.spatiotemporal"),
            MixAxis::SpatioTemporal,
            t * d,
            h,
            d,
        );
        let feature = MixingMlp::new(store, init, &format!("{name}.feature"), MixAxis::Feature, d, h, d);
        Mixer {
            spatial,
            temporal,
            spatiotemporal,
            feature,
        }
    }

    pub fn param_count(s: usize, t: usize, d: usize, h: usize, pool: Option<usize>) -> usize {
        let temporal = match pool {
            None => MixingMlp::param_count(t, h, d),
            Some(m) => 2 * d + 2 * ParameterPool::param_count(m, t, h),
        };
        MixingMlp::param_count(s, h, d) + temporal + MixingMlp::param_count(t * d, h, d) + MixingMlp::param_count(d, h, d)
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<(Var, Option<AdaptiveWeights>)> {
        let x = self.spatial.forward(tape, store, x)?;
        let (x, weights) = match &self.temporal {
            TemporalMix::Standard(mlp) => (mlp.forward(tape, store, x)?, None),
            TemporalMix::Adaptive { norm, pool1, pool2 } => {
                let normed = norm.forward(tape, store, x)?;
                let (_, w1) = generate_weights(tape, store, pool1, normed)?;
                let (_, w2) = generate_weights(tape, store, pool2, normed)?;
                let update = adaptive_mix(tape, normed, w1, w2)?;
                (tape.add(x, update)?, Some(AdaptiveWeights { w1, w2 }))
            }
        };
        let x = self.spatiotemporal.forward(tape, store, x)?;
        let x = self.feature.forward(tape, store, x)?;
        Ok((x, weights))
    }
}

/// Top-down fusion of mixer outputs back to node resolution.
///
/// `up[k]` maps scale `k + 1` to scale `k` (scale 0 being the nodes);
/// `fuse` is the final feature-axis map. Returns `fuse(node + up_0(...)) + h`.
pub fn spatial_propagate<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    up: &[ParamId],
    fuse: &Linear,
    node_out: Var,
    region_outs: &[Var],
    h: Var,
) -> Result<Var> {
    if up.len() != region_outs.len() {
        return Err(Error::invalid(
            "spatial_propagate",
            format!("{} up maps for {} region scales", up.len(), region_outs.len()),
        ));
    }
    let mut carry: Option<Var> = None;
    for (k, &o) in region_outs.iter().enumerate().rev() {
        let z = match carry {
            Some(c) => tape.add(o, c)?,
            None => o,
        };
        let map = tape.param(store, up[k]);
        carry = Some(spatial_map(tape, map, z)?);
    }
    let z = match carry {
        Some(c) => tape.add(node_out, c)?,
        None => node_out,
    };
    let z = fuse.forward(tape, store, z)?;
    tape.add(z, h)
}

/// Output of one block: the next pyramid level and the generated matrices
/// of every adaptive region mixer.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub next: Var,
    pub adaptive: Vec<AdaptiveWeights>,
}

#[derive(Clone, Debug)]
pub struct StBlock {
    pub aggregation: TemporalAggregation,
    /// `[S_k, S_{k-1}]` pooling matrices.
    pub down: Vec<ParamId>,
    pub node_mixer: Mixer,
    pub region_mixers: Vec<Mixer>,
    /// `[S_{k-1}, S_k]` propagation matrices.
    pub up: Vec<ParamId>,
    pub fuse: Linear,
    /// Skips the cascade and propagation: the block output is the
    /// aggregation output.
    pub aggregate_only: bool,
}

impl StBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        cfg: &ModelConfig,
        t_in: usize,
    ) -> Result<Self> {
        let (n, d, h, p) = (cfg.nodes, cfg.d, cfg.h, cfg.effective_p());
        let aggregation = TemporalAggregation::new(store, init, &format!("{name}.aggregate"), p, t_in, d, h)?;
        let t = aggregation.t_out;
        let regions = cfg.effective_regions();
        let pools = cfg.effective_pools();
        let mut down = Vec::with_capacity(regions.len());
        let mut prev = n;
        for (k, &s) in regions.iter().enumerate() {
            down.push(store.add(format!("{name}.down{}", k + 1), init.xavier(&[s, prev], prev, s)));
            prev = s;
        }
        let node_mixer = Mixer::new(store, init, &format!("{name}.node"), n, t, d, h, None);
        let region_mixers = regions
            .iter()
            .zip(pools)
            .enumerate()
            .map(|(k, (&s, &m))| {
                let pool = (!cfg.ablation.no_am).then_some(m);
                Mixer::new(store, init, &format!("{name}.region{}", k + 1), s, t, d, h, pool)
            })
            .collect();
        let mut up = Vec::with_capacity(regions.len());
        let mut prev = n;
        for (k, &s) in regions.iter().enumerate() {
            up.push(store.add(format!("{name}.up{}", k + 1), init.xavier(&[prev, s], s, prev)));
            prev = s;
        }
        let fuse = Linear::new(store, init, &format!("{name}.fuse"), d, d, true);
        Ok(StBlock {
            aggregation,
            down,
            node_mixer,
            region_mixers,
            up,
            fuse,
            aggregate_only: cfg.ablation.no_sp,
        })
    }

    pub fn param_count(cfg: &ModelConfig, t_in: usize) -> usize {
        let (n, d, h, p) = (cfg.nodes, cfg.d, cfg.h, cfg.effective_p());
        let t = t_in.div_ceil(p);
        let mut total = TemporalAggregation::param_count(p, t_in, d, h)
            + Mixer::param_count(n, t, d, h, None)
            + Linear::param_count(d, d, true);
        let mut prev = n;
        for (&s, &m) in cfg.effective_regions().iter().zip(cfg.effective_pools()) {
            let pool = (!cfg.ablation.no_am).then_some(m);
            total += 2 * s * prev + Mixer::param_count(s, t, d, h, pool);
            prev = s;
        }
        total
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, e: Var) -> Result<BlockOutput> {
        let h = self.aggregation.forward(tape, store, e)?;
        if self.aggregate_only {
            return Ok(BlockOutput {
                next: h,
                adaptive: Vec::new(),
            });
        }
        let regions = spatial_aggregate(tape, store, &self.down, h)?;
        let (node_out, _) = self.node_mixer.forward(tape, store, h)?;
        let mut outs = Vec::with_capacity(regions.len());
        let mut adaptive = Vec::new();
        for (mixer, &r) in self.region_mixers.iter().zip(&regions) {
            let (o, w) = mixer.forward(tape, store, r)?;
            outs.push(o);
            adaptive.extend(w);
        }
        let next = spatial_propagate(tape, store, &self.up, &self.fuse, node_out, &outs, h)?;
        Ok(BlockOutput { next, adaptive })
    }
}

/// Multiply-accumulate counts of one block for a single sample.
#[derive(Clone, Copy, Debug)]
pub struct MixingCost {
    pub t_in: u64,
    pub t: u64,
    pub p: u64,
    pub d: u64,
    pub h: u64,
}

impl MixingCost {
    pub fn mixer(&self, s: u64, pool: Option<u64>) -> u64 {
        let (t, d, h) = (self.t, self.d, self.h);
        let dense = 2 * s * t * d * h;
        let temporal = match pool {
            None => dense,
            Some(m) => 2 * (s * d * t * m + s * m * t * h) + dense,
        };
        3 * dense + temporal
    }

    pub fn block(&self, cfg: &ModelConfig, nodes: u64) -> u64 {
        let (t, d, h) = (self.t, self.d, self.h);
        let mut total = 2 * (nodes * t * self.p * d * h + nodes * t * h * d);
        if cfg.ablation.no_sp {
            return total;
        }
        total += self.mixer(nodes, None) + nodes * t * d * d;
        let mut prev = nodes;
        for (&s, &m) in cfg.effective_regions().iter().zip(cfg.effective_pools()) {
            let s = s as u64;
            let pool = (!cfg.ablation.no_am).then_some(m as u64);
            total += 2 * s * prev * t * d + self.mixer(s, pool);
            prev = s;
        }
        total
    }
}
