use std::collections::HashMap;

use super::kernels::{
    broadcast_shapes, broadcast_strides, gather_strided, gemm_nn, gemm_nt, gemm_tn,
    permute, scatter_add_strided, split_axis, strides,
};
use super::{numel, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYERNORM_EPS: f64 = 1e-5;

/// `sqrt(2 / pi)`, the tanh-approximation GELU coefficient.
pub const GELU_COEFF: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    BroadcastTo { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumAxis { a: Var, axis: usize },
    Tanh { a: Var },
    Sigmoid { a: Var },
    /// Saves the inner tanh for the reverse pass.
    Gelu { a: Var, t: Vec<S> },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<S>, rstd: Vec<S> },
    Gather { table: Var, rows: Vec<usize> },
    L2Normalize { a: Var, eps: S, denom: Vec<S> },
    MeanAbsError { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations in order so they can be differentiated in reverse.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Shape bookkeeping for batched matmul with leading-axis broadcasting.
struct MatmulLayout {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// (a, b) matrix offsets per output batch entry.
    offsets: Vec<(usize, usize)>,
    /// `b` is a single matrix and `a` has no broadcast batch axes.
    shared_rhs: bool,
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<MatmulLayout> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(Error::shape("matmul", a, b));
    }
    let batch = broadcast_shapes(ab, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
    let nb = numel(&batch);
    let a_str = broadcast_strides(ab, &batch);
    let b_str = broadcast_strides(bb, &batch);
    let bat_str = strides(&batch);
    let offsets = (0..nb)
        .map(|flat| {
            let (mut ao, mut bo) = (0, 0);
            for ax in 0..batch.len() {
                let ix = (flat / bat_str[ax]) % batch[ax];
                ao += ix * a_str[ax];
                bo += ix * b_str[ax];
            }
            (ao, bo)
        })
        .collect();
    let shared_rhs = numel(bb) == 1 && numel(ab) == nb;
    Ok(MatmulLayout {
        batch,
        m: am[0],
        k: am[1],
        n: bm[1],
        offsets,
        shared_rhs,
    })
}

/// Returns (output shape, whether `a` is the longer operand) for suffix broadcasting.
fn suffix_pair(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, bool)> {
    if a.ends_with(b) {
        Ok((a.to_vec(), true))
    } else if b.ends_with(a) {
        Ok((b.to_vec(), false))
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn reduce_to_suffix<S: Scalar>(g: &[S], short: usize, dst: &mut [S]) {
    for chunk in g.chunks_exact(short) {
        for (d, &x) in dst.iter_mut().zip(chunk) {
            *d += x;
        }
    }
}

/// `tanh` through a single `exp`; cheaper than the libm routine and
/// accurate to a few ulps in absolute terms.
#[inline]
fn tanh<S: Scalar>(x: S) -> S {
    let e = (S::of(-2.0) * x.abs()).exp();
    let t = (S::one() - e) / (S::one() + e);
    if x < S::zero() {
        -t
    } else {
        t
    }
}

#[inline]
fn gelu_inner_tanh<S: Scalar>(x: S) -> S {
    tanh(S::of(GELU_COEFF) * (x + S::of(GELU_CUBIC) * x * x * x))
}

#[inline]
fn gelu_grad<S: Scalar>(x: S, t: S) -> S {
    let c = S::of(GELU_COEFF);
    let k = S::of(GELU_CUBIC);
    let half = S::of(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * k * x * x)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Attaches a stored parameter, reusing the leaf if it is already on the tape.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`
    /// with numpy-style broadcasting over the leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let lay = matmul_layout(self.shape(a), self.shape(b))?;
        let (m, k, n) = (lay.m, lay.k, lay.n);
        let nb = lay.offsets.len();
        let mut out = vec![S::zero(); nb * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            if lay.shared_rhs {
                gemm_nn(nb * m, k, n, av, bv, &mut out);
            } else {
                for (bi, &(ao, bo)) in lay.offsets.iter().enumerate() {
                    gemm_nn(
                        m,
                        k,
                        n,
                        &av[ao * m * k..],
                        &bv[bo * k * n..],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
            }
        }
        let mut shape = lay.batch;
        shape.extend([m, n]);
        Ok(self.push(out, shape, Op::MatMul { a, b }, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (shape, a_long) = suffix_pair(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<S> = if av.len() == bv.len() {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if a_long {
            let s = bv.len().max(1);
            let mut out = Vec::with_capacity(av.len());
            for chunk in av.chunks_exact(s) {
                out.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            let s = av.len().max(1);
            let mut out = Vec::with_capacity(bv.len());
            for chunk in bv.chunks_exact(s) {
                out.extend(av.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            out
        };
        Ok(self.push(out, shape, op, &[a, b]))
    }

    /// Elementwise sum; the shorter operand's shape must be a suffix of the
    /// longer one and is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale { a, factor }, &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| S::one() / (S::one() + (-x).exp()), Op::Sigmoid { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t: Vec<S> = self.value(a).iter().map(|&x| gelu_inner_tanh(x)).collect();
        let half = S::of(0.5);
        let out = self
            .value(a)
            .iter()
            .zip(&t)
            .map(|(&x, &ti)| half * x * (S::one() + ti))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Gelu { a, t }, &[a])
    }

    /// `tanh(a) * sigmoid(b)`, the gated fusion of two branches.
    pub fn gated_fuse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("gated_fuse", self.shape(a), self.shape(b)));
        }
        let t = self.tanh(a);
        let s = self.sigmoid(b);
        self.mul(t, s)
    }

    // ---- shape ----------------------------------------------------------

    /// Expands size-1 (or missing leading) axes to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() > shape.len() {
            return Err(Error::shape("broadcast_to", &src, shape));
        }
        let pad = shape.len() - src.len();
        for (i, &d) in src.iter().enumerate() {
            if d != 1 && d != shape[pad + i] {
                return Err(Error::shape("broadcast_to", &src, shape));
            }
        }
        let st = broadcast_strides(&src, shape);
        let out = gather_strided(self.value(a), shape, &st);
        Ok(self.push(out, shape.to_vec(), Op::BroadcastTo { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (out, shape) = permute(self.value(a), self.shape(a), axes)?;
        Ok(self.push(
            out,
            shape,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(out, shape.to_vec(), Op::Reshape { a }, &[a]))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start > end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} outside axis of length {}", shape[axis]),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let w = end - start;
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            out.extend_from_slice(&src[base..base + w * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = w;
        Ok(self.push(out, oshape, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], Vec::new(), Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: S = v.iter().copied().sum::<S>() / S::of(v.len().max(1) as f64);
        self.push(vec![s], Vec::new(), Op::MeanAll { a }, &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        Ok(self.push(out, oshape, Op::SumAxis { a, axis }, &[a]))
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = S::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[at(l)]);
                }
                let mut total = S::zero();
                for l in 0..len {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / total;
                }
            }
        }
        Ok(self.push(out, shape, Op::Softmax { a, axis }, &[a]))
    }

    /// Layer normalisation along `axis` with affine `gamma`/`beta` of that axis' length.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gamma: Var, beta: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Axis {
                op: "layer_norm",
                axis,
                rank,
            });
        }
        if axis == rank - 1 {
            return self.layer_norm_last(x, gamma, beta);
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(axis, rank - 1);
        let xt = self.permute(x, &axes)?;
        let y = self.layer_norm_last(xt, gamma, beta)?;
        self.permute(y, &axes)
    }

    fn layer_norm_last(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank checked");
        if d == 0 {
            return Err(Error::invalid("layer_norm", "empty normalised axis"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let eps = S::of(LAYERNORM_EPS);
        let inv_d = S::one() / S::of(d as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in xv.chunks_exact(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rstd = S::one() / (var + eps).sqrt();
            for ((&v, &g), &b) in row.iter().zip(gv).zip(bv) {
                out.push((v - mean) * rstd * g + b);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    /// Divides each last-axis vector by `max(norm, eps)`; zero vectors stay zero.
    pub fn l2_normalize(&mut self, a: Var, eps: S) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::invalid("l2_normalize", "rank 0 input"))?;
        let src = self.value(a);
        let mut out = Vec::with_capacity(src.len());
        let mut denom = Vec::with_capacity(src.len() / d.max(1));
        for row in src.chunks_exact(d.max(1)) {
            let norm = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            let den = norm.max(eps);
            out.extend(row.iter().map(|&x| x / den));
            denom.push(den);
        }
        Ok(self.push(out, shape, Op::L2Normalize { a, eps, denom }, &[a]))
    }

    /// Cosine similarity along the last axis; zero-norm rows give 0.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: S) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let last = self.shape(a).len() - 1;
        let na = self.l2_normalize(a, eps)?;
        let nb = self.l2_normalize(b, eps)?;
        let p = self.mul(na, nb)?;
        self.sum_axis(p, last)
    }

    // ---- lookup / losses --------------------------------------------------

    /// Selects rows of a `[V, D]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("gather_rows", "table must be rank 2"));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for table of {v} rows"),
            ));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            out,
            vec![rows.len(), d],
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    /// `mean(|pred - target|)` over all elements.
    pub fn mean_abs_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(
                "mean_abs_error",
                self.shape(pred),
                self.shape(target),
            ));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let n = S::of(p.len().max(1) as f64);
        let s = p.iter().zip(t).map(|(&x, &y)| (x - y).abs()).sum::<S>() / n;
        Ok(self.push(
            vec![s],
            Vec::new(),
            Op::MeanAbsError { pred, target },
            &[pred, target],
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop(node, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut [S]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
    }

    fn backprop(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let lay = matmul_layout(self.shape(*a), self.shape(*b)).expect("validated");
                let (m, k, n) = (lay.m, lay.k, lay.n);
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = lay.offsets.len();
                if let Some(ga) = self.slot(grads, *a) {
                    if lay.shared_rhs {
                        gemm_nt(nb * m, n, k, g, bv, ga);
                    } else {
                        for (bi, &(ao, bo)) in lay.offsets.iter().enumerate() {
                            gemm_nt(
                                m,
                                n,
                                k,
                                &g[bi * m * n..],
                                &bv[bo * k * n..(bo + 1) * k * n],
                                &mut ga[ao * m * k..(ao + 1) * m * k],
                            );
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if lay.shared_rhs {
                        gemm_tn(k, nb * m, n, av, g, gb);
                    } else {
                        for (bi, &(ao, bo)) in lay.offsets.iter().enumerate() {
                            gemm_tn(
                                k,
                                m,
                                n,
                                &av[ao * m * k..],
                                &g[bi * m * n..],
                                &mut gb[bo * k * n..(bo + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign_b = if matches!(node.op, Op::Sub { .. }) {
                    -S::one()
                } else {
                    S::one()
                };
                for (v, sign) in [(*a, S::one()), (*b, sign_b)] {
                    let len = self.value(v).len();
                    if let Some(gv) = self.slot(grads, v) {
                        if len == g.len() {
                            for (d, &x) in gv.iter_mut().zip(g) {
                                *d += sign * x;
                            }
                        } else {
                            let mut tmp = vec![S::zero(); len];
                            reduce_to_suffix(g, len, &mut tmp);
                            for (d, x) in gv.iter_mut().zip(tmp) {
                                *d += sign * x;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let ov = self.value(other);
                    let len = self.value(v).len();
                    let prod: Vec<S> = if ov.len() == g.len() {
                        g.iter().zip(ov).map(|(&x, &y)| x * y).collect()
                    } else {
                        let s = ov.len().max(1);
                        let mut p = Vec::with_capacity(g.len());
                        for chunk in g.chunks_exact(s) {
                            p.extend(chunk.iter().zip(ov).map(|(&x, &y)| x * y));
                        }
                        p
                    };
                    let gv = self.slot(grads, v).expect("requires grad");
                    if len == g.len() {
                        for (d, &x) in gv.iter_mut().zip(&prod) {
                            *d += x;
                        }
                    } else {
                        reduce_to_suffix(&prod, len, gv);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x * *factor;
                    }
                }
            }
            Op::BroadcastTo { a } => {
                let st = broadcast_strides(self.shape(*a), &node.shape);
                if let Some(ga) = self.slot(grads, *a) {
                    scatter_add_strided(g, &node.shape, &st, ga);
                }
            }
            Op::Permute { a, axes } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let in_strides = strides(self.shape(*a));
                    let src: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
                    scatter_add_strided(g, &node.shape, &src, ga);
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let w = node.shape[*axis];
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        for (d, &x) in ga[base..base + w * inner]
                            .iter_mut()
                            .zip(&g[o * w * inner..(o + 1) * w * inner])
                        {
                            *d += x;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[*axis] * inner;
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..][..w];
                            for (d, &x) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SumAll { a } | Op::MeanAll { a } => {
                let len = self.value(*a).len();
                let scale = if matches!(node.op, Op::MeanAll { .. }) {
                    S::one() / S::of(len.max(1) as f64)
                } else {
                    S::one()
                };
                if let Some(ga) = self.slot(grads, *a) {
                    let v = g[0] * scale;
                    for d in ga.iter_mut() {
                        *d += v;
                    }
                }
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &x) in dst.iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * (S::one() - yi * yi);
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (S::one() - yi);
                    }
                }
            }
            Op::Gelu { a, t } => {
                let x = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for (((d, &gi), &xi), &ti) in ga.iter_mut().zip(g).zip(x).zip(t) {
                        *d += gi * gelu_grad(xi, ti);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let mut dot = S::zero();
                            for l in 0..len {
                                dot += g[at(l)] * y[at(l)];
                            }
                            for l in 0..len {
                                ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = *node.shape.last().expect("rank >= 1");
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let inv_d = S::one() / S::of(d as f64);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![S::zero(); d];
                    let mut db = vec![S::zero(); d];
                    for (r, (row, grow)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            let xh = (row[j] - mean[r]) * rstd[r];
                            dg[j] += grow[j] * xh;
                            db[j] += grow[j];
                        }
                    }
                    if let Some(s) = self.slot(grads, *gamma) {
                        for (d, x) in s.iter_mut().zip(dg) {
                            *d += x;
                        }
                    }
                    if let Some(s) = self.slot(grads, *beta) {
                        for (d, x) in s.iter_mut().zip(db) {
                            *d += x;
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxh = vec![S::zero(); d];
                    for (r, ((row, grow), gxrow)) in xv
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            dxh[j] = grow[j] * gv[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * (row[j] - mu) * rs;
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let xh = (row[j] - mu) * rs;
                            gxrow[j] += rs * (dxh[j] - m1 - xh * m2);
                        }
                    }
                }
            }
            Op::Gather { table, rows } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (dst, &x) in gt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..]) {
                            *dst += x;
                        }
                    }
                }
            }
            Op::L2Normalize { a, eps, denom } => {
                let d = *node.shape.last().expect("rank >= 1");
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, ((yrow, grow), garow)) in y
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(ga.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let den = denom[r];
                        // above the floor y = x/|x|, otherwise y = x/eps
                        let dot = if den > *eps {
                            yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum::<S>()
                        } else {
                            S::zero()
                        };
                        for j in 0..d {
                            garow[j] += (grow[j] - yrow[j] * dot) / den;
                        }
                    }
                }
            }
            Op::MeanAbsError { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = g[0] / S::of(p.len().max(1) as f64);
                let sign = |x: S| {
                    if x > S::zero() {
                        S::one()
                    } else if x < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                };
                if let Some(gp) = self.slot(grads, *pred) {
                    for ((d, &x), &y) in gp.iter_mut().zip(p).zip(t) {
                        *d += sign(x - y) * scale;
                    }
                }
                if let Some(gt) = self.slot(grads, *target) {
                    for ((d, &x), &y) in gt.iter_mut().zip(p).zip(t) {
                        *d -= sign(x - y) * scale;
                    }
                }
            }
        }
    }
}
