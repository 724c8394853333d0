//! Straight-line scalar reimplementation of the model used as a test oracle.
//! Parameters are looked up by name, so these loops share nothing with the
//! tape code beyond the parameter values.

use crate::tensor::{ParamStore, Tensor, GELU_COEFF, LAYERNORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: &[usize]) -> Self {
        Arr {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn of(t: &Tensor<f64>) -> Self {
        Arr {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn flat(&self, ix: &[usize]) -> usize {
        assert_eq!(ix.len(), self.shape.len());
        ix.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n);
            acc * n + i
        })
    }

    pub fn at(&self, ix: &[usize]) -> f64 {
        self.data[self.flat(ix)]
    }

    pub fn set(&mut self, ix: &[usize], v: f64) {
        let f = self.flat(ix);
        self.data[f] = v;
    }

    pub fn max_abs_diff(&self, t: &[f64]) -> f64 {
        assert_eq!(self.data.len(), t.len());
        self.data.iter().zip(t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Arr {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    Arr::of(store.get(id))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_COEFF * (x + 0.044715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Layer norm over the last axis of a 4-D array.
pub fn layer_norm(x: &Arr, store: &ParamStore<f64>, prefix: &str) -> Arr {
    let g = param(store, &format!("{prefix}.gamma"));
    let b = param(store, &format!("{prefix}.beta"));
    let d = *x.shape.last().unwrap();
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * g.data[i] + b.data[i];
        }
    }
    out
}

/// Vector-valued view along `axis` of a 4-D array: every other index fixed.
fn lines(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut ix = vec![0; 4];
    let others: Vec<usize> = (0..4).filter(|&a| a != axis).collect();
    let count: usize = others.iter().map(|&a| shape[a]).product();
    for mut c in 0..count {
        for &a in others.iter().rev() {
            ix[a] = c % shape[a];
            c /= shape[a];
        }
        out.push(ix.clone());
    }
    out
}

/// `y = x W + b` along one axis of a 4-D array; `W` is `[in, out]`.
pub fn linear_axis(x: &Arr, axis: usize, store: &ParamStore<f64>, prefix: &str) -> Arr {
    let w = param(store, &format!("{prefix}.weight"));
    let b = store.find(&format!("{prefix}.bias")).map(|id| Arr::of(store.get(id)));
    let (fin, fout) = (w.shape[0], w.shape[1]);
    assert_eq!(x.shape[axis], fin);
    let mut shape = x.shape.clone();
    shape[axis] = fout;
    let mut out = Arr::zeros(&shape);
    for base in lines(&x.shape, axis) {
        for o in 0..fout {
            let mut acc = b.as_ref().map_or(0.0, |b| b.data[o]);
            for i in 0..fin {
                let mut ix = base.clone();
                ix[axis] = i;
                acc += x.at(&ix) * w.at(&[i, o]);
            }
            let mut ix = base.clone();
            ix[axis] = o;
            out.set(&ix, acc);
        }
    }
    out
}

fn map(x: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    Arr {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn add(a: &Arr, b: &Arr) -> Arr {
    assert_eq!(a.shape, b.shape);
    Arr {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

/// Pre-norm residual MLP. `axis` 4 means the flattened `T * d` axis.
pub fn mixing(x: &Arr, store: &ParamStore<f64>, prefix: &str, axis: usize) -> Arr {
    let normed = layer_norm(x, store, &format!("{prefix}.norm"));
    let upd = if axis == 4 {
        let [b, s, t, d] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        let flat = Arr {
            shape: vec![b, s, 1, t * d],
            data: normed.data,
        };
        let y = linear_axis(&flat, 3, store, &format!("{prefix}.fc1"));
        let y = map(&y, gelu);
        let y = linear_axis(&y, 3, store, &format!("{prefix}.fc2"));
        Arr {
            shape: x.shape.clone(),
            data: y.data,
        }
    } else {
        let y = linear_axis(&normed, axis, store, &format!("{prefix}.fc1"));
        let y = map(&y, gelu);
        linear_axis(&y, axis, store, &format!("{prefix}.fc2"))
    };
    add(x, &upd)
}

pub fn temporal_aggregate(x: &Arr, store: &ParamStore<f64>, prefix: &str, p: usize) -> Arr {
    let [b, n, t, d] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let t_out = t.div_ceil(p);
    let branch = |name: &str| {
        let w1 = param(store, &format!("{prefix}.{name}.fc1.weight"));
        let b1 = param(store, &format!("{prefix}.{name}.fc1.bias"));
        let pos = param(store, &format!("{prefix}.{name}.pos"));
        let w2 = param(store, &format!("{prefix}.{name}.fc2.weight"));
        let b2 = param(store, &format!("{prefix}.{name}.fc2.bias"));
        let hdim = b1.data.len();
        let mut out = Arr::zeros(&[b, n, t_out, d]);
        for bi in 0..b {
            for ni in 0..n {
                for w in 0..t_out {
                    let mut window = Vec::with_capacity(p * d);
                    for j in 0..p {
                        let step = (w * p + j).min(t - 1);
                        for c in 0..d {
                            window.push(x.at(&[bi, ni, step, c]));
                        }
                    }
                    let hidden: Vec<f64> = (0..hdim)
                        .map(|k| {
                            let z = b1.data[k]
                                + pos.at(&[w, k])
                                + (0..p * d).map(|i| window[i] * w1.at(&[i, k])).sum::<f64>();
                            gelu(z)
                        })
                        .collect();
                    for c in 0..d {
                        let v = b2.data[c] + (0..hdim).map(|k| hidden[k] * w2.at(&[k, c])).sum::<f64>();
                        out.set(&[bi, ni, w, c], v);
                    }
                }
            }
        }
        out
    };
    let a = branch("branch1");
    let g = branch("branch2");
    Arr {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&g.data).map(|(x, y)| x.tanh() * sigmoid(*y)).collect(),
    }
}

/// `out[b, i] = sum_j m[i, j] x[b, j]` on the spatial axis.
pub fn spatial_map(m: &Arr, x: &Arr) -> Arr {
    let [b, s_in, t, d] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let s_out = m.shape[0];
    assert_eq!(m.shape[1], s_in);
    let mut out = Arr::zeros(&[b, s_out, t, d]);
    for bi in 0..b {
        for i in 0..s_out {
            for ti in 0..t {
                for c in 0..d {
                    let v = (0..s_in).map(|j| m.at(&[i, j]) * x.at(&[bi, j, ti, c])).sum();
                    out.set(&[bi, i, ti, c], v);
                }
            }
        }
    }
    out
}

/// Generated `[B, S, T, h]` matrices and the `[B, S, d, M]` scores.
pub fn generate_weights(x: &Arr, store: &ParamStore<f64>, prefix: &str) -> (Arr, Arr) {
    let keys = param(store, &format!("{prefix}.keys"));
    let vals = param(store, &format!("{prefix}.values"));
    let [b, s, t, d] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let (m, h) = (keys.shape[0], vals.shape[2]);
    let mut sim = Arr::zeros(&[b, s, d, m]);
    let mut w = Arr::zeros(&[b, s, t, h]);
    for bi in 0..b {
        for j in 0..s {
            for i in 0..d {
                let scores: Vec<f64> = (0..m)
                    .map(|mi| (0..t).map(|ti| x.at(&[bi, j, ti, i]) * keys.at(&[mi, ti])).sum())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|v| (v - mx).exp()).sum();
                for mi in 0..m {
                    sim.set(&[bi, j, i, mi], (scores[mi] - mx).exp() / z);
                }
            }
            for ti in 0..t {
                for k in 0..h {
                    let mut acc = 0.0;
                    for i in 0..d {
                        for mi in 0..m {
                            acc += sim.at(&[bi, j, i, mi]) * vals.at(&[mi, ti, k]);
                        }
                    }
                    w.set(&[bi, j, ti, k], acc);
                }
            }
        }
    }
    (sim, w)
}

pub fn adaptive_mix(x: &Arr, w1: &Arr, w2: &Arr) -> Arr {
    let [b, s, t, d] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let h = w1.shape[3];
    let mut out = Arr::zeros(&x.shape);
    for bi in 0..b {
        for j in 0..s {
            // r[c][k] = sum_t x[t][c] w1[t][k]
            let mut r = vec![vec![0.0; h]; d];
            for (c, row) in r.iter_mut().enumerate() {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = (0..t).map(|ti| x.at(&[bi, j, ti, c]) * w1.at(&[bi, j, ti, k])).sum();
                }
            }
            for ti in 0..t {
                for (c, row) in r.iter().enumerate() {
                    let v = (0..h).map(|k| w2.at(&[bi, j, ti, k]) * row[k]).sum();
                    out.set(&[bi, j, ti, c], v);
                }
            }
        }
    }
    out
}

pub fn pol(w1: &Arr, w2: &Arr) -> f64 {
    let [b, s] = [w1.shape[0], w1.shape[1]];
    let per = w1.data.len() / (b * s);
    let vecs: Vec<Vec<f64>> = (0..b * s)
        .map(|r| {
            let mut v = w1.data[r * per..(r + 1) * per].to_vec();
            v.extend_from_slice(&w2.data[r * per..(r + 1) * per]);
            v
        })
        .collect();
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..s {
            for j in 0..s {
                let (u, v) = (&vecs[bi * s + i], &vecs[bi * s + j]);
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                total += dot / (nu * nv);
            }
        }
    }
    total / (b * s * s) as f64
}

/// Mixer at one scale; returns the output and, for adaptive mixers, the
/// generated matrices.
pub fn mixer(x: &Arr, store: &ParamStore<f64>, prefix: &str) -> (Arr, Option<(Arr, Arr)>) {
    let x = mixing(x, store, &format!("{prefix}.spatial"), 1);
    let (x, w) = if store.find(&format!("{prefix}.temporal.norm.gamma")).is_some() {
        (mixing(&x, store, &format!("{prefix}.temporal"), 2), None)
    } else {
        let normed = layer_norm(&x, store, &format!("{prefix}.adaptive.norm"));
        let (_, w1) = generate_weights(&normed, store, &format!("{prefix}.adaptive.pool1"));
        let (_, w2) = generate_weights(&normed, store, &format!("{prefix}.adaptive.pool2"));
        let upd = adaptive_mix(&normed, &w1, &w2);
        (add(&x, &upd), Some((w1, w2)))
    };
    let x = mixing(&x, store, &format!("{prefix}.spatiotemporal"), 4);
    (mixing(&x, store, &format!("{prefix}.feature"), 3), w)
}

/// Full block; returns the next level and the per-scale POL values.
pub fn block(e: &Arr, store: &ParamStore<f64>, prefix: &str, p: usize, scales: usize, aggregate_only: bool) -> (Arr, Vec<f64>) {
    let h = temporal_aggregate(e, store, &format!("{prefix}.aggregate"), p);
    if aggregate_only {
        return (h, Vec::new());
    }
    let mut regions = Vec::new();
    let mut cur = h.clone();
    for k in 1..=scales {
        cur = spatial_map(&param(store, &format!("{prefix}.down{k}")), &cur);
        regions.push(cur.clone());
    }
    let (node_out, _) = mixer(&h, store, &format!("{prefix}.node"));
    let mut outs = Vec::new();
    let mut pols = Vec::new();
    for (k, r) in regions.iter().enumerate() {
        let (o, w) = mixer(r, store, &format!("{prefix}.region{}", k + 1));
        outs.push(o);
        if let Some((w1, w2)) = w {
            pols.push(pol(&w1, &w2));
        }
    }
    let mut carry: Option<Arr> = None;
    for k in (0..scales).rev() {
        let z = match &carry {
            Some(c) => add(&outs[k], c),
            None => outs[k].clone(),
        };
        carry = Some(spatial_map(&param(store, &format!("{prefix}.up{}", k + 1)), &z));
    }
    let z = match &carry {
        Some(c) => add(&node_out, c),
        None => node_out,
    };
    let z = linear_axis(&z, 3, store, &format!("{prefix}.fuse"));
    (add(&z, &h), pols)
}

pub fn add_arr(a: &Arr, b: &Arr) -> Arr {
    add(a, b)
}

pub fn gelu_arr(a: &Arr) -> Arr {
    map(a, gelu)
}
