//! Input embedding: a per-scalar lift of the traffic values plus node
//! identity and time-of-day / day-of-week tables.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nn::{Initializer, Linear, EMBED_INIT_STD};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Position of one input step on the daily and weekly cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StepTime {
    pub slot: usize,
    /// Monday is 0.
    pub weekday: usize,
}

impl StepTime {
    /// Slot and weekday of a UTC unix timestamp.
    pub fn from_epoch(secs: i64, interval_minutes: usize) -> Self {
        let days = secs.div_euclid(86_400);
        let minute = secs.rem_euclid(86_400) / 60;
        StepTime {
            slot: minute as usize / interval_minutes,
            // 1970-01-01 was a Thursday.
            weekday: (days + 3).rem_euclid(7) as usize,
        }
    }
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::Data(format!("{}:{}: bad number {f:?}", path.display(), line + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Reads an `N x d` embedding CSV, or, when `path` is absent or missing,
/// derives a spectral embedding from the adjacency CSV (`u,v[,w]` lines).
pub fn load_static_embeddings(
    path: Option<&Path>,
    adjacency: Option<&Path>,
    n: usize,
    d: usize,
) -> Result<Tensor<f64>> {
    if let Some(p) = path.filter(|p| p.exists()) {
        let rows = read_rows(p)?;
        if rows.len() != n {
            return Err(Error::Data(format!(
                "{}: expected {n} rows, found {}",
                p.display(),
                rows.len()
            )));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::Data(format!(
                "{}: row {} has {} values, expected {d}",
                p.display(),
                i + 1,
                r.len()
            )));
        }
        return Tensor::new(&[n, d], rows.concat());
    }
    let Some(adj) = adjacency.filter(|p| p.exists()) else {
        return Err(Error::Config(
            "no static embedding file and no adjacency file to derive one from".into(),
        ));
    };
    let mut edges = Vec::new();
    for (i, row) in read_rows(adj)?.into_iter().enumerate() {
        let bad = || Error::Data(format!("{}:{}: expected u,v[,w]", adj.display(), i + 1));
        if !(2..=3).contains(&row.len()) || row[0] < 0.0 || row[1] < 0.0 {
            return Err(bad());
        }
        let (u, v) = (row[0] as usize, row[1] as usize);
        if u >= n || v >= n || row[0].fract() != 0.0 || row[1].fract() != 0.0 {
            return Err(bad());
        }
        edges.push((u, v, row.get(2).copied().unwrap_or(1.0)));
    }
    Ok(spectral_embedding(&edges, n, d))
}

/// Eigenvectors of the `d` smallest eigenvalues of the symmetric normalised
/// Laplacian, skipping the first. Each column's first nonzero entry is made
/// positive; columns beyond `n - 1` are zero.
pub fn spectral_embedding(edges: &[(usize, usize, f64)], n: usize, d: usize) -> Tensor<f64> {
    let mut a = DMatrix::<f64>::zeros(n, n);
    for &(u, v, w) in edges {
        if u != v {
            a[(u, v)] += w;
            a[(v, u)] += w;
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = a.row(i).sum();
            if deg > 0.0 {
                deg.sqrt().recip()
            } else {
                0.0
            }
        })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));

    let mut out = vec![0.0; n * d];
    for (c, &k) in order.iter().skip(1).take(d).enumerate() {
        let col = eig.eigenvectors.column(k);
        let sign = col
            .iter()
            .find(|v| v.abs() > 1e-12)
            .map_or(1.0, |v| v.signum());
        for i in 0..n {
            out[i * d + c] = sign * col[i];
        }
    }
    Tensor::new(&[n, d], out).expect("n * d values")
}

/// Learnable and frozen embedding tables for one model.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub static_table: ParamId,
    pub dynamic: ParamId,
    pub day_table: ParamId,
    pub week_table: ParamId,
    pub proj: Linear,
    pub nodes: usize,
    pub d: usize,
    pub day_slots: usize,
}

impl Embedding {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        static_table: &Tensor<f64>,
        day_slots: usize,
    ) -> Result<Self> {
        let &[nodes, d] = static_table.shape() else {
            return Err(Error::invalid("embedding", "static table must be [N, d]"));
        };
        Ok(Embedding {
            static_table: store.add_frozen("embed.static", static_table.cast()),
            dynamic: store.add("embed.dynamic", init.normal(&[nodes, d], EMBED_INIT_STD)),
            day_table: store.add("embed.day", init.normal(&[day_slots, d], EMBED_INIT_STD)),
            week_table: store.add("embed.week", init.normal(&[7, d], EMBED_INIT_STD)),
            proj: Linear::new(store, init, "embed.proj", 1, d, true),
            nodes,
            d,
            day_slots,
        })
    }

    pub fn param_count(nodes: usize, d: usize, day_slots: usize) -> usize {
        nodes * d + day_slots * d + 7 * d + Linear::param_count(1, d, true)
    }

    /// `x` is `[B, N, T]`; `times` holds `B * T` entries, sample-major.
    /// Returns `[B, N, T, d]`.
    pub fn embed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        times: &[StepTime],
    ) -> Result<Var> {
        let &[b, n, t] = tape.shape(x) else {
            return Err(Error::invalid("embed", "input must be [B, N, T]"));
        };
        if n != self.nodes {
            return Err(Error::shape("embed", &[b, n, t], &[b, self.nodes, t]));
        }
        if times.len() != b * t {
            return Err(Error::invalid(
                "embed",
                format!("{} timestamps for {b} samples of {t} steps", times.len()),
            ));
        }
        if let Some(bad) = times
            .iter()
            .find(|s| s.slot >= self.day_slots || s.weekday >= 7)
        {
            return Err(Error::invalid(
                "embed",
                format!(
                    "timestamp slot {} / weekday {} out of range ({} slots per day)",
                    bad.slot, bad.weekday, self.day_slots
                ),
            ));
        }
        let d = self.d;

        let lifted = tape.reshape(x, &[b, n, t, 1])?;
        let e_tr = self.proj.forward(tape, store, lifted)?;

        let st = tape.param(store, self.static_table);
        let dy = tape.param(store, self.dynamic);
        let sp = tape.add(st, dy)?;
        let sp = tape.reshape(sp, &[n, 1, d])?;
        let sp = tape.broadcast_to(sp, &[n, t, d])?;

        let day = tape.param(store, self.day_table);
        let week = tape.param(store, self.week_table);
        let slots: Vec<usize> = times.iter().map(|s| s.slot).collect();
        let days: Vec<usize> = times.iter().map(|s| s.weekday).collect();
        let e_day = tape.gather_rows(day, &slots)?;
        let e_week = tape.gather_rows(week, &days)?;
        let te = tape.add(e_day, e_week)?;
        let te = tape.reshape(te, &[b, 1, t, d])?;
        let te = tape.broadcast_to(te, &[b, n, t, d])?;

        let out = tape.add(e_tr, sp)?;
        tape.add(out, te)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn setup(n: usize, d: usize, slots: usize, seed: u64) -> (ParamStore<f64>, Embedding) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let st = init.normal::<f64>(&[n, d], 1.0);
        let emb = Embedding::new(&mut store, &mut init, &st, slots).unwrap();
        (store, emb)
    }

    #[test]
    fn epoch_to_step_time() {
        // 2024-01-01 00:00 UTC, a Monday.
        let t = StepTime::from_epoch(1_704_067_200, 15);
        assert_eq!(t, StepTime { slot: 0, weekday: 0 });
        let t = StepTime::from_epoch(1_704_067_200 + 6 * 86_400 + 23 * 3600 + 50 * 60, 15);
        assert_eq!(t, StepTime { slot: 95, weekday: 6 });
        assert_eq!(StepTime::from_epoch(0, 5).weekday, 3);
    }

    #[test]
    fn static_file_passthrough_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("static.csv");
        fs::write(&p, "1,2\n3,4\n5,6\n7.5,-8\n").unwrap();
        let t = load_static_embeddings(Some(&p), None, 4, 2).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.5, -8.0]);
        assert!(matches!(load_static_embeddings(Some(&p), None, 5, 2), Err(Error::Data(_))));
        assert!(matches!(load_static_embeddings(Some(&p), None, 4, 3), Err(Error::Data(_))));
        let missing = dir.path().join("nope.csv");
        assert!(matches!(
            load_static_embeddings(Some(&missing), Some(&missing), 4, 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(load_static_embeddings(None, None, 4, 2), Err(Error::Config(_))));
    }

    #[test]
    fn spectral_fallback_two_node_path() {
        let dir = tempfile::tempdir().unwrap();
        let adj = dir.path().join("adj.csv");
        fs::write(&adj, "0,1\n").unwrap();
        let t = load_static_embeddings(Some(&dir.path().join("absent.csv")), Some(&adj), 2, 1).unwrap();
        let h = 0.5f64.sqrt();
        assert!((t.data()[0] - h).abs() < 1e-9);
        assert!((t.data()[1] + h).abs() < 1e-9);
    }

    #[test]
    fn spectral_fallback_handles_disconnected_graphs() {
        let t = spectral_embedding(&[(0, 1, 1.0), (2, 3, 2.0)], 5, 3);
        assert_eq!(t.shape(), &[5, 3]);
        assert!(t.data().iter().all(|v| v.is_finite()));
        // Path graph 0-1-2: second eigenvector of the normalised Laplacian.
        let t = spectral_embedding(&[(0, 1, 1.0), (1, 2, 1.0)], 3, 1);
        let v = t.data();
        assert!(v[0] > 0.0 && v[1].abs() < 1e-9 && (v[0] + v[2]).abs() < 1e-9);
    }

    #[test]
    fn zero_tables_and_unit_lift_pass_values_through() {
        let (mut store, emb) = setup(2, 3, 4, 0);
        for id in [emb.static_table, emb.dynamic, emb.day_table, emb.week_table] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        store.get_mut(emb.proj.weight).data_mut().copy_from_slice(&[1.0, 0.0, 0.0]);
        let x = Tensor::from_fn(&[1, 2, 2], |i| i as f64 - 1.5);
        let times = [StepTime { slot: 1, weekday: 2 }, StepTime { slot: 3, weekday: 6 }];
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let out = emb.embed(&mut tape, &store, xv, &times).unwrap();
        let out = tape.to_tensor(out);
        assert_eq!(out.shape(), &[1, 2, 2, 3]);
        for i in 0..4 {
            assert_eq!(out.data()[i * 3], x.data()[i]);
            assert_eq!(out.data()[i * 3 + 1], 0.0);
            assert_eq!(out.data()[i * 3 + 2], 0.0);
        }
    }

    #[test]
    fn embedding_matches_elementwise_oracle() {
        let (store, emb) = setup(2, 2, 96, 11);
        let x = Tensor::from_fn(&[1, 2, 3], |i| (i as f64 * 0.7).cos());
        let times = [
            StepTime { slot: 0, weekday: 1 },
            StepTime { slot: 95, weekday: 1 },
            StepTime { slot: 40, weekday: 5 },
        ];
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let out = emb.embed(&mut tape, &store, xv, &times).unwrap();
        let out = tape.to_tensor(out);
        let g = |id, r: usize, c: usize| store.get(id).get(&[r, c]);
        for n in 0..2 {
            for t in 0..3 {
                for c in 0..2 {
                    let want = x.get(&[0, n, t]) * g(emb.proj.weight, 0, c)
                        + store.get(emb.proj.bias.unwrap()).data()[c]
                        + g(emb.static_table, n, c)
                        + g(emb.dynamic, n, c)
                        + g(emb.day_table, times[t].slot, c)
                        + g(emb.week_table, times[t].weekday, c);
                    assert!((out.get(&[0, n, t, c]) - want).abs() < 1e-12);
                }
            }
        }

        // Zero input and zero bias leave only the identity embeddings.
        let zero = Tensor::zeros(&[1, 2, 3]);
        let mut tape = Tape::new();
        let zv = tape.leaf(&zero);
        let out = emb.embed(&mut tape, &store, zv, &times).unwrap();
        let out = tape.to_tensor(out);
        let want = g(emb.static_table, 1, 0) + g(emb.dynamic, 1, 0)
            + g(emb.day_table, 40, 0) + g(emb.week_table, 5, 0);
        assert!((out.get(&[0, 1, 2, 0]) - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_skip_static_table_and_same_times_share_embedding() {
        let (mut store, emb) = setup(3, 2, 24, 5);
        let x = Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.1);
        let same = StepTime { slot: 7, weekday: 3 };
        let times = [same, StepTime { slot: 8, weekday: 3 }, same, same];
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let out = emb.embed(&mut tape, &store, xv, &times).unwrap();
        let te_diff = {
            let o = tape.to_tensor(out);
            let a = o.get(&[0, 1, 0, 1]) - x.get(&[0, 1, 0]) * store.get(emb.proj.weight).data()[1];
            let b = o.get(&[1, 1, 1, 1]) - x.get(&[1, 1, 1]) * store.get(emb.proj.weight).data()[1];
            (a - b).abs()
        };
        assert!(te_diff < 1e-12);
        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();
        store.absorb_grads(&tape, &grads);
        assert!(store.get(emb.static_table).grad().is_none());
        for id in [emb.dynamic, emb.day_table, emb.week_table, emb.proj.weight] {
            assert!(store.get(id).grad().is_some());
        }
    }

    #[test]
    fn out_of_range_timestamps_are_rejected() {
        let (store, emb) = setup(2, 2, 4, 0);
        let mut tape = Tape::new();
        let xv = tape.leaf(&Tensor::<f64>::zeros(&[1, 2, 1]));
        let bad = [StepTime { slot: 4, weekday: 0 }];
        assert!(emb.embed(&mut tape, &store, xv, &bad).is_err());
        let bad = [StepTime { slot: 0, weekday: 7 }];
        assert!(emb.embed(&mut tape, &store, xv, &bad).is_err());
        assert!(emb.embed(&mut tape, &store, xv, &[]).is_err());
    }
}
