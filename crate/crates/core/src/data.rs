//! Traffic series storage, chronological splitting with train-only
//! normalisation, sample windows, simple baselines and a synthetic
//! generator with planted regional structure.

use std::fs;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::StepTime;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HSTD_MAGIC: &[u8; 5] = b"HSTD1";
const HSTD_HEADER_LEN: usize = 5 + 8 * 4;

/// Lower bound applied to every normalisation standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// 2024-01-01 00:00 UTC, a Monday.
pub const DEFAULT_START_EPOCH: i64 = 1_704_067_200;

/// Node series on a regular time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficDataset {
    /// `[N, T_total]`, data units.
    pub series: Tensor<f32>,
    /// Unix seconds of step 0.
    pub start_epoch: i64,
    pub interval_minutes: usize,
    /// Optional `(u, v, weight)` edges.
    pub adjacency: Option<Vec<(usize, usize, f64)>>,
}

fn check_interval(interval: usize) -> Result<()> {
    if interval == 0 || 1440 % interval != 0 {
        return Err(Error::Data(format!(
            "interval of {interval} minutes does not divide a day"
        )));
    }
    Ok(())
}

impl TrafficDataset {
    pub fn new(series: Tensor<f32>, start_epoch: i64, interval_minutes: usize) -> Result<Self> {
        if series.shape().len() != 2 {
            return Err(Error::Data("series must be [nodes, steps]".into()));
        }
        check_interval(interval_minutes)?;
        Ok(TrafficDataset {
            series,
            start_epoch,
            interval_minutes,
            adjacency: None,
        })
    }

    pub fn nodes(&self) -> usize {
        self.series.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.series.shape()[1]
    }

    pub fn epoch_of(&self, step: usize) -> i64 {
        self.start_epoch + step as i64 * self.interval_minutes as i64 * 60
    }

    pub fn step_time(&self, step: usize) -> StepTime {
        StepTime::from_epoch(self.epoch_of(step), self.interval_minutes)
    }

    /// Averages consecutive groups of `factor` steps; a trailing partial
    /// group is dropped.
    pub fn aggregate(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("aggregation factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        check_interval(self.interval_minutes * factor)?;
        let (n, t) = (self.nodes(), self.steps());
        let t_out = t / factor;
        let src = self.series.data();
        let mut out = Vec::with_capacity(n * t_out);
        for node in 0..n {
            let row = &src[node * t..(node + 1) * t];
            for group in row[..t_out * factor].chunks_exact(factor) {
                let sum: f64 = group.iter().map(|&v| v as f64).sum();
                out.push((sum / factor as f64) as f32);
            }
        }
        Ok(TrafficDataset {
            series: Tensor::new(&[n, t_out], out)?,
            start_epoch: self.start_epoch,
            interval_minutes: self.interval_minutes * factor,
            adjacency: self.adjacency.clone(),
        })
    }

    /// Writes the binary `HSTD1` layout: magic, node count, step count,
    /// start epoch and interval (8 bytes little-endian each), then the
    /// values as f32 little-endian in time-major order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let (n, t) = (self.nodes(), self.steps());
        let mut buf = Vec::with_capacity(HSTD_HEADER_LEN + 4 * n * t);
        buf.extend_from_slice(HSTD_MAGIC);
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(t as u64).to_le_bytes());
        buf.extend_from_slice(&self.start_epoch.to_le_bytes());
        buf.extend_from_slice(&(self.interval_minutes as u64).to_le_bytes());
        let data = self.series.data();
        for step in 0..t {
            for node in 0..n {
                buf.extend_from_slice(&data[node * t + step].to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Loads an `HSTD1` file or a CSV file with header `timestamp,node_0,...`,
/// then averages every `aggregate` consecutive steps.
pub fn ingest(path: &Path, aggregate: usize) -> Result<TrafficDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds = if bytes.starts_with(b"timestamp") {
        read_csv(path, &bytes)?
    } else {
        read_hstd(path, &bytes)?
    };
    ds.aggregate(aggregate)
}

fn read_hstd(path: &Path, bytes: &[u8]) -> Result<TrafficDataset> {
    if !bytes.starts_with(HSTD_MAGIC) {
        return Err(Error::Data(format!(
            "{}: bad magic, expected HSTD1 or a CSV header",
            path.display()
        )));
    }
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < HSTD_HEADER_LEN {
        return Err(truncated(HSTD_HEADER_LEN));
    }
    let word = |i: usize| -> [u8; 8] { bytes[5 + 8 * i..13 + 8 * i].try_into().expect("8 bytes") };
    let n = u64::from_le_bytes(word(0)) as usize;
    let t = u64::from_le_bytes(word(1)) as usize;
    let start_epoch = i64::from_le_bytes(word(2));
    let interval = u64::from_le_bytes(word(3)) as usize;
    let expected = n
        .checked_mul(t)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HSTD_HEADER_LEN))
        .ok_or_else(|| Error::Data(format!("{}: implausible dimensions {n} x {t}", path.display())))?;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    let payload = &bytes[HSTD_HEADER_LEN..];
    let mut series = vec![0.0f32; n * t];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let (step, node) = (i / n, i % n);
        series[node * t + step] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    TrafficDataset::new(Tensor::new(&[n, t], series)?, start_epoch, interval)
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|dt| dt.and_utc().timestamp())
}

fn read_csv(path: &Path, bytes: &[u8]) -> Result<TrafficDataset> {
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let n = rdr.headers().map_err(|e| bad(e.to_string()))?.len().saturating_sub(1);
    if n == 0 {
        return Err(bad("no node columns".into()));
    }
    let mut stamps = Vec::new();
    let mut rows: Vec<f32> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let line = i + 2;
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| bad(format!("line {line}: bad timestamp {:?}", &rec[0])))?;
        if let Some(&prev) = stamps.last() {
            if ts <= prev {
                return Err(bad(format!("line {line}: timestamps are not increasing")));
            }
        }
        stamps.push(ts);
        for f in rec.iter().skip(1) {
            rows.push(f.parse().map_err(|_| bad(format!("line {line}: bad value {f:?}")))?);
        }
    }
    let t = stamps.len();
    if t == 0 {
        return Err(bad("no rows".into()));
    }
    let step = if t > 1 { stamps[1] - stamps[0] } else { 60 };
    if step % 60 != 0 || stamps.windows(2).any(|w| w[1] - w[0] != step) {
        return Err(bad("timestamps are not on a regular whole-minute grid".into()));
    }
    let mut series = vec![0.0f32; n * t];
    for (i, &v) in rows.iter().enumerate() {
        series[(i % n) * t + i / n] = v;
    }
    TrafficDataset::new(Tensor::new(&[n, t], series)?, stamps[0], (step / 60) as usize)
}

/// Per-node z-score statistics. Global statistics repeat one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of `series` restricted to `ranges`.
    pub fn fit(series: &Tensor<f32>, ranges: &[Range<usize>], per_node: bool) -> Self {
        let (n, t) = (series.shape()[0], series.shape()[1]);
        let data = series.data();
        let node_values = |node: usize| {
            ranges
                .iter()
                .flat_map(move |r| data[node * t + r.start..node * t + r.end].iter().map(|&v| v as f64))
        };
        let stats = |values: &mut dyn Iterator<Item = f64>| {
            let (mut count, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
            for v in values {
                count += 1;
                sum += v;
                sq += v * v;
            }
            let mean = sum / count.max(1) as f64;
            let var = (sq / count.max(1) as f64 - mean * mean).max(0.0);
            (mean, var.sqrt().max(STD_FLOOR))
        };
        if per_node {
            let (mean, std) = (0..n).map(|node| stats(&mut node_values(node))).unzip();
            Normalization { mean, std }
        } else {
            let (m, s) = stats(&mut (0..n).flat_map(node_values));
            Normalization {
                mean: vec![m; n],
                std: vec![s; n],
            }
        }
    }

    pub fn normalize(&self, node: usize, v: f64) -> f64 {
        (v - self.mean[node]) / self.std[node]
    }

    pub fn denormalize(&self, node: usize, v: f64) -> f64 {
        v * self.std[node] + self.mean[node]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub per_node: bool,
    /// Split each contiguous quarter separately and pool the pieces per role.
    pub seasonal: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.6, 0.2, 0.2],
            per_node: false,
            seasonal: false,
        }
    }
}

/// A dataset cut into chronological train / validation / test ranges.
#[derive(Clone, Debug)]
pub struct Splits {
    /// `[N, T_total]`, data units.
    pub raw: Tensor<f32>,
    /// `[N, T_total]`, normalised with the training statistics.
    pub normalized: Tensor<f32>,
    pub start_epoch: i64,
    pub interval_minutes: usize,
    pub train: Vec<Range<usize>>,
    pub val: Vec<Range<usize>>,
    pub test: Vec<Range<usize>>,
    pub norm: Normalization,
}

fn cut(range: Range<usize>, ratios: &[f64; 3]) -> [Range<usize>; 3] {
    let len = range.len() as f64;
    // Guard against 0.6 + 0.2 landing a hair under 0.8.
    let at = |frac: f64| range.start + ((frac * len) + 1e-9).floor() as usize;
    let b1 = at(ratios[0]).min(range.end);
    let b2 = at(ratios[0] + ratios[1]).clamp(b1, range.end);
    [range.start..b1, b1..b2, b2..range.end]
}

pub fn split_and_normalize(ds: &TrafficDataset, cfg: &SplitConfig) -> Result<Splits> {
    if cfg.ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
        || (cfg.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6
    {
        return Err(Error::Config(format!("split ratios {:?} must be non-negative and sum to 1", cfg.ratios)));
    }
    let t = ds.steps();
    let segments: Vec<Range<usize>> = if cfg.seasonal {
        (0..4).map(|q| q * t / 4..(q + 1) * t / 4).collect()
    } else {
        vec![0..t]
    };
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for seg in segments {
        let [a, b, c] = cut(seg, &cfg.ratios);
        for (dst, r) in [(&mut train, a), (&mut val, b), (&mut test, c)] {
            if !r.is_empty() {
                dst.push(r);
            }
        }
    }
    for (name, ranges) in [("train", &train), ("validation", &val), ("test", &test)] {
        if ranges.is_empty() {
            return Err(Error::Data(format!("{name} split is empty")));
        }
    }
    let norm = Normalization::fit(&ds.series, &train, cfg.per_node);
    let n = ds.nodes();
    let normalized = Tensor::from_fn(&[n, t], |i| {
        norm.normalize(i / t, ds.series.data()[i] as f64) as f32
    });
    Ok(Splits {
        raw: ds.series.clone(),
        normalized,
        start_epoch: ds.start_epoch,
        interval_minutes: ds.interval_minutes,
        train,
        val,
        test,
        norm,
    })
}

/// Start offsets of every window `[i, i + t + t_pred)` inside `range`.
pub fn window_starts(range: &Range<usize>, t: usize, t_pred: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let span = t + t_pred;
    if range.len() < span {
        return Err(Error::Data(format!(
            "split of {} steps is shorter than one window of {span}",
            range.len()
        )));
    }
    Ok((range.start..=range.end - span).step_by(stride).collect())
}

/// Inputs, targets and step times of a set of windows.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    /// `[B, N, T]`, normalised.
    pub x: Tensor<f32>,
    /// `[B, N, T_pred]`, data units.
    pub y: Tensor<f32>,
    /// `B * T` entries, sample-major.
    pub times: Vec<StepTime>,
}

impl Splits {
    pub fn nodes(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn ranges(&self, role: Role) -> &[Range<usize>] {
        match role {
            Role::Train => &self.train,
            Role::Val => &self.val,
            Role::Test => &self.test,
        }
    }

    pub fn step_time(&self, step: usize) -> StepTime {
        StepTime::from_epoch(
            self.start_epoch + step as i64 * self.interval_minutes as i64 * 60,
            self.interval_minutes,
        )
    }

    /// Window starts of one role; windows never straddle two ranges.
    pub fn windows(&self, role: Role, t: usize, t_pred: usize, stride: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut last_err = None;
        for r in self.ranges(role) {
            match window_starts(r, t, t_pred, stride) {
                Ok(w) => out.extend(w),
                Err(e) => last_err = Some(e),
            }
        }
        match (out.is_empty(), last_err) {
            (true, Some(e)) => Err(e),
            _ => Ok(out),
        }
    }

    pub fn batch(&self, starts: &[usize], t: usize, t_pred: usize) -> SampleBatch {
        let (n, total) = (self.nodes(), self.steps());
        let b = starts.len();
        let (norm, raw) = (self.normalized.data(), self.raw.data());
        let mut x = Vec::with_capacity(b * n * t);
        let mut y = Vec::with_capacity(b * n * t_pred);
        let mut times = Vec::with_capacity(b * t);
        for &s in starts {
            assert!(s + t + t_pred <= total, "window at {s} runs past the series");
            for node in 0..n {
                x.extend_from_slice(&norm[node * total + s..node * total + s + t]);
            }
            for node in 0..n {
                y.extend_from_slice(&raw[node * total + s + t..node * total + s + t + t_pred]);
            }
            times.extend((s..s + t).map(|step| self.step_time(step)));
        }
        SampleBatch {
            x: Tensor::new(&[b, n, t], x).expect("sized"),
            y: Tensor::new(&[b, n, t_pred], y).expect("sized"),
            times,
        }
    }

    /// Forecast equal to the training-split mean of the same node at the
    /// same time-of-day slot. Slots absent from training fall back to the
    /// node's training mean.
    pub fn historical_average(&self, starts: &[usize], t: usize, t_pred: usize) -> Tensor<f32> {
        let (n, total) = (self.nodes(), self.steps());
        let slots = 1440 / self.interval_minutes;
        let mut sum = vec![0.0f64; n * slots];
        let mut count = vec![0usize; slots];
        let mut node_sum = vec![0.0f64; n];
        let mut node_count = 0usize;
        let raw = self.raw.data();
        for r in &self.train {
            for step in r.clone() {
                let slot = self.step_time(step).slot;
                count[slot] += 1;
                node_count += 1;
                for node in 0..n {
                    let v = raw[node * total + step] as f64;
                    sum[node * slots + slot] += v;
                    node_sum[node] += v;
                }
            }
        }
        let mut out = Vec::with_capacity(starts.len() * n * t_pred);
        for &s in starts {
            for node in 0..n {
                for step in s + t..s + t + t_pred {
                    let slot = self.step_time(step).slot;
                    let v = if count[slot] > 0 {
                        sum[node * slots + slot] / count[slot] as f64
                    } else {
                        node_sum[node] / node_count.max(1) as f64
                    };
                    out.push(v as f32);
                }
            }
        }
        Tensor::new(&[starts.len(), n, t_pred], out).expect("sized")
    }

    /// Forecast repeating the last observed value.
    pub fn last_value(&self, starts: &[usize], t: usize, t_pred: usize) -> Tensor<f32> {
        let (n, total) = (self.nodes(), self.steps());
        let raw = self.raw.data();
        let mut out = Vec::with_capacity(starts.len() * n * t_pred);
        for &s in starts {
            for node in 0..n {
                let v = raw[node * total + s + t - 1];
                out.extend(std::iter::repeat_n(v, t_pred));
            }
        }
        Tensor::new(&[starts.len(), n, t_pred], out).expect("sized")
    }
}

/// Settings of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub nodes: usize,
    pub steps: usize,
    pub regions: usize,
    pub seed: u64,
    /// Innovation standard deviation of the AR(1) node noise, data units.
    pub sigma: f64,
    pub interval_minutes: usize,
    pub start_epoch: i64,
}

impl SynthConfig {
    pub fn new(nodes: usize, steps: usize, regions: usize, seed: u64) -> Self {
        SynthConfig {
            nodes,
            steps,
            regions,
            seed,
            sigma: 0.1,
            interval_minutes: 15,
            start_epoch: DEFAULT_START_EPOCH,
        }
    }
}

/// Generated series plus the planted ground truth.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: TrafficDataset,
    /// Region of every node.
    pub regions: Vec<usize>,
}

pub const SYNTH_BASE_LOAD: f64 = 60.0;
pub const SYNTH_AR: f64 = 0.8;
pub const SYNTH_WEEKEND_GAIN: f64 = 0.9;

/// Regional traffic: each node follows its region's two-harmonic daily
/// profile, damped on weekends, on top of a base load and a regional linear
/// trend, plus AR(1) node noise. Nodes are split into contiguous regions.
/// The adjacency links each region into a chain and joins consecutive
/// regions at their first nodes.
pub fn synth(cfg: &SynthConfig) -> Result<Synthetic> {
    if cfg.nodes == 0 || cfg.steps == 0 {
        return Err(Error::Config("synthetic data needs nodes and steps".into()));
    }
    if cfg.regions == 0 || cfg.regions > cfg.nodes {
        return Err(Error::Config(format!(
            "region count {} must be between 1 and the node count {}",
            cfg.regions, cfg.nodes
        )));
    }
    if !(cfg.sigma.is_finite() && cfg.sigma >= 0.0) {
        return Err(Error::Config("noise level must be non-negative".into()));
    }
    check_interval(cfg.interval_minutes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.regions;
    struct Profile {
        amp: f64,
        phase: f64,
        phase2: f64,
        slope: f64,
    }
    let profiles: Vec<Profile> = (0..r)
        .map(|k| Profile {
            amp: 15.0 + 10.0 * rng.random::<f64>(),
            phase: std::f64::consts::PI * k as f64 / r as f64 + 0.2 * (rng.random::<f64>() - 0.5),
            phase2: std::f64::consts::TAU * rng.random::<f64>(),
            slope: 0.6 * (rng.random::<f64>() - 0.5),
        })
        .collect();
    let regions: Vec<usize> = (0..cfg.nodes).map(|i| i * r / cfg.nodes).collect();

    let (n, t) = (cfg.nodes, cfg.steps);
    let step_secs = cfg.interval_minutes as i64 * 60;
    let clean: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| {
            (0..t)
                .map(|step| {
                    let secs = cfg.start_epoch + step as i64 * step_secs;
                    let day_frac = secs.rem_euclid(86_400) as f64 / 86_400.0;
                    let days = (secs - cfg.start_epoch) as f64 / 86_400.0;
                    let gain = if StepTime::from_epoch(secs, cfg.interval_minutes).weekday >= 5 {
                        SYNTH_WEEKEND_GAIN
                    } else {
                        1.0
                    };
                    let angle = std::f64::consts::TAU * day_frac;
                    let daily = p.amp * (angle + p.phase).sin() + 0.35 * p.amp * (2.0 * angle + p.phase2).sin();
                    SYNTH_BASE_LOAD + p.slope * days + gain * daily
                })
                .collect()
        })
        .collect();

    let stationary = cfg.sigma / (1.0 - SYNTH_AR * SYNTH_AR).sqrt();
    let mut series = vec![0.0f32; n * t];
    for node in 0..n {
        let z0: f64 = StandardNormal.sample(&mut rng);
        let mut e = stationary * z0;
        for step in 0..t {
            if step > 0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                e = SYNTH_AR * e + cfg.sigma * z;
            }
            series[node * t + step] = (clean[regions[node]][step] + e).max(1.0) as f32;
        }
    }

    let mut edges = Vec::new();
    let mut heads = Vec::new();
    for k in 0..r {
        let members: Vec<usize> = (0..n).filter(|&i| regions[i] == k).collect();
        heads.push(members[0]);
        edges.extend(members.windows(2).map(|w| (w[0], w[1], 1.0)));
    }
    edges.extend(heads.windows(2).map(|w| (w[0], w[1], 1.0)));

    let mut dataset = TrafficDataset::new(Tensor::new(&[n, t], series)?, cfg.start_epoch, cfg.interval_minutes)?;
    dataset.adjacency = Some(edges);
    Ok(Synthetic { dataset, regions })
}

pub fn write_region_labels(path: &Path, regions: &[usize]) -> Result<()> {
    let mut out = String::from("node_id,region_id\n");
    for (i, r) in regions.iter().enumerate() {
        out.push_str(&format!("{i},{r}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_adjacency(path: &Path, edges: &[(usize, usize, f64)]) -> Result<()> {
    let mut out = String::new();
    for (u, v, w) in edges {
        out.push_str(&format!("{u},{v},{w}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
