//! Command implementations behind the `hstmixer` binary. Every command
//! returns its machine-readable output lines instead of printing them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hstmixer::data::{
    ingest, split_and_normalize, synth, write_adjacency, write_region_labels, Role, Splits, SynthConfig,
    DEFAULT_START_EPOCH,
};
use hstmixer::embedding::load_static_embeddings;
use hstmixer::model::{flop_estimate, model_gradcheck, random_static_table, synthetic_batch, HstMixer};
use hstmixer::tensor::{load_checkpoint, Tape};
use hstmixer::trainer::{evaluate, train, Metrics};
use hstmixer::{ErrorKind, ModelConfig};
use thiserror::Error;

pub mod config;

pub use config::RunConfig;

/// Gradient check pass threshold.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] hstmixer::Error),
    #[error("gradient check failed: max relative error {0:e}")]
    Gradcheck(f64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
            CliError::Gradcheck(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Sidecar paths written next to a synthetic data file.
pub fn sidecars(out: &Path) -> (PathBuf, PathBuf) {
    (out.with_extension("regions.csv"), out.with_extension("adj.csv"))
}

pub struct SynthArgs {
    pub nodes: usize,
    pub steps: usize,
    pub regions: usize,
    pub seed: u64,
    pub sigma: f64,
    pub interval_minutes: usize,
    pub out: PathBuf,
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<String> {
    if a.nodes == 0 || a.steps == 0 || a.regions == 0 || a.regions > a.nodes {
        return Err(CliError::Usage(format!(
            "need nodes > 0, steps > 0 and 1 <= regions <= nodes (got {}, {}, {})",
            a.nodes, a.steps, a.regions
        )));
    }
    let cfg = SynthConfig {
        nodes: a.nodes,
        steps: a.steps,
        regions: a.regions,
        seed: a.seed,
        sigma: a.sigma,
        interval_minutes: a.interval_minutes,
        start_epoch: DEFAULT_START_EPOCH,
    };
    let s = synth(&cfg)?;
    s.dataset.write(&a.out)?;
    let (labels, adj) = sidecars(&a.out);
    write_region_labels(&labels, &s.regions)?;
    write_adjacency(&adj, s.dataset.adjacency.as_deref().unwrap_or(&[]))?;
    Ok(format!(
        "out={} nodes={} steps={} regions={} labels={} adjacency={}",
        a.out.display(),
        a.nodes,
        a.steps,
        a.regions,
        labels.display(),
        adj.display()
    ))
}

/// Data splits and a freshly initialised model for a run configuration.
pub fn prepare(cfg: &RunConfig) -> CliResult<(Splits, HstMixer<f32>)> {
    let ds = ingest(&cfg.data.path, cfg.data.aggregate)?;
    let m = &cfg.model;
    if ds.nodes() != m.nodes {
        return Err(CliError::Usage(format!(
            "model.nodes is {} but {} has {} nodes",
            m.nodes,
            cfg.data.path.display(),
            ds.nodes()
        )));
    }
    if ds.interval_minutes != m.interval_minutes {
        return Err(CliError::Usage(format!(
            "model.interval_minutes is {} but the data steps every {} minutes",
            m.interval_minutes, ds.interval_minutes
        )));
    }
    let static_table = load_static_embeddings(
        cfg.data.static_embeddings.as_deref(),
        cfg.data.adjacency.as_deref(),
        m.nodes,
        m.d,
    )?;
    let splits = split_and_normalize(&ds, &cfg.split_config())?;
    let mut model = HstMixer::new(m, &static_table, cfg.seed)?;
    model.set_normalization(&splits.norm.mean, &splits.norm.std)?;
    Ok((splits, model))
}

fn metric_line(prefix: &str, m: &Metrics) -> String {
    format!("{prefix}mae={} {prefix}rmse={} {prefix}mape={}", m.mae, m.rmse, m.mape)
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let (splits, mut model) = prepare(cfg)?;
    let tc = cfg.train_config();
    let report = train(&mut model, &splits, &tc)?;
    let test = evaluate(&model, &splits, Role::Test, tc.batch_size)?;
    let mut lines: Vec<String> = report
        .epochs
        .iter()
        .map(|e| format!("epoch={} train_loss={} val_mae={} seconds={:.3}", e.epoch, e.train_loss, e.val.mae, e.seconds))
        .collect();
    lines.push(format!(
        "best_epoch={} best_val_mae={} steps={} stopped_early={} {} checkpoint={} log={}",
        report.best_epoch,
        report.best_val_mae,
        report.steps,
        report.stopped_early,
        metric_line("test_", &test),
        cfg.train.checkpoint.display(),
        cfg.train.log.display()
    ));
    Ok(lines)
}

pub fn parse_role(s: &str) -> CliResult<Role> {
    match s {
        "train" => Ok(Role::Train),
        "val" => Ok(Role::Val),
        "test" => Ok(Role::Test),
        other => Err(CliError::Usage(format!("unknown split {other:?}, expected train, val or test"))),
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: &str) -> CliResult<String> {
    let role = parse_role(split)?;
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let (splits, mut model) = prepare(cfg)?;
    load_checkpoint(&mut model.params, checkpoint)?;
    let m = evaluate(&model, &splits, role, cfg.train.batch_size)?;
    let mut line = format!("split={split} {}", metric_line("", &m));
    for (j, h) in m.horizons.iter().enumerate() {
        write!(line, " h{}_mae={}", j + 1, h.mae).expect("string write");
    }
    Ok(line)
}

/// Full-model finite-difference check at the tiny preset, keeping the
/// ablation switches of `cfg` when given.
pub fn cmd_gradcheck(cfg: Option<&RunConfig>) -> CliResult<String> {
    let mut tiny = ModelConfig::tiny();
    if let Some(c) = cfg {
        tiny.ablation = c.model.ablation;
        tiny.validate()?;
    }
    let seed = cfg.map_or(0, |c| c.seed);
    let start = Instant::now();
    let report = model_gradcheck(&tiny, 2, seed)?;
    let err = report.max_rel_error();
    let worst = report.worst().map_or("none", |l| l.name.as_str());
    let line = format!(
        "max_rel_error={err:e} worst={worst} evaluations={} seconds={:.2} pass={}",
        report.evaluations,
        start.elapsed().as_secs_f64(),
        err < GRADCHECK_TOLERANCE
    );
    if err < GRADCHECK_TOLERANCE {
        Ok(line)
    } else {
        eprintln!("{line}");
        Err(CliError::Gradcheck(err))
    }
}

pub struct BenchPoint {
    pub nodes: usize,
    pub millis: f64,
    pub flops: u64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Forward plus backward wall time of `model` at each node count, one
/// warmup run then the median of `repeats`.
pub fn bench(base: &ModelConfig, nodes: &[usize], batch: usize, repeats: usize, seed: u64) -> CliResult<Vec<BenchPoint>> {
    if nodes.len() < 3 {
        return Err(CliError::Usage(format!("bench needs at least 3 node counts, got {}", nodes.len())));
    }
    if batch == 0 || repeats == 0 {
        return Err(CliError::Usage("bench batch and repeats must be positive".into()));
    }
    let mut out = Vec::with_capacity(nodes.len());
    for &n in nodes {
        let cfg = ModelConfig { nodes: n, ..base.clone() };
        cfg.validate()?;
        let model = HstMixer::<f32>::new(&cfg, &random_static_table(n, cfg.d, seed), seed)?;
        let data = synthetic_batch::<f32>(&cfg, batch, seed + 1);
        let run = || -> CliResult<f64> {
            let start = Instant::now();
            let mut tape = Tape::new();
            let state = model.forward(&mut tape, &data.x, &data.times)?;
            let loss = model.net.loss(&mut tape, &state, &data.y)?;
            let grads = tape.backward(loss.total)?;
            std::hint::black_box(&grads);
            Ok(start.elapsed().as_secs_f64() * 1e3)
        };
        run()?;
        let times = (0..repeats).map(|_| run()).collect::<CliResult<Vec<_>>>()?;
        out.push(BenchPoint {
            nodes: n,
            millis: median(times),
            flops: flop_estimate(&cfg),
        });
    }
    Ok(out)
}

pub fn cmd_bench(cfg: &RunConfig, nodes: &[usize], batch: usize, repeats: usize) -> CliResult<Vec<String>> {
    let points = bench(&cfg.model, nodes, batch, repeats, cfg.seed)?;
    let mut lines: Vec<String> = points
        .iter()
        .map(|p| format!("nodes={} ms={:.3} flops={}", p.nodes, p.millis, p.flops))
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.nodes as f64).collect();
    let ms: Vec<f64> = points.iter().map(|p| p.millis).collect();
    let fl: Vec<f64> = points.iter().map(|p| p.flops as f64).collect();
    lines.push(format!(
        "slope={:.4} flop_slope={:.4}",
        log_log_slope(&xs, &ms),
        log_log_slope(&xs, &fl)
    ));
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let quad: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert!((log_log_slope(&xs, &lin) - 1.0).abs() < 1e-12);
        assert!((log_log_slope(&xs, &quad) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(hstmixer::Error::Data("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(hstmixer::Error::Numeric("x".into())).exit_code(), 3);
        assert_eq!(CliError::Gradcheck(1.0).exit_code(), 3);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let good = "[model]\nnodes = 8\nregions = [4, 2]\npool_sizes = [2, 2]\n[data]\npath = \"x.hstd\"\n";
        let cfg = RunConfig::parse(good).unwrap();
        assert_eq!(cfg.model.d, ModelConfig::new(8, vec![4, 2], vec![2, 2]).d);
        assert_eq!(cfg.train.batch_size, 64);
        for bad in [
            format!("{good}bogus = 1\n"),
            good.replace("[model]\n", "[model]\nwidth = 3\n"),
            format!("{good}[model.ablation]\nno_xx = true\n"),
            good.replace("nodes = 8", "nodes = 3"),
        ] {
            let err = RunConfig::parse(&bad).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}");
        }
    }
}
