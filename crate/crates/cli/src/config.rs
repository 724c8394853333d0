//! Run configuration file.
//!
//! ```toml
//! seed = 0
//!
//! [model]            # every ModelConfig field; nodes must match the data
//! nodes = 64
//! regions = [16, 4]
//! pool_sizes = [4, 2]
//!
//! [model.ablation]   # optional
//! no_am = false
//!
//! [data]
//! path = "traffic.hstd"          # HSTD1 or CSV
//! aggregate = 1
//! static_embeddings = "static.csv"  # optional, [nodes, d] rows
//! adjacency = "traffic.adj.csv"     # optional, spectral fallback source
//! ratios = [0.6, 0.2, 0.2]
//! per_node = false
//! seasonal = false
//!
//! [train]
//! epochs = 30
//! patience = 5
//! batch_size = 64
//! lr = 1e-3
//! clip = 5.0                      # 0 disables
//! stride = 1
//! checkpoint = "best.ckpt"
//! log = "train.tsv"
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use hstmixer::data::SplitConfig;
use hstmixer::trainer::{AdamConfig, TrainConfig};
use hstmixer::ModelConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    #[serde(default = "one")]
    pub aggregate: usize,
    pub static_embeddings: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default)]
    pub per_node: bool,
    #[serde(default)]
    pub seasonal: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub stride: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn one() -> usize {
    1
}

fn default_ratios() -> [f64; 3] {
    SplitConfig::default().ratios
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            clip: t.adam.clip.unwrap_or(0.0),
            stride: t.stride,
            checkpoint: "best.ckpt".into(),
            log: "train.tsv".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.model.validate()?;
        let t = &cfg.train;
        if t.batch_size == 0 || t.stride == 0 {
            return Err(CliError::Usage("config: batch_size and stride must be positive".into()));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0 && t.clip.is_finite() && t.clip >= 0.0) {
            return Err(CliError::Usage("config: lr and clip must be finite and non-negative".into()));
        }
        if cfg.data.aggregate == 0 {
            return Err(CliError::Usage("config: aggregate must be positive".into()));
        }
        Ok(cfg)
    }

    /// Reads and validates `path`, resolving relative paths inside it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.path);
        cfg.data.static_embeddings.as_mut().map(resolve);
        cfg.data.adjacency.as_mut().map(resolve);
        resolve(&mut cfg.train.checkpoint);
        resolve(&mut cfg.train.log);
        Ok(cfg)
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            ratios: self.data.ratios,
            per_node: self.data.per_node,
            seasonal: self.data.seasonal,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                clip: (t.clip > 0.0).then_some(t.clip),
                ..AdamConfig::default()
            },
            seed: self.seed,
            stride: t.stride,
            checkpoint: Some(t.checkpoint.clone()),
            log: Some(t.log.clone()),
        }
    }
}
