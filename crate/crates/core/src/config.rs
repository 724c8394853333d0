use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Component switches for ablation runs. All `false` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Region mixers use a shared temporal mixing MLP instead of generated weights.
    pub no_am: bool,
    /// No temporal aggregation: every block keeps the input length (p = 1).
    pub no_th: bool,
    /// No region scales: the cascade reduces to the node mixer (K = 0).
    pub no_sh: bool,
    /// Temporal propagation replaced by the first pyramid level.
    pub no_tp: bool,
    /// Block output is the temporal aggregation output alone.
    pub no_sp: bool,
}

impl Ablation {
    pub const VARIANTS: [(&'static str, Ablation); 5] = [
        ("w/o AM", Ablation { no_am: true, no_th: false, no_sh: false, no_tp: false, no_sp: false }),
        ("w/o TH", Ablation { no_am: false, no_th: true, no_sh: false, no_tp: false, no_sp: false }),
        ("w/o SH", Ablation { no_am: false, no_th: false, no_sh: true, no_tp: false, no_sp: false }),
        ("w/o TP", Ablation { no_am: false, no_th: false, no_sh: false, no_tp: true, no_sp: false }),
        ("w/o SP", Ablation { no_am: false, no_th: false, no_sh: false, no_tp: false, no_sp: true }),
    ];
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub nodes: usize,
    #[serde(default = "default_steps")]
    pub input_steps: usize,
    #[serde(default = "default_steps")]
    pub output_steps: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Region counts per scale, strictly decreasing and below `nodes`.
    pub regions: Vec<usize>,
    /// Parameter pool size per scale.
    pub pool_sizes: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_interval")]
    pub interval_minutes: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

fn default_steps() -> usize {
    12
}
fn default_d() -> usize {
    64
}
fn default_h() -> usize {
    128
}
fn default_p() -> usize {
    2
}
fn default_blocks() -> usize {
    4
}
fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.1
}
fn default_interval() -> usize {
    15
}

impl ModelConfig {
    /// Large-scale defaults (`d = 64`, `h = 128`, `p = 2`, `L = 4`, 12 in / 12 out).
    pub fn new(nodes: usize, regions: Vec<usize>, pool_sizes: Vec<usize>) -> Self {
        ModelConfig {
            nodes,
            input_steps: default_steps(),
            output_steps: default_steps(),
            d: default_d(),
            h: default_h(),
            p: default_p(),
            blocks: default_blocks(),
            regions,
            pool_sizes,
            alpha: default_alpha(),
            beta: default_beta(),
            interval_minutes: default_interval(),
            ablation: Ablation::default(),
        }
    }

    /// Small configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 4,
            h: 8,
            ..ModelConfig::new(8, vec![4, 2], vec![2, 2])
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("input_steps", self.input_steps),
            ("output_steps", self.output_steps),
            ("d", self.d),
            ("h", self.h),
            ("p", self.p),
            ("blocks", self.blocks),
            ("interval_minutes", self.interval_minutes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.p < 2 && !self.ablation.no_th {
            return Err(Error::Config("window length p must be at least 2".into()));
        }
        if 1440 % self.interval_minutes != 0 {
            return Err(Error::Config(format!(
                "interval of {} minutes does not divide a day",
                self.interval_minutes
            )));
        }
        if self.regions.len() != self.pool_sizes.len() {
            return Err(Error::Config(format!(
                "{} region scales but {} pool sizes",
                self.regions.len(),
                self.pool_sizes.len()
            )));
        }
        let mut prev = self.nodes;
        for &s in &self.regions {
            if s == 0 || s >= prev {
                return Err(Error::Config(format!(
                    "region counts {:?} must be positive, strictly decreasing and below {} nodes",
                    self.regions, self.nodes
                )));
            }
            prev = s;
        }
        if self.pool_sizes.contains(&0) {
            return Err(Error::Config("pool sizes must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Window length actually used by the temporal aggregation mixers.
    pub fn effective_p(&self) -> usize {
        if self.ablation.no_th {
            1
        } else {
            self.p
        }
    }

    /// Region scales actually instantiated.
    pub fn effective_regions(&self) -> &[usize] {
        if self.ablation.no_sh {
            &[]
        } else {
            &self.regions
        }
    }

    pub fn effective_pools(&self) -> &[usize] {
        if self.ablation.no_sh {
            &[]
        } else {
            &self.pool_sizes
        }
    }

    /// `[T_0, T_1, ..., T_L]` with `T_l = ceil(T_{l-1} / p)`.
    pub fn temporal_lengths(&self) -> Vec<usize> {
        temporal_lengths(self.input_steps, self.effective_p(), self.blocks)
    }

    /// Minute-of-day embedding slots.
    pub fn day_slots(&self) -> usize {
        1440 / self.interval_minutes
    }
}

pub fn temporal_lengths(t0: usize, p: usize, blocks: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(blocks + 1);
    out.push(t0);
    for _ in 0..blocks {
        let last = *out.last().expect("non-empty");
        out.push(last.div_ceil(p));
    }
    out
}
