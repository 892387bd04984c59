//! Run configuration, read from TOML. Every section is optional; missing
//! fields take their defaults.

use crate::aggregator::{AggregatorConfig, TrainConfig};
use crate::artifact::sha256_hex;
use crate::encoder::{EncoderConfig, FinetuneConfig, PretrainConfig};
use crate::oracle::CostModelKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Programs whose intervals train the aggregator.
    pub train_programs: usize,
    /// Held-out programs used for estimation and adaptation.
    pub eval_programs: usize,
    /// Phase budgets are whole multiples of this many instructions.
    pub phase_unit: u64,
    /// Phase budget range, in units.
    pub min_units: u64,
    pub max_units: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig { train_programs: 8, eval_programs: 8, phase_unit: 8192, min_units: 3, max_units: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcsdConfig {
    pub train_functions: usize,
    pub variants: usize,
    /// Held-out functions; each yields one query and one pool entry.
    pub eval_functions: usize,
}

impl Default for BcsdConfig {
    fn default() -> Self {
        BcsdConfig { train_functions: 600, variants: 4, eval_functions: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Eval programs whose data is used for fine-tuning.
    pub programs: usize,
    /// Fraction of those programs' intervals used.
    pub fraction: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { programs: 2, fraction: 0.2, steps: 150, lr: 2e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { k: 8, max_iter: 300, restarts: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub interval_len: usize,
    /// Cost model supplying training CPIs.
    pub cost_model: CostModelKind,
    /// Cost model targeted by `adapt`.
    pub adapt_cost_model: CostModelKind,
    pub workloads: WorkloadConfig,
    pub bcsd: BcsdConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub aggregator: AggregatorConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub cluster: ClusterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            interval_len: 4096,
            cost_model: CostModelKind::Simple,
            adapt_cost_model: CostModelKind::Complex,
            workloads: WorkloadConfig::default(),
            bcsd: BcsdConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            aggregator: AggregatorConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            cluster: ClusterConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small shapes and budgets that exercise every stage in seconds.
    pub fn quick() -> Self {
        let mut c = RunConfig { interval_len: 512, ..RunConfig::default() };
        c.workloads = WorkloadConfig { train_programs: 3, eval_programs: 4, phase_unit: 1024, min_units: 2, max_units: 4 };
        c.bcsd = BcsdConfig { train_functions: 40, variants: 3, eval_functions: 20 };
        c.encoder = EncoderConfig { embed_sizes: [8, 2, 2, 2, 2, 2], layers: 1, ffn_width: 16, bbe_size: 8, max_len: 64 };
        c.pretrain.steps = 4;
        c.pretrain.batch_size = 8;
        c.pretrain.head_width = 8;
        c.finetune.steps = 4;
        c.finetune.batch_size = 8;
        c.aggregator = AggregatorConfig { bbe_size: 8, width: 8, heads: 2, cpi_hidden: 8, ..AggregatorConfig::default() };
        c.train.steps = 10;
        c.adapt.steps = 5;
        c.cluster = ClusterConfig { k: 3, max_iter: 100, restarts: 2 };
        c
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        if self.interval_len == 0 {
            return bad("interval_len must be at least 1".into());
        }
        let w = &self.workloads;
        if w.train_programs == 0 || w.eval_programs == 0 {
            return bad("workloads: need at least one train and one eval program".into());
        }
        if w.phase_unit == 0 || w.min_units == 0 || w.min_units > w.max_units {
            return bad("workloads: phase_unit ≥ 1 and 1 ≤ min_units ≤ max_units required".into());
        }
        if self.adapt.programs == 0 || self.adapt.programs >= w.eval_programs {
            return bad(format!("adapt.programs must be in 1..{} so that held-out programs remain", w.eval_programs));
        }
        if !(self.adapt.fraction > 0.0 && self.adapt.fraction <= 1.0) {
            return bad(format!("adapt.fraction must be in (0, 1], got {}", self.adapt.fraction));
        }
        if self.bcsd.variants < 2 || self.bcsd.train_functions < 2 || self.bcsd.eval_functions < 2 {
            return bad("bcsd: need ≥ 2 variants and ≥ 2 functions in each split".into());
        }
        self.encoder.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.aggregator.bbe_size != self.encoder.bbe_size {
            return bad(format!("aggregator.bbe_size {} must equal encoder.bbe_size {}", self.aggregator.bbe_size, self.encoder.bbe_size));
        }
        crate::aggregator::Aggregator::new(self.aggregator.clone(), 0).map_err(|e| ConfigError(e.to_string()))?;
        let lw = &self.train.weights;
        if lw.w_r < 0.0 || lw.w_c < 0.0 || lw.huber_delta <= 0.0 || lw.margin < 0.0 || lw.consistency_margin < 0.0 {
            return bad("train.weights: w_r, w_c, margins ≥ 0 and huber_delta > 0 required".into());
        }
        if self.cluster.k == 0 {
            return bad("cluster.k must be at least 1".into());
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size < 2 {
            return bad("batch sizes: pretrain ≥ 1, finetune ≥ 2".into());
        }
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Independent per-stage seed derived from the run seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}
