//! Experiment configuration documents.
//!
//! ```json
//! {
//!   "backbone": { "d": 32, "h": 4, "L": 3, "vocab": 8, "seq_len": 16, "seed": 0 },
//!   "adapter": { "variant": "QKV_Depth", "plan": { "isorank": 4 } },
//!   "train": { "total_steps": 500 },
//!   "task": { "generator": "majority-token", "seed": 100 }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use tenslora_core::adapters::{init_adapter, AdapterVariant, ModelDims, RankPlan, TensLoraAdapter, DEFAULT_ALPHA};
use tenslora_core::planner::{plan_isoparameters, plan_isorank, plan_preset, BudgetPolicy};
use tenslora_core::testbed::{AdamWParams, BackboneConfig, SyntheticTask, TaskKind, TrainConfig, TransformerBackbone};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneSection,
    pub adapter: AdapterSection,
    #[serde(default)]
    pub train: TrainSection,
    pub task: TaskSection,
}

fn default_classes() -> usize {
    2
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub d: usize,
    pub h: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub vocab: usize,
    pub seq_len: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanSpec {
    Isorank(usize),
    Isoparameters { policy: BudgetPolicy, lora_rank: usize },
    Preset { lora_rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub variant: AdapterVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<RankPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSpec>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Training knobs; unset fields take the testbed defaults and the warmup
/// defaults to 10% of `total_steps`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adamw: Option<AdamWParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    MajorityToken,
    PairwiseMatch,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_a: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_b: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub generator: Generator,
    #[serde(default)]
    pub params: TaskParams,
    #[serde(default)]
    pub seed: u64,
}

/// Everything a command needs, built from an [`ExperimentConfig`].
#[derive(Clone, Debug)]
pub struct Resolved {
    pub backbone: BackboneConfig,
    pub ranks: RankPlan,
    pub task: SyntheticTask,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text).map_err(CliError::json(path))
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn dims(&self) -> CliResult<ModelDims> {
        let b = &self.backbone;
        Ok(ModelDims::new(b.d, b.h, b.layers)?)
    }

    fn ranks(&self, dims: &ModelDims) -> CliResult<RankPlan> {
        let variant = self.adapter.variant;
        let ranks = match (&self.adapter.ranks, &self.adapter.plan) {
            (Some(r), None) => r.clone(),
            (None, Some(PlanSpec::Isorank(r))) => plan_isorank(variant, dims, *r)?.ranks,
            (None, Some(PlanSpec::Isoparameters { policy, lora_rank })) => {
                plan_isoparameters(variant, dims, *lora_rank, *policy)?.ranks
            }
            (None, Some(PlanSpec::Preset { lora_rank })) => plan_preset(variant, dims, *lora_rank)?.ranks,
            _ => {
                return Err(CliError::Core(tenslora_core::Error::InvalidConfig(
                    "adapter needs exactly one of \"ranks\" or \"plan\"".into(),
                )))
            }
        };
        ranks.validate(variant)?;
        Ok(ranks)
    }

    fn task(&self) -> CliResult<SyntheticTask> {
        let (b, t) = (&self.backbone, &self.task);
        let p = &t.params;
        let kind = match t.generator {
            Generator::MajorityToken => {
                if p.first.is_some() || p.second.is_some() {
                    return Err(invalid("majority-token takes token_a and token_b only"));
                }
                TaskKind::MajorityToken {
                    token_a: p.token_a.unwrap_or(0),
                    token_b: p.token_b.unwrap_or(1),
                }
            }
            Generator::PairwiseMatch => {
                if p.token_a.is_some() || p.token_b.is_some() {
                    return Err(invalid("pairwise-match takes first and second only"));
                }
                TaskKind::PairwiseMatch {
                    first: p.first.unwrap_or(0),
                    second: p.second.unwrap_or(b.seq_len.saturating_sub(1)),
                }
            }
        };
        let task = SyntheticTask {
            kind,
            vocab: b.vocab,
            seq_len: b.seq_len,
            seed: t.seed,
        };
        task.validate()?;
        Ok(task)
    }

    fn train(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        let d = TrainConfig::default();
        let total = t.total_steps.unwrap_or(d.total_steps);
        let cfg = TrainConfig {
            peak_lr: t.peak_lr.unwrap_or(d.peak_lr),
            min_lr: t.min_lr.unwrap_or(d.min_lr),
            warmup_steps: t.warmup_steps.unwrap_or(total / 10),
            total_steps: total,
            batch: t.batch.unwrap_or(d.batch),
            seed: t.seed,
            alpha: self.adapter.alpha,
            train_size: t.train_size.unwrap_or(d.train_size),
            adamw: t.adamw.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self) -> CliResult<Resolved> {
        let dims = self.dims()?;
        let b = &self.backbone;
        let backbone = BackboneConfig {
            dims,
            vocab: b.vocab,
            seq_len: b.seq_len,
            mlp_ratio: b.mlp_ratio,
            classes: b.classes,
            seed: b.seed,
        };
        backbone.validate()?;
        let task = self.task()?;
        if task.classes() != backbone.classes {
            return Err(invalid(&format!(
                "task {:?} has {} classes but the backbone declares {}",
                self.task.generator,
                task.classes(),
                backbone.classes
            )));
        }
        if !self.adapter.alpha.is_finite() {
            return Err(invalid("adapter alpha must be finite"));
        }
        Ok(Resolved {
            backbone,
            ranks: self.ranks(&dims)?,
            task,
            train: self.train()?,
        })
    }
}

impl Resolved {
    pub fn build_backbone(&self) -> CliResult<TransformerBackbone> {
        Ok(TransformerBackbone::new(self.backbone.clone())?)
    }

    pub fn init_adapter(&self, config: &ExperimentConfig) -> CliResult<TensLoraAdapter> {
        Ok(init_adapter(
            config.adapter.variant,
            self.backbone.dims,
            self.ranks.clone(),
            config.adapter.alpha,
            config.adapter.seed,
        )?)
    }
}

fn invalid(msg: &str) -> CliError {
    CliError::Core(tenslora_core::Error::InvalidConfig(msg.to_string()))
}
