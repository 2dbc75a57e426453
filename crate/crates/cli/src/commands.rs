use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use tenslora_core::adapters::{AdapterVariant, ModelDims};
use tenslora_core::autograd::{BackwardFault, GradCheckOptions, Sampling};
use tenslora_core::planner::{plan_isoparameters, plan_isorank, BudgetPolicy};
use tenslora_core::testbed::{audit_gradients, evaluate, make_task, make_task_range, merge, train_adapter};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::table::{build_rows, render_csv, render_markdown, IsoparametersSource};

/// Relative-error threshold of the gradient audit.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "tenslora", version, about = "Tucker-factorized tensor adapters: counts, planning, training and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the parameter-count table.
    Params(ParamsArgs),
    /// Choose ranks for one variant and print the plan as JSON.
    Plan(PlanArgs),
    /// Compare adapter gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write an untrained checkpoint.
    Init(ConfigOut),
    /// Train an adapter and the classifier head.
    Train(ConfigOut),
    /// Fold a trained adapter into the backbone weights.
    Merge(MergeArgs),
    /// Report accuracy of a checkpoint on its task.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct DimsArgs {
    /// Named geometry: vit-base (768, 12 heads, 12 layers) or tiny (8, 2, 3).
    #[arg(long)]
    pub dims: Option<String>,
    /// Hidden size.
    #[arg(long)]
    pub d: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub h: Option<usize>,
    /// Layers.
    #[arg(long = "L")]
    pub layers: Option<usize>,
}

impl DimsArgs {
    pub fn resolve(&self) -> CliResult<ModelDims> {
        let explicit = [self.d, self.h, self.layers];
        match (&self.dims, explicit) {
            (Some(_), e) if e.iter().any(Option::is_some) => {
                Err(CliError::Usage("use either --dims or --d/--h/--L, not both".into()))
            }
            (Some(alias), _) => dims_alias(alias),
            (None, [Some(d), Some(h), Some(l)]) => Ok(ModelDims::new(d, h, l)?),
            (None, [None, None, None]) => Ok(ModelDims::vit_base()),
            (None, _) => Err(CliError::Usage("--d, --h and --L must be given together".into())),
        }
    }
}

pub fn dims_alias(alias: &str) -> CliResult<ModelDims> {
    match alias.to_ascii_lowercase().as_str() {
        "vit-base" | "vit_base" | "roberta-base" => Ok(ModelDims::vit_base()),
        "tiny" => Ok(ModelDims::new(8, 2, 3)?),
        other => Err(CliError::Usage(format!(
            "unknown dims alias '{other}' (known: vit-base, roberta-base, tiny)"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Md,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum IsoSource {
    Preset,
    Closest,
    NotExceeding,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub dims: DimsArgs,
    #[arg(long, default_value_t = 4)]
    pub lora_rank: usize,
    #[arg(long, value_enum, default_value_t = TableFormat::Md)]
    pub format: TableFormat,
    /// Where the isoparameters rows get their ranks.
    #[arg(long, value_enum, default_value_t = IsoSource::Preset)]
    pub isoparameters: IsoSource,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub variant: String,
    /// Isoparameters policy; without it the plan is isorank.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub lora_rank: usize,
    #[command(flatten)]
    pub dims: DimsArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Standard deviation of the noise added to every adapter parameter.
    #[arg(long, default_value_t = 0.1)]
    pub perturb: f64,
    /// Examples in the audited batch.
    #[arg(long, default_value_t = 4)]
    pub examples: usize,
    /// Audit at most this many coordinates per tensor (all by default).
    #[arg(long)]
    pub per_param: Option<usize>,
    /// Negative control: corrupt the matmul backward rule.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct ConfigOut {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Heldout)]
    pub split: Split,
    /// Held-out examples, drawn after the training range.
    #[arg(long, default_value_t = 1024)]
    pub count: usize,
}

fn parse_variant(s: &str) -> CliResult<AdapterVariant> {
    s.parse().map_err(|e: tenslora_core::Error| CliError::Usage(e.to_string()))
}

fn parse_policy(s: &str) -> CliResult<BudgetPolicy> {
    s.parse().map_err(|e: tenslora_core::Error| CliError::Usage(e.to_string()))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable report"));
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Params(a) => params(a),
        Command::Plan(a) => plan(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Init(a) => init(a),
        Command::Train(a) => train(a),
        Command::Merge(a) => merge_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

fn params(a: ParamsArgs) -> CliResult<()> {
    let dims = a.dims.resolve()?;
    if a.lora_rank == 0 {
        return Err(CliError::Usage("--lora-rank must be ≥ 1".into()));
    }
    let iso = match a.isoparameters {
        IsoSource::Preset => IsoparametersSource::Preset,
        IsoSource::Closest => IsoparametersSource::Search(BudgetPolicy::Closest),
        IsoSource::NotExceeding => IsoparametersSource::Search(BudgetPolicy::NotExceeding),
    };
    let rows = build_rows(&dims, a.lora_rank, iso)?;
    match a.format {
        TableFormat::Md => print!("{}", render_markdown(&rows)),
        TableFormat::Csv => print!("{}", render_csv(&rows)?),
    }
    Ok(())
}

fn plan(a: PlanArgs) -> CliResult<()> {
    let variant = parse_variant(&a.variant)?;
    let dims = a.dims.resolve()?;
    let (policy, result) = match &a.policy {
        Some(p) => {
            let policy = parse_policy(p)?;
            (Some(policy), plan_isoparameters(variant, &dims, a.lora_rank, policy)?)
        }
        None => (None, plan_isorank(variant, &dims, a.lora_rank)?),
    };
    print_json(&json!({
        "variant": result.variant,
        "regime": if policy.is_some() { "isoparameters" } else { "isorank" },
        "policy": policy,
        "ranks": result.ranks,
        "ranks_in_mode_order": result.ranks.ordered(variant)?,
        "count": result.count,
        "budget": result.budget,
        "percent": result.percent_label(),
    }));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let config = ExperimentConfig::load(&a.config)?;
    let resolved = config.resolve()?;
    if !(a.perturb >= 0.0 && a.perturb.is_finite()) {
        return Err(CliError::Usage("--perturb must be a finite non-negative number".into()));
    }
    if a.examples == 0 {
        return Err(CliError::Usage("--examples must be ≥ 1".into()));
    }
    let backbone = resolved.build_backbone()?;
    let adapter = resolved
        .init_adapter(&config)?
        .perturbed(a.perturb, config.adapter.seed ^ 0x5eed);
    let data = make_task(&resolved.task, a.examples)?;
    let options = GradCheckOptions {
        sampling: match a.per_param {
            Some(k) => Sampling::Random {
                per_param: k,
                seed: config.adapter.seed,
            },
            None => Sampling::All,
        },
        fault: a.corrupt_backward.then_some(BackwardFault::MatMulRhs),
        ..GradCheckOptions::default()
    };
    let report = audit_gradients(&backbone, &adapter, &data, options)?;
    let names = adapter.param_names();
    let passed = report.passes(GRADCHECK_TOLERANCE);
    print_json(&json!({
        "variant": adapter.variant,
        "ranks": adapter.ranks,
        "perturb": a.perturb,
        "step": options.step,
        "checked": report.checked,
        "max_rel_error": report.max_rel_error,
        "worst": report.worst.map(|(p, c)| json!({"param": names[p], "index": c})),
        "loss": report.loss,
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": passed,
    }));
    if passed {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed: max relative error {:.3e} ≥ {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

fn fresh_checkpoint(config_path: &Path) -> CliResult<(ExperimentConfig, crate::config::Resolved, Checkpoint)> {
    let config = ExperimentConfig::load(config_path)?;
    let resolved = config.resolve()?;
    let checkpoint = Checkpoint {
        backbone: resolved.build_backbone()?,
        adapter: Some(resolved.init_adapter(&config)?),
        config: Some(config.clone()),
    };
    Ok((config, resolved, checkpoint))
}

fn init(a: ConfigOut) -> CliResult<()> {
    let (_, _, checkpoint) = fresh_checkpoint(&a.config)?;
    let manifest = checkpoint.save(&a.out)?;
    println!("wrote {} tensors to {}", manifest.tensors.len(), a.out.display());
    Ok(())
}

pub const LOG_FILE: &str = "log.csv";
pub const RUN_FILE: &str = "run.json";

fn train(a: ConfigOut) -> CliResult<()> {
    let (_, resolved, mut checkpoint) = fresh_checkpoint(&a.config)?;
    let before = checkpoint.backbone.frozen_checksum();
    let log = train_adapter(
        &mut checkpoint.backbone,
        checkpoint.adapter.as_mut(),
        &resolved.task,
        &resolved.train,
    )?;
    let after = checkpoint.backbone.frozen_checksum();
    if before != after {
        return Err(CliError::Verification("frozen backbone weights changed during training".into()));
    }
    checkpoint.save(&a.out)?;

    let log_path = a.out.join(LOG_FILE);
    let mut w = csv::Writer::from_path(&log_path)?;
    for r in &log.records {
        w.serialize(r)?;
    }
    w.flush().map_err(CliError::io(&log_path))?;

    let run = json!({
        "train": log.config,
        "train_accuracy": log.train_accuracy,
        "final_loss": log.records.last().map(|r| r.loss),
        "frozen_checksum": after,
    });
    let run_path = a.out.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&run).map_err(CliError::json(&run_path))?;
    fs::write(&run_path, text + "\n").map_err(CliError::io(&run_path))?;
    println!(
        "trained {} steps: final loss {:.6}, train accuracy {:.4}; wrote {}",
        log.records.len(),
        log.records.last().map_or(f64::NAN, |r| r.loss),
        log.train_accuracy,
        a.out.display()
    );
    Ok(())
}

fn merge_cmd(a: MergeArgs) -> CliResult<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let Some(adapter) = &checkpoint.adapter else {
        return Err(CliError::Verification(format!(
            "{} holds no adapter to merge",
            a.checkpoint.display()
        )));
    };
    let merged = Checkpoint {
        backbone: merge(&checkpoint.backbone, adapter)?,
        adapter: None,
        config: checkpoint.config.clone(),
    };
    merged.save(&a.out)?;
    println!("merged {} into {}", adapter.variant, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let Some(config) = &checkpoint.config else {
        return Err(CliError::Verification("checkpoint carries no experiment config".into()));
    };
    let resolved = config.resolve()?;
    if a.count == 0 {
        return Err(CliError::Usage("--count must be ≥ 1".into()));
    }
    let data = match a.split {
        Split::Train => make_task(&resolved.task, resolved.train.train_size)?,
        Split::Heldout => make_task_range(&resolved.task, resolved.train.train_size, a.count)?,
    };
    let accuracy = evaluate(&checkpoint.backbone, checkpoint.adapter.as_ref(), &data)?;
    print_json(&json!({
        "split": match a.split { Split::Train => "train", Split::Heldout => "heldout" },
        "examples": data.len(),
        "accuracy": accuracy,
    }));
    Ok(())
}
