//! Rank selection against a LoRA parameter budget.
//!
//! *Isorank* puts the LoRA rank on every mode. *Isoparameters* pins the
//! projection, head-count and depth modes to their own sizes (3, h, L) and
//! searches the remaining ranks so the total lands near the LoRA count, with
//! equal-size modes sharing a rank and larger modes never getting a smaller
//! rank than smaller ones.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{param_count, tensor_catalog, AdapterVariant, ModeLabel, ModelDims, RankPlan, NUM_PROJECTIONS};
use crate::error::{Error, Result};
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    /// Minimize `|count − budget|`.
    Closest,
    /// Maximize `count` subject to `count ≤ budget`.
    NotExceeding,
}

impl FromStr for BudgetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "closest" => Ok(BudgetPolicy::Closest),
            "not_exceeding" => Ok(BudgetPolicy::NotExceeding),
            other => Err(Error::InvalidConfig(format!("unknown budget policy '{other}'"))),
        }
    }
}

impl fmt::Display for BudgetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BudgetPolicy::Closest => "closest",
            BudgetPolicy::NotExceeding => "not_exceeding",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanResult {
    pub variant: AdapterVariant,
    pub ranks: RankPlan,
    pub count: u64,
    pub budget: u64,
    /// Percentage of the budget in tenths of a percent, rounded half up.
    pub percent_tenths: u64,
}

impl PlanResult {
    fn new(variant: AdapterVariant, dims: &ModelDims, ranks: RankPlan, budget: u64) -> Result<Self> {
        let count = param_count(variant, dims, &ranks)?;
        Ok(Self {
            variant,
            ranks,
            count,
            budget,
            percent_tenths: percent_tenths(count, budget),
        })
    }

    pub fn percent(&self) -> f64 {
        self.percent_tenths as f64 / 10.0
    }

    /// `"56.0"`, `"100.3"`.
    pub fn percent_label(&self) -> String {
        format!("{}.{}", self.percent_tenths / 10, self.percent_tenths % 10)
    }
}

/// `round(1000 · count / budget)` with ties away from zero, in integers.
pub fn percent_tenths(count: u64, budget: u64) -> u64 {
    (2000 * count + budget) / (2 * budget)
}

/// `count / 1000` rounded half away from zero: `123_840 → 124`.
pub fn round_thousands(count: u64) -> u64 {
    (count + 500) / 1000
}

/// Trainable parameters of LoRA at `rank` on Q, K, V of every layer.
pub fn lora_budget(dims: &ModelDims, rank: usize) -> u64 {
    2 * (dims.d * rank * NUM_PROJECTIONS * dims.layers) as u64
}

/// Rank pinned by the isoparameters heuristic, if the mode has one.
pub fn pinned_rank(label: ModeLabel, dims: &ModelDims) -> Option<usize> {
    match label {
        ModeLabel::Qkv => Some(NUM_PROJECTIONS),
        ModeLabel::Heads => Some(dims.heads),
        ModeLabel::Depth => Some(dims.layers),
        _ => None,
    }
}

pub fn plan_isorank(variant: AdapterVariant, dims: &ModelDims, rank: usize) -> Result<PlanResult> {
    if rank == 0 {
        return Err(Error::InvalidRankPlan("isorank rank must be ≥ 1".into()));
    }
    dims.validate()?;
    PlanResult::new(variant, dims, RankPlan::uniform(variant, rank), lora_budget(dims, rank))
}

/// Upper bound on any searched rank.
pub fn search_bound(dims: &ModelDims) -> usize {
    2 * [dims.d, dims.head_dim(), dims.heads, NUM_PROJECTIONS, dims.layers]
        .into_iter()
        .max()
        .unwrap()
}

/// Free modes grouped by size (ascending); each group shares one rank.
fn free_groups(variant: AdapterVariant, dims: &ModelDims) -> Vec<(usize, Vec<usize>)> {
    let modes = variant.modes();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, m) in modes.iter().enumerate() {
        if pinned_rank(*m, dims).is_some() {
            continue;
        }
        let size = m.size(dims).expect("tensor modes have sizes");
        match groups.iter_mut().find(|(s, _)| *s == size) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((size, vec![i])),
        }
    }
    groups.sort_by_key(|(s, _)| *s);
    groups
}

/// Whether `ranks` obeys the isoparameters rules: pinned modes at their
/// pinned rank; among the remaining modes equal sizes share a rank and a
/// strictly larger mode never has a smaller rank.
pub fn satisfies_constraints(variant: AdapterVariant, dims: &ModelDims, ranks: &RankPlan) -> bool {
    let Ok(r) = ranks.ordered(variant) else { return false };
    let modes = variant.modes();
    let mut free = Vec::new();
    for (i, m) in modes.iter().enumerate() {
        match pinned_rank(*m, dims) {
            Some(p) if r[i] != p => return false,
            Some(_) => {}
            None => free.push((m.size(dims).unwrap(), r[i])),
        }
    }
    free.iter().all(|&(sa, ra)| {
        free.iter().all(|&(sb, rb)| match sa.cmp(&sb) {
            Ordering::Equal => ra == rb,
            Ordering::Greater => ra >= rb,
            Ordering::Less => ra <= rb,
        })
    })
}

/// Better candidate first: per `policy`, then lexicographically smaller ranks.
fn better(policy: BudgetPolicy, budget: u64, a: &(u64, Vec<usize>), b: &(u64, Vec<usize>)) -> bool {
    let key = |c: u64| match policy {
        BudgetPolicy::Closest => c.abs_diff(budget),
        // larger count is better; invert for a min-comparison
        BudgetPolicy::NotExceeding => u64::MAX - c,
    };
    (key(a.0), &a.1) < (key(b.0), &b.1)
}

pub fn plan_isoparameters(
    variant: AdapterVariant,
    dims: &ModelDims,
    lora_rank: usize,
    policy: BudgetPolicy,
) -> Result<PlanResult> {
    if !variant.is_tensor() {
        return Err(Error::Unsupported("LoRA takes --lora-rank only".into()));
    }
    if lora_rank == 0 {
        return Err(Error::InvalidRankPlan("LoRA rank must be ≥ 1".into()));
    }
    dims.validate()?;
    let budget = lora_budget(dims, lora_rank);
    let modes = variant.modes();
    let spec = &tensor_catalog(variant, dims)[0];
    let groups = free_groups(variant, dims);
    let bound = search_bound(dims);

    let mut template: Vec<usize> = modes.iter().map(|m| pinned_rank(*m, dims).unwrap_or(0)).collect();
    let count_of = |ranks: &[usize]| -> u64 {
        let core: u64 = ranks.iter().map(|&r| r as u64).product();
        let factors: u64 = spec.shape.iter().zip(ranks).map(|(&d, &r)| (d * r) as u64).sum();
        spec.multiplicity as u64 * (core + factors)
    };
    let assign = |ranks: &mut [usize], group_ranks: &[usize]| {
        for ((_, idx), &r) in groups.iter().zip(group_ranks) {
            for &i in idx {
                ranks[i] = r;
            }
        }
    };

    // Each worker owns one value of the smallest group's rank and scans the
    // rest in non-decreasing order.
    let best_per_first = parallel::map_range(bound, |first| {
        let first = first + 1;
        let mut ranks = template.clone();
        let mut best: Option<(u64, Vec<usize>)> = None;
        let mut group_ranks = vec![first; groups.len()];
        loop {
            assign(&mut ranks, &group_ranks);
            let count = count_of(&ranks);
            let admissible = policy == BudgetPolicy::Closest || count <= budget;
            if admissible {
                let cand = (count, ranks.clone());
                if best.as_ref().is_none_or(|b| better(policy, budget, &cand, b)) {
                    best = Some(cand);
                }
            }
            // advance the odometer over groups 1.., keeping ranks non-decreasing
            let mut g = groups.len();
            loop {
                if g <= 1 {
                    return best;
                }
                g -= 1;
                if group_ranks[g] < bound {
                    group_ranks[g] += 1;
                    for k in g + 1..groups.len() {
                        group_ranks[k] = group_ranks[g];
                    }
                    break;
                }
            }
        }
    });
    let best = best_per_first
        .into_iter()
        .flatten()
        .reduce(|a, b| if better(policy, budget, &b, &a) { b } else { a })
        .ok_or_else(|| Error::InvalidRankPlan(format!("no feasible {variant} plan under {policy}")))?;
    template.copy_from_slice(&best.1);
    PlanResult::new(variant, dims, RankPlan::for_modes(variant, &template)?, budget)
}

/// Fixed isoparameters ranks for the ViT-Base geometry at LoRA rank 4.
pub fn preset_ranks(variant: AdapterVariant) -> Result<RankPlan> {
    let ranks: &[usize] = match variant {
        AdapterVariant::Lora => {
            return Err(Error::Unsupported("LoRA has no isoparameters preset".into()))
        }
        AdapterVariant::Att => &[7, 4, 12],
        AdapterVariant::Qkv => &[11, 11, 3],
        AdapterVariant::Depth => &[37, 37, 12],
        AdapterVariant::AttQkv => &[16, 9, 12, 3],
        AdapterVariant::AttDepth => &[23, 16, 12, 12],
        AdapterVariant::QkvDepth => &[60, 60, 3, 12],
        AdapterVariant::AttQkvDepth => &[28, 16, 12, 3, 12],
    };
    RankPlan::for_modes(variant, ranks)
}

/// Preset ranks evaluated against the LoRA budget at `lora_rank`.
pub fn plan_preset(variant: AdapterVariant, dims: &ModelDims, lora_rank: usize) -> Result<PlanResult> {
    PlanResult::new(variant, dims, preset_ranks(variant)?, lora_budget(dims, lora_rank))
}
