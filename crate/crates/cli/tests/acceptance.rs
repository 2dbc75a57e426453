//! Acceptance criteria 1 to 8. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits nonzero if any fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use tenslora_core::adapters::{
    init_adapter, param_count, AdapterVariant, ModeLabel, ModelDims, RankPlan, TensLoraAdapter,
};
use tenslora_core::autograd::GradCheckOptions;
use tenslora_core::planner::{
    lora_budget, plan_isoparameters, plan_isorank, preset_ranks, round_thousands, search_bound, BudgetPolicy,
};
use tenslora_core::tensor::DenseTensor;
use tenslora_core::testbed::{
    audit_gradients, evaluate, forward, make_task, make_task_range, merge, train_adapter, BackboneConfig,
    SyntheticTask, TrainConfig, TransformerBackbone,
};
use tenslora_core::tucker::{hosvd, tucker_reconstruct, tucker_slice};
use tenslora_core::TuckerFactors;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// (variant, regime, ranks, count, k, percent) as the table must print them.
const TABLE: [(&str, &str, &str, &str, &str, &str); 15] = [
    ("LoRA", "-", "(4)", "221,184", "221k", "100.0%"),
    ("Att", "isorank", "(4,4,4)", "123,840", "124k", "56.0%"),
    ("QKV", "isorank", "(4,4,4)", "74,640", "75k", "33.7%"),
    ("Depth", "isorank", "(4,4,4)", "18,768", "19k", "8.5%"),
    ("Att_QKV", "isorank", "(4,4,4,4)", "43,728", "44k", "19.8%"),
    ("Att_Depth", "isorank", "(4,4,4,4)", "11,040", "11k", "5.0%"),
    ("QKV_Depth", "isorank", "(4,4,4,4)", "6,460", "6k", "2.9%"),
    ("Att_QKV_Depth", "isorank", "(4,4,4,4,4)", "4,460", "4k", "2.0%"),
    ("Att", "isoparameters", "(7,4,12)", "220,032", "220k", "99.5%"),
    ("QKV", "isoparameters", "(11,11,3)", "207,216", "207k", "93.7%"),
    ("Depth", "isoparameters", "(37,37,12)", "220,212", "220k", "99.6%"),
    ("Att_QKV", "isoparameters", "(16,9,12,3)", "218,412", "218k", "98.7%"),
    ("Att_Depth", "isoparameters", "(23,16,12,12)", "215,904", "216k", "97.6%"),
    ("QKV_Depth", "isoparameters", "(60,60,3,12)", "221,913", "222k", "100.3%"),
    ("Att_QKV_Depth", "isoparameters", "(28,16,12,3,12)", "216,361", "216k", "97.8%"),
];

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_tenslora"))
        .args(["params", "--dims", "vit-base", "--lora-rank", "4"])
        .output()
        .map_err(|e| format!("could not run tenslora: {e}"))?;
    let elapsed = start.elapsed();
    ensure(out.status.success(), || format!("exit status {}", out.status))?;
    let text = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(2)
        .map(|l| l.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect())
        .collect();
    ensure(rows.len() == 15, || format!("{} rows, expected 15", rows.len()))?;
    for (row, want) in rows.iter().zip(TABLE) {
        let want = [want.0, want.1, want.2, want.3, want.4, want.5];
        ensure(row.as_slice() == want, || format!("row {row:?}, expected {want:?}"))?;
    }
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("15 rows exact, {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

fn criterion_2() -> Outcome {
    let mut checked = 0;
    for dims in [ModelDims::vit_base(), ModelDims::new(8, 2, 3).unwrap()] {
        for variant in AdapterVariant::ALL {
            let mut plans: Vec<RankPlan> = [1, 2, 4].iter().map(|&r| RankPlan::uniform(variant, r)).collect();
            if variant.is_tensor() {
                plans.push(preset_ranks(variant).map_err(|e| e.to_string())?);
            }
            for plan in plans {
                let count = param_count(variant, &dims, &plan).map_err(|e| e.to_string())?;
                let adapter = init_adapter(variant, dims, plan.clone(), 4.0, 0).map_err(|e| e.to_string())?;
                let enumerated: u64 = adapter.params().iter().map(|p| p.len() as u64).sum();
                ensure(count == enumerated, || {
                    format!("{variant} {:?} at {dims:?}: formula {count}, enumerated {enumerated}", plan)
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} configurations exact"))
}

fn random_factors(shape: &[usize], ranks: &[usize], seed: u64) -> TuckerFactors {
    TuckerFactors {
        core: DenseTensor::random_normal(ranks, seed),
        factors: shape
            .iter()
            .zip(ranks)
            .enumerate()
            .map(|(m, (&n, &r))| DenseTensor::random_normal(&[n, r], seed * 31 + m as u64 + 1))
            .collect(),
    }
}

fn criterion_3() -> Outcome {
    let e = |e: tenslora_core::Error| e.to_string();
    let shapes: [&[usize]; 5] = [&[7], &[6, 5], &[6, 5, 4], &[6, 5, 4, 3], &[6, 5, 4, 3, 2]];
    let mut worst_hosvd: f64 = 0.0;
    for (i, shape) in shapes.iter().enumerate() {
        for trial in 0..3u64 {
            let t = DenseTensor::random_normal(shape, 1000 + 10 * i as u64 + trial);
            let back = tucker_reconstruct(&hosvd(&t, shape).map_err(e)?).map_err(e)?;
            let rel = back.sub(&t).map_err(e)?.frobenius_norm() / t.frobenius_norm();
            worst_hosvd = worst_hosvd.max(rel);
        }
    }
    ensure(worst_hosvd < 1e-10, || format!("HOSVD relative error {worst_hosvd:e}"))?;

    let mut worst_slice: f64 = 0.0;
    for order in 1..=5usize {
        for inst in 0..100u64 {
            let seed = 7919 * order as u64 + inst;
            let shape: Vec<usize> = (0..order).map(|m| 2 + ((seed as usize + 3 * m) % 4)).collect();
            let ranks: Vec<usize> = (0..order).map(|m| 1 + ((seed as usize + m) % 3)).collect();
            let f = random_factors(&shape, &ranks, seed);
            let full = tucker_reconstruct(&f).map_err(e)?;
            let fixed: Vec<(usize, usize)> = (0..order)
                .filter(|m| (seed >> m) & 1 == 1)
                .map(|m| (m, (seed as usize / 5 + m) % shape[m]))
                .collect();
            let slice = tucker_slice(&f, &fixed).map_err(e)?;
            let oracle = full.index_modes(&fixed).map_err(e)?;
            worst_slice = worst_slice.max(slice.max_abs_diff(&oracle));
        }
    }
    ensure(worst_slice < 1e-12, || format!("slice error {worst_slice:e}"))?;
    Ok(format!("HOSVD rel err {worst_hosvd:.1e} (< 1e-10), slice err {worst_slice:.1e} (< 1e-12) over 500 instances"))
}

fn audit_backbone() -> TransformerBackbone {
    TransformerBackbone::new(BackboneConfig {
        dims: ModelDims::new(16, 2, 2).unwrap(),
        vocab: 8,
        seq_len: 6,
        mlp_ratio: 4,
        classes: 2,
        seed: 5,
    })
    .unwrap()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let backbone = audit_backbone();
    let dims = backbone.config.dims;
    let data = make_task(&SyntheticTask::majority(8, 6, 1), 4).map_err(|e| e.to_string())?;
    let mut worst: (f64, &str) = (0.0, "");
    let mut checked = 0;
    for variant in AdapterVariant::ALL {
        let adapter = init_adapter(variant, dims, RankPlan::uniform(variant, 2), 4.0, 3)
            .map_err(|e| e.to_string())?
            .perturbed(0.1, 11);
        let report = audit_gradients(&backbone, &adapter, &data, GradCheckOptions::default())
            .map_err(|e| e.to_string())?;
        ensure(report.max_rel_error < 1e-5, || {
            format!("{variant}: max relative error {:e} at {:?}", report.max_rel_error, report.worst)
        })?;
        checked += report.checked;
        if report.max_rel_error >= worst.0 {
            worst = (report.max_rel_error, variant.name());
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "8 variants, {checked} coordinates, worst {:.1e} ({}), {:.1} s",
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

fn criterion_5() -> Outcome {
    let backbone = audit_backbone();
    let dims = backbone.config.dims;
    let tokens: Vec<Vec<usize>> = make_task(&SyntheticTask::majority(8, 6, 2), 16)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|e| e.tokens)
        .collect();
    let plain = forward(&backbone, None, &tokens).map_err(|e| e.to_string())?;
    for variant in AdapterVariant::ALL {
        let adapter = init_adapter(variant, dims, RankPlan::uniform(variant, 3), 4.0, 8).map_err(|e| e.to_string())?;
        let with = forward(&backbone, Some(&adapter), &tokens).map_err(|e| e.to_string())?;
        let diff = with.max_abs_diff(&plain);
        ensure(diff == 0.0, || format!("{variant}: max abs diff {diff:e}"))?;
    }
    Ok("8 variants, max abs diff exactly 0".into())
}

fn desk_backbone() -> TransformerBackbone {
    TransformerBackbone::new(BackboneConfig {
        dims: ModelDims::new(32, 4, 3).unwrap(),
        vocab: 8,
        seq_len: 16,
        mlp_ratio: 4,
        classes: 2,
        seed: 0,
    })
    .unwrap()
}

fn qkv_depth_isorank4(dims: ModelDims) -> TensLoraAdapter {
    let plan = plan_isorank(AdapterVariant::QkvDepth, &dims, 4).unwrap();
    init_adapter(AdapterVariant::QkvDepth, dims, plan.ranks, 4.0, 0).unwrap()
}

fn criterion_6() -> Outcome {
    let e = |e: tenslora_core::Error| e.to_string();
    let mut backbone = desk_backbone();
    let mut adapter = qkv_depth_isorank4(backbone.config.dims);
    let task = SyntheticTask::majority(8, 16, 100);
    let cfg = TrainConfig::with_steps(200);
    train_adapter(&mut backbone, Some(&mut adapter), &task, &cfg).map_err(e)?;
    let merged = merge(&backbone, &adapter).map_err(e)?;
    let heldout = make_task_range(&task, cfg.train_size, 512).map_err(e)?;
    let tokens: Vec<Vec<usize>> = heldout.iter().take(64).map(|x| x.tokens.clone()).collect();
    let dynamic = forward(&backbone, Some(&adapter), &tokens).map_err(e)?;
    let folded = forward(&merged, None, &tokens).map_err(e)?;
    let diff = dynamic.max_abs_diff(&folded);
    ensure(diff < 1e-9, || format!("logits differ by {diff:e}"))?;
    let acc_dynamic = evaluate(&backbone, Some(&adapter), &heldout).map_err(e)?;
    let acc_merged = evaluate(&merged, None, &heldout).map_err(e)?;
    ensure(acc_dynamic == acc_merged, || format!("accuracy {acc_dynamic} vs {acc_merged}"))?;
    Ok(format!("max abs diff {diff:.1e} (< 1e-9), held-out accuracy {acc_dynamic:.4} both ways"))
}

fn criterion_7() -> Outcome {
    let e = |e: tenslora_core::Error| e.to_string();
    let start = Instant::now();
    let mut backbone = desk_backbone();
    let mut adapter = qkv_depth_isorank4(backbone.config.dims);
    let task = SyntheticTask::majority(8, 16, 100);
    let cfg = TrainConfig::with_steps(500);
    let train_set = make_task(&task, cfg.train_size).map_err(e)?;
    let initial = evaluate(&backbone, Some(&adapter), &train_set).map_err(e)?;
    let before = backbone.frozen_checksum();
    let log = train_adapter(&mut backbone, Some(&mut adapter), &task, &cfg).map_err(e)?;
    let elapsed = start.elapsed();
    ensure(log.records.len() == 500, || format!("{} steps logged", log.records.len()))?;
    ensure(log.train_accuracy >= 0.95, || format!("train accuracy {}", log.train_accuracy))?;
    ensure(backbone.frozen_checksum() == before, || "frozen backbone changed".into())?;
    let schedule = cfg.schedule();
    ensure(schedule.lr(0) == 0.0, || format!("lr(0) = {:e}", schedule.lr(0)))?;
    ensure(schedule.lr(cfg.warmup_steps) == 1e-3, || format!("peak lr {:e}", schedule.lr(cfg.warmup_steps)))?;
    let peak = log.records.iter().map(|r| r.lr).fold(0.0, f64::max);
    let last = log.records.last().map(|r| r.lr);
    ensure(peak == 1e-3, || format!("largest logged lr {peak:e}"))?;
    ensure(last == Some(1e-6), || format!("final lr {last:?}"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "train accuracy {initial:.3} -> {:.4} (>= 0.95), frozen checksum unchanged, lr peak 1e-3 and final 1e-6 exact, {:.1} s",
        log.train_accuracy,
        elapsed.as_secs_f64()
    ))
}

/// Rules checked independently of the planner: pinned modes, shared ranks
/// for equal sizes, non-decreasing ranks with size.
fn obeys_rules(variant: AdapterVariant, dims: &ModelDims, plan: &RankPlan) -> bool {
    let mut free = Vec::new();
    for label in variant.rank_labels() {
        let r = plan.get(label).unwrap_or(0);
        match label {
            ModeLabel::Qkv if r != 3 => return false,
            ModeLabel::Heads if r != 12 => return false,
            ModeLabel::Depth if r != 12 => return false,
            ModeLabel::Qkv | ModeLabel::Heads | ModeLabel::Depth => {}
            other => free.push((other.size(dims).unwrap(), r)),
        }
    }
    free.iter().all(|a| free.iter().all(|b| (a.0 != b.0 || a.1 == b.1) && (a.0 <= b.0 || a.1 >= b.1)))
}

fn criterion_8() -> Outcome {
    let e = |e: tenslora_core::Error| e.to_string();
    let dims = ModelDims::vit_base();
    for (variant, row) in AdapterVariant::TENSOR_VARIANTS.iter().zip(&TABLE[1..8]) {
        let plan = plan_isorank(*variant, &dims, 4).map_err(e)?;
        let got = (table_count(plan.count), format!("{}k", round_thousands(plan.count)), format!("{}%", plan.percent_label()));
        let want = (row.3.to_string(), row.4.to_string(), row.5.to_string());
        ensure(got == want, || format!("{variant} isorank {got:?}, expected {want:?}"))?;
    }
    let att = plan_isoparameters(AdapterVariant::Att, &dims, 4, BudgetPolicy::Closest).map_err(e)?;
    ensure(att.ranks.ordered(AdapterVariant::Att).map_err(e)? == [7, 4, 12], || format!("Att closest {:?}", att.ranks))?;
    let qkv = plan_isoparameters(AdapterVariant::Qkv, &dims, 4, BudgetPolicy::NotExceeding).map_err(e)?;
    ensure(qkv.ranks.ordered(AdapterVariant::Qkv).map_err(e)? == [11, 11, 3], || format!("QKV not_exceeding {:?}", qkv.ranks))?;

    // exhaustive: no rule-abiding candidate beats the planner's objective
    let budget = lora_budget(&dims, 4);
    let bound = search_bound(&dims);
    let mut enumerated = 0u64;
    for variant in AdapterVariant::TENSOR_VARIANTS {
        let splits = variant.splits_heads();
        let mut best_gap = u64::MAX;
        let mut best_under = 0u64;
        for r_d in 1..=bound {
            let dh_range = if splits { 1..=r_d.min(bound) } else { 1..=1 };
            for r_dh in dh_range {
                let ranks: Vec<usize> = variant
                    .rank_labels()
                    .iter()
                    .map(|l| match l {
                        ModeLabel::DIn | ModeLabel::DOut => r_d,
                        ModeLabel::DHead => r_dh,
                        ModeLabel::Heads | ModeLabel::Depth => 12,
                        ModeLabel::Qkv => 3,
                        ModeLabel::LoraRank => unreachable!(),
                    })
                    .collect();
                let plan = RankPlan::for_modes(variant, &ranks).map_err(e)?;
                let count = param_count(variant, &dims, &plan).map_err(e)?;
                enumerated += 1;
                best_gap = best_gap.min(count.abs_diff(budget));
                if count <= budget {
                    best_under = best_under.max(count);
                }
            }
        }
        let closest = plan_isoparameters(variant, &dims, 4, BudgetPolicy::Closest).map_err(e)?;
        let under = plan_isoparameters(variant, &dims, 4, BudgetPolicy::NotExceeding).map_err(e)?;
        let iso = plan_isorank(variant, &dims, 4).map_err(e)?;
        for p in [&closest, &under] {
            ensure(obeys_rules(variant, &dims, &p.ranks), || format!("{variant}: {:?} breaks the rules", p.ranks))?;
        }
        ensure(iso.count == param_count(variant, &dims, &RankPlan::uniform(variant, 4)).map_err(e)?, || {
            format!("{variant}: isorank count mismatch")
        })?;
        ensure(closest.count.abs_diff(budget) == best_gap, || {
            format!("{variant}: closest gap {} but {best_gap} exists", closest.count.abs_diff(budget))
        })?;
        ensure(under.count == best_under, || {
            format!("{variant}: not_exceeding {} but {best_under} exists", under.count)
        })?;
    }
    Ok(format!(
        "isorank rows exact, Att closest (7,4,12), QKV not_exceeding (11,11,3), optimal over {enumerated} enumerated candidates"
    ))
}

fn table_count(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn main() -> ExitCode {
    let criteria: [Check; 8] = [
        ("parameter table", criterion_1),
        ("count vs enumeration", criterion_2),
        ("Tucker correctness", criterion_3),
        ("gradient audit", criterion_4),
        ("zero-init identity", criterion_5),
        ("merge equivalence", criterion_6),
        ("training sanity", criterion_7),
        ("planner checks", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("[PASS] criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
