//! The parameter-count table printed by `tenslora params`.

use serde::Serialize;
use tenslora_core::adapters::{AdapterVariant, ModelDims, RankPlan};
use tenslora_core::planner::{
    lora_budget, percent_tenths, plan_isoparameters, plan_isorank, plan_preset, round_thousands, BudgetPolicy,
    PlanResult,
};

use crate::error::CliResult;

/// How the isoparameters rows pick their ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IsoparametersSource {
    Preset,
    Search(BudgetPolicy),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Row {
    pub variant: String,
    pub regime: &'static str,
    pub ranks: String,
    pub params: u64,
    pub k: u64,
    pub percent: String,
}

impl Row {
    fn from_plan(plan: &PlanResult, regime: &'static str) -> CliResult<Self> {
        Ok(Row {
            variant: plan.variant.name().to_string(),
            regime,
            ranks: format_ranks(plan.variant, &plan.ranks)?,
            params: plan.count,
            k: round_thousands(plan.count),
            percent: plan.percent_label(),
        })
    }

    /// `221,184 (100.0%)`.
    pub fn count_label(&self) -> String {
        format!("{} ({}%)", thousands(self.params), self.percent)
    }
}

fn format_ranks(variant: AdapterVariant, ranks: &RankPlan) -> CliResult<String> {
    let r = ranks.ordered(variant)?;
    let parts: Vec<String> = r.iter().map(usize::to_string).collect();
    Ok(format!("({})", parts.join(",")))
}

/// `221184 → "221,184"`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// LoRA, then every tensor variant at isorank, then every tensor variant at
/// isoparameters.
pub fn build_rows(dims: &ModelDims, lora_rank: usize, iso: IsoparametersSource) -> CliResult<Vec<Row>> {
    let budget = lora_budget(dims, lora_rank);
    let mut rows = vec![Row {
        variant: AdapterVariant::Lora.name().to_string(),
        regime: "-",
        ranks: format!("({lora_rank})"),
        params: budget,
        k: round_thousands(budget),
        percent: {
            let t = percent_tenths(budget, budget);
            format!("{}.{}", t / 10, t % 10)
        },
    }];
    for v in AdapterVariant::TENSOR_VARIANTS {
        rows.push(Row::from_plan(&plan_isorank(v, dims, lora_rank)?, "isorank")?);
    }
    for v in AdapterVariant::TENSOR_VARIANTS {
        let plan = match iso {
            IsoparametersSource::Preset => plan_preset(v, dims, lora_rank)?,
            IsoparametersSource::Search(policy) => plan_isoparameters(v, dims, lora_rank, policy)?,
        };
        rows.push(Row::from_plan(&plan, "isoparameters")?);
    }
    Ok(rows)
}

pub fn render_markdown(rows: &[Row]) -> String {
    let mut out = String::from("| Adapter | Regime | Ranks | # Params | k | % of LoRA |\n");
    out.push_str("|---|---|---|---:|---:|---:|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {}k | {}% |\n",
            r.variant,
            r.regime,
            r.ranks,
            thousands(r.params),
            r.k,
            r.percent
        ));
    }
    out
}

pub fn render_csv(rows: &[Row]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(6_460), "6,460");
        assert_eq!(thousands(221_184), "221,184");
        assert_eq!(thousands(1_234_567), "1,234,567");
    }

    #[test]
    fn fifteen_rows_at_vit_base() {
        let rows = build_rows(&ModelDims::vit_base(), 4, IsoparametersSource::Preset).unwrap();
        assert_eq!(rows.len(), 15);
        assert_eq!(rows[0].count_label(), "221,184 (100.0%)");
        let qkv_depth = rows.iter().find(|r| r.variant == "QKV_Depth" && r.regime == "isorank").unwrap();
        assert_eq!(qkv_depth.count_label(), "6,460 (2.9%)");
        assert_eq!(qkv_depth.k, 6);
        let depth = rows.iter().find(|r| r.variant == "Depth" && r.regime == "isoparameters").unwrap();
        assert_eq!(depth.ranks, "(37,37,12)");
        assert_eq!(depth.count_label(), "220,212 (99.6%)");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = build_rows(&ModelDims::vit_base(), 4, IsoparametersSource::Preset).unwrap();
        let text = render_csv(&rows).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("variant,regime,ranks,params,k,percent"));
        assert_eq!(lines.count(), 15);
    }
}
