//! Token-usage pricing and cost comparison.
//!
//! All arithmetic is exact: prices live as integer micro-dollars per
//! million tokens and costs as integer picodollars
//! (tokens × micro-USD/1M = 1e-12 USD units), so cost is perfectly additive
//! and only the 4-decimal display rounds.

use std::collections::BTreeMap;
use std::ops::Add;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{BatchMode, TokenUsage};

#[derive(Debug, Error)]
pub enum CostError {
    #[error("no pricing entry for model `{model_id}` in {mode:?} mode")]
    UnknownPricing { model_id: String, mode: BatchMode },
    #[error("pricing table invalid: {0}")]
    InvalidTable(String),
    #[error("need at least two cost reports to compare")]
    NotEnoughReports,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Exact money amount in picodollars (1e-12 USD).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Money(pub u128);

impl Money {
    pub fn from_tokens(tokens: u64, micro_usd_per_million: u64) -> Money {
        Money(tokens as u128 * micro_usd_per_million as u128)
    }

    /// Display value rounded half-up to 4 decimals.
    pub fn usd_4dp(&self) -> String {
        let tenths_of_millidollar = (self.0 + 50_000_000) / 100_000_000;
        format!(
            "{}.{:04}",
            tenths_of_millidollar / 10_000,
            tenths_of_millidollar % 10_000
        )
    }

    pub fn as_usd_f64(&self) -> f64 {
        self.0 as f64 / 1e12
    }
}

impl Add for Money {
    type Output = Money;

    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl Serialize for Money {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.usd_4dp())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let value: f64 = text
            .parse()
            .map_err(|_| serde::de::Error::custom(format!("bad money literal `{text}`")))?;
        Ok(Money((value * 1e12).round() as u128))
    }
}

/// One priced (model, mode) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingEntry {
    pub model_id: String,
    pub mode: BatchMode,
    pub input_micro_per_million: u64,
    pub output_micro_per_million: u64,
    pub effective: String,
}

/// External pricing rows as published: USD per million tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PricingRow {
    model_id: String,
    mode: BatchMode,
    input_usd_per_million: f64,
    output_usd_per_million: f64,
    effective: String,
}

#[derive(Debug, Clone, Default)]
pub struct PricingTable {
    entries: Vec<PricingEntry>,
}

impl PricingTable {
    pub fn new(entries: Vec<PricingEntry>) -> Result<Self, CostError> {
        let table = Self { entries };
        table.validate()?;
        Ok(table)
    }

    /// Load the JSON schema
    /// `[{model_id, mode, input_usd_per_million, output_usd_per_million, effective}]`.
    pub fn load_json(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CostError> {
        let rows: Vec<PricingRow> =
            serde_json::from_str(text).map_err(|e| CostError::InvalidTable(e.to_string()))?;
        let entries = rows
            .into_iter()
            .map(|row| {
                if row.input_usd_per_million < 0.0 || row.output_usd_per_million < 0.0 {
                    return Err(CostError::InvalidTable(format!(
                        "negative price for {}",
                        row.model_id
                    )));
                }
                Ok(PricingEntry {
                    model_id: row.model_id,
                    mode: row.mode,
                    input_micro_per_million: (row.input_usd_per_million * 1e6).round() as u64,
                    output_micro_per_million: (row.output_usd_per_million * 1e6).round() as u64,
                    effective: row.effective,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries)
    }

    fn validate(&self) -> Result<(), CostError> {
        let mut by_model: BTreeMap<&str, BTreeMap<BatchMode, u64>> = BTreeMap::new();
        for entry in &self.entries {
            by_model
                .entry(entry.model_id.as_str())
                .or_default()
                .insert(entry.mode, entry.input_micro_per_million);
        }
        for (model, modes) in by_model {
            if let (Some(batch), Some(no_batch)) =
                (modes.get(&BatchMode::Batch), modes.get(&BatchMode::NoBatch))
            {
                if batch > no_batch {
                    return Err(CostError::InvalidTable(format!(
                        "batch input price exceeds no-batch price for {model}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, model_id: &str, mode: BatchMode) -> Result<&PricingEntry, CostError> {
        self.entries
            .iter()
            .find(|e| e.model_id == model_id && e.mode == mode)
            .ok_or_else(|| CostError::UnknownPricing {
                model_id: model_id.to_string(),
                mode,
            })
    }
}

/// Priced usage for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model_id: String,
    pub mode: BatchMode,
    pub prompt_id: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub input_cost: Money,
    pub output_cost: Money,
    pub total: Money,
}

/// Price a usage record: linear in tokens, exact before display rounding.
pub fn cost_of(
    usage: &TokenUsage,
    model_id: &str,
    mode: BatchMode,
    prompt_id: &str,
    pricing: &PricingTable,
) -> Result<CostReport, CostError> {
    let entry = pricing.get(model_id, mode)?;
    let input_cost = Money::from_tokens(usage.input_tokens, entry.input_micro_per_million);
    let output_cost = Money::from_tokens(usage.output_tokens, entry.output_micro_per_million);
    Ok(CostReport {
        model_id: model_id.to_string(),
        mode,
        prompt_id: prompt_id.to_string(),
        input_tokens: usage.input_tokens,
        output_tokens: usage.output_tokens,
        input_cost,
        output_cost,
        total: input_cost + output_cost,
    })
}

/// A nominally-cheaper model that still cost more, with the token blowup
/// that explains it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InflationFlag {
    pub costlier_model: String,
    pub cheaper_model: String,
    /// costlier input tokens / cheaper input tokens.
    pub input_token_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostComparison {
    /// Indices into the input reports, total cost ascending (ties keep
    /// input order).
    pub ranking: Vec<usize>,
    pub flags: Vec<InflationFlag>,
    pub commentary: Vec<String>,
}

/// Rank reports by total cost and flag every pair where the model with the
/// lower effective input rate ended up costlier overall.
pub fn compare_models(reports: &[CostReport]) -> Result<CostComparison, CostError> {
    if reports.len() < 2 {
        return Err(CostError::NotEnoughReports);
    }
    let mut ranking: Vec<usize> = (0..reports.len()).collect();
    ranking.sort_by_key(|i| (reports[*i].total, *i));

    // Effective input rate in picodollars per token.
    let rate = |r: &CostReport| {
        if r.input_tokens == 0 {
            None
        } else {
            Some(r.input_cost.0 / r.input_tokens as u128)
        }
    };
    let mut flags = Vec::new();
    let mut commentary = Vec::new();
    for (i, costly) in reports.iter().enumerate() {
        for (j, cheap) in reports.iter().enumerate() {
            if i == j {
                continue;
            }
            let (Some(rate_costly), Some(rate_cheap)) = (rate(costly), rate(cheap)) else {
                continue;
            };
            if rate_costly < rate_cheap && costly.total > cheap.total {
                let ratio = costly.input_tokens as f64 / cheap.input_tokens as f64;
                commentary.push(format!(
                    "{} ({}) has a lower input rate than {} ({}) but cost more overall \
                     (${} vs ${}); it consumed {ratio:.1}x the input tokens",
                    costly.model_id,
                    costly.mode.as_str(),
                    cheap.model_id,
                    cheap.mode.as_str(),
                    costly.total.usd_4dp(),
                    cheap.total.usd_4dp(),
                ));
                flags.push(InflationFlag {
                    costlier_model: costly.model_id.clone(),
                    cheaper_model: cheap.model_id.clone(),
                    input_token_ratio: ratio,
                });
            }
        }
    }
    Ok(CostComparison {
        ranking,
        flags,
        commentary,
    })
}

/// Markdown table over cost reports, layout `model/prompt/mode/tokens/costs`.
pub fn render_cost_table(reports: &[CostReport]) -> String {
    let mut out = String::from(
        "| Model | Prompt | Mode | Input tokens | Output tokens | Input cost ($USD) | Output cost ($USD) | Total ($USD) |\n\
         | --- | --- | --- | ---: | ---: | ---: | ---: | ---: |\n",
    );
    for report in reports {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            report.model_id,
            report.prompt_id,
            report.mode.as_str(),
            report.input_tokens,
            report.output_tokens,
            report.input_cost.usd_4dp(),
            report.output_cost.usd_4dp(),
            report.total.usd_4dp(),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn usage(input: u64, output: u64) -> TokenUsage {
        TokenUsage::new(input, output)
    }

    fn table() -> PricingTable {
        PricingTable::new(vec![
            PricingEntry {
                model_id: "gpt-4o".to_string(),
                mode: BatchMode::Batch,
                input_micro_per_million: 1_250_000,
                output_micro_per_million: 5_000_000,
                effective: "2024-08-06".to_string(),
            },
            PricingEntry {
                model_id: "gpt-4o".to_string(),
                mode: BatchMode::NoBatch,
                input_micro_per_million: 2_500_000,
                output_micro_per_million: 10_000_000,
                effective: "2024-08-06".to_string(),
            },
            PricingEntry {
                model_id: "gpt-4o-mini".to_string(),
                mode: BatchMode::Batch,
                input_micro_per_million: 75_000,
                output_micro_per_million: 300_000,
                effective: "2024-07-18".to_string(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        let report = cost_of(&usage(0, 0), "gpt-4o", BatchMode::Batch, "1", &table()).unwrap();
        assert_eq!(report.total, Money(0));
        assert_eq!(report.total.usd_4dp(), "0.0000");
    }

    #[test]
    fn batch_input_price_reproduces_printed_cell() {
        // 640,860 input tokens at the derived batch rate.
        let report =
            cost_of(&usage(640_860, 0), "gpt-4o", BatchMode::Batch, "1", &table()).unwrap();
        let printed: f64 = 0.8010;
        assert!((report.input_cost.as_usd_f64() - printed).abs() < 1e-4);
        assert_eq!(report.input_cost.usd_4dp(), "0.8011");
    }

    #[test]
    fn unknown_pricing_is_an_error() {
        assert!(matches!(
            cost_of(&usage(1, 1), "gpt-4o-mini", BatchMode::NoBatch, "1", &table()),
            Err(CostError::UnknownPricing { .. })
        ));
    }

    #[test]
    fn cost_is_additive_before_rounding() {
        let t = table();
        let a = cost_of(&usage(123_456, 789), "gpt-4o", BatchMode::Batch, "1", &t).unwrap();
        let b = cost_of(&usage(654_321, 987), "gpt-4o", BatchMode::Batch, "1", &t).unwrap();
        let both = cost_of(
            &usage(123_456 + 654_321, 789 + 987),
            "gpt-4o",
            BatchMode::Batch,
            "1",
            &t,
        )
        .unwrap();
        assert_eq!(a.total + b.total, both.total);
    }

    #[test]
    fn batch_price_above_no_batch_rejected() {
        let result = PricingTable::new(vec![
            PricingEntry {
                model_id: "m".to_string(),
                mode: BatchMode::Batch,
                input_micro_per_million: 100,
                output_micro_per_million: 0,
                effective: "now".to_string(),
            },
            PricingEntry {
                model_id: "m".to_string(),
                mode: BatchMode::NoBatch,
                input_micro_per_million: 50,
                output_micro_per_million: 0,
                effective: "now".to_string(),
            },
        ]);
        assert!(matches!(result, Err(CostError::InvalidTable(_))));
    }

    #[test]
    fn comparison_ranks_and_flags_token_inflation() {
        let t = table();
        // Prompt-1 batch rows: big model with few tokens vs mini with many.
        let big = cost_of(&usage(640_860, 13_331), "gpt-4o", BatchMode::Batch, "1", &t).unwrap();
        let mini = cost_of(
            &usage(20_195_532, 15_537),
            "gpt-4o-mini",
            BatchMode::Batch,
            "1",
            &t,
        )
        .unwrap();
        let comparison = compare_models(&[mini.clone(), big.clone()]).unwrap();
        // Big model first: cheaper total despite higher rate.
        assert_eq!(comparison.ranking, vec![1, 0]);
        assert_eq!(comparison.flags.len(), 1);
        let flag = &comparison.flags[0];
        assert_eq!(flag.costlier_model, "gpt-4o-mini");
        assert!((flag.input_token_ratio - 31.5).abs() < 0.2);
    }

    #[test]
    fn identical_reports_keep_input_order() {
        let t = table();
        let a = cost_of(&usage(100, 10), "gpt-4o", BatchMode::Batch, "1", &t).unwrap();
        let comparison = compare_models(&[a.clone(), a.clone(), a]).unwrap();
        assert_eq!(comparison.ranking, vec![0, 1, 2]);
    }

    #[test]
    fn single_report_rejected() {
        let t = table();
        let a = cost_of(&usage(100, 10), "gpt-4o", BatchMode::Batch, "1", &t).unwrap();
        assert!(matches!(
            compare_models(std::slice::from_ref(&a)),
            Err(CostError::NotEnoughReports)
        ));
    }

    #[test]
    fn json_round_trip_of_pricing_rows() {
        let text = r#"[
            {"model_id": "gpt-4o", "mode": "batch",
             "input_usd_per_million": 1.25, "output_usd_per_million": 5.0,
             "effective": "2024-08-06"}
        ]"#;
        let table = PricingTable::from_json(text).unwrap();
        let entry = table.get("gpt-4o", BatchMode::Batch).unwrap();
        assert_eq!(entry.input_micro_per_million, 1_250_000);
        assert_eq!(entry.output_micro_per_million, 5_000_000);
    }

    #[test]
    fn money_display_rounds_half_up() {
        assert_eq!(Money(123_449_999_999).usd_4dp(), "0.1234");
        assert_eq!(Money(123_450_000_000).usd_4dp(), "0.1235");
        assert_eq!(Money(1_000_000_000_000).usd_4dp(), "1.0000");
    }
}
