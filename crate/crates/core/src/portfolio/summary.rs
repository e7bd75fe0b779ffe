use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ContractType, Portfolio, PolicyRecord};

const BIN_WIDTH: f64 = 0.05;
const XO_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractTypeSummary {
    /// `None` for the pooled row.
    pub contract_type: Option<ContractType>,
    pub count: usize,
    pub exposure: f64,
    pub total_loss: f64,
    pub claims: Option<u64>,
    /// Claims per unit of exposure.
    pub frequency: Option<f64>,
    /// Loss per claim; zero when there are no claims.
    pub mean_severity: Option<f64>,
    /// Loss per unit of exposure.
    pub annualized_loss_cost: f64,
}

/// Loss statistics for one exposure bin. XX contracts form their own bin with
/// `lower == upper == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_loss_cost: Option<f64>,
    pub annualized_loss_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmsSummary {
    pub level: u8,
    pub count: usize,
    pub xo_proportion: f64,
    pub annualized_loss_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploratorySummary {
    pub contracts: usize,
    pub overall: ContractTypeSummary,
    pub by_contract_type: Vec<ContractTypeSummary>,
    pub exposure_bins: Vec<BinSummary>,
    pub by_bms: Vec<BmsSummary>,
    pub notices: Vec<String>,
}

pub fn exploratory_summary(portfolio: &Portfolio) -> Result<ExploratorySummary> {
    if portfolio.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    let with_counts = portfolio.has_claim_counts();
    let mut notices = Vec::new();
    if !with_counts {
        notices.push("claim counts missing: frequency and severity omitted".to_string());
    }
    let all: Vec<&PolicyRecord> = portfolio.records.iter().collect();
    let overall = type_summary(None, &all, with_counts);
    let by_contract_type = [ContractType::XX, ContractType::XO]
        .into_iter()
        .map(|ct| {
            let rows: Vec<&PolicyRecord> = all.iter().copied().filter(|r| r.contract_type == ct).collect();
            type_summary(Some(ct), &rows, with_counts)
        })
        .collect();

    let mut bins: Vec<(usize, f64, f64)> = vec![(0, 0.0, 0.0); XO_BINS + 1];
    for r in &all {
        let k = if r.contract_type == ContractType::XX {
            XO_BINS
        } else {
            ((r.exposure / BIN_WIDTH).floor() as usize).min(XO_BINS - 1)
        };
        bins[k].0 += 1;
        bins[k].1 += r.exposure;
        bins[k].2 += r.loss_cost;
    }
    let exposure_bins = bins
        .iter()
        .enumerate()
        .map(|(k, &(count, exposure, loss))| {
            let (lower, upper) =
                if k == XO_BINS { (1.0, 1.0) } else { (k as f64 * BIN_WIDTH, (k + 1) as f64 * BIN_WIDTH) };
            BinSummary {
                lower,
                upper,
                count,
                mean_loss_cost: (count > 0).then(|| loss / count as f64),
                annualized_loss_cost: (count > 0).then(|| loss / exposure),
            }
        })
        .collect();

    let by_bms = portfolio
        .bms_levels()
        .into_iter()
        .map(|level| {
            let rows: Vec<&&PolicyRecord> = all.iter().filter(|r| r.bms == level).collect();
            let xo = rows.iter().filter(|r| r.contract_type == ContractType::XO).count();
            let exposure: f64 = rows.iter().map(|r| r.exposure).sum();
            let loss: f64 = rows.iter().map(|r| r.loss_cost).sum();
            BmsSummary {
                level,
                count: rows.len(),
                xo_proportion: xo as f64 / rows.len() as f64,
                annualized_loss_cost: loss / exposure,
            }
        })
        .collect();

    Ok(ExploratorySummary { contracts: portfolio.len(), overall, by_contract_type, exposure_bins, by_bms, notices })
}

fn type_summary(contract_type: Option<ContractType>, rows: &[&PolicyRecord], with_counts: bool) -> ContractTypeSummary {
    let exposure: f64 = rows.iter().map(|r| r.exposure).sum();
    let total_loss: f64 = rows.iter().map(|r| r.loss_cost).sum();
    let claims = with_counts.then(|| rows.iter().map(|r| r.claim_count.unwrap() as u64).sum::<u64>());
    let frequency = claims.map(|n| if exposure > 0.0 { n as f64 / exposure } else { 0.0 });
    let mean_severity = claims.map(|n| if n > 0 { total_loss / n as f64 } else { 0.0 });
    ContractTypeSummary {
        contract_type,
        count: rows.len(),
        exposure,
        total_loss,
        claims,
        frequency,
        mean_severity,
        annualized_loss_cost: if exposure > 0.0 { total_loss / exposure } else { 0.0 },
    }
}
