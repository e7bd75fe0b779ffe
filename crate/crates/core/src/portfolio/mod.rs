//! Contract-level data: records, CSV I/O, splitting, simulation and the
//! exploratory summaries.

mod io;
mod simulate;
mod summary;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_csv, read_csv, write_csv, LoadOptions, LoadReport, CSV_HEADER};
pub use simulate::{simulate, BmsLaw, DeltaLaw, ExposureLaw, GroupLaw, SyntheticSpec};
pub use summary::{exploratory_summary, BinSummary, BmsSummary, ContractTypeSummary, ExploratorySummary};

/// Lowest and highest bonus-malus levels.
pub const BMS_MIN: u8 = 95;
pub const BMS_MAX: u8 = 104;
/// Level at which the BMS covariate is centered.
pub const BMS_CENTER: f64 = 100.0;
pub const COVARIATES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContractType {
    /// In force for the whole policy year.
    XX,
    /// Cancelled before the end of the policy year.
    XO,
}

impl ContractType {
    pub fn for_exposure(t: f64) -> Self {
        if t == 1.0 {
            ContractType::XX
        } else {
            ContractType::XO
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ContractType::XX => "XX",
            ContractType::XO => "XO",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRecord {
    pub exposure: f64,
    pub covariates: [u8; COVARIATES],
    pub bms: u8,
    pub loss_cost: f64,
    pub claim_count: Option<u32>,
    pub contract_type: ContractType,
}

impl PolicyRecord {
    /// Checks the record invariants, returning a message on violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.exposure > 0.0 && self.exposure <= 1.0) {
            return Err(format!("exposure {} outside (0, 1]", self.exposure));
        }
        if !(BMS_MIN..=BMS_MAX).contains(&self.bms) {
            return Err(format!("bms level {} outside [{BMS_MIN}, {BMS_MAX}]", self.bms));
        }
        if !(self.loss_cost >= 0.0 && self.loss_cost.is_finite()) {
            return Err(format!("loss cost {} must be finite and non-negative", self.loss_cost));
        }
        if let Some(i) = self.covariates.iter().position(|&x| x > 1) {
            return Err(format!("covariate x{} must be 0 or 1", i + 1));
        }
        if self.contract_type != ContractType::for_exposure(self.exposure) {
            return Err(format!(
                "contract type {} inconsistent with exposure {}",
                self.contract_type.as_str(),
                self.exposure
            ));
        }
        if let Some(n) = self.claim_count {
            if self.loss_cost > 0.0 && n == 0 {
                return Err("positive loss cost with zero claims".into());
            }
        }
        Ok(())
    }

    /// BMS level centered at 100.
    pub fn bms_centered(&self) -> f64 {
        self.bms as f64 - BMS_CENTER
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Portfolio {
    pub records: Vec<PolicyRecord>,
}

impl Portfolio {
    pub fn new(records: Vec<PolicyRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn exposures(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.exposure).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss_cost).collect()
    }

    pub fn has_claim_counts(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.claim_count.is_some())
    }

    pub fn subset(&self, idx: &[usize]) -> Portfolio {
        Portfolio::new(idx.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Distinct BMS levels present, ascending.
    pub fn bms_levels(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.records.iter().map(|r| r.bms).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Stratified random partition into (train, test) by contract type.
///
/// The training size is `round(fraction * n)`; it is allocated across the
/// XX and XO strata by largest remainder so each stratum keeps its share.
pub fn split(portfolio: &Portfolio, train_fraction: f64, seed: u64) -> Result<(Portfolio, Portfolio)> {
    let (train, test) = split_indices(portfolio, train_fraction, seed)?;
    Ok((portfolio.subset(&train), portfolio.subset(&test)))
}

/// Index form of [`split`]; both index lists are ascending.
pub fn split_indices(portfolio: &Portfolio, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n = portfolio.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::TooSmall(format!("{n} records at fraction {train_fraction}")));
    }
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
    for (i, r) in portfolio.records.iter().enumerate() {
        strata[(r.contract_type == ContractType::XO) as usize].push(i);
    }
    let quotas: Vec<f64> = strata.iter().map(|s| s.len() as f64 * n_train as f64 / n as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = n_train - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..strata.len()).collect();
    // Largest fractional part first; ties go to the first stratum.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &s in &order {
        if remaining == 0 {
            break;
        }
        if alloc[s] < strata[s].len() {
            alloc[s] += 1;
            remaining -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (s, members) in strata.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        train.extend_from_slice(&shuffled[..alloc[s]]);
        test.extend_from_slice(&shuffled[alloc[s]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
