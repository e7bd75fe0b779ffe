use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Beta;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::ExposureFunction;
use crate::tweedie::{check_power, TweedieParams};

use super::{ContractType, Portfolio, PolicyRecord, BMS_CENTER, BMS_MAX, BMS_MIN, COVARIATES};

const BLOCK: usize = 4096;

/// Ground-truth exposure law `delta(t)` of the simulated mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DeltaLaw {
    Identity,
    /// `t^alpha`.
    Power { alpha: f64 },
    /// Logistic `L(t) / L(1)` with `L(t) = 1 / (1 + exp(-kappa (t - 0.5)))`.
    Scurve { kappa: f64 },
}

impl DeltaLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DeltaLaw::Identity => Ok(()),
            DeltaLaw::Power { alpha } if alpha.is_finite() => Ok(()),
            DeltaLaw::Scurve { kappa } if kappa.is_finite() && kappa > 0.0 => Ok(()),
            other => Err(Error::InvalidParameter(format!("invalid exposure law {other:?}"))),
        }
    }
}

impl ExposureFunction for DeltaLaw {
    fn value(&self, t: f64) -> f64 {
        match *self {
            DeltaLaw::Identity => t,
            DeltaLaw::Power { alpha } => t.powf(alpha),
            DeltaLaw::Scurve { kappa } => {
                let l = |s: f64| 1.0 / (1.0 + (-kappa * (s - 0.5)).exp());
                l(t) / l(1.0)
            }
        }
    }
}

/// Distribution of exposure for XO contracts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ExposureLaw {
    /// `Beta(a, b)` rescaled affinely onto `(lo, hi)`.
    Beta { a: f64, b: f64, lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Default for ExposureLaw {
    fn default() -> Self {
        ExposureLaw::Beta { a: 2.0, b: 2.0, lo: 0.02, hi: 0.98 }
    }
}

impl ExposureLaw {
    fn bounds(&self) -> (f64, f64) {
        match *self {
            ExposureLaw::Beta { lo, hi, .. } | ExposureLaw::Uniform { lo, hi } => (lo, hi),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bounds();
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::InvalidParameter(format!("exposure range ({lo}, {hi}) must lie inside (0, 1)")));
        }
        if let ExposureLaw::Beta { a, b, .. } = *self {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::InvalidParameter(format!("beta shapes must be positive, got ({a}, {b})")));
            }
        }
        Ok(())
    }
}

/// Distribution of BMS levels over 95..=104.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum BmsLaw {
    #[default]
    Uniform,
    /// Relative weights for levels 95, 96, ..., 104.
    Weights { weights: Vec<f64> },
}

/// A second exposure law for contracts with BMS level above `cut`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLaw {
    pub cut: u8,
    pub delta_high: DeltaLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Intercept followed by one coefficient per covariate.
    pub beta_true: Vec<f64>,
    /// Coefficient on `bms - 100`.
    pub beta_bms: f64,
    pub delta: DeltaLaw,
    pub group_law: Option<GroupLaw>,
    pub xo_fraction: f64,
    pub exposure_law: ExposureLaw,
    pub phi: f64,
    pub power: f64,
    pub bms_law: BmsLaw,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            beta_true: vec![-1.0, 0.2, -0.2, 0.5, 0.3, -0.1],
            beta_bms: 0.1,
            delta: DeltaLaw::Power { alpha: 0.6 },
            group_law: None,
            xo_fraction: 0.35,
            exposure_law: ExposureLaw::default(),
            phi: 1.0,
            power: 1.42,
            bms_law: BmsLaw::Uniform,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beta_true.len() != COVARIATES + 1 {
            return Err(Error::InvalidParameter(format!(
                "beta_true needs {} entries, got {}",
                COVARIATES + 1,
                self.beta_true.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.xo_fraction) {
            return Err(Error::InvalidParameter(format!("xo_fraction {} outside [0, 1]", self.xo_fraction)));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::InvalidParameter(format!("phi must be positive, got {}", self.phi)));
        }
        check_power(self.power)?;
        self.delta.validate()?;
        if let Some(g) = &self.group_law {
            g.delta_high.validate()?;
            if !(BMS_MIN..BMS_MAX).contains(&g.cut) {
                return Err(Error::InvalidParameter(format!("group cut {} outside [{BMS_MIN}, {}]", g.cut, BMS_MAX - 1)));
            }
        }
        self.exposure_law.validate()?;
        if let BmsLaw::Weights { weights } = &self.bms_law {
            if weights.len() != (BMS_MAX - BMS_MIN + 1) as usize {
                return Err(Error::InvalidParameter("bms weights need one entry per level 95..=104".into()));
            }
            WeightedIndex::new(weights).map_err(|e| Error::InvalidParameter(format!("bms weights: {e}")))?;
        }
        Ok(())
    }

    /// Exposure law that applies at the given BMS level.
    pub fn delta_for(&self, bms: u8) -> DeltaLaw {
        match self.group_law {
            Some(g) if bms > g.cut => g.delta_high,
            _ => self.delta,
        }
    }

    /// True mean of a contract.
    pub fn true_mean(&self, t: f64, covariates: &[u8; COVARIATES], bms: u8) -> f64 {
        let eta = self.beta_true[0]
            + covariates.iter().zip(&self.beta_true[1..]).map(|(&x, b)| x as f64 * b).sum::<f64>()
            + self.beta_bms * (bms as f64 - BMS_CENTER);
        self.delta_for(bms).value(t) * eta.exp()
    }
}

/// Draws a synthetic portfolio.
///
/// Records are generated in blocks of 4096, each from its own ChaCha stream
/// keyed by `(seed, block index)`, so output is identical for any thread count.
pub fn simulate(spec: &SyntheticSpec) -> Result<Portfolio> {
    spec.validate()?;
    let bms_index = match &spec.bms_law {
        BmsLaw::Uniform => None,
        BmsLaw::Weights { weights } => Some(WeightedIndex::new(weights).expect("validated")),
    };
    let exposure = spec.exposure_law;
    let blocks = spec.n.div_ceil(BLOCK);
    let records: Vec<PolicyRecord> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(b as u64);
            let len = BLOCK.min(spec.n - b * BLOCK);
            let bms_index = bms_index.clone();
            (0..len)
                .map(|_| draw_record(spec, exposure, bms_index.as_ref(), &mut rng))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Portfolio::new(records))
}

fn draw_record<R: Rng>(spec: &SyntheticSpec, exposure: ExposureLaw, bms_index: Option<&WeightedIndex<f64>>, rng: &mut R) -> PolicyRecord {
    let mut covariates = [0u8; COVARIATES];
    for c in covariates.iter_mut() {
        *c = rng.random_bool(0.5) as u8;
    }
    let bms = match bms_index {
        None => rng.random_range(BMS_MIN..=BMS_MAX),
        Some(w) => BMS_MIN + w.sample(rng) as u8,
    };
    let t = if rng.random::<f64>() < spec.xo_fraction {
        match exposure {
            ExposureLaw::Beta { a, b, lo, hi } => lo + (hi - lo) * Beta::new(a, b).expect("validated").sample(rng),
            ExposureLaw::Uniform { lo, hi } => rng.random_range(lo..hi),
        }
    } else {
        1.0
    };
    let mu = spec.true_mean(t, &covariates, bms);
    let (count, loss) = TweedieParams::new(mu, spec.phi, 1.0, spec.power)
        .expect("validated spec yields positive mean")
        .sample_with_count(rng);
    PolicyRecord {
        exposure: t,
        covariates,
        bms,
        loss_cost: loss,
        claim_count: Some(count),
        contract_type: ContractType::for_exposure(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_all_xx() {
        assert!(simulate(&SyntheticSpec { n: 0, ..Default::default() }).unwrap().is_empty());
        let p = simulate(&SyntheticSpec { n: 2000, xo_fraction: 0.0, delta: DeltaLaw::Identity, ..Default::default() }).unwrap();
        assert!(p.records.iter().all(|r| r.exposure == 1.0 && r.contract_type == ContractType::XX));
    }

    #[test]
    fn records_are_valid_and_reproducible() {
        let spec = SyntheticSpec { n: 9000, seed: 17, ..Default::default() };
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9000);
        for r in &a.records {
            r.validate().unwrap();
            if r.contract_type == ContractType::XO {
                assert!(r.exposure > 0.02 && r.exposure < 0.98);
            }
        }
        let c = simulate(&SyntheticSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn delta_laws() {
        assert_eq!(DeltaLaw::Identity.value(0.3), 0.3);
        assert!((DeltaLaw::Power { alpha: 0.5 }.value(0.25) - 0.5).abs() < 1e-15);
        let s = DeltaLaw::Scurve { kappa: 8.0 };
        assert_eq!(s.value(1.0), 1.0);
        // L(0.5) = 1/2, L(1) = 1 / (1 + e^-4)
        assert!((s.value(0.5) - 0.5 * (1.0 + (-4.0f64).exp())).abs() < 1e-15);
        assert!(DeltaLaw::Scurve { kappa: -1.0 }.validate().is_err());
    }

    #[test]
    fn group_law_switches_above_cut() {
        let spec = SyntheticSpec {
            group_law: Some(GroupLaw { cut: 99, delta_high: DeltaLaw::Identity }),
            ..Default::default()
        };
        assert_eq!(spec.delta_for(99), spec.delta);
        assert_eq!(spec.delta_for(100), DeltaLaw::Identity);
    }

    #[test]
    fn weighted_bms_law() {
        let mut weights = vec![0.0; 10];
        weights[3] = 1.0;
        let spec = SyntheticSpec { n: 300, bms_law: BmsLaw::Weights { weights }, ..Default::default() };
        let p = simulate(&spec).unwrap();
        assert!(p.records.iter().all(|r| r.bms == 98));
    }

    #[test]
    fn invalid_specs() {
        assert!(simulate(&SyntheticSpec { beta_true: vec![0.0], ..Default::default() }).is_err());
        assert!(simulate(&SyntheticSpec { xo_fraction: 1.5, ..Default::default() }).is_err());
        assert!(simulate(&SyntheticSpec { power: 2.0, ..Default::default() }).is_err());
        let law = ExposureLaw::Uniform { lo: 0.5, hi: 0.2 };
        assert!(simulate(&SyntheticSpec { exposure_law: law, ..Default::default() }).is_err());
    }

    #[test]
    fn concave_delta_gives_concave_binned_means() {
        // Binned mean loss cost over exposure should follow delta(t) * E[exp(eta)],
        // which for t^0.6 lies above the chord through the bin means at both ends.
        let spec = SyntheticSpec { n: 100_000, xo_fraction: 1.0, seed: 5, ..Default::default() };
        let p = simulate(&spec).unwrap();
        let mut sums = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for r in &p.records {
            let k = ((r.exposure - 0.02) / 0.24).floor().clamp(0.0, 3.0) as usize;
            sums[k] += r.loss_cost;
            counts[k] += 1;
        }
        let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        let mids = [0.14, 0.38, 0.62, 0.86];
        // ratio of mean to t falls as t grows (concavity through the origin)
        let ratios: Vec<f64> = means.iter().zip(mids).map(|(m, t)| m / t).collect();
        assert!(ratios.windows(2).all(|w| w[0] > w[1]), "{ratios:?}");
        // the interior bins lie above the chord between the outer bins
        for i in 1..3 {
            let chord = means[0] + (means[3] - means[0]) * (mids[i] - mids[0]) / (mids[3] - mids[0]);
            assert!(means[i] > chord, "{means:?}");
        }
    }
}
