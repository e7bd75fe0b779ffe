//! Cancellation penalties from a fitted exposure curve.
//!
//! A schedule holds the constrained curve `gamma_con` on the grid `j/200`:
//! non-decreasing, at least `t`, at most 1, and exactly 1 at `t = 1`. The
//! smoothing level `a` blends it with the pro-rata line,
//! `gamma_adj(t) = a gamma_con(t) + (1 - a) t`, and the penalty for a contract
//! cancelled at `t` with annual premium `pi` is `pi (gamma_adj(t) - t)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_fixed, ExposureEffect, FitResult, FitSpec, WeightLaw};
use crate::portfolio::{ContractType, Portfolio};
use crate::spline::ExposureFunction;

pub const SCHEDULE_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    grid: Vec<f64>,
    gamma_con: Vec<f64>,
    a: f64,
}

/// Equispaced grid `j / n`, `j = 1..=n`.
pub fn schedule_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|j| j as f64 / n as f64).collect()
}

/// Unweighted least-squares isotonic (non-decreasing) regression by pool
/// adjacent violators.
pub fn pava(values: &[f64]) -> Vec<f64> {
    // (sum, count) per block
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, n1) = blocks[blocks.len() - 1];
            let (s0, n0) = blocks[blocks.len() - 2];
            if s0 / n0 as f64 > s1 / n1 as f64 {
                blocks.pop();
                *blocks.last_mut().unwrap() = (s0 + s1, n0 + n1);
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (s, n) in blocks {
        out.extend(std::iter::repeat_n(s / n as f64, n));
    }
    out
}

/// Least-squares non-decreasing fit with bounds `lower_j <= g_j <= upper_j`.
/// Bounds must be non-decreasing with `lower <= upper`. Pool adjacent
/// violators where a block's value is its mean clamped into the tightest
/// bounds of its members, which is exact for these box constraints.
pub fn bounded_pava(values: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    struct Block {
        sum: f64,
        count: usize,
        lo: f64,
        hi: f64,
    }
    impl Block {
        fn value(&self) -> f64 {
            (self.sum / self.count as f64).clamp(self.lo, self.hi)
        }
    }
    let mut blocks: Vec<Block> = Vec::with_capacity(values.len());
    for ((&v, &lo), &hi) in values.iter().zip(lower).zip(upper) {
        blocks.push(Block { sum: v, count: 1, lo, hi });
        while blocks.len() > 1 && blocks[blocks.len() - 2].value() > blocks[blocks.len() - 1].value() {
            let last = blocks.pop().unwrap();
            let prev = blocks.last_mut().unwrap();
            prev.sum += last.sum;
            prev.count += last.count;
            prev.lo = prev.lo.max(last.lo);
            prev.hi = prev.hi.min(last.hi);
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for b in blocks {
        out.extend(std::iter::repeat_n(b.value(), b.count));
    }
    out
}

/// Projects curve values on `grid` (ending at 1) onto the constraint set
/// {non-decreasing, `t <= g <= 1`, `g(1) = 1`} in least squares.
pub fn constrain_values(grid: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if grid.len() != values.len() {
        return Err(Error::GridMismatch(format!("{} grid points, {} values", grid.len(), values.len())));
    }
    if grid.is_empty() || *grid.last().unwrap() != 1.0 || grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] <= 0.0 {
        return Err(Error::GridMismatch("grid must increase strictly inside (0, 1] and end at 1".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite curve value {v}")));
    }
    let upper = vec![1.0; grid.len()];
    let mut lower = grid.to_vec();
    *lower.last_mut().unwrap() = 1.0;
    let mut g = bounded_pava(values, &lower, &upper);
    *g.last_mut().unwrap() = 1.0;
    Ok(g)
}

/// Evaluates `gamma` on the 200-point grid and projects it; `a` starts at 1.
pub fn constrain(gamma: &dyn ExposureFunction) -> Result<PenaltySchedule> {
    let grid = schedule_grid(SCHEDULE_POINTS);
    let values: Vec<f64> = grid.iter().map(|&t| gamma.value(t)).collect();
    let gamma_con = constrain_values(&grid, &values)?;
    Ok(PenaltySchedule { grid, gamma_con, a: 1.0 })
}

/// Constrained schedule from a fitted model's `gamma`.
pub fn constrain_fit(fit: &FitResult) -> Result<PenaltySchedule> {
    constrain(&|t: f64| fit.gamma(t))
}

impl PenaltySchedule {
    /// Schedule from an explicit constrained curve; checks the invariants.
    pub fn from_parts(grid: Vec<f64>, gamma_con: Vec<f64>, a: f64) -> Result<Self> {
        check_a(a)?;
        if grid.len() != gamma_con.len() || grid.len() < 2 {
            return Err(Error::GridMismatch(format!("{} grid points, {} values", grid.len(), gamma_con.len())));
        }
        let ok = gamma_con.windows(2).all(|w| w[1] >= w[0])
            && gamma_con.iter().zip(&grid).all(|(g, t)| g >= t && *g <= 1.0)
            && *gamma_con.last().unwrap() == 1.0
            && *grid.last().unwrap() == 1.0;
        if !ok {
            return Err(Error::InvalidParameter("curve violates the schedule constraints".into()));
        }
        Ok(Self { grid, gamma_con, a })
    }

    /// `gamma_con = t`.
    pub fn identity() -> Self {
        let grid = schedule_grid(SCHEDULE_POINTS);
        Self { gamma_con: grid.clone(), grid, a: 1.0 }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn gamma_con(&self) -> &[f64] {
        &self.gamma_con
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    /// `gamma_adj` on the grid.
    pub fn gamma_adj(&self) -> Vec<f64> {
        self.gamma_con.iter().zip(&self.grid).map(|(g, t)| self.a * g + (1.0 - self.a) * t).collect()
    }

    /// `gamma_adj(t) = t + a (gamma_con(t) - t)`, with the excess
    /// `gamma_con - t` interpolated linearly between grid points (so
    /// `gamma_con` is too) and held at its first value below the grid.
    pub fn value(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::ExposureOutOfRange(t));
        }
        Ok(self.value_unchecked(t))
    }

    fn value_unchecked(&self, t: f64) -> f64 {
        t + self.a * self.excess(t)
    }

    /// `gamma_con(t) - t`, interpolated linearly between grid points and held
    /// at its first grid value below the grid.
    fn excess(&self, t: f64) -> f64 {
        let (xs, gs) = (&self.grid, &self.gamma_con);
        if t <= xs[0] {
            return gs[0] - xs[0];
        }
        let j = xs.partition_point(|&x| x < t).min(xs.len() - 1);
        let w = (t - xs[j - 1]) / (xs[j] - xs[j - 1]);
        (gs[j - 1] - xs[j - 1]) * (1.0 - w) + (gs[j] - xs[j]) * w
    }

    /// `gamma_adj` as a fixed exposure effect for refitting. A point near 0
    /// is prepended so the held excess below the grid carries over.
    pub fn exposure_effect(&self) -> ExposureEffect {
        let x0 = 1e-9;
        let e0 = self.gamma_con[0] - self.grid[0];
        let exposures = std::iter::once(x0).chain(self.grid.iter().copied()).collect();
        let values = std::iter::once(x0 + self.a * e0).chain(self.gamma_adj()).collect();
        ExposureEffect::Schedule { exposures, values }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            grid: Vec<f64>,
            gamma_con: Vec<f64>,
            a: f64,
        }
        let d: Doc = serde_json::from_str(s)?;
        Self::from_parts(d.grid, d.gamma_con, d.a)
    }

    /// CSV table `t,gamma_con,gamma_adj,penalty_ratio` on the grid, where
    /// `penalty_ratio = gamma_adj - t` is the penalty per unit of annual premium.
    pub fn write_table<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "gamma_con", "gamma_adj", "penalty_ratio"])?;
        for ((t, c), g) in self.grid.iter().zip(&self.gamma_con).zip(self.gamma_adj()) {
            w.write_record([t.to_string(), c.to_string(), g.to_string(), (g - t).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_a(a: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("smoothing level a = {a} outside [0, 1]")))
    }
}

/// `annual_premium * (gamma_adj(t) - t)`.
pub fn penalty(schedule: &PenaltySchedule, t: f64, annual_premium: f64) -> Result<f64> {
    if !(annual_premium > 0.0) {
        return Err(Error::InvalidParameter(format!("annual premium must be positive, got {annual_premium}")));
    }
    Ok((annual_premium * (schedule.value(t)? - t)).max(0.0))
}

/// Same constrained curve at smoothing level `a`.
pub fn adjust(schedule: &PenaltySchedule, a: f64) -> Result<PenaltySchedule> {
    check_a(a)?;
    Ok(PenaltySchedule { a, ..schedule.clone() })
}

/// Refits `beta` with `log gamma_adj(t)` as a fixed offset and prior weights
/// from `weights` (normally the law of the original flexible fit).
pub fn refit_with_offset(
    portfolio: &Portfolio,
    schedule: &PenaltySchedule,
    spec: &FitSpec,
    weights: &WeightLaw,
) -> Result<FitResult> {
    let mut f = fit_fixed(portfolio, spec, schedule.exposure_effect(), weights.clone())?;
    f.scheme = spec.scheme;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub exposure: f64,
    /// Cumulative sums over contracts with exposure `<= exposure`, each
    /// divided by the total loss cost.
    pub premium: f64,
    pub prorata: f64,
    pub penalty: f64,
    pub traditional_premium: Option<f64>,
    pub losses: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiumDecomposition {
    pub a: f64,
    pub total_premium: f64,
    pub total_prorata: f64,
    pub total_penalty: f64,
    pub total_losses: f64,
    /// Penalty as a share of total premium.
    pub penalty_share: f64,
    /// Penalty as a share of premium on XO contracts.
    pub penalty_share_xo: f64,
    /// `(premium / traditional premium) - 1` on XO contracts.
    pub xo_uplift_vs_traditional: Option<f64>,
    pub cumulative: Vec<CumulativePoint>,
}

/// Per-contract pro-rata premium `t pi` and penalty `rho(t)`, with
/// `pi = exp(x'beta)` from `fit`, summed into shares and cumulative curves on
/// the schedule grid.
pub fn premium_decomposition(
    fit: &FitResult,
    schedule: &PenaltySchedule,
    portfolio: &Portfolio,
    traditional: Option<&FitResult>,
) -> Result<PremiumDecomposition> {
    if portfolio.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    let grid = schedule.grid();
    let m = grid.len();
    let mut premium = vec![0.0; m];
    let mut prorata = vec![0.0; m];
    let mut pen = vec![0.0; m];
    let mut trad = vec![0.0; m];
    let mut losses = vec![0.0; m];
    let (mut xo_premium, mut xo_penalty, mut xo_trad) = (0.0, 0.0, 0.0);
    for r in &portfolio.records {
        let t = r.exposure;
        let pi = fit.annual_premium(r);
        let g = schedule.value_unchecked(t);
        let rho = (pi * (g - t)).max(0.0);
        let j = grid.partition_point(|&x| x < t).min(m - 1);
        premium[j] += t * pi + rho;
        prorata[j] += t * pi;
        pen[j] += rho;
        losses[j] += r.loss_cost;
        let tp = traditional.map(|f| f.predict_record(r)).unwrap_or(0.0);
        trad[j] += tp;
        if r.contract_type == ContractType::XO {
            xo_premium += t * pi + rho;
            xo_penalty += rho;
            xo_trad += tp;
        }
    }
    let total = |v: &[f64]| v.iter().sum::<f64>();
    let (total_premium, total_prorata, total_penalty, total_losses) =
        (total(&premium), total(&prorata), total(&pen), total(&losses));
    let scale = if total_losses > 0.0 { total_losses } else { 1.0 };
    let mut acc = [0.0f64; 5];
    let cumulative = (0..m)
        .map(|j| {
            for (a, v) in acc.iter_mut().zip([premium[j], prorata[j], pen[j], trad[j], losses[j]]) {
                *a += v;
            }
            CumulativePoint {
                exposure: grid[j],
                premium: acc[0] / scale,
                prorata: acc[1] / scale,
                penalty: acc[2] / scale,
                traditional_premium: traditional.map(|_| acc[3] / scale),
                losses: acc[4] / scale,
            }
        })
        .collect();
    Ok(PremiumDecomposition {
        a: schedule.a(),
        total_premium,
        total_prorata,
        total_penalty,
        total_losses,
        penalty_share: total_penalty / total_premium,
        penalty_share_xo: if xo_premium > 0.0 { xo_penalty / xo_premium } else { 0.0 },
        xo_uplift_vs_traditional: traditional.filter(|_| xo_trad > 0.0).map(|_| xo_premium / xo_trad - 1.0),
        cumulative,
    })
}
