use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::portfolio::{Portfolio, BMS_MAX, BMS_MIN};
use crate::spline::ExposureCurve;

use super::{
    assemble, fit, smooth_problem, solve_with_lambda, ExposureEffect, FitResult, FitSpec, WeightLaw, WeightScheme,
};

const GRID_POINTS: usize = 200;
const LEVELS: usize = (BMS_MAX - BMS_MIN + 1) as usize;

/// Assignment of BMS levels 95..=104 to group 1 or 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BmsGrouping {
    /// Group label (1 or 2) for each level from 95 to 104.
    labels: [u8; LEVELS],
}

impl BmsGrouping {
    /// Levels `<= cut` form group 1, the rest group 2.
    pub fn cut(cut: u8) -> Self {
        let mut labels = [2; LEVELS];
        for (i, l) in labels.iter_mut().enumerate() {
            if BMS_MIN + i as u8 <= cut {
                *l = 1;
            }
        }
        Self { labels }
    }

    pub fn from_labels(labels: [u8; LEVELS]) -> Result<Self> {
        if labels.iter().any(|&l| l != 1 && l != 2) {
            return Err(Error::InvalidParameter(format!("group labels must be 1 or 2, got {labels:?}")));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[u8; LEVELS] {
        &self.labels
    }

    /// Zero-based group index of a level.
    pub fn group_of(&self, bms: u8) -> usize {
        (self.labels[(bms - BMS_MIN) as usize] - 1) as usize
    }
}

/// Exposure grid `j / 200`, `j = 1..=200`, on which curve differences are
/// evaluated.
pub fn difference_grid() -> Vec<f64> {
    (1..=GRID_POINTS).map(|j| j as f64 / GRID_POINTS as f64).collect()
}

fn check_group_scheme(spec: &FitSpec) -> Result<WeightLaw> {
    match spec.scheme {
        WeightScheme::Cwm => Ok(WeightLaw::Unit),
        WeightScheme::Ewm => Ok(WeightLaw::ExposurePower { exponent: spec.power - 1.0 }),
        other => Err(Error::UnsupportedScheme(format!("group splines need CWM or EWM weights, got {other}"))),
    }
}

/// Shared `beta` with one smooth log-curve per BMS group, each with its own
/// curvature penalty (same smoothing parameter) and `f_k(1) = 0`.
pub fn fit_group_splines(portfolio: &Portfolio, spec: &FitSpec, grouping: &BmsGrouping) -> Result<FitResult> {
    spec.validate()?;
    let law = check_group_scheme(spec)?;
    let mut counts = [0usize; 2];
    for r in &portfolio.records {
        counts[grouping.group_of(r.bms)] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup(k + 1));
    }
    let weights = law.weights(&portfolio.exposures());
    let problem = smooth_problem(portfolio, spec, Some(grouping), &weights)?;
    let (sol, search) = solve_with_lambda(&problem, spec.lambda, None, spec)?;
    let px = spec.design.len();
    let kb = spec.grid.len() - 1;
    let curve = |b: usize| -> Result<ExposureCurve> {
        let mut c = sol.theta[px + b * kb..px + (b + 1) * kb].to_vec();
        c.push(0.0);
        ExposureCurve::new(spec.grid.clone(), c)
    };
    let log_curves = [curve(0)?, curve(1)?];
    let exposure = ExposureEffect::Grouped { grouping: grouping.clone(), log_curves };
    Ok(assemble(spec, &problem, sol, search, exposure, law))
}

fn difference(fit: &FitResult, grid: &[f64]) -> Vec<f64> {
    match &fit.exposure {
        ExposureEffect::Grouped { log_curves, .. } => grid
            .iter()
            .map(|&t| log_curves[0].evaluate_unchecked(t) - log_curves[1].evaluate_unchecked(t))
            .collect(),
        _ => unreachable!("group fit"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutScore {
    pub cut: u8,
    /// `sum_j w_j (f1 - f2)^2(t_j)` with `w_j` the share of contracts whose
    /// exposure falls in `((j-1)/200, j/200]`.
    pub score: f64,
    /// Plain mean of `(f1 - f2)^2` over the grid.
    pub unweighted_score: f64,
    pub low_count: usize,
    pub high_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutpointSearch {
    pub best_cut: u8,
    pub lambda: f64,
    pub scores: Vec<CutScore>,
    /// Cuts that could not be scored, with the reason.
    pub skipped: Vec<(u8, String)>,
}

/// Scores every cut `c` in 95..=103 (levels `<= c` against `> c`) by the
/// exposure-weighted squared distance between the two group log-curves and
/// returns the best cut; exact ties go to the smallest cut. The smoothing
/// parameter is chosen once on the pooled single-curve fit.
pub fn search_cutpoint(portfolio: &Portfolio, spec: &FitSpec) -> Result<CutpointSearch> {
    spec.validate()?;
    check_group_scheme(spec)?;
    if portfolio.bms_levels().len() < 2 {
        return Err(Error::InvalidParameter("cut-point search needs at least two BMS levels".into()));
    }
    let lambda = match spec.lambda {
        Some(l) => l,
        None => fit(portfolio, spec)?.lambda,
    };
    let fixed = FitSpec { lambda: Some(lambda), ..spec.clone() };
    let grid = difference_grid();
    let mut density = vec![0.0; GRID_POINTS];
    for r in &portfolio.records {
        let j = ((r.exposure * GRID_POINTS as f64).ceil() as usize).clamp(1, GRID_POINTS);
        density[j - 1] += 1.0;
    }
    let n = portfolio.len() as f64;
    density.iter_mut().for_each(|d| *d /= n);

    let outcomes: Vec<(u8, Result<CutScore>)> = (BMS_MIN..BMS_MAX)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|cut| {
            let grouping = BmsGrouping::cut(cut);
            let low_count = portfolio.records.iter().filter(|r| r.bms <= cut).count();
            let high_count = portfolio.len() - low_count;
            let scored = fit_group_splines(portfolio, &fixed, &grouping).map(|f| {
                let d = difference(&f, &grid);
                CutScore {
                    cut,
                    score: d.iter().zip(&density).map(|(v, w)| w * v * v).sum(),
                    unweighted_score: d.iter().map(|v| v * v).sum::<f64>() / GRID_POINTS as f64,
                    low_count,
                    high_count,
                }
            });
            (cut, scored)
        })
        .collect();

    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (cut, outcome) in outcomes {
        match outcome {
            Ok(s) => scores.push(s),
            Err(e @ (Error::EmptyGroup(_) | Error::RankDeficient(_))) => skipped.push((cut, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let best = scores
        .iter()
        .fold(None::<&CutScore>, |best, s| match best {
            Some(b) if b.score >= s.score => Some(b),
            _ => Some(s),
        })
        .ok_or_else(|| Error::InvalidParameter("no cut could be scored".into()))?;
    Ok(CutpointSearch { best_cut: best.cut, lambda, scores, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub grid: Vec<f64>,
    /// `f1 - f2` from the fit on the original data.
    pub estimate: Vec<f64>,
    /// Mean of the replicate differences.
    pub mean: Vec<f64>,
    /// Standard deviation of the replicate differences; zero for one replicate.
    pub std_error: Vec<f64>,
    pub replicates: usize,
    pub failed: usize,
    pub lambda: f64,
}

impl BootstrapBand {
    /// Share of grid points where `|estimate| <= 2 * std_error`.
    pub fn zero_inside_fraction(&self) -> f64 {
        let inside = self.estimate.iter().zip(&self.std_error).filter(|(e, s)| e.abs() <= 2.0 * **s).count();
        inside as f64 / self.grid.len() as f64
    }
}

/// Nonparametric bootstrap of the group-curve difference: contracts are
/// resampled with replacement within each group and refitted at the
/// smoothing parameter of the original fit. Replicate `r` draws from the
/// ChaCha stream `(seed, r)`.
pub fn bootstrap_curve_difference(
    portfolio: &Portfolio,
    spec: &FitSpec,
    grouping: &BmsGrouping,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapBand> {
    if replicates == 0 {
        return Err(Error::InvalidParameter("at least one bootstrap replicate is needed".into()));
    }
    let base = fit_group_splines(portfolio, spec, grouping)?;
    let fixed = FitSpec { lambda: Some(base.lambda), ..spec.clone() };
    let grid = difference_grid();
    let estimate = difference(&base, &grid);
    let mut members: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in portfolio.records.iter().enumerate() {
        members[grouping.group_of(r.bms)].push(i);
    }

    let draws: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut idx = Vec::with_capacity(portfolio.len());
            for m in &members {
                idx.extend((0..m.len()).map(|_| m[rng.random_range(0..m.len())]));
            }
            fit_group_splines(&portfolio.subset(&idx), &fixed, grouping).ok().map(|f| difference(&f, &grid))
        })
        .collect();
    let ok: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let failed = replicates - ok.len();
    if failed * 10 > replicates || ok.is_empty() {
        return Err(Error::BootstrapFailed { failed, total: replicates });
    }
    let m = ok.len() as f64;
    let mean: Vec<f64> = (0..grid.len()).map(|j| ok.iter().map(|d| d[j]).sum::<f64>() / m).collect();
    let std_error = (0..grid.len())
        .map(|j| {
            if ok.len() < 2 {
                0.0
            } else {
                (ok.iter().map(|d| (d[j] - mean[j]).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            }
        })
        .collect();
    Ok(BootstrapBand { grid, estimate, mean, std_error, replicates, failed, lambda: base.lambda })
}
