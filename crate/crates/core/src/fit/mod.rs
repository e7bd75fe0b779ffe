//! Tweedie log-link models with a traditional proportional exposure term or
//! a smooth exposure function `gamma(t)`, under the five weighting schemes.
//!
//! Flexible models represent `log gamma` as a natural cubic spline on the
//! knot grid with `log gamma(1) = 0`, so `gamma(1) = 1` and the annual level
//! sits in the intercept.

mod diagnostics;
mod groups;
mod gwm;
mod irls;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::portfolio::{Portfolio, PolicyRecord, COVARIATES};
use crate::spline::{penalty_matrix, ExposureCurve, ExposureFunction, KnotGrid};
use crate::tweedie::check_power;

pub use diagnostics::{consistency_gradient, consistency_gradient_sum, kl_criterion};
pub use groups::{
    bootstrap_curve_difference, difference_grid, fit_group_splines, search_cutpoint, BmsGrouping, BootstrapBand,
    CutScore, CutpointSearch,
};
pub use gwm::fit_gwm;
pub use irls::{default_lambda_grid, GcvPoint, IrlsStep};

pub(crate) use irls::Problem;

pub const FIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightScheme {
    /// `mu = t exp(x'b)`, weight 1.
    TraditionalOffset,
    /// `mu = t exp(x'b)`, weight `t^(p-1)`.
    TraditionalRatio,
    /// Smooth `gamma(t)`, weight 1.
    Cwm,
    /// Smooth `gamma(t)`, weight `(gamma(t)/gamma(1))^(p-1)`, fitted iteratively.
    Gwm,
    /// Smooth `gamma(t)`, weight `t^(p-1)`.
    Ewm,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 5] =
        [Self::TraditionalOffset, Self::TraditionalRatio, Self::Cwm, Self::Gwm, Self::Ewm];

    pub fn is_flexible(&self) -> bool {
        matches!(self, Self::Cwm | Self::Gwm | Self::Ewm)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::TraditionalOffset => "offset",
            Self::TraditionalRatio => "ratio",
            Self::Cwm => "cwm",
            Self::Gwm => "gwm",
            Self::Ewm => "ewm",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme {s:?}")))
    }
}

/// Which covariates enter the linear predictor besides the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Design {
    /// Zero-based indices into `x1..x5`.
    pub covariates: Vec<usize>,
    /// Include `bms - 100`.
    pub bms: bool,
}

impl Default for Design {
    fn default() -> Self {
        Self { covariates: (0..COVARIATES).collect(), bms: true }
    }
}

impl Design {
    pub fn intercept_only() -> Self {
        Self { covariates: Vec::new(), bms: false }
    }

    pub fn len(&self) -> usize {
        1 + self.covariates.len() + self.bms as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["intercept".to_string()];
        v.extend(self.covariates.iter().map(|j| format!("x{}", j + 1)));
        if self.bms {
            v.push("bms".to_string());
        }
        v
    }

    pub fn row(&self, r: &PolicyRecord) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        self.extend_row(r, &mut v);
        v
    }

    fn extend_row(&self, r: &PolicyRecord, out: &mut Vec<f64>) {
        out.push(1.0);
        out.extend(self.covariates.iter().map(|&j| r.covariates[j] as f64));
        if self.bms {
            out.push(r.bms_centered());
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = [false; COVARIATES];
        for &j in &self.covariates {
            if j >= COVARIATES || seen[j] {
                return Err(Error::InvalidParameter(format!("invalid covariate selection {:?}", self.covariates)));
            }
            seen[j] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub scheme: WeightScheme,
    pub power: f64,
    pub grid: KnotGrid,
    /// Curvature penalty weight; `None` selects it by GCV.
    pub lambda: Option<f64>,
    /// IRLS iteration cap.
    pub max_iter: usize,
    /// IRLS relative change tolerance on the penalized deviance.
    pub tol: f64,
    /// Cap on gamma-weight refits after initialization.
    pub gwm_max_iter: usize,
    /// Stopping tolerance on the knot-wise relative change of the GWM curve.
    pub gwm_tol: f64,
    pub design: Design,
}

impl FitSpec {
    pub fn new(scheme: WeightScheme) -> Self {
        Self {
            scheme,
            power: 1.42,
            grid: KnotGrid::default_exposure(),
            lambda: None,
            max_iter: 100,
            tol: 1e-8,
            gwm_max_iter: 50,
            gwm_tol: 1e-4,
            design: Design::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_power(self.power)?;
        if self.max_iter == 0 || self.gwm_max_iter == 0 {
            return Err(Error::InvalidParameter("iteration caps must be at least 1".into()));
        }
        if !(self.tol > 0.0) || !(self.gwm_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidParameter(format!("lambda must be finite and non-negative, got {l}")));
            }
        }
        self.design.validate()
    }
}

/// How expected loss scales with exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExposureEffect {
    /// `gamma(t) = t`.
    Proportional,
    /// `gamma(t) = exp(s(t))` for a spline `s` with `s(1) = 0`.
    Smooth { log_curve: ExposureCurve },
    /// `gamma` interpolated linearly between tabulated points and held
    /// constant below the first one.
    Schedule { exposures: Vec<f64>, values: Vec<f64> },
    /// One smooth log-curve per BMS group.
    Grouped { grouping: BmsGrouping, log_curves: [ExposureCurve; 2] },
}

impl ExposureEffect {
    /// `gamma(t)` for a contract at the given BMS level.
    pub fn gamma(&self, t: f64, bms: u8) -> f64 {
        self.log_gamma(t, bms).exp()
    }

    pub fn log_gamma(&self, t: f64, bms: u8) -> f64 {
        match self {
            ExposureEffect::Proportional => t.ln(),
            ExposureEffect::Smooth { log_curve } => log_curve.evaluate_unchecked(t),
            ExposureEffect::Schedule { exposures, values } => interpolate_schedule(exposures, values, t).ln(),
            ExposureEffect::Grouped { grouping, log_curves } => {
                log_curves[grouping.group_of(bms)].evaluate_unchecked(t)
            }
        }
    }

    /// `gamma` at the knots of a smooth curve.
    pub fn gamma_at_knots(&self) -> Option<Vec<f64>> {
        match self {
            ExposureEffect::Smooth { log_curve } => Some(log_curve.coefficients().iter().map(|c| c.exp()).collect()),
            _ => None,
        }
    }
}

pub(crate) fn interpolate_schedule(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    if t <= xs[0] {
        return ys[0];
    }
    let j = xs.partition_point(|&x| x < t).min(xs.len() - 1);
    let (x0, x1) = (xs[j - 1], xs[j]);
    let w = (t - x0) / (x1 - x0);
    ys[j - 1] * (1.0 - w) + ys[j] * w
}

/// Prior weight as a function of exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum WeightLaw {
    Unit,
    /// `t`.
    Exposure,
    /// `t^exponent`.
    ExposurePower { exponent: f64 },
    /// `exp(exponent * s(max(t, first knot)))`, i.e. `(gamma(t)/gamma(1))^(p-1)`
    /// for a log-curve with `s(1) = 0`.
    Gamma { log_curve: ExposureCurve, exponent: f64 },
}

impl WeightLaw {
    pub fn weight(&self, t: f64) -> f64 {
        match self {
            WeightLaw::Unit => 1.0,
            WeightLaw::Exposure => t,
            WeightLaw::ExposurePower { exponent } => t.powf(*exponent),
            WeightLaw::Gamma { log_curve, exponent } => {
                let tc = t.max(log_curve.grid().first());
                let at_one = *log_curve.coefficients().last().unwrap();
                (exponent * (log_curve.evaluate_unchecked(tc) - at_one)).exp()
            }
        }
    }

    pub fn weights(&self, exposures: &[f64]) -> Vec<f64> {
        exposures.iter().map(|&t| self.weight(t)).collect()
    }
}

/// Prior weights of a scheme. GWM needs the current `gamma` curve; the other
/// schemes ignore `curve`.
pub fn compute_weights(
    scheme: WeightScheme,
    exposures: &[f64],
    curve: Option<&dyn ExposureFunction>,
    power: f64,
) -> Result<Vec<f64>> {
    check_power(power)?;
    if let Some(&t) = exposures.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::ExposureOutOfRange(t));
    }
    match scheme {
        WeightScheme::Cwm | WeightScheme::TraditionalOffset => Ok(vec![1.0; exposures.len()]),
        WeightScheme::Ewm | WeightScheme::TraditionalRatio => {
            Ok(exposures.iter().map(|t| t.powf(power - 1.0)).collect())
        }
        WeightScheme::Gwm => {
            let curve = curve.ok_or_else(|| Error::InvalidParameter("GWM weights need a curve".into()))?;
            let at_one = curve.value(1.0);
            if !(at_one > 0.0) {
                return Err(Error::NonPositiveGamma { exposure: 1.0, value: at_one });
            }
            exposures
                .iter()
                .map(|&t| {
                    let g = curve.value(t);
                    if g > 0.0 {
                        Ok((g / at_one).powf(power - 1.0))
                    } else {
                        Err(Error::NonPositiveGamma { exposure: t, value: g })
                    }
                })
                .collect()
        }
    }
}

/// One GWM iteration: the curve `s_k` at the knots and its change from
/// `s_(k-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwmStep {
    pub iteration: usize,
    pub gamma_at_knots: Vec<f64>,
    /// `max_j |s_k - s_(k-1)| / max(|s_(k-1)|, 1e-8)` over knots.
    pub change: Option<f64>,
    /// Same metric on the implied weights `s^(p-1)`.
    pub weight_change: Option<f64>,
    pub irls_iterations: usize,
    pub damped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub scheme: WeightScheme,
    pub power: f64,
    pub design: Design,
    pub beta: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub exposure: ExposureEffect,
    pub weights: WeightLaw,
    pub lambda: f64,
    pub edf: f64,
    /// Pearson estimate of the dispersion.
    pub phi: f64,
    /// Weighted training deviance under the scheme's prior weights.
    pub deviance_train: f64,
    pub converged: bool,
    pub iterations: usize,
    pub irls_log: Vec<IrlsStep>,
    pub lambda_search: Vec<GcvPoint>,
    pub trace: Vec<GwmStep>,
}

impl FitResult {
    pub fn names(&self) -> Vec<String> {
        self.design.names()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names().iter().position(|n| n == name).map(|j| self.beta[j])
    }

    /// `x'b` without the exposure term.
    pub fn linear_predictor(&self, r: &PolicyRecord) -> f64 {
        self.design.row(r).iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }

    pub fn predict_record(&self, r: &PolicyRecord) -> f64 {
        (self.linear_predictor(r) + self.exposure.log_gamma(r.exposure, r.bms)).exp()
    }

    pub fn predict(&self, portfolio: &Portfolio) -> Vec<f64> {
        portfolio.records.iter().map(|r| self.predict_record(r)).collect()
    }

    /// Annual premium `exp(x'b)` (the mean at t = 1).
    pub fn annual_premium(&self, r: &PolicyRecord) -> f64 {
        self.linear_predictor(r).exp()
    }

    pub fn gamma(&self, t: f64) -> f64 {
        self.exposure.gamma(t, 100)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FitDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: FitDocument = serde_json::from_str(s)?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct FitDocument {
    version: u32,
    scheme: WeightScheme,
    power: f64,
    design: Design,
    beta: BTreeMap<String, f64>,
    std_errors: BTreeMap<String, f64>,
    exposure: ExposureEffect,
    weights: WeightLaw,
    lambda: f64,
    edf: f64,
    phi: f64,
    deviance_train: f64,
    converged: bool,
    iterations: usize,
    irls_log: Vec<IrlsStep>,
    lambda_search: Vec<GcvPoint>,
    trace: Vec<GwmStep>,
}

impl From<&FitResult> for FitDocument {
    fn from(f: &FitResult) -> Self {
        let names = f.names();
        FitDocument {
            version: FIT_FORMAT_VERSION,
            scheme: f.scheme,
            power: f.power,
            design: f.design.clone(),
            beta: names.iter().cloned().zip(f.beta.iter().copied()).collect(),
            std_errors: names.iter().cloned().zip(f.std_errors.iter().copied()).collect(),
            exposure: f.exposure.clone(),
            weights: f.weights.clone(),
            lambda: f.lambda,
            edf: f.edf,
            phi: f.phi,
            deviance_train: f.deviance_train,
            converged: f.converged,
            iterations: f.iterations,
            irls_log: f.irls_log.clone(),
            lambda_search: f.lambda_search.clone(),
            trace: f.trace.clone(),
        }
    }
}

impl TryFrom<FitDocument> for FitResult {
    type Error = Error;

    fn try_from(d: FitDocument) -> Result<Self> {
        if d.version != FIT_FORMAT_VERSION {
            return Err(Error::InvalidParameter(format!("unsupported fit format version {}", d.version)));
        }
        d.design.validate()?;
        let names = d.design.names();
        let pick = |m: &BTreeMap<String, f64>| -> Result<Vec<f64>> {
            names
                .iter()
                .map(|n| m.get(n).copied().ok_or_else(|| Error::InvalidParameter(format!("missing coefficient {n}"))))
                .collect()
        };
        Ok(FitResult {
            scheme: d.scheme,
            power: d.power,
            beta: pick(&d.beta)?,
            std_errors: pick(&d.std_errors)?,
            design: d.design,
            exposure: d.exposure,
            weights: d.weights,
            lambda: d.lambda,
            edf: d.edf,
            phi: d.phi,
            deviance_train: d.deviance_train,
            converged: d.converged,
            iterations: d.iterations,
            irls_log: d.irls_log,
            lambda_search: d.lambda_search,
            trace: d.trace,
        })
    }
}

/// Fits the model named by `spec.scheme`. GWM is dispatched to [`fit_gwm`].
pub fn fit(portfolio: &Portfolio, spec: &FitSpec) -> Result<FitResult> {
    spec.validate()?;
    if portfolio.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    let exposures = portfolio.exposures();
    match spec.scheme {
        WeightScheme::Gwm => fit_gwm(portfolio, spec),
        WeightScheme::TraditionalOffset => fit_fixed(portfolio, spec, ExposureEffect::Proportional, WeightLaw::Unit),
        WeightScheme::TraditionalRatio => fit_fixed(
            portfolio,
            spec,
            ExposureEffect::Proportional,
            WeightLaw::ExposurePower { exponent: spec.power - 1.0 },
        ),
        WeightScheme::Cwm => fit_smooth(portfolio, spec, WeightLaw::Unit, &WeightLaw::Unit.weights(&exposures), spec.lambda),
        WeightScheme::Ewm => {
            let law = WeightLaw::ExposurePower { exponent: spec.power - 1.0 };
            let w = law.weights(&exposures);
            fit_smooth(portfolio, spec, law, &w, spec.lambda)
        }
    }
}

/// Fits a single smooth log-curve with the given prior weights.
pub(crate) fn fit_smooth(
    portfolio: &Portfolio,
    spec: &FitSpec,
    law: WeightLaw,
    weights: &[f64],
    lambda: Option<f64>,
) -> Result<FitResult> {
    fit_smooth_from(portfolio, spec, law, weights, lambda, None)
}

pub(crate) fn fit_smooth_from(
    portfolio: &Portfolio,
    spec: &FitSpec,
    law: WeightLaw,
    weights: &[f64],
    lambda: Option<f64>,
    start: Option<&[f64]>,
) -> Result<FitResult> {
    let problem = smooth_problem(portfolio, spec, None, weights)?;
    let (sol, search) = solve_with_lambda(&problem, lambda, start, spec)?;
    let px = spec.design.len();
    let mut coef = sol.theta[px..].to_vec();
    coef.push(0.0);
    let log_curve = ExposureCurve::new(spec.grid.clone(), coef)?;
    Ok(assemble(spec, &problem, sol, search, ExposureEffect::Smooth { log_curve }, law))
}

/// Fits `beta` with a fixed exposure term entering as an offset.
pub fn fit_fixed(portfolio: &Portfolio, spec: &FitSpec, exposure: ExposureEffect, law: WeightLaw) -> Result<FitResult> {
    spec.validate()?;
    if portfolio.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    let weights = law.weights(&portfolio.exposures());
    let mut offset = Vec::with_capacity(portfolio.len());
    for r in &portfolio.records {
        let g = exposure.gamma(r.exposure, r.bms);
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::NonPositiveGamma { exposure: r.exposure, value: g });
        }
        offset.push(g.ln());
    }
    let (z, q) = design_matrix(portfolio, &spec.design, None, &spec.grid);
    let problem = Problem::new(
        z,
        q,
        portfolio.losses(),
        offset,
        &weights,
        DMatrix::zeros(q, q),
        spec.power,
        spec.design.names(),
    )?;
    let sol = problem.solve(0.0, None, spec.max_iter, spec.tol)?;
    Ok(assemble(spec, &problem, sol, Vec::new(), exposure, law))
}

pub(crate) fn solve_with_lambda(
    problem: &Problem,
    lambda: Option<f64>,
    start: Option<&[f64]>,
    spec: &FitSpec,
) -> Result<(irls::Solution, Vec<GcvPoint>)> {
    match lambda {
        Some(l) => Ok((problem.solve(l, start, spec.max_iter, spec.tol)?, Vec::new())),
        None => problem.select_lambda(&default_lambda_grid(), spec.max_iter, spec.tol),
    }
}

/// Design with intercept, selected covariates and, unless `spline` is `None`,
/// spline columns for every knot but the last. With a grouping, each group
/// gets its own block of spline columns.
pub(crate) fn design_matrix(
    portfolio: &Portfolio,
    design: &Design,
    spline: Option<Option<&BmsGrouping>>,
    grid: &KnotGrid,
) -> (Vec<f64>, usize) {
    let px = design.len();
    let kb = grid.len() - 1;
    let blocks = match spline {
        None => 0,
        Some(None) => 1,
        Some(Some(_)) => 2,
    };
    let q = px + blocks * kb;
    let mut z = Vec::with_capacity(portfolio.len() * q);
    for r in &portfolio.records {
        design.extend_row(r, &mut z);
        if blocks == 0 {
            continue;
        }
        let basis = grid.basis_row(r.exposure).expect("validated exposure");
        let g = match spline {
            Some(Some(grouping)) => grouping.group_of(r.bms),
            _ => 0,
        };
        for b in 0..blocks {
            if b == g {
                z.extend_from_slice(&basis[..kb]);
            } else {
                z.extend(std::iter::repeat_n(0.0, kb));
            }
        }
    }
    (z, q)
}

pub(crate) fn spline_names(grid: &KnotGrid, prefix: &str) -> Vec<String> {
    grid.knots()[..grid.len() - 1].iter().map(|k| format!("{prefix}s({k})")).collect()
}

pub(crate) fn smooth_problem(
    portfolio: &Portfolio,
    spec: &FitSpec,
    grouping: Option<&BmsGrouping>,
    weights: &[f64],
) -> Result<Problem> {
    if portfolio.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    let (z, q) = design_matrix(portfolio, &spec.design, Some(grouping), &spec.grid);
    let px = spec.design.len();
    let kb = spec.grid.len() - 1;
    let s = penalty_matrix(&spec.grid);
    let mut penalty = DMatrix::zeros(q, q);
    let mut names = spec.design.names();
    let blocks = if grouping.is_some() { 2 } else { 1 };
    for b in 0..blocks {
        let o = px + b * kb;
        penalty.view_mut((o, o), (kb, kb)).copy_from(&s.view((0, 0), (kb, kb)));
        names.extend(spline_names(&spec.grid, if blocks == 2 { ["g1:", "g2:"][b] } else { "" }));
    }
    Problem::new(z, q, portfolio.losses(), vec![0.0; portfolio.len()], weights, penalty, spec.power, names)
}

fn assemble(
    spec: &FitSpec,
    problem: &Problem,
    sol: irls::Solution,
    lambda_search: Vec<GcvPoint>,
    exposure: ExposureEffect,
    weights: WeightLaw,
) -> FitResult {
    let px = spec.design.len();
    let std_errors = (0..px).map(|j| (sol.phi * sol.inverse[(j, j)]).sqrt()).collect();
    FitResult {
        scheme: spec.scheme,
        power: spec.power,
        design: spec.design.clone(),
        beta: sol.theta[..px].to_vec(),
        std_errors,
        exposure,
        weights,
        lambda: sol.lambda,
        edf: sol.edf,
        phi: sol.phi,
        deviance_train: sol.deviance * problem.weight_scale,
        converged: sol.converged,
        iterations: sol.iterations,
        irls_log: sol.log,
        lambda_search,
        trace: Vec::new(),
    }
}
