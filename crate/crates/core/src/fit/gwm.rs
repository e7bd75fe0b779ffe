use crate::error::{Error, Result};
use crate::portfolio::Portfolio;
use crate::spline::ExposureCurve;

use super::{fit_smooth, fit_smooth_from, ExposureEffect, FitResult, FitSpec, GwmStep, WeightLaw, WeightScheme};

const RISES_BEFORE_ABORT: usize = 3;
const DAMPING: f64 = 0.5;

/// Gamma-weight model by fixed-point iteration.
///
/// The first fit uses weights `t`; each later fit uses weights
/// `(s_k(t)/s_k(1))^(p-1)` from the previous curve `s_k`, with the smoothing
/// parameter held at the value chosen for the first fit. Iteration stops when
/// the knot-wise relative change of `s` falls below `gwm_tol`. If the change
/// grows three times in a row the run restarts once with weight updates
/// damped by one half; a second oscillation is an error.
pub fn fit_gwm(portfolio: &Portfolio, spec: &FitSpec) -> Result<FitResult> {
    spec.validate()?;
    if portfolio.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    let spec = FitSpec { scheme: WeightScheme::Gwm, ..spec.clone() };
    match iterate(portfolio, &spec, false) {
        Err(Error::GwmOscillation(_)) => iterate(portfolio, &spec, true),
        other => other,
    }
}

fn iterate(portfolio: &Portfolio, spec: &FitSpec, damped: bool) -> Result<FitResult> {
    let exposures = portfolio.exposures();
    let init_law = WeightLaw::Exposure;
    let init = fit_smooth(portfolio, spec, init_law.clone(), &init_law.weights(&exposures), spec.lambda)?;
    let lambda = init.lambda;
    let lambda_search = init.lambda_search.clone();
    let exponent = spec.power - 1.0;

    let mut trace = vec![GwmStep {
        iteration: 1,
        gamma_at_knots: init.exposure.gamma_at_knots().expect("smooth fit"),
        change: None,
        weight_change: None,
        irls_iterations: init.iterations,
        damped,
    }];
    let mut current = init;
    let mut weight_curve: Option<ExposureCurve> = None;
    let mut last_change: Option<f64> = None;
    let mut rises = 0;
    let mut settled = false;

    for k in 1..=spec.gwm_max_iter {
        let s_k = log_curve(&current).clone();
        let used = match (&weight_curve, damped) {
            (Some(prev), true) => blend(prev, &s_k, DAMPING)?,
            _ => s_k,
        };
        let law = WeightLaw::Gamma { log_curve: used.clone(), exponent };
        weight_curve = Some(used);
        let weights = law.weights(&exposures);
        let start = parameters(&current);
        let next = fit_smooth_from(portfolio, spec, law, &weights, Some(lambda), Some(&start))?;

        let old = trace.last().unwrap().gamma_at_knots.clone();
        let new = next.exposure.gamma_at_knots().expect("smooth fit");
        let change = relative_change(&old, &new, 1.0);
        let weight_change = relative_change(&old, &new, exponent);
        trace.push(GwmStep {
            iteration: k + 1,
            gamma_at_knots: new,
            change: Some(change),
            weight_change: Some(weight_change),
            irls_iterations: next.iterations,
            damped,
        });
        current = next;
        if change < spec.gwm_tol {
            settled = true;
            break;
        }
        if last_change.is_some_and(|c| change > c) {
            rises += 1;
            if rises >= RISES_BEFORE_ABORT {
                return Err(Error::GwmOscillation(format!(
                    "change rose {RISES_BEFORE_ABORT} times in a row, last {change:.3e} at iteration {}",
                    k + 1
                )));
            }
        } else {
            rises = 0;
        }
        last_change = Some(change);
    }

    current.scheme = WeightScheme::Gwm;
    current.converged = settled && current.converged;
    current.lambda_search = lambda_search;
    current.trace = trace;
    Ok(current)
}

fn log_curve(fit: &FitResult) -> &ExposureCurve {
    match &fit.exposure {
        ExposureEffect::Smooth { log_curve } => log_curve,
        _ => unreachable!("flexible fit"),
    }
}

/// Coefficient vector `(beta, spline coefficients without the last knot)`.
fn parameters(fit: &FitResult) -> Vec<f64> {
    let c = log_curve(fit).coefficients();
    fit.beta.iter().chain(&c[..c.len() - 1]).copied().collect()
}

fn blend(old: &ExposureCurve, new: &ExposureCurve, a: f64) -> Result<ExposureCurve> {
    let c = old.coefficients().iter().zip(new.coefficients()).map(|(o, n)| (1.0 - a) * o + a * n).collect();
    ExposureCurve::new(new.grid().clone(), c)
}

/// `max_j |new_j^e - old_j^e| / max(|old_j^e|, 1e-8)`.
pub(crate) fn relative_change(old: &[f64], new: &[f64], e: f64) -> f64 {
    old.iter()
        .zip(new)
        .map(|(&o, &n)| {
            let (o, n) = (o.powf(e), n.powf(e));
            (n - o).abs() / o.abs().max(1e-8)
        })
        .fold(0.0, f64::max)
}
