use crate::error::{Error, Result};
use crate::portfolio::Portfolio;
use crate::spline::ExposureFunction;
use crate::tweedie::check_power;

use super::Design;

/// Gradient in `beta` of the expected Tweedie log-likelihood criterion for a
/// working mean `gamma(t) exp(x'beta)` when the truth is
/// `delta(t) exp(x'beta_true)`:
///
/// `(delta gamma^(1-p) e^((1-p) x'beta + x'beta_true) - gamma^(2-p) e^((2-p) x'beta)) x`.
pub fn consistency_gradient(
    beta: &[f64],
    beta_true: &[f64],
    x: &[f64],
    t: f64,
    delta: &dyn ExposureFunction,
    gamma: &dyn ExposureFunction,
    power: f64,
) -> Result<Vec<f64>> {
    check_power(power)?;
    if beta.len() != x.len() || beta_true.len() != x.len() {
        return Err(Error::LengthMismatch(format!(
            "beta {}, beta_true {}, x {}",
            beta.len(),
            beta_true.len(),
            x.len()
        )));
    }
    let (d, g) = (delta.value(t), gamma.value(t));
    if !(d > 0.0) || !(g > 0.0) {
        return Err(Error::NonPositiveGamma { exposure: t, value: d.min(g) });
    }
    let xb: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
    let xbt: f64 = x.iter().zip(beta_true).map(|(a, b)| a * b).sum();
    let p = power;
    let scale = d * g.powf(1.0 - p) * ((1.0 - p) * xb + xbt).exp() - g.powf(2.0 - p) * ((2.0 - p) * xb).exp();
    Ok(x.iter().map(|v| scale * v).collect())
}

/// Weighted average of [`consistency_gradient`] over a portfolio's contracts.
/// A positive component means the estimating equation pushes that
/// coefficient above `beta`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_gradient_sum(
    portfolio: &Portfolio,
    design: &Design,
    beta: &[f64],
    beta_true: &[f64],
    delta: &dyn ExposureFunction,
    gamma: &dyn ExposureFunction,
    weights: &[f64],
    power: f64,
) -> Result<Vec<f64>> {
    if weights.len() != portfolio.len() {
        return Err(Error::LengthMismatch(format!("{} weights for {} contracts", weights.len(), portfolio.len())));
    }
    if portfolio.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    let mut total = vec![0.0; design.len()];
    for (r, w) in portfolio.records.iter().zip(weights) {
        let g = consistency_gradient(beta, beta_true, &design.row(r), r.exposure, delta, gamma, power)?;
        for (acc, v) in total.iter_mut().zip(g) {
            *acc += w * v;
        }
    }
    let n = portfolio.len() as f64;
    Ok(total.into_iter().map(|v| v / n).collect())
}

/// `mu^(1-p) mu_true / (1-p) - mu^(2-p) / (2-p)`, maximized over `mu` at
/// `mu = mu_true`.
pub fn kl_criterion(mu: f64, mu_true: f64, power: f64) -> Result<f64> {
    check_power(power)?;
    if !(mu > 0.0) || !(mu_true > 0.0) {
        return Err(Error::InvalidParameter(format!("means must be positive, got {mu} and {mu_true}")));
    }
    let p = power;
    Ok(mu.powf(1.0 - p) * mu_true / (1.0 - p) - mu.powf(2.0 - p) / (2.0 - p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity(t: f64) -> f64 {
        t
    }

    #[test]
    fn zero_at_truth_when_proportional() {
        let b = [-1.0, 0.2, 0.5];
        let g = consistency_gradient(&b, &b, &[1.0, 1.0, 0.0], 0.3, &identity, &identity, 1.42).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn misspecified_proportional_value() {
        // 2^-0.18 - 2^-0.58 from a 40-digit reference computation
        let expected = 0.213_739_218_897_598_84;
        let delta = |t: f64| t.powf(0.6);
        let g = consistency_gradient(&[0.0], &[0.0], &[1.0], 0.5, &delta, &identity, 1.42).unwrap();
        assert!((g[0] - expected).abs() < 1e-15, "{}", g[0]);
        assert!(g[0] > 0.0);
    }

    #[test]
    fn kl_examples() {
        assert!((kl_criterion(1.0, 1.0, 1.5).unwrap() + 4.0).abs() < 1e-15);
        let h = 1e-6;
        let d = (kl_criterion(2.0 + h, 2.0, 1.42).unwrap() - kl_criterion(2.0 - h, 2.0, 1.42).unwrap()) / (2.0 * h);
        assert!(d.abs() < 1e-6);
        let (argmax, _) = (0..=990)
            .map(|k| 0.1 + k as f64 * 0.01)
            .map(|m| (m, kl_criterion(m, 2.0, 1.42).unwrap()))
            .fold((0.0, f64::NEG_INFINITY), |acc, (m, v)| if v > acc.1 { (m, v) } else { acc });
        assert!((argmax - 2.0).abs() <= 0.01 / 2.0 + 1e-12, "{argmax}");
        assert!(kl_criterion(0.0, 1.0, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn zero_when_working_exposure_matches_truth(
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            x in proptest::collection::vec(0.0f64..1.0, 4),
            t in 0.01f64..1.0,
            a in 0.2f64..1.5,
            k in 1.0f64..10.0,
            p in 1.05f64..1.95,
        ) {
            let f = move |s: f64| s.powf(a) * (1.0 + (-k * (s - 0.5)).exp()).recip() * 2.0;
            let g = consistency_gradient(&b, &b, &x, t, &f, &f, p).unwrap();
            for v in g {
                prop_assert!(v.abs() <= 1e-12, "{v}");
            }
        }
    }
}
