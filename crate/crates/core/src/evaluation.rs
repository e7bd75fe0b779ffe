//! Model-comparison scores: normalized deviance, concentration and Lorenz
//! curves with the area between them, and Murphy diagrams.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::portfolio::Portfolio;
use crate::tweedie::{check_power, unit_deviance};

/// Normalized deviances are multiplied by this for display.
pub const DEVIANCE_DISPLAY_SCALE: f64 = 100.0;

/// Points on the default Murphy grid.
pub const MURPHY_POINTS: usize = 201;

/// `sum_i w_i d(y_i, mu_i)` with `w_i = omega_i / sum_j omega_j`.
pub fn normalized_deviance(y: &[f64], mu: &[f64], omega: &[f64], power: f64) -> Result<f64> {
    if y.len() != mu.len() || y.len() != omega.len() {
        return Err(Error::LengthMismatch(format!("y {}, mu {}, weights {}", y.len(), mu.len(), omega.len())));
    }
    check_power(power)?;
    let total: f64 = omega.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeight);
    }
    let mut acc = 0.0;
    for ((&y, &m), &w) in y.iter().zip(mu).zip(omega) {
        acc += w * unit_deviance(y, m, power)?;
    }
    Ok(acc / total)
}

/// Normalized deviance of a fit on `portfolio`, weighted by the fit's own
/// prior-weight law.
pub fn fit_deviance(fit: &FitResult, portfolio: &Portfolio) -> Result<f64> {
    let omega = fit.weights.weights(&portfolio.exposures());
    normalized_deviance(&portfolio.losses(), &fit.predict(portfolio), &omega, fit.power)
}

/// Empirical concentration (`cc`) and Lorenz (`lc`) curves at `theta = k/n`,
/// `k = 0..=n`, after sorting by premium (stable in the original index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePair {
    pub theta: Vec<f64>,
    pub cc: Vec<f64>,
    pub lc: Vec<f64>,
}

/// Rescales `mu` to global balance, `sum mu_c = sum y`.
pub fn rescale(y: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    let (sy, sm): (f64, f64) = (y.iter().sum(), mu.iter().sum());
    if !(sy > 0.0) {
        return Err(Error::AllZeroLosses);
    }
    if !(sm > 0.0) {
        return Err(Error::InvalidParameter("premiums must have a positive total".into()));
    }
    Ok(mu.iter().map(|m| m * sy / sm).collect())
}

pub fn concentration_lorenz(y: &[f64], mu: &[f64]) -> Result<CurvePair> {
    if y.len() != mu.len() {
        return Err(Error::LengthMismatch(format!("y {}, mu {}", y.len(), mu.len())));
    }
    if y.is_empty() {
        return Err(Error::EmptyPoints);
    }
    if let Some(m) = mu.iter().find(|m| !m.is_finite() || **m < 0.0) {
        return Err(Error::InvalidParameter(format!("premium {m} is not a finite non-negative value")));
    }
    let mu_c = rescale(y, mu)?;
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| mu_c[a].total_cmp(&mu_c[b]));
    let n = y.len();
    let (sy, sm): (f64, f64) = (y.iter().sum(), mu_c.iter().sum());
    let mut theta = Vec::with_capacity(n + 1);
    let mut cc = Vec::with_capacity(n + 1);
    let mut lc = Vec::with_capacity(n + 1);
    theta.push(0.0);
    cc.push(0.0);
    lc.push(0.0);
    let (mut ay, mut am) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        ay += y[i];
        am += mu_c[i];
        theta.push((k + 1) as f64 / n as f64);
        cc.push(ay / sy);
        lc.push(am / sm);
    }
    *cc.last_mut().unwrap() = 1.0;
    *lc.last_mut().unwrap() = 1.0;
    Ok(CurvePair { theta, cc, lc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaScores {
    /// `int |cc - lc|`.
    pub area: f64,
    /// `int (cc - lc)`.
    pub abc: f64,
}

/// Integrates `cc - lc`, linear between points, exactly: segments where the
/// difference changes sign are split at the crossing.
pub fn area_between(curves: &CurvePair) -> Result<AreaScores> {
    let CurvePair { theta, cc, lc } = curves;
    if theta.len() != cc.len() || theta.len() != lc.len() {
        return Err(Error::GridMismatch(format!("theta {}, cc {}, lc {}", theta.len(), cc.len(), lc.len())));
    }
    let (mut area, mut abc) = (0.0, 0.0);
    for j in 1..theta.len() {
        let h = theta[j] - theta[j - 1];
        let (d0, d1) = (cc[j - 1] - lc[j - 1], cc[j] - lc[j]);
        abc += h * (d0 + d1) / 2.0;
        area += if d0 * d1 >= 0.0 {
            h * (d0.abs() + d1.abs()) / 2.0
        } else {
            // two triangles meeting at the zero crossing
            h * (d0 * d0 + d1 * d1) / (2.0 * (d0.abs() + d1.abs()))
        };
    }
    Ok(AreaScores { area, abc })
}

/// 201 equispaced points from 0 to `1.05 max(mu)`.
pub fn default_m_grid(mu: &[f64]) -> Vec<f64> {
    let top = 1.05 * mu.iter().copied().fold(0.0, f64::max);
    (0..MURPHY_POINTS).map(|j| top * j as f64 / (MURPHY_POINTS - 1) as f64).collect()
}

/// Empirical elementary scores `(1 / 2n) sum_i (m - y_i) 1{mu_i > m}` for
/// each `m` in `m_grid`.
pub fn murphy_curve(y: &[f64], mu: &[f64], m_grid: &[f64]) -> Result<Vec<f64>> {
    if y.len() != mu.len() {
        return Err(Error::LengthMismatch(format!("y {}, mu {}", y.len(), mu.len())));
    }
    if y.is_empty() || m_grid.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mu[a].total_cmp(&mu[b]));
    let sorted_mu: Vec<f64> = order.iter().map(|&i| mu[i]).collect();
    // suffix[k] = sum of y over the contracts ranked k.. by premium
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + y[order[k]];
    }
    Ok(m_grid
        .iter()
        .map(|&m| {
            let k = sorted_mu.partition_point(|&v| v <= m);
            (m * (n - k) as f64 - suffix[k]) / (2.0 * n as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dominance {
    /// `loss_a(m) <= loss_b(m) + tolerance` at every grid point.
    pub dominates: bool,
    /// Share of grid points where the inequality holds.
    pub fraction: f64,
    /// Grid values `m` where it fails.
    pub violations: Vec<f64>,
}

/// Whether curve `a` lies below curve `b` (lower expected loss) on the
/// common grid `m`.
pub fn murphy_dominates(m: &[f64], loss_a: &[f64], loss_b: &[f64], tolerance: f64) -> Result<Dominance> {
    if m.len() != loss_a.len() || m.len() != loss_b.len() {
        return Err(Error::GridMismatch(format!("m {}, a {}, b {}", m.len(), loss_a.len(), loss_b.len())));
    }
    if m.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let violations: Vec<f64> =
        m.iter().zip(loss_a.iter().zip(loss_b)).filter(|(_, (a, b))| **a > **b + tolerance).map(|(m, _)| *m).collect();
    Ok(Dominance {
        dominates: violations.is_empty(),
        fraction: 1.0 - violations.len() as f64 / m.len() as f64,
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Train,
    Test,
}

impl DatasetTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetTag::Train => "train",
            DatasetTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub dataset_tag: DatasetTag,
    /// Raw normalized deviance.
    pub deviance: f64,
    /// `deviance * DEVIANCE_DISPLAY_SCALE`.
    pub deviance_display: f64,
    pub area: f64,
    pub abc: f64,
    /// `(m, loss)` pairs.
    pub murphy: Vec<(f64, f64)>,
}

/// All scores of `fit` on `portfolio`. `m_grid` defaults to
/// [`default_m_grid`] of the fit's premiums.
pub fn score(
    model: &str,
    fit: &FitResult,
    portfolio: &Portfolio,
    tag: DatasetTag,
    m_grid: Option<&[f64]>,
) -> Result<(ScoreReport, CurvePair)> {
    if portfolio.is_empty() {
        return Err(Error::EmptyPortfolio);
    }
    let y = portfolio.losses();
    let mu = fit.predict(portfolio);
    let deviance = fit_deviance(fit, portfolio)?;
    let curves = concentration_lorenz(&y, &mu)?;
    let AreaScores { area, abc } = area_between(&curves)?;
    let grid = m_grid.map(<[f64]>::to_vec).unwrap_or_else(|| default_m_grid(&mu));
    let loss = murphy_curve(&y, &mu, &grid)?;
    let report = ScoreReport {
        model: model.to_string(),
        dataset_tag: tag,
        deviance,
        deviance_display: deviance * DEVIANCE_DISPLAY_SCALE,
        area,
        abc,
        murphy: grid.into_iter().zip(loss).collect(),
    };
    Ok((report, curves))
}

/// CSV `theta,cc,lc`.
pub fn write_curves<W: Write>(curves: &CurvePair, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["theta", "cc", "lc"])?;
    for ((t, c), l) in curves.theta.iter().zip(&curves.cc).zip(&curves.lc) {
        w.write_record([t.to_string(), c.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV `m,loss_<model>...` for curves on a shared grid.
pub fn write_murphy<W: Write>(m: &[f64], curves: &[(&str, &[f64])], writer: W) -> Result<()> {
    if let Some((name, c)) = curves.iter().find(|(_, c)| c.len() != m.len()) {
        return Err(Error::GridMismatch(format!("curve {name} has {} points, grid {}", c.len(), m.len())));
    }
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> =
        std::iter::once("m".to_string()).chain(curves.iter().map(|(n, _)| format!("loss_{n}"))).collect();
    w.write_record(&header)?;
    for (j, v) in m.iter().enumerate() {
        let row: Vec<String> = std::iter::once(v.to_string()).chain(curves.iter().map(|(_, c)| c[j].to_string())).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_murphy(y: &[f64], mu: &[f64], m: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..y.len() {
            if mu[i] > m {
                s += m - y[i];
            }
        }
        s / (2.0 * y.len() as f64)
    }

    #[test]
    fn deviance_examples() {
        assert_eq!(normalized_deviance(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 3.0], 1.42).unwrap(), 0.0);
        // (d(0,1) + d(2,1)) / 2 = (4 + 12 - 8 sqrt 2) / 2
        let expected = 8.0 - 4.0 * 2f64.sqrt();
        let d = normalized_deviance(&[0.0, 2.0], &[1.0, 1.0], &[1.0, 1.0], 1.5).unwrap();
        assert!((d - expected).abs() < 1e-14, "{d}");
        let d7 = normalized_deviance(&[0.0, 2.0], &[1.0, 1.0], &[7.0, 7.0], 1.5).unwrap();
        assert!((d7 - d).abs() < 1e-15);
        assert!(matches!(normalized_deviance(&[1.0], &[1.0], &[0.0], 1.5), Err(Error::ZeroWeight)));
    }

    #[test]
    fn curve_examples() {
        let c = concentration_lorenz(&[3.0], &[5.0]).unwrap();
        assert_eq!((c.theta, c.cc, c.lc), (vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]));
        // anti-ranked: sorted premiums 1,2,3,4 carry losses 7,2,1,0
        let c = concentration_lorenz(&[0.0, 1.0, 2.0, 7.0], &[4.0, 3.0, 2.0, 1.0]).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(&c.cc, &[0.0, 0.7, 0.9, 1.0, 1.0]));
        assert!(close(&c.lc, &[0.0, 0.1, 0.3, 0.6, 1.0]));
        assert!(c.cc[1] > c.lc[1]);
        let s = area_between(&c).unwrap();
        // 0.25 * (0.3 + 0.6 + 0.5 + 0.2)
        assert!((s.area - 0.4).abs() < 1e-15 && (s.abc - 0.4).abs() < 1e-15);
        assert!(matches!(concentration_lorenz(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::AllZeroLosses)));
    }

    #[test]
    fn area_compensation_example() {
        let c = CurvePair {
            theta: vec![0.0, 0.5, 0.5, 1.0],
            cc: vec![0.1, 0.1, -0.1, -0.1],
            lc: vec![0.0; 4],
        };
        let s = area_between(&c).unwrap();
        assert!((s.area - 0.1).abs() < 1e-15);
        assert_eq!(s.abc, 0.0);
        // crossing inside a segment
        let c = CurvePair { theta: vec![0.0, 1.0], cc: vec![0.1, -0.1], lc: vec![0.0, 0.0] };
        assert!((area_between(&c).unwrap().area - 0.05).abs() < 1e-15);
    }

    #[test]
    fn murphy_examples() {
        assert_eq!(murphy_curve(&[0.0], &[1.0], &[0.5]).unwrap(), vec![0.25]);
        let l = murphy_curve(&[0.0, 1.0, 4.0], &[2.0; 3], &[1.5, 2.0, 3.0]).unwrap();
        assert!((l[0] + 0.5 / 6.0).abs() < 1e-15);
        assert_eq!(&l[1..], &[0.0, 0.0]);
        let g = default_m_grid(&[1.0, 2.0]);
        assert_eq!(g.len(), 201);
        assert!((g[200] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn dominance_examples() {
        let m = [0.0, 1.0, 2.0];
        let a = [0.1, 0.2, 0.3];
        assert!(murphy_dominates(&m, &a, &a, 0.0).unwrap().dominates);
        assert!(murphy_dominates(&m, &[0.0, 0.1, 0.2], &a, 0.0).unwrap().dominates);
        let d = murphy_dominates(&m, &[0.0, 0.3, 0.2], &a, 0.0).unwrap();
        assert!(!d.dominates);
        assert_eq!(d.violations, vec![1.0]);
        assert!((d.fraction - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(murphy_dominates(&m, &a[..2], &a, 0.0), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn csv_writers() {
        let c = concentration_lorenz(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_curves(&c, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "theta,cc,lc\n0,0,0\n0.5,0.3333333333333333,0.3333333333333333\n1,1,1\n");
        let mut buf = Vec::new();
        write_murphy(&[0.0, 1.0], &[("ewm", &[0.5, 0.0][..]), ("ratio", &[0.4, 0.1][..])], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "m,loss_ewm,loss_ratio\n0,0.5,0.4\n1,0,0.1\n");
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..=100).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..10.0], n),
                // coarse premiums so ties occur
                proptest::collection::vec((1u32..20).prop_map(|k| k as f64 * 0.25), n),
            )
        })
    }

    proptest! {
        #[test]
        fn murphy_matches_brute_force((y, mu) in arb_case()) {
            let grid = default_m_grid(&mu);
            let mut m: Vec<f64> = grid.clone();
            m.extend(mu.iter().copied());
            let fast = murphy_curve(&y, &mu, &m).unwrap();
            for (v, &mm) in fast.iter().zip(&m) {
                prop_assert!((v - brute_murphy(&y, &mu, mm)).abs() <= 1e-12);
            }
        }

        #[test]
        fn curve_invariants((y, mu) in arb_case(), c in 0.01f64..100.0) {
            prop_assume!(y.iter().sum::<f64>() > 0.0);
            let a = concentration_lorenz(&y, &mu).unwrap();
            prop_assert_eq!((a.cc[0], a.lc[0]), (0.0, 0.0));
            prop_assert_eq!((*a.cc.last().unwrap(), *a.lc.last().unwrap()), (1.0, 1.0));
            let scaled: Vec<f64> = mu.iter().map(|m| c * m).collect();
            let b = concentration_lorenz(&y, &scaled).unwrap();
            prop_assert_eq!(&a.cc, &b.cc);
            let r = rescale(&y, &mu).unwrap();
            let n = y.len() as f64;
            prop_assert!((r.iter().sum::<f64>() / n - y.iter().sum::<f64>() / n).abs() < 1e-10);
            let s = area_between(&a).unwrap();
            prop_assert!(s.area >= s.abc.abs() - 1e-15);
            prop_assert!(s.area <= 1.0);
        }

        #[test]
        fn proportional_premiums_have_zero_area(y in proptest::collection::vec(0.01f64..10.0, 1..100), c in 0.1f64..10.0) {
            let mu: Vec<f64> = y.iter().map(|v| c * v).collect();
            let a = concentration_lorenz(&y, &mu).unwrap();
            for (x, z) in a.cc.iter().zip(&a.lc) {
                prop_assert!((x - z).abs() < 1e-12);
            }
            prop_assert!(area_between(&a).unwrap().area < 1e-12);
        }
    }
}
