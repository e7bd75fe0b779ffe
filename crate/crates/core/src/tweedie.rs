//! Tweedie distribution with variance power strictly inside (1, 2).
//!
//! In that range a Tweedie variable is a Poisson sum of Gamma severities, so
//! sampling goes through the compound representation and never touches the
//! series normalizer of the density. Fitting and scoring only need the unit
//! deviance, which has a closed form.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean, dispersion, weight and variance power of a Tweedie law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TweedieParams {
    mu: f64,
    phi: f64,
    weight: f64,
    power: f64,
}

impl TweedieParams {
    pub fn new(mu: f64, phi: f64, weight: f64, power: f64) -> Result<Self> {
        for (name, v) in [("mu", mu), ("phi", phi), ("weight", weight)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        check_power(power)?;
        Ok(Self { mu, phi, weight, power })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    /// `(phi / w) * mu^p`.
    pub fn variance(&self) -> f64 {
        self.phi / self.weight * self.mu.powf(self.power)
    }

    pub fn to_compound(&self) -> CompoundRepresentation {
        let p = self.power;
        let poisson_mean = self.weight * self.mu.powf(2.0 - p) / ((2.0 - p) * self.phi);
        let gamma_shape = (2.0 - p) / (p - 1.0);
        let gamma_mean = (2.0 - p) * self.phi / (self.weight * self.mu.powf(1.0 - p));
        let rep = CompoundRepresentation { poisson_mean, gamma_shape, gamma_mean };
        debug_assert!(
            (rep.implied_mean() - self.mu).abs() <= 1e-12 * self.mu,
            "compound identity violated: {} vs {}",
            rep.implied_mean(),
            self.mu
        );
        rep
    }

    /// One draw of the loss cost.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sample_with_count(rng).1
    }

    /// One draw as `(claim count, loss cost)`.
    pub fn sample_with_count<R: Rng + ?Sized>(&self, rng: &mut R) -> (u32, f64) {
        self.to_compound().sample_with_count(rng)
    }
}

/// Poisson claim-count mean plus Gamma severity shape and mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompoundRepresentation {
    pub poisson_mean: f64,
    pub gamma_shape: f64,
    pub gamma_mean: f64,
}

impl CompoundRepresentation {
    /// Scale of the Gamma severity, `gamma_mean / gamma_shape`.
    pub fn gamma_scale(&self) -> f64 {
        self.gamma_mean / self.gamma_shape
    }

    /// Expected claim count times expected severity, which equals the Tweedie
    /// mean. Written with the scale it reads `poisson_mean * shape * scale`.
    pub fn implied_mean(&self) -> f64 {
        self.poisson_mean * self.gamma_shape * self.gamma_scale()
    }

    /// Probability of a zero loss, `exp(-poisson_mean)`.
    pub fn zero_mass(&self) -> f64 {
        (-self.poisson_mean).exp()
    }

    pub fn sample_with_count<R: Rng + ?Sized>(&self, rng: &mut R) -> (u32, f64) {
        let n = Poisson::new(self.poisson_mean)
            .expect("poisson mean is positive and finite")
            .sample(rng) as u32;
        if n == 0 {
            return (0, 0.0);
        }
        // rand_distr parameterizes Gamma by (shape, scale).
        let severity = Gamma::new(self.gamma_shape, self.gamma_scale()).expect("gamma parameters are positive");
        let total = (0..n).map(|_| severity.sample(rng)).sum();
        (n, total)
    }
}

pub(crate) fn check_power(power: f64) -> Result<()> {
    if power > 1.0 && power < 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("variance power must lie strictly in (1, 2), got {power}")))
    }
}

/// Unit deviance `2 [ y (y^(1-p) - mu^(1-p)) / (1-p) - (y^(2-p) - mu^(2-p)) / (2-p) ]`.
///
/// At `y = 0` the first term vanishes and the value is `2 mu^(2-p) / (2-p)`.
pub fn unit_deviance(y: f64, mu: f64, power: f64) -> Result<f64> {
    if y < 0.0 || y.is_nan() {
        return Err(Error::NegativeLoss(y));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidParameter(format!("mu must be positive, got {mu}")));
    }
    check_power(power)?;
    Ok(unit_deviance_unchecked(y, mu, power))
}

#[inline]
pub(crate) fn unit_deviance_unchecked(y: f64, mu: f64, p: f64) -> f64 {
    let mu_2p = mu.powf(2.0 - p);
    if y == 0.0 {
        return 2.0 * mu_2p / (2.0 - p);
    }
    let d = 2.0
        * (y * (y.powf(1.0 - p) - mu.powf(1.0 - p)) / (1.0 - p)
            - (y.powf(2.0 - p) - mu_2p) / (2.0 - p));
    // Cancellation can leave tiny negative values when y is close to mu.
    d.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variance_examples() {
        let v = TweedieParams::new(1.0, 2.0, 4.0, 1.42).unwrap().variance();
        assert_eq!(v, 0.5);
        let v = TweedieParams::new(4.0, 1.0, 1.0, 1.5).unwrap().variance();
        assert!((v - 8.0).abs() < 1e-12);
        // 0.25 * 2^1.42 from a 40-digit reference computation.
        let expected = 0.668_963_777_393_056_0;
        let v = TweedieParams::new(2.0, 0.5, 2.0, 1.42).unwrap().variance();
        assert!((v - expected).abs() < 1e-14, "{v} vs {expected}");
    }

    #[test]
    fn rejects_boundary_powers() {
        assert!(TweedieParams::new(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(TweedieParams::new(1.0, 1.0, 1.0, 2.0).is_err());
        assert!(TweedieParams::new(0.0, 1.0, 1.0, 1.5).is_err());
        assert!(TweedieParams::new(1.0, -1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn compound_examples() {
        let c = TweedieParams::new(1.0, 1.0, 1.0, 1.5).unwrap().to_compound();
        assert!((c.poisson_mean - 2.0).abs() < 1e-15);
        assert!((c.gamma_shape - 1.0).abs() < 1e-15);
        assert!((c.gamma_mean - 0.5).abs() < 1e-15);

        let c = TweedieParams::new(3.0, 2.0, 1.0, 1.42).unwrap().to_compound();
        // 3^0.58 / 1.16 from a 40-digit reference computation.
        let expected = 1.630_318_056_236_179_9;
        assert!((c.poisson_mean - expected).abs() < 1e-12);
        assert!((c.implied_mean() - 3.0).abs() < 3e-12);
        assert!((c.poisson_mean * c.gamma_mean - 3.0).abs() < 3e-12);
        // severity mean 0.58 * 2 * 3^0.42
        assert!((c.gamma_mean - 1.16 * 3f64.powf(0.42)).abs() < 1e-14);
    }

    #[test]
    fn unit_deviance_examples() {
        assert_eq!(unit_deviance(1.7, 1.7, 1.42).unwrap(), 0.0);
        assert!((unit_deviance(0.0, 1.0, 1.5).unwrap() - 4.0).abs() < 1e-14);
        // 2 [ 2 (2^-0.5 - 1) / (-0.5) - (2^0.5 - 1) / 0.5 ], with 2^0.5 = 1.4142135623730951
        let s = std::f64::consts::SQRT_2;
        let expected = 2.0 * (2.0 * (1.0 / s - 1.0) / -0.5 - (s - 1.0) / 0.5);
        let got = unit_deviance(2.0, 1.0, 1.5).unwrap();
        assert!(got > 0.0);
        assert!((got - expected).abs() < 1e-14);
        assert!((expected - 0.686_291_501_015_239_6).abs() < 1e-12);
        assert!(unit_deviance(-1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn zero_mass_and_mean_small_sample() {
        let params = TweedieParams::new(0.5, 1.0, 1.0, 1.42).unwrap();
        let rep = params.to_compound();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50_000;
        let draws: Vec<f64> = (0..n).map(|_| params.sample(&mut rng)).collect();
        let zeros = draws.iter().filter(|&&y| y == 0.0).count() as f64 / n as f64;
        let p0 = rep.zero_mass();
        let se = (p0 * (1.0 - p0) / n as f64).sqrt();
        assert!((zeros - p0).abs() < 4.0 * se, "{zeros} vs {p0}");
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() / 0.5 < 0.03);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let params = TweedieParams::new(2.0, 1.0, 1.0, 1.42).unwrap();
        let a: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..100).map(|_| params.sample(&mut rng)).collect()
        };
        let b: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..100).map(|_| params.sample(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn deviance_nonnegative_and_zero_only_at_mu(y in 0.0f64..50.0, mu in 0.01f64..50.0, p in 1.01f64..1.99) {
            let d = unit_deviance(y, mu, p).unwrap();
            prop_assert!(d >= 0.0);
            if (y - mu).abs() > 1e-3 * mu {
                prop_assert!(d > 0.0);
            }
            prop_assert_eq!(unit_deviance(mu, mu, p).unwrap(), 0.0);
        }

        #[test]
        fn compound_identity(mu in 1e-3f64..1e3, phi in 1e-2f64..1e2, w in 1e-2f64..1e2, p in 1.001f64..1.999) {
            let c = TweedieParams::new(mu, phi, w, p).unwrap().to_compound();
            prop_assert!((c.implied_mean() - mu).abs() <= 1e-12 * mu);
        }

        #[test]
        fn variance_increasing_in_mu(mut mus in proptest::collection::vec(1e-3f64..1e3, 2..20), phi in 0.1f64..10.0, p in 1.01f64..1.99) {
            mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mus.dedup();
            let vs: Vec<f64> = mus.iter().map(|&m| TweedieParams::new(m, phi, 1.0, p).unwrap().variance()).collect();
            for w in vs.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
        }
    }
}
