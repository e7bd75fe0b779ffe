//! Penalized IRLS for a Tweedie log-link model with a dense design.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tweedie::unit_deviance_unchecked;

const MAX_HALVINGS: u32 = 10;

/// One accepted IRLS update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlsStep {
    pub iteration: usize,
    /// Weighted deviance after the update.
    pub deviance: f64,
    /// Deviance plus curvature penalty after the update.
    pub penalized_deviance: f64,
    pub halvings: u32,
}

/// GCV score at one candidate smoothing parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcvPoint {
    pub lambda: f64,
    pub gcv: f64,
    pub edf: f64,
    pub converged: bool,
}

pub(crate) struct Problem {
    pub n: usize,
    pub q: usize,
    /// Row-major `n x q` design.
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    /// Prior weights rescaled to mean 1.
    pub weights: Vec<f64>,
    /// Mean of the weights before rescaling.
    pub weight_scale: f64,
    /// Unscaled curvature penalty on the coefficients (zero rows for
    /// unpenalized columns).
    pub penalty: DMatrix<f64>,
    pub power: f64,
    pub names: Vec<String>,
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub theta: Vec<f64>,
    /// Deviance under the rescaled weights.
    pub deviance: f64,
    pub edf: f64,
    pub phi: f64,
    /// `(Z'WZ + lambda S)^-1` at the solution.
    pub inverse: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IrlsStep>,
    pub lambda: f64,
}

impl Problem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        z: Vec<f64>,
        q: usize,
        y: Vec<f64>,
        offset: Vec<f64>,
        weights: &[f64],
        penalty: DMatrix<f64>,
        power: f64,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyPortfolio);
        }
        if z.len() != n * q || offset.len() != n || weights.len() != n {
            return Err(Error::LengthMismatch(format!("design for {n} rows and {q} columns")));
        }
        if y.iter().all(|&v| v == 0.0) {
            return Err(Error::AllZeroLosses);
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroWeight);
        }
        let weight_scale = total / n as f64;
        let weights = weights.iter().map(|w| w / weight_scale).collect();
        let p = Problem { n, q, z, y, offset, weights, weight_scale, penalty, power, names };
        p.check_columns()?;
        Ok(p)
    }

    /// Rejects columns that are identically zero and unpenalized, and
    /// non-intercept columns that are constant.
    fn check_columns(&self) -> Result<()> {
        for j in 0..self.q {
            let first = self.z[j];
            let constant = (0..self.n).all(|i| self.z[i * self.q + j] == first);
            let penalized = self.penalty.row(j).iter().any(|&v| v != 0.0);
            if constant && !penalized && (first == 0.0 || j > 0) {
                return Err(Error::RankDeficient(format!("column {} is constant", self.names[j])));
            }
        }
        Ok(())
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.q..(i + 1) * self.q]
    }

    fn eta(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.offset[i] + self.row(i).iter().zip(theta).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    fn deviance(&self, mu: &[f64]) -> f64 {
        self.y
            .iter()
            .zip(mu)
            .zip(&self.weights)
            .map(|((&y, &m), &w)| w * unit_deviance_unchecked(y, m, self.power))
            .sum()
    }

    fn penalty_value(&self, theta: &[f64], lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let t = DVector::from_column_slice(theta);
        lambda * (t.transpose() * &self.penalty * &t)[(0, 0)]
    }

    /// `Z'WZ` and `Z'W z` at `mu`.
    ///
    /// With `observed` the working weight is the observed information
    /// `w mu^(1-p) ((2-p) mu + (p-1) y)`, positive for `1 < p < 2`, which
    /// makes each update a full Newton step. Otherwise it is the expected
    /// information `w mu^(2-p)`; the two agree when `y = mu`.
    fn normal_equations(&self, eta: &[f64], mu: &[f64], observed: bool) -> (DMatrix<f64>, DVector<f64>) {
        let q = self.q;
        let p = self.power;
        let mut a = vec![0.0; q * q];
        let mut b = vec![0.0; q];
        for i in 0..self.n {
            let m = mu[i];
            let y = self.y[i];
            let curvature = if observed { (2.0 - p) * m + (p - 1.0) * y } else { m };
            let w = self.weights[i] * m.powf(1.0 - p) * curvature;
            let zt = eta[i] - self.offset[i] + (y - m) / curvature;
            let row = self.row(i);
            for j in 0..q {
                let wj = w * row[j];
                if wj == 0.0 {
                    continue;
                }
                b[j] += wj * zt;
                for k in j..q {
                    a[j * q + k] += wj * row[k];
                }
            }
        }
        for j in 0..q {
            for k in 0..j {
                a[j * q + k] = a[k * q + j];
            }
        }
        (DMatrix::from_row_slice(q, q, &a), DVector::from_vec(b))
    }

    fn factor(&self, m: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let max_diag = (0..self.q).map(|j| m[(j, j)].abs()).fold(0.0, f64::max);
        let chol = Cholesky::new(m)
            .ok_or_else(|| Error::RankDeficient("penalized information matrix is not positive definite".into()))?;
        let l = chol.l_dirty();
        for j in 0..self.q {
            if l[(j, j)] * l[(j, j)] <= 1e-11 * max_diag {
                return Err(Error::RankDeficient(format!("column {} is not identified", self.names[j])));
            }
        }
        Ok(chol)
    }

    fn mean(eta: &[f64]) -> Vec<f64> {
        eta.iter().map(|e| e.clamp(-700.0, 700.0).exp()).collect()
    }

    /// Penalized IRLS at a fixed smoothing parameter.
    pub fn solve(&self, lambda: f64, start: Option<&[f64]>, max_iter: usize, tol: f64) -> Result<Solution> {
        let (mut theta, mut eta, mut mu, mut objective) = match start {
            Some(s) => {
                let eta = self.eta(s);
                let mu = Self::mean(&eta);
                let obj = self.deviance(&mu) + self.penalty_value(s, lambda);
                (Some(s.to_vec()), eta, mu, obj)
            }
            None => {
                let ybar = self.y.iter().zip(&self.weights).map(|(y, w)| y * w).sum::<f64>() / self.n as f64;
                let mu: Vec<f64> = self.y.iter().map(|y| 0.5 * (y + ybar)).collect();
                let eta = mu.iter().map(|m| m.ln()).collect();
                (None, eta, mu, f64::INFINITY)
            }
        };
        let mut log = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let lambda_s = &self.penalty * lambda;
        for it in 1..=max_iter {
            iterations = it;
            let (xtwx, rhs) = self.normal_equations(&eta, &mu, true);
            let chol = self.factor(xtwx + &lambda_s)?;
            let target: Vec<f64> = chol.solve(&rhs).iter().copied().collect();
            let mut halvings = 0;
            let (cand, cand_eta, cand_mu, cand_obj) = match &theta {
                None => {
                    let e = self.eta(&target);
                    let m = Self::mean(&e);
                    let o = self.deviance(&m) + self.penalty_value(&target, lambda);
                    (target, e, m, o)
                }
                Some(old) => {
                    let mut step = 1.0;
                    loop {
                        let c: Vec<f64> = old.iter().zip(&target).map(|(a, b)| a + step * (b - a)).collect();
                        let e = self.eta(&c);
                        let m = Self::mean(&e);
                        let o = self.deviance(&m) + self.penalty_value(&c, lambda);
                        if o <= objective || halvings == MAX_HALVINGS {
                            break (c, e, m, o);
                        }
                        halvings += 1;
                        step *= 0.5;
                    }
                }
            };
            if cand_obj > objective {
                // No descent even after halving: the previous iterate is optimal
                // to working precision.
                converged = (cand_obj - objective).abs() / (objective.abs() + 0.1) < tol;
                break;
            }
            let change = (objective - cand_obj).abs() / (cand_obj.abs() + 0.1);
            let step = match &theta {
                Some(old) => old.iter().zip(&cand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
                None => f64::INFINITY,
            };
            let scale = 1.0 + cand.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            theta = Some(cand);
            eta = cand_eta;
            mu = cand_mu;
            objective = cand_obj;
            log.push(IrlsStep {
                iteration: it,
                deviance: self.deviance(&mu) * self.weight_scale,
                penalized_deviance: objective * self.weight_scale,
                halvings,
            });
            if change < tol && step < tol.sqrt() * scale {
                converged = true;
                break;
            }
        }
        let theta = theta.expect("at least one iteration");
        let (xtwx, _) = self.normal_equations(&eta, &mu, false);
        let chol = self.factor(&xtwx + &lambda_s)?;
        let inverse = chol.inverse();
        let edf = (&inverse * &xtwx).trace();
        let deviance = self.deviance(&mu);
        let pearson: f64 = (0..self.n)
            .map(|i| self.weights[i] * (self.y[i] - mu[i]).powi(2) / mu[i].powf(self.power))
            .sum();
        let phi = pearson / (self.n as f64 - edf).max(1.0);
        Ok(Solution { theta, deviance, edf, phi, inverse, iterations, converged, log, lambda })
    }

    pub fn gcv(&self, sol: &Solution) -> f64 {
        let n = self.n as f64;
        n * sol.deviance / (n - sol.edf).powi(2)
    }

    /// Scans `grid` from the largest value down, warm-starting each fit from
    /// the previous one, and returns the fit minimizing GCV.
    pub fn select_lambda(&self, grid: &[f64], max_iter: usize, tol: f64) -> Result<(Solution, Vec<GcvPoint>)> {
        let mut order: Vec<f64> = grid.to_vec();
        order.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut best: Option<(f64, Solution)> = None;
        let mut points = Vec::with_capacity(order.len());
        let mut warm: Option<Vec<f64>> = None;
        let mut last_err = None;
        for &lambda in &order {
            match self.solve(lambda, warm.as_deref(), max_iter, tol) {
                Ok(sol) => {
                    let v = self.gcv(&sol);
                    points.push(GcvPoint { lambda, gcv: v, edf: sol.edf, converged: sol.converged });
                    warm = Some(sol.theta.clone());
                    if best.as_ref().is_none_or(|(b, _)| v < *b) {
                        best = Some((v, sol));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        points.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).unwrap());
        match best {
            Some((_, sol)) => Ok((sol, points)),
            None => Err(last_err.unwrap_or(Error::EmptyPortfolio)),
        }
    }

    /// Gradient of the penalized weighted deviance (rescaled weights).
    #[cfg(test)]
    pub fn gradient(&self, theta: &[f64], lambda: f64) -> Vec<f64> {
        let eta = self.eta(theta);
        let mu = Self::mean(&eta);
        let mut g = vec![0.0; self.q];
        for i in 0..self.n {
            let s = -2.0 * self.weights[i] * (self.y[i] - mu[i]) * mu[i].powf(1.0 - self.power);
            for (gj, zj) in g.iter_mut().zip(self.row(i)) {
                *gj += s * zj;
            }
        }
        let st = &self.penalty * DVector::from_column_slice(theta);
        for j in 0..self.q {
            g[j] += 2.0 * lambda * st[j];
        }
        g
    }

    #[cfg(test)]
    pub fn objective(&self, theta: &[f64], lambda: f64) -> f64 {
        self.deviance(&Self::mean(&self.eta(theta))) + self.penalty_value(theta, lambda)
    }
}

/// 20 values log-spaced over `[1e-4, 1e4]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..20).map(|k| 10f64.powf(-4.0 + 8.0 * k as f64 / 19.0)).collect()
}
