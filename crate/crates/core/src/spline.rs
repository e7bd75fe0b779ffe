//! Natural cubic regression splines in value-at-knot form.
//!
//! A curve is stored as its values `c_j` at the knots. The second derivatives
//! at the knots follow linearly from `c` (natural boundary: zero at both ends),
//! so every quantity here is a fixed linear map of the coefficient vector:
//! the basis row at a point, the curvature penalty, and evaluation.
//!
//! Below the first knot the spline continues linearly. Points above the last
//! knot (which is always 1) are outside the domain.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing knots in (0, 1] ending exactly at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrid {
    knots: Vec<f64>,
    /// Maps knot values to knot second derivatives (K x K, first and last rows zero).
    second_derivative_map: DMatrix<f64>,
}

impl KnotGrid {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 4 {
            return Err(Error::DegenerateGrid(format!("need at least 4 knots, got {}", knots.len())));
        }
        if !(knots[0] > 0.0) {
            return Err(Error::DegenerateGrid(format!("first knot must be positive, got {}", knots[0])));
        }
        if *knots.last().unwrap() != 1.0 {
            return Err(Error::DegenerateGrid("last knot must be exactly 1".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::DegenerateGrid("knots must be strictly increasing".into()));
        }
        let second_derivative_map = second_derivative_map(&knots);
        Ok(Self { knots, second_derivative_map })
    }

    /// 0.02, then nine equally spaced knots from 0.1 to 1.0.
    pub fn default_exposure() -> Self {
        let mut knots = vec![0.02];
        knots.extend((0..9).map(|i| 0.1 + 0.9 * i as f64 / 8.0));
        *knots.last_mut().unwrap() = 1.0;
        Self::new(knots).expect("default grid is valid")
    }

    /// `count` equally spaced knots from `first` to 1.
    pub fn uniform(first: f64, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::DegenerateGrid("need at least 2 knots".into()));
        }
        let mut knots: Vec<f64> =
            (0..count).map(|i| first + (1.0 - first) * i as f64 / (count - 1) as f64).collect();
        *knots.last_mut().unwrap() = 1.0;
        Self::new(knots)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.knots[0]
    }

    /// Cardinal basis values at `t`: the row `r` such that the spline with
    /// knot values `c` evaluates to `r . c`.
    pub fn basis_row(&self, t: f64) -> Result<Vec<f64>> {
        check_domain(t)?;
        let k = self.len();
        let f = &self.second_derivative_map;
        let mut row = vec![0.0; k];
        if t < self.knots[0] {
            // s(t) = c0 + s'(x0) (t - x0), with s'(x0) = (c1 - c0)/h0 - h0 M1 / 6.
            let h0 = self.knots[1] - self.knots[0];
            let dx = t - self.knots[0];
            row[0] += 1.0 - dx / h0;
            row[1] += dx / h0;
            for (i, r) in row.iter_mut().enumerate() {
                *r -= dx * h0 / 6.0 * f[(1, i)];
            }
            return Ok(row);
        }
        let (j, a, b, h) = self.locate(t);
        row[j] += a;
        row[j + 1] += b;
        let ca = (a * a * a - a) * h * h / 6.0;
        let cb = (b * b * b - b) * h * h / 6.0;
        if ca != 0.0 || cb != 0.0 {
            for (i, r) in row.iter_mut().enumerate() {
                *r += ca * f[(j, i)] + cb * f[(j + 1, i)];
            }
        }
        Ok(row)
    }

    /// Interval index and local coordinates for `t` in [first knot, 1].
    fn locate(&self, t: f64) -> (usize, f64, f64, f64) {
        let k = self.len();
        // Largest j with knots[j] <= t, capped so that j + 1 is valid.
        let j = match self.knots.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(idx) => idx.min(k - 2),
            Err(idx) => idx.saturating_sub(1).min(k - 2),
        };
        let h = self.knots[j + 1] - self.knots[j];
        let a = (self.knots[j + 1] - t) / h;
        let b = (t - self.knots[j]) / h;
        (j, a, b, h)
    }
}

fn check_domain(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::ExposureOutOfRange(t))
    }
}

fn second_derivative_map(knots: &[f64]) -> DMatrix<f64> {
    let k = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let m = k - 2;
    // Interior continuity of the first derivative:
    // h_{j-1} M_{j-1} + 2 (h_{j-1} + h_j) M_j + h_j M_{j+1} = 6 [(c_{j+1}-c_j)/h_j - (c_j-c_{j-1})/h_{j-1}]
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut r = DMatrix::<f64>::zeros(m, k);
    for i in 0..m {
        let j = i + 1;
        a[(i, i)] = 2.0 * (h[j - 1] + h[j]);
        if i > 0 {
            a[(i, i - 1)] = h[j - 1];
        }
        if i + 1 < m {
            a[(i, i + 1)] = h[j];
        }
        r[(i, j - 1)] = 6.0 / h[j - 1];
        r[(i, j)] = -6.0 / h[j - 1] - 6.0 / h[j];
        r[(i, j + 1)] = 6.0 / h[j];
    }
    let interior = a.lu().solve(&r).expect("diagonally dominant system is invertible");
    let mut f = DMatrix::<f64>::zeros(k, k);
    f.rows_mut(1, m).copy_from(&interior);
    f
}

/// Basis matrix with one row per point (n x K).
pub fn build_basis(points: &[f64], grid: &KnotGrid) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let mut out = DMatrix::<f64>::zeros(points.len(), grid.len());
    for (i, &t) in points.iter().enumerate() {
        let row = grid.basis_row(t)?;
        for (j, v) in row.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Curvature penalty `S` with `c' S c = integral of s''(t)^2` over [first knot, 1].
pub fn penalty_matrix(grid: &KnotGrid) -> DMatrix<f64> {
    let k = grid.len();
    let h: Vec<f64> = grid.knots.windows(2).map(|w| w[1] - w[0]).collect();
    // s'' is piecewise linear in the knot second derivatives M, so
    // integral s''^2 = M' Q M with the usual linear-element mass matrix Q.
    let mut q = DMatrix::<f64>::zeros(k, k);
    for (j, &hj) in h.iter().enumerate() {
        q[(j, j)] += hj / 3.0;
        q[(j + 1, j + 1)] += hj / 3.0;
        q[(j, j + 1)] += hj / 6.0;
        q[(j + 1, j)] += hj / 6.0;
    }
    let f = &grid.second_derivative_map;
    let s = f.transpose() * q * f;
    // Symmetrize away rounding.
    (&s + s.transpose()) * 0.5
}

/// A positive function of exposure on (0, 1].
pub trait ExposureFunction {
    fn value(&self, t: f64) -> f64;
}

impl<F: Fn(f64) -> f64> ExposureFunction for F {
    fn value(&self, t: f64) -> f64 {
        self(t)
    }
}

/// A natural cubic spline through `(knot_j, coefficient_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureCurve {
    grid: KnotGrid,
    coefficients: Vec<f64>,
    second: Vec<f64>,
}

impl ExposureCurve {
    pub fn new(grid: KnotGrid, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != grid.len() {
            return Err(Error::LengthMismatch(format!(
                "{} coefficients for {} knots",
                coefficients.len(),
                grid.len()
            )));
        }
        let second = (&grid.second_derivative_map * DVector::from_column_slice(&coefficients))
            .iter()
            .copied()
            .collect();
        Ok(Self { grid, coefficients, second })
    }

    /// Spline sampled from `f` at the knots.
    pub fn from_fn(grid: KnotGrid, f: impl Fn(f64) -> f64) -> Self {
        let c = grid.knots.iter().map(|&t| f(t)).collect();
        Self::new(grid, c).expect("lengths agree")
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn evaluate(&self, t: f64) -> Result<f64> {
        check_domain(t)?;
        Ok(self.evaluate_unchecked(t))
    }

    pub(crate) fn evaluate_unchecked(&self, t: f64) -> f64 {
        let x = &self.grid.knots;
        let c = &self.coefficients;
        if t < x[0] {
            let h0 = x[1] - x[0];
            let slope = (c[1] - c[0]) / h0 - h0 * self.second[1] / 6.0;
            return c[0] + slope * (t - x[0]);
        }
        let (j, a, b, h) = self.grid.locate(t);
        let m = &self.second;
        a * c[j] + b * c[j + 1] + ((a * a * a - a) * m[j] + (b * b * b - b) * m[j + 1]) * h * h / 6.0
    }

    /// Curve rescaled so that its value at t = 1 is exactly 1.
    pub fn normalize(&self) -> Result<Self> {
        let at_one = *self.coefficients.last().unwrap();
        if !(at_one > 0.0) {
            return Err(Error::NonNormalizable(at_one));
        }
        if at_one == 1.0 {
            return Ok(self.clone());
        }
        let mut c: Vec<f64> = self.coefficients.iter().map(|v| v / at_one).collect();
        *c.last_mut().unwrap() = 1.0;
        Self::new(self.grid.clone(), c)
    }

    /// `integral of s''^2` computed from the coefficients.
    pub fn roughness(&self) -> f64 {
        let s = penalty_matrix(&self.grid);
        let c = DVector::from_column_slice(&self.coefficients);
        (c.transpose() * s * &c)[(0, 0)]
    }
}

impl Serialize for KnotGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.knots.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KnotGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        KnotGrid::new(Vec::<f64>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl ExposureFunction for ExposureCurve {
    fn value(&self, t: f64) -> f64 {
        self.evaluate_unchecked(t)
    }
}

#[derive(Serialize, Deserialize)]
struct CurveDoc {
    knots: Vec<f64>,
    coefficients: Vec<f64>,
}

impl Serialize for ExposureCurve {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CurveDoc { knots: self.grid.knots.clone(), coefficients: self.coefficients.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ExposureCurve {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = CurveDoc::deserialize(d)?;
        let grid = KnotGrid::new(doc.knots).map_err(serde::de::Error::custom)?;
        ExposureCurve::new(grid, doc.coefficients).map_err(serde::de::Error::custom)
    }
}
