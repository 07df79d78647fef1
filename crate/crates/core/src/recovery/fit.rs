//! Fitting the rational model to correspondence pairs.
//!
//! Both the linear initializer and the Levenberg-Marquardt refinement run on
//! standardized mono and depth values; the solution is mapped back to raw
//! units by composing the two affine changes of variable with the fitted
//! Möbius map, which keeps the model in the same first-order family.

use nalgebra::{DMatrix, Matrix3, Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::model::{normalize, validate_model_with, FitStatus, Monotonicity, RationalModel, DEFAULT_RANGE_INFLATION};
use super::{CorrespondencePair, RecoveryError};

/// Parameter count of the model; fewer pairs can never be fitted.
pub const HARD_MIN_PAIRS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Square,
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub loss: Loss,
    /// Huber threshold in meters. `None` uses 1.345 robust sigmas of the
    /// initial residuals.
    pub huber_delta: Option<f64>,
    pub max_iter: usize,
    /// Relative cost decrease (and step norm) below which the fit stops.
    pub tol: f64,
    pub min_pairs: usize,
    pub range_inflation: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            loss: Loss::Square,
            huber_delta: None,
            max_iter: 200,
            tol: 1e-12,
            min_pairs: 8,
            range_inflation: DEFAULT_RANGE_INFLATION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// RMSE of `f(z_mono) - z_gt` over all pairs, meters.
    pub residual_rmse: f64,
    /// Same, for the linear initializer.
    pub init_rmse: f64,
    pub n_pairs: usize,
    pub n_inliers: usize,
    pub iterations: usize,
    pub status: FitStatus,
    pub huber_delta: Option<f64>,
}

/// `d r / d(a, b, c, d)` of the residual `f(m) - g` at `m`.
pub fn jacobian_row(theta: [f64; 4], m: f64) -> [f64; 4] {
    let [a, b, c, d] = theta;
    let n = a * m + b;
    let den = c * m + d;
    let den2 = den * den;
    [m / den, 1.0 / den, -m * n / den2, -n / den2]
}

pub fn residual_rmse(model: &RationalModel, pairs: &[CorrespondencePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sse: f64 = pairs
        .iter()
        .map(|p| {
            let r = model.eval(p.z_mono) - p.z_gt;
            r * r
        })
        .sum();
    (sse / pairs.len() as f64).sqrt()
}

/// Affine standardization of mono and depth values.
struct Frame {
    mu_m: f64,
    s_m: f64,
    mu_g: f64,
    s_g: f64,
}

impl Frame {
    fn new(pairs: &[CorrespondencePair]) -> Result<Self, RecoveryError> {
        let n = pairs.len() as f64;
        let mu_m = pairs.iter().map(|p| p.z_mono).sum::<f64>() / n;
        let mu_g = pairs.iter().map(|p| p.z_gt).sum::<f64>() / n;
        let s_m = (pairs.iter().map(|p| (p.z_mono - mu_m).powi(2)).sum::<f64>() / n).sqrt();
        let s_g = (pairs.iter().map(|p| (p.z_gt - mu_g).powi(2)).sum::<f64>() / n).sqrt();
        if !(s_m > 0.0) {
            return Err(RecoveryError::DegenerateSystem);
        }
        let s_g = if s_g > 0.0 { s_g } else { 1.0 };
        Ok(Self { mu_m, s_m, mu_g, s_g })
    }

    fn standardize(&self, pairs: &[CorrespondencePair]) -> (Vec<f64>, Vec<f64>) {
        pairs
            .iter()
            .map(|p| ((p.z_mono - self.mu_m) / self.s_m, (p.z_gt - self.mu_g) / self.s_g))
            .unzip()
    }

    /// Coefficients in raw units for a model fitted in standardized units.
    fn to_raw(&self, t: [f64; 4]) -> [f64; 4] {
        let [a, b, c, d] = t;
        let p00 = self.s_g * a + self.mu_g * c;
        let p01 = self.s_g * b + self.mu_g * d;
        [p00, -self.mu_m * p00 + self.s_m * p01, c, -self.mu_m * c + self.s_m * d]
    }
}

fn check_pairs(pairs: &[CorrespondencePair]) -> Result<(), RecoveryError> {
    for (index, p) in pairs.iter().enumerate() {
        if !(p.z_mono.is_finite() && p.z_gt.is_finite() && p.z_gt > 0.0) {
            return Err(RecoveryError::InvalidPair { index });
        }
    }
    Ok(())
}

fn mono_range(pairs: &[CorrespondencePair]) -> [f64; 2] {
    pairs.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], p| {
        [lo.min(p.z_mono), hi.max(p.z_mono)]
    })
}

/// Smallest right singular vector of the rows `[m, 1, -m g, -g]`.
fn linear_solve(ms: &[f64], gs: &[f64]) -> Result<[f64; 4], RecoveryError> {
    // zero padding keeps the full right basis when there are only 3 rows
    let rows = ms.len().max(4);
    let mut a = DMatrix::<f64>::zeros(rows, 4);
    for (i, (&m, &g)) in ms.iter().zip(gs).enumerate() {
        a[(i, 0)] = m;
        a[(i, 1)] = 1.0;
        a[(i, 2)] = -m * g;
        a[(i, 3)] = -g;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(RecoveryError::DegenerateSystem)?;
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let largest = sv[order[order.len() - 1]];
    if !(sv[order[1]] > 1e-10 * largest) {
        return Err(RecoveryError::DegenerateSystem);
    }
    let row = v_t.row(order[0]);
    normalize([row[0], row[1], row[2], row[3]]).ok_or(RecoveryError::DegenerateSystem)
}

/// Closed-form initializer from the homogeneous linearization
/// `g (c m + d) = a m + b`. Needs at least 3 pairs with distinct mono values.
pub fn fit_linear_init(pairs: &[CorrespondencePair]) -> Result<RationalModel, RecoveryError> {
    if pairs.len() < 3 {
        return Err(RecoveryError::InsufficientPairs {
            needed: 3,
            got: pairs.len(),
        });
    }
    check_pairs(pairs)?;
    let frame = Frame::new(pairs)?;
    let (ms, gs) = frame.standardize(pairs);
    let t = linear_solve(&ms, &gs)?;
    RationalModel::new(frame.to_raw(t), mono_range(pairs))
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

struct Problem<'a> {
    ms: &'a [f64],
    gs: &'a [f64],
    /// Huber threshold in standardized units, `None` for squares.
    delta: Option<f64>,
}

impl Problem<'_> {
    /// Residuals at `theta`, or `None` when the denominator vanishes or
    /// changes sign across the data (a pole inside the observed range).
    fn residuals(&self, theta: [f64; 4], out: &mut Vec<f64>) -> Option<()> {
        out.clear();
        let mut sign = 0.0;
        for (&m, &g) in self.ms.iter().zip(self.gs) {
            let den = theta[2] * m + theta[3];
            if den == 0.0 || !den.is_finite() {
                return None;
            }
            if sign == 0.0 {
                sign = den.signum();
            } else if den.signum() != sign {
                return None;
            }
            out.push((theta[0] * m + theta[1]) / den - g);
        }
        Some(())
    }

    fn cost(&self, r: &[f64]) -> f64 {
        match self.delta {
            None => r.iter().map(|v| 0.5 * v * v).sum(),
            Some(delta) => r
                .iter()
                .map(|v| {
                    let a = v.abs();
                    if a <= delta {
                        0.5 * v * v
                    } else {
                        delta * a - 0.5 * delta * delta
                    }
                })
                .sum(),
        }
    }
}

/// Orthonormal basis of the tangent space of the unit sphere at `theta`.
fn tangent_basis(theta: &Vector4<f64>) -> Matrix4x3<f64> {
    let skip = theta.iamax();
    let mut basis: Vec<Vector4<f64>> = Vec::with_capacity(3);
    for j in (0..4).filter(|&j| j != skip) {
        let mut v = Vector4::zeros();
        v[j] = 1.0;
        v -= theta * theta[j];
        for b in &basis {
            v -= b * b.dot(&v);
        }
        basis.push(v.normalize());
    }
    Matrix4x3::from_columns(&basis)
}

struct LmOutcome {
    theta: [f64; 4],
    iterations: usize,
    converged: bool,
}

fn levenberg_marquardt(problem: &Problem, init: [f64; 4], max_iter: usize, tol: f64) -> LmOutcome {
    let mut theta = init;
    let mut r = Vec::with_capacity(problem.ms.len());
    if problem.residuals(theta, &mut r).is_none() {
        return LmOutcome {
            theta,
            iterations: 0,
            converged: false,
        };
    }
    let mut cost = problem.cost(&r);
    let mut cand_r = Vec::with_capacity(r.len());
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter && !converged {
        iterations += 1;
        let t = Vector4::from(theta);
        let u = tangent_basis(&t);
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (&m, &res) in problem.ms.iter().zip(&r) {
            let j4 = Vector4::from(jacobian_row(theta, m));
            let j = u.transpose() * j4;
            let w = problem.delta.map_or(1.0, |d| huber_weight(res, d));
            jtj += w * j * j.transpose();
            jtr += w * res * j;
        }
        if cost == 0.0 || jtr.amax() == 0.0 {
            converged = true;
            break;
        }
        let diag_floor = 1e-12 * jtj.diagonal().max().max(f64::MIN_POSITIVE);
        loop {
            let mut a = jtj;
            for k in 0..3 {
                a[(k, k)] += lambda * jtj[(k, k)].max(diag_floor);
            }
            let step = a.cholesky().map(|ch| ch.solve(&(-jtr)));
            let accepted = step.and_then(|delta| {
                let cand = normalize((t + u * delta).into())?;
                problem.residuals(cand, &mut cand_r)?;
                let c = problem.cost(&cand_r);
                (c < cost).then_some((cand, c, delta.norm()))
            });
            match accepted {
                Some((cand, c, step_norm)) => {
                    let rel = (cost - c) / cost;
                    theta = cand;
                    cost = c;
                    std::mem::swap(&mut r, &mut cand_r);
                    lambda = (lambda * 0.1).max(1e-15);
                    if rel <= tol || step_norm <= tol {
                        converged = true;
                    }
                    break;
                }
                None => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        // no descent left at this point
                        converged = true;
                        break;
                    }
                }
            }
        }
    }
    LmOutcome {
        theta,
        iterations,
        converged,
    }
}

fn expected_orientation(pairs: &[CorrespondencePair]) -> Option<Monotonicity> {
    let n = pairs.len() as f64;
    let mm = pairs.iter().map(|p| p.z_mono).sum::<f64>() / n;
    let mg = pairs.iter().map(|p| p.z_gt).sum::<f64>() / n;
    let cov: f64 = pairs.iter().map(|p| (p.z_mono - mm) * (p.z_gt - mg)).sum();
    if cov > 0.0 {
        Some(Monotonicity::Increasing)
    } else if cov < 0.0 {
        Some(Monotonicity::Decreasing)
    } else {
        None
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear initialization followed by Levenberg-Marquardt refinement in the
/// 3-dimensional tangent space of the gauge sphere.
pub fn fit_rational(
    pairs: &[CorrespondencePair],
    options: &FitOptions,
) -> Result<(RationalModel, FitReport), RecoveryError> {
    let needed = options.min_pairs.max(HARD_MIN_PAIRS);
    if pairs.len() < needed {
        return Err(RecoveryError::InsufficientPairs {
            needed,
            got: pairs.len(),
        });
    }
    check_pairs(pairs)?;
    let frame = Frame::new(pairs)?;
    let (ms, gs) = frame.standardize(pairs);
    let range = mono_range(pairs);
    let init_std = linear_solve(&ms, &gs)?;
    let init_model = RationalModel::new(frame.to_raw(init_std), range)?;
    let init_rmse = residual_rmse(&init_model, pairs);

    let delta = match options.loss {
        Loss::Square => None,
        Loss::Huber => Some(match options.huber_delta {
            Some(d) => d / frame.s_g,
            None => {
                let mut r = Vec::new();
                let abs = match (Problem { ms: &ms, gs: &gs, delta: None }).residuals(init_std, &mut r) {
                    Some(()) => r.iter().map(|v| v.abs()).collect(),
                    None => Vec::new(),
                };
                (1.345 * 1.4826 * median(abs)).max(1e-9)
            }
        }),
    };
    let problem = Problem {
        ms: &ms,
        gs: &gs,
        delta,
    };
    let outcome = levenberg_marquardt(&problem, init_std, options.max_iter, options.tol);

    let mut model = RationalModel::new(frame.to_raw(outcome.theta), range)?;
    let mut rmse = residual_rmse(&model, pairs);
    if options.loss == Loss::Square && !(rmse <= init_rmse) {
        // round-off when mapping back can cost the last ulp
        model = init_model;
        rmse = init_rmse;
    }

    let n_inliers = match delta {
        None => pairs.len(),
        Some(d) => {
            let thr = d * frame.s_g;
            pairs
                .iter()
                .filter(|p| (model.eval(p.z_mono) - p.z_gt).abs() <= thr)
                .count()
        }
    };
    let mut status = validate_model_with(&model, range, options.range_inflation, expected_orientation(pairs));
    if status == FitStatus::Ok && !outcome.converged {
        status = FitStatus::Degraded;
    }
    let report = FitReport {
        residual_rmse: rmse,
        init_rmse,
        n_pairs: pairs.len(),
        n_inliers,
        iterations: outcome.iterations,
        status,
        huber_delta: delta.map(|d| d * frame.s_g),
    };
    Ok((model, report))
}
