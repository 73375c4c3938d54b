//! L1-penalized generalized linear models by cyclic coordinate descent.
//!
//! Objective: `(1/N) sum_i loss_i(beta) + lambda * sum_{j penalized} |beta_j|`
//! with binomial deviance/2 or squared error/2 as the loss. Penalized columns
//! are standardized to mean 0 and variance 1 over the training rows;
//! coefficients are reported on the original scale. Binomial fits use
//! proximal Newton steps (a weighted least-squares quadratic solved by
//! coordinate descent) with backtracking on the penalized objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Design;
use crate::stats::expit;

/// Convergence tolerance on coefficient changes (standardized scale).
pub const COEF_TOL: f64 = 1e-7;
/// Coordinate descent stops when the largest weighted squared update falls below this.
const CD_TOL: f64 = 1e-14;
const MAX_OUTER: usize = 100;
/// Largest KKT violation accepted when the coefficients have not settled.
const KKT_TOL: f64 = 1e-6;
const MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Binomial,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaGrid {
    Explicit(Vec<f64>),
    Auto { n_lambda: usize, min_ratio: f64 },
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto { n_lambda: 20, min_ratio: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    /// Coefficients on the original column scale.
    pub coef: Vec<f64>,
    pub lambda: f64,
    /// The lambda sequence actually used (descending).
    pub lambdas: Vec<f64>,
    /// Mean held-out deviance per lambda (empty without cross-validation).
    pub cv_deviance: Vec<f64>,
}

struct Problem<'a> {
    n: usize,
    p: usize,
    x: Vec<f64>,
    y: &'a [f64],
    penalized: Vec<bool>,
    center: Vec<f64>,
    scale: Vec<f64>,
    intercept: Option<usize>,
    family: Family,
}

impl<'a> Problem<'a> {
    fn new(design: &Design, y: &'a [f64], penalized: &[bool], family: Family) -> Self {
        let n = design.n_rows;
        let p = design.n_cols();
        let intercept = (0..p).find(|&j| design.col(j).iter().all(|&v| v == 1.0));
        let mut x = design.data.clone();
        let mut center = vec![0.0; p];
        let mut scale = vec![1.0; p];
        let mut pen = penalized.to_vec();
        for j in 0..p {
            if !penalized[j] {
                continue;
            }
            let col = &mut x[j * n..(j + 1) * n];
            let m = if intercept.is_some() { col.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            center[j] = m;
            if sd > 1e-12 {
                scale[j] = sd;
                col.iter_mut().for_each(|v| *v = (*v - m) / sd);
            } else {
                // constant column: coefficient pinned at zero
                scale[j] = 0.0;
                col.iter_mut().for_each(|v| *v = 0.0);
                pen[j] = true;
            }
        }
        Self { n, p, x, y, penalized: pen, center, scale, intercept, family }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.x[j * self.n..(j + 1) * self.n]
    }

    fn loss(&self, eta: &[f64]) -> f64 {
        let s: f64 = match self.family {
            Family::Binomial => eta
                .iter()
                .zip(self.y)
                .map(|(&e, &y)| {
                    let log1pexp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                    log1pexp - y * e
                })
                .sum(),
            Family::Gaussian => eta.iter().zip(self.y).map(|(e, y)| 0.5 * (y - e).powi(2)).sum(),
        };
        s / self.n as f64
    }

    fn objective(&self, beta: &[f64], eta: &[f64], lambda: f64) -> f64 {
        let pen: f64 = (0..self.p).filter(|&j| self.penalized[j]).map(|j| beta[j].abs()).sum();
        self.loss(eta) + if pen == 0.0 { 0.0 } else { lambda * pen }
    }

    fn eta_of(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.n];
        for j in 0..self.p {
            if beta[j] != 0.0 {
                let b = beta[j];
                eta.iter_mut().zip(self.col(j)).for_each(|(e, x)| *e += b * x);
            }
        }
        eta
    }

    /// Coordinate descent on `(1/2N) sum w_i (r_i - x_i' delta)^2 + lambda |.|`
    /// where `r` is the working residual; updates `beta`, `r` and `eta` in place.
    fn coordinate_descent(&self, w: &[f64], r: &mut [f64], beta: &mut [f64], eta: &mut [f64], lambda: f64) {
        let nf = self.n as f64;
        let v: Vec<f64> = (0..self.p)
            .map(|j| self.col(j).iter().zip(w).map(|(x, w)| w * x * x).sum::<f64>() / nf)
            .collect();
        let update = |j: usize, beta: &mut [f64], r: &mut [f64], eta: &mut [f64]| -> f64 {
            if v[j] <= 0.0 || (self.penalized[j] && self.scale[j] == 0.0) {
                return 0.0;
            }
            let col = self.col(j);
            let g: f64 = col.iter().zip(w).zip(r.iter()).map(|((x, w), r)| x * w * r).sum::<f64>() / nf;
            let u = g + v[j] * beta[j];
            let new = if self.penalized[j] {
                if u > lambda {
                    (u - lambda) / v[j]
                } else if u < -lambda {
                    (u + lambda) / v[j]
                } else {
                    0.0
                }
            } else {
                u / v[j]
            };
            let d = new - beta[j];
            if d != 0.0 {
                beta[j] = new;
                for ((ri, ei), x) in r.iter_mut().zip(eta.iter_mut()).zip(col) {
                    *ri -= x * d;
                    *ei += x * d;
                }
            }
            v[j] * d * d
        };
        let mut sweeps = 0;
        loop {
            let mut max_full = 0.0f64;
            for j in 0..self.p {
                max_full = max_full.max(update(j, beta, r, eta));
            }
            sweeps += 1;
            if max_full < CD_TOL || sweeps > MAX_SWEEPS {
                break;
            }
            let active: Vec<usize> = (0..self.p).filter(|&j| beta[j] != 0.0).collect();
            loop {
                let mut max_act = 0.0f64;
                for &j in &active {
                    max_act = max_act.max(update(j, beta, r, eta));
                }
                sweeps += 1;
                if max_act < CD_TOL || sweeps > MAX_SWEEPS {
                    break;
                }
            }
        }
    }

    fn fit_at(&self, lambda: f64, beta: &mut Vec<f64>, eta: &mut Vec<f64>) -> Result<()> {
        match self.family {
            Family::Gaussian => {
                let w = vec![1.0; self.n];
                let mut r: Vec<f64> = self.y.iter().zip(eta.iter()).map(|(y, e)| y - e).collect();
                self.coordinate_descent(&w, &mut r, beta, eta, lambda);
                Ok(())
            }
            Family::Binomial => {
                let mut obj = self.objective(beta, eta, lambda);
                for _ in 0..MAX_OUTER {
                    let prob: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
                    let w: Vec<f64> = prob.iter().map(|p| (p * (1.0 - p)).max(1e-5)).collect();
                    let mut r: Vec<f64> =
                        self.y.iter().zip(&prob).zip(&w).map(|((y, p), w)| (y - p) / w).collect();
                    let old = beta.clone();
                    let old_eta = eta.clone();
                    self.coordinate_descent(&w, &mut r, beta, eta, lambda);
                    let mut new_obj = self.objective(beta, eta, lambda);
                    if new_obj > obj + 1e-13 * obj.abs().max(1.0) {
                        let full = beta.clone();
                        let full_eta = eta.clone();
                        let mut step = 1.0;
                        while new_obj > obj + 1e-13 * obj.abs().max(1.0) && step > 1e-6 {
                            step *= 0.5;
                            for j in 0..self.p {
                                beta[j] = old[j] + step * (full[j] - old[j]);
                            }
                            for i in 0..self.n {
                                eta[i] = old_eta[i] + step * (full_eta[i] - old_eta[i]);
                            }
                            new_obj = self.objective(beta, eta, lambda);
                        }
                    }
                    obj = new_obj;
                    let change = beta.iter().zip(&old).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    if change < COEF_TOL {
                        return Ok(());
                    }
                }
                // Flat directions can keep coefficients drifting while the fit is optimal.
                let grad = self.max_kkt_violation(beta, eta, lambda);
                if grad < KKT_TOL {
                    return Ok(());
                }
                Err(Error::NonConvergence { what: "lasso proximal Newton".into(), iterations: MAX_OUTER, gradient_norm: grad })
            }
        }
    }

    /// Gradient of the smooth loss, `(1/N) X' (y - mu)`, standardized scale.
    fn gradient(&self, eta: &[f64]) -> Vec<f64> {
        let resid: Vec<f64> = match self.family {
            Family::Binomial => self.y.iter().zip(eta).map(|(y, &e)| y - expit(e)).collect(),
            Family::Gaussian => self.y.iter().zip(eta).map(|(y, e)| y - e).collect(),
        };
        (0..self.p)
            .map(|j| self.col(j).iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / self.n as f64)
            .collect()
    }

    fn max_kkt_violation(&self, beta: &[f64], eta: &[f64], lambda: f64) -> f64 {
        let g = self.gradient(eta);
        (0..self.p)
            .map(|j| {
                if !self.penalized[j] {
                    g[j].abs()
                } else if beta[j] == 0.0 {
                    (g[j].abs() - lambda).max(0.0)
                } else {
                    (g[j] - lambda * beta[j].signum()).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    fn lambda_max(&self) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut beta = vec![0.0; self.p];
        let mut eta = vec![0.0; self.n];
        self.fit_at(f64::INFINITY, &mut beta, &mut eta)?;
        let g = self.gradient(&eta);
        let lmax = (0..self.p)
            .filter(|&j| self.penalized[j] && self.scale[j] > 0.0)
            .map(|j| g[j].abs())
            .fold(0.0, f64::max);
        Ok((lmax, beta, eta))
    }

    fn path(&self, lambdas: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut beta = vec![0.0; self.p];
        let mut eta = vec![0.0; self.n];
        let mut out = Vec::with_capacity(lambdas.len());
        for &l in lambdas {
            self.fit_at(l, &mut beta, &mut eta)?;
            out.push(beta.clone());
        }
        Ok(out)
    }

    fn to_original(&self, beta: &[f64]) -> Vec<f64> {
        let mut coef: Vec<f64> = (0..self.p)
            .map(|j| if self.penalized[j] { if self.scale[j] > 0.0 { beta[j] / self.scale[j] } else { 0.0 } } else { beta[j] })
            .collect();
        if let Some(k) = self.intercept {
            let shift: f64 = (0..self.p).filter(|&j| self.penalized[j]).map(|j| coef[j] * self.center[j]).sum();
            coef[k] -= shift;
        }
        coef
    }
}

/// Resolves a grid against the training data into a descending sequence.
fn resolve_grid(problem: &Problem, grid: &LambdaGrid) -> Result<Vec<f64>> {
    match grid {
        LambdaGrid::Explicit(v) => {
            if v.is_empty() {
                return Err(Error::Argument("lambda grid is empty".into()));
            }
            if v.iter().any(|l| !(*l >= 0.0)) {
                return Err(Error::Argument("lambda values must be >= 0".into()));
            }
            let mut v = v.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            Ok(v)
        }
        LambdaGrid::Auto { n_lambda, min_ratio } => {
            if *n_lambda == 0 {
                return Err(Error::Argument("lambda grid is empty".into()));
            }
            if !(*min_ratio > 0.0 && *min_ratio < 1.0) {
                return Err(Error::Argument("min_ratio must lie in (0, 1)".into()));
            }
            let (lmax, _, _) = problem.lambda_max()?;
            if lmax <= 0.0 {
                return Ok(vec![0.0]);
            }
            if *n_lambda == 1 {
                return Ok(vec![lmax]);
            }
            let step = min_ratio.ln() / (*n_lambda as f64 - 1.0);
            Ok((0..*n_lambda).map(|k| lmax * (step * k as f64).exp()).collect())
        }
    }
}

fn heldout_deviance(design: &Design, y: &[f64], rows: &[usize], coef: &[f64], family: Family) -> f64 {
    rows.iter()
        .map(|&i| {
            let e = design.row_dot(i, coef);
            match family {
                Family::Binomial => {
                    let log1pexp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                    2.0 * (log1pexp - y[i] * e)
                }
                Family::Gaussian => (y[i] - e).powi(2),
            }
        })
        .sum()
}

/// Fits the lasso path and picks lambda by cross-validated deviance.
///
/// `row_fold[i]` is the CV fold of row `i`; folds should be assigned at the
/// level of the independent unit (the subject) so that correlated rows stay
/// together. With `n_folds <= 1` or a single lambda, no CV is run and the
/// smallest lambda is used.
pub fn fit_lasso_cv(
    design: &Design,
    y: &[f64],
    penalized: &[bool],
    family: Family,
    grid: &LambdaGrid,
    row_fold: &[usize],
    n_folds: usize,
) -> Result<LassoFit> {
    let full = Problem::new(design, y, penalized, family);
    let lambdas = resolve_grid(&full, grid)?;
    let path = full.path(&lambdas)?;

    let (index, cv_deviance) = if n_folds > 1 && lambdas.len() > 1 {
        let per_fold: Vec<Result<Vec<f64>>> = (0..n_folds)
            .into_par_iter()
            .map(|k| {
                let train: Vec<usize> = (0..design.n_rows).filter(|&i| row_fold[i] != k).collect();
                let test: Vec<usize> = (0..design.n_rows).filter(|&i| row_fold[i] == k).collect();
                if test.is_empty() {
                    return Ok(vec![0.0; lambdas.len()]);
                }
                let sub = design.select_rows(&train);
                let ysub: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                let prob = Problem::new(&sub, &ysub, penalized, family);
                let path = prob.path(&lambdas)?;
                Ok(path.iter().map(|b| heldout_deviance(design, y, &test, &prob.to_original(b), family)).collect())
            })
            .collect();
        let mut total = vec![0.0; lambdas.len()];
        for dev in per_fold {
            for (t, d) in total.iter_mut().zip(dev?) {
                *t += d;
            }
        }
        total.iter_mut().for_each(|t| *t /= design.n_rows as f64);
        let best = (0..total.len()).fold(0, |b, k| if total[k] < total[b] { k } else { b });
        (best, total)
    } else {
        (lambdas.len() - 1, Vec::new())
    };

    Ok(LassoFit { coef: full.to_original(&path[index]), lambda: lambdas[index], lambdas, cv_deviance })
}

/// Largest KKT violation of a fitted solution (standardized scale); used by
/// tests and diagnostics.
pub fn kkt_violation(design: &Design, y: &[f64], penalized: &[bool], family: Family, coef: &[f64], lambda: f64) -> f64 {
    let prob = Problem::new(design, y, penalized, family);
    // map back to the standardized scale
    let mut beta: Vec<f64> = (0..prob.p)
        .map(|j| if prob.penalized[j] { coef[j] * prob.scale[j] } else { coef[j] })
        .collect();
    if let Some(k) = prob.intercept {
        let shift: f64 = (0..prob.p).filter(|&j| prob.penalized[j]).map(|j| coef[j] * prob.center[j]).sum();
        beta[k] += shift;
    }
    let eta = prob.eta_of(&beta);
    let g = prob.gradient(&eta);
    (0..prob.p)
        .filter(|&j| prob.penalized[j] && beta[j] == 0.0)
        .map(|j| (g[j].abs() - lambda).max(0.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::logistic::fit_logistic;
    use crate::nuisance::logistic::tests::design_from_rows;
    use rand::{Rng, SeedableRng};

    fn toy(n: usize, seed: u64) -> (Design, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![1.0, rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..3.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let y = rows
            .iter()
            .map(|r| (rng.gen::<f64>() < expit(-0.4 + 1.2 * r[1] - 0.6 * r[2] + 0.1 * r[3])) as u8 as f64)
            .collect();
        (design_from_rows(&rows), y)
    }

    #[test]
    fn zero_lambda_matches_irls() {
        let (d, y) = toy(120, 1);
        let pen = [false, true, true, true, true];
        let fit = fit_lasso_cv(&d, &y, &pen, Family::Binomial, &LambdaGrid::Explicit(vec![0.0]), &[], 1).unwrap();
        let irls = fit_logistic(&d, &y).unwrap();
        for (a, b) in fit.coef.iter().zip(&irls.coef) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn huge_lambda_zeroes_penalized() {
        let (d, y) = toy(80, 2);
        let pen = [false, true, true, true, true];
        let fit = fit_lasso_cv(&d, &y, &pen, Family::Binomial, &LambdaGrid::Explicit(vec![1e6]), &[], 1).unwrap();
        assert!(fit.coef[1..].iter().all(|&b| b == 0.0));
        let q = y.iter().sum::<f64>() / y.len() as f64;
        assert!((fit.coef[0] - (q / (1.0 - q)).ln()).abs() < 1e-7);
    }

    #[test]
    fn empty_grid_is_argument_error() {
        let (d, y) = toy(30, 3);
        let pen = [false, true, true, true, true];
        let r = fit_lasso_cv(&d, &y, &pen, Family::Binomial, &LambdaGrid::Explicit(vec![]), &[], 1);
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn kkt_holds_along_path() {
        let (d, y) = toy(200, 4);
        let pen = [false, true, true, true, true];
        let folds: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let fit = fit_lasso_cv(&d, &y, &pen, Family::Binomial, &LambdaGrid::default(), &folds, 5).unwrap();
        assert_eq!(fit.cv_deviance.len(), 20);
        for &l in &fit.lambdas {
            let f = fit_lasso_cv(&d, &y, &pen, Family::Binomial, &LambdaGrid::Explicit(vec![l]), &[], 1).unwrap();
            assert!(kkt_violation(&d, &y, &pen, Family::Binomial, &f.coef, l) <= 1e-6);
        }
    }

    #[test]
    fn gaussian_zero_lambda_is_least_squares() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64, ((i * i) % 5) as f64]).collect();
        let y = vec![1.0, 2.5, 2.0, 4.5, 5.0, 7.5];
        let d = design_from_rows(&rows);
        let fit = fit_lasso_cv(&d, &y, &[false, true, true], Family::Gaussian, &LambdaGrid::Explicit(vec![0.0]), &[], 1).unwrap();
        // normal equations
        let x = d.to_matrix();
        let yv = nalgebra::DVector::from_vec(y.clone());
        let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * yv)).unwrap();
        for (a, b) in fit.coef.iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
