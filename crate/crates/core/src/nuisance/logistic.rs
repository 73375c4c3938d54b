//! Maximum-likelihood logistic regression by iteratively reweighted least
//! squares.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::{dependent_columns, solve_spd, Design};
use crate::stats::expit;

const MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    /// Largest absolute score component at the solution.
    pub max_score: f64,
}

fn log_likelihood(eta: &[f64], y: &[f64]) -> f64 {
    eta.iter()
        .zip(y)
        .map(|(&e, &y)| {
            // y*e - log(1 + exp(e)), computed stably
            let log1pexp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            y * e - log1pexp
        })
        .sum()
}

/// Fits `P(y = 1) = expit(x'beta)` by Newton-Raphson with step halving.
///
/// Exact column dependence is reported as `RankDeficient`; diverging
/// coefficients (complete or quasi-complete separation) as `Separation`.
pub fn fit_logistic(design: &Design, y: &[f64]) -> Result<LogisticFit> {
    let n = design.n_rows;
    let p = design.n_cols();
    if n == 0 || p == 0 {
        return Err(Error::Argument("empty design".into()));
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    if ybar <= 0.0 || ybar >= 1.0 {
        return Err(Error::Separation { columns: design.names.clone() });
    }
    let dep = dependent_columns(design);
    if !dep.is_empty() {
        return Err(Error::RankDeficient { columns: dep.iter().map(|&j| design.names[j].clone()).collect() });
    }

    let x = design.to_matrix();
    let mut beta = DVector::<f64>::zeros(p);
    let mut eta = vec![0.0; n];
    let mut ll = log_likelihood(&eta, y);
    let mut max_score = f64::INFINITY;

    for iter in 0..MAX_ITER {
        let prob: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid = DVector::from_iterator(n, y.iter().zip(&prob).map(|(y, p)| y - p));
        let score = x.tr_mul(&resid);
        max_score = score.amax();
        if max_score < SCORE_TOL {
            return Ok(LogisticFit { coef: beta.iter().copied().collect(), iterations: iter, max_score });
        }
        let mut xw = x.clone();
        for (i, p) in prob.iter().enumerate() {
            let w = (p * (1.0 - p)).sqrt();
            xw.row_mut(i).scale_mut(w);
        }
        let info = xw.tr_mul(&xw);
        let Some(step) = solve_spd(info, &score) else {
            return Err(separation_or_rank(design, &beta));
        };

        let mut scale = 1.0;
        loop {
            let cand = &beta + &step * scale;
            let cand_eta: Vec<f64> = (0..n).map(|i| design.row_dot(i, cand.as_slice())).collect();
            let cand_ll = log_likelihood(&cand_eta, y);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) || scale < 1e-10 {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                break;
            }
            scale *= 0.5;
        }
        if beta.amax() > 30.0 && eta.iter().any(|e| e.abs() > 30.0) {
            return Err(separation_or_rank(design, &beta));
        }
        if (&step * scale).amax() < 1e-14 * beta.amax().max(1.0) {
            return Ok(LogisticFit { coef: beta.iter().copied().collect(), iterations: iter + 1, max_score });
        }
    }
    if beta.amax() > 15.0 {
        return Err(separation_or_rank(design, &beta));
    }
    Err(Error::NonConvergence { what: "logistic IRLS".into(), iterations: MAX_ITER, gradient_norm: max_score })
}

fn separation_or_rank(design: &Design, beta: &DVector<f64>) -> Error {
    let big: Vec<String> =
        beta.iter().enumerate().filter(|(_, b)| b.abs() > 10.0).map(|(j, _)| design.names[j].clone()).collect();
    if big.is_empty() {
        Error::RankDeficient { columns: design.names.clone() }
    } else {
        Error::Separation { columns: big }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Plain Newton iterations with hand-rolled Gaussian elimination; shares
    /// no code with the solver above.
    pub(crate) fn newton_oracle(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let p = rows[0].len();
        let mut b = vec![0.0; p];
        for _ in 0..200 {
            let mut g = vec![0.0; p];
            let mut h = vec![vec![0.0; p]; p];
            for (r, &yi) in rows.iter().zip(y) {
                let e: f64 = r.iter().zip(&b).map(|(x, b)| x * b).sum();
                let pr = 1.0 / (1.0 + (-e).exp());
                for j in 0..p {
                    g[j] += r[j] * (yi - pr);
                    for k in 0..p {
                        h[j][k] += r[j] * r[k] * pr * (1.0 - pr);
                    }
                }
            }
            // solve h d = g
            let mut a: Vec<Vec<f64>> = h.iter().zip(&g).map(|(row, gi)| {
                let mut r = row.clone();
                r.push(*gi);
                r
            }).collect();
            for c in 0..p {
                let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
                a.swap(c, piv);
                for r in 0..p {
                    if r != c {
                        let f = a[r][c] / a[c][c];
                        for k in c..=p {
                            a[r][k] -= f * a[c][k];
                        }
                    }
                }
            }
            let d: Vec<f64> = (0..p).map(|j| a[j][p] / a[j][j]).collect();
            for j in 0..p {
                b[j] += d[j];
            }
            if d.iter().all(|v| v.abs() < 1e-15) {
                break;
            }
        }
        b
    }

    pub(crate) fn design_from_rows(rows: &[Vec<f64>]) -> Design {
        let n = rows.len();
        let p = rows[0].len();
        let mut data = vec![0.0; n * p];
        for (i, r) in rows.iter().enumerate() {
            for j in 0..p {
                data[j * n + i] = r[j];
            }
        }
        Design { n_rows: n, names: (0..p).map(|j| format!("c{j}")).collect(), data }
    }

    #[test]
    fn intercept_only_is_logit_of_fraction() {
        let y = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let d = design_from_rows(&vec![vec![1.0]; 7]);
        let fit = fit_logistic(&d, &y).unwrap();
        let q: f64 = 2.0 / 7.0;
        assert!((fit.coef[0] - (q / (1.0 - q)).ln()).abs() < 1e-12);
    }

    #[test]
    fn toy_design_matches_newton_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> =
            (0..20).map(|_| vec![1.0, rng.gen_range(-2.0..2.0), rng.gen_range(0.0..1.0)]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| (rng.gen::<f64>() < expit(-0.3 + 0.8 * r[1] - 0.5 * r[2])) as u8 as f64)
            .collect();
        let fit = fit_logistic(&design_from_rows(&rows), &y).unwrap();
        let oracle = newton_oracle(&rows, &y);
        for (a, b) in fit.coef.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(fit.max_score < 1e-6 * 20.0);
    }

    #[test]
    fn all_zero_outcome_is_separation() {
        let d = design_from_rows(&vec![vec![1.0]; 5]);
        assert!(matches!(fit_logistic(&d, &[0.0; 5]), Err(Error::Separation { .. })));
    }

    #[test]
    fn perfectly_separated_covariate_is_separation() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| (i >= 5) as u8 as f64).collect();
        let err = fit_logistic(&design_from_rows(&rows), &y).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }), "{err}");
    }

    #[test]
    fn duplicate_column_is_rank_deficient() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, (i % 3) as f64, (i % 3) as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        match fit_logistic(&design_from_rows(&rows), &y) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["c2".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
