use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// `min (1/2n) ||y - b0 - X b||^2 + lambda ||b||_1`, intercept unpenalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoProblem {
    /// Column-major design, `columns[j][i]` = row `i`, feature `j`.
    columns: Vec<Vec<f64>>,
    targets: Vec<f64>,
    pub lambda: f64,
    pub fit_intercept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

impl LassoProblem {
    /// Build from row-major `design` (one row per sample).
    pub fn new(design: &[Vec<f64>], targets: Vec<f64>, lambda: f64) -> Result<Self> {
        if design.len() != targets.len() {
            return Err(Error::contract(format!(
                "{} design rows but {} targets",
                design.len(),
                targets.len()
            )));
        }
        if design.is_empty() {
            return Err(Error::contract("LASSO needs at least one sample"));
        }
        let p = design[0].len();
        if design.iter().any(|r| r.len() != p) {
            return Err(Error::contract("ragged design matrix"));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::contract(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        if design
            .iter()
            .flatten()
            .chain(&targets)
            .any(|v| !v.is_finite())
        {
            return Err(Error::contract("non-finite value in LASSO inputs"));
        }
        let columns = (0..p)
            .map(|j| design.iter().map(|r| r[j]).collect())
            .collect();
        Ok(Self {
            columns,
            targets,
            lambda,
            fit_intercept: true,
        })
    }

    pub fn without_intercept(mut self) -> Self {
        self.fit_intercept = false;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    fn means(&self) -> (Vec<f64>, f64) {
        let n = self.n_samples() as f64;
        if !self.fit_intercept {
            return (vec![0.0; self.n_features()], 0.0);
        }
        (
            self.columns
                .iter()
                .map(|c| c.iter().sum::<f64>() / n)
                .collect(),
            self.targets.iter().sum::<f64>() / n,
        )
    }

    /// Smallest lambda for which the all-zero coefficient vector is optimal.
    pub fn lambda_max(&self) -> f64 {
        let n = self.n_samples() as f64;
        let (x_means, y_mean) = self.means();
        self.columns
            .iter()
            .zip(&x_means)
            .map(|(col, xm)| {
                col.iter()
                    .zip(&self.targets)
                    .map(|(x, y)| (x - xm) * (y - y_mean))
                    .sum::<f64>()
                    .abs()
                    / n
            })
            .fold(0.0, f64::max)
    }

    /// Residual `y - b0 - X b` for a fit.
    pub fn residual(&self, fit: &LassoFit) -> Vec<f64> {
        (0..self.n_samples())
            .map(|i| {
                self.targets[i]
                    - fit.intercept
                    - self
                        .columns
                        .iter()
                        .zip(&fit.coefficients)
                        .map(|(c, b)| c[i] * b)
                        .sum::<f64>()
            })
            .collect()
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent with soft-thresholding. Stops once a full sweep
/// moves no coordinate by `tol` or more, or after `max_iters` sweeps.
pub fn lasso_coordinate_descent(
    problem: &LassoProblem,
    tol: f64,
    max_iters: usize,
) -> Result<LassoFit> {
    fit_from(problem, vec![0.0; problem.n_features()], tol, max_iters)
}

fn fit_from(
    problem: &LassoProblem,
    start: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<LassoFit> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::contract(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let n = problem.n_samples() as f64;
    let (x_means, y_mean) = problem.means();
    let centered: Vec<Vec<f64>> = problem
        .columns
        .iter()
        .zip(&x_means)
        .map(|(c, m)| c.iter().map(|x| x - m).collect())
        .collect();
    let scale: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>() / n)
        .collect();

    let mut beta = start;
    let mut residual: Vec<f64> = problem.targets.iter().map(|y| y - y_mean).collect();
    for (col, b) in centered.iter().zip(&beta) {
        if *b != 0.0 {
            for (r, x) in residual.iter_mut().zip(col) {
                *r -= x * b;
            }
        }
    }

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < max_iters {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for j in 0..beta.len() {
            let old = beta[j];
            let new = if scale[j] > 0.0 {
                let rho = centered[j]
                    .iter()
                    .zip(&residual)
                    .map(|(x, r)| x * r)
                    .sum::<f64>()
                    / n
                    + scale[j] * old;
                soft_threshold(rho, problem.lambda) / scale[j]
            } else {
                0.0
            };
            let delta = new - old;
            if delta != 0.0 {
                for (r, x) in residual.iter_mut().zip(&centered[j]) {
                    *r -= x * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < tol {
            converged = true;
            break;
        }
    }
    let intercept = y_mean - x_means.iter().zip(&beta).map(|(m, b)| m * b).sum::<f64>();
    Ok(LassoFit {
        intercept,
        coefficients: beta,
        converged,
        sweeps,
    })
}

/// `count` lambdas spaced evenly in log scale from `lambda_max` down to
/// `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, min_ratio: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lambda_max],
        _ => (0..count)
            .map(|i| lambda_max * min_ratio.powf(i as f64 / (count - 1) as f64))
            .collect(),
    }
}

/// K-fold cross-validated LASSO over [`lambda_grid`]; returns the chosen
/// lambda and the fit on all samples at that lambda. Ties go to the larger
/// lambda.
pub fn lasso_cv<R: Rng + ?Sized>(
    design: &[Vec<f64>],
    targets: &[f64],
    n_folds: usize,
    grid_size: usize,
    min_ratio: f64,
    rng: &mut R,
) -> Result<(f64, LassoFit)> {
    const TOL: f64 = 1e-8;
    const MAX_SWEEPS: usize = 10_000;
    let full = LassoProblem::new(design, targets.to_vec(), 0.0)?;
    let lambda_max = full.lambda_max();
    let n = targets.len();
    if lambda_max <= 0.0 || grid_size == 0 {
        let fit = lasso_coordinate_descent(
            &LassoProblem {
                lambda: lambda_max,
                ..full
            },
            TOL,
            MAX_SWEEPS,
        )?;
        return Ok((lambda_max, fit));
    }
    let grid = lambda_grid(lambda_max, min_ratio, grid_size);
    let folds = n_folds.clamp(2, n.max(2));
    if n < folds {
        return Err(Error::DegenerateSample(format!(
            "{n} samples cannot be split into {folds} folds"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }

    let mut cv_error = vec![0.0; grid.len()];
    for fold in 0..folds {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] != fold);
        let rows: Vec<Vec<f64>> = train.iter().map(|&i| design[i].clone()).collect();
        let ys: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
        let mut problem = LassoProblem::new(&rows, ys, 0.0)?;
        let mut warm = vec![0.0; problem.n_features()];
        for (g, &lambda) in grid.iter().enumerate() {
            problem.lambda = lambda;
            let fit = fit_from(&problem, warm, TOL, MAX_SWEEPS)?;
            let sse: f64 = test
                .iter()
                .map(|&i| {
                    let pred = fit.intercept
                        + design[i]
                            .iter()
                            .zip(&fit.coefficients)
                            .map(|(x, b)| x * b)
                            .sum::<f64>();
                    (targets[i] - pred).powi(2)
                })
                .sum();
            cv_error[g] += sse / n as f64;
            warm = fit.coefficients;
        }
    }
    let best = cv_error
        .iter()
        .enumerate()
        .fold(0, |best, (g, e)| if *e < cv_error[best] { g } else { best });
    let lambda = grid[best];
    let fit = lasso_coordinate_descent(&LassoProblem { lambda, ..full }, TOL, MAX_SWEEPS)?;
    Ok((lambda, fit))
}
