use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use super::{Estimator, Scenario};
use crate::error::{check_dim, invalid, Error, Result};
use crate::models::Sample;
use crate::rng;
use crate::special::{mad, median};

const RIDGE_JITTER: f64 = 1e-8;
/// Consistency factor turning a MAD into a Gaussian standard deviation.
const MAD_TO_SD: f64 = 1.482_602_218_505_602;

/// Point estimates of the classical baselines for an i.i.d. scenario, on
/// the natural scale (mean, intensity, or upper end point).
pub fn iid_baselines(scenario: Scenario, sample: &Sample) -> Result<Vec<(Estimator, f64)>> {
    let n = sample.n() as f64;
    let xs = sample.values();
    let sum: f64 = xs.iter().sum();
    let mean = sum / n;
    match scenario {
        Scenario::GaussianLocation => Ok(vec![(Estimator::Mle, mean), (Estimator::Bayes, n * mean / (n + 0.25))]),
        Scenario::PoissonIntensity => Ok(vec![(Estimator::Mle, mean), (Estimator::Bayes, (1.0 + sum) / (1.0 + n))]),
        Scenario::UniformScale => {
            let (alpha, a) = (2.0, 0.5);
            let max = sample.max();
            Ok(vec![
                (Estimator::Mle, max),
                (Estimator::Bayes, (n + alpha - 1.0) / (n + alpha - 2.0) * max.max(a)),
            ])
        }
        other => Err(invalid(format!("{} is not an i.i.d. scenario", other.as_str()))),
    }
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let chol = a.cholesky().ok_or_else(|| Error::Singular("normal equations".into()))?;
    let x = chol.solve(&b);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular("normal equations".into()))
    }
}

/// Least squares through the normal equations with a `1e-8` ridge.
pub fn ols(design: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    check_dim(design.nrows(), y.len(), "responses")?;
    let p = design.ncols();
    let yv = DVector::from_column_slice(y);
    let a = design.transpose() * design + DMatrix::identity(p, p) * RIDGE_JITTER;
    Ok(solve_spd(a, design.transpose() * yv)?.iter().copied().collect())
}

/// Posterior mean under `beta ~ N(0, prior_var I)` and noise variance
/// `noise_var`.
pub fn bayes_regression(design: &DMatrix<f64>, y: &[f64], prior_var: f64, noise_var: f64) -> Result<Vec<f64>> {
    check_dim(design.nrows(), y.len(), "responses")?;
    if !(prior_var > 0.0 && noise_var > 0.0) {
        return Err(invalid("variances must be positive"));
    }
    let p = design.ncols();
    let yv = DVector::from_column_slice(y);
    let a = design.transpose() * design / noise_var + DMatrix::identity(p, p) / prior_var;
    let b = design.transpose() * yv / noise_var;
    Ok(solve_spd(a, b)?.iter().copied().collect())
}

fn residuals(design: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> Vec<f64> {
    let f = design * DVector::from_column_slice(beta);
    y.iter().zip(f.iter()).map(|(a, b)| a - b).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HuberFit {
    pub beta: Vec<f64>,
    pub gamma: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Huber regression by iteratively reweighted least squares. Residuals
/// are measured in units of a MAD scale re-estimated every iteration; the
/// threshold is `gamma` such units.
pub fn huber_irls(design: &DMatrix<f64>, y: &[f64], gamma: f64) -> Result<HuberFit> {
    if !(gamma > 0.0) {
        return Err(invalid(format!("Huber threshold must be positive, got {gamma}")));
    }
    let p = design.ncols();
    let mut beta = ols(design, y)?;
    for it in 1..=100 {
        let r = residuals(design, y, &beta);
        let scale = match mad(&r) {
            Some(m) if m > 0.0 => MAD_TO_SD * m,
            _ => 1.0,
        };
        let cut = gamma * scale;
        let w: Vec<f64> = r.iter().map(|ri| if ri.abs() <= cut { 1.0 } else { cut / ri.abs() }).collect();
        let mut a = DMatrix::identity(p, p) * RIDGE_JITTER;
        let mut b = DVector::zeros(p);
        for (i, row) in design.row_iter().enumerate() {
            let rt = row.transpose();
            a += &rt * row * w[i];
            b += rt * (w[i] * y[i]);
        }
        let next: Vec<f64> = solve_spd(a, b)?.iter().copied().collect();
        let change = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = next;
        if change < 1e-8 {
            return Ok(HuberFit {
                beta,
                gamma,
                iterations: it,
                converged: true,
            });
        }
    }
    log::warn!("Huber IRLS did not converge in 100 iterations (gamma = {gamma})");
    Ok(HuberFit {
        beta,
        gamma,
        iterations: 100,
        converged: false,
    })
}

/// Huber regression with `gamma` chosen by `folds`-fold cross-validation
/// minimizing the median absolute held-out residual. Ties keep the first
/// grid value.
pub fn huber_fit(design: &DMatrix<f64>, y: &[f64], gamma_grid: &[f64], folds: usize, seed: u64) -> Result<HuberFit> {
    check_dim(design.nrows(), y.len(), "responses")?;
    if gamma_grid.is_empty() {
        return Err(Error::Empty("Huber threshold grid"));
    }
    if gamma_grid.len() == 1 {
        return huber_irls(design, y, gamma_grid[0]);
    }
    let n = y.len();
    if folds < 2 || folds > n {
        return Err(invalid(format!("cross-validation needs 2 <= folds <= n, got {folds}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (pos, &i) in idx.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };
    let mut best: Option<(f64, f64)> = None;
    for &gamma in gamma_grid {
        let mut abs_res = Vec::with_capacity(n);
        for k in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
            let xt = design.select_rows(&train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let fit = huber_irls(&xt, &yt, gamma)?;
            let xv = design.select_rows(&test);
            let yv: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            abs_res.extend(residuals(&xv, &yv, &fit.beta).into_iter().map(f64::abs));
        }
        let score = median(&abs_res).unwrap_or(f64::INFINITY);
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, gamma));
        }
    }
    huber_irls(design, y, best.expect("non-empty grid").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn conjugate_examples() {
        let g = iid_baselines(Scenario::GaussianLocation, &Sample::new(vec![0.0, 1.0, 2.0, 1.0]).unwrap()).unwrap();
        assert!((g[1].1 - 4.0 / 4.25).abs() < 1e-12);
        let p = iid_baselines(Scenario::PoissonIntensity, &Sample::new(vec![2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert!((p[1].1 - 2.5).abs() < 1e-12);
        let mut xs = vec![0.1; 9];
        xs.push(0.9);
        let u = iid_baselines(Scenario::UniformScale, &Sample::new(xs).unwrap()).unwrap();
        assert_eq!(u[0].1, 0.9);
        assert!((u[1].1 - 0.99).abs() < 1e-12);
        let small = iid_baselines(Scenario::UniformScale, &Sample::new(vec![0.2; 10]).unwrap()).unwrap();
        assert!((small[1].1 - 1.1 * 0.5).abs() < 1e-12);
    }

    fn line(n: usize, outlier: Option<f64>, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut r = rng::stream(seed);
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / n as f64 });
        let mut y: Vec<f64> = (0..n)
            .map(|i| 1.0 + 2.0 * x[(i, 1)] + 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
            .collect();
        if let Some(o) = outlier {
            y[n - 1] += o;
        }
        (x, y)
    }

    #[test]
    fn huber_large_gamma_is_ols() {
        let (x, y) = line(60, None, 1);
        let h = huber_irls(&x, &y, 1e6).unwrap();
        let o = ols(&x, &y).unwrap();
        for (a, b) in h.beta.iter().zip(&o) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn huber_resists_single_outlier() {
        let (x, y) = line(50, Some(50.0), 2);
        let h = huber_irls(&x, &y, 1.345).unwrap();
        let o = ols(&x, &y).unwrap();
        assert!((h.beta[1] - 2.0).abs() < (o[1] - 2.0).abs());
    }

    #[test]
    fn single_gamma_grid_skips_cv() {
        let (x, y) = line(30, Some(10.0), 3);
        let a = huber_fit(&x, &y, &[2.0], 5, 0).unwrap();
        let b = huber_irls(&x, &y, 2.0).unwrap();
        assert_eq!(a, b);
        let c = huber_fit(&x, &y, &[1.0, 1.345, 2.0], 5, 0).unwrap();
        assert!([1.0, 1.345, 2.0].contains(&c.gamma));
    }

    #[test]
    fn bayes_shrinks_towards_zero() {
        let (x, y) = line(40, None, 4);
        let b = bayes_regression(&x, &y, 4.0, 1.0).unwrap();
        let o = ols(&x, &y).unwrap();
        let nb: f64 = b.iter().map(|v| v * v).sum();
        let no: f64 = o.iter().map(|v| v * v).sum();
        assert!(nb < no);
    }

    #[test]
    fn singular_design_is_reported() {
        let x = DMatrix::from_element(4, 2, f64::NAN);
        assert!(ols(&x, &[1.0; 4]).is_err());
    }
}
