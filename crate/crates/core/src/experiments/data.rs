use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::error::{invalid, Error, Result};
use crate::models::Sample;
use crate::rng;
use crate::special::{mad, mean_var};

/// Two-sided Pareto: magnitude `x_m U^(-1/shape)` with a Rademacher sign.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pareto {
    pub x_m: f64,
    pub shape: f64,
}

impl Pareto {
    pub const FOURIER: Pareto = Pareto { x_m: 6.0, shape: 2.0 };
    pub const CORRELATED: Pareto = Pareto { x_m: 10.0, shape: 1.5 };

    fn validate(&self) -> Result<()> {
        if !(self.x_m > 0.0 && self.shape > 0.0 && self.x_m.is_finite() && self.shape.is_finite()) {
            return Err(invalid("Pareto scale and shape must be positive"));
        }
        Ok(())
    }

    pub fn sample_signed<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = 1.0 - rng.random::<f64>();
        let mag = self.x_m * u.powf(-1.0 / self.shape);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::OutsideDomain(format!("contamination {epsilon} outside [0, 1]")));
    }
    Ok(())
}

/// Draws from `(1 - eps) clean + eps contaminant` together with the
/// per-observation contamination indicators.
pub fn gen_contaminated_labeled(scenario: Scenario, n: usize, epsilon: f64, seed: u64) -> Result<(Sample, Vec<bool>)> {
    check_epsilon(epsilon)?;
    if n == 0 {
        return Err(Error::Empty("sample"));
    }
    let mut r = rng::stream(seed);
    let mut xs = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    let pois_clean = Poisson::new(3.0).map_err(|e| Error::Sampler(e.to_string()))?;
    let pois_out = Poisson::new(30.0).map_err(|e| Error::Sampler(e.to_string()))?;
    for _ in 0..n {
        let out = r.random::<f64>() < epsilon;
        let x = match (scenario, out) {
            (Scenario::GaussianLocation, false) => StandardNormal.sample(&mut r),
            (Scenario::GaussianLocation, true) => 8.0 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r),
            (Scenario::PoissonIntensity, false) => pois_clean.sample(&mut r),
            (Scenario::PoissonIntensity, true) => pois_out.sample(&mut r),
            (Scenario::UniformScale, false) => r.random::<f64>(),
            (Scenario::UniformScale, true) => 101.0 + r.random::<f64>(),
            _ => return Err(invalid(format!("{} is not an i.i.d. scenario", scenario.as_str()))),
        };
        xs.push(x);
        flags.push(out);
    }
    Ok((Sample::new(xs)?, flags))
}

pub fn gen_contaminated(scenario: Scenario, n: usize, epsilon: f64, seed: u64) -> Result<Sample> {
    gen_contaminated_labeled(scenario, n, epsilon, seed).map(|(s, _)| s)
}

/// `(1 - eps) N(0, 1) + eps * two-sided Pareto` noise with indicators.
pub fn contaminated_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, epsilon: f64, pareto: Pareto) -> (Vec<f64>, Vec<bool>) {
    let mut noise = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for _ in 0..n {
        let out = rng.random::<f64>() < epsilon;
        noise.push(if out {
            pareto.sample_signed(rng)
        } else {
            StandardNormal.sample(rng)
        });
        flags.push(out);
    }
    (noise, flags)
}

/// A regression data set. `beta_star` is known for synthetic designs;
/// `test` holds a clean held-out split when one exists.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionData {
    pub design: DMatrix<f64>,
    pub responses: Vec<f64>,
    pub beta_star: Option<Vec<f64>>,
    pub outliers: Vec<bool>,
    pub test: Option<(DMatrix<f64>, Vec<f64>)>,
}

/// `f(w) = sin(2 pi w) + 0.3 cos(6 pi w)`.
pub fn fourier_truth(w: f64) -> f64 {
    use std::f64::consts::PI;
    (2.0 * PI * w).sin() + 0.3 * (6.0 * PI * w).cos()
}

/// Columns: intercept, then `sin(2 pi k w), cos(2 pi k w)` for `k = 1..=K`.
pub fn fourier_design(w: &[f64], k_max: usize) -> DMatrix<f64> {
    use std::f64::consts::PI;
    DMatrix::from_fn(w.len(), 2 * k_max + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            let k = j.div_ceil(2) as f64;
            let a = 2.0 * PI * k * w[i];
            if j % 2 == 1 {
                a.sin()
            } else {
                a.cos()
            }
        }
    })
}

pub fn gen_fourier_regression(n: usize, k_max: usize, epsilon: f64, pareto: Pareto, seed: u64) -> Result<RegressionData> {
    check_epsilon(epsilon)?;
    pareto.validate()?;
    if k_max == 0 {
        return Err(invalid("need at least one frequency"));
    }
    if n == 0 {
        return Err(Error::Empty("design"));
    }
    let w: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 })
        .collect();
    let design = fourier_design(&w, k_max);
    let mut beta = vec![0.0; 2 * k_max + 1];
    beta[1] = 1.0;
    if k_max >= 3 {
        beta[6] = 0.3;
    }
    let mut r = rng::stream(seed);
    let (noise, outliers) = contaminated_noise(&mut r, n, epsilon, pareto);
    let responses = w.iter().zip(&noise).map(|(&wi, e)| fourier_truth(wi) + e).collect();
    Ok(RegressionData {
        design,
        responses,
        beta_star: Some(beta),
        outliers,
        test: None,
    })
}

pub fn toeplitz(d: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Sparse coefficient vector over `(intercept, x_1, ..., x_d)`.
pub fn correlated_beta_star(d: usize) -> Vec<f64> {
    let mut b = vec![0.0; d + 1];
    for (i, v) in [(0, 0.5), (1, 1.0), (2, -0.8), (4, 0.6), (5, -0.5)] {
        b[i] = v;
    }
    b
}

/// Centres each column and scales it to unit (n - 1) standard deviation.
/// Constant columns are only centred.
pub fn standardize_columns(x: &mut DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for mut col in x.column_iter_mut() {
        let v: Vec<f64> = col.iter().copied().collect();
        let (m, var) = mean_var(&v);
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        col.apply(|c| *c = (*c - m) / sd);
        means.push(m);
        sds.push(sd);
    }
    (means, sds)
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

pub fn gen_correlated_regression(n: usize, d: usize, rho_corr: f64, epsilon: f64, pareto: Pareto, seed: u64) -> Result<RegressionData> {
    check_epsilon(epsilon)?;
    pareto.validate()?;
    if d < 6 {
        return Err(invalid(format!("need at least 6 base features, got {d}")));
    }
    if n < 2 {
        return Err(invalid("need at least two rows to standardize"));
    }
    if !(rho_corr.abs() < 1.0) {
        return Err(invalid("Toeplitz correlation must lie in (-1, 1)"));
    }
    let chol = toeplitz(d, rho_corr)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("Toeplitz covariance"))?;
    let l = chol.l();
    let mut r = rng::stream(seed);
    let z = DMatrix::<f64>::from_fn(n, d, |_, _| StandardNormal.sample(&mut r));
    let mut x = z * l.transpose();
    standardize_columns(&mut x);
    let design = with_intercept(&x);
    let beta = correlated_beta_star(d);
    let (noise, outliers) = contaminated_noise(&mut r, n, epsilon, pareto);
    let signal = &design * nalgebra::DVector::from_column_slice(&beta);
    let responses = signal.iter().zip(&noise).map(|(s, e)| s + e).collect();
    Ok(RegressionData {
        design,
        responses,
        beta_star: Some(beta),
        outliers,
        test: None,
    })
}

/// A numeric table read from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub features: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

/// Reads a comma-separated file with a header row; every column must be
/// numeric. `target` names the response column.
pub fn read_csv_table(path: &Path, target: &str) -> Result<CsvTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(e, 0, ""))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(e, 1, ""))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let t_idx = headers.iter().position(|h| h == target).ok_or_else(|| Error::Csv {
        row: 1,
        column: target.to_string(),
        message: "target column not found in header".into(),
    })?;
    let features: Vec<String> = headers.iter().enumerate().filter(|(i, _)| *i != t_idx).map(|(_, h)| h.clone()).collect();
    let mut rows: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let rec = rec.map_err(|e| csv_error(e, line, ""))?;
        if rec.len() != headers.len() {
            return Err(Error::Csv {
                row: line,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Csv {
                row: line,
                column: headers[j].clone(),
                message: format!("non-numeric value {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row: line,
                    column: headers[j].clone(),
                    message: "non-finite value".into(),
                });
            }
            if j == t_idx {
                y.push(v);
            } else {
                rows.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Empty("csv data"));
    }
    let x = DMatrix::from_row_slice(y.len(), features.len(), &rows);
    Ok(CsvTable { features, x, y })
}

fn csv_error(e: csv::Error, row: usize, column: &str) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(row);
    Error::Csv {
        row,
        column: column.to_string(),
        message: e.to_string(),
    }
}

/// Seeded 80/20 split, label contamination of an `epsilon` fraction of
/// training rows by `+-15 MAD(Y)`, and standardization by training
/// statistics. The returned data carry the clean test split.
pub fn split_and_contaminate(table: &CsvTable, epsilon: f64, seed: u64) -> Result<RegressionData> {
    check_epsilon(epsilon)?;
    let n = table.y.len();
    if n < 5 {
        return Err(invalid(format!("need at least 5 rows for an 80/20 split, got {n}")));
    }
    let mut r = rng::stream(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut r);
    let n_train = ((0.8 * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = idx.split_at(n_train);
    let pick = |rows: &[usize]| {
        let x = DMatrix::from_fn(rows.len(), table.x.ncols(), |i, j| table.x[(rows[i], j)]);
        let y: Vec<f64> = rows.iter().map(|&i| table.y[i]).collect();
        (x, y)
    };
    let (mut x_train, mut y_train) = pick(train_idx);
    let (mut x_test, y_test) = pick(test_idx);
    let (means, sds) = standardize_columns(&mut x_train);
    for (j, mut col) in x_test.column_iter_mut().enumerate() {
        col.apply(|c| *c = (*c - means[j]) / sds[j]);
    }
    let shift = 15.0 * mad(&table.y).unwrap_or(0.0);
    if shift == 0.0 && epsilon > 0.0 {
        log::warn!("MAD of the response is zero; label contamination has no effect");
    }
    let n_bad = (epsilon * n_train as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut r);
    let mut outliers = vec![false; n_train];
    for &i in &order[..n_bad] {
        let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
        y_train[i] += sign * shift;
        outliers[i] = true;
    }
    Ok(RegressionData {
        design: with_intercept(&x_train),
        responses: y_train,
        beta_star: None,
        outliers,
        test: Some((with_intercept(&x_test), y_test)),
    })
}

pub fn ingest_csv_regression(path: &Path, target: &str, epsilon: f64, seed: u64) -> Result<RegressionData> {
    let table = read_csv_table(path, target)?;
    split_and_contaminate(&table, epsilon, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn clean_gaussian_mean() {
        let s = gen_contaminated(Scenario::GaussianLocation, 100_000, 0.0, 1).unwrap();
        assert!(s.mean().abs() < 4.0 / (1e5f64).sqrt());
    }

    #[test]
    fn fully_contaminated_uniform() {
        let s = gen_contaminated(Scenario::UniformScale, 1000, 1.0, 2).unwrap();
        assert!(s.values().iter().all(|&x| (101.0..=102.0).contains(&x)));
    }

    #[test]
    fn contaminated_gaussian_mean() {
        let n = 100_000;
        let s = gen_contaminated(Scenario::GaussianLocation, n, 0.1, 3).unwrap();
        // Var = 1 + eps (1 - eps) 64
        let sd = ((1.0 + 0.09 * 64.0) / n as f64).sqrt();
        assert!((s.mean() - 0.8).abs() < 3.0 * sd, "{}", s.mean());
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_contaminated(Scenario::PoissonIntensity, 50, 0.1, 9).unwrap();
        let b = gen_contaminated(Scenario::PoissonIntensity, 50, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert!(gen_contaminated(Scenario::GaussianLocation, 5, 1.5, 0).is_err());
        assert!(gen_contaminated(Scenario::FourierRegression, 5, 0.1, 0).is_err());
    }

    #[test]
    fn fourier_clean_responses_reconstruct() {
        let d = gen_fourier_regression(4, 6, 0.0, Pareto::FOURIER, 5).unwrap();
        let mut r = rng::stream(5);
        let (noise, _) = contaminated_noise(&mut r, 4, 0.0, Pareto::FOURIER);
        for i in 0..4 {
            let w = i as f64 / 3.0;
            assert_eq!(d.responses[i], fourier_truth(w) + noise[i]);
        }
        assert_eq!(d.design.ncols(), 13);
        assert!((fourier_truth(0.25) - 1.0).abs() < 1e-12);
        // truth is in the span of the basis
        let beta = nalgebra::DVector::from_column_slice(d.beta_star.as_ref().unwrap());
        let fit = &d.design * beta;
        for i in 0..4 {
            assert!((fit[i] - fourier_truth(i as f64 / 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn pareto_magnitudes_respect_minimum() {
        let mut r = rng::stream(0);
        for _ in 0..10_000 {
            assert!(Pareto::FOURIER.sample_signed(&mut r).abs() >= 6.0);
        }
    }

    #[test]
    fn correlated_design_properties() {
        assert!((toeplitz(10, 0.7)[(0, 2)] - 0.49).abs() < 1e-15);
        let beta = correlated_beta_star(10);
        assert_eq!(beta.iter().filter(|b| **b != 0.0).count(), 5);
        let d = gen_correlated_regression(100, 10, 0.7, 0.1, Pareto::CORRELATED, 4).unwrap();
        assert_eq!(d.design.ncols(), 11);
        for j in 1..11 {
            let col: Vec<f64> = d.design.column(j).iter().copied().collect();
            let (m, v) = mean_var(&col);
            assert!(m.abs() <= 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert!(gen_correlated_regression(100, 5, 0.7, 0.1, Pareto::CORRELATED, 4).is_err());
    }

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_mad_shift() {
        let mut s = String::from("a,y\n");
        for k in 0..10 {
            s.push_str(&format!("{},{}\n", k as f64 * 0.3, k));
        }
        let f = write_csv(&s);
        let t = read_csv_table(f.path(), "y").unwrap();
        assert_eq!(mad(&t.y), Some(2.5));
        let clean = split_and_contaminate(&t, 0.0, 1).unwrap();
        let dirty = split_and_contaminate(&t, 0.5, 1).unwrap();
        assert_eq!(clean.test, dirty.test);
        for i in 0..clean.responses.len() {
            let diff = dirty.responses[i] - clean.responses[i];
            assert!(diff == 0.0 || (diff.abs() - 37.5).abs() < 1e-12);
            assert_eq!(diff != 0.0, dirty.outliers[i]);
        }
        assert_eq!(dirty.outliers.iter().filter(|b| **b).count(), 4);
    }

    #[test]
    fn csv_constant_response_is_noop() {
        let f = write_csv("a,y\n1,2\n2,2\n3,2\n4,2\n5,2\n6,2\n");
        let d = ingest_csv_regression(f.path(), "y", 0.5, 3).unwrap();
        assert!(d.responses.iter().all(|&y| y == 2.0));
    }

    #[test]
    fn csv_diagnostics() {
        let f = write_csv("a,y\n1,2\n2,x\n");
        match read_csv_table(f.path(), "y") {
            Err(Error::Csv { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "y")),
            other => panic!("{other:?}"),
        }
        let f = write_csv("a,y\n1,2\n");
        assert!(matches!(read_csv_table(f.path(), "z"), Err(Error::Csv { .. })));
    }
}
