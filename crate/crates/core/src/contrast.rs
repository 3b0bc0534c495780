//! The bounded psi contrast and the risks built from it.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{DensityModel, LogRatio, Sample};
use crate::rng;

/// An aggregate of contrasts. `std_error` is zero for exact empirical means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_draws: usize,
}

/// `psi(x) = (sqrt(x) - 1) / (sqrt(x) + 1)`, with `psi(+inf) = 1`.
pub fn psi(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(invalid(format!("psi needs x >= 0, got {x}")));
    }
    if x == f64::INFINITY {
        return Ok(1.0);
    }
    let r = x.sqrt();
    Ok((r - 1.0) / (r + 1.0))
}

/// `psi(exp(u)) = tanh(u / 4)`.
pub fn psi_of_log_ratio(u: f64) -> Result<f64> {
    if u.is_nan() {
        return Err(invalid("psi of NaN log ratio"));
    }
    Ok((0.25 * u).tanh())
}

/// Derivative of `u -> tanh(u / 4)`.
pub fn psi_of_log_ratio_deriv(u: f64) -> f64 {
    let t = (0.25 * u).tanh();
    0.25 * (1.0 - t * t)
}

/// Contrast value attached to a log ratio with the zero-density
/// conventions applied.
pub fn contrast_of(r: LogRatio) -> f64 {
    match r {
        LogRatio::Finite(u) => (0.25 * u).tanh(),
        LogRatio::BothZero => 0.0,
        LogRatio::NumZero => -1.0,
        LogRatio::DenZero => 1.0,
    }
}

/// `l(x; theta, theta') = psi(p_theta'(x) / p_theta(x))`.
pub fn pairwise_contrast(
    model: &DensityModel,
    theta: &[f64],
    theta_prime: &[f64],
    x: f64,
    i: usize,
) -> Result<f64> {
    Ok(contrast_of(model.log_density_ratio(theta, theta_prime, x, i)?))
}

/// Empirical contrast `(1/n) sum_i l(X_i; theta, theta')`.
pub fn empirical_contrast(
    model: &DensityModel,
    theta: &[f64],
    theta_prime: &[f64],
    sample: &Sample,
) -> Result<ContrastEstimate> {
    model.validate_sample(sample)?;
    let mut sum = 0.0;
    for (i, &x) in sample.values().iter().enumerate() {
        sum += pairwise_contrast(model, theta, theta_prime, x, i)?;
    }
    Ok(ContrastEstimate {
        value: sum / sample.n() as f64,
        std_error: 0.0,
        n_draws: 0,
    })
}

/// Population contrast together with the variance of a single contrast.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastMoments {
    pub mean: ContrastEstimate,
    /// Unbiased variance of `l(X; theta, theta')` under the data law.
    pub variance: f64,
    /// Standard error of `variance`.
    pub variance_std_error: f64,
}

/// Monte-Carlo estimate of `E l(X; theta, theta')` for an i.i.d. model.
pub fn population_contrast_mc<D: Distribution<f64>>(
    model: &DensityModel,
    theta: &[f64],
    theta_prime: &[f64],
    data_law: &D,
    n_draws: usize,
    seed: u64,
) -> Result<ContrastEstimate> {
    population_contrast_moments(model, theta, theta_prime, data_law, n_draws, seed).map(|m| m.mean)
}

/// Like [`population_contrast_mc`], also estimating the contrast variance.
pub fn population_contrast_moments<D: Distribution<f64>>(
    model: &DensityModel,
    theta: &[f64],
    theta_prime: &[f64],
    data_law: &D,
    n_draws: usize,
    seed: u64,
) -> Result<ContrastMoments> {
    if n_draws < 2 {
        return Err(invalid("population contrast needs at least 2 draws"));
    }
    if matches!(model, DensityModel::FixedDesignRegression(_)) {
        return Err(invalid("population contrast is defined for i.i.d. models"));
    }
    model.validate_param(theta)?;
    model.validate_param(theta_prime)?;
    let mut r = rng::stream(seed);
    // Welford on l and l^2; fourth moment for the variance's standard error.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    let mut sums = [0.0f64; 4];
    for k in 0..n_draws {
        let x = data_law.sample(&mut r);
        if !x.is_finite() {
            return Err(Error::Sampler(format!("non-finite draw {x} at {k}")));
        }
        let l = pairwise_contrast(model, theta, theta_prime, x, 0)?;
        let d = l - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (l - mean);
        sums[0] += l;
        sums[1] += l * l;
        sums[2] += l * l * l;
        sums[3] += l * l * l * l;
    }
    let n = n_draws as f64;
    let var = m2 / (n - 1.0);
    let mu = sums[0] / n;
    let m4 = sums[3] / n - 4.0 * mu * sums[2] / n + 6.0 * mu * mu * sums[1] / n - 3.0 * mu.powi(4);
    let var_se = ((m4 - var * var).max(0.0) / n).sqrt();
    Ok(ContrastMoments {
        mean: ContrastEstimate {
            value: mean,
            std_error: (var / n).sqrt(),
            n_draws,
        },
        variance: var,
        variance_std_error: var_se,
    })
}

/// `max_{theta' in grid} R_hat(theta, theta')` with the maximizing grid
/// point. Ties go to the lowest index.
pub fn empirical_supremum_contrast(
    model: &DensityModel,
    theta: &[f64],
    sample: &Sample,
    grid: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::Empty("competitor grid"));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, tp) in grid.iter().enumerate() {
        let v = empirical_contrast(model, theta, tp, sample)?.value;
        if v > best.0 {
            best = (v, k);
        }
    }
    Ok((best.0, grid[best.1].clone()))
}

/// Grid rho-estimator: the grid point minimizing the empirical supremum
/// contrast over the same grid. Returns `(estimate, sup value)`.
pub fn grid_rho_estimator(model: &DensityModel, sample: &Sample, grid: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    if grid.is_empty() {
        return Err(Error::Empty("grid"));
    }
    model.validate_sample(sample)?;
    for g in grid {
        model.validate_param(g)?;
    }
    let n = sample.n();
    let lp = log_density_table(model, grid, sample.values());
    let table = pair_table(&lp, &lp, n, grid.len(), grid.len(), PairOptions { store: true, ..Default::default() });
    let mut best = (f64::INFINITY, 0);
    for j in 0..grid.len() {
        let row = &table.r[j * grid.len()..(j + 1) * grid.len()];
        let sup = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if sup < best.0 {
            best = (sup, j);
        }
    }
    Ok((grid[best.1].clone(), best.0))
}

/// Row-major `(#params x n)` table of shifted log densities.
pub(crate) fn log_density_table(model: &DensityModel, params: &[Vec<f64>], xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut out = vec![0.0; params.len() * n];
    for (row, p) in out.chunks_exact_mut(n).zip(params) {
        model.log_densities_shifted(p, xs, row);
    }
    out
}

/// All pairwise empirical contrasts between two families of parameters.
pub(crate) struct PairTable {
    /// `r[j * k_count + k] = R_hat(theta_j, theta'_k)`; only filled when
    /// requested, zero on skipped pairs.
    pub r: Vec<f64>,
    /// Sum over included `k` of `R_hat(theta_j, theta'_k)`.
    pub row_sum: Vec<f64>,
    /// Sum over included `j` of `R_hat(theta_j, theta'_k)`.
    pub col_sum: Vec<f64>,
    /// `w_theta[j * n + i] = sum_k dpsi(u_jk,i)` over the included pairs.
    pub w_theta: Vec<f64>,
    /// `w_prime[k * n + i] = sum_j dpsi(u_jk,i)` over the included pairs.
    pub w_prime: Vec<f64>,
}

/// Options for [`pair_table`].
#[derive(Clone, Copy, Default)]
pub(crate) struct PairOptions {
    /// Leave out pairs with `j == k`.
    pub skip_diag: bool,
    /// Accumulate contrast derivatives per observation for the theta side.
    pub weights: bool,
    /// Same for the theta' side.
    pub weights_prime: bool,
    /// Keep the full table of pairwise values.
    pub store: bool,
}

const ROOT_FLOOR: f64 = 1e-150;

/// Evaluates `R_hat(theta_j, theta'_k)` for every pair from row-major
/// log-density tables `lp` (theta draws) and `lq` (theta' draws).
pub(crate) fn pair_table(lp: &[f64], lq: &[f64], n: usize, j_count: usize, k_count: usize, opt: PairOptions) -> PairTable {
    // Per-observation shift so that exp(lp/2) stays representable.
    let mut shift = vec![f64::NEG_INFINITY; n];
    for row in lp.chunks_exact(n).chain(lq.chunks_exact(n)) {
        for (c, &v) in shift.iter_mut().zip(row) {
            if v > *c {
                *c = v;
            }
        }
    }
    for c in shift.iter_mut() {
        if !c.is_finite() {
            *c = 0.0;
        }
    }
    let roots = |t: &[f64]| -> Vec<f64> {
        t.chunks_exact(n)
            .flat_map(|row| row.iter().zip(&shift).map(|(v, c)| (0.5 * (v - c)).exp()))
            .collect()
    };
    let a = roots(lp);
    let b = roots(lq);
    let clean = |t: &[f64]| -> Vec<bool> { t.chunks_exact(n).map(|row| row.iter().all(|&v| v >= ROOT_FLOOR)).collect() };
    let a_ok = clean(&a);
    let b_ok = clean(&b);

    let mut r = if opt.store { vec![0.0; j_count * k_count] } else { Vec::new() };
    let mut row_sum = vec![0.0; j_count];
    let mut col_sum = vec![0.0; k_count];
    let mut w_theta = if opt.weights { vec![0.0; j_count * n] } else { Vec::new() };
    let mut w_prime = if opt.weights_prime { vec![0.0; k_count * n] } else { Vec::new() };
    let inv_n = 1.0 / n as f64;
    for j in 0..j_count {
        let aj = &a[j * n..(j + 1) * n];
        let lpj = &lp[j * n..(j + 1) * n];
        for k in 0..k_count {
            if opt.skip_diag && j == k {
                continue;
            }
            let bk = &b[k * n..(k + 1) * n];
            let sum = if a_ok[j] && b_ok[k] {
                match (opt.weights, opt.weights_prime) {
                    (true, true) => fast_with_weights(aj, bk, &mut w_theta[j * n..(j + 1) * n], &mut w_prime[k * n..(k + 1) * n]),
                    (true, false) => fast_with_one_side(aj, bk, &mut w_theta[j * n..(j + 1) * n]),
                    (false, true) => fast_with_one_side(aj, bk, &mut w_prime[k * n..(k + 1) * n]),
                    (false, false) => fast_values(aj, bk),
                }
            } else {
                let lqk = &lq[k * n..(k + 1) * n];
                let mut s = 0.0;
                for i in 0..n {
                    let (x, y) = (aj[i], bk[i]);
                    let t = x + y;
                    let (v, d) = if t > 0.0 && x * y > 0.0 {
                        let inv = 1.0 / t;
                        ((y - x) * inv, x * y * inv * inv)
                    } else {
                        slow_pair(lpj[i], lqk[i])
                    };
                    s += v;
                    if opt.weights {
                        w_theta[j * n + i] += d;
                    }
                    if opt.weights_prime {
                        w_prime[k * n + i] += d;
                    }
                }
                s
            };
            let v = sum * inv_n;
            row_sum[j] += v;
            col_sum[k] += v;
            if opt.store {
                r[j * k_count + k] = v;
            }
        }
    }
    PairTable {
        r,
        row_sum,
        col_sum,
        w_theta,
        w_prime,
    }
}

#[inline(always)]
fn lanes(x: &[f64], y: &[f64]) -> [f64; 4] {
    let x: &[f64; 4] = x.try_into().expect("chunk of four");
    let y: &[f64; 4] = y.try_into().expect("chunk of four");
    [
        (y[0] - x[0]) / (x[0] + y[0]),
        (y[1] - x[1]) / (x[1] + y[1]),
        (y[2] - x[2]) / (x[2] + y[2]),
        (y[3] - x[3]) / (x[3] + y[3]),
    ]
}

#[inline(always)]
fn add_weights(w: &mut [f64], v: &[f64; 4]) {
    let w: &mut [f64; 4] = w.try_into().expect("chunk of four");
    for l in 0..4 {
        w[l] += 0.25 - 0.25 * v[l] * v[l];
    }
}

#[inline]
fn fast_values(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let v = lanes(x, y);
        for l in 0..4 {
            acc[l] += v[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += (y - x) / (x + y);
    }
    s
}

#[inline]
fn fast_with_one_side(a: &[f64], b: &[f64], w: &mut [f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let n4 = a.len() / 4 * 4;
    for ((x, y), p) in a[..n4]
        .chunks_exact(4)
        .zip(b[..n4].chunks_exact(4))
        .zip(w[..n4].chunks_exact_mut(4))
    {
        let v = lanes(x, y);
        for l in 0..4 {
            acc[l] += v[l];
        }
        add_weights(p, &v);
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in n4..a.len() {
        let v = (b[i] - a[i]) / (a[i] + b[i]);
        s += v;
        w[i] += 0.25 - 0.25 * v * v;
    }
    s
}

#[inline]
fn fast_with_weights(a: &[f64], b: &[f64], wa: &mut [f64], wb: &mut [f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let n4 = a.len() / 4 * 4;
    let (a4, b4) = (&a[..n4], &b[..n4]);
    let (wa4, wb4) = (&mut wa[..n4], &mut wb[..n4]);
    for (((x, y), p), q) in a4
        .chunks_exact(4)
        .zip(b4.chunks_exact(4))
        .zip(wa4.chunks_exact_mut(4))
        .zip(wb4.chunks_exact_mut(4))
    {
        let v = lanes(x, y);
        for l in 0..4 {
            acc[l] += v[l];
        }
        add_weights(p, &v);
        add_weights(q, &v);
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in n4..a.len() {
        let v = (b[i] - a[i]) / (a[i] + b[i]);
        s += v;
        let d = 0.25 - 0.25 * v * v;
        wa[i] += d;
        wb[i] += d;
    }
    s
}

fn slow_pair(lp: f64, lq: f64) -> (f64, f64) {
    let u = LogRatio::from_logs(lq, lp);
    match u {
        LogRatio::Finite(u) => {
            let t = (0.25 * u).tanh();
            (t, 0.25 * (1.0 - t * t))
        }
        other => (contrast_of(other), 0.0),
    }
}

/// Draws `n` standard normal vectors of dimension `d` from `rng`.
pub(crate) fn std_normals<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    #[test]
    fn psi_examples() {
        assert_eq!(psi(1.0).unwrap(), 0.0);
        assert_eq!(psi(f64::INFINITY).unwrap(), 1.0);
        assert_eq!(psi(0.0).unwrap(), -1.0);
        assert!((psi(0.5).unwrap() + 0.171_572_875_253_809_9).abs() < 1e-12);
        assert!(psi(-1.0).is_err());
        assert!(psi(f64::NAN).is_err());
        assert_eq!(psi_of_log_ratio(0.0).unwrap(), 0.0);
        assert_eq!(psi_of_log_ratio(f64::INFINITY).unwrap(), 1.0);
        assert_eq!(psi_of_log_ratio(f64::NEG_INFINITY).unwrap(), -1.0);
        assert!((psi_of_log_ratio(0.5f64.ln()).unwrap() - psi(0.5).unwrap()).abs() < 1e-12);
        assert!(psi_of_log_ratio(f64::NAN).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let g = DensityModel::GaussianLocation;
        assert_eq!(pairwise_contrast(&g, &[0.3], &[0.3], 1.2, 0).unwrap(), 0.0);
        assert!(pairwise_contrast(&g, &[0.0], &[1.0], 0.5, 0).unwrap().abs() < 1e-15);
        let u = DensityModel::UniformScale;
        assert_eq!(pairwise_contrast(&u, &[0.0], &[2f64.ln()], 1.5, 0).unwrap(), 1.0);
        let s = Sample::new(vec![0.5, -0.5]).unwrap();
        let e = empirical_contrast(&g, &[0.0], &[1.0], &s).unwrap();
        assert!((e.value + 0.122_459_4).abs() < 1e-6, "{}", e.value);
        assert!((e.value - 0.5 * (-0.25f64).tanh()).abs() < 1e-15);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn population_antisymmetry_is_exact() {
        let g = DensityModel::GaussianLocation;
        let law = Normal::new(0.3, 1.5).unwrap();
        let a = population_contrast_mc(&g, &[0.0], &[1.0], &law, 1000, 5).unwrap();
        let b = population_contrast_mc(&g, &[1.0], &[0.0], &law, 1000, 5).unwrap();
        assert_eq!(a.value + b.value, 0.0);
        assert!(population_contrast_mc(&g, &[0.0], &[1.0], &law, 1, 5).is_err());
    }

    #[test]
    fn supremum_examples() {
        let g = DensityModel::GaussianLocation;
        let s = Sample::new(vec![0.1, -0.4, 1.3]).unwrap();
        let (v, arg) = empirical_supremum_contrast(&g, &[0.2], &s, &[vec![0.2]]).unwrap();
        assert_eq!((v, arg), (0.0, vec![0.2]));
        let coarse: Vec<Vec<f64>> = (-4..=4).map(|k| vec![k as f64 * 0.5]).collect();
        let fine: Vec<Vec<f64>> = (-16..=16).map(|k| vec![k as f64 * 0.125]).collect();
        let vc = empirical_supremum_contrast(&g, &[1.0], &s, &coarse).unwrap().0;
        let vf = empirical_supremum_contrast(&g, &[1.0], &s, &fine).unwrap().0;
        assert!(vc <= vf);
        assert!(empirical_supremum_contrast(&g, &[1.0], &s, &[]).is_err());
    }

    #[test]
    fn pair_table_matches_direct_evaluation() {
        let models = [DensityModel::GaussianLocation, DensityModel::PoissonIntensity, DensityModel::UniformScale];
        let xs = [0.0, 1.0, 3.0, 0.5, 7.0];
        for m in models {
            let xs: Vec<f64> = if m.is_discrete() { xs.iter().map(|x: &f64| x.round()).collect() } else { xs.to_vec() };
            let s = Sample::new(xs.clone()).unwrap();
            let ps: Vec<Vec<f64>> = [-40.0, -0.5, 0.4, 1.9, 40.0].iter().map(|&v| vec![v]).collect();
            let qs: Vec<Vec<f64>> = [0.0, 1.1, -2.0, 60.0].iter().map(|&v| vec![v]).collect();
            let lp = log_density_table(&m, &ps, &xs);
            let lq = log_density_table(&m, &qs, &xs);
            let t = pair_table(&lp, &lq, xs.len(), ps.len(), qs.len(), PairOptions { weights: true, weights_prime: true, store: true, skip_diag: false });
            for (j, p) in ps.iter().enumerate() {
                for (k, q) in qs.iter().enumerate() {
                    let direct = empirical_contrast(&m, p, q, &s).unwrap().value;
                    assert!((direct - t.r[j * qs.len() + k]).abs() < 1e-12, "{} {p:?} {q:?}", m.name());
                }
            }
        }
    }
}
