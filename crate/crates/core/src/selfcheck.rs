//! Property suites backing the `selfcheck` command: psi identities, the
//! Hellinger comparison brackets, gradient correctness and the saddle
//! structure probes.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::bounds::{risk_brackets, variance_bound};
use crate::contrast::{population_contrast_moments, psi};
use crate::error::Result;
use crate::hellinger::hellinger_sq_closed;
use crate::models::{DensityModel, NoiseDensity, RegressionDesign, Sample};
use crate::rng;
use crate::saddle::{
    flatten_params, grad_mc, lipschitz_probe, nu_hessian_fd, objective_mc, phi_len, unflatten_params, McConfig,
    SaddleProblem,
};
use crate::variational::{FullGaussian, GaussianPrior, MeanFieldGaussian};

/// Deliberate defects used to check that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Flip the sign of psi below 1.
    FlipPsiSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckConfig {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub grid_points: usize,
    pub bracket_pairs: usize,
    pub bracket_draws: usize,
    pub gradient_instances: usize,
    pub concavity_points: usize,
}

impl Default for SelfCheckConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            fault: None,
            grid_points: 10_000,
            bracket_pairs: 100,
            bracket_draws: 100_000,
            gradient_instances: 10,
            concavity_points: 20,
        }
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> PropertyResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    PropertyResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The psi under test, possibly with a fault injected.
pub fn psi_under(fault: Option<Fault>) -> impl Fn(f64) -> f64 {
    move |x: f64| {
        let v = psi(x).unwrap_or(f64::NAN);
        match fault {
            Some(Fault::FlipPsiSign) if x < 1.0 => -v,
            _ => v,
        }
    }
}

/// `n` log-spaced points on `[1e-8, 1e8]`.
pub fn log_grid(n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n)
        .map(|i| 10f64.powf(-8.0 + 16.0 * i as f64 / (n - 1) as f64))
        .collect()
}

pub fn check_antisymmetry(psi: &dyn Fn(f64) -> f64, grid: &[f64]) -> PropertyResult {
    timed("psi antisymmetry", || {
        let worst = grid.iter().map(|&x| (psi(1.0 / x) + psi(x)).abs()).fold(0.0, f64::max);
        Ok((worst <= 1e-12, format!("max |psi(1/x) + psi(x)| = {worst:.3e}")))
    })
}

/// `|psi(x) - psi(y)| <= 2 |sqrt(x) - sqrt(y)|` on neighbouring grid points
/// and on pairs straddling 1.
pub fn check_lipschitz(psi: &dyn Fn(f64) -> f64, grid: &[f64]) -> PropertyResult {
    timed("psi Lipschitz", || {
        let mut worst = f64::NEG_INFINITY;
        let mut check = |x: f64, y: f64| {
            let excess = (psi(x) - psi(y)).abs() - 2.0 * (x.sqrt() - y.sqrt()).abs();
            worst = worst.max(excess);
        };
        for w in grid.windows(2) {
            check(w[0], w[1]);
        }
        let m = grid.len() / 2;
        for i in 0..m {
            check(grid[i], grid[grid.len() - 1 - i]);
        }
        Ok((
            worst <= 1e-12,
            format!("max |psi(x) - psi(y)| - 2 |sqrt x - sqrt y| = {worst:.3e}"),
        ))
    })
}

pub fn check_tanh_identity(psi: &dyn Fn(f64) -> f64, n: usize) -> PropertyResult {
    timed("psi tanh identity", || {
        let n = n.max(2);
        let worst = (0..n)
            .map(|i| {
                let u = -30.0 + 60.0 * i as f64 / (n - 1) as f64;
                (psi(u.exp()) - (0.25 * u).tanh()).abs()
            })
            .fold(0.0, f64::max);
        Ok((worst <= 1e-12, format!("max |psi(e^u) - tanh(u/4)| = {worst:.3e}")))
    })
}

/// Central differences of `u -> psi(e^u)` stay below `1/4 + 1e-6`.
pub fn check_derivative_bound(psi: &dyn Fn(f64) -> f64, n: usize) -> PropertyResult {
    timed("psi derivative bound", || {
        let n = n.max(2);
        let h = 1e-5;
        let worst = (0..n)
            .map(|i| {
                let u = -30.0 + 60.0 * i as f64 / (n - 1) as f64;
                ((psi((u + h).exp()) - psi((u - h).exp())) / (2.0 * h)).abs()
            })
            .fold(0.0, f64::max);
        Ok((worst <= 0.25 + 1e-6, format!("max |d/du psi(e^u)| = {worst:.8}")))
    })
}

/// Summary of the bracket comparison over random Gaussian-location pairs
/// with data law `N(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketSummary {
    pub pairs: usize,
    pub draws: usize,
    pub risk_violations: usize,
    pub variance_violations: usize,
    /// Smallest slack (in standard errors) to either risk bracket.
    pub min_risk_slack_se: f64,
    pub min_variance_slack_se: f64,
}

pub fn hellinger_brackets(pairs: usize, draws: usize, seed: u64) -> Result<BracketSummary> {
    let model = DensityModel::GaussianLocation;
    let law = Normal::new(0.0, 1.0).expect("unit normal");
    let mut r = rng::stream(seed);
    let mut out = BracketSummary {
        pairs,
        draws,
        risk_violations: 0,
        variance_violations: 0,
        min_risk_slack_se: f64::INFINITY,
        min_variance_slack_se: f64::INFINITY,
    };
    for k in 0..pairs {
        let theta = [r.random_range(-3.0..3.0)];
        let theta_prime = [r.random_range(-3.0..3.0)];
        let h = hellinger_sq_closed(&model, &[0.0], &theta)?.h_sq;
        let hp = hellinger_sq_closed(&model, &[0.0], &theta_prime)?.h_sq;
        let m = population_contrast_moments(&model, &theta, &theta_prime, &law, draws, rng::derive_seed(seed, &[k as u64]))?;
        let (lo, hi) = risk_brackets(h, hp);
        let se = m.mean.std_error.max(f64::MIN_POSITIVE);
        let slack = ((m.mean.value - lo) / se).min((hi - m.mean.value) / se);
        out.min_risk_slack_se = out.min_risk_slack_se.min(slack);
        if slack < -3.0 {
            out.risk_violations += 1;
        }
        let vse = m.variance_std_error.max(f64::MIN_POSITIVE);
        let vslack = (variance_bound(h, hp) - m.variance) / vse;
        out.min_variance_slack_se = out.min_variance_slack_se.min(vslack);
        if vslack < -3.0 {
            out.variance_violations += 1;
        }
    }
    Ok(out)
}

pub fn check_hellinger_brackets(pairs: usize, draws: usize, seed: u64) -> PropertyResult {
    timed("Hellinger comparison brackets", || {
        let s = hellinger_brackets(pairs, draws, seed)?;
        Ok((
            s.risk_violations == 0 && s.variance_violations == 0,
            format!(
                "{} pairs x {} draws: {} risk / {} variance violations beyond 3 se (min slack {:.2} / {:.2} se)",
                s.pairs, s.draws, s.risk_violations, s.variance_violations, s.min_risk_slack_se, s.min_variance_slack_se
            ),
        ))
    })
}

fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let law = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| law.sample(r)).collect()
}

/// A random smooth problem with a random interior variational state.
fn gradient_instance(k: usize, seed: u64) -> Result<(SaddleProblem, FullGaussian, MeanFieldGaussian)> {
    let mut r = rng::stream_at(seed, &[k as u64]);
    let n = 40;
    let (model, sample, center) = match k % 3 {
        0 => {
            let xs: Vec<f64> = normals(&mut r, n).into_iter().map(|x| x + 0.5).collect();
            (DensityModel::GaussianLocation, Sample::new(xs)?, vec![0.5])
        }
        1 => {
            let law = Poisson::new(3.0).expect("positive rate");
            let xs: Vec<f64> = (0..n).map(|_| law.sample(&mut r)).collect();
            (DensityModel::PoissonIntensity, Sample::new(xs)?, vec![3f64.ln()])
        }
        _ => {
            let p = 3;
            let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { ((i * (j + 1)) as f64 * 0.37).sin() });
            let beta = [0.5, -1.0, 0.8];
            let reg = RegressionDesign::new(design, NoiseDensity::Gaussian { sd: 1.0 })?;
            let eps = normals(&mut r, n);
            let ys: Vec<f64> = (0..n).map(|i| reg.predictor(&beta, i) + eps[i]).collect();
            (DensityModel::FixedDesignRegression(reg), Sample::new(ys)?, beta.to_vec())
        }
    };
    let d = center.len();
    let lambda = r.random_range(5.0..50.0);
    let prob = SaddleProblem::new(
        model,
        sample,
        GaussianPrior::isotropic(&vec![0.0; d], 4.0)?,
        GaussianPrior::isotropic(&vec![0.0; d], 4.0)?,
        lambda,
    )?;
    let m = DVector::from_iterator(d, center.iter().map(|c| c + r.random_range(-0.5..0.5)));
    let mut l = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = if i == j {
                r.random_range(0.1..0.6)
            } else {
                r.random_range(-0.2..0.2)
            };
        }
    }
    let phi = FullGaussian::new(m, l)?;
    let mp = DVector::from_iterator(d, center.iter().map(|c| c + r.random_range(-0.5..0.5)));
    let s = DVector::from_iterator(d, (0..d).map(|_| r.random_range(-3.0..-0.5)));
    Ok((prob, phi, MeanFieldGaussian::new(mp, s)?))
}

/// Block-wise relative error between the Monte-Carlo gradient and central
/// differences of the Monte-Carlo objective at the same draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub model: String,
    /// Relative errors for the blocks `m`, `L`, `m'`, `s`.
    pub rel_errors: [f64; 4],
}

pub fn gradient_checks(instances: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    let mut out = Vec::with_capacity(instances);
    for k in 0..instances {
        let (prob, phi, nu) = gradient_instance(k, seed)?;
        let d = prob.dim();
        let mc = McConfig::default().with_seed(rng::derive_seed(seed, &[k as u64, 1]));
        let g = grad_mc(&prob, &phi, &nu, &mc)?.flatten();
        let x = flatten_params(&phi, &nu);
        let h = 1e-5;
        let mut fd = vec![0.0; x.len()];
        for a in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[a] += h;
            xm[a] -= h;
            let (pp, qp) = unflatten_params(&xp, d);
            let (pm, qm) = unflatten_params(&xm, d);
            fd[a] = (objective_mc(&prob, &pp, &qp, &mc)?.0 - objective_mc(&prob, &pm, &qm, &mc)?.0) / (2.0 * h);
        }
        let bounds = [0, d, phi_len(d), phi_len(d) + d, phi_len(d) + 2 * d];
        let mut rel = [0.0; 4];
        for b in 0..4 {
            let range = bounds[b]..bounds[b + 1];
            let diff: f64 = range.clone().map(|i| (fd[i] - g[i]).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = range.map(|i| g[i] * g[i]).sum::<f64>().sqrt();
            rel[b] = diff / norm.max(1e-8);
        }
        out.push(GradientCheck {
            model: prob.model.name().to_string(),
            rel_errors: rel,
        });
    }
    Ok(out)
}

pub fn check_gradients(instances: usize, seed: u64) -> PropertyResult {
    timed("gradient vs finite differences", || {
        let checks = gradient_checks(instances, seed)?;
        let worst = checks
            .iter()
            .flat_map(|c| c.rel_errors.iter().copied())
            .fold(0.0, f64::max);
        Ok((
            worst <= 1e-3,
            format!("{} instances, max block relative error {worst:.3e}", checks.len()),
        ))
    })
}

/// Clean Gaussian-location problem used by the structure probes.
pub fn clean_gaussian_problem(n: usize, lambda: f64, seed: u64) -> Result<SaddleProblem> {
    let mut r = rng::stream(seed);
    let xs = normals(&mut r, n);
    SaddleProblem::new(
        DensityModel::GaussianLocation,
        Sample::new(xs)?,
        GaussianPrior::isotropic(&[0.0], 4.0)?,
        GaussianPrior::isotropic(&[0.0], 4.0)?,
        lambda,
    )
}

/// Largest eigenvalue of the competitor-block Hessian at each probe point.
/// Points are drawn from the part of the projection box where the
/// competitor sits within one unit of the sample mean with log-variance in
/// `[-6, 0]`.
pub fn concavity_probe(points: usize, seed: u64) -> Result<Vec<f64>> {
    let n = 200;
    let mut r = rng::stream_at(seed, &[1]);
    let mut out = Vec::with_capacity(points);
    for k in 0..points {
        let prob = clean_gaussian_problem(n, n as f64 / 8.0, rng::derive_seed(seed, &[k as u64]))?;
        let xbar = prob.sample.mean();
        let phi = FullGaussian::isotropic(&[xbar + r.random_range(-0.5..0.5)], r.random_range(0.05..0.5))?;
        let nu = MeanFieldGaussian::new(
            DVector::from_element(1, xbar + r.random_range(-1.0..1.0)),
            DVector::from_element(1, r.random_range(-6.0..0.0)),
        )?;
        let mc = McConfig::default().with_seed(rng::derive_seed(seed, &[k as u64, 2]));
        let hess = nu_hessian_fd(&prob, &phi, &nu, &mc, 1e-4)?;
        let top = hess.symmetric_eigen().eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.push(top);
    }
    Ok(out)
}

pub fn check_concavity(points: usize, seed: u64) -> PropertyResult {
    timed("competitor-block concavity", || {
        let tops = concavity_probe(points, seed)?;
        let worst = tops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((
            worst < 0.0,
            format!("{} points, largest Hessian eigenvalue {worst:.3e}", tops.len()),
        ))
    })
}

/// Empirical gradient-Lipschitz ratios at `lambda = n/8, n/4, n/2, n`,
/// probed around the saddle point fitted at `lambda = n/8` (the same centre
/// for every temperature), with the least-squares fit `L = l_psi + l_kl / lambda`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzScan {
    pub ratios: Vec<(f64, f64)>,
    pub l_psi: f64,
    pub l_kl: f64,
    /// Largest `|fit - ratio| / ratio`.
    pub max_rel_residual: f64,
    /// Largest `|ratio / ratio(n/8) - 1|`.
    pub max_rel_change: f64,
}

pub fn lipschitz_scan(seed: u64) -> Result<LipschitzScan> {
    use crate::saddle::{fit_rho_posterior, OptimizerConfig};
    let n = 200;
    let base = clean_gaussian_problem(n, n as f64 / 8.0, seed)?;
    let center = fit_rho_posterior(&base, None, &OptimizerConfig::default(), 200)
        .map_err(|f| f.error)?
        .state;
    let mut ratios = Vec::new();
    for div in [8.0, 4.0, 2.0, 1.0] {
        let lambda = n as f64 / div;
        let prob = clean_gaussian_problem(n, lambda, seed)?;
        let mc = McConfig::default().with_seed(rng::derive_seed(seed, &[3]));
        let l = lipschitz_probe(&prob, &center, &mc, 16, 0.1, rng::derive_seed(seed, &[4]))?;
        ratios.push((lambda, l));
    }
    let k = ratios.len() as f64;
    let (sx, sy) = ratios.iter().fold((0.0, 0.0), |(a, b), &(lam, l)| (a + 1.0 / lam, b + l));
    let (mx, my) = (sx / k, sy / k);
    let sxx: f64 = ratios.iter().map(|&(lam, _)| (1.0 / lam - mx).powi(2)).sum();
    let sxy: f64 = ratios.iter().map(|&(lam, l)| (1.0 / lam - mx) * (l - my)).sum();
    let l_kl = sxy / sxx;
    let l_psi = my - l_kl * mx;
    let max_rel_residual = ratios
        .iter()
        .map(|&(lam, l)| ((l_psi + l_kl / lam) - l).abs() / l)
        .fold(0.0, f64::max);
    let base_ratio = ratios[0].1;
    let max_rel_change = ratios.iter().map(|&(_, l)| (l / base_ratio - 1.0).abs()).fold(0.0, f64::max);
    Ok(LipschitzScan {
        ratios,
        l_psi,
        l_kl,
        max_rel_residual,
        max_rel_change,
    })
}

/// The ratios follow `l_psi + l_kl / lambda` with both constants
/// nonnegative.
pub fn check_lipschitz_decomposition(seed: u64) -> PropertyResult {
    timed("gradient-Lipschitz decomposition in lambda", || {
        let s = lipschitz_scan(seed)?;
        let ok = s.l_psi > 0.0 && s.l_kl >= 0.0 && s.max_rel_residual <= 0.1;
        let list: Vec<String> = s.ratios.iter().map(|(lam, l)| format!("{lam}: {l:.4}")).collect();
        Ok((
            ok,
            format!(
                "ratios {{{}}}, fit {:.4} + {:.3}/lambda, max residual {:.1}%",
                list.join(", "),
                s.l_psi,
                s.l_kl,
                100.0 * s.max_rel_residual
            ),
        ))
    })
}

/// Runs every suite.
pub fn run_selfcheck(cfg: &SelfCheckConfig) -> Vec<PropertyResult> {
    let p = psi_under(cfg.fault);
    let grid = log_grid(cfg.grid_points);
    vec![
        check_antisymmetry(&p, &grid),
        check_lipschitz(&p, &grid),
        check_tanh_identity(&p, cfg.grid_points),
        check_derivative_bound(&p, cfg.grid_points),
        check_hellinger_brackets(cfg.bracket_pairs, cfg.bracket_draws, cfg.seed),
        check_gradients(cfg.gradient_instances, cfg.seed),
        check_concavity(cfg.concavity_points, cfg.seed),
        check_lipschitz_decomposition(cfg.seed),
    ]
}
