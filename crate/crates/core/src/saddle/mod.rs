//! The primal-dual objective
//!
//! `L(phi, nu) = E_{theta ~ rho_phi} E_{theta' ~ rho'_nu} R_hat(theta, theta')
//!              + KL(rho_phi || pi) / lambda - KL(rho'_nu || pi') / lambda`
//!
//! with a full-covariance Gaussian target `rho_phi` and a mean-field Gaussian
//! competitor `rho'_nu`, its Monte-Carlo gradients and the solvers built on
//! them.

mod optim;
mod softmax;

pub use optim::{
    adam_step, extragradient, extragradient_step, fit_rho_posterior, AdamConfig, FitFailure, FitResult, Optimizer,
    OptimizerConfig,
};
pub use softmax::{logmeanexp_softmax, variational_softmax, InnerConfig};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contrast::{log_density_table, pair_table, std_normals, PairOptions};
use crate::error::{check_dim, invalid, Error, Result};
use crate::models::{DensityModel, Sample};
use crate::rng;
use crate::variational::{
    kl_full, kl_full_grad, kl_meanfield, kl_meanfield_grad, reparam_full_into, FullGaussian, GaussianPrior,
    MeanFieldGaussian,
};

/// Projection box for the competitor.
pub const LOG_VAR_MIN: f64 = -12.0;
pub const LOG_VAR_MAX: f64 = 6.0;
pub const COMPETITOR_MEAN_BOUND: f64 = 1e3;
/// Lower bound kept on the diagonal of the target's Cholesky factor.
pub const CHOL_DIAG_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SaddleProblem {
    pub model: DensityModel,
    pub sample: Sample,
    pub prior_target: GaussianPrior,
    pub prior_competitor: GaussianPrior,
    pub lambda: f64,
}

impl SaddleProblem {
    pub fn new(
        model: DensityModel,
        sample: Sample,
        prior_target: GaussianPrior,
        prior_competitor: GaussianPrior,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {lambda}")));
        }
        model.validate_sample(&sample)?;
        check_dim(model.dim(), prior_target.dim(), "target prior")?;
        check_dim(model.dim(), prior_competitor.dim(), "competitor prior")?;
        if !prior_competitor.is_diagonal() {
            return Err(invalid("competitor prior must be diagonal"));
        }
        Ok(Self {
            model,
            sample,
            prior_target,
            prior_competitor,
            lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    fn check(&self, phi: &FullGaussian, nu: &MeanFieldGaussian) -> Result<()> {
        check_dim(self.dim(), phi.dim(), "target variational dimension")?;
        check_dim(self.dim(), nu.dim(), "competitor variational dimension")
    }
}

/// How contrast gradients are estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientEstimator {
    /// Pathwise for smooth models, score function otherwise.
    #[default]
    Auto,
    /// Reparameterization (pathwise) gradients.
    Pathwise,
    /// Score-function gradients with a leave-one-out baseline.
    ScoreFunction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_theta_draws: usize,
    pub n_theta_prime_draws: usize,
    pub seed: u64,
    /// Reuse the target's base normals for the competitor (pairs `j == k`
    /// are then left out so the estimate stays unbiased). Ignored by the
    /// score-function estimator.
    pub common_random_numbers: bool,
    pub estimator: GradientEstimator,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_theta_draws: 64,
            n_theta_prime_draws: 64,
            seed: 0,
            common_random_numbers: true,
            estimator: GradientEstimator::Auto,
        }
    }
}

impl McConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_theta_draws == 0 || self.n_theta_prime_draws == 0 {
            return Err(invalid("Monte-Carlo draw counts must be positive"));
        }
        Ok(())
    }

    fn resolved(&self, model: &DensityModel) -> GradientEstimator {
        match self.estimator {
            GradientEstimator::Auto if model.is_smooth() => GradientEstimator::Pathwise,
            GradientEstimator::Auto => GradientEstimator::ScoreFunction,
            e => e,
        }
    }
}

/// Gradient of the objective in `(m, L, m', s)` coordinates together with
/// the objective estimate from the same draws.
#[derive(Clone, Debug, PartialEq)]
pub struct SaddleGradient {
    pub m: DVector<f64>,
    pub chol_l: DMatrix<f64>,
    pub m_prime: DVector<f64>,
    pub s: DVector<f64>,
    pub objective: f64,
    pub std_error: f64,
}

impl SaddleGradient {
    pub fn zeros(d: usize) -> Self {
        Self {
            m: DVector::zeros(d),
            chol_l: DMatrix::zeros(d, d),
            m_prime: DVector::zeros(d),
            s: DVector::zeros(d),
            objective: 0.0,
            std_error: 0.0,
        }
    }

    /// Flattened in the [`SaddleState`] parameter layout.
    pub fn flatten(&self) -> Vec<f64> {
        let d = self.m.len();
        let mut out = Vec::with_capacity(param_len(d));
        out.extend(self.m.iter());
        for r in 0..d {
            for c in 0..=r {
                out.push(self.chol_l[(r, c)]);
            }
        }
        out.extend(self.m_prime.iter());
        out.extend(self.s.iter());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite()) && self.objective.is_finite()
    }
}

/// Number of free parameters: `m`, lower triangle of `L`, `m'`, `s`.
pub fn param_len(d: usize) -> usize {
    d + d * (d + 1) / 2 + 2 * d
}

/// Length of the target block in the flattened layout.
pub fn phi_len(d: usize) -> usize {
    d + d * (d + 1) / 2
}

/// Joint iterate with optimizer moments and the objective trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaddleState {
    pub phi: FullGaussian,
    pub nu: MeanFieldGaussian,
    pub step: usize,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub trace: Vec<f64>,
}

impl SaddleState {
    pub fn new(phi: FullGaussian, nu: MeanFieldGaussian) -> Result<Self> {
        check_dim(phi.dim(), nu.dim(), "target vs competitor dimension")?;
        let len = param_len(phi.dim());
        Ok(Self {
            phi,
            nu,
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            trace: Vec::new(),
        })
    }

    /// Both distributions at their priors.
    pub fn at_priors(prob: &SaddleProblem) -> Result<Self> {
        Self::new(prob.prior_target.as_full(), prob.prior_competitor.as_meanfield()?)
    }

    pub fn dim(&self) -> usize {
        self.phi.dim()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten_params(&self.phi, &self.nu)
    }

    pub(crate) fn set_params(&mut self, x: &[f64]) {
        let (phi, nu) = unflatten_params(x, self.dim());
        self.phi = phi;
        self.nu = nu;
    }
}

pub fn flatten_params(phi: &FullGaussian, nu: &MeanFieldGaussian) -> Vec<f64> {
    SaddleGradient {
        m: phi.m.clone(),
        chol_l: phi.chol_l.clone(),
        m_prime: nu.m_prime.clone(),
        s: nu.s.clone(),
        objective: 0.0,
        std_error: 0.0,
    }
    .flatten()
}

pub fn unflatten_params(x: &[f64], d: usize) -> (FullGaussian, MeanFieldGaussian) {
    let m = DVector::from_column_slice(&x[..d]);
    let mut l = DMatrix::zeros(d, d);
    let mut pos = d;
    for r in 0..d {
        for c in 0..=r {
            l[(r, c)] = x[pos];
            pos += 1;
        }
    }
    let m_prime = DVector::from_column_slice(&x[pos..pos + d]);
    let s = DVector::from_column_slice(&x[pos + d..pos + 2 * d]);
    (FullGaussian { m, chol_l: l }, MeanFieldGaussian { m_prime, s })
}

/// Projects flattened parameters onto the feasible box.
pub fn project(x: &mut [f64], d: usize) {
    let mut pos = d;
    for r in 0..d {
        for c in 0..=r {
            if c == r && !(x[pos] >= CHOL_DIAG_FLOOR) {
                x[pos] = CHOL_DIAG_FLOOR;
            }
            pos += 1;
        }
    }
    for v in &mut x[pos..pos + d] {
        *v = v.clamp(-COMPETITOR_MEAN_BOUND, COMPETITOR_MEAN_BOUND);
    }
    for v in &mut x[pos + d..pos + 2 * d] {
        *v = v.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
    }
}

struct Draws {
    eps: Vec<Vec<f64>>,
    eps_prime: Vec<Vec<f64>>,
    crn: bool,
}

fn draw(d: usize, mc: &McConfig, estimator: GradientEstimator) -> Draws {
    let mut r = rng::stream(mc.seed);
    let crn = mc.common_random_numbers && estimator == GradientEstimator::Pathwise;
    if crn {
        let all = std_normals(&mut r, mc.n_theta_draws.max(mc.n_theta_prime_draws), d);
        Draws {
            eps: all[..mc.n_theta_draws].to_vec(),
            eps_prime: all[..mc.n_theta_prime_draws].to_vec(),
            crn,
        }
    } else {
        let eps = std_normals(&mut r, mc.n_theta_draws, d);
        let eps_prime = std_normals(&mut r, mc.n_theta_prime_draws, d);
        Draws { eps, eps_prime, crn }
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    crate::special::mean_var(v)
}

/// Monte-Carlo estimate of the objective and its standard error.
pub fn objective_mc(prob: &SaddleProblem, phi: &FullGaussian, nu: &MeanFieldGaussian, mc: &McConfig) -> Result<(f64, f64)> {
    let g = evaluate(prob, phi, nu, mc, Blocks::None)?;
    Ok((g.objective, g.std_error))
}

/// Monte-Carlo gradient of the objective; the objective estimate from the
/// same draws is attached.
pub fn grad_mc(prob: &SaddleProblem, phi: &FullGaussian, nu: &MeanFieldGaussian, mc: &McConfig) -> Result<SaddleGradient> {
    evaluate(prob, phi, nu, mc, Blocks::Both)
}

/// Whether gradients are computed along with the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Blocks {
    None,
    Both,
}

impl Blocks {
    fn phi(self) -> bool {
        self == Blocks::Both
    }

    fn nu(self) -> bool {
        self == Blocks::Both
    }
}

pub(crate) fn evaluate(
    prob: &SaddleProblem,
    phi: &FullGaussian,
    nu: &MeanFieldGaussian,
    mc: &McConfig,
    blocks: Blocks,
) -> Result<SaddleGradient> {
    let want_grad = blocks != Blocks::None;
    prob.check(phi, nu)?;
    mc.validate()?;
    let estimator = mc.resolved(&prob.model);
    if want_grad && estimator == GradientEstimator::ScoreFunction && (mc.n_theta_draws < 2 || mc.n_theta_prime_draws < 2) {
        return Err(invalid("score-function gradients need at least two draws per side"));
    }
    let d = prob.dim();
    let xs = prob.sample.values();
    let n = xs.len();
    let draws = draw(d, mc, estimator);
    let (jn, kn) = (draws.eps.len(), draws.eps_prime.len());
    if draws.crn && jn == 1 && kn == 1 {
        return Err(invalid("paired draws need more than one draw per side"));
    }

    let thetas: Vec<Vec<f64>> = draws
        .eps
        .iter()
        .map(|e| {
            let mut t = vec![0.0; d];
            reparam_full_into(phi, e, &mut t);
            t
        })
        .collect();
    let sd = nu.sd();
    let theta_primes: Vec<Vec<f64>> = draws
        .eps_prime
        .iter()
        .map(|e| (0..d).map(|i| nu.m_prime[i] + sd[i] * e[i]).collect())
        .collect();

    let lp = log_density_table(&prob.model, &thetas, xs);
    let lq = log_density_table(&prob.model, &theta_primes, xs);
    let pathwise = want_grad && estimator == GradientEstimator::Pathwise;
    let table = pair_table(
        &lp,
        &lq,
        n,
        jn,
        kn,
        PairOptions {
            skip_diag: draws.crn,
            weights: pathwise && blocks.phi(),
            weights_prime: pathwise && blocks.nu(),
            store: false,
        },
    );
    let diag = if draws.crn { jn.min(kn) } else { 0 };
    let pairs = (jn * kn - diag) as f64;
    let row_count = |j: usize| (kn - usize::from(draws.crn && j < kn)) as f64;
    let col_count = |k: usize| (jn - usize::from(draws.crn && k < jn)) as f64;
    let f: Vec<f64> = table.row_sum.iter().enumerate().map(|(j, s)| s / row_count(j)).collect();
    let g: Vec<f64> = table.col_sum.iter().enumerate().map(|(k, s)| s / col_count(k)).collect();
    let contrast = table.row_sum.iter().sum::<f64>() / pairs;

    let kl_t = kl_full(phi, &prob.prior_target)?;
    let kl_c = kl_meanfield(nu, &prob.prior_competitor)?;
    let objective = contrast + (kl_t - kl_c) / prob.lambda;
    let var_f = if jn > 1 { mean_var(&f).1 } else { 0.0 };
    let var_g = if kn > 1 { mean_var(&g).1 } else { 0.0 };
    let std_error = (var_f / jn as f64 + var_g / kn as f64).sqrt();

    let mut out = SaddleGradient::zeros(d);
    out.objective = objective;
    out.std_error = std_error;
    if !objective.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            reason: format!("non-finite objective {objective}"),
        });
    }
    if !want_grad {
        return Ok(out);
    }

    match estimator {
        GradientEstimator::Pathwise | GradientEstimator::Auto => {
            let scale = 1.0 / (n as f64 * pairs);
            let mut gj = vec![0.0; d];
            let phi_draws = if blocks.phi() { thetas.len() } else { 0 };
            let nu_draws = if blocks.nu() { theta_primes.len() } else { 0 };
            for (j, (theta, e)) in thetas.iter().zip(&draws.eps).enumerate().take(phi_draws) {
                gj.iter_mut().for_each(|v| *v = 0.0);
                prob.model
                    .accumulate_score(theta, xs, &table.w_theta[j * n..(j + 1) * n], &mut gj);
                for r in 0..d {
                    let g = -scale * gj[r];
                    out.m[r] += g;
                    for c in 0..=r {
                        out.chol_l[(r, c)] += g * e[c];
                    }
                }
            }
            for (k, (theta, e)) in theta_primes.iter().zip(&draws.eps_prime).enumerate().take(nu_draws) {
                gj.iter_mut().for_each(|v| *v = 0.0);
                prob.model
                    .accumulate_score(theta, xs, &table.w_prime[k * n..(k + 1) * n], &mut gj);
                for r in 0..d {
                    let g = scale * gj[r];
                    out.m_prime[r] += g;
                    out.s[r] += g * 0.5 * sd[r] * e[r];
                }
            }
        }
        GradientEstimator::ScoreFunction => {
            let linv_t = phi
                .chol_l
                .clone()
                .try_inverse()
                .ok_or(Error::NotPositiveDefinite("target cholesky factor"))?
                .transpose();
            let f_total: f64 = f.iter().sum();
            for (j, e) in draws.eps.iter().enumerate() {
                let baseline = (f_total - f[j]) / (jn - 1) as f64;
                let w = (f[j] - baseline) / jn as f64;
                let ev = DVector::from_column_slice(e);
                let a = &linv_t * &ev;
                out.m += &a * w;
                for r in 0..d {
                    for c in 0..=r {
                        let mut v = a[r] * e[c];
                        if r == c {
                            v -= 1.0 / phi.chol_l[(r, r)];
                        }
                        out.chol_l[(r, c)] += w * v;
                    }
                }
            }
            let g_total: f64 = g.iter().sum();
            for (k, e) in draws.eps_prime.iter().enumerate() {
                let baseline = (g_total - g[k]) / (kn - 1) as f64;
                let w = (g[k] - baseline) / kn as f64;
                for r in 0..d {
                    out.m_prime[r] += w * e[r] / sd[r];
                    out.s[r] += w * 0.5 * (e[r] * e[r] - 1.0);
                }
            }
        }
    }

    let (km, kl) = kl_full_grad(phi, &prob.prior_target)?;
    let (kmp, ks) = kl_meanfield_grad(nu, &prob.prior_competitor)?;
    let inv_lambda = 1.0 / prob.lambda;
    out.m += km * inv_lambda;
    out.chol_l += kl * inv_lambda;
    out.m_prime -= kmp * inv_lambda;
    out.s -= ks * inv_lambda;
    Ok(out)
}

/// Finite-difference Hessian of the objective in the competitor block
/// `(m', s)` at fixed draws.
pub fn nu_hessian_fd(
    prob: &SaddleProblem,
    phi: &FullGaussian,
    nu: &MeanFieldGaussian,
    mc: &McConfig,
    h: f64,
) -> Result<DMatrix<f64>> {
    let d = prob.dim();
    let base = flatten_params(phi, nu);
    let off = phi_len(d);
    let dn = 2 * d;
    let eval = |x: &[f64]| -> Result<Vec<f64>> {
        let (p, q) = unflatten_params(x, d);
        Ok(grad_mc(prob, &p, &q, mc)?.flatten()[off..].to_vec())
    };
    let mut hess = DMatrix::zeros(dn, dn);
    for a in 0..dn {
        let mut xp = base.clone();
        let mut xm = base.clone();
        xp[off + a] += h;
        xm[off + a] -= h;
        let (gp, gm) = (eval(&xp)?, eval(&xm)?);
        for b in 0..dn {
            hess[(b, a)] = (gp[b] - gm[b]) / (2.0 * h);
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Largest ratio `|grad(x) - grad(y)| / |x - y|` over random pairs drawn
/// around `center` (coordinates perturbed by at most `radius`), with the
/// Monte-Carlo draws held fixed.
pub fn lipschitz_probe(
    prob: &SaddleProblem,
    center: &SaddleState,
    mc: &McConfig,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    let d = prob.dim();
    let x0 = center.params();
    let mut r = rng::stream(seed);
    let mut best: f64 = 0.0;
    let grad_at = |x: &[f64]| -> Result<Vec<f64>> {
        let (p, q) = unflatten_params(x, d);
        Ok(grad_mc(prob, &p, &q, mc)?.flatten())
    };
    for _ in 0..n_pairs {
        let mut x = x0.clone();
        let mut y = x0.clone();
        for v in x.iter_mut() {
            *v += radius * (2.0 * r.random::<f64>() - 1.0);
        }
        for v in y.iter_mut() {
            *v += radius * (2.0 * r.random::<f64>() - 1.0);
        }
        project(&mut x, d);
        project(&mut y, d);
        let (gx, gy) = (grad_at(&x)?, grad_at(&y)?);
        let num: f64 = gx.iter().zip(&gy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gaussian_problem(n: usize, seed: u64, lambda: f64) -> SaddleProblem {
        let mut r = rng::stream(seed);
        let law = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| law.sample(&mut r)).collect();
        SaddleProblem::new(
            DensityModel::GaussianLocation,
            Sample::new(xs).unwrap(),
            GaussianPrior::isotropic(&[0.0], 1.0).unwrap(),
            GaussianPrior::isotropic(&[0.0], 1.0).unwrap(),
            lambda,
        )
        .unwrap()
    }

    #[test]
    fn priors_with_paired_draws_give_zero() {
        let prob = gaussian_problem(50, 7, 25.0);
        let st = SaddleState::at_priors(&prob).unwrap();
        let (v, _) = objective_mc(&prob, &st.phi, &st.nu, &McConfig::default().with_seed(3)).unwrap();
        assert!(v.abs() < 1e-14, "{v}");
    }

    #[test]
    fn large_temperature_leaves_the_contrast_term() {
        let prob = gaussian_problem(50, 7, 1e8);
        let phi = FullGaussian::isotropic(&[0.7], 0.5).unwrap();
        let nu = MeanFieldGaussian::new(DVector::from_element(1, -0.3), DVector::from_element(1, -1.0)).unwrap();
        let mc = McConfig {
            common_random_numbers: false,
            ..McConfig::default()
        };
        let (v, _) = objective_mc(&prob, &phi, &nu, &mc).unwrap();
        let mut r = rng::stream(mc.seed);
        let eps = std_normals(&mut r, 64, 1);
        let epsp = std_normals(&mut r, 64, 1);
        let mut total = 0.0;
        for e in &eps {
            for ep in &epsp {
                let t = [0.7 + 0.5 * e[0]];
                let tp = [-0.3 + (-0.5f64).exp() * ep[0]];
                total += crate::contrast::empirical_contrast(&prob.model, &t, &tp, &prob.sample).unwrap().value;
            }
        }
        assert!((v - total / 4096.0).abs() < 1e-6);
    }

    #[test]
    fn flatten_roundtrip_and_projection() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]);
        let phi = FullGaussian::new(DVector::from_vec(vec![1.0, 2.0]), l).unwrap();
        let nu = MeanFieldGaussian::new(DVector::from_vec(vec![3.0, 4.0]), DVector::from_vec(vec![5.0, 6.0])).unwrap();
        let x = flatten_params(&phi, &nu);
        assert_eq!(x, vec![1.0, 2.0, 1.0, 0.5, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (p, q) = unflatten_params(&x, 2);
        assert_eq!((p, q), (phi, nu));
        let mut y = vec![0.0, 0.0, -1.0, 0.0, 1.0, 5e3, -5e3, 20.0, -20.0];
        project(&mut y, 2);
        assert_eq!(y, vec![0.0, 0.0, CHOL_DIAG_FLOOR, 0.0, 1.0, 1e3, -1e3, 6.0, -12.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let prob = gaussian_problem(40, 11, 5.0);
        let phi = FullGaussian::isotropic(&[0.4], 0.6).unwrap();
        let nu = MeanFieldGaussian::new(DVector::from_element(1, -0.2), DVector::from_element(1, -0.7)).unwrap();
        let mc = McConfig::default().with_seed(5);
        let g = grad_mc(&prob, &phi, &nu, &mc).unwrap().flatten();
        let x = flatten_params(&phi, &nu);
        for a in 0..x.len() {
            let h = 1e-4;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[a] += h;
            xm[a] -= h;
            let (pp, qp) = unflatten_params(&xp, 1);
            let (pm, qm) = unflatten_params(&xm, 1);
            let fd = (objective_mc(&prob, &pp, &qp, &mc).unwrap().0 - objective_mc(&prob, &pm, &qm, &mc).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[a]).abs() <= 1e-3 * g[a].abs().max(1e-3), "coord {a}: fd {fd} vs {}", g[a]);
        }
    }
}
