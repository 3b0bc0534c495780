//! Bernstein-type temperature constants and Monte-Carlo evaluation of the
//! oracle inequality at `lambda = n / 8`:
//!
//! `7/2 E_rho_hat H^2 <= 9/2 E_rho H^2 + 8 KL(rho||pi)/n
//!                      + 2/3 E_rho' H^2 + 16 KL(rho'||pi')/n + 16 log(1/delta)/n`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hellinger::{closed_scalar, hellinger_sq_quadrature};
use crate::models::DensityModel;
use crate::rng;
use crate::saddle::SaddleProblem;
use crate::variational::{kl_full, kl_meanfield, reparam_full_into, FullGaussian, MeanFieldGaussian};

pub const A0: f64 = 4.0;
pub const A1: f64 = 0.375;
/// `a_2^2 = 3 sqrt(2)`.
pub const A2_SQ: f64 = 3.0 * std::f64::consts::SQRT_2;

pub const TARGET_COEF: f64 = 3.5;
pub const COMPETITOR_COEF: f64 = 2.0 / 3.0;
/// Coefficient on the target-side Hellinger risk after the softmax is
/// bounded.
pub const ORACLE_TARGET_COEF: f64 = 4.5;

pub const G_QUARTER_NOTE: &str = "g(1/4) = 0.544407 exceeds both 0.52 and 1/2, so beta(n, n/8) = 0.068051 > 1/16; \
     the coefficients a0 - beta a2^2 = 3.7113 >= 7/2 and a1 + beta a2^2 = 0.66372 <= 2/3 hold regardless";

/// `(e^x - 1 - x) / x^2`, with value 1/2 at 0.
pub fn g_bernstein(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // 1/2 + x/6 + x^2/24 + x^3/120 + x^4/720
        0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x * (1.0 / 120.0 + x / 720.0)))
    } else {
        (x.exp_m1() - x) / (x * x)
    }
}

/// `beta = g(2 lambda / n) lambda / n`.
pub fn beta_n_lambda(n: usize, lambda: f64) -> Result<f64> {
    if n == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {lambda}")));
    }
    let r = lambda / n as f64;
    Ok(g_bernstein(2.0 * r) * r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryCoefficients {
    pub beta: f64,
    /// `a0 - beta a2^2`.
    pub target_coef: f64,
    /// `a1 + beta a2^2`.
    pub competitor_coef: f64,
    /// `beta < a1 / a2^2`.
    pub positive_regime: bool,
    /// `competitor_coef > 2/3`.
    pub competitor_exceeds_two_thirds: bool,
    /// `target_coef < 7/2`.
    pub target_below_seven_halves: bool,
}

impl CorollaryCoefficients {
    pub fn from_beta(beta: f64) -> Self {
        let target_coef = A0 - beta * A2_SQ;
        let competitor_coef = A1 + beta * A2_SQ;
        Self {
            beta,
            target_coef,
            competitor_coef,
            positive_regime: beta < A1 / A2_SQ,
            competitor_exceeds_two_thirds: competitor_coef > COMPETITOR_COEF,
            target_below_seven_halves: target_coef < TARGET_COEF,
        }
    }
}

pub fn corollary_coefficients(n: usize, lambda: f64) -> Result<CorollaryCoefficients> {
    beta_n_lambda(n, lambda).map(CorollaryCoefficients::from_beta)
}

/// Lower and upper brackets on the population contrast `R(theta, theta')`
/// given `H^2(P*, P_theta)` and `H^2(P*, P_theta')`. The lower bracket is
/// the upper one applied to the swapped pair, by antisymmetry of psi.
pub fn risk_brackets(h_sq_theta: f64, h_sq_theta_prime: f64) -> (f64, f64) {
    (
        A1 * h_sq_theta - A0 * h_sq_theta_prime,
        A0 * h_sq_theta - A1 * h_sq_theta_prime,
    )
}

/// Upper bound on the variance of a single contrast.
pub fn variance_bound(h_sq_theta: f64, h_sq_theta_prime: f64) -> f64 {
    A2_SQ * (h_sq_theta + h_sq_theta_prime)
}

/// Squared Hellinger distance from the data-generating law to `P_theta`.
pub trait HellingerOracle: Send + Sync {
    fn h_sq(&self, theta: &[f64]) -> Result<f64>;

    /// A parameter close to the data-generating law, used to centre
    /// candidate distributions.
    fn reference(&self) -> Vec<f64>;
}

/// Well-specified case: the truth is `P_{truth}` for a closed-form family.
#[derive(Clone, Debug)]
pub struct ClosedFormOracle {
    model: DensityModel,
    truth: Vec<f64>,
}

impl ClosedFormOracle {
    pub fn new(model: DensityModel, truth: Vec<f64>) -> Result<Self> {
        if !matches!(
            model,
            DensityModel::GaussianLocation | DensityModel::PoissonIntensity | DensityModel::UniformScale
        ) {
            return Err(Error::NoClosedForm(model.name().to_string()));
        }
        model.validate_param(&truth)?;
        Ok(Self { model, truth })
    }
}

impl HellingerOracle for ClosedFormOracle {
    fn h_sq(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != 1 || !theta[0].is_finite() {
            return Err(invalid("closed-form oracle takes one finite parameter"));
        }
        Ok(closed_scalar(&self.model, theta[0], self.truth[0]))
    }

    fn reference(&self) -> Vec<f64> {
        self.truth.clone()
    }
}

/// Contaminated truth `(1 - eps) P_clean + eps P_outlier`, both members of
/// the model; distances by quadrature (or summation for counts).
#[derive(Clone, Debug)]
pub struct MixtureOracle {
    model: DensityModel,
    clean: Vec<f64>,
    outlier: Vec<f64>,
    epsilon: f64,
}

impl MixtureOracle {
    pub fn new(model: DensityModel, clean: Vec<f64>, outlier: Vec<f64>, epsilon: f64) -> Result<Self> {
        if !matches!(
            model,
            DensityModel::GaussianLocation | DensityModel::PoissonIntensity | DensityModel::UniformScale
        ) {
            return Err(Error::NoClosedForm(model.name().to_string()));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::OutsideDomain(format!("contamination {epsilon} outside [0, 1]")));
        }
        model.validate_param(&clean)?;
        model.validate_param(&outlier)?;
        Ok(Self {
            model,
            clean,
            outlier,
            epsilon,
        })
    }

    fn breaks(&self, theta: f64) -> Vec<f64> {
        let mut b = Vec::new();
        for c in [theta, self.clean[0], self.outlier[0]] {
            match self.model {
                DensityModel::UniformScale => b.extend([0.0, c.exp()]),
                _ => b.extend([c - 12.0, c, c + 12.0]),
            }
        }
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }
}

impl HellingerOracle for MixtureOracle {
    fn h_sq(&self, theta: &[f64]) -> Result<f64> {
        self.model.validate_param(theta)?;
        let m = &self.model;
        let eps = self.epsilon;
        let (clean, out) = (&self.clean, &self.outlier);
        let dens = |p: &[f64], x: f64| m.log_density(p, x, 0).map(f64::exp).unwrap_or(0.0);
        if m.is_discrete() {
            let top = [theta[0], clean[0], out[0]].iter().map(|e| e.exp()).fold(0.0, f64::max);
            let k_max = (top + 20.0 * top.sqrt() + 50.0).ceil() as u64;
            let aff: f64 = (0..=k_max)
                .map(|k| {
                    let x = k as f64;
                    let star = (1.0 - eps) * dens(clean, x) + eps * dens(out, x);
                    (star * dens(theta, x)).sqrt()
                })
                .sum();
            return Ok((1.0 - aff).clamp(0.0, 1.0));
        }
        let star = |x: f64| (1.0 - eps) * dens(clean, x) + eps * dens(out, x);
        let cand = |x: f64| dens(theta, x);
        Ok(hellinger_sq_quadrature(&star, &cand, &self.breaks(theta[0]), 256)?.h_sq)
    }

    fn reference(&self) -> Vec<f64> {
        self.clean.clone()
    }
}

/// Mean and standard error of `H^2` under draws from a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub std_error: f64,
}

fn risk_under(oracle: &dyn HellingerOracle, sampler: impl Fn(&[f64], &mut [f64]), d: usize, n_draws: usize, seed: u64) -> Result<RiskEstimate> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::stream(seed);
    let mut eps = vec![0.0; d];
    let mut theta = vec![0.0; d];
    let mut values = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(&mut r);
        }
        sampler(&eps, &mut theta);
        values.push(oracle.h_sq(&theta)?);
    }
    let (mean, var) = crate::special::mean_var(&values);
    Ok(RiskEstimate {
        mean,
        std_error: (var / n_draws as f64).sqrt(),
    })
}

/// `E_{theta ~ q} H^2(P_star, P_theta)` by `n_draws` draws.
pub fn expected_risk_full(oracle: &dyn HellingerOracle, q: &FullGaussian, n_draws: usize, seed: u64) -> Result<RiskEstimate> {
    if n_draws < 2 {
        return Err(invalid("need at least two draws"));
    }
    risk_under(oracle, |e, t| reparam_full_into(q, e, t), q.dim(), n_draws, seed)
}

pub fn expected_risk_meanfield(oracle: &dyn HellingerOracle, q: &MeanFieldGaussian, n_draws: usize, seed: u64) -> Result<RiskEstimate> {
    if n_draws < 2 {
        return Err(invalid("need at least two draws"));
    }
    let sd = q.sd();
    let sampler = |e: &[f64], t: &mut [f64]| {
        for i in 0..t.len() {
            t[i] = q.m_prime[i] + sd[i] * e[i];
        }
    };
    risk_under(oracle, sampler, q.dim(), n_draws, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundComponents {
    /// `9/2 E_rho H^2 + 8 KL(rho||pi) / n`.
    pub target_term: f64,
    /// `2/3 E_rho' H^2 + 16 KL(rho'||pi') / n`.
    pub competitor_term: f64,
    /// `16 log(1/delta) / n`.
    pub confidence_term: f64,
}

impl BoundComponents {
    pub fn total(&self) -> f64 {
        self.target_term + self.competitor_term + self.confidence_term
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `7/2 E_rho_hat H^2` for the fitted target.
    pub lhs_estimate: f64,
    pub lhs_std_error: f64,
    pub rhs_estimate: f64,
    pub rhs_std_error: f64,
    pub delta: f64,
    pub holds: bool,
    pub components: BoundComponents,
    pub n: usize,
    pub lambda: f64,
    /// `log(1/delta) / lambda`, the confidence term of the single
    /// high-probability event.
    pub log_delta_over_lambda: f64,
    /// Whether `lambda == n / 8`, the temperature the inequality is stated
    /// for.
    pub lambda_is_n_over_8: bool,
    pub coefficients: CorollaryCoefficients,
    pub fitted_risk: RiskEstimate,
    pub target_risk: RiskEstimate,
    pub competitor_risk: RiskEstimate,
    pub kl_target: f64,
    pub kl_competitor: f64,
    pub note: String,
}

/// Candidate distributions plugged into the two infima.
#[derive(Clone, Debug)]
pub struct Candidates {
    pub rho: FullGaussian,
    pub rho_prime: MeanFieldGaussian,
}

/// Evaluates both sides of the oracle inequality. `fitted` plays the
/// role of the posterior on the left; `candidates` are any distributions
/// for the infima on the right (each choice gives a valid upper bound on
/// the infimum). Expectations use `n_draws` parameter draws.
pub fn oracle_rhs_estimate(
    prob: &SaddleProblem,
    fitted: &FullGaussian,
    candidates: &Candidates,
    delta: f64,
    oracle: &dyn HellingerOracle,
    n_draws: usize,
    seed: u64,
) -> Result<BoundReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let n = prob.sample.n();
    let nf = n as f64;
    let fitted_risk = expected_risk_full(oracle, fitted, n_draws, rng::derive_seed(seed, &[0]))?;
    let target_risk = expected_risk_full(oracle, &candidates.rho, n_draws, rng::derive_seed(seed, &[1]))?;
    let competitor_risk = expected_risk_meanfield(oracle, &candidates.rho_prime, n_draws, rng::derive_seed(seed, &[2]))?;
    let kl_target = kl_full(&candidates.rho, &prob.prior_target)?.max(0.0);
    let kl_competitor = kl_meanfield(&candidates.rho_prime, &prob.prior_competitor)?.max(0.0);
    let log_inv_delta = -delta.ln();
    let components = BoundComponents {
        target_term: ORACLE_TARGET_COEF * target_risk.mean + 8.0 * kl_target / nf,
        competitor_term: COMPETITOR_COEF * competitor_risk.mean + 16.0 * kl_competitor / nf,
        confidence_term: 16.0 * log_inv_delta / nf,
    };
    let rhs = components.total();
    let lhs = TARGET_COEF * fitted_risk.mean;
    let coefficients = corollary_coefficients(n, prob.lambda)?;
    Ok(BoundReport {
        lhs_estimate: lhs,
        lhs_std_error: TARGET_COEF * fitted_risk.std_error,
        rhs_estimate: rhs,
        rhs_std_error: (ORACLE_TARGET_COEF * target_risk.std_error).hypot(COMPETITOR_COEF * competitor_risk.std_error),
        delta,
        holds: lhs <= rhs,
        components,
        n,
        lambda: prob.lambda,
        log_delta_over_lambda: log_inv_delta / prob.lambda,
        lambda_is_n_over_8: (prob.lambda - nf / 8.0).abs() <= 1e-12 * nf,
        coefficients,
        fitted_risk,
        target_risk,
        competitor_risk,
        kl_target,
        kl_competitor,
        note: G_QUARTER_NOTE.to_string(),
    })
}

/// Isotropic Gaussian candidates centred at the oracle's reference
/// parameter; the spread of each is picked from `sd_grid` to minimise its
/// own term of the right-hand side (estimated with `n_draws` draws each).
pub fn reference_candidates(
    prob: &SaddleProblem,
    oracle: &dyn HellingerOracle,
    sd_grid: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<Candidates> {
    if sd_grid.is_empty() || sd_grid.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(invalid("spread grid must be non-empty and positive"));
    }
    let center = oracle.reference();
    let d = center.len();
    let nf = prob.sample.n() as f64;
    let mut best_rho: Option<(f64, FullGaussian)> = None;
    let mut best_prime: Option<(f64, MeanFieldGaussian)> = None;
    for &sd in sd_grid {
        let rho = FullGaussian::isotropic(&center, sd)?;
        let r = expected_risk_full(oracle, &rho, n_draws, seed)?;
        let v = ORACLE_TARGET_COEF * r.mean + 8.0 * kl_full(&rho, &prob.prior_target)? / nf;
        if best_rho.as_ref().is_none_or(|(b, _)| v < *b) {
            best_rho = Some((v, rho));
        }
        let rp = MeanFieldGaussian::new(
            nalgebra::DVector::from_column_slice(&center),
            nalgebra::DVector::from_element(d, 2.0 * sd.ln()),
        )?;
        let r = expected_risk_meanfield(oracle, &rp, n_draws, seed)?;
        let v = COMPETITOR_COEF * r.mean + 16.0 * kl_meanfield(&rp, &prob.prior_competitor)? / nf;
        if best_prime.as_ref().is_none_or(|(b, _)| v < *b) {
            best_prime = Some((v, rp));
        }
    }
    Ok(Candidates {
        rho: best_rho.map(|b| b.1).expect("non-empty grid"),
        rho_prime: best_prime.map(|b| b.1).expect("non-empty grid"),
    })
}

/// Default spread grid for [`reference_candidates`]: log-spaced from 1e-3
/// to 2.
pub fn default_sd_grid() -> Vec<f64> {
    (0..=16).map(|k| 1e-3 * (2000f64).powf(k as f64 / 16.0)).collect()
}
