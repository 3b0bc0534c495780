//! Parametric density families.
//!
//! Every family is parameterized by an unconstrained real vector. The Poisson
//! intensity uses its natural parameter `eta = ln(lambda)` and the uniform
//! scale family uses `u = ln(theta)`, so the Gaussian variational machinery
//! never has to deal with positivity constraints.
//!
//! Zero densities are represented by `-inf` log densities. Ratios of
//! densities are reported through [`LogRatio`], which keeps the `0/0`,
//! `0/a` and `a/0` cases apart.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::special::ln_factorial;

/// `ln(sqrt(2 pi))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Observed sample. For fixed-design regression the `i`-th value is the
/// response attached to design row `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    values: Vec<f64>,
}

impl Sample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("sample"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite observation at index {i}")));
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.n() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Outcome of `ln p_theta'(x) - ln p_theta(x)` with the zero-density cases
/// kept explicit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogRatio {
    Finite(f64),
    /// Both densities vanish; the ratio is taken to be 1.
    BothZero,
    /// Only the numerator (the `theta'` density) vanishes.
    NumZero,
    /// Only the denominator (the `theta` density) vanishes.
    DenZero,
}

impl LogRatio {
    pub fn from_logs(log_num: f64, log_den: f64) -> Self {
        match (log_num == f64::NEG_INFINITY, log_den == f64::NEG_INFINITY) {
            (true, true) => LogRatio::BothZero,
            (true, false) => LogRatio::NumZero,
            (false, true) => LogRatio::DenZero,
            (false, false) => LogRatio::Finite(log_num - log_den),
        }
    }

    /// Extended-real value of the log ratio.
    pub fn value(self) -> f64 {
        match self {
            LogRatio::Finite(u) => u,
            LogRatio::BothZero => 0.0,
            LogRatio::NumZero => f64::NEG_INFINITY,
            LogRatio::DenZero => f64::INFINITY,
        }
    }

    pub fn is_sentinel(self) -> bool {
        !matches!(self, LogRatio::Finite(_))
    }

    /// The ratio with numerator and denominator exchanged.
    pub fn swap(self) -> Self {
        match self {
            LogRatio::Finite(u) => LogRatio::Finite(-u),
            LogRatio::BothZero => LogRatio::BothZero,
            LogRatio::NumZero => LogRatio::DenZero,
            LogRatio::DenZero => LogRatio::NumZero,
        }
    }
}

type StatFn = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;
type LogBaseFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type PartitionFn = Arc<dyn Fn(&[f64]) -> Option<f64> + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64]) -> Option<Vec<f64>> + Send + Sync>;
type HessFn = Arc<dyn Fn(&[f64]) -> Option<DMatrix<f64>> + Send + Sync>;

/// A canonical exponential family `h(x) exp(<theta, T(x)> - A(theta))` on
/// scalar observations.
///
/// The log-partition closures return `None` outside the natural domain.
#[derive(Clone)]
pub struct ExpFamily {
    name: String,
    dim: usize,
    statistic: StatFn,
    log_base: LogBaseFn,
    log_partition: PartitionFn,
    mean_map: GradFn,
    fisher: HessFn,
    discrete: bool,
}

impl fmt::Debug for ExpFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExpFamily")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("discrete", &self.discrete)
            .finish()
    }
}

impl ExpFamily {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        discrete: bool,
        statistic: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static,
        log_base: impl Fn(f64) -> f64 + Send + Sync + 'static,
        log_partition: impl Fn(&[f64]) -> Option<f64> + Send + Sync + 'static,
        mean_map: impl Fn(&[f64]) -> Option<Vec<f64>> + Send + Sync + 'static,
        fisher: impl Fn(&[f64]) -> Option<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            statistic: Arc::new(statistic),
            log_base: Arc::new(log_base),
            log_partition: Arc::new(log_partition),
            mean_map: Arc::new(mean_map),
            fisher: Arc::new(fisher),
            discrete,
        }
    }

    /// `N(theta, 1)` written as `T(x) = x`, `A(theta) = theta^2 / 2`.
    pub fn gaussian_location() -> Self {
        Self::new(
            "gaussian_location",
            1,
            false,
            |x| vec![x],
            |x| -0.5 * x * x - LN_SQRT_2PI,
            |t| Some(0.5 * t[0] * t[0]),
            |t| Some(vec![t[0]]),
            |_| Some(DMatrix::from_element(1, 1, 1.0)),
        )
    }

    /// Poisson counts in natural form, `A(eta) = exp(eta)`.
    pub fn poisson() -> Self {
        Self::new(
            "poisson",
            1,
            true,
            |x| vec![x],
            |x| match count(x) {
                Some(k) => -ln_factorial(k),
                None => f64::NEG_INFINITY,
            },
            |t| Some(t[0].exp()),
            |t| Some(vec![t[0].exp()]),
            |t| Some(DMatrix::from_element(1, 1, t[0].exp())),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_discrete(&self) -> bool {
        self.discrete
    }

    pub fn statistic(&self, x: f64) -> Vec<f64> {
        (self.statistic)(x)
    }

    pub fn log_partition(&self, theta: &[f64]) -> Result<f64> {
        (self.log_partition)(theta)
            .filter(|a| a.is_finite())
            .ok_or_else(|| Error::OutsideDomain(format!("{} at {theta:?}", self.name)))
    }

    /// Mean map `grad A(theta)` and Fisher information `hess A(theta)`.
    pub fn stats(&self, theta: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        check_dim(self.dim, theta.len(), "exponential family parameter")?;
        let outside = || Error::OutsideDomain(format!("{} at {theta:?}", self.name));
        let mu = (self.mean_map)(theta).ok_or_else(outside)?;
        let fisher = (self.fisher)(theta).ok_or_else(outside)?;
        check_dim(self.dim, mu.len(), "mean map output")?;
        Ok((mu, fisher))
    }

    fn log_density(&self, theta: &[f64], x: f64) -> Result<f64> {
        let base = (self.log_base)(x);
        if base == f64::NEG_INFINITY {
            return Ok(base);
        }
        let t = self.statistic(x);
        let dot: f64 = t.iter().zip(theta).map(|(a, b)| a * b).sum();
        Ok(base + dot - self.log_partition(theta)?)
    }
}

/// Candidate (or true) noise density for fixed-design regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseDensity {
    Gaussian { sd: f64 },
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
}

impl Default for NoiseDensity {
    fn default() -> Self {
        NoiseDensity::Gaussian { sd: 1.0 }
    }
}

impl NoiseDensity {
    pub fn log_pdf(&self, r: f64) -> f64 {
        match *self {
            NoiseDensity::Gaussian { sd } => {
                let z = r / sd;
                -0.5 * z * z - sd.ln() - LN_SQRT_2PI
            }
            NoiseDensity::Uniform { half_width } => {
                if r.abs() <= half_width {
                    -(2.0 * half_width).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn pdf(&self, r: f64) -> f64 {
        self.log_pdf(r).exp()
    }

    /// `d/dr ln q(r)` where the density is positive.
    pub fn dlog_pdf(&self, r: f64) -> f64 {
        match *self {
            NoiseDensity::Gaussian { sd } => -r / (sd * sd),
            NoiseDensity::Uniform { .. } => 0.0,
        }
    }

    /// Order of the density in the translation-Hellinger sense.
    pub fn order(&self) -> f64 {
        match self {
            NoiseDensity::Gaussian { .. } => 1.0,
            NoiseDensity::Uniform { .. } => 0.0,
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self, NoiseDensity::Gaussian { .. })
    }

    /// Interval outside of which the density is negligible (or zero).
    pub fn effective_support(&self) -> (f64, f64) {
        match *self {
            NoiseDensity::Gaussian { sd } => (-12.0 * sd, 12.0 * sd),
            NoiseDensity::Uniform { half_width } => (-half_width, half_width),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseDensity::Gaussian { sd } => sd.is_finite() && sd > 0.0,
            NoiseDensity::Uniform { half_width } => half_width.is_finite() && half_width > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("bad noise density {self:?}")))
        }
    }
}

/// Fixed design `w_1..w_n` encoded as the feature matrix (n x p) together
/// with the candidate noise density.
#[derive(Clone, Debug)]
pub struct RegressionDesign {
    design: DMatrix<f64>,
    noise: NoiseDensity,
}

impl RegressionDesign {
    pub fn new(design: DMatrix<f64>, noise: NoiseDensity) -> Result<Self> {
        if design.nrows() == 0 || design.ncols() == 0 {
            return Err(Error::Empty("design matrix"));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite design entry"));
        }
        noise.validate()?;
        Ok(Self { design, noise })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn noise(&self) -> NoiseDensity {
        self.noise
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    /// `(Phi beta)_i`.
    pub fn predictor(&self, beta: &[f64], i: usize) -> f64 {
        self.design.row(i).iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    /// `Phi beta` for all rows.
    pub fn predictions(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for (j, b) in beta.iter().enumerate() {
            if *b == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.design.column(j).iter()) {
                *o += v * b;
            }
        }
        out
    }
}

/// The parametric families used throughout the crate.
#[derive(Clone, Debug)]
pub enum DensityModel {
    /// `N(theta, 1)`.
    GaussianLocation,
    /// `Pois(exp(eta))`, parameterized by `eta`.
    PoissonIntensity,
    /// `U(0, exp(u))`, parameterized by `u`.
    UniformScale,
    CanonicalExpFam(ExpFamily),
    /// `y_i = (Phi beta)_i + noise`, coordinate `i` tied to design row `i`.
    FixedDesignRegression(RegressionDesign),
}

fn count(x: f64) -> Option<u64> {
    (x >= 0.0 && x.fract() == 0.0 && x < 9.0e15).then_some(x as u64)
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("non-finite {what}")))
    }
}

impl DensityModel {
    pub fn name(&self) -> &str {
        match self {
            DensityModel::GaussianLocation => "gaussian_location",
            DensityModel::PoissonIntensity => "poisson_intensity",
            DensityModel::UniformScale => "uniform_scale",
            DensityModel::CanonicalExpFam(f) => f.name(),
            DensityModel::FixedDesignRegression(_) => "fixed_design_regression",
        }
    }

    /// Parameter dimension.
    pub fn dim(&self) -> usize {
        match self {
            DensityModel::CanonicalExpFam(f) => f.dim(),
            DensityModel::FixedDesignRegression(r) => r.p(),
            _ => 1,
        }
    }

    /// Whether `theta -> ln p_theta(x)` is differentiable wherever finite and
    /// the support does not move with `theta`. Models failing this need the
    /// score-function gradient estimator.
    pub fn is_smooth(&self) -> bool {
        match self {
            DensityModel::UniformScale => false,
            DensityModel::FixedDesignRegression(r) => r.noise().is_smooth(),
            _ => true,
        }
    }

    pub fn validate_param(&self, param: &[f64]) -> Result<()> {
        check_dim(self.dim(), param.len(), "model parameter")?;
        check_finite(param, "parameter")?;
        if let DensityModel::CanonicalExpFam(f) = self {
            f.log_partition(param)?;
        }
        Ok(())
    }

    pub fn validate_sample(&self, sample: &Sample) -> Result<()> {
        if let DensityModel::FixedDesignRegression(r) = self {
            check_dim(r.n(), sample.n(), "responses vs design rows")?;
        }
        Ok(())
    }

    /// `ln p^i_theta(x)`; `-inf` exactly where the density vanishes.
    pub fn log_density(&self, param: &[f64], x: f64, i: usize) -> Result<f64> {
        if !x.is_finite() {
            return Err(invalid("non-finite observation"));
        }
        self.validate_param(param)?;
        Ok(match self {
            DensityModel::GaussianLocation => -0.5 * (x - param[0]).powi(2) - LN_SQRT_2PI,
            DensityModel::PoissonIntensity => match count(x) {
                Some(k) => x * param[0] - param[0].exp() - ln_factorial(k),
                None => f64::NEG_INFINITY,
            },
            DensityModel::UniformScale => {
                if (0.0..=param[0].exp()).contains(&x) {
                    -param[0]
                } else {
                    f64::NEG_INFINITY
                }
            }
            DensityModel::CanonicalExpFam(f) => f.log_density(param, x)?,
            DensityModel::FixedDesignRegression(r) => {
                if i >= r.n() {
                    return Err(invalid(format!("coordinate {i} beyond design rows {}", r.n())));
                }
                r.noise().log_pdf(x - r.predictor(param, i))
            }
        })
    }

    /// `ln p_theta'(x) - ln p_theta(x)` with explicit zero-density outcomes.
    pub fn log_density_ratio(
        &self,
        theta: &[f64],
        theta_prime: &[f64],
        x: f64,
        i: usize,
    ) -> Result<LogRatio> {
        let den = self.log_density(theta, x, i)?;
        let num = self.log_density(theta_prime, x, i)?;
        Ok(LogRatio::from_logs(num, den))
    }

    /// Gradient of `ln p_theta(x)` in the parameter, where the density is
    /// positive.
    pub fn score(&self, param: &[f64], x: f64, i: usize) -> Result<Vec<f64>> {
        self.validate_param(param)?;
        let mut out = vec![0.0; self.dim()];
        self.add_score(param, x, i, 1.0, &mut out);
        Ok(out)
    }

    /// Mean map and Fisher information for the families that are canonical
    /// exponential families.
    pub fn expfam_stats(&self, theta: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        check_finite(theta, "parameter")?;
        match self {
            DensityModel::CanonicalExpFam(f) => f.stats(theta),
            DensityModel::GaussianLocation => ExpFamily::gaussian_location().stats(theta),
            DensityModel::PoissonIntensity => ExpFamily::poisson().stats(theta),
            other => Err(invalid(format!("{} is not a canonical exponential family", other.name()))),
        }
    }

    /// Fills `out[i]` with `ln p^i_theta(x_i)` up to an additive term that
    /// depends on `x_i` only. Zero densities stay `-inf`. No validation.
    pub(crate) fn log_densities_shifted(&self, param: &[f64], xs: &[f64], out: &mut [f64]) {
        match self {
            DensityModel::GaussianLocation => {
                let t = param[0];
                for (o, &x) in out.iter_mut().zip(xs) {
                    *o = -0.5 * (x - t) * (x - t);
                }
            }
            DensityModel::PoissonIntensity => {
                let eta = param[0];
                let rate = eta.exp();
                for (o, &x) in out.iter_mut().zip(xs) {
                    *o = if count(x).is_some() { x * eta - rate } else { f64::NEG_INFINITY };
                }
            }
            DensityModel::UniformScale => {
                let u = param[0];
                let theta = u.exp();
                for (o, &x) in out.iter_mut().zip(xs) {
                    *o = if (0.0..=theta).contains(&x) { -u } else { f64::NEG_INFINITY };
                }
            }
            DensityModel::CanonicalExpFam(f) => {
                for (o, &x) in out.iter_mut().zip(xs) {
                    *o = f.log_density(param, x).unwrap_or(f64::NAN);
                }
            }
            DensityModel::FixedDesignRegression(r) => {
                let pred = r.predictions(param);
                let noise = r.noise();
                for ((o, &y), eta) in out.iter_mut().zip(xs).zip(pred) {
                    *o = noise.log_pdf(y - eta);
                }
            }
        }
    }

    fn add_score(&self, param: &[f64], x: f64, i: usize, w: f64, out: &mut [f64]) {
        match self {
            DensityModel::GaussianLocation => out[0] += w * (x - param[0]),
            DensityModel::PoissonIntensity => out[0] += w * (x - param[0].exp()),
            DensityModel::UniformScale => out[0] -= w,
            DensityModel::CanonicalExpFam(f) => {
                let t = f.statistic(x);
                let mu = (f.mean_map)(param).unwrap_or_else(|| vec![f64::NAN; f.dim()]);
                for ((o, a), b) in out.iter_mut().zip(t).zip(mu) {
                    *o += w * (a - b);
                }
            }
            DensityModel::FixedDesignRegression(r) => {
                let g = -r.noise().dlog_pdf(x - r.predictor(param, i));
                for (o, v) in out.iter_mut().zip(r.design.row(i).iter()) {
                    *o += w * g * v;
                }
            }
        }
    }

    /// `out += sum_i weights[i] * grad ln p^i_theta(x_i)`, skipping zero
    /// weights. No validation.
    pub(crate) fn accumulate_score(&self, param: &[f64], xs: &[f64], weights: &[f64], out: &mut [f64]) {
        match self {
            DensityModel::FixedDesignRegression(r) => {
                let pred = r.predictions(param);
                let noise = r.noise();
                // Phi^T (w * g)
                let mut scaled = vec![0.0; xs.len()];
                for (((s, &y), eta), &w) in scaled.iter_mut().zip(xs).zip(&pred).zip(weights) {
                    if w != 0.0 {
                        *s = -w * noise.dlog_pdf(y - eta);
                    }
                }
                for (j, o) in out.iter_mut().enumerate() {
                    *o += r
                        .design
                        .column(j)
                        .iter()
                        .zip(&scaled)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
            _ => {
                for (i, (&x, &w)) in xs.iter().zip(weights).enumerate() {
                    if w != 0.0 {
                        self.add_score(param, x, i, w, out);
                    }
                }
            }
        }
    }

    /// Density of a one-dimensional variant as a plain function, for
    /// quadrature. `None` for regression models.
    pub fn density_fn(&self, param: &[f64]) -> Option<impl Fn(f64) -> f64 + '_> {
        if matches!(self, DensityModel::FixedDesignRegression(_)) {
            return None;
        }
        let p = param.to_vec();
        Some(move |x: f64| self.log_density(&p, x, 0).map(f64::exp).unwrap_or(0.0))
    }

    /// Whether observations live on the non-negative integers.
    pub fn is_discrete(&self) -> bool {
        match self {
            DensityModel::PoissonIntensity => true,
            DensityModel::CanonicalExpFam(f) => f.is_discrete(),
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hellinger::integrate;

    const LN_2PI_HALF: f64 = 0.918_938_533_204_672_8;

    #[test]
    fn log_density_examples() {
        let g = DensityModel::GaussianLocation;
        assert!((g.log_density(&[0.0], 0.0, 0).unwrap() + LN_2PI_HALF).abs() < 1e-15);
        let p = DensityModel::PoissonIntensity;
        assert!((p.log_density(&[3f64.ln()], 0.0, 0).unwrap() + 3.0).abs() < 1e-14);
        let u = DensityModel::UniformScale;
        assert_eq!(u.log_density(&[0.0], 1.5, 0).unwrap(), f64::NEG_INFINITY);
        assert!(g.log_density(&[f64::NAN], 0.0, 0).is_err());
        assert!(g.log_density(&[0.0], f64::INFINITY, 0).is_err());
    }

    #[test]
    fn log_ratio_sentinels() {
        let g = DensityModel::GaussianLocation;
        assert_eq!(g.log_density_ratio(&[1.0], &[1.0], 0.3, 0).unwrap(), LogRatio::Finite(0.0));
        let u = DensityModel::UniformScale;
        let r = u.log_density_ratio(&[0.0], &[2f64.ln()], 1.5, 0).unwrap();
        assert_eq!(r, LogRatio::DenZero);
        assert_eq!(r.value(), f64::INFINITY);
        let r = u.log_density_ratio(&[0.0], &[0.5f64.ln()], 1.5, 0).unwrap();
        assert_eq!(r, LogRatio::BothZero);
        assert_eq!(r.value(), 0.0);
        let r = u.log_density_ratio(&[2f64.ln()], &[0.0], 1.5, 0).unwrap();
        assert_eq!(r, LogRatio::NumZero);
    }

    #[test]
    fn expfam_examples() {
        let g = DensityModel::GaussianLocation;
        let (mu, i) = g.expfam_stats(&[2.0]).unwrap();
        assert_eq!((mu[0], i[(0, 0)]), (2.0, 1.0));
        let p = DensityModel::PoissonIntensity;
        let (mu, i) = p.expfam_stats(&[0.0]).unwrap();
        assert_eq!((mu[0], i[(0, 0)]), (1.0, 1.0));
        let (mu, i) = p.expfam_stats(&[3f64.ln()]).unwrap();
        assert!((mu[0] - 3.0).abs() < 1e-14 && (i[(0, 0)] - 3.0).abs() < 1e-14);
        assert!(DensityModel::UniformScale.expfam_stats(&[0.0]).is_err());
    }

    #[test]
    fn expfam_domain_errors() {
        // Exponential distribution rate: A(theta) = -ln(-theta), theta < 0.
        let fam = ExpFamily::new(
            "exponential",
            1,
            false,
            |x| vec![x],
            |x| if x >= 0.0 { 0.0 } else { f64::NEG_INFINITY },
            |t| (t[0] < 0.0).then(|| -(-t[0]).ln()),
            |t| (t[0] < 0.0).then(|| vec![-1.0 / t[0]]),
            |t| (t[0] < 0.0).then(|| DMatrix::from_element(1, 1, 1.0 / (t[0] * t[0]))),
        );
        let m = DensityModel::CanonicalExpFam(fam);
        assert!(m.expfam_stats(&[1.0]).is_err());
        assert!(m.log_density(&[1.0], 0.5, 0).is_err());
        let (mu, _) = m.expfam_stats(&[-2.0]).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-15);
        let lp = m.log_density(&[-2.0], 1.0, 0).unwrap();
        assert!((lp - (2f64.ln() - 2.0)).abs() < 1e-14);
    }

    #[test]
    fn densities_integrate_to_one() {
        let g = DensityModel::GaussianLocation;
        for t in [-3.0, 0.0, 1.7] {
            let f = g.density_fn(&[t]).unwrap();
            let v = integrate(&f, &[t - 14.0, t + 14.0], 256).0;
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
        let u = DensityModel::UniformScale;
        for t in [-1.0, 0.0, 2.3] {
            let f = u.density_fn(&[t]).unwrap();
            let v = integrate(&f, &[0.0, f64::exp(t)], 64).0;
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
        let p = DensityModel::PoissonIntensity;
        for lam in [0.5f64, 3.0, 30.0] {
            let f = p.density_fn(&[lam.ln()]).unwrap();
            let v: f64 = (0..400).map(|k| f(k as f64)).sum();
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn expfam_mean_map_matches_finite_difference() {
        for fam in [ExpFamily::gaussian_location(), ExpFamily::poisson()] {
            for k in -20..=20 {
                let t = k as f64 * 0.15;
                let h = 1e-5;
                let fd = (fam.log_partition(&[t + h]).unwrap() - fam.log_partition(&[t - h]).unwrap())
                    / (2.0 * h);
                let (mu, fisher) = fam.stats(&[t]).unwrap();
                assert!((fd - mu[0]).abs() <= 1e-6 * mu[0].abs().max(1.0), "{} {t}", fam.name());
                assert!(fisher[(0, 0)] >= 0.0);
            }
        }
    }

    #[test]
    fn regression_depends_on_linear_predictor_only() {
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let m = DensityModel::FixedDesignRegression(
            RegressionDesign::new(design, NoiseDensity::default()).unwrap(),
        );
        // beta = (1, 0) and (0, 1) share the predictor at row 1.
        let a = m.log_density(&[1.0, 0.0], 0.4, 1).unwrap();
        let b = m.log_density(&[0.0, 1.0], 0.4, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            m.log_density(&[1.0, 0.0], 0.4, 2).unwrap(),
            m.log_density(&[0.0, 1.0], 0.4, 2).unwrap()
        );
        assert!(m.log_density(&[0.0, 1.0], 0.4, 3).is_err());
        let s = m.score(&[0.5, 0.5], 2.0, 2).unwrap();
        // residual 2 - 1.5 = 0.5, features (1, 2)
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shifted_log_densities_preserve_differences() {
        let xs = [0.0, 1.0, 4.0, 2.5];
        for m in [DensityModel::GaussianLocation, DensityModel::PoissonIntensity, DensityModel::UniformScale] {
            let (a, b) = ([0.3], [1.4]);
            let mut la = [0.0; 4];
            let mut lb = [0.0; 4];
            m.log_densities_shifted(&a, &xs, &mut la);
            m.log_densities_shifted(&b, &xs, &mut lb);
            for (i, &x) in xs.iter().enumerate() {
                let exact = m.log_density_ratio(&a, &b, x, i).unwrap();
                let shifted = LogRatio::from_logs(lb[i], la[i]);
                match (exact, shifted) {
                    (LogRatio::Finite(e), LogRatio::Finite(s)) => assert!((e - s).abs() < 1e-12),
                    (e, s) => assert_eq!(e, s),
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ratio_is_antisymmetric(t in -3.0f64..3.0, tp in -3.0f64..3.0, x in -1.0f64..25.0, which in 0usize..3) {
                let m = [DensityModel::GaussianLocation, DensityModel::PoissonIntensity, DensityModel::UniformScale][which].clone();
                let x = if which == 1 { x.abs().round() } else { x };
                let ab = m.log_density_ratio(&[t], &[tp], x, 0).unwrap();
                let ba = m.log_density_ratio(&[tp], &[t], x, 0).unwrap();
                prop_assert_eq!(ab.swap(), ba);
                if ab != LogRatio::BothZero {
                    prop_assert_eq!(ab.value(), -ba.value());
                }
            }
        }
    }
}
