use serde::{Deserialize, Serialize};

use super::{AdamConfig, GradientEstimator, SaddleProblem, COMPETITOR_MEAN_BOUND, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::contrast::{log_density_table, pair_table, std_normals, PairOptions};
use crate::error::{check_dim, invalid, Error, Result};
use crate::rng;
use crate::variational::{kl_meanfield, kl_meanfield_grad, MeanFieldGaussian};

/// Settings for the inner competitor maximization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub n_iters: usize,
    pub adam: AdamConfig,
    pub n_draws: usize,
    /// Draws used to evaluate the objective at the final competitor.
    pub n_eval_draws: usize,
    pub seed: u64,
    pub estimator: GradientEstimator,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            n_iters: 200,
            adam: AdamConfig::default(),
            n_draws: 64,
            n_eval_draws: 4096,
            seed: 0,
            estimator: GradientEstimator::Auto,
        }
    }
}

/// Result of the inner maximization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxFit {
    pub value: f64,
    pub std_error: f64,
    pub nu: MeanFieldGaussian,
}

struct Inner<'a> {
    prob: &'a SaddleProblem,
    lp: Vec<f64>,
}

impl Inner<'_> {
    /// Value, standard error and (optionally) gradient in `(m', s)` of
    /// `E R_hat(theta, theta') - KL / lambda` from `k` draws.
    fn eval(&self, nu: &MeanFieldGaussian, eps: &[Vec<f64>], estimator: GradientEstimator, grad: bool) -> Result<(f64, f64, Vec<f64>)> {
        let prob = self.prob;
        let d = prob.dim();
        let xs = prob.sample.values();
        let n = xs.len();
        let sd = nu.sd();
        let tps: Vec<Vec<f64>> = eps
            .iter()
            .map(|e| (0..d).map(|i| nu.m_prime[i] + sd[i] * e[i]).collect())
            .collect();
        let lq = log_density_table(&prob.model, &tps, xs);
        let pathwise = grad && estimator == GradientEstimator::Pathwise;
        let t = pair_table(&self.lp, &lq, n, 1, tps.len(), PairOptions { weights_prime: pathwise, ..Default::default() });
        let k = tps.len() as f64;
        let (mean, var) = crate::special::mean_var(&t.col_sum);
        let kl = kl_meanfield(nu, &prob.prior_competitor)?;
        let value = mean - kl / prob.lambda;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: 0,
                reason: "non-finite inner objective".into(),
            });
        }
        let se = if tps.len() > 1 { (var / k).sqrt() } else { 0.0 };
        let mut g = vec![0.0; 2 * d];
        if grad {
            if pathwise {
                let mut s = vec![0.0; d];
                for (kk, (tp, e)) in tps.iter().zip(eps).enumerate() {
                    s.iter_mut().for_each(|v| *v = 0.0);
                    prob.model.accumulate_score(tp, xs, &t.w_prime[kk * n..(kk + 1) * n], &mut s);
                    for r in 0..d {
                        let v = s[r] / (n as f64 * k);
                        g[r] += v;
                        g[d + r] += v * 0.5 * sd[r] * e[r];
                    }
                }
            } else {
                let total: f64 = t.col_sum.iter().sum();
                for (kk, e) in eps.iter().enumerate() {
                    let w = (t.col_sum[kk] - (total - t.col_sum[kk]) / (k - 1.0)) / k;
                    for r in 0..d {
                        g[r] += w * e[r] / sd[r];
                        g[d + r] += w * 0.5 * (e[r] * e[r] - 1.0);
                    }
                }
            }
            let (gm, gs) = kl_meanfield_grad(nu, &prob.prior_competitor)?;
            for r in 0..d {
                g[r] -= gm[r] / prob.lambda;
                g[d + r] -= gs[r] / prob.lambda;
            }
        }
        Ok((value, se, g))
    }
}

/// Inner competitor maximization at fixed `theta`, started at the
/// competitor prior.
pub fn variational_softmax_fit(prob: &SaddleProblem, theta: &[f64], inner: &InnerConfig) -> Result<SoftmaxFit> {
    prob.model.validate_param(theta)?;
    check_dim(prob.dim(), theta.len(), "softmax parameter")?;
    if inner.n_draws < 2 || inner.n_eval_draws < 2 {
        return Err(invalid("inner maximization needs at least two draws"));
    }
    let d = prob.dim();
    let estimator = match inner.estimator {
        GradientEstimator::Auto if prob.model.is_smooth() => GradientEstimator::Pathwise,
        GradientEstimator::Auto => GradientEstimator::ScoreFunction,
        e => e,
    };
    let ctx = Inner {
        prob,
        lp: log_density_table(&prob.model, &[theta.to_vec()], prob.sample.values()),
    };
    let mut nu = prob.prior_competitor.as_meanfield()?;
    let (mut m1, mut m2) = (vec![0.0; 2 * d], vec![0.0; 2 * d]);
    let h = inner.adam;
    for t in 1..=inner.n_iters {
        let mut r = rng::stream_at(inner.seed, &[t as u64]);
        let eps = std_normals(&mut r, inner.n_draws, d);
        let (_, _, g) = ctx.eval(&nu, &eps, estimator, true)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: t,
                reason: "non-finite inner gradient".into(),
            });
        }
        let b1t = 1.0 - h.beta1.powi(t as i32);
        let b2t = 1.0 - h.beta2.powi(t as i32);
        for i in 0..2 * d {
            m1[i] = h.beta1 * m1[i] + (1.0 - h.beta1) * g[i];
            m2[i] = h.beta2 * m2[i] + (1.0 - h.beta2) * g[i] * g[i];
            let step = h.lr * (m1[i] / b1t) / ((m2[i] / b2t).sqrt() + h.eps);
            if i < d {
                nu.m_prime[i] = (nu.m_prime[i] + step).clamp(-COMPETITOR_MEAN_BOUND, COMPETITOR_MEAN_BOUND);
            } else {
                nu.s[i - d] = (nu.s[i - d] + step).clamp(LOG_VAR_MIN, LOG_VAR_MAX);
            }
        }
    }
    let mut r = rng::stream_at(inner.seed, &[u64::MAX]);
    let eps = std_normals(&mut r, inner.n_eval_draws, d);
    let (value, std_error, _) = ctx.eval(&nu, &eps, estimator, false)?;
    Ok(SoftmaxFit { value, std_error, nu })
}

/// Variational softmax: the value reached by the inner maximization over
/// mean-field competitors.
pub fn variational_softmax(prob: &SaddleProblem, theta: &[f64], inner: &InnerConfig) -> Result<f64> {
    variational_softmax_fit(prob, theta, inner).map(|f| f.value)
}

/// `(1/lambda) log((1/N) sum_j exp(lambda R_hat(theta, theta'_j)))` with
/// `theta'_j` drawn from the competitor prior, and its delta-method
/// standard error.
pub fn logmeanexp_softmax(prob: &SaddleProblem, theta: &[f64], n_prior_draws: usize, seed: u64) -> Result<(f64, f64)> {
    if n_prior_draws < 2 {
        return Err(invalid("log-mean-exp softmax needs at least two prior draws"));
    }
    prob.model.validate_param(theta)?;
    let d = prob.dim();
    let xs = prob.sample.values();
    let n = xs.len();
    let lp = log_density_table(&prob.model, &[theta.to_vec()], xs);
    let prior = prob.prior_competitor.as_full();
    let mut r = rng::stream(seed);
    let mut values = Vec::with_capacity(n_prior_draws);
    const CHUNK: usize = 8192;
    let mut left = n_prior_draws;
    while left > 0 {
        let c = left.min(CHUNK);
        let tps: Vec<Vec<f64>> = std_normals(&mut r, c, d)
            .into_iter()
            .map(|e| {
                let mut t = vec![0.0; d];
                crate::variational::reparam_full_into(&prior, &e, &mut t);
                t
            })
            .collect();
        let lq = log_density_table(&prob.model, &tps, xs);
        let t = pair_table(&lp, &lq, n, 1, c, PairOptions::default());
        values.extend_from_slice(&t.col_sum);
        left -= c;
    }
    Ok(logmeanexp(&values, prob.lambda))
}

/// `(1/lambda) log mean exp(lambda v)` with max subtraction, and the
/// delta-method standard error.
pub(crate) fn logmeanexp(values: &[f64], lambda: f64) -> (f64, f64) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.iter().map(|v| (lambda * (v - max)).exp()).collect();
    let (mean, var) = crate::special::mean_var(&w);
    let value = max + mean.ln() / lambda;
    let se = (var / w.len() as f64).sqrt() / (mean * lambda);
    (value, se)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logmeanexp_of_constant_is_exact() {
        let (v, se) = logmeanexp(&[0.3; 10], 25.0);
        assert_eq!(v, 0.3);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn logmeanexp_sandwich() {
        let vals = [0.1, -0.4, 0.35, 0.2, -0.9];
        for lambda in [0.01, 1.0, 50.0, 1e4] {
            let (v, _) = logmeanexp(&vals, lambda);
            let mean = vals.iter().sum::<f64>() / 5.0;
            assert!(v <= 0.35 + 1e-12 && v >= mean - 1e-12, "{lambda}: {v}");
        }
    }
}
