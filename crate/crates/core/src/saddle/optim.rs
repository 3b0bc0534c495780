use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{evaluate, grad_mc, lipschitz_probe, Blocks, phi_len, project, McConfig, SaddleGradient, SaddleProblem, SaddleState};
use crate::error::{check_dim, invalid, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// One competitor ascent step, then one target descent step, per
    /// iteration.
    #[default]
    Adam,
    /// Projected stochastic extragradient on both blocks at once.
    Extragradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: Optimizer,
    pub adam: AdamConfig,
    /// Extragradient step size; `None` estimates `1 / L` by probing.
    pub stepsize: Option<f64>,
    pub mc: McConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Optimizer::Adam,
            adam: AdamConfig::default(),
            stepsize: None,
            mc: McConfig::default(),
        }
    }
}

fn check_grad(g: &[f64], step: usize) -> Result<()> {
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step,
            reason: format!("non-finite gradient coordinate {i}"),
        });
    }
    Ok(())
}

/// Descent direction: the target block descends and the competitor block
/// ascends.
fn direction(g: &SaddleGradient, d: usize) -> Vec<f64> {
    let mut v = g.flatten();
    for x in &mut v[phi_len(d)..] {
        *x = -*x;
    }
    v
}

fn adam_update(state: &mut SaddleState, dir: &[f64], hyper: &AdamConfig, t: usize) {
    let d = state.dim();
    let mut x = state.params();
    let b1t = 1.0 - hyper.beta1.powi(t as i32);
    let b2t = 1.0 - hyper.beta2.powi(t as i32);
    for (i, &g) in dir.iter().enumerate() {
        let m = hyper.beta1 * state.first_moment[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.second_moment[i] + (1.0 - hyper.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        x[i] -= hyper.lr * (m / b1t) / ((v / b2t).sqrt() + hyper.eps);
    }
    project(&mut x, d);
    state.set_params(&x);
}

/// One Adam step on both blocks from a precomputed gradient: descent on the
/// target, ascent on the competitor, then projection. The gradient's
/// objective value is appended to the trace.
pub fn adam_step(state: &SaddleState, grads: &SaddleGradient, hyper: &AdamConfig) -> Result<SaddleState> {
    let d = state.dim();
    check_dim(d, grads.m.len(), "gradient dimension")?;
    let dir = direction(grads, d);
    check_grad(&dir, state.step)?;
    let mut next = state.clone();
    adam_update(&mut next, &dir, hyper, state.step + 1);
    next.step += 1;
    next.trace.push(grads.objective);
    Ok(next)
}

/// Generic projected extragradient step on a descent field:
/// `x_half = P(x - eta F(x))`, `x_next = P(x - eta F(x_half))`.
pub fn extragradient<F, P>(x: &[f64], field: F, eta: f64, proj: P) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    P: Fn(&mut [f64]),
{
    let g0 = field(x)?;
    let mut half: Vec<f64> = x.iter().zip(&g0).map(|(a, g)| a - eta * g).collect();
    proj(&mut half);
    let g1 = field(&half)?;
    let mut next: Vec<f64> = x.iter().zip(&g1).map(|(a, g)| a - eta * g).collect();
    proj(&mut next);
    Ok(next)
}

/// One projected stochastic extragradient step on the objective.
pub fn extragradient_step(state: &SaddleState, prob: &SaddleProblem, mc: &McConfig, stepsize: f64) -> Result<SaddleState> {
    if !(stepsize > 0.0 && stepsize.is_finite()) {
        return Err(invalid(format!("stepsize must be positive, got {stepsize}")));
    }
    let d = state.dim();
    let step = state.step;
    let objective = std::cell::Cell::new(None);
    let call = std::cell::Cell::new(0u64);
    let field = |x: &[f64]| -> Result<Vec<f64>> {
        let (phi, nu) = super::unflatten_params(x, d);
        let c = call.get();
        call.set(c + 1);
        let mc = mc.with_seed(rng::derive_seed(mc.seed, &[step as u64, c]));
        let g = grad_mc(prob, &phi, &nu, &mc).map_err(|e| with_step(e, step))?;
        if objective.get().is_none() {
            objective.set(Some(g.objective));
        }
        let dir = direction(&g, d);
        check_grad(&dir, step)?;
        Ok(dir)
    };
    let x = extragradient(&state.params(), field, stepsize, |v| project(v, d))?;
    let mut next = state.clone();
    next.set_params(&x);
    next.step += 1;
    next.trace.push(objective.get().unwrap_or(f64::NAN));
    Ok(next)
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { reason, .. } => Error::Diverged { step, reason },
        other => other,
    }
}

/// A completed fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub state: SaddleState,
    /// Extragradient step size actually used.
    pub stepsize: Option<f64>,
}

/// A failed fit, carrying the last state whose objective was finite.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct FitFailure {
    pub error: Error,
    pub last_valid: Box<SaddleState>,
}

/// Fits the target and competitor by `n_iters` solver iterations. With
/// `init = None` both start at their priors.
pub fn fit_rho_posterior(
    prob: &SaddleProblem,
    init: Option<SaddleState>,
    config: &OptimizerConfig,
    n_iters: usize,
) -> std::result::Result<FitResult, Box<FitFailure>> {
    let fail = |error: Error, st: &SaddleState| {
        Box::new(FitFailure {
            error,
            last_valid: Box::new(st.clone()),
        })
    };
    let mut state = match init {
        Some(s) => s,
        None => SaddleState::at_priors(prob).map_err(|e| {
            Box::new(FitFailure {
                error: e,
                last_valid: Box::new(SaddleState {
                    phi: prob.prior_target.as_full(),
                    nu: crate::variational::MeanFieldGaussian {
                        m_prime: prob.prior_competitor.mean().clone(),
                        s: prob.prior_competitor.cov().diagonal().map(f64::ln),
                    },
                    step: 0,
                    first_moment: Vec::new(),
                    second_moment: Vec::new(),
                    trace: Vec::new(),
                }),
            })
        })?,
    };
    if n_iters == 0 {
        return Err(fail(invalid("at least one iteration is required"), &state));
    }
    if state.dim() != prob.dim() {
        return Err(fail(
            Error::DimensionMismatch {
                expected: prob.dim(),
                got: state.dim(),
                context: "initial state",
            },
            &state,
        ));
    }
    match config.method {
        Optimizer::Adam => {
            for _ in 0..n_iters {
                let t = state.step;
                let mc = config.mc.with_seed(rng::derive_seed(config.mc.seed, &[t as u64, 0]));
                let g = evaluate(prob, &state.phi, &state.nu, &mc, Blocks::Both).map_err(|e| fail(with_step(e, t), &state))?;
                state = adam_step(&state, &g, &config.adam).map_err(|e| fail(e, &state))?;
            }
            Ok(FitResult { state, stepsize: None })
        }
        Optimizer::Extragradient => {
            let eta = match config.stepsize {
                Some(s) => s,
                None => {
                    let probe_mc = config.mc.with_seed(rng::derive_seed(config.mc.seed, &[u64::MAX]));
                    let l = lipschitz_probe(prob, &state, &probe_mc, 8, 0.1, rng::derive_seed(config.mc.seed, &[u64::MAX, 1]))
                        .map_err(|e| fail(e, &state))?;
                    (1.0 / l.max(1e-12)).clamp(1e-3, 1.0)
                }
            };
            for _ in 0..n_iters {
                let mc = config.mc.with_seed(rng::derive_seed(config.mc.seed, &[state.step as u64, 2]));
                state = extragradient_step(&state, prob, &mc, eta).map_err(|e| fail(e, &state))?;
            }
            Ok(FitResult {
                state,
                stepsize: Some(eta),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DensityModel, Sample};
    use crate::variational::GaussianPrior;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let prob = SaddleProblem::new(
            DensityModel::GaussianLocation,
            Sample::new(vec![0.1, 0.2]).unwrap(),
            GaussianPrior::isotropic(&[0.0], 4.0).unwrap(),
            GaussianPrior::isotropic(&[0.0], 4.0).unwrap(),
            1.0,
        )
        .unwrap();
        let st = SaddleState::at_priors(&prob).unwrap();
        let next = adam_step(&st, &SaddleGradient::zeros(1), &AdamConfig::default()).unwrap();
        assert_eq!(next.params(), st.params());
        assert_eq!(next.trace.len(), next.step);
    }

    #[test]
    fn first_adam_step_identity() {
        let prob = SaddleProblem::new(
            DensityModel::GaussianLocation,
            Sample::new(vec![0.1]).unwrap(),
            GaussianPrior::isotropic(&[0.0], 4.0).unwrap(),
            GaussianPrior::isotropic(&[0.0], 4.0).unwrap(),
            1.0,
        )
        .unwrap();
        let st = SaddleState::at_priors(&prob).unwrap();
        let hyper = AdamConfig::default();
        let mut g = SaddleGradient::zeros(1);
        g.m[0] = 0.3;
        g.m_prime[0] = -2.0;
        let next = adam_step(&st, &g, &hyper).unwrap();
        let dm = next.phi.m[0] - st.phi.m[0];
        assert!((dm + hyper.lr * 0.3 / (0.3 + hyper.eps)).abs() < 1e-15);
        let dmp = next.nu.m_prime[0] - st.nu.m_prime[0];
        assert!((dmp + hyper.lr * 2.0 / (2.0 + hyper.eps)).abs() < 1e-15);
        let mut bad = g.clone();
        bad.s[0] = f64::NAN;
        assert!(matches!(adam_step(&st, &bad, &hyper), Err(Error::Diverged { .. })));
    }

    #[test]
    fn bilinear_extragradient_contracts() {
        // min_x max_y x*y: descent field (y, -x).
        let field = |v: &[f64]| -> Result<Vec<f64>> { Ok(vec![v[1], -v[0]]) };
        let mut eg = vec![1.0, 1.0];
        let mut gd = vec![1.0, 1.0];
        for _ in 0..100 {
            eg = extragradient(&eg, field, 0.1, |_| {}).unwrap();
            let g = field(&gd).unwrap();
            gd = vec![gd[0] - 0.1 * g[0], gd[1] - 0.1 * g[1]];
        }
        let norm = |v: &[f64]| (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!(norm(&eg) < 1.0, "{}", norm(&eg));
        assert!(norm(&gd) >= 1.0, "{}", norm(&gd));
        let zero = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![0.0, 0.0]) };
        assert_eq!(extragradient(&[0.3, -0.2], zero, 0.5, |_| {}).unwrap(), vec![0.3, -0.2]);
    }
}
