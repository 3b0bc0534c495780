use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;

/// Hellinger risk of the uniform-scale MLE under
/// `P = (1 - 2/n) U[0, 1/10] + (2/n) U[1/10, 9/10]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirgeResult {
    pub n: usize,
    pub n_mc: usize,
    /// Monte-Carlo mean of `H^2(P, U[0, max X_i])`.
    pub mle_hellinger_risk: f64,
    pub mle_std_error: f64,
    /// `H^2(P, U[0, 1/10])`.
    pub projection_hellinger: f64,
}

/// Mixture density on `[0, 1/10)` and `[1/10, 9/10]`.
fn levels(n: usize) -> (f64, f64) {
    let w = 2.0 / n as f64;
    ((1.0 - w) / 0.1, w / 0.8)
}

/// `H^2(P, U[0, theta])` from the piecewise-constant affinity.
pub fn birge_hellinger_sq(n: usize, theta: f64) -> f64 {
    let (p1, p2) = levels(n);
    let q = 1.0 / theta;
    let aff = (p1 * q).sqrt() * theta.min(0.1) + (p2 * q).sqrt() * (theta.min(0.9) - 0.1).max(0.0);
    (1.0 - aff).clamp(0.0, 1.0)
}

/// Density of the mixture, for quadrature checks.
pub fn birge_density(n: usize, x: f64) -> f64 {
    let (p1, p2) = levels(n);
    if (0.0..0.1).contains(&x) {
        p1
    } else if (0.1..=0.9).contains(&x) {
        p2
    } else {
        0.0
    }
}

pub fn birge_mle_demo(n: usize, n_mc: usize, seed: u64) -> Result<BirgeResult> {
    if n < 4 {
        return Err(invalid(format!("sample size must be at least 4, got {n}")));
    }
    if n_mc < 2 {
        return Err(invalid("need at least two replications"));
    }
    let w = 2.0 / n as f64;
    let mut values = Vec::with_capacity(n_mc);
    for rep in 0..n_mc {
        let mut r = rng::stream_at(seed, &[rep as u64]);
        let mut max = 0.0f64;
        for _ in 0..n {
            let x = if r.random::<f64>() < w {
                0.1 + 0.8 * r.random::<f64>()
            } else {
                0.1 * r.random::<f64>()
            };
            max = max.max(x);
        }
        values.push(birge_hellinger_sq(n, max));
    }
    let (mean, var) = crate::special::mean_var(&values);
    Ok(BirgeResult {
        n,
        n_mc,
        mle_hellinger_risk: mean,
        mle_std_error: (var / n_mc as f64).sqrt(),
        projection_hellinger: birge_hellinger_sq(n, 0.1),
    })
}
