//! Squared Hellinger distances: closed forms, quadrature and the
//! coordinate-averaged sample version used for fixed-design regression.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::models::{DensityModel, NoiseDensity};
use crate::special::ln_factorial;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HellingerMethod {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

/// `H^2(P, Q) = 1 - int sqrt(p q)`, always within `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HellingerValue {
    pub h_sq: f64,
    pub method: HellingerMethod,
    pub error_bound: f64,
}

impl HellingerValue {
    fn closed(h_sq: f64) -> Self {
        Self {
            h_sq: h_sq.clamp(0.0, 1.0),
            method: HellingerMethod::ClosedForm,
            error_bound: 0.0,
        }
    }

    pub fn affinity(&self) -> f64 {
        1.0 - self.h_sq
    }
}

/// Closed-form squared Hellinger distance between two members of the same
/// family, with parameters on the model's internal scale (`ln lambda` for
/// Poisson, `ln theta` for the uniform scale family).
pub fn hellinger_sq_closed(model: &DensityModel, a: &[f64], b: &[f64]) -> Result<HellingerValue> {
    let simple = matches!(
        model,
        DensityModel::GaussianLocation | DensityModel::PoissonIntensity | DensityModel::UniformScale
    );
    if !simple {
        return Err(Error::NoClosedForm(model.name().to_string()));
    }
    model.validate_param(a)?;
    model.validate_param(b)?;
    Ok(HellingerValue::closed(closed_scalar(model, a[0], b[0])))
}

/// Unchecked scalar closed form for the three one-parameter families.
pub(crate) fn closed_scalar(model: &DensityModel, a: f64, b: f64) -> f64 {
    match model {
        DensityModel::GaussianLocation => -(-(a - b) * (a - b) / 8.0).exp_m1(),
        DensityModel::PoissonIntensity => {
            let d = (0.5 * a).exp() - (0.5 * b).exp();
            -(-0.5 * d * d).exp_m1()
        }
        DensityModel::UniformScale => -(-0.5 * (a - b).abs()).exp_m1(),
        _ => f64::NAN,
    }
}

const GL_ORDER: usize = 16;

fn gauss_legendre() -> &'static ([f64; GL_ORDER], [f64; GL_ORDER]) {
    static NODES: OnceLock<([f64; GL_ORDER], [f64; GL_ORDER])> = OnceLock::new();
    NODES.get_or_init(|| {
        let n = GL_ORDER;
        let mut x = [0.0; GL_ORDER];
        let mut w = [0.0; GL_ORDER];
        for i in 0..n {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            x[i] = z;
            w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        }
        (x, w)
    })
}

fn composite(f: &dyn Fn(f64) -> f64, breaks: &[f64], panels: usize) -> f64 {
    let (x, w) = gauss_legendre();
    let mut total = 0.0;
    for seg in breaks.windows(2) {
        let h = (seg[1] - seg[0]) / panels as f64;
        if h <= 0.0 {
            continue;
        }
        for p in 0..panels {
            let mid = seg[0] + (p as f64 + 0.5) * h;
            let half = 0.5 * h;
            let mut s = 0.0;
            for (xi, wi) in x.iter().zip(w) {
                s += wi * f(mid + half * xi);
            }
            total += s * half;
        }
    }
    total
}

/// Composite Gauss-Legendre integral over the intervals delimited by
/// `breaks`, doubling the node count until successive estimates differ by
/// less than 1e-10. Returns `(value, last difference)`.
pub fn integrate(f: &dyn Fn(f64) -> f64, breaks: &[f64], n_nodes: usize) -> (f64, f64) {
    let segments = breaks.len().saturating_sub(1).max(1);
    let mut panels = n_nodes.div_ceil(GL_ORDER * segments).max(1);
    let mut prev = composite(f, breaks, panels);
    loop {
        panels *= 2;
        let cur = composite(f, breaks, panels);
        let diff = (cur - prev).abs();
        if diff < 1e-10 || panels >= 1 << 14 {
            return (cur, diff);
        }
        prev = cur;
    }
}

/// `1 - int sqrt(p q)` by quadrature over `support` (sorted breakpoints;
/// discontinuities of either density should be among them).
pub fn hellinger_sq_quadrature(
    density_a: &dyn Fn(f64) -> f64,
    density_b: &dyn Fn(f64) -> f64,
    support: &[f64],
    n_nodes: usize,
) -> Result<HellingerValue> {
    if n_nodes < 64 {
        return Err(invalid(format!("quadrature needs at least 64 nodes, got {n_nodes}")));
    }
    if support.len() < 2 || support.windows(2).any(|w| !(w[0] <= w[1])) || support.iter().any(|v| !v.is_finite()) {
        return Err(invalid("support must be at least two sorted finite breakpoints"));
    }
    let bad = std::cell::Cell::new(false);
    let integrand = |x: f64| {
        let (p, q) = (density_a(x), density_b(x));
        if !(p.is_finite() && q.is_finite()) || p < 0.0 || q < 0.0 {
            bad.set(true);
            return 0.0;
        }
        (p * q).sqrt()
    };
    let (aff, err) = integrate(&integrand, support, n_nodes);
    if bad.get() {
        return Err(invalid("density returned a negative or non-finite value"));
    }
    Ok(HellingerValue {
        h_sq: (1.0 - aff).clamp(0.0, 1.0),
        method: HellingerMethod::Quadrature,
        error_bound: err,
    })
}

/// Poisson affinity by direct summation of `sqrt(p_k q_k)` until the
/// remaining mass of both laws is below 1e-14.
pub fn poisson_hellinger_series(lambda_a: f64, lambda_b: f64) -> Result<HellingerValue> {
    if !(lambda_a > 0.0 && lambda_b > 0.0 && lambda_a.is_finite() && lambda_b.is_finite()) {
        return Err(invalid("Poisson intensities must be positive"));
    }
    let (la, lb) = (lambda_a.ln(), lambda_b.ln());
    let top = lambda_a.max(lambda_b);
    let mut aff = 0.0;
    let (mut cum_a, mut cum_b) = (0.0, 0.0);
    let mut k = 0u64;
    loop {
        let kf = k as f64;
        let lpa = kf * la - lambda_a - ln_factorial(k);
        let lpb = kf * lb - lambda_b - ln_factorial(k);
        aff += (0.5 * (lpa + lpb)).exp();
        cum_a += lpa.exp();
        cum_b += lpb.exp();
        if kf > top && 1.0 - cum_a < 1e-14 && 1.0 - cum_b < 1e-14 {
            break;
        }
        if k > 100_000 {
            break;
        }
        k += 1;
    }
    Ok(HellingerValue {
        h_sq: (1.0 - aff).clamp(0.0, 1.0),
        method: HellingerMethod::Quadrature,
        error_bound: 1e-14,
    })
}

/// Numerical Hellinger between two members of a one-dimensional family:
/// series for Poisson, quadrature otherwise.
pub fn hellinger_sq_numeric(model: &DensityModel, a: &[f64], b: &[f64]) -> Result<HellingerValue> {
    model.validate_param(a)?;
    model.validate_param(b)?;
    match model {
        DensityModel::PoissonIntensity => poisson_hellinger_series(a[0].exp(), b[0].exp()),
        DensityModel::GaussianLocation => {
            let fa = model.density_fn(a).expect("scalar model");
            let fb = model.density_fn(b).expect("scalar model");
            let (lo, hi) = (a[0].min(b[0]) - 12.0, a[0].max(b[0]) + 12.0);
            let mid = 0.5 * (a[0] + b[0]);
            hellinger_sq_quadrature(&fa, &fb, &[lo, a[0].min(b[0]), mid, a[0].max(b[0]), hi], 64)
        }
        DensityModel::UniformScale => {
            let fa = model.density_fn(a).expect("scalar model");
            let fb = model.density_fn(b).expect("scalar model");
            let (ta, tb) = (a[0].exp(), b[0].exp());
            hellinger_sq_quadrature(&fa, &fb, &[0.0, ta.min(tb), ta.max(tb)], 64)
        }
        other => Err(Error::NoClosedForm(other.name().to_string())),
    }
}

/// `H^2(p(.), q(. - delta))` for two noise densities: `p` is centered at
/// zero and `q` is translated by `delta`.
pub fn shift_hellinger_sq(p: NoiseDensity, q: NoiseDensity, delta: f64) -> HellingerValue {
    match (p, q) {
        (NoiseDensity::Gaussian { sd: s1 }, NoiseDensity::Gaussian { sd: s2 }) => {
            let v = s1 * s1 + s2 * s2;
            let aff = (2.0 * s1 * s2 / v).sqrt() * (-delta * delta / (4.0 * v)).exp();
            HellingerValue::closed(1.0 - aff)
        }
        (NoiseDensity::Uniform { half_width: h1 }, NoiseDensity::Uniform { half_width: h2 }) => {
            let lo = (-h1).max(delta - h2);
            let hi = h1.min(delta + h2);
            let overlap = (hi - lo).max(0.0);
            HellingerValue::closed(1.0 - overlap / (2.0 * (h1 * h2).sqrt()))
        }
        _ => {
            let (a_lo, a_hi) = p.effective_support();
            let (b_lo, b_hi) = q.effective_support();
            let mut breaks = vec![a_lo, a_hi, b_lo + delta, b_hi + delta];
            breaks.sort_by(f64::total_cmp);
            let fp = |x: f64| p.pdf(x);
            let fq = |x: f64| q.pdf(x - delta);
            hellinger_sq_quadrature(&fp, &fq, &breaks, 64).expect("noise densities are finite")
        }
    }
}

/// `(1/n) sum_i H^2(p(. - f*_i), q(. - f_i))` from function values.
pub fn sample_hellinger_sq_values(
    f_values: &[f64],
    true_f_values: &[f64],
    true_noise: NoiseDensity,
    candidate_noise: NoiseDensity,
) -> Result<HellingerValue> {
    check_dim(true_f_values.len(), f_values.len(), "function values")?;
    if f_values.is_empty() {
        return Err(Error::Empty("function values"));
    }
    let mut sum = 0.0;
    let mut err = 0.0;
    let mut method = HellingerMethod::ClosedForm;
    for (f, fs) in f_values.iter().zip(true_f_values) {
        let h = shift_hellinger_sq(true_noise, candidate_noise, f - fs);
        sum += h.h_sq;
        err += h.error_bound;
        if h.method != HellingerMethod::ClosedForm {
            method = h.method;
        }
    }
    let n = f_values.len() as f64;
    Ok(HellingerValue {
        h_sq: (sum / n).clamp(0.0, 1.0),
        method,
        error_bound: err / n,
    })
}

/// Sample Hellinger distance between the true regression law (function
/// values `true_f_values`, noise `true_noise`) and the model at `beta`.
pub fn sample_hellinger_sq(
    model: &DensityModel,
    beta: &[f64],
    true_f_values: &[f64],
    true_noise: NoiseDensity,
) -> Result<HellingerValue> {
    let DensityModel::FixedDesignRegression(design) = model else {
        return Err(invalid("sample Hellinger distance needs a regression model"));
    };
    model.validate_param(beta)?;
    check_dim(design.n(), true_f_values.len(), "true function values vs design rows")?;
    sample_hellinger_sq_values(&design.predictions(beta), true_f_values, true_noise, design.noise())
}

/// `(1/n) sum_i |f_i - g_i|^(1 + alpha)`.
pub fn empirical_loss_norm(f_values: &[f64], g_values: &[f64], alpha: f64) -> Result<f64> {
    check_dim(f_values.len(), g_values.len(), "loss norm vectors")?;
    if f_values.is_empty() {
        return Err(Error::Empty("loss norm vectors"));
    }
    if !(alpha > -1.0 && alpha <= 1.0) {
        return Err(invalid(format!("alpha must lie in (-1, 1], got {alpha}")));
    }
    let s: f64 = f_values
        .iter()
        .zip(g_values)
        .map(|(f, g)| (f - g).abs().powf(1.0 + alpha))
        .sum();
    Ok(s / f_values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        let g = DensityModel::GaussianLocation;
        assert_eq!(hellinger_sq_closed(&g, &[1.2], &[1.2]).unwrap().h_sq, 0.0);
        let u = DensityModel::UniformScale;
        let h = hellinger_sq_closed(&u, &[0.0], &[2f64.ln()]).unwrap().h_sq;
        assert!((h - (1.0 - 0.5f64.sqrt())).abs() < 1e-15);
        let q = hellinger_sq_numeric(&u, &[0.0], &[2f64.ln()]).unwrap().h_sq;
        assert!((h - q).abs() < 1e-8);
        let p = DensityModel::PoissonIntensity;
        let h = hellinger_sq_closed(&p, &[3f64.ln()], &[30f64.ln()]).unwrap().h_sq;
        let s = poisson_hellinger_series(3.0, 30.0).unwrap().h_sq;
        assert!((h - s).abs() < 1e-10, "{h} {s}");
        let exact = 1.0 - (-(30f64.sqrt() - 3f64.sqrt()).powi(2) / 2.0).exp();
        assert!((h - exact).abs() < 1e-15 && (h - 0.999_100).abs() < 1e-6, "{h}");
        let r = DensityModel::FixedDesignRegression(
            crate::models::RegressionDesign::new(nalgebra::DMatrix::identity(2, 2), NoiseDensity::default()).unwrap(),
        );
        assert!(matches!(hellinger_sq_closed(&r, &[0.0, 0.0], &[0.0, 0.0]), Err(Error::NoClosedForm(_))));
    }

    #[test]
    fn quadrature_examples() {
        let n = |m: f64| move |x: f64| (-(x - m) * (x - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let same = hellinger_sq_quadrature(&n(0.0), &n(0.0), &[-12.0, 12.0], 64).unwrap();
        assert!(same.h_sq.abs() < 1e-12);
        let far = hellinger_sq_quadrature(&n(0.0), &n(8.0), &[-12.0, 4.0, 20.0], 64).unwrap();
        assert!((far.h_sq - (1.0 - (-8f64).exp())).abs() < 1e-8);
        let u0 = |x: f64| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 };
        let u1 = |x: f64| if (101.0..=102.0).contains(&x) { 1.0 } else { 0.0 };
        let d = hellinger_sq_quadrature(&u0, &u1, &[0.0, 1.0, 101.0, 102.0], 64).unwrap();
        assert_eq!(d.h_sq, 1.0);
        assert!(hellinger_sq_quadrature(&u0, &u1, &[0.0, 1.0], 16).is_err());
        let bad = |_x: f64| f64::NAN;
        assert!(hellinger_sq_quadrature(&u0, &bad, &[0.0, 1.0], 64).is_err());
    }

    #[test]
    fn sample_examples() {
        let g = NoiseDensity::Gaussian { sd: 1.0 };
        let h = sample_hellinger_sq_values(&[1.0, 2.0], &[1.0, 2.0], g, g).unwrap();
        assert_eq!(h.h_sq, 0.0);
        let h = sample_hellinger_sq_values(&[1.5, 0.5], &[1.0, 0.0], g, g).unwrap();
        assert!((h.h_sq - (1.0 - (-0.25f64 / 8.0).exp())).abs() < 1e-15);
        let h = sample_hellinger_sq_values(&[0.0, 2.0], &[0.0, 0.0], g, g).unwrap();
        assert!((h.h_sq - 0.196_735).abs() < 1e-6, "{}", h.h_sq);
        assert!(sample_hellinger_sq_values(&[0.0], &[0.0, 1.0], g, g).is_err());
    }

    #[test]
    fn mixed_noise_uses_quadrature() {
        let g = NoiseDensity::Gaussian { sd: 1.0 };
        let u = NoiseDensity::Uniform { half_width: 1.0 };
        let h = shift_hellinger_sq(g, u, 0.3);
        assert_eq!(h.method, HellingerMethod::Quadrature);
        assert!(h.h_sq > 0.0 && h.h_sq < 1.0);
        let uu = shift_hellinger_sq(u, u, 0.5);
        // overlap 1.5 of width 2
        assert!((uu.h_sq - 0.25).abs() < 1e-15);
    }

    #[test]
    fn loss_norm_examples() {
        assert_eq!(empirical_loss_norm(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert_eq!(empirical_loss_norm(&[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap(), 1.0);
        assert_eq!(empirical_loss_norm(&[0.5, 1.5], &[0.0, 0.0], 0.0).unwrap(), 1.0);
        assert!(empirical_loss_norm(&[0.5], &[0.0, 0.0], 0.0).is_err());
        assert!(empirical_loss_norm(&[0.5], &[0.0], -1.0).is_err());
    }
}
