//! Gaussian variational families and their KL divergences to Gaussian
//! priors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

/// `N(m, L L^T)` with `L` lower triangular and a positive diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullGaussian {
    pub m: DVector<f64>,
    pub chol_l: DMatrix<f64>,
}

impl FullGaussian {
    pub fn new(m: DVector<f64>, chol_l: DMatrix<f64>) -> Result<Self> {
        let d = m.len();
        check_dim(d, chol_l.nrows(), "cholesky rows")?;
        check_dim(d, chol_l.ncols(), "cholesky columns")?;
        for r in 0..d {
            if !(chol_l[(r, r)] > 0.0) {
                return Err(Error::NotPositiveDefinite("cholesky diagonal must be positive"));
            }
            for c in r + 1..d {
                if chol_l[(r, c)] != 0.0 {
                    return Err(invalid("cholesky factor must be lower triangular"));
                }
            }
        }
        if m.iter().chain(chol_l.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite variational parameter"));
        }
        Ok(Self { m, chol_l })
    }

    /// `N(m, sd^2 I)`.
    pub fn isotropic(m: &[f64], sd: f64) -> Result<Self> {
        let d = m.len();
        Self::new(DVector::from_column_slice(m), DMatrix::identity(d, d) * sd)
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol_l * self.chol_l.transpose()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `ln q(theta)`.
    pub fn log_pdf(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len(), "density argument")?;
        let diff = DVector::from_column_slice(theta) - &self.m;
        let z = self
            .chol_l
            .solve_lower_triangular(&diff)
            .ok_or(Error::NotPositiveDefinite("cholesky factor"))?;
        let d = self.dim() as f64;
        Ok(-0.5 * z.norm_squared() - 0.5 * self.log_det() - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
    }
}

/// `N(m', diag(exp(s)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldGaussian {
    pub m_prime: DVector<f64>,
    pub s: DVector<f64>,
}

impl MeanFieldGaussian {
    pub fn new(m_prime: DVector<f64>, s: DVector<f64>) -> Result<Self> {
        check_dim(m_prime.len(), s.len(), "log-variance vector")?;
        if m_prime.iter().chain(s.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite variational parameter"));
        }
        Ok(Self { m_prime, s })
    }

    pub fn dim(&self) -> usize {
        self.m_prime.len()
    }

    pub fn sd(&self) -> DVector<f64> {
        self.s.map(|v| (0.5 * v).exp())
    }

    pub fn log_pdf(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len(), "density argument")?;
        let mut out = 0.0;
        for ((t, m), s) in theta.iter().zip(self.m_prime.iter()).zip(self.s.iter()) {
            out += -0.5 * (t - m).powi(2) * (-s).exp() - 0.5 * s - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        Ok(out)
    }
}

/// Gaussian prior `N(mean, cov)`; the Cholesky factor and inverse are cached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
    diagonal: bool,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        check_dim(d, cov.nrows(), "prior covariance rows")?;
        check_dim(d, cov.ncols(), "prior covariance columns")?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite prior parameter"));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 * cov.abs().max().max(1.0) {
            return Err(Error::NotPositiveDefinite("prior covariance is not symmetric"));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("prior covariance"))?;
        let inv = chol.inverse();
        let diagonal = (0..d).all(|r| (0..d).all(|c| r == c || cov[(r, c)] == 0.0));
        Ok(Self {
            mean,
            cov,
            chol: chol.l(),
            inv,
            diagonal,
        })
    }

    pub fn diagonal(mean: &[f64], var: &[f64]) -> Result<Self> {
        check_dim(mean.len(), var.len(), "prior variances")?;
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(var)),
        )
    }

    /// `N(mean, var I)`.
    pub fn isotropic(mean: &[f64], var: f64) -> Result<Self> {
        Self::diagonal(mean, &vec![var; mean.len()])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cov_inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// The prior itself as a full-covariance variational distribution.
    pub fn as_full(&self) -> FullGaussian {
        FullGaussian {
            m: self.mean.clone(),
            chol_l: self.chol.clone(),
        }
    }

    /// The prior as a mean-field distribution; requires a diagonal prior.
    pub fn as_meanfield(&self) -> Result<MeanFieldGaussian> {
        if !self.diagonal {
            return Err(invalid("mean-field view needs a diagonal prior"));
        }
        Ok(MeanFieldGaussian {
            m_prime: self.mean.clone(),
            s: self.cov.diagonal().map(f64::ln),
        })
    }

    pub fn log_pdf(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len(), "density argument")?;
        let diff = DVector::from_column_slice(theta) - &self.mean;
        let q = diff.dot(&(&self.inv * &diff));
        let d = self.dim() as f64;
        Ok(-0.5 * q - 0.5 * self.log_det() - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
    }
}

/// `KL(N(m, L L^T) || prior)`.
pub fn kl_full(q: &FullGaussian, p: &GaussianPrior) -> Result<f64> {
    check_dim(p.dim(), q.dim(), "variational vs prior dimension")?;
    let d = q.dim() as f64;
    let sigma = q.covariance();
    let tr = p.inv.component_mul(&sigma).sum();
    let diff = &q.m - &p.mean;
    let maha = diff.dot(&(&p.inv * &diff));
    let kl = 0.5 * (tr - d + p.log_det() - q.log_det() + maha);
    Ok(kl.max(0.0))
}

/// `KL(N(m', diag(e^s)) || prior)` for a diagonal prior.
pub fn kl_meanfield(q: &MeanFieldGaussian, p: &GaussianPrior) -> Result<f64> {
    check_dim(p.dim(), q.dim(), "variational vs prior dimension")?;
    if !p.diagonal {
        return Err(invalid("mean-field KL needs a diagonal prior"));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let v = p.cov[(i, i)];
        let s = q.s[i];
        let dm = q.m_prime[i] - p.mean[i];
        kl += 0.5 * (s.exp() / v - 1.0 + v.ln() - s + dm * dm / v);
    }
    Ok(kl.max(0.0))
}

/// Gradients of `kl_full` in `(m, L)`; the `L` gradient is lower triangular.
pub fn kl_full_grad(q: &FullGaussian, p: &GaussianPrior) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_dim(p.dim(), q.dim(), "variational vs prior dimension")?;
    let gm = &p.inv * (&q.m - &p.mean);
    let mut gl = &p.inv * &q.chol_l;
    let d = q.dim();
    for r in 0..d {
        for c in r + 1..d {
            gl[(r, c)] = 0.0;
        }
        gl[(r, r)] -= 1.0 / q.chol_l[(r, r)];
    }
    Ok((gm, gl))
}

/// Gradients of `kl_meanfield` in `(m', s)`.
pub fn kl_meanfield_grad(q: &MeanFieldGaussian, p: &GaussianPrior) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dim(p.dim(), q.dim(), "variational vs prior dimension")?;
    if !p.diagonal {
        return Err(invalid("mean-field KL needs a diagonal prior"));
    }
    let d = q.dim();
    let mut gm = DVector::zeros(d);
    let mut gs = DVector::zeros(d);
    for i in 0..d {
        let v = p.cov[(i, i)];
        gm[i] = (q.m_prime[i] - p.mean[i]) / v;
        gs[i] = 0.5 * (q.s[i].exp() / v - 1.0);
    }
    Ok((gm, gs))
}

/// `theta = m + L eps`.
pub fn reparam_full(q: &FullGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    check_dim(q.dim(), eps.len(), "noise vector")?;
    let mut out = q.m.as_slice().to_vec();
    reparam_full_into(q, eps, &mut out);
    Ok(out)
}

pub(crate) fn reparam_full_into(q: &FullGaussian, eps: &[f64], out: &mut [f64]) {
    let d = q.dim();
    for r in 0..d {
        let mut v = q.m[r];
        for (c, e) in eps.iter().enumerate().take(r + 1) {
            v += q.chol_l[(r, c)] * e;
        }
        out[r] = v;
    }
}

/// `theta'_i = m'_i + exp(s_i / 2) eps_i`.
pub fn reparam_meanfield(q: &MeanFieldGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    check_dim(q.dim(), eps.len(), "noise vector")?;
    Ok(q.m_prime
        .iter()
        .zip(q.s.iter())
        .zip(eps)
        .map(|((m, s), e)| m + (0.5 * s).exp() * e)
        .collect())
}

/// Mean `exp(m + s_sq / 2)` of a lognormal variable.
pub fn lognormal_mean(m: f64, s_sq: f64) -> Result<f64> {
    if !m.is_finite() || !s_sq.is_finite() || s_sq < 0.0 {
        return Err(invalid(format!("lognormal mean needs finite m and s^2 >= 0, got ({m}, {s_sq})")));
    }
    Ok((m + 0.5 * s_sq).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let p = GaussianPrior::isotropic(&[0.0], 4.0).unwrap();
        assert!(kl_full(&p.as_full(), &p).unwrap().abs() < 1e-15);
        let q = FullGaussian::isotropic(&[0.0], 1.0).unwrap();
        assert!((kl_full(&q, &p).unwrap() - 0.318_147).abs() < 1e-6);
        let unit = GaussianPrior::isotropic(&[0.0], 1.0).unwrap();
        let q = FullGaussian::isotropic(&[1.0], 1.0).unwrap();
        assert!((kl_full(&q, &unit).unwrap() - 0.5).abs() < 1e-15);

        let mf = MeanFieldGaussian::new(DVector::from_element(1, 0.0), DVector::from_element(1, 4f64.ln())).unwrap();
        assert!((kl_meanfield(&mf, &unit).unwrap() - 0.806_853).abs() < 1e-6);
        let mf2 = MeanFieldGaussian::new(DVector::from_element(2, 0.0), DVector::from_element(2, 4f64.ln())).unwrap();
        let unit2 = GaussianPrior::isotropic(&[0.0, 0.0], 1.0).unwrap();
        let two = kl_meanfield(&mf2, &unit2).unwrap();
        assert!((two - 2.0 * kl_meanfield(&mf, &unit).unwrap()).abs() < 1e-14);
        assert!(kl_meanfield(&unit2.as_meanfield().unwrap(), &unit2).unwrap().abs() < 1e-15);
        assert!(kl_meanfield(&mf, &unit2).is_err());
    }

    #[test]
    fn priors_must_be_positive_definite() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianPrior::new(DVector::zeros(2), bad).is_err());
        let full = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = GaussianPrior::new(DVector::zeros(2), full).unwrap();
        assert!(!p.is_diagonal());
        assert!(p.as_meanfield().is_err());
    }

    #[test]
    fn reparam_examples() {
        let q = FullGaussian::isotropic(&[0.0], 2.0).unwrap();
        assert_eq!(reparam_full(&q, &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(reparam_full(&q, &[1.0]).unwrap(), vec![2.0]);
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let q = FullGaussian::new(DVector::zeros(2), l).unwrap();
        assert_eq!(reparam_full(&q, &[1.0, 1.0]).unwrap(), vec![1.0, 1.5]);
        assert!(reparam_full(&q, &[1.0]).is_err());

        let mf = MeanFieldGaussian::new(DVector::from_vec(vec![1.0, 2.0]), DVector::zeros(2)).unwrap();
        assert_eq!(reparam_meanfield(&mf, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(reparam_meanfield(&mf, &[0.5, -1.0]).unwrap(), vec![1.5, 1.0]);
        let mf = MeanFieldGaussian::new(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![2.0 * 3f64.ln()])).unwrap();
        assert!((reparam_meanfield(&mf, &[2.0]).unwrap()[0] - 7.0).abs() < 1e-14);
    }

    #[test]
    fn lognormal_examples() {
        assert_eq!(lognormal_mean(0.0, 0.0).unwrap(), 1.0);
        assert!((lognormal_mean(3f64.ln(), 0.0).unwrap() - 3.0).abs() < 1e-15);
        assert!((lognormal_mean(0.0, 2.0 * 2f64.ln()).unwrap() - 2.0).abs() < 1e-15);
        assert!(lognormal_mean(0.0, -1.0).is_err());
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let l = DMatrix::from_row_slice(2, 2, &[1.3, 0.0, -0.4, 0.7]);
        let q = FullGaussian::new(DVector::from_vec(vec![0.2, -1.0]), l).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let p = GaussianPrior::new(DVector::from_vec(vec![0.5, 0.1]), cov).unwrap();
        let (gm, gl) = kl_full_grad(&q, &p).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut a = q.clone();
            let mut b = q.clone();
            a.m[i] += h;
            b.m[i] -= h;
            let fd = (kl_full(&a, &p).unwrap() - kl_full(&b, &p).unwrap()) / (2.0 * h);
            assert!((fd - gm[i]).abs() < 1e-7);
            for c in 0..=i {
                let mut a = q.clone();
                let mut b = q.clone();
                a.chol_l[(i, c)] += h;
                b.chol_l[(i, c)] -= h;
                let fd = (kl_full(&a, &p).unwrap() - kl_full(&b, &p).unwrap()) / (2.0 * h);
                assert!((fd - gl[(i, c)]).abs() < 1e-7);
            }
        }
        let mf = MeanFieldGaussian::new(DVector::from_vec(vec![0.3, -0.2]), DVector::from_vec(vec![-1.0, 0.5])).unwrap();
        let pd = GaussianPrior::diagonal(&[0.0, 1.0], &[2.0, 0.5]).unwrap();
        let (gm, gs) = kl_meanfield_grad(&mf, &pd).unwrap();
        for i in 0..2 {
            let mut a = mf.clone();
            let mut b = mf.clone();
            a.m_prime[i] += h;
            b.m_prime[i] -= h;
            let fd = (kl_meanfield(&a, &pd).unwrap() - kl_meanfield(&b, &pd).unwrap()) / (2.0 * h);
            assert!((fd - gm[i]).abs() < 1e-7);
            let mut a = mf.clone();
            let mut b = mf.clone();
            a.s[i] += h;
            b.s[i] -= h;
            let fd = (kl_meanfield(&a, &pd).unwrap() - kl_meanfield(&b, &pd).unwrap()) / (2.0 * h);
            assert!((fd - gs[i]).abs() < 1e-7);
        }
    }
}
