use proptest::prelude::*;

use rho_core::bounds::{beta_n_lambda, corollary_coefficients, risk_brackets, variance_bound, A0, A1, A2_SQ};
use rho_core::contrast::{psi, psi_of_log_ratio};
use rho_core::hellinger::{hellinger_sq_closed, hellinger_sq_numeric};
use rho_core::models::DensityModel;
use rho_core::variational::{kl_full, kl_meanfield, FullGaussian, GaussianPrior};

proptest! {
    #[test]
    fn psi_is_antisymmetric(x in 1e-8f64..1e8) {
        let a = psi(x).unwrap();
        let b = psi(1.0 / x).unwrap();
        prop_assert!((a + b).abs() <= 1e-12);
    }

    #[test]
    fn psi_matches_tanh(u in -30.0f64..30.0) {
        prop_assert!((psi(u.exp()).unwrap() - psi_of_log_ratio(u).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn psi_is_lipschitz_in_root(x in 0.0f64..1e4, y in 0.0f64..1e4) {
        let d = (psi(x).unwrap() - psi(y).unwrap()).abs();
        prop_assert!(d <= 2.0 * (x.sqrt() - y.sqrt()).abs() + 1e-15);
    }

    #[test]
    fn closed_hellinger_agrees_with_quadrature(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        for model in [DensityModel::GaussianLocation, DensityModel::PoissonIntensity, DensityModel::UniformScale] {
            let c = hellinger_sq_closed(&model, &[a], &[b]).unwrap().h_sq;
            let q = hellinger_sq_numeric(&model, &[a], &[b]).unwrap().h_sq;
            prop_assert!((c - q).abs() < 1e-8, "{} {a} {b}: {c} vs {q}", model.name());
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn kl_is_nonnegative(m in -5.0f64..5.0, sd in 0.01f64..10.0) {
        let prior = GaussianPrior::isotropic(&[0.0, 0.0], 4.0).unwrap();
        let q = FullGaussian::isotropic(&[m, -m], sd).unwrap();
        prop_assert!(kl_full(&q, &prior).unwrap() >= -1e-12);
    }
}

#[test]
fn psi_rejects_bad_input() {
    assert!(psi(-1.0).is_err());
    assert!(psi(f64::NAN).is_err());
    assert_eq!(psi(f64::INFINITY).unwrap(), 1.0);
    assert_eq!(psi(0.0).unwrap(), -1.0);
    assert_eq!(psi(1.0).unwrap(), 0.0);
}

#[test]
fn kl_vanishes_at_the_prior_and_views_agree() {
    let prior = GaussianPrior::diagonal(&[0.5, -1.0], &[2.0, 0.5]).unwrap();
    assert!(kl_full(&prior.as_full(), &prior).unwrap().abs() < 1e-12);
    assert!(kl_meanfield(&prior.as_meanfield().unwrap(), &prior).unwrap().abs() < 1e-12);
}

#[test]
fn gaussian_hellinger_closed_form() {
    let h = hellinger_sq_closed(&DensityModel::GaussianLocation, &[0.0], &[2.0]).unwrap();
    assert!((h.h_sq - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
}

#[test]
fn constants_and_coefficients() {
    assert_eq!(A0, 4.0);
    assert_eq!(A1, 3.0 / 8.0);
    assert!((A2_SQ - 3.0 * 2f64.sqrt()).abs() < 1e-15);
    let c = corollary_coefficients(200, 25.0).unwrap();
    assert_eq!(c.beta, beta_n_lambda(200, 25.0).unwrap());
    assert!((c.target_coef + c.competitor_coef - (A0 + A1)).abs() < 1e-12);
    assert!(c.positive_regime);
    assert!(beta_n_lambda(0, 1.0).is_err());
    assert!(beta_n_lambda(10, 0.0).is_err());
}

#[test]
fn brackets_are_ordered_and_antisymmetric() {
    for (h, hp) in [(0.0, 0.0), (0.1, 0.3), (0.7, 0.2)] {
        let (lo, hi) = risk_brackets(h, hp);
        assert!(lo <= hi);
        let (lo2, hi2) = risk_brackets(hp, h);
        assert!((lo + hi2).abs() < 1e-15 && (hi + lo2).abs() < 1e-15);
        assert!(variance_bound(h, hp) >= 0.0);
    }
}
