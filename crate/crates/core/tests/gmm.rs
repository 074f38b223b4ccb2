use ndarray::{array, Array1};
use proptest::prelude::*;
use vfm_core::experiments::{toy_p0, toy_p1};
use vfm_core::gmm::{marginal_mixture, posterior_moments, posterior_velocity, score};
use vfm_core::{Error, GaussianMixture, GmmOracle, Schedule, VelocitySource};

fn one_d(mean: f64, var: f64) -> GaussianMixture {
    GaussianMixture::gaussian(vec![mean], vec![vec![var]]).unwrap()
}

/// Scalar Gaussian conditioning of `x0` on `x = a x0 + sigma x1`,
/// `x0 ~ N(m, c)`, `x1 ~ N(0, 1)`.
fn scalar_posterior_mean(m: f64, c: f64, a: f64, sigma: f64, x: f64) -> (f64, f64) {
    let var_x = a * a * c + sigma * sigma;
    let x0 = m + a * c / var_x * (x - a * m);
    let x1 = sigma / var_x * (x - a * m);
    (x0, x1)
}

#[test]
fn toy_mixture_means() {
    let m0 = toy_p0().overall_mean();
    assert!((m0[0] - 55.0 / 3.0).abs() < 1e-12);
    assert!((m0[1] - 56.0 / 3.0).abs() < 1e-12);
    let m1 = toy_p1().overall_mean();
    assert!((m1[0]).abs() < 1e-12 && (m1[1] + 1.0).abs() < 1e-12);
    assert_eq!(toy_p0().n_components(), 3);
    assert_eq!(toy_p1().n_components(), 2);
}

#[test]
fn invalid_mixtures_are_rejected() {
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(matches!(
        GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![eye.clone(), eye.clone()]),
        Err(Error::Mixture(_))
    ));
    assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![vec![1.0, 2.0], vec![2.0, 1.0]]]).is_err());
    assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![eye.clone()]).is_err());
    assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
    assert!(GaussianMixture::new(vec![-1.0, 2.0], vec![vec![0.0, 0.0]; 2], vec![eye.clone(), eye]).is_err());
}

#[test]
fn standard_normal_density_at_origin() {
    let g = GaussianMixture::standard_normal(2);
    let expected = -(2.0 * std::f64::consts::PI).ln();
    assert!((g.log_density(array![0.0, 0.0].view()) - expected).abs() < 1e-14);
}

#[test]
fn sampling_moments_and_determinism() {
    let g = GaussianMixture::gaussian(vec![2.0, -1.0], vec![vec![1.0, 0.3], vec![0.3, 0.5]]).unwrap();
    let x = g.sample(100_000, 17);
    assert_eq!(x, g.sample(100_000, 17));
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    assert!((mean[0] - 2.0).abs() < 0.02 && (mean[1] + 1.0).abs() < 0.02);
    let c = &x - &mean;
    let cov01 = (c.column(0).to_owned() * c.column(1)).mean().unwrap();
    let var1 = c.column(1).mapv(|v| v * v).mean().unwrap();
    assert!((cov01 - 0.3).abs() < 0.02);
    assert!((var1 - 0.5).abs() < 0.02);
}

#[test]
fn marginal_at_zero_is_data_distribution() {
    let m = marginal_mixture(&toy_p0(), &toy_p1(), &Schedule::Rectified.at(0.0)).unwrap();
    let x = array![20.0, 19.0];
    assert!((m.log_density(x.view()) - toy_p0().log_density(x.view())).abs() < 1e-10);
}

#[test]
fn single_gaussian_posterior_matches_conditioning() {
    let (m, c) = (1.5, 0.7);
    let p0 = one_d(m, c);
    let p1 = GaussianMixture::standard_normal(1);
    for s in Schedule::all_default() {
        for &t in &[0.1, 0.5, 0.9] {
            let sv = s.at(t);
            let x = 0.8;
            let got = posterior_moments(&p0, &p1, &sv, array![x].view()).unwrap();
            let (x0, x1) = scalar_posterior_mean(m, c, sv.a, sv.sigma, x);
            assert!((got.x0_given_t[0] - x0).abs() < 1e-9 * (1.0 + x0.abs()), "{s} {t}");
            assert!((got.x1_given_t[0] - x1).abs() < 1e-9 * (1.0 + x1.abs()), "{s} {t}");
            let v = posterior_velocity(&p0, &p1, &sv, array![x].view()).unwrap();
            let expected = sv.a_dot * x0 + sv.sigma_dot * x1;
            assert!((v[0] - expected).abs() < 1e-8 * (1.0 + expected.abs()), "{s} {t}");
        }
    }
}

#[test]
fn oracle_batch_matches_pointwise_velocity() {
    let s = Schedule::third_degree();
    let oracle = GmmOracle::new(toy_p0(), toy_p1(), s).unwrap();
    let x = toy_p1().sample(8, 2) * 0.5 + &toy_p0().sample(8, 3) * 0.5;
    let batch = oracle.evaluate(x.view(), 0.45);
    for (i, row) in x.rows().into_iter().enumerate() {
        let v = posterior_velocity(&toy_p0(), &toy_p1(), &s.at(0.45), row).unwrap();
        for k in 0..2 {
            assert!((batch[[i, k]] - v[k]).abs() < 1e-10 * (1.0 + v[k].abs()));
        }
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    assert!(matches!(
        GmmOracle::new(one_d(0.0, 1.0), toy_p1(), Schedule::vp()),
        Err(Error::Dimension { .. })
    ));
    let sv = Schedule::vp().at(0.5);
    assert!(posterior_moments(&toy_p0(), &toy_p1(), &sv, array![1.0].view()).is_err());
}

proptest! {
    #[test]
    fn score_matches_density_gradient(t in 0.05f64..0.95, x0 in -10.0f64..30.0, x1 in -10.0f64..30.0) {
        let sv = Schedule::third_degree().at(t);
        let m = marginal_mixture(&toy_p0(), &toy_p1(), &sv).unwrap();
        let x: Array1<f64> = array![x0, x1];
        let got = score(&toy_p0(), &toy_p1(), &sv, x.view()).unwrap();
        let h = 1e-5;
        for k in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (m.log_density(xp.view()) - m.log_density(xm.view())) / (2.0 * h);
            prop_assert!((got[k] - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{} vs {}", got[k], fd);
        }
    }

    #[test]
    fn responsibilities_form_a_distribution(t in 0.0f64..1.0, x0 in -10.0f64..30.0, x1 in -10.0f64..30.0) {
        let sv = Schedule::vp().at(t);
        let m = posterior_moments(&toy_p0(), &toy_p1(), &sv, array![x0, x1].view()).unwrap();
        prop_assert!(m.responsibilities.iter().all(|&r| (0.0..=1.0).contains(&r)));
        prop_assert!((m.responsibilities.sum() - 1.0).abs() < 1e-12);
    }
}
