use approx::assert_relative_eq;
use gca_core::fitting::{irw_fit, Design, IrwConfig, VarianceTemplate};
use gca_core::inference::{bootstrap, qq_correlation, quantile_curves, residual_diagnostics, BootstrapConfig, CurveGroup};
use gca_core::model::{loglik_conditional_variance, IndependentDesign, IndexKind};
use gca_core::simulation::{generate_clustered, g_true, GShape, ScenarioConfig, ScenarioKind};
use gca_core::spline::{eval_basis, SplineFamily, SplineSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StNormal};

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + h * i as f64);
    }
    s * h / 3.0
}

#[test]
fn ispline_matches_quadrature_of_mspline() {
    let spec = SplineSpec::even(SplineFamily::I, 2, 4, 0.0, 10.0).unwrap();
    let m = spec.with_family(SplineFamily::M);
    let got = eval_basis(&spec, &[2.5]).unwrap();
    for j in 0..spec.df() {
        let want = simpson(|s| eval_basis(&m, &[s]).unwrap().values[(0, j)], 0.0, 2.5, 20_000);
        assert!((got.values[(0, j)] - want).abs() < 1e-8, "column {j}");
    }
}

#[test]
fn cspline_matches_quadrature_of_ispline() {
    let spec = SplineSpec::even(SplineFamily::C, 2, 3, 0.0, 5.0).unwrap();
    let i = spec.with_family(SplineFamily::I);
    let got = eval_basis(&spec, &[3.7]).unwrap();
    for j in 0..spec.df() {
        let want = simpson(|s| eval_basis(&i, &[s]).unwrap().values[(0, j)], 0.0, 3.7, 20_000);
        assert!((got.values[(0, j)] - want).abs() < 1e-8, "column {j}");
    }
}

fn spec_strategy() -> impl Strategy<Value = (usize, usize, f64, f64)> {
    (1usize..=4, 0usize..=5, -50.0f64..50.0, 0.1f64..100.0).prop_map(|(d, extra, l, w)| (d, d + extra, l, l + w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ispline_columns_are_monotone_cdfs((degree, df, l, u) in spec_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let spec = SplineSpec::even(SplineFamily::I, degree, df, l, u).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let x = [l + lo * (u - l), l + hi * (u - l)];
        let v = eval_basis(&spec, &x).unwrap();
        for j in 0..df {
            prop_assert!(v.values[(0, j)] >= -1e-12 && v.values[(1, j)] <= 1.0 + 1e-12);
            prop_assert!(v.values[(1, j)] >= v.values[(0, j)] - 1e-12);
        }
    }

    #[test]
    fn mspline_columns_are_nonnegative((degree, df, l, u) in spec_strategy(), a in 0.0f64..1.0) {
        let spec = SplineSpec::even(SplineFamily::M, degree, df, l, u).unwrap();
        let v = eval_basis(&spec, &[l + a * (u - l)]).unwrap();
        prop_assert!(v.values.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn cspline_columns_are_convex((degree, df, l, u) in spec_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let spec = SplineSpec::even(SplineFamily::C, degree, df, l, u).unwrap();
        let (xa, xb) = (l + a * (u - l), l + b * (u - l));
        let v = eval_basis(&spec, &[xa, xb, 0.5 * (xa + xb)]).unwrap();
        for j in 0..df {
            let chord = 0.5 * (v.values[(0, j)] + v.values[(1, j)]);
            prop_assert!(v.values[(2, j)] <= chord + 1e-10);
        }
    }
}

#[test]
fn bootstrap_se_agrees_with_ols_under_constant_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = Normal::new(0.0, 1.0).unwrap();
    let n = 200;
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { t[i] });
    let y: Vec<f64> = t.iter().map(|ti| 1.0 + 2.0 * ti + 0.5 * z.sample(&mut rng)).collect();
    let design = Design::Independent(IndependentDesign::new(y.clone(), x.clone(), t).unwrap());
    let irw = IrwConfig::default();
    let fit = irw_fit(&design, &VarianceTemplate::constant(IndexKind::Time), &irw).unwrap();

    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let beta = &xtx_inv * x.transpose() * DVector::from_vec(y.clone());
    let resid = DVector::from_vec(y) - &x * &beta;
    let s2 = resid.norm_squared() / (n - 2) as f64;
    let cfg = BootstrapConfig { n_rep: 400, seed: 3, ..BootstrapConfig::default() };
    let boot = bootstrap(&fit, &design, &irw, &cfg).unwrap();
    for j in 0..2 {
        let ols = (s2 * xtx_inv[(j, j)]).sqrt();
        assert_relative_eq!(fit.beta_hat[j], beta[j], epsilon = 1e-8);
        assert!((boot.se_beta[j] / ols - 1.0).abs() < 0.10, "coef {j}: {} vs {ols}", boot.se_beta[j]);
    }
}

fn clustered_fit(g_shape: GShape, index_kind: IndexKind, template: VarianceTemplate) -> (gca_core::model::FitResult, gca_core::model::ClusteredDesign) {
    let cfg = ScenarioConfig {
        kind: ScenarioKind::Clustered,
        g_shape,
        index_kind,
        n_subjects: 150,
        ..ScenarioConfig::default()
    };
    let d = generate_clustered(&cfg, 0);
    let fit = irw_fit(&Design::Clustered(d.clone()), &template, &IrwConfig::default()).unwrap();
    (fit, d)
}

#[test]
fn quantile_curves_match_closed_form_for_constant_variance() {
    let (fit, d) = clustered_fit(GShape::G1, IndexKind::MarginalMean, VarianceTemplate::constant(IndexKind::MarginalMean));
    // random intercept + constant g: y ~ N(x'beta, sigma_b^2 + g^2)
    let s = &d.subjects[0];
    let group = CurveGroup { name: "s0".into(), t: s.t.clone(), x: s.x.clone(), z: s.z.clone() };
    let probs = [0.1, 0.5, 0.9];
    let curves = quantile_curves(&fit, &[group], 40_000, &probs, 5).unwrap();
    let sd = (fit.re_cov.sigma_b().unwrap().powi(2) + fit.variance.g(0.0).powi(2)).sqrt();
    let normal = StNormal::standard();
    for (k, p) in probs.iter().enumerate() {
        for j in 0..s.n() {
            let mean: f64 = (0..s.x.ncols()).map(|c| s.x[(j, c)] * fit.beta_hat[c]).sum();
            let exact = mean + sd * normal.inverse_cdf(*p);
            assert!((curves[0].quantiles[k][j] - exact).abs() < 0.03 * sd, "p {p} t {}", s.t[j]);
        }
    }
}

#[test]
fn standardized_residuals_look_normal_under_correct_model() {
    let (fit, _) = clustered_fit(GShape::G1, IndexKind::MarginalMean, VarianceTemplate::increasing(2, 4, IndexKind::MarginalMean));
    let r = qq_correlation(&residual_diagnostics(&fit));
    assert!(r > 0.98, "qq correlation {r}");
}

#[test]
fn quadrature_is_stable_in_node_count() {
    // g2 stays away from zero; where g nearly vanishes the integrand is sharply peaked and
    // 21 nodes are only good to a few 1e-4 per subject
    let (fit, d) = clustered_fit(GShape::G2, IndexKind::ConditionalMean, VarianceTemplate::increasing(2, 4, IndexKind::ConditionalMean));
    let l21 = loglik_conditional_variance(&d, &fit.beta_hat, &fit.re_cov, &fit.variance, 21).unwrap();
    let l31 = loglik_conditional_variance(&d, &fit.beta_hat, &fit.re_cov, &fit.variance, 31).unwrap();
    assert!((l31 - l21).abs() < 1e-4, "{l21} vs {l31}");
}

#[test]
fn true_variance_shapes_are_positive() {
    for shape in [GShape::G1, GShape::G2, GShape::G3] {
        for k in 0..=20 {
            assert!(g_true(shape, 1.0 + 3.0 * k as f64 / 20.0) > 0.0);
        }
    }
}
