use super::*;
use crate::law::Law;
use crate::law::NoiseLaw;
use crate::schemes::{graduation_scheme, perturbation_scheme, polya_scheme};

fn gauss_grad() -> crate::schemes::GraduationScheme {
    graduation_scheme(Law::std_normal(1)).unwrap()
}

fn unif_grad() -> crate::schemes::GraduationScheme {
    graduation_scheme(Law::uniform(1)).unwrap()
}

fn cos_fn() -> TestFunction {
    TestFunction::cos_coordinate(0, 1).unwrap()
}

fn sin_fn() -> TestFunction {
    TestFunction::sin_coordinate(0, 1).unwrap()
}

fn one() -> TestFunction {
    TestFunction::constant(1.0, 1)
}

/// Test function vanishing near the boundary of (0,1): identical to its
/// core expression on [0.15, 0.85], zero outside [0.02, 0.98]. Weak
/// operator limits on the uniform law need the boundary values gone.
fn inner_windowed(core: &str) -> TestFunction {
    let expr = crate::jet2::Expr::parse(&format!("({core}) * win(0.35, 0.48, x0 - 0.5)")).unwrap();
    let mut f = TestFunction::from_expr(expr, 1, None).unwrap();
    let b = f.estimate_bounds(2.0, 4096).unwrap();
    f = TestFunction::from_expr(f.expr().clone(), 1, Some(b)).unwrap();
    f
}

#[test]
fn graduation_bias_of_cosine_under_the_gaussian_law() {
    // Oracle: E_Y[(1/24)(-cos Y)] = -e^{-1/2}/24 under N(0,1).
    let target = -(-0.5f64).exp() / 24.0;
    let scheme = gauss_grad();
    let cfg = EstimatorConfig::new(500_000, 42, "t/grad-bias");
    let est = estimate_bias(&scheme, BiasKind::Theoretical, &cos_fn(), &one(), 64, &cfg).unwrap();
    assert!(
        (est.value - target).abs() <= 3.0 * est.stderr + 2e-5,
        "estimate {} vs {target} (se {})",
        est.value,
        est.stderr
    );
    // The reference path reproduces the same number from the operators.
    let (reference, se) = reference_weak_value(
        &scheme,
        BiasKind::Theoretical,
        &cos_fn(),
        &one(),
        400_000,
        1,
    )
    .unwrap();
    assert!((reference - target).abs() <= 3.0 * se + 1e-6);
}

#[test]
fn constant_phi_gives_exactly_zero_for_every_kind() {
    let phi = TestFunction::constant(2.0, 1);
    let chi = sin_fn();
    for (scheme, name) in [
        (
            Box::new(gauss_grad()) as Box<dyn ApproximationScheme>,
            "grad",
        ),
        (Box::new(polya_scheme(64).unwrap()) as _, "polya"),
    ] {
        for kind in BiasKind::ALL {
            let cfg = EstimatorConfig::new(2_000, 3, format!("t/const-{name}"));
            let est = estimate_bias(scheme.as_ref(), kind, &phi, &chi, 8, &cfg).unwrap();
            assert_eq!(est.value, 0.0, "{name}/{:?}", kind);
        }
    }
}

#[test]
fn perturbation_mean_bias_matches_the_stein_value() {
    // Y ~ N(0,1), Z = Y, T = 1, phi = cos: E_Y[a_bar[cos]] = -(3/2)e^{-1/2}.
    let target = -1.5 * (-0.5f64).exp();
    let scheme = perturbation_scheme(
        Law::std_normal(1),
        vec![TestFunction::parse("x0", 1).unwrap()],
        vec![vec![TestFunction::constant(1.0, 1)]],
        NoiseLaw::StdNormal,
        5,
    )
    .unwrap();
    let cfg = EstimatorConfig::new(400_000, 11, "t/pert-bias");
    let est = estimate_bias(&scheme, BiasKind::Theoretical, &cos_fn(), &one(), 10, &cfg).unwrap();
    assert!(
        (est.value - target).abs() <= 3.0 * est.stderr + 2e-3,
        "estimate {} vs {target} (se {})",
        est.value,
        est.stderr
    );
}

#[test]
fn crn_relations_are_exactly_zero() {
    let scheme = gauss_grad();
    let cfg = EstimatorConfig::new(50_000, 7, "t/crn");
    let four = estimate_all(&scheme, &cos_fn(), &sin_fn(), 32, &cfg).unwrap();
    let res = check_relations(&four);
    assert_eq!(res.symmetric_residual, 0.0);
    assert_eq!(res.singular_residual, 0.0);
}

#[test]
fn independent_stream_relations_hold_within_noise() {
    let scheme = gauss_grad();
    let cfg = EstimatorConfig::new(200_000, 7, "t/ind").independent();
    let four = estimate_all(&scheme, &cos_fn(), &sin_fn(), 16, &cfg).unwrap();
    let res = check_relations(&four);
    assert!(
        res.symmetric_residual.abs() <= 3.0 * res.symmetric_stderr,
        "symmetric {} vs se {}",
        res.symmetric_residual,
        res.symmetric_stderr
    );
    assert!(
        res.singular_residual.abs() <= 3.0 * res.singular_stderr,
        "singular {} vs se {}",
        res.singular_residual,
        res.singular_stderr
    );
}

#[test]
fn uniform_graduation_has_vanishing_singular_estimate() {
    // With the boundary windowed away, the uniform law has coinciding
    // theoretical and practical operators.
    let scheme = unif_grad();
    let phi = inner_windowed("sin(3 * x0)");
    let chi = inner_windowed("x0");
    let cfg = EstimatorConfig::new(400_000, 9, "t/slash");
    let est = estimate_bias(&scheme, BiasKind::Singular, &phi, &chi, 64, &cfg).unwrap();
    assert!(
        est.value.abs() <= 3.0 * est.stderr + 2e-4,
        "singular {} (se {})",
        est.value,
        est.stderr
    );
}

#[test]
fn symmetric_estimate_is_symmetric_in_its_pair() {
    let scheme = gauss_grad();
    let (phi, chi) = (cos_fn(), sin_fn());
    let a = estimate_bias(
        &scheme,
        BiasKind::Symmetric,
        &phi,
        &chi,
        32,
        &EstimatorConfig::new(150_000, 13, "t/sym-a"),
    )
    .unwrap();
    let b = estimate_bias(
        &scheme,
        BiasKind::Symmetric,
        &chi,
        &phi,
        32,
        &EstimatorConfig::new(150_000, 14, "t/sym-b"),
    )
    .unwrap();
    let combined = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    assert!((a.value - b.value).abs() <= 3.0 * combined);
}

#[test]
fn stderr_scales_like_inverse_root_samples() {
    let scheme = gauss_grad();
    let small = estimate_bias(
        &scheme,
        BiasKind::Theoretical,
        &cos_fn(),
        &one(),
        16,
        &EstimatorConfig::new(40_000, 21, "t/scale-a"),
    )
    .unwrap();
    let large = estimate_bias(
        &scheme,
        BiasKind::Theoretical,
        &cos_fn(),
        &one(),
        16,
        &EstimatorConfig::new(160_000, 22, "t/scale-b"),
    )
    .unwrap();
    // Quadrupling the budget halves the standard error, within 30%.
    let ratio = small.stderr / large.stderr / 2.0;
    assert!((0.7..=1.3).contains(&ratio), "ratio {ratio}");
}

#[test]
fn estimates_converge_to_the_reference_at_a_fitted_rate() {
    let scheme = gauss_grad();
    let phi = cos_fn();
    let chi = sin_fn();
    let (reference, ref_se) =
        reference_weak_value(&scheme, BiasKind::Symmetric, &phi, &chi, 400_000, 2).unwrap();
    let at = |n: u32, stream: &str| {
        estimate_bias(
            &scheme,
            BiasKind::Symmetric,
            &phi,
            &chi,
            n,
            &EstimatorConfig::new(300_000, 23, format!("t/conv-{stream}")),
        )
        .unwrap()
    };
    let coarse = at(8, "n8");
    let fine = at(64, "n64");
    // Fit the rate constant from the coarse level and check the fine one.
    let c = (coarse.value - reference).abs() * 8.0;
    let budget = 3.0 * (fine.stderr + ref_se) + 1.5 * c / 64.0 + 1e-4;
    assert!(
        (fine.value - reference).abs() <= budget,
        "fine {} vs reference {reference} (budget {budget})",
        fine.value
    );
}

#[test]
fn locality_of_graduation_has_slope_minus_two() {
    let scheme = unif_grad();
    let phi = TestFunction::windowed_coordinate(0, 1, 2.0, 4.0).unwrap();
    let cfg = EstimatorConfig::new(50_000, 15, "t/locality");
    let report = locality_test(&scheme, &phi, &[8, 16, 32, 64, 128], &cfg).unwrap();
    assert!(
        (report.slope + 2.0).abs() <= 0.3,
        "slope {} (points {:?})",
        report.slope,
        report.points
    );
    assert!(report.accepted);
    assert!(report.r_squared > 0.99);
}

#[test]
fn locality_of_a_constant_is_trivially_local() {
    let scheme = unif_grad();
    let phi = TestFunction::constant(4.0, 1);
    let cfg = EstimatorConfig::new(2_000, 15, "t/locality-const");
    let report = locality_test(&scheme, &phi, &[4, 8, 16], &cfg).unwrap();
    assert!(report.points.iter().all(|p| p.value == 0.0));
    assert!(report.accepted);
}

#[test]
fn binary_digit_fourth_moments_decay() {
    // alpha_n = 2^n against a fourth moment of order 16^-n: decreasing by a
    // factor ~8 per level.
    let scheme = crate::schemes::binary_digit_scheme();
    let phi = TestFunction::windowed_coordinate(0, 1, 2.0, 4.0).unwrap();
    let cfg = EstimatorConfig::new(100_000, 16, "t/locality-bin");
    let report = locality_test(&scheme, &phi, &[2, 4, 6, 8], &cfg).unwrap();
    assert!(report.accepted, "slope {}", report.slope);
    assert!(report.slope < -1.5);
}

#[test]
fn locality_rejects_bad_level_lists() {
    let scheme = unif_grad();
    let phi = sin_fn();
    let cfg = EstimatorConfig::new(2_000, 1, "t/locality-bad");
    assert!(locality_test(&scheme, &phi, &[8, 16], &cfg).is_err());
    assert!(locality_test(&scheme, &phi, &[8, 8, 16], &cfg).is_err());
}

#[test]
fn unbounded_functions_are_rejected_by_estimators() {
    let scheme = unif_grad();
    let bare = TestFunction::coordinate(0, 1).unwrap();
    let cfg = EstimatorConfig::new(2_000, 1, "t/unbounded");
    assert!(matches!(
        estimate_bias(&scheme, BiasKind::Theoretical, &bare, &one(), 8, &cfg),
        Err(Error::Unbounded)
    ));
}

#[test]
fn tiny_budgets_are_rejected() {
    let scheme = unif_grad();
    let cfg = EstimatorConfig::new(999, 1, "t/small");
    assert!(estimate_bias(&scheme, BiasKind::Theoretical, &sin_fn(), &one(), 8, &cfg).is_err());
}

#[test]
fn singular_operator_of_graduation_is_not_first_order_but_symmetric_part_is_zero() {
    // Uniform law, inner-windowed battery: the singular operator vanishes,
    // so its Leibniz residual does too.
    let scheme = unif_grad();
    let phi = inner_windowed("sin(2 * x0)");
    let chi = inner_windowed("cos(x0)");
    let psi = one();
    let cfg = EstimatorConfig::new(300_000, 17, "t/first-order-slash");
    let r = first_order_test(&scheme, BiasKind::Singular, &phi, &chi, &psi, 64, &cfg).unwrap();
    assert!(
        r.residual.abs() <= 3.0 * r.stderr + 2e-4,
        "residual {} (se {})",
        r.residual,
        r.stderr
    );
}

#[test]
fn theoretical_operator_of_graduation_violates_leibniz_by_the_gradient_product() {
    // The Leibniz defect of the second-order part is
    // E[(1/12) phi' chi' psi]; under N(0,1) with phi = sin, chi = sin:
    // (1/12) E[cos^2 Y] = (1 + e^-2)/24.
    let scheme = gauss_grad();
    let phi = sin_fn();
    let chi = sin_fn();
    let psi = one();
    let target = (1.0 + (-2.0f64).exp()) / 24.0;
    let cfg = EstimatorConfig::new(400_000, 18, "t/first-order-bar");
    let r = first_order_test(&scheme, BiasKind::Theoretical, &phi, &chi, &psi, 64, &cfg).unwrap();
    assert!(
        (r.residual - target).abs() <= 3.0 * r.stderr + 3e-4,
        "residual {} vs {target} (se {})",
        r.residual,
        r.stderr
    );
    // And it is resolvable: the residual is many standard errors from zero.
    assert!(r.residual > 10.0 * r.stderr);
}

#[test]
fn constant_chi_has_zero_leibniz_residual() {
    let scheme = gauss_grad();
    let phi = sin_fn();
    let chi = TestFunction::constant(3.0, 1);
    let psi = cos_fn();
    let cfg = EstimatorConfig::new(10_000, 19, "t/first-order-const");
    for kind in BiasKind::ALL {
        let r = first_order_test(&scheme, kind, &phi, &chi, &psi, 16, &cfg).unwrap();
        assert!(r.residual.abs() <= 1e-10, "{kind:?}: {}", r.residual);
    }
}

#[test]
fn variance_forms_coincide_on_the_uniform_graduation() {
    let scheme = unif_grad();
    let phi = TestFunction::windowed_square(0, 1, 1.25, 2.5).unwrap();
    let psi = cos_fn();
    let cfg = EstimatorConfig::new(400_000, 20, "t/varforms");
    let v = variance_forms(&scheme, &phi, &phi, &psi, 64, &cfg).unwrap();
    // Coincidence of the two estimates within their combined errors. (The
    // pathwise difference stream is sharper and resolves a real O(1/n^2)
    // finite-level gap, so it is not the coincidence criterion.)
    let combined = (v.theoretical_stderr.powi(2) + v.practical_stderr.powi(2)).sqrt();
    assert!(
        (v.theoretical - v.practical).abs() <= 3.0 * combined,
        "difference {} (combined se {combined})",
        v.theoretical - v.practical,
    );
    assert!(v.difference.abs() < 1e-3, "pathwise gap {}", v.difference);
    // Both match E_Y[Gamma[phi] psi] = (1/12) E[4 Y^2 cos Y] on U(0,1).
    let reference = v.gamma_weighted.unwrap();
    let quad = {
        // Simpson on [0,1] of (1/3) y^2 cos y.
        let m = 20_000;
        let h = 1.0 / m as f64;
        let f = |y: f64| y * y * y.cos() / 3.0;
        let mut acc = f(0.0) + f(1.0);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0
    };
    assert!(
        (reference - quad).abs() < 1e-3,
        "gamma side {reference} vs {quad}"
    );
    assert!(
        (v.theoretical - quad).abs() / quad.abs() < 0.03,
        "theoretical {} vs {quad}",
        v.theoretical
    );
    assert!(
        (v.practical - quad).abs() / quad.abs() < 0.03,
        "practical {} vs {quad}",
        v.practical
    );
}

#[test]
fn variance_forms_reduce_to_the_square_field_for_unit_weight() {
    // psi = 1: both forms estimate E_Y[Gamma[phi, chi]].
    let scheme = gauss_grad();
    let phi = sin_fn();
    let chi = sin_fn();
    let cfg = EstimatorConfig::new(300_000, 24, "t/varforms-unit");
    let v = variance_forms(&scheme, &phi, &chi, &one(), 64, &cfg).unwrap();
    let gamma = v.gamma_weighted.unwrap();
    assert!((v.theoretical - gamma).abs() / gamma.abs() < 0.05);
    assert!((v.practical - gamma).abs() / gamma.abs() < 0.05);
}

#[test]
fn perturbation_variances_coincide_because_the_singular_part_is_first_order() {
    // Z = Y keeps a genuine singular operator, but it is first order, so
    // theoretical and practical variances still coincide.
    let scheme = perturbation_scheme(
        Law::std_normal(1),
        vec![TestFunction::parse("x0", 1).unwrap()],
        vec![vec![TestFunction::constant(1.0, 1)]],
        NoiseLaw::StdNormal,
        8,
    )
    .unwrap();
    let cfg = EstimatorConfig::new(300_000, 25, "t/varforms-pert");
    let v = variance_forms(&scheme, &sin_fn(), &cos_fn(), &cos_fn(), 8, &cfg).unwrap();
    let combined = (v.theoretical_stderr.powi(2) + v.practical_stderr.powi(2)).sqrt();
    assert!(
        (v.theoretical - v.practical).abs() <= 3.0 * combined,
        "difference {} (combined se {combined})",
        v.theoretical - v.practical,
    );
    // Operator-side expressions agree with each other and the sample side.
    let (ot, op) = (
        v.operator_theoretical.unwrap(),
        v.operator_practical.unwrap(),
    );
    assert!((ot - op).abs() < 0.02, "{ot} vs {op}");
    assert!((v.theoretical - ot).abs() <= 3.0 * v.theoretical_stderr + 0.02);
}

#[cfg(feature = "parallel")]
#[test]
fn estimates_do_not_depend_on_worker_count() {
    let scheme = gauss_grad();
    let phi = cos_fn();
    let chi = sin_fn();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            estimate_all(
                &scheme,
                &phi,
                &chi,
                16,
                &EstimatorConfig::new(100_000, 33, "t/workers"),
            )
            .unwrap()
        })
    };
    let a = run(1);
    let b = run(3);
    for kind in BiasKind::ALL {
        assert_eq!(a.get(kind).value, b.get(kind).value, "{kind:?}");
        assert_eq!(a.get(kind).stderr, b.get(kind).stderr, "{kind:?}");
    }
}
