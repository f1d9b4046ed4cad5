//! Recovery selection rules and the boundary pattern of candidate tuples.

use recovery_kit::boundary::{classify_boundaries, Verdict};
use recovery_kit::model::{builtin, MarketModel};
use recovery_kit::oracles::{CirParams, GbmParams};
use recovery_kit::recovery::{
    recover_recurrent, recover_transient_side, recover_transient_unique, RecoveryError, SelectionRule,
};
use recovery_kit::sturm::{endpoint_tuple, linspace, tuple_from_profiles, Side, Tolerances, WindowState};

fn elasticity_gap(a: &recovery_kit::recovery::RecoveryResult, b: &recovery_kit::recovery::RecoveryResult, lo: f64, hi: f64) -> f64 {
    let mut worst = 0.0f64;
    for &x in a.phi.x.iter().filter(|x| (lo..=hi).contains(*x)) {
        let da = a.phi.dlog(x).unwrap();
        let db = b.phi.dlog(x).unwrap();
        worst = worst.max((da - db).abs() * x);
    }
    worst
}

#[test]
fn gbm_left_side_at_beta_bar_agrees_with_recurrent_recovery() {
    let m = builtin("gbm").unwrap();
    let tol = Tolerances::default();
    let rec = recover_recurrent(&m, &tol).unwrap();
    assert_eq!(rec.rule, SelectionRule::Recurrent);
    let side = recover_transient_side(&m, rec.beta, Side::Left, &tol).unwrap();
    // The window half-width grows like the square root of the distance to
    // beta_bar, so slopes agree only to about the square root of its error.
    assert!((side.z - rec.z).abs() < 2e-5, "{} vs {}", side.z, rec.z);
    // Drift per unit price is sigma^2 times the elasticity of phi.
    assert!(0.04 * elasticity_gap(&rec, &side, 1e-2, 1e2) < 1e-6);
}

#[test]
fn gbm_transient_drift_follows_absolute_value_formula() {
    let m = builtin("gbm").unwrap();
    let p = GbmParams::from_model(&m).unwrap();
    let tol = Tolerances::default();
    for beta in [0.0, 0.03, 0.05] {
        let res = recover_transient_side(&m, beta, Side::Left, &tol).unwrap();
        assert_eq!(res.rule, SelectionRule::TransientKnownBetaLeftNonAttracted);
        assert_ne!(res.boundary.attracting_left, Some(true));
        let expected = match p.window(beta) {
            recovery_kit::oracles::GbmWindow::Interval { l2, .. } => p.recovered_drift_coeff(l2),
            w => panic!("{w:?}"),
        };
        let (_, slope, maxdev) = res.linear_drift_fit(1e-3, 1e3).unwrap();
        assert!((slope - expected).abs() < 1e-6, "beta {beta}: {slope} vs {expected}");
        assert!(maxdev < 1e-6);
    }
    // beta = r: sigma^2/2 + |r - delta - sigma^2/2|.
    let res = recover_transient_side(&m, p.r, Side::Left, &tol).unwrap();
    let (_, slope, _) = res.linear_drift_fit(1e-3, 1e3).unwrap();
    let s2 = p.sigma * p.sigma;
    assert!((slope - (s2 / 2.0 + (p.r - p.delta - s2 / 2.0).abs())).abs() < 1e-6);
}

#[test]
fn gbm_right_side_attracts_left() {
    let m = builtin("gbm").unwrap();
    let tol = Tolerances::default();
    let res = recover_transient_side(&m, 0.03, Side::Right, &tol).unwrap();
    assert_eq!(res.rule, SelectionRule::TransientKnownBetaRightNonAttracted);
    assert_eq!(res.boundary.verdict, Verdict::TransientLeft);
}

#[test]
fn cir_known_beta_selects_the_unique_admissible_tuple() {
    let m = builtin("cir").unwrap();
    let tol = Tolerances::default();
    let p = CirParams::from_model(&m).unwrap();
    for beta in [0.0, 0.02] {
        let res = recover_transient_unique(&m, beta, &tol).unwrap();
        assert_eq!(res.rule, SelectionRule::TransientKnownBetaUniqueAdmissible);
        assert!((res.z - p.big_m(beta).unwrap()).abs() < 1e-5);
    }
    // The minimal-slope tuple explodes at zero, so the right side is refused.
    match recover_transient_side(&m, 0.02, Side::Right, &tol) {
        Err(RecoveryError::SelectedTupleInadmissible { .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn cir_recovered_short_rate_is_mean_reverting() {
    let m = builtin("cir").unwrap();
    let p = CirParams::from_model(&m).unwrap();
    let res = recover_recurrent(&m, &Tolerances::default()).unwrap();
    let (alpha, slope, maxdev) = res.linear_drift_fit(0.005, 0.3).unwrap();
    assert!((-slope - p.recovered_speed()).abs() < 1e-6);
    assert!((alpha / -slope - p.recovered_level()).abs() < 1e-6);
    assert!(maxdev < 1e-6);
    assert_eq!(res.boundary.verdict, Verdict::Recurrent);
}

fn boundary_pattern(model: &MarketModel, lambdas: &[f64]) {
    let tol = Tolerances::default();
    for &lambda in lambdas {
        let st = WindowState::compute(model, lambda, &tol).unwrap();
        let hi = endpoint_tuple(model, &st, true, &tol).unwrap();
        let lo = endpoint_tuple(model, &st, false, &tol).unwrap();
        let rh = classify_boundaries(model, &hi, &tol).unwrap();
        let rl = classify_boundaries(model, &lo, &tol).unwrap();
        assert_eq!(rh.attracting_left, Some(false), "lambda {lambda}: {rh:?}");
        assert_eq!(rl.attracting_right, Some(false), "lambda {lambda}: {rl:?}");
        let (l, r) = st.profiles().unwrap();
        for q in [0.25, 0.5, 0.75] {
            let z = lo.z + q * (hi.z - lo.z);
            let t = tuple_from_profiles(model, lambda, z, l.clone(), r.clone(), tol.ztol).unwrap();
            let rep = classify_boundaries(model, &t, &tol).unwrap();
            assert_eq!(rep.verdict, Verdict::TransientBoth, "lambda {lambda}, z {z}: {rep:?}");
        }
    }
}

#[test]
fn endpoint_and_interior_boundary_pattern() {
    let g = builtin("gbm").unwrap();
    boundary_pattern(&g, &linspace(-0.2, 0.05, 4));
    let c = builtin("cir").unwrap();
    boundary_pattern(&c, &linspace(-0.2, 0.048, 4));
}
