//! Monte Carlo properties of candidate tuples and recovered measures.

use std::collections::BTreeMap;

use recovery_kit::expr::parse_expr;
use recovery_kit::model::{builtin, Coefficient, MarketModel};
use recovery_kit::mc::{
    martingale_estimate, martingale_samples, reference_function_rate, simulate, simulate_Q, step_halving_check,
    Drift, EstimateWithCI, SimConfig,
};
use recovery_kit::oracles::CirParams;
use recovery_kit::recovery::recover_recurrent;
use recovery_kit::sturm::{endpoint_tuple, tuple_from_profiles, CandidateTuple, GridFunction, Tolerances, WindowState};

fn tuples(model: &MarketModel, lambda: f64) -> Vec<CandidateTuple> {
    let tol = Tolerances::default();
    let st = WindowState::compute(model, lambda, &tol).unwrap();
    let hi = endpoint_tuple(model, &st, true, &tol).unwrap();
    let lo = endpoint_tuple(model, &st, false, &tol).unwrap();
    let (l, r) = st.profiles().unwrap();
    let mid = tuple_from_profiles(model, lambda, 0.5 * (hi.z + lo.z), l, r, tol.ztol).unwrap();
    vec![hi, mid, lo]
}

#[test]
fn candidate_tuples_are_supermartingales() {
    let cfg = SimConfig::new(1.0, 200, 20_000, 17);
    for (name, lambda) in [("gbm", 0.03), ("cir", 0.02)] {
        let m = builtin(name).unwrap();
        let ens = simulate_Q(&m, &cfg).unwrap();
        for t in tuples(&m, lambda) {
            let e = martingale_estimate(&ens, &m, lambda, &t.h).unwrap();
            assert!(e.estimate <= 1.0 + 3.0 * e.se, "{name} z = {}: {e:?}", t.z);
        }
    }
}

#[test]
fn admissible_tuples_are_martingales_and_cir_min_slope_is_not() {
    let cfg = SimConfig::new(1.0, 200, 20_000, 23);
    let g = builtin("gbm").unwrap();
    let ens = simulate_Q(&g, &cfg).unwrap();
    for t in tuples(&g, 0.03) {
        let e = martingale_estimate(&ens, &g, 0.03, &t.h).unwrap();
        assert!(e.within(1.0, 3.0), "gbm z = {}: {e:?}", t.z);
    }

    let c = builtin("cir").unwrap();
    let ens = simulate_Q(&c, &cfg).unwrap();
    let res = recover_recurrent(&c, &Tolerances::default()).unwrap();
    let e = martingale_estimate(&ens, &c, res.beta, &res.phi).unwrap();
    assert!(e.within(1.0, 3.0), "cir recurrent: {e:?}");
    let lo = &tuples(&c, 0.02)[2];
    let e = martingale_estimate(&ens, &c, 0.02, &lo.h).unwrap();
    assert!(e.estimate < 1.0 - 3.0 * e.se, "cir min slope: {e:?}");
}

/// `E_Q[w g(X_T)]` with the martingale weight of `h`, against `E[g(X_T)]`
/// under the measure transformed by `h`.
fn radon_nikodym_gap(model: &MarketModel, lambda: f64, h: &GridFunction, cfg: &SimConfig) -> Vec<f64> {
    let eq = simulate_Q(model, cfg).unwrap();
    let ep = simulate(model, cfg, Drift::Transformed(h)).unwrap();
    let w = martingale_samples(&eq, 0, lambda, h, model.xi).unwrap();
    let k = model.xi;
    let gs: [&dyn Fn(f64) -> f64; 3] = [&|_| 1.0, &|x| x, &|x: f64| x.min(k)];
    gs.iter()
        .map(|g| {
            let a = EstimateWithCI::from_samples(w.iter().zip(&eq.x[0]).map(|(w, &x)| w.map(|w| w * g(x))));
            let b = EstimateWithCI::from_samples(ep.x[0].iter().map(|&x| Some(g(x))));
            (a.estimate - b.estimate).abs() / a.se.hypot(b.se)
        })
        .collect()
}

#[test]
fn weighted_q_expectations_match_the_transformed_measure() {
    let cfg = SimConfig::new(1.0, 200, 20_000, 29);
    let g = builtin("gbm").unwrap();
    for t in tuples(&g, 0.03) {
        for z in radon_nikodym_gap(&g, 0.03, &t.h, &cfg) {
            assert!(z <= 3.0, "gbm tuple z = {}: {z} standard errors", t.z);
        }
    }
    let c = builtin("cir").unwrap();
    let res = recover_recurrent(&c, &Tolerances::default()).unwrap();
    for z in radon_nikodym_gap(&c, res.beta, &res.phi, &cfg) {
        assert!(z <= 3.0, "cir recurrent: {z} standard errors");
    }
}

#[test]
fn halving_the_step_moves_estimates_by_less_than_one_se() {
    let cfg = SimConfig::new(1.0, 100, 100_000, 31);
    let g = builtin("gbm").unwrap();
    let t = &tuples(&g, 0.03)[0];
    let s = step_halving_check(&g, 0.03, &t.h, &cfg).unwrap();
    assert!(s.change().abs() < s.fine.se, "gbm: {s:?}");
    let c = builtin("cir").unwrap();
    let res = recover_recurrent(&c, &Tolerances::default()).unwrap();
    let s = step_halving_check(&c, res.beta, &res.phi, &cfg).unwrap();
    assert!(s.change().abs() < s.fine.se, "cir: {s:?}");
}

#[test]
fn recovered_cir_mean_reverts_to_the_recovered_level() {
    let c = builtin("cir").unwrap();
    let p = CirParams::from_model(&c).unwrap();
    let res = recover_recurrent(&c, &Tolerances::default()).unwrap();
    let t = 5.0;
    let ens = simulate(&c, &SimConfig::new(t, 1000, 20_000, 37), Drift::Transformed(&res.phi)).unwrap();
    let mean = EstimateWithCI::from_samples(ens.x[0].iter().map(|&x| Some(x)));
    let level = p.recovered_level();
    let exact = level + (p.r0 - level) * (-p.recovered_speed() * t).exp();
    assert!(mean.within(exact, 3.0), "{mean:?} vs {exact}");
}

#[test]
fn polynomial_reference_function_has_vanishing_rate() {
    let b = builtin("brownian").unwrap();
    let res = recover_recurrent(&b, &Tolerances::default()).unwrap();
    let f = Coefficient::new(parse_expr("1 + x^2", &BTreeMap::new()).unwrap());
    let ladder = [5.0, 10.0, 20.0, 40.0];
    let r = reference_function_rate(&b, &res, &f, &ladder, &SimConfig::new(40.0, 800, 20_000, 41)).unwrap();
    // E[1 + X_T^2] = 1 + T under both measures; the risk-neutral rate is
    // reported with the sign that makes it tend to beta = 0 from below.
    for (ladder, sign) in [(&r.objective.ladder, 1.0), (&r.risk_neutral.ladder, -1.0)] {
        for p in ladder {
            let exact = sign * (1.0 + p.t).ln() / p.t;
            assert!((p.rate - exact).abs() <= 3.0 * p.rate_se, "T = {}: {} vs {exact}", p.t, p.rate);
        }
    }
    let rates: Vec<f64> = r.objective.ladder.iter().map(|p| p.rate).collect();
    assert!(rates.windows(2).all(|w| w[1] < w[0]), "{rates:?}");
}

#[test]
fn estimates_are_reproducible_bit_for_bit() {
    let c = builtin("cir").unwrap();
    let t = &tuples(&c, 0.02)[0];
    let cfg = SimConfig::new(1.0, 100, 5_000, 43);
    let a = martingale_estimate(&simulate_Q(&c, &cfg).unwrap(), &c, 0.02, &t.h).unwrap();
    let b = martingale_estimate(&simulate_Q(&c, &cfg).unwrap(), &c, 0.02, &t.h).unwrap();
    assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
    assert_eq!(a.se.to_bits(), b.se.to_bits());
}
