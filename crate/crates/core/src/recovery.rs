//! Selection of the principal pair and the recovered objective dynamics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{
    check_admissible, classify_boundaries, AdmissibilityReport, BoundaryError, BoundaryReport, Verdict,
};
use crate::model::{MarketModel, ModelError};
use crate::sturm::{
    find_beta_bar, principal_join, tuple_from_profiles, BetaBar, BetaBarCase, CandidateTuple, GridFunction, Side, SturmError,
    Tolerances, Window, WindowState,
};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Sturm(#[from] SturmError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error("the window at beta_bar = {beta_bar} is [{m}, {big_m}]: every tuple there is transient, recurrent recovery is impossible")]
    CaseTwoDetected { beta_bar: f64, m: f64, big_m: f64 },
    #[error("the selected tuple ({lambda}, {z}) is not recurrent: verdict {verdict:?}")]
    NotRecurrentUnderSelection { lambda: f64, z: f64, verdict: Verdict },
    #[error("both (beta, m) and (beta, M) are admissible at beta = {beta}: the objective measure is not determined")]
    BothAdmissible { beta: f64, m: f64, big_m: f64 },
    #[error("neither endpoint tuple is admissible at beta = {beta}")]
    NeitherAdmissible { beta: f64, m: f64, big_m: f64 },
    #[error("beta = {beta} exceeds beta_bar = {beta_bar}")]
    BetaAboveBetaBar { beta: f64, beta_bar: f64 },
    #[error("the selected tuple ({lambda}, {z}) is not admissible")]
    SelectedTupleInadmissible { lambda: f64, z: f64 },
    #[error("the boundary report for ({lambda}, {z}) does not confirm the {side} boundary as non-attracting")]
    SideNotConfirmed { lambda: f64, z: f64, side: Side },
    #[error("x = {x} is outside the recovered grid [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
    #[error("t = {t} is negative")]
    NegativeTime { t: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl RecoveryError {
    /// True when a certificate could not be decided.
    pub fn is_inconclusive(&self) -> bool {
        matches!(
            self,
            RecoveryError::Boundary(BoundaryError::InconclusiveCertificate { .. })
                | RecoveryError::NotRecurrentUnderSelection {
                    verdict: Verdict::Unknown,
                    ..
                }
                | RecoveryError::Sturm(SturmError::TruncationNotConverged { .. })
        )
    }

    /// True for failures of a recovery theorem's hypotheses.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            RecoveryError::CaseTwoDetected { .. }
                | RecoveryError::NotRecurrentUnderSelection { .. }
                | RecoveryError::BothAdmissible { .. }
                | RecoveryError::NeitherAdmissible { .. }
                | RecoveryError::BetaAboveBetaBar { .. }
                | RecoveryError::SelectedTupleInadmissible { .. }
                | RecoveryError::SideNotConfirmed { .. }
        ) && !self.is_inconclusive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    Recurrent,
    TransientKnownBetaUniqueAdmissible,
    TransientKnownBetaLeftNonAttracted,
    TransientKnownBetaRightNonAttracted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub beta_bar: Option<BetaBar>,
    /// `[m_beta, M_beta]`.
    pub window: (f64, f64),
    /// Explosion tests behind the selection, one per examined tuple.
    pub admissibility: Vec<AdmissibilityReport>,
    /// Largest normalized ODE residual of `phi`.
    pub residual: f64,
    /// Jump of `phi'` at `xi` where `phi` joins two principal solutions.
    pub kink: f64,
}

/// A recovered principal pair `(beta, phi)` with `phi(xi) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub beta: f64,
    /// `phi'(xi)`.
    pub z: f64,
    pub xi: f64,
    pub rule: SelectionRule,
    pub phi: GridFunction,
    /// `mu_P = k + sigma^2 phi'/phi` at the nodes of `phi`.
    pub drift: Vec<f64>,
    /// Boundary behaviour under the recovered measure.
    pub boundary: BoundaryReport,
    pub diagnostics: Diagnostics,
}

/// `k + sigma^2 phi'/phi` at every node of `phi`.
pub fn drift_on_grid(model: &MarketModel, phi: &GridFunction) -> Result<Vec<f64>, ModelError> {
    phi.x
        .iter()
        .zip(phi.node_dlog())
        .map(|(&x, w)| {
            let c = model.coeffs(x)?;
            Ok(c.k() + c.sigma * c.sigma * w)
        })
        .collect()
}

impl RecoveryResult {
    fn build(
        model: &MarketModel,
        tuple: &CandidateTuple,
        rule: SelectionRule,
        boundary: BoundaryReport,
        diagnostics: Diagnostics,
    ) -> Result<Self, RecoveryError> {
        let drift = drift_on_grid(model, &tuple.h)?;
        Ok(RecoveryResult {
            beta: tuple.lambda,
            z: tuple.z,
            xi: model.xi,
            rule,
            phi: tuple.h.clone(),
            drift,
            boundary,
            diagnostics,
        })
    }

    /// Evaluates the recovered drift again from `phi`.
    pub fn recompute_drift(&self, model: &MarketModel) -> Result<Vec<f64>, ModelError> {
        drift_on_grid(model, &self.phi)
    }

    pub fn phi_at(&self, x: f64) -> Result<f64, RecoveryError> {
        let (lo, hi) = self.phi.x_range();
        if !(x >= lo && x <= hi) {
            return Err(RecoveryError::OutOfDomain { x, lo, hi });
        }
        Ok(self.phi.value(x)?)
    }

    /// Least-squares line `mu_P(x) ~ alpha + slope x` over nodes in `[lo, hi]`,
    /// with the largest absolute deviation from it.
    pub fn linear_drift_fit(&self, lo: f64, hi: f64) -> Option<(f64, f64, f64)> {
        let pts: Vec<(f64, f64)> = self
            .phi
            .x
            .iter()
            .zip(&self.drift)
            .filter(|(x, _)| **x >= lo && **x <= hi)
            .map(|(x, d)| (*x, *d))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let alpha = my - slope * mx;
        let dev = pts
            .iter()
            .map(|p| (p.1 - alpha - slope * p.0).abs())
            .fold(0.0, f64::max);
        Some((alpha, slope, dev))
    }
}

/// The tuple with slope `z` at the window's `lambda`.
fn tuple_at(
    model: &MarketModel,
    state: &WindowState,
    z: f64,
    tol: &Tolerances,
) -> Result<CandidateTuple, RecoveryError> {
    let (l, r) = state
        .profiles()
        .ok_or(SturmError::EmptyWindow { lambda: state.lambda })?;
    Ok(tuple_from_profiles(model, state.lambda, z, l, r, tol.ztol)?)
}

fn window_bounds(state: &WindowState, tol: &Tolerances) -> Option<(f64, f64)> {
    match state.window(tol.ztol) {
        Window::Interval { m, big_m } => Some((m, big_m)),
        Window::Empty { .. } => None,
    }
}

fn truncation_ok(state: &WindowState) -> Result<(), RecoveryError> {
    if let Some(e) = state.truncation_error() {
        return Err(e.into());
    }
    Ok(())
}

/// Recovery for a process recurrent under the objective measure: the unique
/// tuple at `beta_bar`.
pub fn recover_recurrent(model: &MarketModel, tol: &Tolerances) -> Result<RecoveryResult, RecoveryError> {
    let bb = find_beta_bar(model, tol)?;
    if bb.case == BetaBarCase::WindowAtBetaBar {
        return Err(RecoveryError::CaseTwoDetected {
            beta_bar: bb.value,
            m: bb.window.0,
            big_m: bb.window.1,
        });
    }
    // The refined value can sit a hair above the last nonempty bisection point.
    let mut state = WindowState::compute(model, bb.value, tol)?;
    if window_bounds(&state, tol).is_none() {
        state = WindowState::compute(model, bb.bracket.0, tol)?;
    }
    truncation_ok(&state)?;
    let (m, big_m) = window_bounds(&state, tol).ok_or(SturmError::EmptyWindow { lambda: state.lambda })?;
    // At beta_bar the only positive solution is principal on both sides.
    let (l, r) = state.profiles().ok_or(SturmError::EmptyWindow { lambda: state.lambda })?;
    let kink = l.slope - r.slope;
    let tuple = principal_join(model, state.lambda, l, r)?;
    let report = classify_boundaries(model, &tuple, tol)?;
    if report.verdict != Verdict::Recurrent {
        return Err(RecoveryError::NotRecurrentUnderSelection {
            lambda: tuple.lambda,
            z: tuple.z,
            verdict: report.verdict,
        });
    }
    let adm = check_admissible(model, &tuple, tol)?;
    if !adm.is_admissible {
        return Err(RecoveryError::SelectedTupleInadmissible {
            lambda: tuple.lambda,
            z: tuple.z,
        });
    }
    let residual = tuple.residual(model)?;
    RecoveryResult::build(
        model,
        &tuple,
        SelectionRule::Recurrent,
        report,
        Diagnostics {
            beta_bar: Some(bb),
            window: (m, big_m),
            admissibility: vec![adm],
            residual,
            kink,
        },
    )
}

/// Window at a user-supplied `beta`, failing with `BetaAboveBetaBar` when empty.
fn known_beta_window(
    model: &MarketModel,
    beta: f64,
    tol: &Tolerances,
) -> Result<(WindowState, (f64, f64), Option<BetaBar>), RecoveryError> {
    let state = WindowState::compute(model, beta, tol)?;
    match window_bounds(&state, tol) {
        Some(w) => {
            truncation_ok(&state)?;
            Ok((state, w, find_beta_bar(model, tol).ok()))
        }
        None => {
            let bb = find_beta_bar(model, tol)?;
            Err(RecoveryError::BetaAboveBetaBar {
                beta,
                beta_bar: bb.value,
            })
        }
    }
}

/// Recovery with known `beta` when exactly one endpoint tuple is admissible.
pub fn recover_transient_unique(
    model: &MarketModel,
    beta: f64,
    tol: &Tolerances,
) -> Result<RecoveryResult, RecoveryError> {
    let (state, (m, big_m), bb) = known_beta_window(model, beta, tol)?;
    let t_max = tuple_at(model, &state, big_m, tol)?;
    let a_max = check_admissible(model, &t_max, tol)?;
    let point = t_max.is_min_slope;
    let (chosen, reports) = if point {
        // A one-point window has a single endpoint tuple.
        let ok = a_max.is_admissible;
        (ok.then_some(t_max), vec![a_max])
    } else {
        let t_min = tuple_at(model, &state, m, tol)?;
        let a_min = check_admissible(model, &t_min, tol)?;
        match (a_min.is_admissible, a_max.is_admissible) {
            (true, true) => return Err(RecoveryError::BothAdmissible { beta, m, big_m }),
            (false, true) => (Some(t_max), vec![a_min, a_max]),
            (true, false) => (Some(t_min), vec![a_min, a_max]),
            (false, false) => (None, vec![a_min, a_max]),
        }
    };
    let tuple = chosen.ok_or(RecoveryError::NeitherAdmissible { beta, m, big_m })?;
    let report = classify_boundaries(model, &tuple, tol)?;
    let residual = tuple.residual(model)?;
    RecoveryResult::build(
        model,
        &tuple,
        SelectionRule::TransientKnownBetaUniqueAdmissible,
        report,
        Diagnostics {
            beta_bar: bb,
            window: (m, big_m),
            admissibility: reports,
            residual,
            kink: 0.0,
        },
    )
}

/// Recovery with known `beta` and the knowledge that the objective process
/// is not attracted to `side`: `(beta, M_beta)` for the left, `(beta, m_beta)`
/// for the right.
pub fn recover_transient_side(
    model: &MarketModel,
    beta: f64,
    side: Side,
    tol: &Tolerances,
) -> Result<RecoveryResult, RecoveryError> {
    let (state, (m, big_m), bb) = known_beta_window(model, beta, tol)?;
    let z = if side.is_left() { big_m } else { m };
    let tuple = tuple_at(model, &state, z, tol)?;
    let adm = check_admissible(model, &tuple, tol)?;
    if !adm.is_admissible {
        return Err(RecoveryError::SelectedTupleInadmissible { lambda: beta, z });
    }
    let report = classify_boundaries(model, &tuple, tol)?;
    let attracted = if side.is_left() {
        report.attracting_left
    } else {
        report.attracting_right
    };
    match attracted {
        Some(false) => {}
        Some(true) => return Err(RecoveryError::SideNotConfirmed { lambda: beta, z, side }),
        None => {
            let c = if side.is_left() { &report.s_left } else { &report.s_right };
            return Err(BoundaryError::InconclusiveCertificate {
                lambda: beta,
                z,
                side,
                reason: c.reason(),
            }
            .into());
        }
    }
    let residual = tuple.residual(model)?;
    let rule = if side.is_left() {
        SelectionRule::TransientKnownBetaLeftNonAttracted
    } else {
        SelectionRule::TransientKnownBetaRightNonAttracted
    };
    RecoveryResult::build(
        model,
        &tuple,
        rule,
        report,
        Diagnostics {
            beta_bar: bb,
            window: (m, big_m),
            admissibility: vec![adm],
            residual,
            kink: 0.0,
        },
    )
}

/// Reciprocal pricing kernel `e^(beta t) phi(x) / phi(xi)`.
pub fn pricing_kernel_reciprocal(result: &RecoveryResult, x: f64, t: f64) -> Result<f64, RecoveryError> {
    if !(t >= 0.0) {
        return Err(RecoveryError::NegativeTime { t });
    }
    let ln = result.phi.ln_value(x).map_err(|_| {
        let (lo, hi) = result.phi.x_range();
        RecoveryError::OutOfDomain { x, lo, hi }
    })? - result.phi.ln_value(result.xi)?;
    Ok((result.beta * t + ln).exp())
}

/// Sharpe ratio of the numeraire under the recovered GBM measure.
pub fn sharpe_ratio_gbm(r: f64, delta: f64, sigma: f64) -> f64 {
    if r < delta + sigma * sigma / 2.0 {
        sigma + 2.0 * (delta - r) / sigma
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use crate::oracles::{CirParams, GbmParams};

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn sharpe_branches() {
        assert_eq!(sharpe_ratio_gbm(0.05, 0.02, 0.2), 0.0);
        assert!((sharpe_ratio_gbm(0.01, 0.02, 0.2) - 0.3).abs() < 1e-15);
        // r = delta + sigma^2 / 2 exactly.
        assert_eq!(sharpe_ratio_gbm(0.75, 0.25, 1.0), 0.0);
        assert!((sharpe_ratio_gbm(0.5, 0.25, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gbm_recurrent() {
        let m = builtin("gbm").unwrap();
        let res = recover_recurrent(&m, &tol()).unwrap();
        assert_eq!(res.rule, SelectionRule::Recurrent);
        assert_eq!(res.boundary.verdict, Verdict::Recurrent);
        assert!((res.beta - 0.05125).abs() < 1e-8);
        assert!((res.z + 0.25).abs() < 1e-6);
        for (x, d) in res.phi.x.iter().zip(&res.drift) {
            if (1e-3..1e3).contains(x) {
                assert!((d / x - 0.02).abs() < 1e-6, "{x} {d}");
            }
        }
        let k = pricing_kernel_reciprocal(&res, 1.0, 1.0).unwrap();
        assert!((k - res.beta.exp()).abs() < 1e-14);
        assert_eq!(pricing_kernel_reciprocal(&res, 1.0, 0.0).unwrap(), 1.0);
        let back: RecoveryResult = serde_json::from_str(&serde_json::to_string(&res).unwrap()).unwrap();
        assert_eq!(back.recompute_drift(&m).unwrap(), res.drift);
    }

    #[test]
    fn gbm_transient_left_and_both_admissible() {
        let m = builtin("gbm").unwrap();
        let p = GbmParams::default();
        let res = recover_transient_side(&m, 0.05, Side::Left, &tol()).unwrap();
        let want = p.sigma * p.sigma / 2.0 + (p.r - p.delta - p.sigma * p.sigma / 2.0).abs();
        for (x, d) in res.phi.x.iter().zip(&res.drift) {
            if (1e-3..1e3).contains(x) {
                assert!((d / x - want).abs() < 1e-6, "{x} {d}");
            }
        }
        assert!(matches!(
            recover_transient_unique(&m, 0.03, &tol()),
            Err(RecoveryError::BothAdmissible { .. })
        ));
        assert!(matches!(
            recover_transient_side(&m, p.beta_bar() + 0.01, Side::Left, &tol()),
            Err(RecoveryError::BetaAboveBetaBar { .. })
        ));
    }

    #[test]
    fn cir_transient_selects_max_slope() {
        let m = builtin("cir").unwrap();
        let p = CirParams::default();
        let res = recover_transient_unique(&m, 0.02, &tol()).unwrap();
        assert!((res.z - p.big_m(0.02).unwrap()).abs() < 1e-6);
        assert!(matches!(
            recover_transient_side(&m, 0.02, Side::Right, &tol()),
            Err(RecoveryError::SelectedTupleInadmissible { .. })
        ));
    }

    #[test]
    fn cir_recurrent() {
        let m = builtin("cir").unwrap();
        let p = CirParams::default();
        let res = recover_recurrent(&m, &tol()).unwrap();
        assert!((res.beta - p.beta_bar()).abs() < 1e-6);
        assert!(res.diagnostics.kink.abs() < 1e-6, "{}", res.diagnostics.kink);
        let k = p.k();
        for (x, lf) in res.phi.x.iter().zip(&res.phi.ln_f) {
            if (0.005..0.3).contains(x) {
                assert!((lf + k * (x - p.r0)).exp_m1().abs() < 1e-6, "{x}");
            }
        }
        let (alpha, slope, _) = res.linear_drift_fit(0.005, 0.3).unwrap();
        assert!((-slope - p.recovered_speed()).abs() < 1e-6, "{slope}");
        assert!((alpha / -slope - p.recovered_level()).abs() < 1e-6);
    }

    #[test]
    fn appendix_f_refuses_recurrent_recovery() {
        let m = builtin("appendix_f").unwrap();
        assert!(matches!(
            recover_recurrent(&m, &tol()),
            Err(RecoveryError::CaseTwoDetected { .. })
        ));
    }
}
