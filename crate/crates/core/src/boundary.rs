//! Boundary behavior of induced diffusions: attraction via the scale measure
//! and explosion via Feller's test.
//!
//! Improper integrals toward a boundary are split into level bands (the
//! regions between successive truncation edges) and certified from the band
//! integrals. For a tuple `(lambda, z)` with `h_z = h_P (1 + eps S_P)` on one
//! side (`h_P` principal there, `eps >= 0`):
//!
//! * the scale integral toward the boundary is `S_P / (1 + eps S_P)`, which is
//!   infinite when `eps = 0` (principal solutions are recessive);
//! * the Feller integral `int m(y) S((y, boundary)) dy` equals
//!   `int m_P (1/eps + S_P)` in terms of the principal data.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Chart, MarketModel};
use crate::quad::{ln_add, ln_sub, ln_sum_exp};
use crate::sturm::{
    endpoint_tuple, principal_profile, tuple_from_profiles, CandidateTuple, Frontier, Profile, Side, SideOutcome,
    SturmError, Tolerances, WindowState,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundaryError {
    #[error(transparent)]
    Sturm(#[from] SturmError),
    #[error("{side} boundary of (lambda = {lambda}, z = {z}) could not be certified: {reason}")]
    InconclusiveCertificate {
        lambda: f64,
        z: f64,
        side: Side,
        reason: String,
    },
}

/// Verdict on an improper integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    Converged {
        /// `ln` of the integral including the estimated tail.
        ln_value: f64,
        /// `ln` of the geometric tail estimate beyond the last band.
        ln_tail: f64,
        levels: u32,
    },
    Diverged {
        rule: DivergenceRule,
        levels: u32,
    },
    Inconclusive {
        reason: String,
        levels: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceRule {
    /// The last four band integrals do not decrease.
    NonDecreasingBands,
    /// Band ratios approach one geometrically fast, so bands tend to a
    /// positive limit.
    BandsTendToPositiveLimit,
    /// The integrand stays above `C / distance` on the last four bands.
    LogDensityBound,
    /// The lower bounds of the integrand on the last four bands settle
    /// geometrically to a finite limit, so it stays above `C / distance`.
    SettlingDensityBound,
    /// The boundary is non-attracting; the Feller integral dominates a
    /// multiple of the divergent scale integral.
    ScaleDivergent,
}

impl Certificate {
    pub fn is_converged(&self) -> bool {
        matches!(self, Certificate::Converged { .. })
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self, Certificate::Diverged { .. })
    }

    pub fn is_inconclusive(&self) -> bool {
        matches!(self, Certificate::Inconclusive { .. })
    }

    /// `Some(true)` for converged, `Some(false)` for diverged.
    pub fn finite(&self) -> Option<bool> {
        match self {
            Certificate::Converged { .. } => Some(true),
            Certificate::Diverged { .. } => Some(false),
            Certificate::Inconclusive { .. } => None,
        }
    }

    pub fn reason(&self) -> String {
        match self {
            Certificate::Inconclusive { reason, .. } => reason.clone(),
            _ => String::new(),
        }
    }
}

/// Relative size of the geometric tail required for convergence.
pub const TAIL_REL: f64 = 1e-10;

/// Certifies `sum_n exp(ln_pieces[n])` from band integrals ordered from
/// `xi` outward. `floors[n]`, when given, is a lower bound of the log
/// integrand on band `n` normalized so that a non-decreasing floor implies
/// divergence.
pub fn certify(ln_pieces: &[f64], floors: Option<&[f64]>) -> Certificate {
    let levels = ln_pieces.len() as u32;
    if ln_pieces.len() < 4 {
        return Certificate::Inconclusive {
            reason: "fewer than four bands".into(),
            levels,
        };
    }
    if ln_pieces.iter().any(|p| p.is_nan()) {
        return Certificate::Inconclusive {
            reason: "non-finite band integral".into(),
            levels,
        };
    }
    let n = ln_pieces.len();
    let lr: Vec<f64> = ln_pieces.windows(2).map(|w| w[1] - w[0]).collect();
    let last3 = &lr[lr.len() - 3..];
    let total = ln_sum_exp(ln_pieces);

    // Geometric decay.
    let shrinking = last3.iter().all(|&r| r <= 0.99f64.ln());
    // Quadrature noise in fast-decaying bands is tolerated in proportion
    // to the decay rate.
    let steady = last3.windows(2).all(|w| w[1] <= w[0] + 1.02f64.ln().max(0.1 * w[0].abs()));
    let mut pending = None;
    if shrinking && steady {
        let rho = last3.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        let ln_tail = if ln_pieces[n - 1] == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            ln_pieces[n - 1] + (rho / (1.0 - rho)).ln()
        };
        if ln_tail - total <= TAIL_REL.ln() {
            return Certificate::Converged {
                ln_value: ln_add(total, ln_tail),
                ln_tail,
                levels,
            };
        }
        pending = Some(format!(
            "bands decay geometrically but the tail is {:.3e} of the total",
            (ln_tail - total).exp()
        ));
    }
    if last3.iter().all(|&r| r >= (1.0 - 1e-6f64).ln()) {
        return Certificate::Diverged {
            rule: DivergenceRule::NonDecreasingBands,
            levels,
        };
    }
    let a = last3.iter().map(|r| r.abs()).collect::<Vec<_>>();
    if a[2] <= 0.01 && a[1] <= 0.75 * a[0] && a[2] <= 0.75 * a[1] {
        return Certificate::Diverged {
            rule: DivergenceRule::BandsTendToPositiveLimit,
            levels,
        };
    }
    if let Some(f) = floors {
        if f.len() >= 4 && f[f.len() - 4..].windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0)) {
            return Certificate::Diverged {
                rule: DivergenceRule::LogDensityBound,
                levels,
            };
        }
        let d: Vec<f64> = f[f.len().saturating_sub(4)..].windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        if pending.is_none() && d.len() == 3 && d[1] <= 0.75 * d[0] && d[2] <= 0.75 * d[1] && d[0] <= 0.1 {
            return Certificate::Diverged {
                rule: DivergenceRule::SettlingDensityBound,
                levels,
            };
        }
    }
    Certificate::Inconclusive {
        reason: pending.unwrap_or_else(|| "band integrals neither decay geometrically nor stay bounded below".into()),
        levels,
    }
}

/// `ln` of `1 + eps e^{ln_s}` for `eps >= 0`.
fn ln_one_plus(eps: f64, ln_s: f64) -> f64 {
    if eps == 0.0 || ln_s == f64::NEG_INFINITY {
        0.0
    } else {
        ln_add(0.0, eps.ln() + ln_s)
    }
}

/// Correction turning a log-density in `y` into the `alpha = 1` comparison
/// quantity: on the identity chart `ln|x|` is added.
fn floor_shift(chart: Chart, x: f64) -> f64 {
    match chart {
        Chart::Identity => x.abs().max(1.0).ln(),
        _ => 0.0,
    }
}

/// Band integrals of the scale measure of `h_P (1 + eps S_P)`, with floors.
pub fn scale_bands(prof: &Profile, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut pieces = Vec::with_capacity(prof.level as usize);
    let mut floors = Vec::with_capacity(prof.level as usize);
    for n in 1..=prof.level as usize {
        let (i0, i1) = (prof.edges[n - 1], prof.edges[n]);
        let (a, b) = (prof.ln_cum[i0], prof.ln_cum[i1]);
        let d = ln_sub(b, a);
        pieces.push(d - ln_one_plus(eps, a) - ln_one_plus(eps, b));
        let mut floor = f64::INFINITY;
        for i in i0..=i1 {
            let node = &prof.nodes[i];
            let v = node.ln_s() - 2.0 * ln_one_plus(eps, prof.ln_cum[i]) + floor_shift(prof.chart, node.x);
            floor = floor.min(v);
        }
        floors.push(floor);
    }
    (pieces, floors)
}

/// Band integrals of the Feller integrand `m_P (1/eps + S_P)`, with floors.
pub fn feller_bands(prof: &Profile, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let pieces = prof.ln_feller_pieces(eps);
    let ln_inv = -eps.ln();
    let floors = (1..=prof.level as usize)
        .map(|n| {
            (prof.edges[n - 1]..=prof.edges[n])
                .map(|i| {
                    let node = &prof.nodes[i];
                    node.ln_m() + ln_add(ln_inv, prof.ln_cum[i]) + floor_shift(prof.chart, node.x)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    (pieces, floors)
}

/// Deepest level used when certifying a side that is not yet decaying.
pub fn certify_max_level(model: &MarketModel) -> u32 {
    model.truncation.max_level + 20
}

/// Deepest level used while bands decay geometrically toward the tail
/// criterion. Near a finite nonzero endpoint the level is limited so that
/// `x - c` keeps about forty bits relative to `c`.
pub fn geometric_max_level(model: &MarketModel, side: Side) -> u32 {
    let cap = model.truncation.max_level + 120;
    let e = if side.is_left() { model.c } else { model.d };
    if e.is_finite() && e != 0.0 {
        let room = ((model.xi - e).abs() / e.abs()).log2() + 40.0;
        cap.min(room.max(0.0) as u32).max(certify_max_level(model))
    } else {
        cap
    }
}

/// Additional bands after which a geometric tail with the decay of the last
/// three bands drops below `TAIL_REL` of the total.
fn geometric_levels_needed(ln_pieces: &[f64]) -> Option<u32> {
    let n = ln_pieces.len();
    if n < 4 {
        return None;
    }
    let lr: Vec<f64> = ln_pieces[n - 4..].windows(2).map(|w| w[1] - w[0]).collect();
    let ln_rho = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(ln_rho <= 0.99f64.ln()) {
        return None;
    }
    let rho = ln_rho.exp();
    let total = ln_sum_exp(ln_pieces);
    let ln_tail = ln_pieces[n - 1] + (rho / (1.0 - rho)).ln();
    let excess = ln_tail - total - TAIL_REL.ln();
    (excess > 0.0).then(|| (excess / -ln_rho).ceil() as u32 + 1)
}

const DEEPEN_STEP: u32 = 6;

/// Scale and Feller certificates for one side of a tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideCertificates {
    pub scale: Certificate,
    /// Feller integral toward the boundary; finite means explosion.
    pub feller: Certificate,
}

/// Certifies one side, integrating the principal solution to deeper levels
/// while the verdict is inconclusive.
fn side_certificates(
    model: &MarketModel,
    prof: &Arc<Profile>,
    eps: f64,
    want_feller: bool,
    tol: &Tolerances,
) -> Result<SideCertificates, SturmError> {
    let eps = eps.max(0.0);
    let mut prof = prof.clone();
    let base_cap = certify_max_level(model);
    let geo_cap = geometric_max_level(model, prof.side);
    loop {
        let (sp, sf) = scale_bands(&prof, eps);
        let scale = certify(&sp, Some(&sf));
        let mut need = if scale.is_inconclusive() { geometric_levels_needed(&sp) } else { Some(0) };
        let feller = if scale.is_diverged() {
            Certificate::Diverged {
                rule: DivergenceRule::ScaleDivergent,
                levels: prof.level,
            }
        } else if want_feller && eps > 0.0 {
            let (fp, ff) = feller_bands(&prof, eps);
            let c = certify(&fp, Some(&ff));
            // The Feller integrand contains S_P, so an unsettled scale
            // integral decides the depth first.
            if c.is_inconclusive() && !scale.is_inconclusive() {
                need = geometric_levels_needed(&fp);
            }
            c
        } else {
            Certificate::Inconclusive {
                reason: "scale integral not certified".into(),
                levels: prof.level,
            }
        };
        let done = !scale.is_inconclusive() && (!want_feller || !feller.is_inconclusive());
        // Geometric decay that only needs more bands may go deeper.
        let cap = if need.is_some() { geo_cap } else { base_cap };
        if done || prof.level >= cap {
            return Ok(SideCertificates { scale, feller });
        }
        let step = need.unwrap_or(0).max(DEEPEN_STEP);
        let next = (prof.level + step).min(cap);
        match principal_profile(model, prof.lambda, prof.side, next, tol)? {
            SideOutcome::Principal(p) => prof = Arc::new(p),
            SideOutcome::Zero { x } => {
                let reason = format!("principal solution vanishes at x = {x} at level {next}");
                return Ok(SideCertificates {
                    scale: Certificate::Inconclusive {
                        reason: reason.clone(),
                        levels: next,
                    },
                    feller: Certificate::Inconclusive { reason, levels: next },
                });
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Recurrent,
    TransientLeft,
    TransientRight,
    TransientBoth,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub lambda: f64,
    pub z: f64,
    /// `S((c, xi])`.
    pub s_left: Certificate,
    /// `S([xi, d))`.
    pub s_right: Certificate,
    pub attracting_left: Option<bool>,
    pub attracting_right: Option<bool>,
    pub verdict: Verdict,
}

fn verdict(left: Option<bool>, right: Option<bool>) -> Verdict {
    match (left, right) {
        (Some(false), Some(false)) => Verdict::Recurrent,
        (Some(true), Some(false)) => Verdict::TransientLeft,
        (Some(false), Some(true)) => Verdict::TransientRight,
        (Some(true), Some(true)) => Verdict::TransientBoth,
        _ => Verdict::Unknown,
    }
}

/// `s(x) = (h(xi)/h(x))^2 exp(-int_xi^x 2k/sigma^2)`.
pub fn scale_density(model: &MarketModel, h: &CandidateTuple, x: f64) -> Result<f64, BoundaryError> {
    Ok(h.scale_density(model, x)?)
}

/// Attraction of both boundaries for the diffusion induced by `h`.
pub fn classify_boundaries(model: &MarketModel, h: &CandidateTuple, tol: &Tolerances) -> Result<BoundaryReport, BoundaryError> {
    let (l, r) = rayon::join(
        || side_certificates(model, &h.left, h.eps_left, false, tol),
        || side_certificates(model, &h.right, h.eps_right, false, tol),
    );
    let (l, r) = (l?, r?);
    let attracting_left = l.scale.finite();
    let attracting_right = r.scale.finite();
    Ok(BoundaryReport {
        lambda: h.lambda,
        z: h.z,
        s_left: l.scale,
        s_right: r.scale,
        attracting_left,
        attracting_right,
        verdict: verdict(attracting_left, attracting_right),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub lambda: f64,
    pub z: f64,
    pub explodes_left: bool,
    pub explodes_right: bool,
    pub left: SideCertificates,
    pub right: SideCertificates,
    pub is_admissible: bool,
}

/// Feller's explosion test on both sides of the diffusion induced by `h`.
/// The tuple is admissible when neither side explodes.
pub fn check_admissible(model: &MarketModel, h: &CandidateTuple, tol: &Tolerances) -> Result<AdmissibilityReport, BoundaryError> {
    let (l, r) = rayon::join(
        || side_certificates(model, &h.left, h.eps_left, true, tol),
        || side_certificates(model, &h.right, h.eps_right, true, tol),
    );
    let (l, r) = (l?, r?);
    let mut explodes = [false; 2];
    for (k, (side, c)) in [(Side::Left, &l), (Side::Right, &r)].into_iter().enumerate() {
        match c.feller.finite() {
            Some(f) => explodes[k] = f,
            None => {
                return Err(BoundaryError::InconclusiveCertificate {
                    lambda: h.lambda,
                    z: h.z,
                    side,
                    reason: if c.scale.is_inconclusive() {
                        c.scale.reason()
                    } else {
                        c.feller.reason()
                    },
                })
            }
        }
    }
    Ok(AdmissibilityReport {
        lambda: h.lambda,
        z: h.z,
        explodes_left: explodes[0],
        explodes_right: explodes[1],
        left: l,
        right: r,
        is_admissible: !explodes[0] && !explodes[1],
    })
}

/// Result of the interior spot-checks at one `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteriorCheck {
    pub lambda: f64,
    pub z: Vec<f64>,
    pub admissible: Vec<bool>,
    /// `adm_min && adm_max`.
    pub inferred: bool,
}

impl InteriorCheck {
    pub fn consistent(&self) -> bool {
        self.admissible.iter().all(|&a| a == self.inferred)
    }
}

/// Frontier with admissibility of both endpoint tuples and interior
/// spot-checks at the quartiles of each window.
pub fn admissible_frontier(
    model: &MarketModel,
    lambdas: &[f64],
    tol: &Tolerances,
) -> Result<(Frontier, Vec<InteriorCheck>), BoundaryError> {
    type Row = (Option<(f64, f64)>, Option<bool>, Option<bool>, Option<InteriorCheck>);
    let rows: Vec<Result<Row, BoundaryError>> = lambdas
        .par_iter()
        .map(|&lambda| -> Result<Row, BoundaryError> {
            let st = WindowState::compute(model, lambda, tol)?;
            let Some((m, big_m)) = st.window(tol.ztol).bounds() else {
                return Ok((None, None, None, None));
            };
            if let Some(e) = truncation_error(&st) {
                return Err(e.into());
            }
            let (l, r) = st.profiles().expect("nonempty window has both profiles");
            let hi = endpoint_tuple(model, &st, true, tol)?;
            let lo = endpoint_tuple(model, &st, false, tol)?;
            let adm_max = check_admissible(model, &hi, tol)?.is_admissible;
            let adm_min = check_admissible(model, &lo, tol)?.is_admissible;
            let inferred = adm_min && adm_max;
            let mut zs = Vec::new();
            let mut adm = Vec::new();
            if big_m - m > 10.0 * tol.ztol * (big_m.abs() + m.abs()).max(1.0) {
                for q in [0.25, 0.5, 0.75] {
                    let z = m + q * (big_m - m);
                    let t = tuple_from_profiles(model, lambda, z, l.clone(), r.clone(), tol.ztol)?;
                    zs.push(z);
                    adm.push(check_admissible(model, &t, tol)?.is_admissible);
                }
            }
            let check = InteriorCheck {
                lambda,
                z: zs,
                admissible: adm,
                inferred,
            };
            Ok((Some((m, big_m)), Some(adm_min), Some(adm_max), Some(check)))
        })
        .collect();
    let mut fr = Frontier {
        lambdas: lambdas.to_vec(),
        m: vec![],
        big_m: vec![],
        adm_min: vec![],
        adm_max: vec![],
        oracle_m: None,
        oracle_big_m: None,
        beta_bar: None,
    };
    let mut checks = Vec::new();
    for row in rows {
        let (w, amin, amax, check) = row?;
        fr.m.push(w.map(|w| w.0));
        fr.big_m.push(w.map(|w| w.1));
        fr.adm_min.push(amin);
        fr.adm_max.push(amax);
        checks.extend(check);
    }
    Ok((fr, checks))
}

fn truncation_error(st: &WindowState) -> Option<SturmError> {
    if st.converged() {
        return None;
    }
    Some(SturmError::TruncationNotConverged {
        side: if matches!(st.left, crate::sturm::SideSolve::Principal { converged: false, .. }) {
            Side::Left
        } else {
            Side::Right
        },
        lambda: st.lambda,
        level: 0,
        delta: f64::NAN,
    })
}

/// State-space position of the level-`level` edge on `side`.
pub fn band_edge(model: &MarketModel, side: Side, level: u32) -> f64 {
    model.chart.x(model.chart.edge_y(side.is_left(), level, model.xi))
}
