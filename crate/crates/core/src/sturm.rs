//! Positive solutions of `1/2 sigma^2 h'' + k h' - r h = -lambda h`.
//!
//! Everything is computed in the chart coordinate `y` of the model (see
//! [`Chart`]), where the log-derivative `omega = h_y / h` obeys the Riccati
//! equation `omega' = -omega^2 - P omega + Q` with
//! `P = 2 k X' / sigma^2 - X'' / X'` and `Q = 2 (r - lambda) X'^2 / sigma^2`.
//! Near a pole of `omega` (a zero of `h_y`... or of `h`) the reciprocal
//! `v = 1 / omega` is integrated instead, `v' = 1 + P v - Q v^2`; a sign
//! change of `v` is a zero of `h`.
//!
//! The extreme slopes `M_lambda`, `m_lambda` are the slopes at `xi` of the
//! principal (recessive) solutions at the left and right boundary. These are
//! computed by integrating from a truncation edge toward `xi`, which is the
//! stable direction for them, starting from the frozen-coefficient root of
//! the Riccati equation at the edge. Every other positive solution is a
//! combination of a principal solution and the scale function:
//! on the left `h_z = h_M (1 + (M - z) S_M((x, xi]))`, on the right
//! `h_z = h_m (1 + (z - m) S_m([xi, x)))`.

use std::f64::consts::LN_2;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Chart, MarketModel, ModelError};
use crate::ode::{Dopri5, Dopri5Options, OdeError, Step};
use crate::quad::{ln_add, ln_integral_hermite, ln_sub, GAUSS_LEGENDRE_8};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SturmError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("integration toward the {side} boundary failed: {source}")]
    Ode { side: Side, source: OdeError },
    #[error("{side} slope did not settle under truncation refinement at lambda = {lambda} (last change {delta:e} at level {level})")]
    TruncationNotConverged {
        side: Side,
        lambda: f64,
        level: u32,
        delta: f64,
    },
    #[error("no positive solution found for any lambda >= {lambda_min}")]
    NoPositiveSolutionFound { lambda_min: f64 },
    #[error("(lambda = {lambda}, z = {z}) is not a candidate: the solution vanishes at x = {x_star}")]
    NotACandidate { lambda: f64, z: f64, x_star: f64 },
    #[error("the positivity window is empty at lambda = {lambda}")]
    EmptyWindow { lambda: f64 },
    #[error("x = {x} is outside the computed grid [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn is_left(self) -> bool {
        self == Side::Left
    }

    /// +1 when moving away from `xi` increases `y`.
    fn outward(self) -> f64 {
        match self {
            Side::Left => -1.0,
            Side::Right => 1.0,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

/// Numerical tolerances shared by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub ztol: f64,
    pub lambda_tol: f64,
    pub residual_tol: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            ztol: 1e-9,
            lambda_tol: 1e-9,
            residual_tol: 1e-6,
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 2_000_000,
        }
    }
}

impl Tolerances {
    fn ode(&self) -> Dopri5Options {
        Dopri5Options {
            rtol: self.rtol,
            atol: self.atol,
            max_steps: self.max_steps,
            ..Dopri5Options::default()
        }
    }
}

// Mode switching thresholds for the reciprocal form.
const TO_RECIPROCAL: f64 = 2.0;
const TO_DIRECT: f64 = 1.0;
const GUARD: f64 = 1e6;

/// Coefficient data at one point of the chart.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Local {
    x: f64,
    p: f64,
    q: f64,
    /// `2 k X' / sigma^2`, the derivative of `G` in `y`.
    pk: f64,
    ln_dx: f64,
    ln_sig2: f64,
}

fn local(model: &MarketModel, lambda: f64, y: f64) -> Result<Local, String> {
    let chart = model.chart;
    let x = chart.x(y);
    if !model.contains(x) {
        return Err(format!("x = {x} left the interval"));
    }
    let c = model
        .coeffs_unchecked(x)
        .map_err(|(name, e)| format!("coefficient {name}: {e}"))?;
    let sig2 = c.sigma * c.sigma;
    if !(sig2 > 0.0) {
        return Err(format!("sigma vanishes at x = {x}"));
    }
    let ln_dx = chart.ln_dx(y);
    let dx = ln_dx.exp();
    let pk = 2.0 * c.k() * dx / sig2;
    Ok(Local {
        x,
        p: pk - chart.curvature(y),
        q: 2.0 * (c.r - lambda) * dx * dx / sig2,
        pk,
        ln_dx,
        ln_sig2: sig2.ln(),
    })
}

/// One point of a computed solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub y: f64,
    pub x: f64,
    pub ln_h: f64,
    /// `d ln h / dy`.
    pub omega: f64,
    /// `G(y) = int_xi^x 2k/sigma^2 dx`.
    pub g: f64,
    pub p: f64,
    pub q: f64,
    pub pk: f64,
    pub ln_dx: f64,
    pub ln_sig2: f64,
}

impl Node {
    /// `ln` of the scale density with respect to `y`.
    pub fn ln_s(&self) -> f64 {
        -2.0 * self.ln_h - self.g + self.ln_dx
    }

    /// `d ln s_y / dy`.
    pub fn dln_s(&self) -> f64 {
        -2.0 * self.omega - self.p
    }

    /// `ln` of the speed density with respect to `y`.
    pub fn ln_m(&self) -> f64 {
        LN_2 + 2.0 * self.ln_dx - self.ln_sig2 - self.ln_s()
    }

    /// `d omega / dy` from the Riccati equation.
    pub fn domega(&self) -> f64 {
        -self.omega * self.omega - self.p * self.omega + self.q
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Direct,
    Reciprocal,
}

/// Outcome of a Riccati run between two chart points.
struct Run {
    nodes: Vec<Node>,
    /// Node indices of the requested breakpoints, in order of arrival.
    marks: Vec<usize>,
    /// First zero of `h`, if the run was stopped by one.
    zero: Option<f64>,
    /// Log-derivative at the end of the run (in `y`).
    omega_end: f64,
}

fn node_from(model: &MarketModel, lambda: f64, y: f64, mode: Mode, s: &[f64; 3]) -> Result<Node, String> {
    let l = local(model, lambda, y)?;
    let (omega, ln_h) = match mode {
        Mode::Direct => (s[0], s[1]),
        Mode::Reciprocal => (1.0 / s[0], s[1] + s[0].abs().ln()),
    };
    Ok(Node {
        y,
        x: l.x,
        ln_h,
        omega,
        g: s[2],
        p: l.p,
        q: l.q,
        pk: l.pk,
        ln_dx: l.ln_dx,
        ln_sig2: l.ln_sig2,
    })
}

/// Integrates the Riccati system from `y0` through the `stops` (monotone in
/// one direction), recording nodes when `record` is set.
///
/// The state is `[omega, ln h, G]` in direct mode and `[v, ln|h_y|, G]` in
/// reciprocal mode; `ln h` and `G` start at zero.
#[allow(clippy::too_many_arguments)]
fn run_riccati(
    model: &MarketModel,
    lambda: f64,
    y0: f64,
    omega0: f64,
    stops: &[f64],
    record: bool,
    stop_at_zero: bool,
    tol: &Tolerances,
    side: Side,
) -> Result<Run, SturmError> {
    let ode_err = |source: OdeError| SturmError::Ode { side, source };
    let mut mode = if omega0.abs() > TO_RECIPROCAL {
        Mode::Reciprocal
    } else {
        Mode::Direct
    };
    let mut state = match mode {
        Mode::Direct => [omega0, 0.0, 0.0],
        Mode::Reciprocal => [1.0 / omega0, omega0.abs().ln(), 0.0],
    };
    let mut nodes = Vec::new();
    let mut marks = Vec::new();
    let first = node_from(model, lambda, y0, mode, &state)
        .map_err(|message| ode_err(OdeError::Rhs { t: y0, message }))?;
    if record {
        nodes.push(first);
    }
    let mut t = y0;
    let mut omega_end = omega0;
    for &stop in stops {
        while t != stop {
            let mode_now = mode;
            let mut rhs = move |yy: f64, s: &[f64; 3]| -> Result<[f64; 3], OdeError> {
                let l = local(model, lambda, yy).map_err(|message| OdeError::Rhs { t: yy, message })?;
                match mode_now {
                    Mode::Direct => {
                        let w = s[0];
                        if w.abs() > GUARD {
                            return Err(OdeError::Rhs {
                                t: yy,
                                message: "log-derivative pole".into(),
                            });
                        }
                        Ok([-w * w - l.p * w + l.q, w, l.pk])
                    }
                    Mode::Reciprocal => {
                        let v = s[0];
                        if v.abs() > GUARD {
                            return Err(OdeError::Rhs {
                                t: yy,
                                message: "reciprocal pole".into(),
                            });
                        }
                        Ok([1.0 + l.p * v - l.q * v * v, -l.p + l.q * v, l.pk])
                    }
                }
            };
            let mut solver = Dopri5::new(&mut rhs, t, state, tol.ode()).map_err(ode_err)?;
            // Run until the stop or until the representation should change.
            let mut switch = false;
            while solver.t != stop && !switch {
                let step: Step<3> = solver.step_to(stop).map_err(ode_err)?;
                if mode == Mode::Reciprocal && step.y0[0] != 0.0 && step.y0[0].signum() != step.y1[0].signum() {
                    let y_star = bisect_zero(&step);
                    if stop_at_zero {
                        if record {
                            push_subnodes(model, lambda, mode, &step, step.t0, y_star, &mut nodes)
                                .map_err(|message| ode_err(OdeError::Rhs { t: y_star, message }))?;
                        }
                        return Ok(Run {
                            nodes,
                            marks,
                            zero: Some(model.chart.x(y_star)),
                            omega_end: f64::NAN,
                        });
                    }
                }
                if record {
                    push_subnodes(model, lambda, mode, &step, step.t0, step.t1, &mut nodes)
                        .map_err(|message| ode_err(OdeError::Rhs { t: step.t1, message }))?;
                }
                let a = step.y1[0].abs();
                switch = match mode {
                    Mode::Direct => a > TO_RECIPROCAL,
                    Mode::Reciprocal => a > TO_DIRECT,
                };
            }
            t = solver.t;
            state = solver.y;
            if switch {
                state = match mode {
                    Mode::Direct => {
                        let w = state[0];
                        mode = Mode::Reciprocal;
                        [1.0 / w, w.abs().ln() + state[1], state[2]]
                    }
                    Mode::Reciprocal => {
                        let v = state[0];
                        mode = Mode::Direct;
                        [1.0 / v, state[1] + v.abs().ln(), state[2]]
                    }
                };
            }
        }
        if record {
            marks.push(nodes.len() - 1);
        }
        omega_end = match mode {
            Mode::Direct => state[0],
            Mode::Reciprocal => 1.0 / state[0],
        };
    }
    Ok(Run {
        nodes,
        marks,
        zero: None,
        omega_end,
    })
}

/// Locates the sign change of `v` inside a step to machine precision.
fn bisect_zero(step: &Step<3>) -> f64 {
    let (mut a, mut b) = (step.t0, step.t1);
    let sa = step.y0[0].signum();
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            break;
        }
        if step.eval(mid)[0].signum() == sa {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// Adds nodes on `(ta, tb]` of an accepted step, subdividing so that
/// log-densities and the coordinate change moderately between nodes.
fn push_subnodes(
    model: &MarketModel,
    lambda: f64,
    mode: Mode,
    step: &Step<3>,
    ta: f64,
    tb: f64,
    nodes: &mut Vec<Node>,
) -> Result<(), String> {
    let end = if tb == step.t1 {
        node_from(model, lambda, tb, mode, &step.y1)?
    } else {
        node_from(model, lambda, tb, mode, &step.eval(tb))?
    };
    let start = *nodes.last().expect("run starts with a node");
    let span = (tb - ta).abs();
    let dls = (end.ln_s() - start.ln_s()).abs();
    let dlm = (end.ln_m() - start.ln_m()).abs();
    let dy = span / (0.25 * start.y.abs().max(1.0));
    let dw = span * start.omega.abs().max(end.omega.abs()).min(1e3);
    let pieces = dls.max(dlm).max(dy).max(dw).ceil().clamp(1.0, 64.0) as usize;
    for i in 1..pieces {
        let t = ta + (tb - ta) * i as f64 / pieces as f64;
        nodes.push(node_from(model, lambda, t, mode, &step.eval(t))?);
    }
    nodes.push(end);
    Ok(())
}

/// Roots of `omega^2 + P omega - Q = 0`, or `None` when they are complex.
fn frozen_roots(p: f64, q: f64) -> Option<(f64, f64)> {
    let disc = p * p + 4.0 * q;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = -0.5 * (p + if p >= 0.0 { sq } else { -sq });
    if t == 0.0 {
        return Some((0.0, 0.0));
    }
    let (a, b) = (t, -q / t);
    Some((a.min(b), a.max(b)))
}

/// The principal solution at one boundary, on the truncated half-interval
/// between `xi` and the level-`level` edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub side: Side,
    pub chart: Chart,
    pub lambda: f64,
    pub level: u32,
    /// `h'(xi) / h(xi)` in the state variable.
    pub slope: f64,
    /// Nodes ordered from `xi` outward; `ln_h` and `g` vanish at `xi`.
    pub nodes: Vec<Node>,
    /// `edges[n]` is the node index of the level-`n` edge.
    pub edges: Vec<usize>,
    /// `ln S` from `xi` to each node.
    pub ln_cum: Vec<f64>,
    /// `ln` of the speed integral over each node interval.
    pub ln_speed: Vec<f64>,
    /// The frozen-coefficient roots at the edge were complex, so the
    /// solution may still oscillate beyond the edge.
    pub oscillatory_edge: bool,
}

/// Result of integrating one side at one truncation level.
#[derive(Debug, Clone, PartialEq)]
pub enum SideOutcome {
    Principal(Profile),
    /// The solution from the edge vanishes at `x` before reaching `xi`.
    Zero { x: f64 },
}

/// Inward integration of the principal solution from the level-`level`
/// edge on `side` to `xi`.
pub fn principal_profile(
    model: &MarketModel,
    lambda: f64,
    side: Side,
    level: u32,
    tol: &Tolerances,
) -> Result<SideOutcome, SturmError> {
    let chart = model.chart;
    let left = side.is_left();
    let y_edge = chart.edge_y(left, level, model.xi);
    let l = local(model, lambda, y_edge).map_err(|message| SturmError::Ode {
        side,
        source: OdeError::Rhs { t: y_edge, message },
    })?;
    let disc = l.p * l.p + 4.0 * l.q;
    let oscillatory_edge = disc < -1e-12 * (l.p * l.p + 4.0 * l.q.abs());
    let omega0 = match frozen_roots(l.p, l.q) {
        Some((lo, hi)) => {
            if left {
                hi
            } else {
                lo
            }
        }
        None => -0.5 * l.p,
    };
    let stops: Vec<f64> = (0..level).rev().map(|n| chart.edge_y(left, n, model.xi)).collect();
    let run = run_riccati(model, lambda, y_edge, omega0, &stops, true, true, tol, side)?;
    if let Some(x) = run.zero {
        return Ok(SideOutcome::Zero { x });
    }
    let mut nodes = run.nodes;
    nodes.reverse();
    let total = nodes.len();
    // marks[j] is the node of level level-1-j (before reversal); the start
    // node is the level-`level` edge.
    let mut edges = vec![0usize; level as usize + 1];
    edges[level as usize] = total - 1;
    for (j, &mark) in run.marks.iter().enumerate() {
        let n = level as usize - 1 - j;
        edges[n] = total - 1 - mark;
    }
    debug_assert_eq!(edges[0], 0);
    let base_h = nodes[0].ln_h;
    let base_g = nodes[0].g;
    for node in nodes.iter_mut() {
        node.ln_h -= base_h;
        node.g -= base_g;
    }
    let slope = nodes[0].omega * (-nodes[0].ln_dx).exp();
    let (ln_cum, ln_speed) = accumulate(&nodes, side);
    Ok(SideOutcome::Principal(Profile {
        side,
        chart,
        lambda,
        level,
        slope,
        nodes,
        edges,
        ln_cum,
        ln_speed,
        oscillatory_edge,
    }))
}

/// Cumulative scale integral from `xi` and per-interval speed integrals.
fn accumulate(nodes: &[Node], side: Side) -> (Vec<f64>, Vec<f64>) {
    let dir = side.outward();
    let mut ln_cum = Vec::with_capacity(nodes.len());
    let mut ln_speed = Vec::with_capacity(nodes.len().saturating_sub(1));
    ln_cum.push(f64::NEG_INFINITY);
    for w in nodes.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let h = (b.y - a.y).abs();
        let piece = ln_integral_hermite(a.ln_s(), dir * a.dln_s(), b.ln_s(), dir * b.dln_s(), h);
        let last = *ln_cum.last().unwrap();
        ln_cum.push(ln_add(last, piece));
        ln_speed.push(ln_integral_loglinear(a.ln_m(), b.ln_m(), h));
    }
    (ln_cum, ln_speed)
}

/// `ln int_0^h exp(a + (b - a) t / h) dt`.
pub fn ln_integral_loglinear(a: f64, b: f64, h: f64) -> f64 {
    let d = b - a;
    if d.abs() < 1e-8 {
        return a + h.ln() + d / 2.0;
    }
    let (hi, lo) = if b > a { (b, a) } else { (a, b) };
    ln_sub(hi, lo) + h.ln() - d.abs().ln()
}

impl Profile {
    pub fn total_ln_scale(&self) -> f64 {
        *self.ln_cum.last().unwrap()
    }

    /// `ln` of the scale integral over each level band `[edge_n, edge_{n-1}]`,
    /// for `n = 1..=level`.
    pub fn ln_scale_pieces(&self) -> Vec<f64> {
        (1..=self.level as usize)
            .map(|n| ln_sub(self.ln_cum[self.edges[n]], self.ln_cum[self.edges[n - 1]]))
            .collect()
    }

    /// `ln` of the level-band integrals of `m (1/eps + S)`, the Feller
    /// integrand of the solution `h_P (1 + eps S_P)` on this side.
    pub fn ln_feller_pieces(&self, eps: f64) -> Vec<f64> {
        let ln_inv_eps = -eps.ln();
        let mut out = Vec::with_capacity(self.level as usize);
        for n in 1..=self.level as usize {
            let mut acc = f64::NEG_INFINITY;
            for i in self.edges[n - 1]..self.edges[n] {
                let avg_s = ln_add(self.ln_cum[i], self.ln_cum[i + 1]) - LN_2;
                acc = ln_add(acc, self.ln_speed[i] + ln_add(ln_inv_eps, avg_s));
            }
            out.push(acc);
        }
        out
    }

    /// Truncation edge in the state variable.
    pub fn edge_x(&self) -> f64 {
        self.nodes.last().unwrap().x
    }
}

/// Result of the level-refinement loop on one side.
#[derive(Debug, Clone, PartialEq)]
pub enum SideSolve {
    Principal {
        profile: Arc<Profile>,
        converged: bool,
        /// Change of the slope between the last two levels.
        delta: f64,
    },
    Zero {
        x: f64,
        level: u32,
    },
}

/// Computes the principal solution on `side` at increasing truncation levels
/// until its slope at `xi` settles. Levels at or below the deepest edge where
/// solutions oscillate never count as settled, since zeros may lie further out.
pub fn solve_side(model: &MarketModel, lambda: f64, side: Side, tol: &Tolerances) -> Result<SideSolve, SturmError> {
    let pol = model.truncation;
    // Deepest level whose edge is oscillatory; nothing shallower can settle.
    let deepest_oscillatory = (1..=pol.max_level)
        .rev()
        .find(|&n| {
            let y = model.chart.edge_y(side.is_left(), n, model.xi);
            local(model, lambda, y).is_ok_and(|l| l.p * l.p + 4.0 * l.q < -1e-12 * (l.p * l.p + 4.0 * l.q.abs()))
        });
    let settled = |p: &Profile, delta: f64, level: u32| {
        delta <= pol.tol * p.slope.abs().max(1.0) && !p.oscillatory_edge && deepest_oscillatory.is_none_or(|n| level > n)
    };
    let start = pol.start_level.max(1);
    if let Some(found) = shallow_certified(model, lambda, side, start, tol, &settled)? {
        return Ok(found);
    }
    let mut prev: Option<f64> = None;
    let mut last: Option<(Profile, f64)> = None;
    for level in start..=pol.max_level.max(start) {
        match principal_profile(model, lambda, side, level, tol)? {
            SideOutcome::Zero { x } => return Ok(SideSolve::Zero { x, level }),
            SideOutcome::Principal(p) => {
                let delta = prev.map_or(f64::INFINITY, |z| (p.slope - z).abs());
                prev = Some(p.slope);
                if settled(&p, delta, level) && (level >= pol.min_level || edge_is_forgotten(&p, level)) {
                    return Ok(SideSolve::Principal {
                        profile: Arc::new(p),
                        converged: true,
                        delta,
                    });
                }
                last = Some((p, delta));
            }
        }
    }
    let (p, delta) = last.expect("at least one level");
    Ok(SideSolve::Principal {
        profile: Arc::new(p),
        converged: false,
        delta,
    })
}

/// Below this log-ratio an error in `omega` at a truncation edge still
/// reaches `xi` with relative weight above `e^-40`.
const FORGOTTEN_EDGE: f64 = 40.0;

/// Whether the edge of level `n` in `p` is too far out to affect the slope.
///
/// An error in `omega` at the edge is carried to `xi` by the linearized
/// Riccati equation with factor `s_y(xi) / s_y(edge)`. The error is at most
/// the gap between the frozen roots at the edge.
fn edge_is_forgotten(p: &Profile, n: u32) -> bool {
    let (xi, e) = (&p.nodes[0], &p.nodes[p.edges[n as usize]]);
    let gap = (e.p * e.p + 4.0 * e.q).max(0.0).sqrt() * (-xi.ln_dx).exp();
    e.ln_s() - xi.ln_s() >= FORGOTTEN_EDGE + gap.max(1.0).ln()
}

/// Estimate of `ln s_y(edge) - ln s_y(xi)` for the level-`n` edge from the
/// gap between the frozen roots of the Riccati equation.
fn frozen_decay(model: &MarketModel, lambda: f64, side: Side, n: u32) -> Option<f64> {
    const SAMPLES: usize = 256;
    let (y0, y1) = (model.chart.y(model.xi), model.chart.edge_y(side.is_left(), n, model.xi));
    let gap = |y: f64| local(model, lambda, y).ok().map(|l| (l.p * l.p + 4.0 * l.q).max(0.0).sqrt());
    let dy = (y1 - y0) / SAMPLES as f64;
    let mut acc = 0.0;
    for i in 0..SAMPLES {
        acc += gap(y0 + (i as f64 + 0.5) * dy)?;
    }
    Some(acc * dy.abs())
}

/// When the decay estimate says a level below `start` is already deep
/// enough, settles at two such levels and certifies both edges from the
/// computed profiles.
fn shallow_certified(
    model: &MarketModel,
    lambda: f64,
    side: Side,
    start: u32,
    tol: &Tolerances,
    settled: &dyn Fn(&Profile, f64, u32) -> bool,
) -> Result<Option<SideSolve>, SturmError> {
    let probe = |j: u32| frozen_decay(model, lambda, side, j).is_some_and(|d| d >= FORGOTTEN_EDGE + 10.0);
    let Some(j) = (1..start.saturating_sub(1)).find(|&j| probe(j)) else {
        return Ok(None);
    };
    let (SideOutcome::Principal(a), SideOutcome::Principal(b)) = (
        principal_profile(model, lambda, side, j, tol)?,
        principal_profile(model, lambda, side, j + 1, tol)?,
    ) else {
        return Ok(None);
    };
    let delta = (b.slope - a.slope).abs();
    if settled(&b, delta, j + 1) && !a.oscillatory_edge && edge_is_forgotten(&a, j) && edge_is_forgotten(&b, j + 1) {
        return Ok(Some(SideSolve::Principal {
            profile: Arc::new(b),
            converged: true,
            delta,
        }));
    }
    Ok(None)
}

/// The two principal solutions at one `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    pub lambda: f64,
    pub left: SideSolve,
    pub right: SideSolve,
}

/// `[m_lambda, M_lambda]`, or the reason it is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Window {
    Empty { reason: EmptyReason },
    Interval { m: f64, big_m: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyReason {
    /// The left principal solution has a zero at `x`.
    LeftZero { x: f64 },
    RightZero { x: f64 },
    /// Both principal solutions are positive but `M < m`.
    Inverted { m: f64, big_m: f64 },
}

impl Window {
    pub fn is_empty(&self) -> bool {
        matches!(self, Window::Empty { .. })
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Window::Interval { m, big_m } => Some((m, big_m)),
            Window::Empty { .. } => None,
        }
    }
}

impl WindowState {
    pub fn compute(model: &MarketModel, lambda: f64, tol: &Tolerances) -> Result<WindowState, SturmError> {
        let left = solve_side(model, lambda, Side::Left, tol)?;
        // A zero on the left already settles emptiness.
        let right = if let SideSolve::Zero { .. } = left {
            SideSolve::Zero {
                x: f64::NAN,
                level: 0,
            }
        } else {
            solve_side(model, lambda, Side::Right, tol)?
        };
        Ok(WindowState { lambda, left, right })
    }

    pub fn profiles(&self) -> Option<(Arc<Profile>, Arc<Profile>)> {
        match (&self.left, &self.right) {
            (SideSolve::Principal { profile: l, .. }, SideSolve::Principal { profile: r, .. }) => {
                Some((l.clone(), r.clone()))
            }
            _ => None,
        }
    }

    pub fn converged(&self) -> bool {
        let ok = |s: &SideSolve| match s {
            SideSolve::Principal { converged, .. } => *converged,
            SideSolve::Zero { .. } => true,
        };
        ok(&self.left) && ok(&self.right)
    }

    /// Window judged with tolerance `ztol`: slightly inverted slopes count as
    /// a single point.
    pub fn window(&self, ztol: f64) -> Window {
        match (&self.left, &self.right) {
            (SideSolve::Zero { x, .. }, _) => Window::Empty {
                reason: EmptyReason::LeftZero { x: *x },
            },
            (_, SideSolve::Zero { x, .. }) => Window::Empty {
                reason: EmptyReason::RightZero { x: *x },
            },
            (SideSolve::Principal { profile: l, .. }, SideSolve::Principal { profile: r, .. }) => {
                let (big_m, m) = (l.slope, r.slope);
                let slack = ztol * (big_m.abs() + m.abs()).max(1.0);
                if big_m >= m {
                    Window::Interval { m, big_m }
                } else if m - big_m <= slack {
                    let mid = 0.5 * (m + big_m);
                    Window::Interval { m: mid, big_m: mid }
                } else {
                    Window::Empty {
                        reason: EmptyReason::Inverted { m, big_m },
                    }
                }
            }
        }
    }

    pub fn truncation_error(&self) -> Option<SturmError> {
        for (side, s) in [(Side::Left, &self.left), (Side::Right, &self.right)] {
            if let SideSolve::Principal {
                converged: false,
                delta,
                profile,
            } = s
            {
                return Some(SturmError::TruncationNotConverged {
                    side,
                    lambda: self.lambda,
                    level: profile.level,
                    delta: *delta,
                });
            }
        }
        None
    }
}

/// `[m_lambda, M_lambda]` after truncation refinement.
pub fn positivity_window(model: &MarketModel, lambda: f64, tol: &Tolerances) -> Result<Window, SturmError> {
    let st = WindowState::compute(model, lambda, tol)?;
    let w = st.window(tol.ztol);
    if w.is_empty() {
        return Ok(w);
    }
    match st.truncation_error() {
        Some(e) => Err(e),
        None => Ok(w),
    }
}

/// Outcome of integrating outward from `xi` with a given initial slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayOutcome {
    pub side: Side,
    pub verdict: RayVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RayVerdict {
    /// Positive up to the truncation edge; `w` is `h'/h` there.
    Survived { w: f64 },
    /// The solution vanishes at `x_star`.
    HitZero { x_star: f64 },
}

/// Integrates `h` with `h(xi) = 1`, `h'(xi) = z` from `xi` to the level
/// `level` edge on `side`.
pub fn integrate_ray(
    model: &MarketModel,
    lambda: f64,
    z: f64,
    side: Side,
    level: u32,
    tol: &Tolerances,
) -> Result<RayOutcome, SturmError> {
    let chart = model.chart;
    let left = side.is_left();
    let y0 = chart.y(model.xi);
    let omega0 = z * chart.ln_dx(y0).exp();
    let stops: Vec<f64> = (1..=level).map(|n| chart.edge_y(left, n, model.xi)).collect();
    let fine = Tolerances {
        rtol: tol.rtol * 1e-2,
        atol: tol.atol * 1e-2,
        ..*tol
    };
    let run = run_riccati(model, lambda, y0, omega0, &stops, false, true, &fine, side)?;
    let verdict = match run.zero {
        Some(x_star) => RayVerdict::HitZero { x_star },
        None => {
            let y_end = *stops.last().unwrap_or(&y0);
            RayVerdict::Survived {
                w: run.omega_end * (-chart.ln_dx(y_end)).exp(),
            }
        }
    };
    Ok(RayOutcome { side, verdict })
}

/// How the two candidate tuples at `beta_bar` relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetaBarCase {
    /// A single positive solution at `beta_bar`.
    UniqueAtBetaBar,
    /// A nondegenerate window of positive solutions at `beta_bar`.
    WindowAtBetaBar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaBar {
    /// Best estimate of `beta_bar`.
    pub value: f64,
    /// Final bisection bracket: nonempty window at `.0`, empty at `.1`.
    pub bracket: (f64, f64),
    pub case: BetaBarCase,
    /// Slope of the unique solution (midpoint of the collapsing window).
    pub z_bar: Option<f64>,
    /// `(m, M)` at the lower end of the bracket.
    pub window: (f64, f64),
    /// Fitted `p` in `M - m ~ (beta_bar - lambda)^p` and the samples used.
    pub width_exponent: f64,
    pub exponent_threshold: f64,
    pub width_samples: Vec<(f64, f64)>,
}

/// Exponent above which the window is taken to collapse at `beta_bar`.
/// A collapsing window closes like a square root; a persistent one keeps a
/// positive width.
pub const WIDTH_EXPONENT_THRESHOLD: f64 = 0.25;

fn nonempty(model: &MarketModel, lambda: f64, tol: &Tolerances) -> Result<Option<(f64, f64)>, SturmError> {
    Ok(WindowState::compute(model, lambda, tol)?.window(tol.ztol).bounds())
}

/// Largest `lambda` with a positive solution, by bracketing and bisection
/// on window emptiness, and whether the window collapses to a point there.
pub fn find_beta_bar(model: &MarketModel, tol: &Tolerances) -> Result<BetaBar, SturmError> {
    // Lower end: downward doubling from 0.
    let mut lo = 0.0;
    let mut lo_window = nonempty(model, lo, tol)?;
    let mut step = 1.0;
    while lo_window.is_none() {
        lo = -step;
        lo_window = nonempty(model, lo, tol)?;
        step *= 2.0;
        if step > 2f64.powi(40) {
            return Err(SturmError::NoPositiveSolutionFound { lambda_min: lo });
        }
    }
    // Upper end: upward doubling.
    let mut step = 1.0;
    let mut hi = lo + step;
    loop {
        match nonempty(model, hi, tol)? {
            Some(w) => {
                lo = hi;
                lo_window = Some(w);
                step *= 2.0;
                hi = lo + step;
                if step > 2f64.powi(40) {
                    return Err(SturmError::NoPositiveSolutionFound { lambda_min: lo });
                }
            }
            None => break,
        }
    }
    while hi - lo > tol.lambda_tol {
        let mid = 0.5 * (lo + hi);
        match nonempty(model, mid, tol)? {
            Some(w) => {
                lo = mid;
                lo_window = Some(w);
            }
            None => hi = mid,
        }
    }
    let (m_lo, big_m_lo) = lo_window.expect("lower bracket is nonempty");

    // Width samples below the bracket.
    let scale = lo.abs().max(1.0);
    let mut samples = Vec::new();
    for e in [3, 4, 5, 6] {
        let d = 10f64.powi(-e) * scale;
        if let Some((m, big_m)) = nonempty(model, lo - d, tol)? {
            samples.push((d, big_m - m));
        }
    }
    let width_exponent = fit_exponent(&samples);
    let case = if width_exponent >= WIDTH_EXPONENT_THRESHOLD {
        BetaBarCase::UniqueAtBetaBar
    } else {
        BetaBarCase::WindowAtBetaBar
    };

    let mut value = lo;
    let mut z_bar = None;
    if case == BetaBarCase::UniqueAtBetaBar {
        z_bar = Some(0.5 * (m_lo + big_m_lo));
        // Near a collapsing end W^(1/p) is close to linear in lambda; its
        // root refines the bisection estimate.
        let p = width_exponent.clamp(0.25, 4.0);
        // A second pass, anchored much closer, removes most of the error
        // from a slightly wrong exponent.
        let mut anchor = lo;
        for rel in [1e-6, 1e-8] {
            let d1 = rel * scale;
            let l1 = anchor - d1;
            let l2 = anchor - 2.0 * d1;
            let (Some((m1, bm1)), Some((m2, bm2))) = (nonempty(model, l1, tol)?, nonempty(model, l2, tol)?) else {
                break;
            };
            let (w1, w2) = ((bm1 - m1).max(0.0).powf(1.0 / p), (bm2 - m2).max(0.0).powf(1.0 / p));
            if !(w2 > w1) {
                break;
            }
            let root = l1 + w1 * (l1 - l2) / (w2 - w1);
            let slack = 10.0 * tol.lambda_tol;
            if !(root >= lo - slack && root <= hi + slack) {
                break;
            }
            value = root;
            anchor = root;
            let (mid1, mid2) = (0.5 * (m1 + bm1), 0.5 * (m2 + bm2));
            z_bar = Some(mid1 + (root - l1) * (mid1 - mid2) / (l1 - l2));
        }
    }
    Ok(BetaBar {
        value,
        bracket: (lo, hi),
        case,
        z_bar,
        window: (m_lo, big_m_lo),
        width_exponent,
        exponent_threshold: WIDTH_EXPONENT_THRESHOLD,
        width_samples: samples,
    })
}

/// Least-squares slope of `ln w` against `ln d`.
fn fit_exponent(samples: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(d, w)| *d > 0.0 && *w > 0.0)
        .map(|(d, w)| (d.ln(), w.ln()))
        .collect();
    if pts.len() < 2 {
        // Widths that vanish below beta_bar can only come from a collapsing window.
        return if samples.is_empty() { 0.0 } else { f64::INFINITY };
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// A function on the state interval represented by its log on chart nodes,
/// interpolated by quintic Hermite polynomials in the chart coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub chart: Chart,
    /// Strictly increasing chart coordinates.
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub ln_f: Vec<f64>,
    /// `d ln f / dy`.
    pub omega: Vec<f64>,
    /// `d^2 ln f / dy^2`.
    pub domega: Vec<f64>,
}

impl GridFunction {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().unwrap())
    }

    fn locate(&self, x: f64) -> Result<(usize, f64), SturmError> {
        let (lo, hi) = self.x_range();
        if !(x >= lo && x <= hi) {
            return Err(SturmError::OutOfDomain { x, lo, hi });
        }
        let y = self.chart.y(x).clamp(self.y[0], *self.y.last().unwrap());
        let i = match self.y.partition_point(|&t| t <= y) {
            0 => 0,
            n if n >= self.y.len() => self.y.len() - 2,
            n => n - 1,
        };
        Ok((i, y))
    }

    /// `(ln f, d ln f / dy)` at `x`.
    fn eval_y(&self, x: f64) -> Result<(f64, f64, f64), SturmError> {
        let (i, y) = self.locate(x)?;
        let h = self.y[i + 1] - self.y[i];
        let t = (y - self.y[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let (t4, t5) = (t3 * t, t3 * t2);
        let basis = [
            1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5,
            t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5,
            0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5,
            10.0 * t3 - 15.0 * t4 + 6.0 * t5,
            -4.0 * t3 + 7.0 * t4 - 3.0 * t5,
            0.5 * t3 - t4 + 0.5 * t5,
        ];
        let dbasis = [
            -30.0 * t2 + 60.0 * t3 - 30.0 * t4,
            1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4,
            t - 4.5 * t2 + 6.0 * t3 - 2.5 * t4,
            30.0 * t2 - 60.0 * t3 + 30.0 * t4,
            -12.0 * t2 + 28.0 * t3 - 15.0 * t4,
            1.5 * t2 - 4.0 * t3 + 2.5 * t4,
        ];
        let coef = [
            self.ln_f[i],
            h * self.omega[i],
            h * h * self.domega[i],
            self.ln_f[i + 1],
            h * self.omega[i + 1],
            h * h * self.domega[i + 1],
        ];
        let mut f = 0.0;
        let mut df = 0.0;
        for k in 0..6 {
            f += basis[k] * coef[k];
            df += dbasis[k] * coef[k];
        }
        Ok((f, df / h, y))
    }

    pub fn ln_value(&self, x: f64) -> Result<f64, SturmError> {
        Ok(self.eval_y(x)?.0)
    }

    pub fn value(&self, x: f64) -> Result<f64, SturmError> {
        Ok(self.ln_value(x)?.exp())
    }

    /// `f'(x) / f(x)`.
    pub fn dlog(&self, x: f64) -> Result<f64, SturmError> {
        let (_, om, y) = self.eval_y(x)?;
        Ok(om * (-self.chart.ln_dx(y)).exp())
    }

    /// `f'/f` at every node.
    pub fn node_dlog(&self) -> Vec<f64> {
        self.y
            .iter()
            .zip(&self.omega)
            .map(|(&y, &om)| om * (-self.chart.ln_dx(y)).exp())
            .collect()
    }
}

/// A positive solution `h` with `h(xi) = 1` and `h'(xi) = z`, held through the
/// principal solutions of both sides.
#[derive(Debug, Clone)]
pub struct CandidateTuple {
    pub lambda: f64,
    pub z: f64,
    pub h: GridFunction,
    /// `G` at each grid node.
    pub g: Vec<f64>,
    pub is_max_slope: bool,
    pub is_min_slope: bool,
    /// `M - z` and `z - m`.
    pub eps_left: f64,
    pub eps_right: f64,
    pub left: Arc<Profile>,
    pub right: Arc<Profile>,
    left_fn: GridFunction,
    right_fn: GridFunction,
}

/// Builds the solution with slope `z` at `xi` from two principal profiles.
/// Slopes outside `[m, M]` fail with `NotACandidate` where the zero falls
/// inside the truncated interval.
pub fn tuple_from_profiles(
    model: &MarketModel,
    lambda: f64,
    z: f64,
    left: Arc<Profile>,
    right: Arc<Profile>,
    ztol: f64,
) -> Result<CandidateTuple, SturmError> {
    let (big_m, m) = (left.slope, right.slope);
    // Slopes within ztol of an endpoint are that endpoint.
    let slack = ztol * big_m.abs().max(m.abs()).max(1.0);
    let snap = |e: f64| if e.abs() <= slack { 0.0 } else { e };
    build_tuple(model, lambda, z, left, right, snap(big_m - z), snap(z - m))
}

/// The solution that is principal on both sides, joined at `xi` with the
/// mean of the two slopes. Only meaningful where the window is (nearly) a
/// point; the kink at `xi` is `M - m`.
pub fn principal_join(
    model: &MarketModel,
    lambda: f64,
    left: Arc<Profile>,
    right: Arc<Profile>,
) -> Result<CandidateTuple, SturmError> {
    let z = 0.5 * (left.slope + right.slope);
    build_tuple(model, lambda, z, left, right, 0.0, 0.0)
}

fn build_tuple(
    model: &MarketModel,
    lambda: f64,
    z: f64,
    left: Arc<Profile>,
    right: Arc<Profile>,
    eps_l: f64,
    eps_r: f64,
) -> Result<CandidateTuple, SturmError> {
    let chart = model.chart;
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut ln_f = Vec::new();
    let mut omega = Vec::new();
    let mut domega = Vec::new();
    let mut g = Vec::new();
    for (prof, eps, sign) in [(&left, eps_l, -1.0), (&right, eps_r, 1.0)] {
        let mut part = Vec::with_capacity(prof.nodes.len());
        for (i, node) in prof.nodes.iter().enumerate() {
            if i == 0 && sign < 0.0 {
                // xi is taken from the right profile.
                continue;
            }
            let (lnf, om) = if eps == 0.0 || i == 0 {
                (node.ln_h, node.omega + if i == 0 { sign * eps * (node.ln_dx).exp() } else { 0.0 })
            } else {
                let s = prof.ln_cum[i].exp();
                let one = 1.0 + eps * s;
                if one <= 0.0 {
                    return Err(SturmError::NotACandidate {
                        lambda,
                        z,
                        x_star: crossing(prof, eps, i),
                    });
                }
                // d/dy of ln(1 + eps S) with S growing outward.
                let ln_sy = node.ln_s();
                let ratio = if eps > 0.0 {
                    (ln_sy - (1.0 / eps + s).ln()).exp()
                } else {
                    eps * ln_sy.exp() / one
                };
                (node.ln_h + one.ln(), node.omega + sign * ratio)
            };
            let om_node = Node { omega: om, ..*node };
            part.push((node.y, node.x, lnf, om, om_node.domega(), node.g));
        }
        if sign < 0.0 {
            part.reverse();
        }
        for (a, b, c, d, e, f) in part {
            y.push(a);
            x.push(b);
            ln_f.push(c);
            omega.push(d);
            domega.push(e);
            g.push(f);
        }
    }
    // A slope beyond a principal one makes `1 + eps S` vanish where S reaches
    // 1/|eps|. When that lies outside the truncation, the divergence of the
    // principal scale integral still places it at a finite point.
    for (prof, eps) in [(&left, eps_l), (&right, eps_r)] {
        if eps < 0.0 {
            let (pieces, floors) = crate::boundary::scale_bands(prof, 0.0);
            if crate::boundary::certify(&pieces, Some(&floors)).is_diverged() {
                return Err(SturmError::NotACandidate {
                    lambda,
                    z,
                    x_star: extrapolated_crossing(prof, &pieces, eps),
                });
            }
        }
    }
    let left_fn = profile_function(&left);
    let right_fn = profile_function(&right);
    let h = GridFunction {
        chart,
        y,
        x,
        ln_f,
        omega,
        domega,
    };
    Ok(CandidateTuple {
        lambda,
        z,
        h,
        g,
        is_max_slope: eps_l == 0.0,
        is_min_slope: eps_r == 0.0,
        eps_left: eps_l,
        eps_right: eps_r,
        left,
        right,
        left_fn,
        right_fn,
    })
}

/// Where `1 + eps S` first reaches zero, for `eps < 0`.
fn crossing(prof: &Profile, eps: f64, upto: usize) -> f64 {
    let target = -(-eps).ln();
    for i in 1..=upto {
        if prof.ln_cum[i] >= target {
            let (a, b) = (prof.ln_cum[i - 1], prof.ln_cum[i]);
            let t = if b > a && a.is_finite() {
                ((target.exp() - a.exp()) / (b.exp() - a.exp())).clamp(0.0, 1.0)
            } else {
                1.0
            };
            return prof.nodes[i - 1].x + t * (prof.nodes[i].x - prof.nodes[i - 1].x);
        }
    }
    prof.nodes[upto].x
}

/// Estimated position where `S_P` reaches `1/|eps|`, continuing the growth
/// of the last two level bands.
fn extrapolated_crossing(prof: &Profile, ln_pieces: &[f64], eps: f64) -> f64 {
    let n = ln_pieces.len();
    let need = 1.0 / eps.abs() - prof.total_ln_scale().exp();
    let last = ln_pieces[n - 1].exp();
    let rho = if n >= 2 { (ln_pieces[n - 1] - ln_pieces[n - 2]).exp() } else { 1.0 };
    let extra = if rho > 1.0 + 1e-9 {
        (1.0 + need * (rho - 1.0) / (rho * last)).ln() / rho.ln()
    } else {
        need / last
    };
    let level = (prof.level as f64 + extra.max(0.0).ceil()).min(1000.0) as u32;
    prof.chart.x(prof.chart.edge_y(prof.side.is_left(), level, prof.nodes[0].x))
}

impl CandidateTuple {
    /// `ln` of the scale density in `x` at a grid node.
    pub fn node_ln_scale_x(&self, i: usize) -> f64 {
        -2.0 * self.h.ln_f[i] - self.g[i]
    }

    /// Profile and epsilon for the half containing `x`.
    fn half(&self, x: f64) -> (&Profile, f64) {
        if x < self.left.nodes[0].x {
            (&self.left, self.eps_left)
        } else {
            (&self.right, self.eps_right)
        }
    }

    /// `G(x) = int_xi^x 2k/sigma^2`, from the nearest profile node plus a
    /// Gauss–Legendre integral of its derivative in `y`.
    pub fn g_at(&self, model: &MarketModel, x: f64) -> Result<f64, SturmError> {
        let (prof, _) = self.half(x);
        let y = model.chart.y(x);
        let i = nearest_node(prof, y)?;
        let node = &prof.nodes[i];
        let (a, b) = (node.y, y);
        if a == b {
            return Ok(node.g);
        }
        let mut acc = 0.0;
        for (t, w) in GAUSS_LEGENDRE_8 {
            let yy = 0.5 * (a + b) + 0.5 * (b - a) * t;
            let l = local(model, self.lambda, yy).map_err(|message| SturmError::Ode {
                side: prof.side,
                source: OdeError::Rhs { t: yy, message },
            })?;
            acc += w * l.pk;
        }
        Ok(node.g + 0.5 * (b - a) * acc)
    }

    /// `ln S` between `xi` and `x` for this tuple's scale measure.
    pub fn ln_scale_from_xi(&self, model: &MarketModel, x: f64) -> Result<f64, SturmError> {
        let (prof, eps) = self.half(x);
        let y = model.chart.y(x);
        let i = nearest_node_inner(prof, y)?;
        let a = &prof.nodes[i];
        let mut ln_s_p = prof.ln_cum[i];
        if a.y != y {
            // Partial interval: Hermite data at a, exact data at x.
            let dir = prof.side.outward();
            let ln_h = self.principal_ln_h(prof, x)?;
            let g = self.g_at(model, x)?;
            let l = local(model, prof.lambda, y).map_err(|message| SturmError::Ode {
                side: prof.side,
                source: OdeError::Rhs { t: y, message },
            })?;
            let om = self.principal_omega(prof, x)?;
            let b_ln_s = -2.0 * ln_h - g + l.ln_dx;
            let b_d = -2.0 * om - l.p;
            let piece = ln_integral_hermite(a.ln_s(), dir * a.dln_s(), b_ln_s, dir * b_d, (y - a.y).abs());
            ln_s_p = ln_add(ln_s_p, piece);
        }
        if eps == 0.0 {
            return Ok(ln_s_p);
        }
        let one = 1.0 + eps * ln_s_p.exp();
        Ok(ln_s_p - one.abs().ln())
    }

    fn principal_fn(&self, prof: &Profile) -> &GridFunction {
        if prof.side.is_left() {
            &self.left_fn
        } else {
            &self.right_fn
        }
    }

    fn principal_ln_h(&self, prof: &Profile, x: f64) -> Result<f64, SturmError> {
        self.principal_fn(prof).ln_value(x)
    }

    fn principal_omega(&self, prof: &Profile, x: f64) -> Result<f64, SturmError> {
        Ok(self.principal_fn(prof).eval_y(x)?.1)
    }

    /// Scale density `s(x) = (h(xi)/h(x))^2 exp(-G(x))`.
    pub fn scale_density(&self, model: &MarketModel, x: f64) -> Result<f64, SturmError> {
        let ln_h = self.h.ln_value(x)?;
        let g = self.g_at(model, x)?;
        Ok((-2.0 * ln_h - g).exp())
    }

    /// Induced drift `k + sigma^2 h'/h` at every grid node.
    pub fn induced_drift(&self, model: &MarketModel) -> Result<Vec<f64>, SturmError> {
        let w = self.h.node_dlog();
        self.h
            .x
            .iter()
            .zip(w)
            .map(|(&x, w)| {
                let c = model.coeffs(x)?;
                Ok(c.k() + c.sigma * c.sigma * w)
            })
            .collect()
    }

    /// Largest normalized residual of the ODE at interval midpoints, by
    /// central differences. Points where `|ln h| > 30` are skipped.
    pub fn residual(&self, model: &MarketModel) -> Result<f64, SturmError> {
        max_residual(model, self.lambda, &self.h, |x| self.h.ln_value(x), None)
    }
}

fn nearest_node(prof: &Profile, y: f64) -> Result<usize, SturmError> {
    nearest_node_inner(prof, y)
}

/// Index of the node at or just inside (toward `xi`) of `y`.
fn nearest_node_inner(prof: &Profile, y: f64) -> Result<usize, SturmError> {
    let dir = prof.side.outward();
    let n = prof.nodes.len();
    let last = &prof.nodes[n - 1];
    if dir * (y - prof.nodes[0].y) < -1e-12 * prof.nodes[0].y.abs().max(1.0) || dir * (y - last.y) > 0.0 {
        let (a, b) = (prof.nodes[0].x, last.x);
        return Err(SturmError::OutOfDomain {
            x: model_x(prof, y),
            lo: a.min(b),
            hi: a.max(b),
        });
    }
    let idx = prof.nodes.partition_point(|nd| dir * (nd.y - y) <= 0.0);
    Ok(idx.saturating_sub(1).min(n - 1))
}

fn model_x(prof: &Profile, y: f64) -> f64 {
    // Only used in error messages; linear in y between the extreme nodes.
    let a = &prof.nodes[0];
    let b = prof.nodes.last().unwrap();
    if b.y == a.y {
        a.x
    } else {
        a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x)
    }
}

/// The principal solution of one profile as a [`GridFunction`].
pub fn profile_function(prof: &Profile) -> GridFunction {
    let mut nodes: Vec<&Node> = prof.nodes.iter().collect();
    if prof.side.is_left() {
        nodes.reverse();
    }
    GridFunction {
        chart: prof.chart,
        y: nodes.iter().map(|n| n.y).collect(),
        x: nodes.iter().map(|n| n.x).collect(),
        ln_f: nodes.iter().map(|n| n.ln_h).collect(),
        omega: nodes.iter().map(|n| n.omega).collect(),
        domega: nodes.iter().map(|n| n.domega()).collect(),
    }
}

/// Normalized residual `|1/2 sigma^2 f''/f + k f'/f - r + lambda|` divided
/// by the sum of the absolute values of its terms (floored at
/// `sigma^2 / (2 X'^2)`), maximized over interval midpoints of `grid`.
pub fn max_residual<F>(
    model: &MarketModel,
    lambda: f64,
    grid: &GridFunction,
    ln_f: F,
    skip_near: Option<f64>,
) -> Result<f64, SturmError>
where
    F: Fn(f64) -> Result<f64, SturmError>,
{
    let chart = grid.chart;
    let mut worst: f64 = 0.0;
    for i in 0..grid.len().saturating_sub(1) {
        let y = 0.5 * (grid.y[i] + grid.y[i + 1]);
        let x = chart.x(y);
        let dx = chart.ln_dx(y).exp();
        let delta = 1e-3 * dx;
        if let Some(x0) = skip_near {
            if (x - x0).abs() < 10.0 * delta {
                continue;
            }
        }
        if !(x - 2.0 * delta > grid.x[0] && x + 2.0 * delta < *grid.x.last().unwrap()) {
            continue;
        }
        let f0 = ln_f(x)?;
        if f0.abs() > 30.0 {
            continue;
        }
        // Central differences at steps delta and 2 delta, Richardson-combined.
        let mut d = [(0.0, 0.0); 2];
        for (j, dj) in [delta, 2.0 * delta].into_iter().enumerate() {
            let a = ln_f(x - dj)? - f0;
            let b = ln_f(x + dj)? - f0;
            d[j] = (
                (b.exp_m1() - a.exp_m1()) / (2.0 * dj),
                (a.exp_m1() + b.exp_m1()) / (dj * dj),
            );
        }
        let d1 = (4.0 * d[0].0 - d[1].0) / 3.0;
        let d2 = (4.0 * d[0].1 - d[1].1) / 3.0;
        let c = model.coeffs(x)?;
        let terms = [0.5 * c.sigma * c.sigma * d2, c.k() * d1, -c.r, lambda];
        let sum: f64 = terms.iter().sum();
        // Floor at the size of the diffusion term on the chart's length scale.
        let floor = 0.5 * c.sigma * c.sigma / (dx * dx);
        let scale: f64 = terms.iter().map(|t| t.abs()).sum::<f64>().max(floor);
        worst = worst.max(sum.abs() / scale);
    }
    Ok(worst)
}

/// Builds the candidate tuple `(lambda, z)`.
pub fn solve_h(model: &MarketModel, lambda: f64, z: f64, tol: &Tolerances) -> Result<CandidateTuple, SturmError> {
    let st = WindowState::compute(model, lambda, tol)?;
    match &st.left {
        SideSolve::Zero { x, .. } => {
            return Err(SturmError::NotACandidate { lambda, z, x_star: *x })
        }
        SideSolve::Principal { .. } => {}
    }
    if let SideSolve::Zero { x, .. } = &st.right {
        return Err(SturmError::NotACandidate { lambda, z, x_star: *x });
    }
    let (l, r) = st.profiles().expect("both sides principal");
    if l.slope < r.slope - tol.ztol * (l.slope.abs() + r.slope.abs()).max(1.0) {
        return Err(SturmError::EmptyWindow { lambda });
    }
    let t = tuple_from_profiles(model, lambda, z, l, r, tol.ztol)?;
    if let Some(e) = st.truncation_error() {
        return Err(e);
    }
    Ok(t)
}

/// The endpoint tuple `(lambda, M_lambda)` (`max = true`) or `(lambda, m_lambda)`.
pub fn endpoint_tuple(
    model: &MarketModel,
    state: &WindowState,
    max: bool,
    tol: &Tolerances,
) -> Result<CandidateTuple, SturmError> {
    let (l, r) = state
        .profiles()
        .ok_or(SturmError::EmptyWindow { lambda: state.lambda })?;
    if l.slope < r.slope {
        // Inverted within tolerance: the window is a single point.
        return principal_join(model, state.lambda, l, r);
    }
    let z = if max { l.slope } else { r.slope };
    tuple_from_profiles(model, state.lambda, z, l, r, tol.ztol)
}

/// The second solution `h(x) S([xi, x))` of the same equation, checked by
/// its residual. Returns the largest normalized residual.
pub fn second_solution_check(model: &MarketModel, h: &CandidateTuple) -> Result<f64, SturmError> {
    let ln_g = |x: f64| -> Result<f64, SturmError> {
        Ok(h.h.ln_value(x)? + h.ln_scale_from_xi(model, x)?)
    };
    max_residual(model, h.lambda, &h.h, ln_g, Some(model.xi))
}

/// Window data over a grid of `lambda`, with admissibility filled in later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub lambdas: Vec<f64>,
    pub m: Vec<Option<f64>>,
    pub big_m: Vec<Option<f64>>,
    pub adm_min: Vec<Option<bool>>,
    pub adm_max: Vec<Option<bool>>,
    pub oracle_m: Option<Vec<Option<f64>>>,
    pub oracle_big_m: Option<Vec<Option<f64>>>,
    pub beta_bar: Option<BetaBar>,
}

/// Evaluates the positivity window at every grid point.
pub fn frontier(model: &MarketModel, lambdas: &[f64], tol: &Tolerances) -> Result<Frontier, SturmError> {
    let windows: Vec<Result<Window, SturmError>> =
        lambdas.par_iter().map(|&l| positivity_window(model, l, tol)).collect();
    let mut m = Vec::with_capacity(lambdas.len());
    let mut big_m = Vec::with_capacity(lambdas.len());
    for w in windows {
        match w?.bounds() {
            Some((a, b)) => {
                m.push(Some(a));
                big_m.push(Some(b));
            }
            None => {
                m.push(None);
                big_m.push(None);
            }
        }
    }
    Ok(Frontier {
        lambdas: lambdas.to_vec(),
        adm_min: vec![None; lambdas.len()],
        adm_max: vec![None; lambdas.len()],
        m,
        big_m,
        oracle_m: None,
        oracle_big_m: None,
        beta_bar: None,
    })
}

impl Frontier {
    /// Whether `M` strictly decreases and `m` strictly increases along the
    /// nonempty part of the grid, with violations up to `ztol` taken as ties.
    pub fn is_monotone(&self, ztol: f64) -> bool {
        let pts: Vec<(f64, f64, f64)> = self
            .lambdas
            .iter()
            .zip(self.m.iter().zip(&self.big_m))
            .filter_map(|(&l, (m, bm))| Some((l, (*m)?, (*bm)?)))
            .collect();
        pts.windows(2).all(|w| {
            let (l0, m0, bm0) = w[0];
            let (l1, m1, bm1) = w[1];
            if l1 <= l0 {
                return false;
            }
            bm1 < bm0 + ztol && m1 > m0 - ztol
        })
    }

    /// Admissibility of `(lambda, M_lambda)` never switches from true to
    /// false as `lambda` increases.
    pub fn max_branch_admissibility_monotone(&self) -> bool {
        let mut seen = false;
        for a in self.adm_max.iter().flatten() {
            if seen && !a {
                return false;
            }
            seen |= *a;
        }
        true
    }

    /// CSV with a header row; empty windows leave their fields blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,m_lambda,M_lambda,adm_min,adm_max");
        let oracle = self.oracle_m.is_some() && self.oracle_big_m.is_some();
        if oracle {
            out.push_str(",oracle_m,oracle_M");
        }
        out.push('\n');
        let num = |v: Option<f64>| v.map(|x| format!("{x:.15e}")).unwrap_or_default();
        let flag = |v: Option<bool>| v.map(|b| b.to_string()).unwrap_or_default();
        for i in 0..self.lambdas.len() {
            out.push_str(&format!(
                "{:.15e},{},{},{},{}",
                self.lambdas[i],
                num(self.m[i]),
                num(self.big_m[i]),
                flag(self.adm_min[i]),
                flag(self.adm_max[i])
            ));
            if oracle {
                let om = self.oracle_m.as_ref().unwrap()[i];
                let obm = self.oracle_big_m.as_ref().unwrap()[i];
                out.push_str(&format!(",{},{}", num(om), num(obm)));
            }
            out.push('\n');
        }
        out
    }
}

/// `n` evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn gbm_roots(lambda: f64) -> (f64, f64) {
        let (r, d, s) = (0.05, 0.02, 0.2);
        let a = 0.5 - (r - d) / (s * s);
        let q = (a * a + 2.0 * (r - lambda) / (s * s)).sqrt();
        (a - q, a + q)
    }

    #[test]
    fn frozen_roots_are_ordered() {
        let (a, b) = frozen_roots(0.5, 2.5).unwrap();
        assert!((a - (-1.850781059358212)).abs() < 1e-12);
        assert!((b - 1.350781059358212).abs() < 1e-12);
        assert!(frozen_roots(0.0, -1.0).is_none());
        assert_eq!(frozen_roots(0.0, 0.0), Some((0.0, 0.0)));
    }

    #[test]
    fn brownian_rays() {
        let m = builtin("brownian").unwrap();
        let t = tol();
        for side in [Side::Left, Side::Right] {
            let out = integrate_ray(&m, 0.0, 0.0, side, 12, &t).unwrap();
            assert_eq!(out.verdict, RayVerdict::Survived { w: 0.0 });
        }
        let out = integrate_ray(&m, 0.0, 0.1, Side::Left, 12, &t).unwrap();
        match out.verdict {
            RayVerdict::HitZero { x_star } => assert!((x_star + 10.0).abs() < 1e-10, "{x_star}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gbm_ray_inside_window_survives() {
        let m = builtin("gbm").unwrap();
        for side in [Side::Left, Side::Right] {
            let out = integrate_ray(&m, 0.0, 0.0, side, 20, &tol()).unwrap();
            assert!(matches!(out.verdict, RayVerdict::Survived { .. }), "{side}: {out:?}");
        }
    }

    #[test]
    fn gbm_window_matches_closed_form() {
        let m = builtin("gbm").unwrap();
        for lambda in [-0.3, 0.0, 0.03, 0.05] {
            let (l1, l2) = gbm_roots(lambda);
            let w = positivity_window(&m, lambda, &tol()).unwrap();
            let (lo, hi) = w.bounds().unwrap();
            assert!((lo - l1).abs() < 1e-9, "{lambda}: {lo} vs {l1}");
            assert!((hi - l2).abs() < 1e-9, "{lambda}: {hi} vs {l2}");
        }
        assert!(positivity_window(&m, 0.05125 + 0.01, &tol()).unwrap().is_empty());
    }

    #[test]
    fn brownian_window_is_a_point() {
        let m = builtin("brownian").unwrap();
        let w = positivity_window(&m, 0.0, &tol()).unwrap();
        let (lo, hi) = w.bounds().unwrap();
        assert!(lo.abs() < 1e-12 && hi.abs() < 1e-12);
    }

    #[test]
    fn gbm_beta_bar() {
        let m = builtin("gbm").unwrap();
        let bb = find_beta_bar(&m, &tol()).unwrap();
        assert!((bb.value - 0.05125).abs() < 1e-8, "{bb:?}");
        assert_eq!(bb.case, BetaBarCase::UniqueAtBetaBar);
        assert!((bb.z_bar.unwrap() + 0.25).abs() < 1e-6);
    }

    #[test]
    fn gbm_power_solution_at_beta_bar() {
        let m = builtin("gbm").unwrap();
        let t = solve_h(&m, 0.05125, -0.25, &tol()).unwrap();
        let mut worst: f64 = 0.0;
        for (&x, &lf) in t.h.x.iter().zip(&t.h.ln_f) {
            let exact = -0.25 * x.ln();
            worst = worst.max((lf - exact).exp_m1().abs());
        }
        assert!(worst <= 1e-8, "{worst}");
        assert!(t.residual(&m).unwrap() < 1e-6);
    }

    #[test]
    fn brownian_constant_solution_and_second_solution() {
        let m = builtin("brownian").unwrap();
        let t = solve_h(&m, 0.0, 0.0, &tol()).unwrap();
        assert!(t.h.ln_f.iter().all(|v| v.abs() < 1e-14));
        let x0 = t.h.x.iter().position(|&x| x == 0.0).unwrap();
        assert_eq!(t.h.ln_f[x0], 0.0);
        for x in [-3.0, 0.5, 7.0] {
            let s = t.ln_scale_from_xi(&m, x).unwrap().exp();
            assert!((s - x.abs()).abs() < 1e-10, "{x}: {s}");
        }
        assert!(second_solution_check(&m, &t).unwrap() < 1e-8);
    }

    #[test]
    fn gbm_second_solution_residual() {
        let m = builtin("gbm").unwrap();
        let st = WindowState::compute(&m, 0.0, &tol()).unwrap();
        let t = endpoint_tuple(&m, &st, true, &tol()).unwrap();
        assert!(second_solution_check(&m, &t).unwrap() < 1e-7);
    }

    #[test]
    fn slopes_outside_the_window_fail() {
        let m = builtin("gbm").unwrap();
        let t = tol();
        let (l1, l2) = gbm_roots(-0.5);
        for z in [l2 + 10.0 * t.ztol, l1 - 10.0 * t.ztol] {
            assert!(matches!(solve_h(&m, -0.5, z, &t), Err(SturmError::NotACandidate { .. })), "{z}");
        }
        for k in 0..5 {
            let z = l1 + (l2 - l1) * (k as f64 + 0.5) / 5.0;
            let h = solve_h(&m, -0.5, z, &t).unwrap();
            assert!((h.h.dlog(1.0).unwrap() - z).abs() < 1e-9);
        }
    }

    #[test]
    fn cir_slice_endpoints_reject_outside() {
        let m = builtin("cir").unwrap();
        let t = tol();
        let w = positivity_window(&m, 0.02, &t).unwrap();
        let (lo, hi) = w.bounds().unwrap();
        for z in [hi + 10.0 * t.ztol, lo - 10.0 * t.ztol] {
            match solve_h(&m, 0.02, z, &t) {
                Err(SturmError::NotACandidate { x_star, .. }) => assert!(m.contains(x_star) || x_star == 0.0),
                other => panic!("{z}: {:?}", other.map(|h| h.z)),
            }
        }
        assert!(solve_h(&m, 0.02, 0.5 * (lo + hi), &t).is_ok());
    }

    #[test]
    fn grid_function_interpolates_power() {
        let m = builtin("gbm").unwrap();
        let t = solve_h(&m, 0.0, gbm_roots(0.0).1, &tol()).unwrap();
        let l2 = gbm_roots(0.0).1;
        for x in [0.013, 0.5, 1.7, 33.0, 900.0] {
            let v = t.h.ln_value(x).unwrap();
            assert!((v - l2 * x.ln()).abs() < 1e-9 * (1.0 + v.abs()), "{x}");
            assert!((t.h.dlog(x).unwrap() - l2 / x).abs() < 1e-8 / x);
        }
    }

    #[test]
    fn linspace_endpoints() {
        let v = linspace(0.0, 0.05125, 50);
        assert_eq!(v.len(), 50);
        assert_eq!(v[49], 0.05125);
        assert_eq!(v[0], 0.0);
    }
}
