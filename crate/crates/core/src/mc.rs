//! Monte Carlo checks: paths of the state and the numeraire under `Q` or a
//! transformed measure, martingale tests, long-term yields and reference
//! functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Chart, Coefficient, MarketModel};
use crate::quad::NeumaierSum;
use crate::recovery::RecoveryResult;
use crate::sturm::GridFunction;

/// Share of absorbed paths above which an estimate is refused.
pub const MAX_DISCARD_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("{discards} of {paths} paths hit a truncation edge or left the grid; estimate unreliable")]
    ExcessDiscards { discards: usize, paths: usize },
    #[error("f is not positive at x = {x} (f = {value})")]
    NonPositiveF { x: f64, value: f64 },
    #[error("function evaluation failed at x = {x}: {detail}")]
    Eval { x: f64, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    /// Euler on `ln(x - c)`, for intervals with a finite left end only.
    LogEuler,
}

impl Scheme {
    pub fn default_for(model: &MarketModel) -> Scheme {
        match model.chart {
            Chart::LeftAnchored { .. } => Scheme::LogEuler,
            _ => Scheme::EulerMaruyama,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// `None` picks [`Scheme::default_for`].
    pub scheme: Option<Scheme>,
    /// Extra times at which the state is recorded; the horizon always is.
    pub record: Vec<f64>,
    /// Each step sums `2^refine` normals, so the Brownian path is the one a
    /// run with `steps * 2^refine` steps would see.
    #[serde(default)]
    pub refine: u32,
}

impl SimConfig {
    pub fn new(horizon: f64, steps: usize, paths: usize, seed: u64) -> Self {
        SimConfig {
            horizon,
            steps,
            paths,
            seed,
            scheme: None,
            record: Vec::new(),
            refine: 0,
        }
    }

    pub fn validate(&self, model: &MarketModel) -> Result<(), McError> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(McError::InvalidConfig(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.steps == 0 || self.paths == 0 {
            return Err(McError::InvalidConfig("steps and paths must be at least 1".into()));
        }
        if self.scheme == Some(Scheme::LogEuler) && !matches!(model.chart, Chart::LeftAnchored { .. }) {
            return Err(McError::InvalidConfig(
                "log-Euler needs a finite left endpoint and an infinite right one".into(),
            ));
        }
        if self.refine > 16 {
            return Err(McError::InvalidConfig(format!("refine {} exceeds 16", self.refine)));
        }
        if let Some(t) = self.record.iter().find(|t| !(**t > 0.0 && **t <= self.horizon)) {
            return Err(McError::InvalidConfig(format!("record time {t} outside (0, horizon]")));
        }
        Ok(())
    }

    fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Record times and the step at which each is reached.
    fn record_steps(&self) -> Vec<(f64, usize)> {
        let mut ts: Vec<f64> = self.record.clone();
        ts.push(self.horizon);
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts.into_iter()
            .map(|t| (t, ((t / self.dt()).round() as usize).clamp(1, self.steps)))
            .collect()
    }
}

/// Drift of the simulated state.
#[derive(Debug, Clone, Copy)]
pub enum Drift<'a> {
    /// The risk-neutral drift `b`.
    RiskNeutral,
    /// `k + sigma^2 h'/h`, the drift under the measure transformed by `h`.
    Transformed(&'a GridFunction),
}

/// Simulated paths at the record times.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub config: SimConfig,
    pub scheme: Scheme,
    pub times: Vec<f64>,
    /// `x[j][p]`: state of path `p` at `times[j]`.
    pub x: Vec<Vec<f64>>,
    /// `ln G` alongside `x`.
    pub ln_g: Vec<Vec<f64>>,
    /// Time at which a path was absorbed at a truncation edge.
    pub absorbed: Vec<Option<f64>>,
}

impl Ensemble {
    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
    }

    fn alive(&self, j: usize, p: usize) -> bool {
        self.absorbed[p].is_none_or(|a| a > self.times[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithCI {
    pub estimate: f64,
    pub se: f64,
    pub paths_used: usize,
    pub discards: usize,
}

impl EstimateWithCI {
    /// Sample mean and standard error; `None` entries are discards.
    pub fn from_samples<I: IntoIterator<Item = Option<f64>>>(samples: I) -> Self {
        let vals: Vec<Option<f64>> = samples.into_iter().collect();
        let discards = vals.iter().filter(|v| v.is_none()).count();
        let used: Vec<f64> = vals.into_iter().flatten().collect();
        let n = used.len();
        if n == 0 {
            return EstimateWithCI {
                estimate: f64::NAN,
                se: f64::NAN,
                paths_used: 0,
                discards,
            };
        }
        let mut s = NeumaierSum::new();
        used.iter().for_each(|&v| s.add(v));
        let mean = s.value() / n as f64;
        let mut q = NeumaierSum::new();
        used.iter().for_each(|&v| q.add((v - mean) * (v - mean)));
        let var = if n > 1 { q.value() / (n - 1) as f64 } else { 0.0 };
        EstimateWithCI {
            estimate: mean,
            se: (var / n as f64).sqrt(),
            paths_used: n,
            discards,
        }
    }

    pub fn check_discards(self) -> Result<Self, McError> {
        let paths = self.paths_used + self.discards;
        if self.discards as f64 > MAX_DISCARD_FRACTION * paths as f64 {
            return Err(McError::ExcessDiscards {
                discards: self.discards,
                paths,
            });
        }
        Ok(self)
    }

    /// `|estimate - target| <= k se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.estimate - target).abs() <= k * self.se
    }
}

fn truncation_edges(model: &MarketModel) -> (f64, f64) {
    let n = model.truncation.max_level;
    let ch = model.chart;
    (ch.x(ch.edge_y(true, n, model.xi)), ch.x(ch.edge_y(false, n, model.xi)))
}

struct PathOut {
    x: Vec<f64>,
    ln_g: Vec<f64>,
    absorbed: Option<f64>,
}

fn drift_at(drift: Drift, x: f64, b: f64, sigma: f64, v: f64) -> Option<f64> {
    match drift {
        Drift::RiskNeutral => Some(b),
        Drift::Transformed(h) => {
            let w = h.dlog(x).ok()?;
            Some(b - v * sigma + sigma * sigma * w)
        }
    }
}

fn simulate_path(
    model: &MarketModel,
    cfg: &SimConfig,
    scheme: Scheme,
    drift: Drift,
    rec: &[(f64, usize)],
    edges: (f64, f64),
    path: usize,
) -> PathOut {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path as u64);
    let dt = cfg.dt();
    let sub = 1usize << cfg.refine;
    let sq = (dt / sub as f64).sqrt();
    let c = model.c;
    let mut x = model.xi;
    let mut y = match scheme {
        Scheme::LogEuler => (x - c).ln(),
        Scheme::EulerMaruyama => x,
    };
    let mut ln_g = 0.0;
    let mut out = PathOut {
        x: Vec::with_capacity(rec.len()),
        ln_g: Vec::with_capacity(rec.len()),
        absorbed: None,
    };
    let mut next = 0;
    let absorb = |out: &mut PathOut, step: usize, x: f64, ln_g: f64| {
        out.absorbed = Some(step as f64 * dt);
        while out.x.len() < rec.len() {
            out.x.push(x);
            out.ln_g.push(ln_g);
        }
    };
    for step in 1..=cfg.steps {
        let dw: f64 = (0..sub).map(|_| rng.sample::<f64, _>(StandardNormal)).sum::<f64>() * sq;
        let Ok(k) = model.coeffs_unchecked(x) else {
            absorb(&mut out, step, x, ln_g);
            return out;
        };
        let Some(mu) = drift_at(drift, x, k.b, k.sigma, k.v) else {
            absorb(&mut out, step, x, ln_g);
            return out;
        };
        ln_g += (k.r + 0.5 * k.v * k.v) * dt + k.v * dw;
        match scheme {
            Scheme::EulerMaruyama => {
                y += mu * dt + k.sigma * dw;
                x = y;
            }
            Scheme::LogEuler => {
                let u = x - c;
                let s = k.sigma / u;
                y += (mu / u - 0.5 * s * s) * dt + s * dw;
                x = c + y.exp();
            }
        }
        if !(x > edges.0 && x < edges.1) {
            absorb(&mut out, step, x, ln_g);
            return out;
        }
        while next < rec.len() && rec[next].1 == step {
            out.x.push(x);
            out.ln_g.push(ln_g);
            next += 1;
        }
    }
    out
}

/// Joint paths of `X` and `ln G` under `Q` (or a transformed measure), with
/// `d ln G = (r + v^2/2) dt + v dW` on the same Brownian increments.
pub fn simulate(model: &MarketModel, cfg: &SimConfig, drift: Drift) -> Result<Ensemble, McError> {
    cfg.validate(model)?;
    let scheme = cfg.scheme.unwrap_or_else(|| Scheme::default_for(model));
    let rec = cfg.record_steps();
    let edges = truncation_edges(model);
    let paths: Vec<PathOut> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| simulate_path(model, cfg, scheme, drift, &rec, edges, p))
        .collect();
    let nt = rec.len();
    let mut x = vec![Vec::with_capacity(cfg.paths); nt];
    let mut ln_g = vec![Vec::with_capacity(cfg.paths); nt];
    let mut absorbed = Vec::with_capacity(cfg.paths);
    for p in paths {
        for j in 0..nt {
            x[j].push(p.x[j]);
            ln_g[j].push(p.ln_g[j]);
        }
        absorbed.push(p.absorbed);
    }
    Ok(Ensemble {
        config: cfg.clone(),
        scheme,
        times: rec.iter().map(|r| r.0).collect(),
        x,
        ln_g,
        absorbed,
    })
}

#[allow(non_snake_case)]
pub fn simulate_Q(model: &MarketModel, cfg: &SimConfig) -> Result<Ensemble, McError> {
    simulate(model, cfg, Drift::RiskNeutral)
}

/// `e^(lambda t) h(X_t) G_t^(-1) / h(xi)` per path at record index `j`.
pub fn martingale_samples(
    ens: &Ensemble,
    j: usize,
    lambda: f64,
    h: &GridFunction,
    xi: f64,
) -> Result<Vec<Option<f64>>, McError> {
    let ln_h0 = h.ln_value(xi).map_err(|e| McError::Eval {
        x: xi,
        detail: e.to_string(),
    })?;
    let t = ens.times[j];
    Ok((0..ens.absorbed.len())
        .map(|p| {
            if !ens.alive(j, p) {
                return None;
            }
            let lh = h.ln_value(ens.x[j][p]).ok()?;
            Some((lambda * t + lh - ln_h0 - ens.ln_g[j][p]).exp())
        })
        .collect())
}

/// Estimate of `E_Q[e^(lambda T) h(X_T) G_T^(-1)] / h(xi)` from an existing ensemble.
pub fn martingale_estimate(
    ens: &Ensemble,
    model: &MarketModel,
    lambda: f64,
    h: &GridFunction,
) -> Result<EstimateWithCI, McError> {
    let j = ens.times.len() - 1;
    EstimateWithCI::from_samples(martingale_samples(ens, j, lambda, h, model.xi)?).check_discards()
}

/// Martingale test of the candidate `(lambda, h)` at the horizon.
pub fn martingale_check(
    model: &MarketModel,
    lambda: f64,
    h: &GridFunction,
    cfg: &SimConfig,
) -> Result<EstimateWithCI, McError> {
    let ens = simulate_Q(model, cfg)?;
    martingale_estimate(&ens, model, lambda, h)
}

/// Martingale estimates at step `dt` and `dt / 2` on the same Brownian paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepHalving {
    pub coarse: EstimateWithCI,
    pub fine: EstimateWithCI,
    /// Standard error of the per-path difference.
    pub diff_se: f64,
}

impl StepHalving {
    pub fn change(&self) -> f64 {
        self.fine.estimate - self.coarse.estimate
    }
}

pub fn step_halving_check(
    model: &MarketModel,
    lambda: f64,
    h: &GridFunction,
    cfg: &SimConfig,
) -> Result<StepHalving, McError> {
    let coarse_cfg = SimConfig {
        refine: cfg.refine + 1,
        ..cfg.clone()
    };
    let fine_cfg = SimConfig {
        steps: 2 * cfg.steps,
        ..cfg.clone()
    };
    let j = |e: &Ensemble| e.times.len() - 1;
    let ec = simulate_Q(model, &coarse_cfg)?;
    let ef = simulate_Q(model, &fine_cfg)?;
    let sc = martingale_samples(&ec, j(&ec), lambda, h, model.xi)?;
    let sf = martingale_samples(&ef, j(&ef), lambda, h, model.xi)?;
    let diff = sc.iter().zip(&sf).map(|(a, b)| Some(b.as_ref()? - a.as_ref()?));
    Ok(StepHalving {
        diff_se: EstimateWithCI::from_samples(diff).se,
        coarse: EstimateWithCI::from_samples(sc).check_discards()?,
        fine: EstimateWithCI::from_samples(sf).check_discards()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub t: f64,
    /// The expectation whose log-rate is taken.
    pub expectation: EstimateWithCI,
    pub rate: f64,
    pub rate_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub ladder: Vec<LadderPoint>,
    /// Extrapolation of the last two rates assuming `rate(T) = a + b/T`.
    pub extrapolated: f64,
    pub extrapolated_se: f64,
}

/// `sign / T ln(E)` with its delta-method error.
fn ladder_point(t: f64, e: EstimateWithCI, sign: f64) -> LadderPoint {
    LadderPoint {
        t,
        expectation: e,
        rate: sign * e.estimate.ln() / t,
        rate_se: e.se / (e.estimate * t),
    }
}

fn extrapolate(ladder: Vec<LadderPoint>) -> RateEstimate {
    let n = ladder.len();
    let (extrapolated, extrapolated_se) = if n >= 2 {
        let (a, b) = (&ladder[n - 2], &ladder[n - 1]);
        let w = b.t - a.t;
        (
            (b.t * b.rate - a.t * a.rate) / w,
            ((b.t * b.rate_se).powi(2) + (a.t * a.rate_se).powi(2)).sqrt() / w,
        )
    } else {
        (ladder[0].rate, ladder[0].rate_se)
    };
    RateEstimate {
        ladder,
        extrapolated,
        extrapolated_se,
    }
}

fn ladder_config(cfg: &SimConfig, ladder: &[f64]) -> Result<SimConfig, McError> {
    let mut ts = ladder.to_vec();
    ts.sort_by(f64::total_cmp);
    let Some(&last) = ts.last() else {
        return Err(McError::InvalidConfig("empty T ladder".into()));
    };
    let mut c = cfg.clone();
    // Keep the step size of `cfg` over the longest horizon.
    c.steps = ((cfg.steps as f64) * last / cfg.horizon).round().max(1.0) as usize;
    c.horizon = last;
    c.record = ts;
    Ok(c)
}

/// `-(1/T) ln E_Q[G_T^(-1)]` over a ladder of horizons.
pub fn long_term_yield(model: &MarketModel, ladder: &[f64], cfg: &SimConfig) -> Result<RateEstimate, McError> {
    let c = ladder_config(cfg, ladder)?;
    let ens = simulate_Q(model, &c)?;
    let mut pts = Vec::new();
    for (j, &t) in ens.times.iter().enumerate() {
        let s = (0..c.paths).map(|p| ens.alive(j, p).then(|| (-ens.ln_g[j][p]).exp()));
        pts.push(ladder_point(t, EstimateWithCI::from_samples(s).check_discards()?, -1.0));
    }
    Ok(extrapolate(pts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRates {
    /// `(1/T) ln E_P[f(X_T) / phi(X_T)]` with `X` under the recovered drift.
    pub objective: RateEstimate,
    /// `-(1/T) ln (E_Q[G_T^(-1) f(X_T)] / f(xi))`, which tends to `beta` when
    /// `f` is a reference function.
    pub risk_neutral: RateEstimate,
}

fn eval_f(f: &Coefficient, x: f64) -> Result<f64, McError> {
    let v = f.eval(x).map_err(|e| McError::Eval { x, detail: e.to_string() })?;
    if !(v > 0.0) {
        return Err(McError::NonPositiveF { x, value: v });
    }
    Ok(v)
}

/// Growth rates of `f / phi` under the recovered measure and of `f` against
/// the numeraire under `Q`.
pub fn reference_function_rate(
    model: &MarketModel,
    result: &RecoveryResult,
    f: &Coefficient,
    ladder: &[f64],
    cfg: &SimConfig,
) -> Result<ReferenceRates, McError> {
    let c = ladder_config(cfg, ladder)?;
    let f_xi = eval_f(f, model.xi)?;
    let phi = &result.phi;
    let ln_phi_xi = phi.ln_value(model.xi).map_err(|e| McError::Eval {
        x: model.xi,
        detail: e.to_string(),
    })?;

    let ens_p = simulate(model, &c, Drift::Transformed(phi))?;
    let mut obj = Vec::new();
    for (j, &t) in ens_p.times.iter().enumerate() {
        let mut s = Vec::with_capacity(c.paths);
        for p in 0..c.paths {
            if !ens_p.alive(j, p) {
                s.push(None);
                continue;
            }
            let x = ens_p.x[j][p];
            let Ok(lp) = phi.ln_value(x) else {
                s.push(None);
                continue;
            };
            s.push(Some(eval_f(f, x)? / f_xi * (ln_phi_xi - lp).exp()));
        }
        obj.push(ladder_point(t, EstimateWithCI::from_samples(s).check_discards()?, 1.0));
    }

    let ens_q = simulate_Q(model, &c)?;
    let mut rn = Vec::new();
    for (j, &t) in ens_q.times.iter().enumerate() {
        let mut s = Vec::with_capacity(c.paths);
        for p in 0..c.paths {
            if !ens_q.alive(j, p) {
                s.push(None);
                continue;
            }
            let x = ens_q.x[j][p];
            s.push(Some(eval_f(f, x)? / f_xi * (-ens_q.ln_g[j][p]).exp()));
        }
        rn.push(ladder_point(t, EstimateWithCI::from_samples(s).check_discards()?, -1.0));
    }
    Ok(ReferenceRates {
        objective: extrapolate(obj),
        risk_neutral: extrapolate(rn),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use crate::model::builtin;
    use crate::sturm::{solve_h, Tolerances};
    use std::collections::BTreeMap;

    #[test]
    fn config_validation() {
        let m = builtin("brownian").unwrap();
        assert!(SimConfig::new(0.0, 10, 10, 1).validate(&m).is_err());
        assert!(SimConfig::new(1.0, 0, 10, 1).validate(&m).is_err());
        let mut c = SimConfig::new(1.0, 10, 10, 1);
        c.scheme = Some(Scheme::LogEuler);
        assert!(c.validate(&m).is_err());
        assert_eq!(Scheme::default_for(&builtin("cir").unwrap()), Scheme::LogEuler);
    }

    #[test]
    fn brownian_moments() {
        let m = builtin("brownian").unwrap();
        let ens = simulate_Q(&m, &SimConfig::new(1.0, 50, 20_000, 7)).unwrap();
        let x = &ens.x[0];
        let mean = EstimateWithCI::from_samples(x.iter().map(|&v| Some(v)));
        assert!(mean.within(0.0, 3.0), "{mean:?}");
        let sq = EstimateWithCI::from_samples(x.iter().map(|&v| Some(v * v)));
        assert!(sq.within(1.0, 3.0), "{sq:?}");
        assert!(ens.ln_g[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn brownian_constant_is_exact_martingale() {
        let m = builtin("brownian").unwrap();
        let t = solve_h(&m, 0.0, 0.0, &Tolerances::default()).unwrap();
        let ens = simulate_Q(&m, &SimConfig::new(2.0, 20, 500, 3)).unwrap();
        let s = martingale_samples(&ens, 0, 0.0, &t.h, 0.0).unwrap();
        assert!(s.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn gbm_discount_factor() {
        let m = builtin("gbm").unwrap();
        let ens = simulate_Q(&m, &SimConfig::new(1.0, 20, 20_000, 11)).unwrap();
        let e = EstimateWithCI::from_samples(ens.ln_g[0].iter().map(|g| Some((-g).exp())));
        assert!(e.within((-0.05f64).exp(), 3.0), "{e:?}");
    }

    #[test]
    fn identical_seeds_identical_paths() {
        let m = builtin("cir").unwrap();
        let c = SimConfig::new(0.5, 100, 300, 42);
        let a = simulate_Q(&m, &c).unwrap();
        let b = simulate_Q(&m, &c).unwrap();
        assert_eq!(a, b);
        let other = simulate_Q(&m, &SimConfig { seed: 43, ..c }).unwrap();
        assert_ne!(a.x, other.x);
    }

    #[test]
    fn refined_steps_share_the_brownian_path() {
        let m = builtin("brownian").unwrap();
        let coarse = SimConfig {
            refine: 1,
            ..SimConfig::new(1.0, 25, 50, 8)
        };
        let fine = SimConfig::new(1.0, 50, 50, 8);
        let a = simulate_Q(&m, &coarse).unwrap();
        let b = simulate_Q(&m, &fine).unwrap();
        for (x, y) in a.x[0].iter().zip(&b.x[0]) {
            assert!((x - y).abs() < 1e-12, "{x} {y}");
        }
    }

    #[test]
    fn record_times_follow_the_path() {
        let m = builtin("brownian").unwrap();
        let mut c = SimConfig::new(2.0, 40, 4, 5);
        c.record = vec![1.0];
        let ens = simulate_Q(&m, &c).unwrap();
        assert_eq!(ens.times, vec![1.0, 2.0]);
        assert_eq!(ens.time_index(2.0), Some(1));
    }

    #[test]
    fn reference_rate_of_phi_is_zero() {
        let m = builtin("brownian").unwrap();
        let res = crate::recovery::recover_recurrent(&m, &Tolerances::default()).unwrap();
        let f = Coefficient::new(parse_expr("1", &BTreeMap::new()).unwrap());
        let r = reference_function_rate(&m, &res, &f, &[1.0, 2.0], &SimConfig::new(2.0, 20, 200, 9)).unwrap();
        for p in &r.objective.ladder {
            assert!(p.rate.abs() < 1e-12);
        }
    }

    #[test]
    fn excess_discards_are_reported() {
        let e = EstimateWithCI::from_samples([Some(1.0), None, Some(1.0)]);
        assert!(matches!(e.check_discards(), Err(McError::ExcessDiscards { discards: 1, paths: 3 })));
    }
}
