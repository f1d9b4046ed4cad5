//! Market models: an open state interval, an initial state, and the four
//! coefficient functions (state drift `b`, state volatility `sigma`, short
//! rate `r`, numeraire volatility `v`).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::expr::{parse_expr, EvalError, Expr, ParseError, Program};

/// Number of validation points per side of `xi`.
const VALIDATION_POINTS_PER_SIDE: usize = 1024;
/// Truncation level reached by the validation grid on each side.
const VALIDATION_LEVEL: u32 = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("bad interval: need c < xi < d, got c = {c}, xi = {xi}, d = {d}")]
    BadInterval { c: f64, xi: f64, d: f64 },
    #[error("sigma is not positive at x = {x} (sigma = {value})")]
    NonPositiveSigma { x: f64, value: f64 },
    #[error("coefficient {name} is not finite at x = {x}: {detail}")]
    NonFiniteCoefficient {
        name: &'static str,
        x: f64,
        detail: String,
    },
    #[error("x = {x} lies outside the model interval ({c}, {d})")]
    OutOfDomain { x: f64, c: f64, d: f64 },
    #[error("unknown built-in model `{0}`")]
    UnknownModel(String),
    #[error("Feller condition 2*a*theta >= sigma^2 violated (a = {a}, theta = {theta}, sigma = {sigma})")]
    FellerViolated { a: f64, theta: f64, sigma: f64 },
    #[error("cannot parse coefficient {name}: {source}")]
    Parse {
        name: &'static str,
        source: ParseError,
    },
    #[error("invalid model config: {0}")]
    Config(String),
}

/// The four coefficient names, in the order used throughout.
pub const COEFFICIENT_NAMES: [&str; 4] = ["b", "sigma", "r", "v"];

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    pub expr: Expr,
    program: Program,
}

impl Coefficient {
    pub fn new(expr: Expr) -> Self {
        let program = expr.compile();
        Coefficient { expr, program }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        self.program.eval(x)
    }

    pub fn constant(&self) -> Option<f64> {
        self.program.constant()
    }
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.expr.fmt(f)
    }
}

/// Change of variable `x = X(y)` used by the numerical engine so that every
/// truncation sequence becomes (close to) arithmetic in `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chart {
    /// Both endpoints infinite: `x = y`.
    Identity,
    /// Finite left endpoint, infinite right: `x = c + e^y`.
    LeftAnchored { c: f64 },
    /// Infinite left endpoint, finite right: `x = d - e^(-y)`.
    RightAnchored { d: f64 },
    /// Both endpoints finite: `x = c + (d - c) / (1 + e^(-y))`.
    Logistic { c: f64, d: f64 },
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn logistic(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

impl Chart {
    pub fn for_interval(c: f64, d: f64) -> Chart {
        match (c.is_finite(), d.is_finite()) {
            (false, false) => Chart::Identity,
            (true, false) => Chart::LeftAnchored { c },
            (false, true) => Chart::RightAnchored { d },
            (true, true) => Chart::Logistic { c, d },
        }
    }

    #[inline]
    pub fn x(&self, y: f64) -> f64 {
        match *self {
            Chart::Identity => y,
            Chart::LeftAnchored { c } => c + y.exp(),
            Chart::RightAnchored { d } => d - (-y).exp(),
            Chart::Logistic { c, d } => {
                // Anchor on the nearer endpoint to keep relative precision.
                if y < 0.0 {
                    c + (d - c) * logistic(y)
                } else {
                    d - (d - c) * logistic(-y)
                }
            }
        }
    }

    pub fn y(&self, x: f64) -> f64 {
        match *self {
            Chart::Identity => x,
            Chart::LeftAnchored { c } => (x - c).ln(),
            Chart::RightAnchored { d } => -(d - x).ln(),
            Chart::Logistic { c, d } => (x - c).ln() - (d - x).ln(),
        }
    }

    /// `ln X'(y)`.
    #[inline]
    pub fn ln_dx(&self, y: f64) -> f64 {
        match *self {
            Chart::Identity => 0.0,
            Chart::LeftAnchored { .. } => y,
            Chart::RightAnchored { .. } => -y,
            Chart::Logistic { c, d } => (d - c).ln() - softplus(-y) - softplus(y),
        }
    }

    /// `X''(y) / X'(y)`.
    #[inline]
    pub fn curvature(&self, y: f64) -> f64 {
        match *self {
            Chart::Identity => 0.0,
            Chart::LeftAnchored { .. } => 1.0,
            Chart::RightAnchored { .. } => -1.0,
            Chart::Logistic { .. } => 1.0 - 2.0 * logistic(y),
        }
    }

    /// Chart coordinate of the level-`n` truncation edge on `side`, for a
    /// model with endpoints `c < xi < d`.
    ///
    /// Level 0 is `xi` itself. A finite endpoint is approached geometrically
    /// (`c + (xi - c) 2^-n`), an infinite one by doubling (`xi -+ 2^n`).
    pub fn edge_y(&self, left: bool, n: u32, xi: f64) -> f64 {
        if n == 0 {
            return self.y(xi);
        }
        let scale = (n as f64) * std::f64::consts::LN_2;
        let step = 2f64.powi(n as i32);
        match *self {
            Chart::Identity => {
                if left {
                    xi - step
                } else {
                    xi + step
                }
            }
            Chart::LeftAnchored { c } => {
                if left {
                    (xi - c).ln() - scale
                } else {
                    (xi - c + step).ln()
                }
            }
            Chart::RightAnchored { d } => {
                if left {
                    -(d - xi + step).ln()
                } else {
                    -(d - xi).ln() + scale
                }
            }
            Chart::Logistic { c, d } => {
                if left {
                    let near = (xi - c) * 0.5f64.powi(n as i32);
                    near.ln() - (d - c - near).ln()
                } else {
                    let near = (d - xi) * 0.5f64.powi(n as i32);
                    (d - c - near).ln() - near.ln()
                }
            }
        }
    }

    /// Whether the chart's left (right) end is a finite endpoint.
    pub fn finite_side(&self, left: bool) -> bool {
        match self {
            Chart::Identity => false,
            Chart::LeftAnchored { .. } => left,
            Chart::RightAnchored { .. } => !left,
            Chart::Logistic { .. } => true,
        }
    }
}

/// How the open interval is approximated by bounded windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    /// First level at which truncation-dependent quantities are computed.
    pub start_level: u32,
    /// No result is accepted below this level.
    pub min_level: u32,
    /// Refinement stops here; failing to settle by then is an error.
    pub max_level: u32,
    /// Accept once two successive levels agree to within this tolerance.
    pub tol: f64,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy {
            start_level: 8,
            min_level: 10,
            max_level: 30,
            tol: 1e-8,
        }
    }
}

/// Description of a model before validation, in the shape of the JSON
/// config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawModel {
    pub name: Option<String>,
    pub c: f64,
    pub d: f64,
    pub xi: f64,
    pub b: String,
    pub sigma: String,
    pub r: String,
    pub v: String,
    pub params: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    pub name: Option<String>,
    pub c: f64,
    pub d: f64,
    pub xi: f64,
    pub b: Coefficient,
    pub sigma: Coefficient,
    pub r: Coefficient,
    pub v: Coefficient,
    pub params: BTreeMap<String, f64>,
    pub chart: Chart,
    pub truncation: TruncationPolicy,
    /// The numeraire exponential is assumed to be a true martingale; this is
    /// recorded, never tested.
    pub numeraire_martingale_assumed: bool,
    pub notes: Vec<String>,
}

/// Coefficients evaluated at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub b: f64,
    pub sigma: f64,
    pub r: f64,
    pub v: f64,
}

impl Coeffs {
    #[inline]
    pub fn k(&self) -> f64 {
        self.b - self.v * self.sigma
    }
}

impl MarketModel {
    pub fn contains(&self, x: f64) -> bool {
        x > self.c && x < self.d
    }

    /// Evaluates all four coefficients, without a domain check.
    #[inline]
    pub fn coeffs_unchecked(&self, x: f64) -> Result<Coeffs, (&'static str, EvalError)> {
        Ok(Coeffs {
            b: self.b.eval(x).map_err(|e| ("b", e))?,
            sigma: self.sigma.eval(x).map_err(|e| ("sigma", e))?,
            r: self.r.eval(x).map_err(|e| ("r", e))?,
            v: self.v.eval(x).map_err(|e| ("v", e))?,
        })
    }

    pub fn coeffs(&self, x: f64) -> Result<Coeffs, ModelError> {
        if !self.contains(x) {
            return Err(ModelError::OutOfDomain {
                x,
                c: self.c,
                d: self.d,
            });
        }
        self.coeffs_unchecked(x)
            .map_err(|(name, e)| ModelError::NonFiniteCoefficient {
                name,
                x,
                detail: e.to_string(),
            })
    }

    pub fn to_raw(&self) -> RawModel {
        RawModel {
            name: self.name.clone(),
            c: self.c,
            d: self.d,
            xi: self.xi,
            b: self.b.to_string(),
            sigma: self.sigma.to_string(),
            r: self.r.to_string(),
            v: self.v.to_string(),
            params: self.params.clone(),
            notes: self.notes.clone(),
        }
    }

    /// Validates the model again from its printed form. The result equals
    /// `self` apart from the truncation policy, which is carried over.
    pub fn revalidate(&self) -> Result<MarketModel, ModelError> {
        let mut m = validate_model(&self.to_raw())?;
        m.truncation = self.truncation;
        Ok(m)
    }

    /// Points used by [`validate_model`]: `VALIDATION_POINTS_PER_SIDE` on each
    /// side of `xi`, evenly spaced in the chart coordinate out to the
    /// validation truncation level.
    pub fn validation_grid(&self) -> Vec<f64> {
        let y0 = self.chart.y(self.xi);
        let yl = self.chart.edge_y(true, VALIDATION_LEVEL, self.xi);
        let yr = self.chart.edge_y(false, VALIDATION_LEVEL, self.xi);
        let n = VALIDATION_POINTS_PER_SIDE;
        let mut xs = Vec::with_capacity(2 * n + 1);
        for i in (1..=n).rev() {
            xs.push(self.chart.x(y0 + (yl - y0) * i as f64 / n as f64));
        }
        xs.push(self.xi);
        for i in 1..=n {
            xs.push(self.chart.x(y0 + (yr - y0) * i as f64 / n as f64));
        }
        xs.retain(|&x| self.contains(x));
        xs.dedup();
        xs
    }
}

/// `k(x) = b(x) - v(x) sigma(x)`, the drift of the state under the
/// numeraire-adjusted measure.
pub fn drift_k(model: &MarketModel, x: f64) -> Result<f64, ModelError> {
    Ok(model.coeffs(x)?.k())
}

fn parse_coefficient(
    name: &'static str,
    source: &str,
    params: &BTreeMap<String, f64>,
) -> Result<Coefficient, ModelError> {
    parse_expr(source, params)
        .map(Coefficient::new)
        .map_err(|source| ModelError::Parse { name, source })
}

/// Parses the coefficients and checks them on a grid of at least 2048 points
/// spread over the interval.
pub fn validate_model(raw: &RawModel) -> Result<MarketModel, ModelError> {
    let (c, d, xi) = (raw.c, raw.d, raw.xi);
    let ordered = c < xi && xi < d;
    if !ordered || c.is_nan() || d.is_nan() || !xi.is_finite() || c == f64::INFINITY || d == f64::NEG_INFINITY {
        return Err(ModelError::BadInterval { c, xi, d });
    }
    let model = MarketModel {
        name: raw.name.clone(),
        c,
        d,
        xi,
        b: parse_coefficient("b", &raw.b, &raw.params)?,
        sigma: parse_coefficient("sigma", &raw.sigma, &raw.params)?,
        r: parse_coefficient("r", &raw.r, &raw.params)?,
        v: parse_coefficient("v", &raw.v, &raw.params)?,
        params: raw.params.clone(),
        chart: Chart::for_interval(c, d),
        truncation: TruncationPolicy::default(),
        numeraire_martingale_assumed: true,
        notes: raw.notes.clone(),
    };
    let grid = model.validation_grid();
    let mut sigmas = Vec::with_capacity(grid.len());
    for &x in &grid {
        let k = model.coeffs(x)?;
        for (name, value) in COEFFICIENT_NAMES.iter().zip([k.b, k.sigma, k.r, k.v]) {
            if !value.is_finite() {
                return Err(ModelError::NonFiniteCoefficient {
                    name,
                    x,
                    detail: format!("value {value}"),
                });
            }
        }
        sigmas.push(k.sigma);
    }
    if let Some(first) = sigmas.iter().position(|&s| s <= 0.0) {
        // Prefer reporting where sigma changes sign over an arbitrary bad point.
        let change = sigmas.windows(2).position(|w| (w[0] > 0.0) != (w[1] > 0.0));
        let (x, value) = match change {
            Some(i) => locate_sign_change(&model, grid[i], grid[i + 1]),
            None => (grid[first], sigmas[first]),
        };
        return Err(ModelError::NonPositiveSigma { x, value });
    }
    if model.name.as_deref() == Some("cir") {
        let p = |k: &str| model.params.get(k).copied().unwrap_or(f64::NAN);
        let (a, theta, sigma) = (p("a"), p("theta"), p("sigma"));
        if !(2.0 * a * theta >= sigma * sigma) {
            return Err(ModelError::FellerViolated { a, theta, sigma });
        }
    }
    Ok(model)
}

/// Bisects for the boundary between positive and non-positive sigma, and
/// returns the non-positive side of the final bracket.
fn locate_sign_change(model: &MarketModel, a: f64, b: f64) -> (f64, f64) {
    let sig = |x: f64| model.sigma.eval(x).unwrap_or(f64::NAN);
    let a_pos = sig(a) > 0.0;
    let (mut lo, mut hi) = (a, b);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (sig(mid) > 0.0) == a_pos {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = if a_pos { hi } else { lo };
    (x, sig(x))
}

pub const BUILTIN_MODELS: [&str; 4] = ["cir", "gbm", "brownian", "appendix_f"];

/// The unvalidated description of a built-in model, with `overrides` applied
/// on top of its default parameters.
pub fn builtin_raw(name: &str, overrides: &BTreeMap<String, f64>) -> Result<RawModel, ModelError> {
    let defaults: &[(&str, f64)] = match name {
        "cir" => &[("a", 1.0), ("theta", 0.05), ("sigma", 0.2), ("r0", 0.05)],
        "gbm" => &[("r", 0.05), ("delta", 0.02), ("sigma", 0.2), ("s0", 1.0)],
        "brownian" | "appendix_f" => &[],
        other => return Err(ModelError::UnknownModel(other.to_string())),
    };
    let mut params: BTreeMap<String, f64> =
        defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in overrides {
        if !params.contains_key(k) {
            return Err(ModelError::Config(format!(
                "model `{name}` has no parameter `{k}`"
            )));
        }
        params.insert(k.clone(), *v);
    }
    let s = |t: &str| t.to_string();
    let raw = match name {
        "cir" => RawModel {
            name: Some(s("cir")),
            c: 0.0,
            d: f64::INFINITY,
            xi: params["r0"],
            b: s("a*(theta - x)"),
            sigma: s("sigma*sqrt(x)"),
            r: s("x"),
            v: s("0"),
            params,
            notes: vec![],
        },
        "gbm" => RawModel {
            name: Some(s("gbm")),
            c: 0.0,
            d: f64::INFINITY,
            xi: params["s0"],
            b: s("(r - delta + sigma^2)*x"),
            sigma: s("sigma*x"),
            r: s("r"),
            v: s("sigma"),
            params,
            notes: vec![],
        },
        "brownian" => RawModel {
            name: Some(s("brownian")),
            c: f64::NEG_INFINITY,
            d: f64::INFINITY,
            xi: 0.0,
            b: s("0"),
            sigma: s("1"),
            r: s("0"),
            v: s("0"),
            params,
            notes: vec![],
        },
        _ => RawModel {
            name: Some(s("appendix_f")),
            c: f64::NEG_INFINITY,
            d: f64::INFINITY,
            xi: 0.0,
            b: s("x/(1 + x^2)^(3/4)"),
            sigma: s("sqrt(2)"),
            r: s("0"),
            v: s("0"),
            params,
            notes: vec![s(
                "operator h'' + x/(1+x^2)^(3/4) h' written as 1/2 sigma^2 h'' + k h' with sigma = sqrt(2)",
            )],
        },
    };
    Ok(raw)
}

pub fn builtin(name: &str) -> Result<MarketModel, ModelError> {
    validate_model(&builtin_raw(name, &BTreeMap::new())?)
}

fn endpoint(v: &Value) -> Result<f64, ModelError> {
    match v {
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| ModelError::Config(format!("bad endpoint {n}"))),
        Value::String(s) => match s.trim() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            t => t
                .parse()
                .map_err(|_| ModelError::Config(format!("bad endpoint `{s}`"))),
        },
        other => Err(ModelError::Config(format!("bad endpoint {other}"))),
    }
}

fn params_of(v: Option<&Value>) -> Result<BTreeMap<String, f64>, ModelError> {
    let mut out = BTreeMap::new();
    match v {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (k, v) in map {
                let x = v
                    .as_f64()
                    .ok_or_else(|| ModelError::Config(format!("parameter `{k}` is not a number")))?;
                out.insert(k.clone(), x);
            }
        }
        Some(_) => return Err(ModelError::Config("`params` must be an object".into())),
    }
    Ok(out)
}

/// Reads a model from a JSON config document.
///
/// Two shapes are accepted: `{"model": "<builtin>", "params": {...}}`, and an
/// explicit model `{"interval": [c, d], "xi": .., "b": "..", "sigma": "..",
/// "r": "..", "v": "..", "params": {...}}` where endpoints may be the strings
/// `"inf"` and `"-inf"`. `extra_params` override the file's parameters.
pub fn raw_from_json(doc: &Value, extra_params: &BTreeMap<String, f64>) -> Result<RawModel, ModelError> {
    let obj = doc
        .as_object()
        .ok_or_else(|| ModelError::Config("config must be a JSON object".into()))?;
    let mut params = params_of(obj.get("params"))?;
    params.extend(extra_params.iter().map(|(k, v)| (k.clone(), *v)));
    if let Some(name) = obj.get("model") {
        let name = name
            .as_str()
            .ok_or_else(|| ModelError::Config("`model` must be a string".into()))?;
        return builtin_raw(name, &params);
    }
    let interval = obj
        .get("interval")
        .and_then(Value::as_array)
        .ok_or_else(|| ModelError::Config("missing `interval` array".into()))?;
    if interval.len() != 2 {
        return Err(ModelError::Config("`interval` must have two entries".into()));
    }
    let text = |key: &str| -> Result<String, ModelError> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Number(n)) => Ok(n.to_string()),
            _ => Err(ModelError::Config(format!("missing coefficient `{key}`"))),
        }
    };
    let xi = obj
        .get("xi")
        .and_then(Value::as_f64)
        .ok_or_else(|| ModelError::Config("missing numeric `xi`".into()))?;
    Ok(RawModel {
        name: obj.get("name").and_then(Value::as_str).map(str::to_string),
        c: endpoint(&interval[0])?,
        d: endpoint(&interval[1])?,
        xi,
        b: text("b")?,
        sigma: text("sigma")?,
        r: text("r")?,
        v: text("v")?,
        params,
        notes: obj
            .get("notes")
            .and_then(Value::as_array)
            .map(|v| v.iter().filter_map(Value::as_str).map(str::to_string).collect())
            .unwrap_or_default(),
    })
}

fn endpoint_json(x: f64) -> Value {
    if x == f64::INFINITY {
        Value::from("inf")
    } else if x == f64::NEG_INFINITY {
        Value::from("-inf")
    } else {
        Value::from(x)
    }
}

impl MarketModel {
    /// Explicit JSON form, loadable with [`raw_from_json`].
    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::Map::new();
        if let Some(name) = &self.name {
            obj.insert("name".into(), Value::from(name.clone()));
        }
        obj.insert(
            "interval".into(),
            Value::Array(vec![endpoint_json(self.c), endpoint_json(self.d)]),
        );
        obj.insert("xi".into(), Value::from(self.xi));
        obj.insert("b".into(), Value::from(self.b.to_string()));
        obj.insert("sigma".into(), Value::from(self.sigma.to_string()));
        obj.insert("r".into(), Value::from(self.r.to_string()));
        obj.insert("v".into(), Value::from(self.v.to_string()));
        let params: serde_json::Map<String, Value> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Value::from(*v)))
            .collect();
        obj.insert("params".into(), Value::Object(params));
        if !self.notes.is_empty() {
            obj.insert("notes".into(), Value::from(self.notes.clone()));
        }
        Value::Object(obj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cir_is_valid_with_k_equal_to_b() {
        let m = builtin("cir").unwrap();
        assert_eq!(m.chart, Chart::LeftAnchored { c: 0.0 });
        assert!((drift_k(&m, 0.02).unwrap() - 0.03).abs() < 1e-15);
        assert_eq!(m.xi, 0.05);
    }

    #[test]
    fn gbm_k() {
        let m = builtin("gbm").unwrap();
        assert!((drift_k(&m, 1.0).unwrap() - 0.03).abs() < 1e-15);
        assert!((drift_k(&m, 2.0).unwrap() - 0.06).abs() < 1e-15);
    }

    #[test]
    fn brownian_k_is_zero() {
        let m = builtin("brownian").unwrap();
        for x in [-100.0, 0.0, 3.5] {
            assert_eq!(drift_k(&m, x).unwrap(), 0.0);
        }
    }

    #[test]
    fn sign_change_in_sigma_is_reported() {
        let raw = RawModel {
            name: None,
            c: 0.0,
            d: 2.0,
            xi: 0.5,
            b: "0".into(),
            sigma: "x - 1".into(),
            r: "0".into(),
            v: "0".into(),
            params: BTreeMap::new(),
            notes: vec![],
        };
        match validate_model(&raw) {
            Err(ModelError::NonPositiveSigma { x, value }) => {
                assert!((x - 1.0).abs() < 1e-12, "x = {x}");
                assert!(value <= 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_interval_and_out_of_domain() {
        let mut raw = builtin_raw("cir", &BTreeMap::new()).unwrap();
        raw.xi = -1.0;
        assert!(matches!(validate_model(&raw), Err(ModelError::BadInterval { .. })));
        let m = builtin("cir").unwrap();
        assert!(matches!(drift_k(&m, -0.1), Err(ModelError::OutOfDomain { .. })));
    }

    #[test]
    fn feller_violation_is_rejected() {
        let mut o = BTreeMap::new();
        o.insert("sigma".to_string(), 0.5);
        let raw = builtin_raw("cir", &o).unwrap();
        assert!(matches!(validate_model(&raw), Err(ModelError::FellerViolated { .. })));
    }

    #[test]
    fn non_finite_coefficient_is_rejected() {
        let raw = RawModel {
            name: None,
            c: 0.0,
            d: f64::INFINITY,
            xi: 1.0,
            b: "log(x - 1)".into(),
            sigma: "1".into(),
            r: "0".into(),
            v: "0".into(),
            params: BTreeMap::new(),
            notes: vec![],
        };
        assert!(matches!(
            validate_model(&raw),
            Err(ModelError::NonFiniteCoefficient { name: "b", .. })
        ));
    }

    #[test]
    fn validation_is_idempotent() {
        for name in BUILTIN_MODELS {
            let m = builtin(name).unwrap();
            assert_eq!(m.revalidate().unwrap(), m, "{name}");
            assert!(m.validation_grid().len() >= 1024);
        }
    }

    #[test]
    fn drift_k_is_the_pointwise_composition() {
        for name in BUILTIN_MODELS {
            let m = builtin(name).unwrap();
            for x in m.validation_grid() {
                let b = m.b.eval(x).unwrap();
                let s = m.sigma.eval(x).unwrap();
                let v = m.v.eval(x).unwrap();
                assert_eq!(drift_k(&m, x).unwrap(), b - v * s);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        for name in BUILTIN_MODELS {
            let m = builtin(name).unwrap();
            let raw = raw_from_json(&m.to_json(), &BTreeMap::new()).unwrap();
            assert_eq!(validate_model(&raw).unwrap(), m);
        }
        let doc: Value = serde_json::json!({"model": "cir", "params": {"a": 2.0}});
        let raw = raw_from_json(&doc, &BTreeMap::new()).unwrap();
        assert_eq!(raw.params["a"], 2.0);
        assert_eq!(raw.params["theta"], 0.05);
        let bad: Value = serde_json::json!({"model": "heston"});
        assert!(matches!(
            raw_from_json(&bad, &BTreeMap::new()),
            Err(ModelError::UnknownModel(_))
        ));
    }

    #[test]
    fn chart_edges_are_monotone_and_contain_xi() {
        let charts = [
            (Chart::Identity, 0.3),
            (Chart::LeftAnchored { c: 0.0 }, 0.05),
            (Chart::RightAnchored { d: 1.0 }, 0.2),
            (Chart::Logistic { c: -1.0, d: 2.0 }, 0.7),
        ];
        for (chart, xi) in charts {
            let y0 = chart.y(xi);
            let mut prev_l = y0;
            let mut prev_r = y0;
            for n in 1..40 {
                let l = chart.edge_y(true, n, xi);
                let r = chart.edge_y(false, n, xi);
                assert!(l < prev_l && r > prev_r, "{chart:?} level {n}");
                prev_l = l;
                prev_r = r;
            }
            assert!((chart.edge_y(true, 0, xi) - y0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn chart_inverts(y in -30.0f64..30.0) {
            let charts = [
                Chart::Identity,
                Chart::LeftAnchored { c: 0.0 },
                Chart::RightAnchored { d: 1.0 },
                Chart::Logistic { c: -1.0, d: 2.0 },
            ];
            for chart in charts {
                // Near a finite endpoint x itself runs out of digits.
                if y.abs() < 15.0 {
                    let back = chart.y(chart.x(y));
                    prop_assert!((back - y).abs() <= 1e-9 * (1.0 + y.abs()), "{:?}: y = {}, back = {}", chart, y, back);
                }
                // derivative check by central difference
                let h = 1e-5;
                let fd = (chart.x(y + h) - chart.x(y - h)) / (2.0 * h);
                let exact = chart.ln_dx(y).exp();
                if y.abs() < 15.0 {
                    prop_assert!((fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()));
                }
            }
        }
    }
}
