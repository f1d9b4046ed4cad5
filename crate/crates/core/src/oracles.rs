//! Closed-form references for the built-in models.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{builtin, MarketModel, ModelError};
use crate::quad::{gauss_legendre, NeumaierSum};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("Kummer M has a pole: b = {b} is a non-positive integer")]
    PoleInB { b: f64 },
    #[error("Kummer series for M({a}, {b}, {z}) did not converge")]
    NotConverged { a: f64, b: f64, z: f64 },
    #[error("Feller condition 2 a theta >= sigma^2 fails (a = {a}, theta = {theta}, sigma = {sigma})")]
    FellerViolated { a: f64, theta: f64, sigma: f64 },
    #[error("lambda = {lambda} exceeds beta_bar = {beta_bar}")]
    BetaAboveBetaBar { lambda: f64, beta_bar: f64 },
    #[error("x = {x} is outside the state space")]
    OutOfDomain { x: f64 },
    #[error("parameter `{0}` is missing")]
    MissingParameter(String),
}

const MAX_TERMS: usize = 10_000_000;

/// Sum of the Kummer series with positive argument, as `(ln|M|, sign)`.
/// Partial sums are rescaled so that huge `z` does not overflow.
fn ln_series(a: f64, b: f64, z: f64) -> Result<(f64, f64), OracleError> {
    let mut term = 1.0f64;
    let mut sum = NeumaierSum::new();
    sum.add(1.0);
    let mut ln_scale = 0.0;
    let mut max_term = 1.0f64;
    let mut n = 0usize;
    loop {
        let nf = n as f64;
        let ratio = (a + nf) / (b + nf) * z / (nf + 1.0);
        term *= ratio;
        sum.add(term);
        n += 1;
        max_term = max_term.max(term.abs());
        if term.abs() > 1e250 {
            let s = 1e-250;
            let v = sum.value() * s;
            sum = NeumaierSum::new();
            sum.add(v);
            term *= s;
            max_term *= s;
            ln_scale += 250.0 * std::f64::consts::LN_10;
        }
        let total = sum.value();
        if term == 0.0 || (ratio.abs() < 1.0 && term.abs() <= 1e-16 * total.abs()) {
            if total == 0.0 || max_term > 1e6 * total.abs() {
                // Cancellation has eaten the result.
                return Err(OracleError::NotConverged { a, b, z });
            }
            return Ok((ln_scale + total.abs().ln(), total.signum()));
        }
        if n >= MAX_TERMS {
            return Err(OracleError::NotConverged { a, b, z });
        }
    }
}

/// `(ln|M(a, b, z)|, sign)`.
pub fn ln_kummer_m(a: f64, b: f64, z: f64) -> Result<(f64, f64), OracleError> {
    if b <= 0.0 && b.fract() == 0.0 {
        return Err(OracleError::PoleInB { b });
    }
    if z == 0.0 || a == 0.0 {
        return Ok((0.0, 1.0));
    }
    if z < 0.0 {
        // Kummer's transformation M(a, b, z) = e^z M(b - a, b, -z).
        if b - a == 0.0 {
            return Ok((z, 1.0));
        }
        let (l, s) = ln_series(b - a, b, -z)?;
        return Ok((z + l, s));
    }
    ln_series(a, b, z)
}

/// Kummer's confluent hypergeometric function `M(a, b, z)`.
pub fn kummer_m(a: f64, b: f64, z: f64) -> Result<f64, OracleError> {
    let (l, s) = ln_kummer_m(a, b, z)?;
    Ok(s * l.exp())
}

/// CIR short-rate parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CirParams {
    pub a: f64,
    pub theta: f64,
    pub sigma: f64,
    pub r0: f64,
}

impl Default for CirParams {
    fn default() -> Self {
        CirParams {
            a: 1.0,
            theta: 0.05,
            sigma: 0.2,
            r0: 0.05,
        }
    }
}

fn param(model: &MarketModel, name: &str) -> Result<f64, OracleError> {
    model
        .params
        .get(name)
        .copied()
        .ok_or_else(|| OracleError::MissingParameter(name.to_string()))
}

impl CirParams {
    pub fn from_model(model: &MarketModel) -> Result<Self, OracleError> {
        Ok(CirParams {
            a: param(model, "a")?,
            theta: param(model, "theta")?,
            sigma: param(model, "sigma")?,
            r0: model.xi,
        })
    }

    /// `sqrt(a^2 + 2 sigma^2)`.
    pub fn gamma(&self) -> f64 {
        (self.a * self.a + 2.0 * self.sigma * self.sigma).sqrt()
    }

    /// `(gamma - a) / sigma^2`.
    pub fn k(&self) -> f64 {
        (self.gamma() - self.a) / (self.sigma * self.sigma)
    }

    pub fn beta_bar(&self) -> f64 {
        self.k() * self.a * self.theta
    }

    fn check(&self, lambda: f64, x: f64) -> Result<(), OracleError> {
        if 2.0 * self.a * self.theta < self.sigma * self.sigma {
            return Err(OracleError::FellerViolated {
                a: self.a,
                theta: self.theta,
                sigma: self.sigma,
            });
        }
        let bb = self.beta_bar();
        if lambda > bb * (1.0 + 1e-12) {
            return Err(OracleError::BetaAboveBetaBar { lambda, beta_bar: bb });
        }
        if !(x > 0.0) {
            return Err(OracleError::OutOfDomain { x });
        }
        Ok(())
    }

    /// Kummer parameters `(a', b, z)` of `psi_lambda(x) = e^{-kx} M(a', b, z)`.
    fn kummer_args(&self, lambda: f64, x: f64) -> (f64, f64, f64) {
        let g = self.gamma();
        let s2 = self.sigma * self.sigma;
        (
            (self.beta_bar() - lambda) / g,
            2.0 * self.a * self.theta / s2,
            2.0 * g * x / s2,
        )
    }

    /// `ln psi_lambda(x)`, the solution regular at 0.
    pub fn ln_psi(&self, lambda: f64, x: f64) -> Result<f64, OracleError> {
        self.check(lambda, x)?;
        let (ap, b, z) = self.kummer_args(lambda, x);
        let (l, s) = ln_kummer_m(ap, b, z)?;
        debug_assert!(s > 0.0);
        Ok(-self.k() * x + l)
    }

    pub fn psi(&self, lambda: f64, x: f64) -> Result<f64, OracleError> {
        Ok(self.ln_psi(lambda, x)?.exp())
    }

    /// `h_lambda(x) = psi_lambda(x) / psi_lambda(r0)`.
    pub fn h(&self, lambda: f64, x: f64) -> Result<f64, OracleError> {
        Ok((self.ln_psi(lambda, x)? - self.ln_psi(lambda, self.r0)?).exp())
    }

    /// `psi'(x) / psi(x)`, using `M'(a, b, z) = (a / b) M(a + 1, b + 1, z)`.
    pub fn dlog_psi(&self, lambda: f64, x: f64) -> Result<f64, OracleError> {
        self.check(lambda, x)?;
        let (ap, b, z) = self.kummer_args(lambda, x);
        if ap == 0.0 {
            return Ok(-self.k());
        }
        let (l0, _) = ln_kummer_m(ap, b, z)?;
        let (l1, _) = ln_kummer_m(ap + 1.0, b + 1.0, z)?;
        let dz = 2.0 * self.gamma() / (self.sigma * self.sigma);
        Ok(-self.k() + dz * ap / b * (l1 - l0).exp())
    }

    /// `M_lambda`, the largest slope at `r0`.
    pub fn big_m(&self, lambda: f64) -> Result<f64, OracleError> {
        self.dlog_psi(lambda, self.r0)
    }

    /// Mean-reversion speed of the recovered dynamics, `sqrt(a^2 + 2 sigma^2)`.
    pub fn recovered_speed(&self) -> f64 {
        self.gamma()
    }

    /// Mean-reversion level of the recovered dynamics, `a theta / gamma`.
    pub fn recovered_level(&self) -> f64 {
        self.a * self.theta / self.gamma()
    }

    /// Zero-coupon bond price `E_Q[exp(-int_0^t r)]` from `r0`.
    pub fn bond_price(&self, t: f64) -> f64 {
        let g = self.gamma();
        let e = (g * t).exp_m1();
        let den = (g + self.a) * e + 2.0 * g;
        let bfac = 2.0 * e / den;
        let ln_a = 2.0 * self.a * self.theta / (self.sigma * self.sigma)
            * ((2.0 * g).ln() + 0.5 * (self.a + g) * t - den.ln());
        (ln_a - bfac * self.r0).exp()
    }
}

/// GBM stock parameters (rate, dividend yield, volatility).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub r: f64,
    pub delta: f64,
    pub sigma: f64,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams {
            r: 0.05,
            delta: 0.02,
            sigma: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GbmWindow {
    Empty,
    Point { z: f64 },
    Interval { l1: f64, l2: f64 },
}

impl GbmParams {
    pub fn from_model(model: &MarketModel) -> Result<Self, OracleError> {
        Ok(GbmParams {
            r: param(model, "r")?,
            delta: param(model, "delta")?,
            sigma: param(model, "sigma")?,
        })
    }

    /// `1/2 - (r - delta) / sigma^2`, the centre of every window.
    pub fn centre(&self) -> f64 {
        0.5 - (self.r - self.delta) / (self.sigma * self.sigma)
    }

    pub fn beta_bar(&self) -> f64 {
        let t = self.sigma / 2.0 - (self.r - self.delta) / self.sigma;
        0.5 * t * t + self.r
    }

    pub fn window(&self, lambda: f64) -> GbmWindow {
        gbm_window(self.r, self.delta, self.sigma, lambda)
    }

    /// `c s^l1 + (1 - c) s^l2` with slope `z` at `s = 1`.
    pub fn h(&self, lambda: f64, z: f64, s: f64) -> Option<f64> {
        match self.window(lambda) {
            GbmWindow::Empty => None,
            GbmWindow::Point { z: p } => Some(s.powf(p)),
            GbmWindow::Interval { l1, l2 } => {
                let c = (l2 - z) / (l2 - l1);
                Some(c * s.powf(l1) + (1.0 - c) * s.powf(l2))
            }
        }
    }

    /// Drift of `S` under the measure recovered with `beta` and slope `z`
    /// (`phi = s^z`), divided by `s`.
    pub fn recovered_drift_coeff(&self, z: f64) -> f64 {
        (self.r - self.delta) + self.sigma * self.sigma * z
    }
}

/// The positivity window of the GBM model at `lambda`.
pub fn gbm_window(r: f64, delta: f64, sigma: f64, lambda: f64) -> GbmWindow {
    let s2 = sigma * sigma;
    let c = 0.5 - (r - delta) / s2;
    let q = 2.0 * (r - lambda) / s2;
    let disc = c * c + q;
    if disc.abs() <= 1e-12 * (c * c + q.abs()) {
        return GbmWindow::Point { z: c };
    }
    if disc < 0.0 {
        return GbmWindow::Empty;
    }
    let sq = disc.sqrt();
    GbmWindow::Interval { l1: c - sq, l2: c + sq }
}

/// The model behind `h'' + x/(1 + x^2)^(3/4) h' = -lambda h`.
pub fn appendix_f_model() -> Result<MarketModel, ModelError> {
    builtin("appendix_f")
}

/// `M_0 = 1 / int_{-inf}^0 exp(-2((1 + y^2)^(1/4) - 1)) dy`, the slope at 0
/// of the solution recessive at `-inf` when `lambda = 0`. By symmetry
/// `m_0 = -M_0`.
pub fn appendix_f_big_m0() -> f64 {
    // y = -u^2 removes the square-root cusp of the exponent at infinity.
    let f = |u: f64| 2.0 * u * (-2.0 * ((1.0 + u.powi(4)).powf(0.25) - 1.0)).exp();
    let mut total = 0.0;
    let mut a = 0.0;
    for width in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        total += gauss_legendre(f, a, a + width, 64);
        a += width;
    }
    1.0 / total
}

/// Closed-form information for the built-in models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum AnalyticModel {
    Cir(CirParams),
    Gbm(GbmParams),
    Brownian,
    AppendixF,
}

impl AnalyticModel {
    /// Closed forms for `model` when it is a built-in, matched by name.
    pub fn for_model(model: &MarketModel) -> Option<AnalyticModel> {
        match model.name.as_deref()? {
            "cir" => CirParams::from_model(model).ok().map(AnalyticModel::Cir),
            "gbm" => GbmParams::from_model(model).ok().map(AnalyticModel::Gbm),
            "brownian" => Some(AnalyticModel::Brownian),
            "appendix_f" => Some(AnalyticModel::AppendixF),
            _ => None,
        }
    }

    pub fn beta_bar(&self) -> f64 {
        match self {
            AnalyticModel::Cir(p) => p.beta_bar(),
            AnalyticModel::Gbm(p) => p.beta_bar(),
            AnalyticModel::Brownian | AnalyticModel::AppendixF => 0.0,
        }
    }

    /// `(m_lambda, M_lambda)` where a closed form exists.
    pub fn window(&self, lambda: f64) -> (Option<f64>, Option<f64>) {
        match self {
            AnalyticModel::Cir(p) => (None, p.big_m(lambda).ok()),
            AnalyticModel::Gbm(p) => match p.window(lambda) {
                GbmWindow::Empty => (None, None),
                GbmWindow::Point { z } => (Some(z), Some(z)),
                GbmWindow::Interval { l1, l2 } => (Some(l1), Some(l2)),
            },
            AnalyticModel::Brownian => {
                if lambda == 0.0 {
                    (Some(0.0), Some(0.0))
                } else {
                    (None, None)
                }
            }
            AnalyticModel::AppendixF => {
                if lambda == 0.0 {
                    let m0 = appendix_f_big_m0();
                    (Some(-m0), Some(m0))
                } else {
                    (None, None)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, ToPrimitive, Zero};
    use proptest::prelude::*;

    #[test]
    fn kummer_trivial_identities() {
        assert_eq!(kummer_m(0.3, 1.7, 0.0).unwrap(), 1.0);
        let v = kummer_m(0.7, 0.7, 1.3).unwrap();
        assert!((v / 1.3f64.exp() - 1.0).abs() < 1e-14);
        assert!(matches!(kummer_m(1.0, -2.0, 1.0), Err(OracleError::PoleInB { .. })));
    }

    #[test]
    fn kummer_against_exact_rational_series() {
        // M(1/2, 3/2, 1) = sum 1 / ((2n + 1) n!), summed exactly.
        let mut sum = BigRational::zero();
        let mut fact = BigInt::one();
        for n in 0..200u32 {
            if n > 0 {
                fact *= BigInt::from(n);
            }
            sum += BigRational::new(BigInt::one(), BigInt::from(2 * n + 1) * &fact);
        }
        let exact = sum.to_f64().unwrap();
        let got = kummer_m(0.5, 1.5, 1.0).unwrap();
        assert!((got - exact).abs() <= 1e-15 * exact, "{got} vs {exact}");
    }

    #[test]
    fn kummer_large_argument_and_negative() {
        // M(1, 2, z) = (e^z - 1) / z.
        for z in [60.0f64, 300.0, 700.0] {
            let (l, s) = ln_kummer_m(1.0, 2.0, z).unwrap();
            let exact = z + (-(-z).exp()).ln_1p() - z.ln();
            assert_eq!(s, 1.0);
            assert!((l - exact).abs() < 1e-12 * exact, "{z}");
        }
        let z = -40.0f64;
        let exact = z.exp_m1() / z;
        let got = kummer_m(1.0, 2.0, z).unwrap();
        assert!((got / exact - 1.0).abs() < 1e-13);
    }

    #[test]
    fn cir_normalization_and_beta_bar_eigenfunction() {
        let p = CirParams::default();
        assert!((p.h(0.02, p.r0).unwrap() - 1.0).abs() < 1e-15);
        let bb = p.beta_bar();
        for x in [0.01, 0.2, 1.5] {
            let want = (-p.k() * (x - p.r0)).exp();
            assert!((p.h(bb, x).unwrap() / want - 1.0).abs() < 1e-14);
        }
        assert!(matches!(p.psi(bb + 0.01, 0.1), Err(OracleError::BetaAboveBetaBar { .. })));
        let bad = CirParams { a: 0.1, ..p };
        assert!(matches!(bad.psi(0.0, 0.1), Err(OracleError::FellerViolated { .. })));
    }

    /// Relative residual of `1/2 sigma^2 x h'' + a(theta - x) h' - x h + lambda h`,
    /// with derivatives of `M` from `M^(n)(a, b, z) = (a)_n / (b)_n M(a + n, b + n, z)`.
    fn cir_residual(p: &CirParams, lambda: f64, x: f64) -> f64 {
        let (ap, b, z) = p.kummer_args(lambda, x);
        let c = 2.0 * p.gamma() / (p.sigma * p.sigma);
        let k = p.k();
        let (l0, _) = ln_kummer_m(ap, b, z).unwrap();
        let r1 = (ln_kummer_m(ap + 1.0, b + 1.0, z).unwrap().0 - l0).exp() * ap / b;
        let r2 = (ln_kummer_m(ap + 2.0, b + 2.0, z).unwrap().0 - l0).exp() * ap * (ap + 1.0) / (b * (b + 1.0));
        let d1 = -k + c * r1;
        let d2 = k * k - 2.0 * k * c * r1 + c * c * r2;
        let terms = [
            0.5 * p.sigma * p.sigma * x * d2,
            p.a * (p.theta - x) * d1,
            -x,
            lambda,
        ];
        terms.iter().sum::<f64>().abs() / terms.iter().map(|t| t.abs()).sum::<f64>()
    }

    #[test]
    fn cir_closed_form_solves_the_equation() {
        let p = CirParams::default();
        for lambda in [-0.5, 0.0, 0.02, 0.049] {
            for i in 0..1000 {
                let x = 1e-3 * (2e3f64).powf(i as f64 / 999.0);
                let r = cir_residual(&p, lambda, x);
                assert!(r < 1e-8, "lambda {lambda} x {x}: {r}");
            }
        }
    }

    #[test]
    fn cir_slope_matches_high_precision_value() {
        // d/dx ln psi at r0 for lambda = 0.02, from 30-digit arithmetic.
        let p = CirParams::default();
        assert!((p.big_m(0.02).unwrap() - 0.434_580_377_195_445).abs() < 1e-13);
    }

    #[test]
    fn cir_bond_price_limits() {
        let p = CirParams::default();
        assert!((p.bond_price(0.0) - 1.0).abs() < 1e-15);
        // Short maturity: P ~ exp(-r0 t).
        let t = 1e-4;
        assert!((p.bond_price(t) / (-p.r0 * t).exp() - 1.0).abs() < 1e-8);
        // Forward rates tend to 2 a theta / (a + gamma).
        let t = 40.0;
        let fwd = p.bond_price(t).ln() - p.bond_price(t + 1.0).ln();
        let lim = 2.0 * p.a * p.theta / (p.a + p.gamma());
        assert!((fwd - lim).abs() < 1e-12, "{fwd} {lim}");
        assert!((lim - p.beta_bar()).abs() < 1e-15);
    }

    #[test]
    fn gbm_window_cases() {
        let p = GbmParams::default();
        match p.window(0.0) {
            GbmWindow::Interval { l1, l2 } => {
                assert!((l1 + 1.850_781_059_358_212).abs() < 1e-12);
                assert!((l2 - 1.350_781_059_358_212).abs() < 1e-12);
            }
            w => panic!("{w:?}"),
        }
        assert_eq!(p.window(p.beta_bar()), GbmWindow::Point { z: p.centre() });
        assert!((p.centre() + 0.25).abs() < 1e-15);
        assert!((p.beta_bar() - 0.05125).abs() < 1e-15);
        assert_eq!(p.window(p.beta_bar() + 1e-6), GbmWindow::Empty);
    }

    #[test]
    fn gbm_mixture_solves_the_equation() {
        let p = GbmParams::default();
        let s2 = p.sigma * p.sigma;
        for (lambda, z) in [(0.0, 0.3), (-0.2, -1.0), (0.05, -0.2)] {
            for i in 0..1000 {
                let s = 1e-3 * (1e6f64).powf(i as f64 / 999.0);
                let d = 1e-4 * s;
                let h = |t: f64| p.h(lambda, z, t).unwrap();
                let (h0, hp, hm) = (h(s), h(s + d), h(s - d));
                let d1 = (hp - hm) / (2.0 * d);
                let d2 = (hp - 2.0 * h0 + hm) / (d * d);
                let terms = [0.5 * s2 * s * s * d2, (p.r - p.delta) * s * d1, -p.r * h0, lambda * h0];
                let res = terms.iter().sum::<f64>().abs() / terms.iter().map(|t| t.abs()).sum::<f64>();
                assert!(res < 1e-6, "{lambda} {z} {s}: {res}");
            }
        }
    }

    #[test]
    fn appendix_f_slope() {
        // Composite trapezoid on the original variable with a long range.
        let g = |y: f64| (-2.0 * ((1.0 + y * y).powf(0.25) - 1.0)).exp();
        let n = 2_000_000;
        let lo = -6000.0;
        let h = -lo / n as f64;
        let mut s = 0.5 * (g(lo) + g(0.0));
        for i in 1..n {
            s += g(lo + i as f64 * h);
        }
        let trap = 1.0 / (s * h);
        assert!((appendix_f_big_m0() - trap).abs() < 1e-6, "{} {}", appendix_f_big_m0(), trap);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn kummer_equal_parameters_give_exponential(a in 0.05f64..5.0, z in -60.0f64..60.0) {
            let v = kummer_m(a, a, z).unwrap();
            prop_assert!((v - z.exp()).abs() <= 1e-10 * z.exp());
        }
    }
}
