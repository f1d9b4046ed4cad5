//! Dormand–Prince 5(4) with step-size control and fifth-order dense output.
//!
//! The stepper is driven one accepted step at a time so that callers can
//! inspect each step (event location, switching state representation)
//! before continuing.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h}){}", detail_suffix(.detail))]
    StepSizeUnderflow { t: f64, h: f64, detail: Option<String> },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("step budget of {steps} exhausted at t = {t}")]
    Budget { t: f64, steps: usize },
    #[error("right-hand side failed at t = {t}: {message}")]
    Rhs { t: f64, message: String },
}

fn detail_suffix(detail: &Option<String>) -> String {
    match detail {
        Some(d) => format!(": {d}"),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dopri5Options {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Steps smaller than this times `max(1, |t|)` count as underflow.
    pub min_step_rel: f64,
    /// Upper bound on |h|; infinite means unbounded.
    pub max_step: f64,
}

impl Default for Dopri5Options {
    fn default() -> Self {
        Dopri5Options {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 2_000_000,
            min_step_rel: 1e-14,
            max_step: f64::INFINITY,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step with its continuous extension.
#[derive(Debug, Clone, Copy)]
pub struct Step<const N: usize> {
    pub t0: f64,
    pub t1: f64,
    pub y0: [f64; N],
    pub y1: [f64; N],
    pub f0: [f64; N],
    pub f1: [f64; N],
    rcont: [[f64; N]; 5],
}

impl<const N: usize> Step<N> {
    /// Dense-output value at `t` in `[t0, t1]`.
    pub fn eval(&self, t: f64) -> [f64; N] {
        let h = self.t1 - self.t0;
        let th = if h == 0.0 { 0.0 } else { (t - self.t0) / h };
        let th1 = 1.0 - th;
        let mut out = [0.0; N];
        for i in 0..N {
            let r = |k: usize| self.rcont[k][i];
            out[i] = r(0) + th * (r(1) + th1 * (r(2) + th * (r(3) + th1 * r(4))));
        }
        out
    }
}

pub type Rhs<'a, const N: usize> = dyn FnMut(f64, &[f64; N]) -> Result<[f64; N], OdeError> + 'a;

pub struct Dopri5<'a, const N: usize> {
    f: &'a mut Rhs<'a, N>,
    pub t: f64,
    pub y: [f64; N],
    fy: [f64; N],
    h: f64,
    opts: Dopri5Options,
    pub steps: usize,
    pub rejected: usize,
}

fn norm<const N: usize>(v: &[f64; N], sc: &[f64; N]) -> f64 {
    let mut s = 0.0;
    for i in 0..N {
        let q = v[i] / sc[i];
        s += q * q;
    }
    (s / N as f64).sqrt()
}

fn all_finite<const N: usize>(v: &[f64; N]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl<'a, const N: usize> Dopri5<'a, N> {
    pub fn new(f: &'a mut Rhs<'a, N>, t0: f64, y0: [f64; N], opts: Dopri5Options) -> Result<Self, OdeError> {
        if !all_finite(&y0) {
            return Err(OdeError::NonFinite { t: t0 });
        }
        let fy = f(t0, &y0)?;
        if !all_finite(&fy) {
            return Err(OdeError::NonFinite { t: t0 });
        }
        Ok(Dopri5 {
            f,
            t: t0,
            y: y0,
            fy,
            h: 0.0,
            opts,
            steps: 0,
            rejected: 0,
        })
    }

    /// Restarts from a new state (e.g. after a change of variables).
    pub fn reset(&mut self, t: f64, y: [f64; N]) -> Result<(), OdeError> {
        let fy = (self.f)(t, &y)?;
        if !all_finite(&y) || !all_finite(&fy) {
            return Err(OdeError::NonFinite { t });
        }
        self.t = t;
        self.y = y;
        self.fy = fy;
        Ok(())
    }

    fn scale(&self, a: &[f64; N], b: &[f64; N]) -> [f64; N] {
        let mut sc = [0.0; N];
        for i in 0..N {
            sc[i] = self.opts.atol + self.opts.rtol * a[i].abs().max(b[i].abs());
        }
        sc
    }

    /// Initial step heuristic (Hairer, Nørsett & Wanner, II.4).
    fn initial_step(&mut self, dir: f64, span: f64) -> f64 {
        let sc = self.scale(&self.y, &self.y);
        let d0 = norm(&self.y, &sc);
        let d1 = norm(&self.fy, &sc);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(span).min(self.opts.max_step);
        let mut y1 = [0.0; N];
        for i in 0..N {
            y1[i] = self.y[i] + dir * h0 * self.fy[i];
        }
        let d2 = match (self.f)(self.t + dir * h0, &y1) {
            Ok(f1) if all_finite(&f1) => {
                let mut diff = [0.0; N];
                for i in 0..N {
                    diff[i] = f1[i] - self.fy[i];
                }
                norm(&diff, &sc) / h0
            }
            _ => return h0 * 1e-3,
        };
        let m = d1.max(d2);
        let h1 = if m <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / m).powf(0.2)
        };
        // Error control shrinks a poor guess; never start at the underflow floor.
        let floor = 100.0 * self.opts.min_step_rel * self.t.abs().max(1.0);
        (100.0 * h0).min(h1).max(floor).min(span).min(self.opts.max_step)
    }

    /// Takes one accepted step toward `t_end`, never passing it.
    pub fn step_to(&mut self, t_end: f64) -> Result<Step<N>, OdeError> {
        let span = (t_end - self.t).abs();
        let dir = if t_end >= self.t { 1.0 } else { -1.0 };
        if span == 0.0 {
            return Ok(Step {
                t0: self.t,
                t1: self.t,
                y0: self.y,
                y1: self.y,
                f0: self.fy,
                f1: self.fy,
                rcont: [self.y, [0.0; N], [0.0; N], [0.0; N], [0.0; N]],
            });
        }
        if self.h <= 0.0 {
            self.h = self.initial_step(dir, span);
        }
        let mut last_failure: Option<String> = None;
        let mut rejected_in_row = false;
        loop {
            if self.steps + self.rejected >= self.opts.max_steps {
                return Err(OdeError::Budget {
                    t: self.t,
                    steps: self.steps,
                });
            }
            let mut h = self.h.min(self.opts.max_step);
            let mut lands = false;
            if h >= span * (1.0 - 1e-12) {
                h = span;
                lands = true;
            }
            let min_h = self.opts.min_step_rel * self.t.abs().max(1.0);
            if h < min_h && !lands {
                return Err(OdeError::StepSizeUnderflow {
                    t: self.t,
                    h,
                    detail: last_failure,
                });
            }
            match self.attempt(dir * h) {
                Ok((y1, f1, err, k)) => {
                    if err <= 1.0 {
                        let t0 = self.t;
                        let t1 = if lands { t_end } else { self.t + dir * h };
                        let step = self.make_step(t0, t1, y1, f1, &k);
                        self.t = t1;
                        self.y = y1;
                        self.fy = f1;
                        self.steps += 1;
                        let mut fac = if err == 0.0 { 10.0 } else { 0.9 * err.powf(-0.2) };
                        fac = fac.clamp(0.2, 10.0);
                        if rejected_in_row {
                            fac = fac.min(1.0);
                        }
                        // Keep the pre-landing step size when the landing
                        // step was artificially shortened.
                        let proposed = h * fac;
                        self.h = if lands { proposed.max(self.h) } else { proposed };
                        return Ok(step);
                    }
                    self.rejected += 1;
                    rejected_in_row = true;
                    let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                    self.h = h * fac;
                }
                Err(reason) => {
                    self.rejected += 1;
                    rejected_in_row = true;
                    last_failure = Some(reason);
                    self.h = h * 0.25;
                }
            }
        }
    }

    /// One trial step; `Err` carries a description of a failed stage.
    #[allow(clippy::type_complexity)]
    fn attempt(&mut self, h: f64) -> Result<([f64; N], [f64; N], f64, [[f64; N]; 7]), String> {
        let t = self.t;
        let y = self.y;
        let k1 = self.fy;
        let mut eval = |tt: f64, yy: &[f64; N]| -> Result<[f64; N], String> {
            if !all_finite(yy) {
                return Err(format!("non-finite stage at t = {tt}"));
            }
            match (self.f)(tt, yy) {
                Ok(v) if all_finite(&v) => Ok(v),
                Ok(_) => Err(format!("non-finite derivative at t = {tt}")),
                Err(e) => Err(e.to_string()),
            }
        };
        let mut ys = [0.0; N];
        for i in 0..N {
            ys[i] = y[i] + h * A21 * k1[i];
        }
        let k2 = eval(t + C2 * h, &ys)?;
        for i in 0..N {
            ys[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        let k3 = eval(t + C3 * h, &ys)?;
        for i in 0..N {
            ys[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        let k4 = eval(t + C4 * h, &ys)?;
        for i in 0..N {
            ys[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        let k5 = eval(t + C5 * h, &ys)?;
        for i in 0..N {
            ys[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let k6 = eval(t + h, &ys)?;
        let mut y1 = [0.0; N];
        for i in 0..N {
            y1[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        let k7 = eval(t + h, &y1)?;
        let mut errv = [0.0; N];
        for i in 0..N {
            errv[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let sc = self.scale(&y, &y1);
        let err = norm(&errv, &sc);
        if !err.is_finite() {
            return Err(format!("non-finite error estimate at t = {t}"));
        }
        Ok((y1, k7, err, [k1, k2, k3, k4, k5, k6, k7]))
    }

    fn make_step(&self, t0: f64, t1: f64, y1: [f64; N], f1: [f64; N], k: &[[f64; N]; 7]) -> Step<N> {
        let h = t1 - t0;
        let y0 = self.y;
        let mut rc = [[0.0; N]; 5];
        for i in 0..N {
            let dy = y1[i] - y0[i];
            let bspl = h * k[0][i] - dy;
            rc[0][i] = y0[i];
            rc[1][i] = dy;
            rc[2][i] = bspl;
            rc[3][i] = dy - h * k[6][i] - bspl;
            rc[4][i] = h
                * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i]);
        }
        Step {
            t0,
            t1,
            y0,
            y1,
            f0: self.fy,
            f1,
            rcont: rc,
        }
    }

    /// Integrates to `t_end`, calling `observe` after every accepted step.
    pub fn integrate_to<O: FnMut(&Step<N>)>(&mut self, t_end: f64, mut observe: O) -> Result<(), OdeError> {
        while self.t != t_end {
            let step = self.step_to(t_end)?;
            observe(&step);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let mut f = |_t: f64, y: &[f64; 1]| Ok([-y[0]]);
        let mut s = Dopri5::new(&mut f, 0.0, [1.0], Dopri5Options::default()).unwrap();
        s.integrate_to(5.0, |_| {}).unwrap();
        assert!((s.y[0] - (-5f64).exp()).abs() < 1e-11);
    }

    #[test]
    fn harmonic_oscillator_backwards_with_dense_output() {
        let mut f = |_t: f64, y: &[f64; 2]| Ok([y[1], -y[0]]);
        let mut s = Dopri5::new(&mut f, 0.0, [0.0, 1.0], Dopri5Options::default()).unwrap();
        let mut worst: f64 = 0.0;
        s.integrate_to(-10.0, |step| {
            for j in 0..=10 {
                let t = step.t0 + (step.t1 - step.t0) * j as f64 / 10.0;
                let v = step.eval(t);
                worst = worst.max((v[0] - t.sin()).abs());
            }
        })
        .unwrap();
        assert!((s.y[0] - (-10f64).sin()).abs() < 1e-9);
        assert!(worst < 1e-8, "dense output error {worst}");
    }

    #[test]
    fn blow_up_is_reported_as_underflow() {
        // y' = y^2, y(0) = 1 blows up at t = 1.
        let mut f = |_t: f64, y: &[f64; 1]| Ok([y[0] * y[0]]);
        let mut s = Dopri5::new(&mut f, 0.0, [1.0], Dopri5Options::default()).unwrap();
        let err = s.integrate_to(2.0, |_| {}).unwrap_err();
        match err {
            OdeError::StepSizeUnderflow { t, .. } | OdeError::Budget { t, .. } => {
                assert!((t - 1.0).abs() < 1e-3, "t = {t}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rhs_failure_shrinks_step() {
        // The derivative is undefined past t = 1; landing exactly on 1 works.
        let mut f = |t: f64, _y: &[f64; 1]| {
            if t > 1.0 {
                Err(OdeError::Rhs {
                    t,
                    message: "outside".into(),
                })
            } else {
                Ok([1.0])
            }
        };
        let mut s = Dopri5::new(&mut f, 0.0, [0.0], Dopri5Options::default()).unwrap();
        s.integrate_to(1.0, |_| {}).unwrap();
        assert!((s.y[0] - 1.0).abs() < 1e-14);
    }
}
