//! Summation and quadrature helpers, mostly in log space.

/// Eight-point Gauss–Legendre rule on [-1, 1] as (node, weight) pairs.
pub const GAUSS_LEGENDRE_8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn neumaier_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = NeumaierSum::new();
    for x in xs {
        s.add(x);
    }
    s.value()
}

/// `ln(e^a + e^b)` without overflow.
#[inline]
pub fn ln_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a - e^b)` for `a >= b`; `-inf` when they are equal.
#[inline]
pub fn ln_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    let d = b - a;
    if d >= 0.0 {
        return f64::NEG_INFINITY;
    }
    a + (-d.exp_m1()).ln()
}

/// `ln(sum e^x_i)`.
pub fn ln_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + neumaier_sum(xs.iter().map(|&x| (x - m).exp())).ln()
}

/// Composite eight-point Gauss–Legendre rule with `panels` equal panels.
pub fn gauss_legendre<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = NeumaierSum::new();
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (t, w) in GAUSS_LEGENDRE_8 {
            acc.add(0.5 * h * w * f(mid + 0.5 * h * t));
        }
    }
    acc.value()
}

/// Log of the integral over one interval of `e^g`, where `g` is the cubic
/// Hermite interpolant of log-density values `g0, g1` with derivatives
/// `d0, d1` at the ends of an interval of width `h > 0`.
pub fn ln_integral_hermite(g0: f64, d0: f64, g1: f64, d1: f64, h: f64) -> f64 {
    let mut vals = [0.0; 8];
    for (i, (t, _)) in GAUSS_LEGENDRE_8.iter().enumerate() {
        let s = 0.5 * (t + 1.0);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        vals[i] = h00 * g0 + h10 * h * d0 + h01 * g1 + h11 * h * d1;
    }
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut acc = NeumaierSum::new();
    for (i, (_, w)) in GAUSS_LEGENDRE_8.iter().enumerate() {
        acc.add(w * (vals[i] - m).exp());
    }
    m + (0.5 * h * acc.value()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gauss_legendre_is_exact_for_degree_15() {
        let v = gauss_legendre(|x| x.powi(15) + x.powi(14), 0.0, 1.0, 1);
        assert!((v - (1.0 / 16.0 + 1.0 / 15.0)).abs() < 1e-15);
        let w: f64 = GAUSS_LEGENDRE_8.iter().map(|p| p.1).sum();
        assert!((w - 2.0).abs() < 1e-15);
    }

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let s = neumaier_sum([1.0, 1e100, 1.0, -1e100]);
        assert_eq!(s, 2.0);
    }

    #[test]
    fn log_space_helpers() {
        assert!((ln_add(1000.0, 1000.0) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((ln_sub(2f64.ln(), 0.0)).abs() < 1e-15);
        assert_eq!(ln_sub(1.0, 1.0), f64::NEG_INFINITY);
        assert!((ln_sum_exp(&[-800.0, -800.0, -800.0]) - (-800.0 + 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn hermite_integral_of_exponential() {
        // g(y) = 3y is reproduced exactly by the cubic Hermite interpolant.
        let h = 0.7;
        let got = ln_integral_hermite(0.0, 3.0, 3.0 * h, 3.0, h);
        let exact = ((3.0 * h).exp_m1() / 3.0).ln();
        assert!((got - exact).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ln_add_matches_direct(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let direct = (a.exp() + b.exp()).ln();
            prop_assert!((ln_add(a, b) - direct).abs() < 1e-12 * (1.0 + direct.abs()));
        }
    }
}
