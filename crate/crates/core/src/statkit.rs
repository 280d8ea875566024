//! Special functions and distribution primitives: regularized incomplete
//! gamma, chi-square CDF/survival/quantile and the standard normal CDF.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TailProb(f64);

impl TailProb {
    pub fn new(p: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&p) {
            Ok(Self(p))
        } else {
            Err(Error::Domain(format!("probability {p} outside [0, 1]")))
        }
    }

    fn clamped(p: f64) -> Self {
        Self(p.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const MAX_ITER: usize = 100_000;
const EPS: f64 = 1e-16;

/// Regularized incomplete gamma pair `(P(a,x), Q(a,x))`.
///
/// Series for `x < a + 1`, Lentz continued fraction otherwise; the
/// complementary value is returned directly from whichever branch ran so
/// tiny tails keep full relative precision.
pub fn regularized_gamma(a: f64, x: f64) -> (f64, f64) {
    debug_assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return (0.0, 1.0);
    }
    if x.is_infinite() {
        return (1.0, 0.0);
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        let p = (log_prefactor + sum.ln()).exp().min(1.0);
        (p, 1.0 - p)
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        let q = (log_prefactor + h.ln()).exp().min(1.0);
        (1.0 - q, q)
    }
}

fn check_chi2_args(x: f64, dof: f64) -> Result<()> {
    if !(dof > 0.0) || !dof.is_finite() {
        return Err(Error::Domain(format!("degrees of freedom must be positive, got {dof}")));
    }
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("chi-square argument must be nonnegative, got {x}")));
    }
    Ok(())
}

/// `P(χ²_ν ≤ x)`.
pub fn chi2_cdf(x: f64, dof: f64) -> Result<TailProb> {
    check_chi2_args(x, dof)?;
    Ok(TailProb::clamped(regularized_gamma(0.5 * dof, 0.5 * x).0))
}

/// Upper tail `P(χ²_ν > x)`, computed without `1 − cdf` cancellation.
pub fn chi2_sf(x: f64, dof: f64) -> Result<TailProb> {
    check_chi2_args(x, dof)?;
    Ok(TailProb::clamped(regularized_gamma(0.5 * dof, 0.5 * x).1))
}

fn chi2_pdf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = 0.5 * dof;
    ((k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Inverse of [`chi2_cdf`]: safeguarded Newton inside a shrinking bracket.
pub fn chi2_quantile(p: f64, dof: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {p}")));
    }
    check_chi2_args(0.0, dof)?;

    // Wilson–Hilferty start
    let z = normal_quantile_approx(p);
    let c = 2.0 / (9.0 * dof);
    let mut x = (dof * (1.0 - c + z * c.sqrt()).powi(3)).max(1e-8);

    let mut lo = 0.0;
    let mut hi = x.max(dof).max(1.0);
    while regularized_gamma(0.5 * dof, 0.5 * hi).0 < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..500 {
        let f = regularized_gamma(0.5 * dof, 0.5 * x).0 - p;
        if f.abs() <= 1e-15 {
            break;
        }
        if f < 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        let pdf = chi2_pdf(x, dof);
        let newton = if pdf > 0.0 { x - f / pdf } else { f64::NAN };
        x = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(x)
}

/// Standard normal CDF via `erfc(t) = Q(1/2, t²)`.
pub fn normal_cdf(z: f64) -> TailProb {
    if z.is_nan() {
        return TailProb(f64::NAN);
    }
    let upper = 0.5 * regularized_gamma(0.5, 0.5 * z * z).1;
    if z >= 0.0 {
        TailProb(1.0 - upper)
    } else {
        TailProb(upper)
    }
}

/// Upper tail `1 − Φ(z)` without cancellation for large positive `z`.
pub fn normal_sf(z: f64) -> TailProb {
    normal_cdf(-z)
}

/// Acklam's rational approximation, used only to seed root finding.
fn normal_quantile_approx(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile_approx(1.0 - p)
    }
}
