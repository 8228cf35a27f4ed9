//! Special functions behind the Normal-Inverse-Gamma and Student-t math.
//!
//! Everything here is a pure scalar function on `f64`. Inputs outside the
//! mathematical domain produce [`Error::Domain`] rather than NaN.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision, clippy::inconsistent_digit_grouping)]
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln(sqrt(2 pi))
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(
            "log_gamma",
            format!("x must be positive and finite, got {x}"),
        ));
    }
    Ok(ln_gamma_unchecked(x))
}

/// Lanczos approximation with reflection below 0.5. Caller guarantees `x > 0`.
pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Gamma(x) Gamma(1 - x) = pi / sin(pi x)
        return (PI / (PI * x).sin()).ln() - ln_gamma_unchecked(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    LN_SQRT_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// The digamma function psi(x) = d/dx ln Gamma(x), for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(
            "digamma",
            format!("x must be positive and finite, got {x}"),
        ));
    }
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < 10.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Asymptotic expansion in Bernoulli numbers.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
    shift + x.ln() - 0.5 * inv - series
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma_unchecked(a) + ln_gamma_unchecked(b) - ln_gamma_unchecked(a + b)
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 100_000;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// I_x(a, b) evaluated with both `x` and `y = 1 - x` supplied, so callers
/// holding an accurate complement avoid cancellation.
fn inc_beta_pair(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * y.ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_continued_fraction(a, b, x) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - ln_front.exp() * beta_continued_fraction(b, a, y) / b).clamp(0.0, 1.0)
    }
}

/// Regularized incomplete beta function I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::domain(
            "reg_inc_beta",
            format!("a, b must be positive, got a={a}, b={b}"),
        ));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::domain("reg_inc_beta", format!("x must lie in [0, 1], got {x}")));
    }
    Ok(inc_beta_pair(a, b, x, 1.0 - x))
}

/// Inverse of I_x(a, b) in x: returns x with I_x(a, b) = p.
///
/// Initial guess from the usual normal/power approximations, then Halley
/// iterations on the incomplete beta.
pub fn inv_reg_inc_beta(a: f64, b: f64, p: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::domain(
            "inv_reg_inc_beta",
            format!("a, b must be positive, got a={a}, b={b}"),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(
            "inv_reg_inc_beta",
            format!("p must lie in [0, 1], got {p}"),
        ));
    }
    Ok(inv_inc_beta_unchecked(a, b, p))
}

fn inv_inc_beta_unchecked(a: f64, b: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let a1 = a - 1.0;
    let b1 = b - 1.0;
    let mut x;
    if a >= 1.0 && b >= 1.0 {
        let pp = if p < 0.5 { p } else { 1.0 - p };
        let t = (-2.0 * pp.ln()).sqrt();
        let mut z = (2.307_53 + t * 0.270_61) / (1.0 + t * (0.992_29 + t * 0.044_81)) - t;
        if p < 0.5 {
            z = -z;
        }
        let al = (z * z - 3.0) / 6.0;
        let h = 2.0 / (1.0 / (2.0 * a - 1.0) + 1.0 / (2.0 * b - 1.0));
        let w = z * (al + h).sqrt() / h
            - (1.0 / (2.0 * b - 1.0) - 1.0 / (2.0 * a - 1.0)) * (al + 5.0 / 6.0 - 2.0 / (3.0 * h));
        x = a / (a + b * (2.0 * w).exp());
    } else {
        let lna = (a / (a + b)).ln();
        let lnb = (b / (a + b)).ln();
        let t = (a * lna).exp() / a;
        let u = (b * lnb).exp() / b;
        let w = t + u;
        x = if p < t / w {
            (a * w * p).powf(1.0 / a)
        } else {
            1.0 - (b * w * (1.0 - p)).powf(1.0 / b)
        };
    }
    let afac = -ln_beta(a, b);
    for j in 0..64 {
        if x <= 0.0 || x >= 1.0 {
            break;
        }
        let err = inc_beta_pair(a, b, x, 1.0 - x) - p;
        let density = (a1 * x.ln() + b1 * (1.0 - x).ln() + afac).exp();
        if density == 0.0 || !density.is_finite() {
            break;
        }
        let u = err / density;
        let step = u / (1.0 - 0.5 * f64::min(1.0, u * (a1 / x - b1 / (1.0 - x))));
        x -= step;
        if x <= 0.0 {
            x = 0.5 * (x + step);
        }
        if x >= 1.0 {
            x = 0.5 * (x + step + 1.0);
        }
        if step.abs() < 1e-15 * x && j > 0 {
            break;
        }
    }
    x.clamp(0.0, 1.0)
}

/// Location-scale Student-t distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentTDist {
    loc: f64,
    scale: f64,
    df: f64,
}

impl StudentTDist {
    pub fn new(loc: f64, scale: f64, df: f64) -> Result<Self> {
        if !loc.is_finite() {
            return Err(Error::domain("StudentTDist", format!("loc must be finite, got {loc}")));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::domain(
                "StudentTDist",
                format!("scale must be positive, got {scale}"),
            ));
        }
        if !(df > 0.0) || !df.is_finite() {
            return Err(Error::domain("StudentTDist", format!("df must be positive, got {df}")));
        }
        Ok(Self { loc, scale, df })
    }

    pub fn loc(&self) -> f64 {
        self.loc
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn df(&self) -> f64 {
        self.df
    }

    pub fn logpdf(&self, y: f64) -> f64 {
        student_t_logpdf(y, self)
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.logpdf(y).exp()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        standard_t_cdf((y - self.loc) / self.scale, self.df)
    }

    /// Quantile at probability `p` in (0, 1).
    pub fn quantile(&self, p: f64) -> Result<f64> {
        Ok(self.loc + self.scale * student_t_quantile(self.df, p)?)
    }
}

/// Log-density of a location-scale Student-t.
pub fn student_t_logpdf(y: f64, dist: &StudentTDist) -> f64 {
    let z = (y - dist.loc) / dist.scale;
    standard_t_logpdf(z, dist.df) - dist.scale.ln()
}

fn standard_t_logpdf(z: f64, df: f64) -> f64 {
    let half = 0.5 * (df + 1.0);
    ln_gamma_unchecked(half) - ln_gamma_unchecked(0.5 * df) - 0.5 * (df * PI).ln() - half * (z * z / df).ln_1p()
}

/// CDF of the standard Student-t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::domain("student_t_cdf", format!("df must be positive, got {df}")));
    }
    if t.is_nan() {
        return Err(Error::domain("student_t_cdf", "t is NaN"));
    }
    Ok(standard_t_cdf(t, df))
}

fn standard_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let t2 = t * t;
    let x = df / (df + t2);
    let y = t2 / (df + t2);
    // tail = P(T > |t|) = I_x(df/2, 1/2) / 2
    let tail = 0.5 * inc_beta_pair(0.5 * df, 0.5, x, y);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of the standard Student-t: the `t` with CDF(t; df) = p.
pub fn student_t_quantile(df: f64, p: f64) -> Result<f64> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::domain(
            "student_t_quantile",
            format!("df must be positive, got {df}"),
        ));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(
            "student_t_quantile",
            format!("p must lie in (0, 1), got {p}"),
        ));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let upper = p > 0.5;
    // Work with the upper tail so t >= 0, then mirror.
    let q = if upper { 1.0 - p } else { p };
    let two_q = 2.0 * q;
    // P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2) = 2q
    let mut t = if two_q < 0.5 {
        let x = inv_inc_beta_unchecked(0.5 * df, 0.5, two_q);
        (df * (1.0 - x) / x).sqrt()
    } else {
        // Near the centre invert the complementary form to keep precision.
        let y = inv_inc_beta_unchecked(0.5, 0.5 * df, 1.0 - two_q);
        (df * y / (1.0 - y)).sqrt()
    };
    let target = 1.0 - q;

    let mut converged = t.is_finite();
    if converged {
        for _ in 0..8 {
            let err = standard_t_cdf(t, df) - target;
            if err.abs() < 1e-14 {
                break;
            }
            let dens = standard_t_logpdf(t, df).exp();
            if !(dens > 0.0) {
                break;
            }
            let next = t - err / dens;
            if !next.is_finite() || next < 0.0 {
                break;
            }
            t = next;
        }
        converged = (standard_t_cdf(t, df) - target).abs() < 1e-11;
    }
    if !converged {
        t = bisect_t_quantile(df, target);
    }
    Ok(if upper { t } else { -t })
}

fn bisect_t_quantile(df: f64, target: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    while standard_t_cdf(hi, df) < target && hi < 1e300 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if standard_t_cdf(mid, df) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
