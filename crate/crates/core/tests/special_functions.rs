//! Special functions checked against closed forms, asymptotic series and
//! direct numerical integration.

use std::f64::consts::PI;

use evisurro_core::special::{log_gamma, reg_inc_beta, student_t_cdf, student_t_quantile, StudentTDist};
use proptest::prelude::*;

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn ln_beta(a: f64, b: f64) -> f64 {
    log_gamma(a).unwrap() + log_gamma(b).unwrap() - log_gamma(a + b).unwrap()
}

/// I_x(a, b) by quadrature. The lower tail is integrated after substituting
/// t = s^4, which makes the integrand smooth at 0; x > 1/2 goes through
/// I_x(a, b) = 1 - I_{1-x}(b, a) so the range never touches 1.
fn inc_beta_quadrature(a: f64, b: f64, x: f64) -> f64 {
    if x > 0.5 {
        return 1.0 - inc_beta_quadrature(b, a, 1.0 - x);
    }
    let norm = ln_beta(a, b);
    let integrand = |s: f64| {
        if s <= 0.0 {
            return 0.0;
        }
        let t = s.powi(4);
        4.0 * ((4.0 * a - 1.0) * s.ln() + (b - 1.0) * (-t).ln_1p() - norm).exp()
    };
    simpson(integrand, 0.0, x.powf(0.25), 4000)
}

/// lnΓ(x) from Stirling's series, accurate to ~1e-15 relative for x >= 10.
fn stirling(x: f64) -> f64 {
    let x2 = x * x;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x * x2 * x2)
        - 1.0 / (1680.0 * x * x2 * x2 * x2)
}

#[test]
fn t_quantile_matches_tabulated_value() {
    let q = student_t_quantile(4.0, 0.975).unwrap();
    assert!((q - 2.7764451).abs() < 1e-6, "{q}");
}

#[test]
fn t_quantile_matches_cauchy_and_df2_closed_forms() {
    for i in 1..200 {
        let p = 0.5 + 0.4999 * i as f64 / 200.0;
        let cauchy = (PI * (p - 0.5)).tan();
        let q1 = student_t_quantile(1.0, p).unwrap();
        assert!(
            (q1 - cauchy).abs() <= 1e-9 * cauchy.abs().max(1.0),
            "df=1 p={p}: {q1} vs {cauchy}"
        );
        let df2 = (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt();
        let q2 = student_t_quantile(2.0, p).unwrap();
        assert!(
            (q2 - df2).abs() <= 1e-9 * df2.abs().max(1.0),
            "df=2 p={p}: {q2} vs {df2}"
        );
    }
}

#[test]
fn t_cdf_matches_integrated_density() {
    for &df in &[1.5, 3.0, 7.0, 30.0] {
        let d = StudentTDist::new(0.0, 1.0, df).unwrap();
        for &t in &[0.1, 0.7, 1.5, 3.0] {
            let mass = simpson(|z| d.pdf(z), 0.0, t, 2000);
            let cdf = student_t_cdf(t, df).unwrap();
            assert!((cdf - 0.5 - mass).abs() < 1e-10, "df={df} t={t}");
        }
    }
}

#[test]
fn log_gamma_obeys_reflection() {
    // Γ(x)Γ(1-x) = π / sin(πx)
    for i in 1..100 {
        let x = i as f64 / 100.0;
        let lhs = log_gamma(x).unwrap() + log_gamma(1.0 - x).unwrap();
        let rhs = (PI / (PI * x).sin()).ln();
        assert!((lhs - rhs).abs() < 1e-12, "x={x}");
    }
}

proptest! {
    #[test]
    fn t_quantile_round_trips_through_cdf(df in 0.5f64..300.0, p in 0.5001f64..0.9999) {
        let q = student_t_quantile(df, p).unwrap();
        prop_assert!((student_t_cdf(q, df).unwrap() - p).abs() < 1e-9);
        let q_lo = student_t_quantile(df, 1.0 - p).unwrap();
        prop_assert!((q + q_lo).abs() <= 1e-9 * q.abs().max(1.0));
    }

    #[test]
    fn t_quantile_is_monotone(df in 1.0f64..100.0, p in 0.5f64..0.99, dp in 1e-6f64..0.009) {
        prop_assert!(student_t_quantile(df, p + dp).unwrap() > student_t_quantile(df, p).unwrap());
        // heavier tails push quantiles outwards
        prop_assert!(student_t_quantile(df, p + dp).unwrap() >= student_t_quantile(df + 1.0, p + dp).unwrap());
    }

    #[test]
    fn log_gamma_matches_stirling(x in 10.0f64..1e6) {
        let s = stirling(x);
        prop_assert!((log_gamma(x).unwrap() - s).abs() <= 1e-12 * s.abs().max(1.0));
    }

    #[test]
    fn log_gamma_recurrence(x in 0.01f64..50.0) {
        let lhs = log_gamma(x + 1.0).unwrap();
        let rhs = log_gamma(x).unwrap() + x.ln();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn inc_beta_matches_quadrature(a in 1.0f64..12.0, b in 1.0f64..12.0, x in 0.0f64..1.0) {
        let got = reg_inc_beta(a, b, x).unwrap();
        let reference = inc_beta_quadrature(a, b, x);
        prop_assert!((got - reference).abs() < 1e-10, "{got} vs {reference}");
    }

    #[test]
    fn inc_beta_power_closed_forms(a in 0.05f64..20.0, x in 0.0f64..1.0) {
        prop_assert!((reg_inc_beta(a, 1.0, x).unwrap() - x.powf(a)).abs() < 1e-12);
        prop_assert!((reg_inc_beta(1.0, a, x).unwrap() - (1.0 - (1.0 - x).powf(a))).abs() < 1e-12);
    }

    #[test]
    fn inc_beta_symmetry(a in 0.1f64..50.0, b in 0.1f64..50.0, x in 0.0f64..1.0) {
        let lhs = reg_inc_beta(a, b, x).unwrap();
        let rhs = 1.0 - reg_inc_beta(b, a, 1.0 - x).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}
