//! Normal-Inverse-Gamma evidential layer.
//!
//! A network emits four hyperparameters `(gamma, nu, alpha, beta)` per output
//! element. From them we read off the point prediction, the aleatoric and
//! epistemic variances, the Student-t marginal of the target and a symmetric
//! prediction interval. The training objective is the Student-t negative log
//! likelihood plus two regularizers; gradients are analytic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_mean;
use crate::special::{digamma_unchecked, ln_gamma_unchecked, student_t_quantile, StudentTDist};

/// NIG hyperparameters for one output element.
///
/// `alpha_shape` is the inverse-gamma shape; it is unrelated to the conformal
/// miscoverage level (see [`crate::conformal::MiscoverageLevel`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidentialParams {
    pub gamma: f64,
    pub nu: f64,
    pub alpha_shape: f64,
    pub beta_scale: f64,
}

impl EvidentialParams {
    pub fn new(gamma: f64, nu: f64, alpha_shape: f64, beta_scale: f64) -> Result<Self> {
        let m = Self {
            gamma,
            nu,
            alpha_shape,
            beta_scale,
        };
        if m.is_valid() {
            Ok(m)
        } else {
            Err(Error::domain(
                "EvidentialParams",
                format!("invalid hyperparameters {m:?}"),
            ))
        }
    }

    /// `gamma` finite, `nu > 0`, `alpha > 1`, `beta > 0`, all finite.
    pub fn is_valid(&self) -> bool {
        self.gamma.is_finite()
            && self.nu > 0.0
            && self.nu.is_finite()
            && self.alpha_shape > 1.0
            && self.alpha_shape.is_finite()
            && self.beta_scale > 0.0
            && self.beta_scale.is_finite()
    }
}

/// Point prediction and the two variance components for one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintySummary {
    pub prediction: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

/// Symmetric evidential prediction interval at confidence `1 - delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawInterval {
    pub lo: f64,
    pub hi: f64,
    pub confidence: f64,
}

impl RawInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// Weights of the two regularizers in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub xi_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 0.01,
            xi_reg: 0.05,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_reg: f64, xi_reg: f64) -> Result<Self> {
        if !(lambda_reg.is_finite() && lambda_reg >= 0.0 && xi_reg.is_finite() && xi_reg >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got lambda={lambda_reg}, xi={xi_reg}"
            )));
        }
        Ok(Self { lambda_reg, xi_reg })
    }
}

/// The individual loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub nll: f64,
    pub reg: f64,
    pub u: f64,
    pub total: f64,
}

/// Partial derivatives of the per-element loss w.r.t. the four hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParamGradient {
    pub gamma: f64,
    pub nu: f64,
    pub alpha_shape: f64,
    pub beta_scale: f64,
}

impl ParamGradient {
    pub fn as_array(&self) -> [f64; 4] {
        [self.gamma, self.nu, self.alpha_shape, self.beta_scale]
    }
}

pub fn predict_mean(m: &EvidentialParams) -> f64 {
    m.gamma
}

/// E[sigma^2] = beta / (alpha - 1)
pub fn aleatoric(m: &EvidentialParams) -> f64 {
    debug_assert!(m.alpha_shape > 1.0);
    m.beta_scale / (m.alpha_shape - 1.0)
}

/// Var[mu] = beta / (nu (alpha - 1))
pub fn epistemic(m: &EvidentialParams) -> f64 {
    debug_assert!(m.alpha_shape > 1.0 && m.nu > 0.0);
    m.beta_scale / (m.nu * (m.alpha_shape - 1.0))
}

pub fn summarize(m: &EvidentialParams) -> UncertaintySummary {
    UncertaintySummary {
        prediction: predict_mean(m),
        aleatoric: aleatoric(m),
        epistemic: epistemic(m),
    }
}

/// Squared scale of the Student-t marginal, beta (1 + nu) / (nu alpha).
fn marginal_scale_sq(m: &EvidentialParams) -> f64 {
    m.beta_scale * (1.0 + m.nu) / (m.nu * m.alpha_shape)
}

/// Marginal of the target under the NIG prior: St(gamma, beta(1+nu)/(nu alpha), 2 alpha).
pub fn predictive_dist(m: &EvidentialParams) -> Result<StudentTDist> {
    StudentTDist::new(m.gamma, marginal_scale_sq(m).sqrt(), 2.0 * m.alpha_shape)
}

/// Interval `gamma +- t_{2 alpha, 1 - delta/2} * scale`.
pub fn raw_interval(m: &EvidentialParams, delta: f64) -> Result<RawInterval> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(
            "raw_interval",
            format!("delta must lie in (0, 1), got {delta}"),
        ));
    }
    let t = student_t_quantile(2.0 * m.alpha_shape, 1.0 - 0.5 * delta)?;
    let half = t * marginal_scale_sq(m).sqrt();
    Ok(RawInterval {
        lo: m.gamma - half,
        hi: m.gamma + half,
        confidence: 1.0 - delta,
    })
}

/// Negative log marginal likelihood, computed entirely in the log domain.
pub fn nll_loss(m: &EvidentialParams, y: f64) -> f64 {
    let r = y - m.gamma;
    let omega = 2.0 * m.beta_scale * (1.0 + m.nu);
    let a = m.alpha_shape;
    (a + 0.5) * (r * r * m.nu + omega).ln() + 0.5 * (PI / m.nu).ln() - a * omega.ln() + ln_gamma_unchecked(a)
        - ln_gamma_unchecked(a + 0.5)
}

/// Evidence regularizer |y - gamma| (2 nu + alpha).
pub fn reg_loss(m: &EvidentialParams, y: f64) -> f64 {
    (y - m.gamma).abs() * (2.0 * m.nu + m.alpha_shape)
}

/// Non-saturating uncertainty regularizer (y - gamma)^2 nu (alpha - 1) / (beta (nu + 1)).
pub fn u_loss(m: &EvidentialParams, y: f64) -> f64 {
    let r = y - m.gamma;
    r * r * m.nu * (m.alpha_shape - 1.0) / (m.beta_scale * (m.nu + 1.0))
}

pub fn loss_terms(m: &EvidentialParams, y: f64, w: &LossWeights) -> LossTerms {
    let nll = nll_loss(m, y);
    let reg = reg_loss(m, y);
    let u = u_loss(m, y);
    LossTerms {
        nll,
        reg,
        u,
        total: nll + w.lambda_reg * reg + w.xi_reg * u,
    }
}

pub fn total_loss(m: &EvidentialParams, y: f64, w: &LossWeights) -> f64 {
    loss_terms(m, y, w).total
}

/// Analytic gradient of [`total_loss`] w.r.t. `(gamma, nu, alpha, beta)`.
///
/// The regularizer's |.| uses subgradient 0 at `y == gamma`.
pub fn loss_gradients(m: &EvidentialParams, y: f64, w: &LossWeights) -> ParamGradient {
    let EvidentialParams {
        gamma,
        nu,
        alpha_shape: a,
        beta_scale: b,
    } = *m;
    let r = y - gamma;
    let omega = 2.0 * b * (1.0 + nu);
    let s = r * r * nu + omega;
    let ap = a + 0.5;

    // NLL
    let mut g_gamma = -2.0 * ap * r * nu / s;
    let mut g_nu = ap * (r * r + 2.0 * b) / s - 0.5 / nu - a / (1.0 + nu);
    let mut g_alpha = s.ln() - omega.ln() + digamma_unchecked(a) - digamma_unchecked(ap);
    let mut g_beta = ap * 2.0 * (1.0 + nu) / s - a / b;

    // Evidence regularizer
    if w.lambda_reg != 0.0 {
        let abs_r = r.abs();
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        g_gamma += w.lambda_reg * (-sign * (2.0 * nu + a));
        g_nu += w.lambda_reg * 2.0 * abs_r;
        g_alpha += w.lambda_reg * abs_r;
    }

    // Uncertainty regularizer
    if w.xi_reg != 0.0 {
        let coeff = nu * (a - 1.0) / (b * (nu + 1.0));
        let u = r * r * coeff;
        g_gamma += w.xi_reg * (-2.0 * r * coeff);
        g_nu += w.xi_reg * r * r * (a - 1.0) / (b * (nu + 1.0) * (nu + 1.0));
        g_alpha += w.xi_reg * r * r * nu / (b * (nu + 1.0));
        g_beta += w.xi_reg * (-u / b);
    }

    ParamGradient {
        gamma: g_gamma,
        nu: g_nu,
        alpha_shape: g_alpha,
        beta_scale: g_beta,
    }
}

/// A grid of hyperparameters over the output domain, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialField {
    shape: Vec<usize>,
    params: Vec<EvidentialParams>,
}

impl EvidentialField {
    pub fn new(shape: Vec<usize>, params: Vec<EvidentialParams>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != params.len() {
            return Err(Error::Shape(format!(
                "grid {shape:?} holds {n} elements but {} parameters were given",
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|m| !m.is_valid()) {
            return Err(Error::domain(
                "EvidentialField",
                format!("element {i} violates the NIG constraints: {:?}", params[i]),
            ));
        }
        Ok(Self { shape, params })
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, params: Vec<EvidentialParams>) -> Self {
        Self { shape, params }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[EvidentialParams] {
        &self.params
    }

    /// Index of the first element violating the NIG constraints, if any.
    pub fn audit(&self) -> Option<usize> {
        self.params.iter().position(|m| !m.is_valid())
    }

    pub fn predictions(&self) -> Vec<f64> {
        self.params.iter().map(predict_mean).collect()
    }

    pub fn aleatoric(&self) -> Vec<f64> {
        self.params.iter().map(aleatoric).collect()
    }

    pub fn epistemic(&self) -> Vec<f64> {
        self.params.iter().map(epistemic).collect()
    }

    pub fn raw_intervals(&self, delta: f64) -> Result<Vec<RawInterval>> {
        self.params.iter().map(|m| raw_interval(m, delta)).collect()
    }

    /// Mean loss over all elements against a target grid.
    pub fn loss(&self, targets: &[f64], w: &LossWeights) -> Result<LossTerms> {
        if targets.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "target grid has {} elements, field has {}",
                targets.len(),
                self.params.len()
            )));
        }
        let terms: Vec<LossTerms> = self
            .params
            .iter()
            .zip(targets)
            .map(|(m, &y)| loss_terms(m, y, w))
            .collect();
        Ok(mean_terms(&terms))
    }
}

/// Component-wise mean of loss records (pairwise summation).
pub fn mean_terms(terms: &[LossTerms]) -> LossTerms {
    let pick = |f: fn(&LossTerms) -> f64| -> f64 {
        let v: Vec<f64> = terms.iter().map(f).collect();
        pairwise_mean(&v)
    };
    LossTerms {
        nll: pick(|t| t.nll),
        reg: pick(|t| t.reg),
        u: pick(|t| t.u),
        total: pick(|t| t.total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(gamma: f64, nu: f64, alpha: f64, beta: f64) -> EvidentialParams {
        EvidentialParams::new(gamma, nu, alpha, beta).unwrap()
    }

    #[test]
    fn point_and_variance_estimators() {
        assert_eq!(predict_mean(&m(0.3, 1.0, 2.0, 1.0)), 0.3);
        assert_eq!(predict_mean(&m(0.0, 1.0, 2.0, 1.0)), 0.0);
        assert_eq!(aleatoric(&m(0.0, 1.0, 2.0, 1.0)), 1.0);
        assert_eq!(aleatoric(&m(0.0, 1.0, 3.0, 4.0)), 2.0);
        let near = aleatoric(&m(0.0, 1.0, 1.0 + 1e-6, 1.0));
        assert!((near - 1e6).abs() / 1e6 < 1e-9);
        assert_eq!(epistemic(&m(0.0, 1.0, 2.0, 1.0)), 1.0);
        assert_eq!(epistemic(&m(0.0, 4.0, 2.0, 1.0)), 0.25);
    }

    #[test]
    fn params_reject_invalid() {
        assert!(EvidentialParams::new(0.0, 0.0, 2.0, 1.0).is_err());
        assert!(EvidentialParams::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(EvidentialParams::new(0.0, 1.0, 2.0, -1.0).is_err());
        assert!(EvidentialParams::new(f64::NAN, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn predictive_dist_parameters() {
        let d = predictive_dist(&m(0.0, 1.0, 2.0, 1.0)).unwrap();
        assert_eq!((d.loc(), d.scale(), d.df()), (0.0, 1.0, 4.0));
        let d = predictive_dist(&m(0.5, 2.0, 3.0, 3.0)).unwrap();
        assert!((d.scale() * d.scale() - 1.5).abs() < 1e-15);
        assert_eq!(d.df(), 6.0);
    }

    #[test]
    fn raw_interval_reference_case() {
        let iv = raw_interval(&m(0.0, 1.0, 2.0, 1.0), 0.05).unwrap();
        assert!((iv.hi - 2.776_445_105_197_794).abs() < 1e-9);
        assert!((iv.lo + iv.hi).abs() < 1e-12);
        assert!((iv.confidence - 0.95).abs() < 1e-15);
        assert!(raw_interval(&m(0.0, 1.0, 2.0, 1.0), 0.0).is_err());
        assert!(raw_interval(&m(0.0, 1.0, 2.0, 1.0), 1.0).is_err());
        let narrow = raw_interval(&m(0.0, 1.0, 2.0, 1.0), 1.0 - 1e-9).unwrap();
        assert!(narrow.width() < 1e-8);
    }

    #[test]
    fn nll_reference_value() {
        let nll = nll_loss(&m(0.0, 1.0, 2.0, 1.0), 0.0);
        assert!((nll - 0.980_829_253_011_726_2).abs() < 1e-12);
    }

    #[test]
    fn regularizers() {
        let p = m(0.0, 1.0, 2.0, 1.0);
        assert_eq!(reg_loss(&p, 0.0), 0.0);
        assert_eq!(reg_loss(&p, 1.0), 4.0);
        assert_eq!(reg_loss(&p, 2.0), 2.0 * reg_loss(&p, 1.0));
        assert_eq!(u_loss(&p, 0.0), 0.0);
        assert_eq!(u_loss(&p, 1.0), 0.5);
        let q = m(0.2, 2.5, 3.5, 0.7);
        let via_sum = (1.1f64 - 0.2).powi(2) / (aleatoric(&q) + epistemic(&q));
        assert!((u_loss(&q, 1.1) - via_sum).abs() < 1e-14);
    }

    #[test]
    fn total_loss_combinations() {
        let p = m(0.0, 1.0, 2.0, 1.0);
        let zero = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(total_loss(&p, 0.7, &zero), nll_loss(&p, 0.7));
        let ones = LossWeights::new(1.0, 1.0).unwrap();
        let want = nll_loss(&p, 1.0) + 4.0 + 0.5;
        assert!((total_loss(&p, 1.0, &ones) - want).abs() < 1e-14);
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn gradient_special_points() {
        let p = m(0.0, 1.0, 2.0, 1.0);
        let only_reg = LossWeights::new(1.0, 0.0).unwrap();
        let zero = LossWeights::new(0.0, 0.0).unwrap();
        let g_total = loss_gradients(&p, 0.5, &only_reg).gamma;
        let g_nll = loss_gradients(&p, 0.5, &zero).gamma;
        assert!((g_total - g_nll + (2.0 * 1.0 + 2.0)).abs() < 1e-14);
        assert_eq!(loss_gradients(&p, 0.0, &zero).gamma, 0.0);
    }

    #[test]
    fn losses_finite_far_from_the_mode() {
        let p = m(0.0, 0.1, 1.1, 0.1);
        let w = LossWeights::default();
        for y in [1e6, -1e6] {
            let t = loss_terms(&p, y, &w);
            assert!(t.total.is_finite());
            assert!(loss_gradients(&p, y, &w).as_array().iter().all(|g| g.is_finite()));
        }
        let heavy = m(0.0, 1.0, 1e5, 1.0);
        assert!(nll_loss(&heavy, 3.0).is_finite());
    }

    #[test]
    fn field_validation_and_loss() {
        let p = m(0.0, 1.0, 2.0, 1.0);
        assert!(EvidentialField::new(vec![2, 2], vec![p; 3]).is_err());
        let bad = EvidentialParams { alpha_shape: 0.5, ..p };
        assert!(EvidentialField::new(vec![2], vec![p, bad]).is_err());
        let f = EvidentialField::new(vec![2, 2], vec![p; 4]).unwrap();
        assert_eq!(f.predictions(), vec![0.0; 4]);
        let w = LossWeights::default();
        let l = f.loss(&[0.0, 1.0, 0.0, 1.0], &w).unwrap();
        let want = 0.5 * (total_loss(&p, 0.0, &w) + total_loss(&p, 1.0, &w));
        assert!((l.total - want).abs() < 1e-14);
        assert!(f.loss(&[0.0], &w).is_err());
    }
}
