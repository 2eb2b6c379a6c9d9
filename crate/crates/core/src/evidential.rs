//! Dirichlet evidential classification and Normal-Inverse-Gamma regression losses.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// `log(1 + e^z)` without overflow for large `|z|`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dirichlet concentration parameters produced by the evidential head.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialOutput {
    pub alpha: Vec<f64>,
    pub total_evidence: f64,
    /// Dirichlet mean `alpha / alpha_0`.
    pub p_hat: Vec<f64>,
    pub epistemic_uncertainty: f64,
}

impl EvidentialOutput {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.p_hat)
    }

    /// `max_c p_hat_c`.
    pub fn confidence(&self) -> f64 {
        self.p_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `alpha_c = 1 + softplus(z_c)`.
pub fn evidence_from_logits(z: &[f64]) -> EvidentialOutput {
    let alpha: Vec<f64> = z.iter().map(|&v| 1.0 + softplus(v)).collect();
    let total_evidence: f64 = alpha.iter().sum();
    let p_hat = alpha.iter().map(|a| a / total_evidence).collect();
    EvidentialOutput {
        alpha,
        total_evidence,
        p_hat,
        epistemic_uncertainty: 1.0 / total_evidence,
    }
}

pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; num_classes];
    y[class] = 1.0;
    y
}

/// `sum_c (y_c - p_c)^2 + y_c (1 - y_c) / (alpha_0 + 1)`.
///
/// The second term vanishes for one-hot labels and only contributes under
/// soft labels.
pub fn evidential_nll(y: &[f64], out: &EvidentialOutput) -> f64 {
    y.iter()
        .zip(&out.p_hat)
        .map(|(&yc, &pc)| (yc - pc).powi(2) + yc * (1.0 - yc) / (out.total_evidence + 1.0))
        .sum()
}

/// `sum_c |y_c - p_c| * (2 alpha_0 + 1)`.
pub fn evidential_reg(y: &[f64], out: &EvidentialOutput) -> f64 {
    let err: f64 = y.iter().zip(&out.p_hat).map(|(a, b)| (a - b).abs()).sum();
    err * (2.0 * out.total_evidence + 1.0)
}

/// Loss values and `d(nll + lambda_reg * reg)/dz` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialGrad {
    pub output: EvidentialOutput,
    pub nll: f64,
    pub reg: f64,
    pub dz: Vec<f64>,
}

pub fn evidential_loss_grad(y: &[f64], z: &[f64], lambda_reg: f64) -> EvidentialGrad {
    let output = evidence_from_logits(z);
    let nll = evidential_nll(y, &output);
    let reg = evidential_reg(y, &output);
    let a0 = output.total_evidence;
    let p = &output.p_hat;

    // dL/dp_c for both terms, and the direct alpha_0 dependence
    let soft: f64 = y.iter().map(|yc| yc * (1.0 - yc)).sum();
    let abs_err: f64 = y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum();
    let dl_dp: Vec<f64> = y
        .iter()
        .zip(p)
        .map(|(&yc, &pc)| {
            let r = yc - pc;
            let sign = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            -2.0 * r - lambda_reg * (2.0 * a0 + 1.0) * sign
        })
        .collect();
    let dl_da0 = -soft / (a0 + 1.0).powi(2) + lambda_reg * 2.0 * abs_err;
    // dp_c/dalpha_j = (delta_cj - p_c) / alpha_0
    let weighted: f64 = dl_dp.iter().zip(p).map(|(g, pc)| g * pc).sum();
    let dz = z
        .iter()
        .zip(&dl_dp)
        .map(|(&zj, &gj)| {
            let dl_dalpha = (gj - weighted) / a0 + dl_da0;
            dl_dalpha * sigmoid(zj)
        })
        .collect();
    EvidentialGrad {
        output,
        nll,
        reg,
        dz,
    }
}

/// Normal-Inverse-Gamma evidential regression parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigParams {
    pub gamma: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(gamma: f64, nu: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self {
            gamma,
            nu,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(Error::Domain(format!("nu must be > 0, got {}", self.nu)));
        }
        if !(self.alpha > 1.0) {
            return Err(Error::Domain(format!("alpha must be > 1, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Domain(format!("beta must be > 0, got {}", self.beta)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Domain("gamma must be finite".into()));
        }
        Ok(())
    }
}

/// `Var[mu] = beta / (nu (alpha - 1))`.
pub fn nig_epistemic_variance(p: &NigParams) -> Result<f64> {
    p.validate()?;
    Ok(p.beta / (p.nu * (p.alpha - 1.0)))
}

/// Negative log of the Student-t marginal likelihood of `y` under the NIG prior.
pub fn nig_nll(y: f64, p: &NigParams) -> Result<f64> {
    p.validate()?;
    let omega = 2.0 * p.beta * (1.0 + p.nu);
    Ok(0.5 * (std::f64::consts::PI / p.nu).ln() - p.alpha * omega.ln()
        + (p.alpha + 0.5) * (p.nu * (y - p.gamma).powi(2) + omega).ln()
        + ln_gamma(p.alpha)
        - ln_gamma(p.alpha + 0.5))
}

/// `|y - gamma| * (2 nu + alpha)`.
pub fn nig_reg(y: f64, p: &NigParams) -> Result<f64> {
    p.validate()?;
    Ok((y - p.gamma).abs() * (2.0 * p.nu + p.alpha))
}

pub fn nig_regression_loss(y: f64, p: &NigParams, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain("lambda must be >= 0".into()));
    }
    Ok(nig_nll(y, p)? + lambda * nig_reg(y, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_alpha(alpha: &[f64]) -> EvidentialOutput {
        let total: f64 = alpha.iter().sum();
        EvidentialOutput {
            alpha: alpha.to_vec(),
            total_evidence: total,
            p_hat: alpha.iter().map(|a| a / total).collect(),
            epistemic_uncertainty: 1.0 / total,
        }
    }

    #[test]
    fn zero_logits() {
        let out = evidence_from_logits(&[0.0, 0.0]);
        let a = 1.0 + std::f64::consts::LN_2;
        assert!((out.alpha[0] - a).abs() < 1e-12);
        assert!((out.alpha[0] - 1.6931).abs() < 1e-4);
        assert!((out.total_evidence - 3.3863).abs() < 1e-4);
        assert_eq!(out.p_hat, vec![0.5, 0.5]);
    }

    #[test]
    fn evidence_floor_and_linear_branch() {
        let out = evidence_from_logits(&[-1e3, -800.0]);
        assert_eq!(out.alpha, vec![1.0, 1.0]);
        assert!((out.epistemic_uncertainty - 0.5).abs() < 1e-15);

        let out = evidence_from_logits(&[100.0, 0.0]);
        assert!((out.alpha[0] - 101.0).abs() < 1e-10);
        assert!((out.alpha[1] - 1.6931).abs() < 1e-4);

        let out = evidence_from_logits(&[1e3]);
        assert!(out.alpha[0].is_finite());
        assert!((out.alpha[0] - 1001.0).abs() < 1e-9);
    }

    #[test]
    fn nll_examples() {
        assert!((evidential_nll(&[1.0, 0.0], &from_alpha(&[2.0, 2.0])) - 0.5).abs() < 1e-12);
        assert!((evidential_nll(&[0.0, 1.0], &from_alpha(&[3.0, 1.0])) - 1.125).abs() < 1e-12);
        let confident = from_alpha(&[1e12, 1.0]);
        assert!(evidential_nll(&[1.0, 0.0], &confident) < 1e-20);
    }

    #[test]
    fn nll_soft_label_term() {
        // y = (0.5, 0.5), alpha = (2, 2): (0 + 0) + 2 * 0.25 / 5
        let v = evidential_nll(&[0.5, 0.5], &from_alpha(&[2.0, 2.0]));
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn reg_examples() {
        assert!((evidential_reg(&[1.0, 0.0], &from_alpha(&[2.0, 2.0])) - 9.0).abs() < 1e-12);
        assert!((evidential_reg(&[1.0, 0.0], &from_alpha(&[9.0, 1.0])) - 4.2).abs() < 1e-12);
        let exact = EvidentialOutput {
            alpha: vec![5.0, 0.0],
            total_evidence: 5.0,
            p_hat: vec![1.0, 0.0],
            epistemic_uncertainty: 0.2,
        };
        assert_eq!(evidential_reg(&[1.0, 0.0], &exact), 0.0);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let cases: [(&[f64], &[f64], f64); 4] = [
            (&[1.0, 0.0], &[0.3, -0.4], 0.1),
            (&[0.0, 1.0, 0.0], &[2.0, -1.0, 0.5], 1.0),
            (&[0.2, 0.8], &[0.1, 0.7], 0.5),
            (&[0.0, 0.0, 0.0, 1.0], &[-3.0, 4.0, 0.0, 1.0], 0.0),
        ];
        for (y, z, lambda) in cases {
            let g = evidential_loss_grad(y, z, lambda);
            let f = |z: &[f64]| {
                let o = evidence_from_logits(z);
                evidential_nll(y, &o) + lambda * evidential_reg(y, &o)
            };
            let eps = 1e-6;
            for j in 0..z.len() {
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[j] += eps;
                zm[j] -= eps;
                let fd = (f(&zp) - f(&zm)) / (2.0 * eps);
                assert!((fd - g.dz[j]).abs() < 1e-7, "{fd} vs {}", g.dz[j]);
            }
            assert_eq!(g.nll, evidential_nll(y, &g.output));
        }
    }

    #[test]
    fn nig_variance_examples() {
        let v = nig_epistemic_variance(&NigParams::new(0.0, 1.0, 3.0, 2.0).unwrap()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let v = nig_epistemic_variance(&NigParams::new(0.0, 10.0, 2.0, 1.0).unwrap()).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        let v = nig_epistemic_variance(&NigParams::new(0.0, 1e12, 2.0, 1.0).unwrap()).unwrap();
        assert!(v < 1e-11);
    }

    #[test]
    fn nig_domain_errors() {
        assert!(NigParams::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(NigParams::new(0.0, 0.0, 2.0, 1.0).is_err());
        assert!(NigParams::new(0.0, 1.0, 2.0, -1.0).is_err());
        let bad = NigParams {
            gamma: 0.0,
            nu: 1.0,
            alpha: 0.5,
            beta: 1.0,
        };
        assert!(matches!(nig_epistemic_variance(&bad), Err(Error::Domain(_))));
        assert!(nig_regression_loss(0.0, &bad, 0.0).is_err());
    }

    #[test]
    fn nig_reg_examples() {
        let p = NigParams::new(0.0, 1.0, 2.0, 1.0).unwrap();
        assert!((nig_reg(1.0, &p).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(nig_reg(0.0, &p).unwrap(), 0.0);
        let full = nig_regression_loss(1.0, &p, 0.5).unwrap();
        assert!((full - (nig_nll(1.0, &p).unwrap() + 2.0)).abs() < 1e-12);
    }

    /// `-log ∫∫ N(y | mu, s2) N(mu | gamma, s2/nu) InvGamma(s2 | alpha, beta) dmu ds2`
    /// by nested trapezoid rules, with `s2 = exp(t)`.
    fn quadrature_nll(y: f64, p: &NigParams) -> f64 {
        let (t_lo, t_hi, nt) = (-14.0_f64, 10.0_f64, 3000);
        let dt = (t_hi - t_lo) / nt as f64;
        let ln_ig_norm = p.alpha * p.beta.ln() - ln_gamma(p.alpha);
        let mut outer = 0.0;
        for i in 0..=nt {
            let t = t_lo + dt * i as f64;
            let s2 = t.exp();
            let ig = (ln_ig_norm - (p.alpha + 1.0) * t - p.beta / s2).exp();
            // inner integral over mu
            let sd_prior = (s2 / p.nu).sqrt();
            let half = 12.0 * sd_prior.max(s2.sqrt());
            let centre = p.gamma;
            let nm = 1200;
            let dm = 2.0 * (half + (y - centre).abs()) / nm as f64;
            let lo = centre - half - (y - centre).abs();
            let mut inner = 0.0;
            for j in 0..=nm {
                let mu = lo + dm * j as f64;
                let lik = (-(y - mu).powi(2) / (2.0 * s2)).exp()
                    / (2.0 * std::f64::consts::PI * s2).sqrt();
                let prior = (-(mu - p.gamma).powi(2) / (2.0 * s2 / p.nu)).exp()
                    / (2.0 * std::f64::consts::PI * s2 / p.nu).sqrt();
                let w = if j == 0 || j == nm { 0.5 } else { 1.0 };
                inner += w * lik * prior;
            }
            inner *= dm;
            let w = if i == 0 || i == nt { 0.5 } else { 1.0 };
            // ds2 = s2 dt
            outer += w * inner * ig * s2;
        }
        -(outer * dt).ln()
    }

    #[test]
    fn nig_nll_matches_quadrature() {
        let p = NigParams::new(0.0, 1.0, 2.0, 1.0).unwrap();
        let closed = nig_regression_loss(0.0, &p, 0.0).unwrap();
        let numeric = quadrature_nll(0.0, &p);
        assert!((closed - numeric).abs() < 1e-6, "{closed} vs {numeric}");

        let p = NigParams::new(0.5, 3.0, 4.5, 0.7).unwrap();
        let closed = nig_nll(1.3, &p).unwrap();
        let numeric = quadrature_nll(1.3, &p);
        assert!((closed - numeric).abs() < 1e-6, "{closed} vs {numeric}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn p_hat_normalised(z in prop::collection::vec(-1e3f64..1e3, 1..12)) {
            let out = evidence_from_logits(&z);
            let s: f64 = out.p_hat.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(out.alpha.iter().all(|&a| a >= 1.0));
            prop_assert!(out.epistemic_uncertainty <= 1.0 / z.len() as f64);
            prop_assert!(out.epistemic_uncertainty > 0.0);
        }

        #[test]
        fn shifting_logits_up_reduces_uncertainty(
            z in prop::collection::vec(-20.0f64..20.0, 2..8),
            t in 0.01f64..5.0,
        ) {
            let a = evidence_from_logits(&z);
            let shifted: Vec<f64> = z.iter().map(|v| v + t).collect();
            let b = evidence_from_logits(&shifted);
            prop_assert!(b.total_evidence > a.total_evidence);
            prop_assert!(b.epistemic_uncertainty < a.epistemic_uncertainty);
        }

        #[test]
        fn reg_grows_with_evidence_at_fixed_mean(
            scale in 1.0f64..50.0,
            extra in 0.01f64..10.0,
            frac in 0.05f64..0.95,
        ) {
            // alpha = a0 * p_hat with p_hat fixed, y = (1, 0)
            let y = [1.0, 0.0];
            let mk = |a0: f64| from_alpha(&[a0 * frac, a0 * (1.0 - frac)]);
            let a0 = 2.0 * scale;
            prop_assert!(evidential_reg(&y, &mk(a0 + extra)) > evidential_reg(&y, &mk(a0)));
        }
    }

    #[test]
    fn uncertainty_bound_is_strict_for_finite_logits() {
        let out = evidence_from_logits(&[-30.0, -30.0, -30.0]);
        assert!(out.epistemic_uncertainty < 1.0 / 3.0);
    }
}
