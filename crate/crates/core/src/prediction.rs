//! Minimum-MSE prediction of future observations and cumulative forecasts.
//!
//! With `H* = (H̃; H̃⁺)` stacked over observed and future days the joint
//! dispersion is `Ψ* = H* D H*ᵀ + σ²I` and its skewness direction satisfies
//! `Ψ*^{-1/2} λ̄* = H* Λ* ζ / (σ² sqrt(1 + ζᵀΛ*ζ))` with
//! `Λ* = (D⁻¹ + H*ᵀH*/σ²)⁻¹`. The off-diagonal block is `Ψ*₁₂ = H̃ D H̃⁺ᵀ`
//! and the conditional dispersion is `Ψ₂₂.₁ = H̃⁺ Λ H̃⁺ᵀ + σ²I`, where `Λ`
//! is the in-sample `(D⁻¹ + H̃ᵀH̃/σ²)⁻¹`. Nothing of size `n_i + υ` is
//! ever factored.

use chrono::NaiveDate;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::curve::{design, CurveModel};
use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::linalg;
use crate::smsn::{weights_standardized, Standardized};

/// Conditional mean of `y_i(t)` at arbitrary times, on the scaled response.
/// No ordering constraint on `times`.
pub fn predict_at(fit: &FitResult, subject: usize, times: &[f64]) -> Result<Vec<f64>> {
    let s = fit.panel.subjects.get(subject).ok_or_else(|| Error::Input(format!("no subject with index {subject}")))?;
    if times.is_empty() {
        return Ok(Vec::new());
    }
    let theta = &fit.theta;
    let model = &fit.model;
    let b_tilde = DVector::from_column_slice(&fit.b_hat[subject]);
    let (eta, _, h) = design(model, &s.t, &theta.beta, b_tilde.as_slice());
    let (eta_p, _, h_p) = design(model, times, &theta.beta, b_tilde.as_slice());

    let s2 = theta.sigma2;
    let d = theta.d();
    let chol_d = linalg::cholesky(&d, "D")?;
    let d_inv = chol_d.inverse();
    let big_delta = theta.big_delta()?;
    let zeta = theta.zeta()?;
    let c = theta.mixing.centering()?;
    let shift = &b_tilde - &big_delta * c;

    // In-sample pieces.
    let n = s.len();
    let r = DVector::from_column_slice(&s.y) - &eta + &h * &shift;
    let hth = h.transpose() * &h;
    let chol_lam = linalg::cholesky(&(&d_inv + &hth / s2), "D⁻¹ + HᵀH/σ²")?;
    let lam = chol_lam.inverse();
    let g = h.transpose() * &r;
    let lam_g = chol_lam.solve(&g);
    let ht_psi_inv_r = &g / s2 - &hth * &lam_g / (s2 * s2);
    let d_ht_psi_inv_r = &d * &ht_psi_inv_r;
    let maha = r.norm_squared() / s2 - g.dot(&lam_g) / (s2 * s2);
    let ln_det = n as f64 * s2.ln() + linalg::chol_logdet(&chol_d) + linalg::chol_logdet(&chol_lam);
    let lam_zeta = chol_lam.solve(&zeta);
    let skew = zeta.dot(&d_ht_psi_inv_r) / (1.0 + zeta.dot(&lam_zeta)).sqrt();
    let st = Standardized { dim: n, ln_det, maha: maha.max(0.0), skew };

    // Stacked skewness direction split into observed/future parts.
    let hth_star = &hth + h_p.transpose() * &h_p;
    let chol_star = linalg::cholesky(&(&d_inv + &hth_star / s2), "D⁻¹ + H*ᵀH*/σ²")?;
    let lam_star_zeta = chol_star.solve(&zeta);
    let k_star = s2 * (1.0 + zeta.dot(&lam_star_zeta)).sqrt();
    let ups1 = &h * &lam_star_zeta / k_star;
    let ups2 = &h_p * &lam_star_zeta / k_star;

    // Ψ₂₂.₁ υ⁽²⁾ and the conditional location.
    let psi221_ups2 = &h_p * (&lam * (h_p.transpose() * &ups2)) + &ups2 * s2;
    let q22 = ups2.dot(&psi221_ups2);
    let mu21 = &eta_p - &h_p * &shift + &h_p * &d_ht_psi_inv_r;

    // τ₋₁ with the scalar argument υ̃ᵀ r.
    let a = (ups1.dot(&r) + ups2.dot(&(&h_p * &d_ht_psi_inv_r))) / (1.0 + q22).sqrt();
    let w = weights_standardized(&st, a, &theta.mixing)?;
    let pred = mu21 + psi221_ups2 * (w.tau_m1 / (1.0 + q22).sqrt());
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("prediction for {} is not finite", s.name)));
    }
    Ok(pred.iter().copied().collect())
}

/// Predictions at future day indices; every time must lie after the last
/// observed day.
pub fn predict_future(fit: &FitResult, subject: usize, future_times: &[f64]) -> Result<Vec<f64>> {
    let s = fit.panel.subjects.get(subject).ok_or_else(|| Error::Input(format!("no subject with index {subject}")))?;
    if let Some(bad) = future_times.iter().find(|&&t| t <= s.last_t()) {
        return Err(Error::Input(format!(
            "future time {bad} is not after the last observed day {} of {}",
            s.last_t(),
            s.name
        )));
    }
    predict_at(fit, subject, future_times)
}

/// Subject index by name.
pub fn subject_by_name(fit: &FitResult, name: &str) -> Result<usize> {
    fit.panel.subject_index(name).ok_or_else(|| {
        let names: Vec<&str> = fit.panel.subjects.iter().map(|s| s.name.as_str()).collect();
        Error::Input(format!("unknown subject {name:?}; fitted subjects: {}", names.join(", ")))
    })
}

/// One predicted day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyForecast {
    pub date: NaiveDate,
    pub t: f64,
    /// Math-layer prediction on the scaled response.
    pub scaled: f64,
    /// `scaled × k_z`, floored at zero.
    pub deaths: f64,
}

/// Daily predictions from the day after the last observation through `until`.
pub fn daily_forecast(fit: &FitResult, subject: usize, until: NaiveDate) -> Result<Vec<DailyForecast>> {
    let s = &fit.panel.subjects[subject];
    let last = s.last_t();
    let end = s.t_of(until);
    let times: Vec<f64> = (1..=((end - last).max(0.0) as usize)).map(|k| last + k as f64).collect();
    let pred = predict_future(fit, subject, &times)?;
    Ok(times
        .iter()
        .zip(pred)
        .map(|(&t, p)| DailyForecast { date: s.date_of(t), t, scaled: p, deaths: (p * fit.panel.k_z).max(0.0) })
        .collect())
}

/// Observed cumulative total plus the clamped daily forecasts through each
/// date, on the original scale. Dates must not precede the last observation.
pub fn cumulative_forecast(fit: &FitResult, subject: usize, dates: &[NaiveDate]) -> Result<Vec<f64>> {
    let s = fit.panel.subjects.get(subject).ok_or_else(|| Error::Input(format!("no subject with index {subject}")))?;
    let last_date = s.date_of(s.last_t());
    if let Some(bad) = dates.iter().find(|d| **d < last_date) {
        return Err(Error::Input(format!("forecast date {bad} precedes the last observation {last_date} of {}", s.name)));
    }
    let observed = fit.panel.observed_total(subject);
    let Some(&max_date) = dates.iter().max() else {
        return Ok(Vec::new());
    };
    let daily = daily_forecast(fit, subject, max_date)?;
    Ok(dates
        .iter()
        .map(|d| observed + daily.iter().filter(|f| f.date <= *d).map(|f| f.deaths).sum::<f64>())
        .collect())
}

/// `η̃⁺ − H̃⁺b̃ + H̃⁺ b̂`: the same conditional mean written through the
/// empirical-Bayes predictor (used as a cross-check).
pub fn predict_via_random_effects(fit: &FitResult, subject: usize, times: &[f64], b_hat: &DVector<f64>) -> Vec<f64> {
    let b_tilde = &fit.b_hat[subject];
    let (eta_p, _, h_p) = design(&fit.model, times, &fit.theta.beta, b_tilde);
    let diff: DVector<f64> = b_hat - DVector::from_column_slice(b_tilde);
    (eta_p + h_p * diff).iter().copied().collect()
}

/// Daily curve of the subject's fitted random effects, no conditioning
/// correction: `η(t; β̂, b̂_i)`.
pub fn plug_in_curve(fit: &FitResult, subject: usize, times: &[f64]) -> Vec<f64> {
    times.iter().map(|&t| fit.model.eta(t, &fit.theta.beta, &fit.b_hat[subject])).collect()
}
