//! Approximate maximum likelihood for nonlinear mixed-effects models with
//! SMSN random effects and SMN errors.
//!
//! Each outer iteration expands the mean function to first order around the
//! current `(β̃, b̃_i)`, which yields the linear mixed model
//!
//! ```text
//! ỹ_i = y_i − η_i(β̃, b̃_i) + W̃_i β̃ + H̃_i b̃_i ≈ W̃_i β + H̃_i b_i + ε_i
//! ```
//!
//! with `b_i ~ SMSN_q(cΔ, D, λ)` and `ε_i` sharing the mixing scale `U_i`.
//! One ECM sweep updates `(β, σ², D, λ)`, the mixing parameters are profiled,
//! and `b̃_i` moves to the empirical-Bayes predictor. All `n_i × n_i` algebra
//! goes through Woodbury identities, so the per-subject cost is `O(n_i q²)`.
//!
//! Latent representation used by the E-step:
//! `b | t, u ~ N(cΔ + Δt, Γ/u)`, `T | u ~ HN(0, 1/u)`, `Γ = D − ΔΔᵀ`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curve::{design, fit_population, fit_subjects, CurveModel, ModelSpec};
use crate::data_io::PreparedPanel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::parallel::{par_map, Parallelism};
use crate::smsn::{weights_standardized, ConditionalWeights, MixingLaw, Standardized};

/// Distribution family: mixing law plus whether the random effects are skewed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    N,
    SN,
    T,
    ST,
    SL,
    SSL,
    CN,
    SCN,
}

impl Family {
    pub const ALL: [Family; 8] =
        [Family::N, Family::SN, Family::T, Family::ST, Family::SL, Family::SSL, Family::CN, Family::SCN];

    pub fn label(&self) -> &'static str {
        match self {
            Family::N => "N",
            Family::SN => "SN",
            Family::T => "t",
            Family::ST => "ST",
            Family::SL => "SL",
            Family::SSL => "SSL",
            Family::CN => "CN",
            Family::SCN => "SCN",
        }
    }

    pub fn is_skew(&self) -> bool {
        matches!(self, Family::SN | Family::ST | Family::SSL | Family::SCN)
    }

    /// Mixing law with the default starting parameters.
    pub fn initial_mixing(&self) -> MixingLaw {
        match self {
            Family::N | Family::SN => MixingLaw::Normal,
            Family::T | Family::ST => MixingLaw::StudentT { nu: 5.0 },
            Family::SL | Family::SSL => MixingLaw::Slash { nu: 5.0 },
            Family::CN | Family::SCN => MixingLaw::ContaminatedNormal { nu: 0.1, gamma: 0.3 },
        }
    }

    /// Number of free parameters with `r` fixed and `q` random effects.
    pub fn n_params(&self, r: usize, q: usize) -> usize {
        r + 1 + q * (q + 1) / 2 + if self.is_skew() { q } else { 0 } + self.initial_mixing().n_params()
    }

    fn accepts(&self, mixing: &MixingLaw) -> bool {
        std::mem::discriminant(&self.initial_mixing()) == std::mem::discriminant(mixing)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Family::ALL
            .into_iter()
            .find(|f| f.label().to_ascii_lowercase() == lower)
            .ok_or_else(|| Error::invalid(format!("unknown family {s:?}; expected one of N, SN, t, ST, SL, SSL, CN, SCN")))
    }
}

/// Full parameter vector. `alpha` packs the lower Cholesky factor of `D`
/// row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mixing: MixingLaw,
}

impl Theta {
    pub fn new(beta: Vec<f64>, sigma2: f64, d: &DMatrix<f64>, lambda: Vec<f64>, mixing: MixingLaw) -> Result<Self> {
        let chol = linalg::cholesky(d, "D")?;
        let theta = Theta { beta, sigma2, alpha: linalg::pack_lower(&chol.l()), lambda, mixing };
        theta.validate()?;
        Ok(theta)
    }

    pub fn q(&self) -> usize {
        self.lambda.len()
    }

    pub fn d(&self) -> DMatrix<f64> {
        let l = linalg::unpack_lower(&self.alpha, self.q()).expect("alpha length checked by validate");
        &l * l.transpose()
    }

    /// Symmetric square root `F` with `F F = D`.
    pub fn d_sqrt(&self) -> Result<DMatrix<f64>> {
        linalg::sym_sqrt(&self.d())
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.q();
        if self.alpha.len() != q * (q + 1) / 2 {
            return Err(Error::shape(format!("alpha needs {} entries for q={q}, has {}", q * (q + 1) / 2, self.alpha.len())));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.beta.iter().chain(&self.alpha).chain(&self.lambda).any(|v| !v.is_finite()) {
            return Err(Error::invalid("theta has non-finite entries"));
        }
        linalg::cholesky(&self.d(), "D")?;
        self.mixing.validate()?;
        self.mixing.centering()?;
        Ok(())
    }

    /// `Δ = D^{1/2} δ`, `δ = λ / sqrt(1 + λᵀλ)`.
    pub fn big_delta(&self) -> Result<DVector<f64>> {
        let lam = DVector::from_column_slice(&self.lambda);
        let delta = &lam / (1.0 + lam.norm_squared()).sqrt();
        Ok(linalg::sym_sqrt(&self.d())? * delta)
    }

    /// `ζ = D^{-1/2} λ`.
    pub fn zeta(&self) -> Result<DVector<f64>> {
        Ok(linalg::sym_inv_sqrt(&self.d())? * DVector::from_column_slice(&self.lambda))
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.push(self.sigma2);
        v.extend(&self.alpha);
        v.extend(&self.lambda);
        v.extend(self.mixing.params());
        v
    }
}

/// Which location enters the approximate marginal law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationForm {
    /// `η_i(β, b̃_i) − H̃_i(b̃_i − cΔ)` with the expansion re-evaluated at `β`.
    #[default]
    Printed,
    /// `η̃_i + W̃_i(β − β̃) − H̃_i(b̃_i − cΔ)` with the expansion frozen at `β̃`.
    Pseudo,
}

/// How the automatic initializer builds starting values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartStrategy {
    /// Free per-subject least squares: `β`, effects, their covariance and
    /// `σ²` from one joint fit; `λ` from the effects' sample skewness.
    #[default]
    PerSubject,
    /// Pooled curve with `b = 0`, `D = 0.1 I`, `λ = 0`.
    Pooled,
}

/// Starting values; anything absent comes from the automatic initializer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialValues {
    pub beta: Option<Vec<f64>>,
    pub sigma2: Option<f64>,
    /// Row-major `q × q`.
    pub d: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub nu: Option<Vec<f64>>,
    pub b: Option<Vec<Vec<f64>>>,
}

/// Estimation controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub tol_loglik: f64,
    pub tol_param: f64,
    pub max_outer: usize,
    /// ECM sweeps between relinearizations.
    pub em_sweeps: usize,
    pub location_form: LocationForm,
    pub estimate_nu: bool,
    /// Lower/upper bound of the scalar `ν` search.
    pub nu_bounds: Option<(f64, f64)>,
    pub nu_grid_points: usize,
    /// Run the skew code path with `λ` pinned at zero.
    pub constrain_lambda_zero: bool,
    pub init: InitialValues,
    pub start: StartStrategy,
    pub parallelism: Parallelism,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol_loglik: 1e-6,
            tol_param: 1e-4,
            max_outer: 200,
            em_sweeps: 1,
            location_form: LocationForm::Printed,
            estimate_nu: true,
            nu_bounds: None,
            nu_grid_points: 16,
            constrain_lambda_zero: false,
            init: InitialValues::default(),
            start: StartStrategy::PerSubject,
            parallelism: Parallelism::Sequential,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_loglik > 0.0 && self.tol_param > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.max_outer == 0 || self.em_sweeps == 0 {
            return Err(Error::invalid("max_outer and em_sweeps must be at least 1"));
        }
        if let Some((lo, hi)) = self.nu_bounds {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::invalid(format!("nu_bounds must satisfy 0 < lo < hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// One outer iteration of the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loglik: f64,
    pub param_change: f64,
    /// The loglik fell when the model was re-expanded.
    pub relinearization_drop: bool,
    /// An ECM sweep lowered the frozen-expansion loglik (should not happen).
    pub em_decrease: bool,
    /// Times the outer step was halved to keep the loglik from falling.
    pub step_halvings: usize,
    /// The step came from a direct quasi-Newton ascent after the ECM step
    /// stalled.
    pub direct_ascent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoCriteria {
    pub aic: f64,
    pub bic: f64,
}

pub fn info_criteria(loglik: f64, p: usize, n: usize) -> InfoCriteria {
    let p = p as f64;
    InfoCriteria { aic: 2.0 * p - 2.0 * loglik, bic: p * (n as f64).ln() - 2.0 * loglik }
}

/// Estimates, random effects and diagnostics of one fit. Carries the panel
/// and curve so prediction and bootstrap need nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    pub model: ModelSpec,
    pub theta: Theta,
    pub b_hat: Vec<Vec<f64>>,
    pub u_hat: Vec<f64>,
    pub loglik: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    pub config: FitConfig,
    pub panel: PreparedPanel,
}

impl FitResult {
    pub fn info_criteria(&self) -> InfoCriteria {
        info_criteria(self.loglik, self.n_params, self.n_obs)
    }

    pub fn b_hat_vectors(&self) -> Vec<DVector<f64>> {
        self.b_hat.iter().map(|b| DVector::from_column_slice(b)).collect()
    }

    /// In-sample fitted curve `η(t; β̂, b̂_i)` on the scaled response.
    pub fn fitted(&self, subject: usize) -> Vec<f64> {
        let s = &self.panel.subjects[subject];
        s.t.iter().map(|&t| self.model.eta(t, &self.theta.beta, &self.b_hat[subject])).collect()
    }
}

/// Quantities of `θ` shared by every subject.
struct Derived {
    q: usize,
    sigma2: f64,
    d: DMatrix<f64>,
    d_inv: DMatrix<f64>,
    ln_det_d: f64,
    big_delta: DVector<f64>,
    zeta: DVector<f64>,
    c: f64,
    gamma_inv: DMatrix<f64>,
    mixing: MixingLaw,
}

impl Derived {
    fn new(theta: &Theta) -> Result<Self> {
        theta.validate()?;
        let d = theta.d();
        let chol = linalg::cholesky(&d, "D")?;
        let ln_det_d = linalg::chol_logdet(&chol);
        let d_inv = chol.inverse();
        let big_delta = theta.big_delta()?;
        let gamma = &d - &big_delta * big_delta.transpose();
        let gamma_inv = linalg::cholesky(&gamma, "D - ΔΔᵀ")?.inverse();
        Ok(Self {
            q: theta.q(),
            sigma2: theta.sigma2,
            d,
            d_inv,
            ln_det_d,
            big_delta,
            zeta: theta.zeta()?,
            c: theta.mixing.centering()?,
            gamma_inv,
            mixing: theta.mixing,
        })
    }
}

/// First-order expansion of one subject's mean around `(β̃, b̃_i)`.
#[derive(Debug, Clone)]
pub struct LinearizedSubject {
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// Pseudo-response `y − η̃ + W̃β̃ + H̃b̃`.
    pub y_tilde: DVector<f64>,
    pub b_tilde: DVector<f64>,
    hth: DMatrix<f64>,
}

/// The linear mixed model obtained from one expansion of every subject.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub beta_tilde: Vec<f64>,
    pub subjects: Vec<LinearizedSubject>,
    pub parallelism: Parallelism,
}

/// Marginal-law summary of one subject under `θ`.
struct Marginal {
    st: Standardized,
    /// `ζᵀΛζ`.
    zlz: f64,
    lam_zeta: DVector<f64>,
    d_ht_psi_inv_r: DVector<f64>,
}

/// E-step output for one subject.
#[derive(Debug, Clone)]
struct EMoments {
    kappa: f64,
    e_ub: DVector<f64>,
    e_ubb: DMatrix<f64>,
    e_ut: f64,
    e_ut2: f64,
    e_utb: DVector<f64>,
    ln_density: f64,
}

fn subject_err(i: usize, e: Error) -> Error {
    match e {
        Error::Subject { .. } => e,
        other => Error::Subject { subject: i, reason: other.to_string() },
    }
}

impl Linearization {
    pub fn new(
        model: &dyn CurveModel,
        panel: &PreparedPanel,
        beta_tilde: &[f64],
        b_tilde: &[DVector<f64>],
        parallelism: Parallelism,
    ) -> Result<Self> {
        if b_tilde.len() != panel.subjects.len() {
            return Err(Error::shape(format!("{} random-effect vectors for {} subjects", b_tilde.len(), panel.subjects.len())));
        }
        let q = model.n_random();
        if let Some(bad) = b_tilde.iter().position(|b| b.len() != q) {
            return Err(Error::shape(format!("random effects of subject {bad} have wrong length (expected {q})")));
        }
        let subjects = par_map(parallelism, &panel.subjects, |i, s| {
            let (eta, w, h) = design(model, &s.t, beta_tilde, b_tilde[i].as_slice());
            let y = DVector::from_column_slice(&s.y);
            let bt = DVector::from_column_slice(beta_tilde);
            let y_tilde = y - eta + &w * bt + &h * &b_tilde[i];
            let hth = h.transpose() * &h;
            if y_tilde.iter().any(|v| !v.is_finite()) || hth.iter().any(|v| !v.is_finite()) {
                return Err(Error::Subject { subject: i, reason: "mean function is not finite at the expansion point".into() });
            }
            Ok(LinearizedSubject { w, h, y_tilde, b_tilde: b_tilde[i].clone(), hth })
        });
        Ok(Self { beta_tilde: beta_tilde.to_vec(), subjects: subjects.into_iter().collect::<Result<_>>()?, parallelism })
    }

    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.y_tilde.len()).sum()
    }

    /// `ỹ − Wβ − HcΔ`.
    fn resid(s: &LinearizedSubject, beta: &DVector<f64>, dv: &Derived) -> DVector<f64> {
        &s.y_tilde - &s.w * beta - &s.h * (&dv.big_delta * dv.c)
    }

    fn marginal(s: &LinearizedSubject, beta: &DVector<f64>, dv: &Derived) -> Result<Marginal> {
        let n = s.y_tilde.len();
        let r = Self::resid(s, beta, dv);
        let s2 = dv.sigma2;
        // Λ = (D⁻¹ + HᵀH/σ²)⁻¹
        let lam_inv = &dv.d_inv + &s.hth / s2;
        let chol = linalg::cholesky(&lam_inv, "D⁻¹ + HᵀH/σ²")?;
        let ln_det_lam = -linalg::chol_logdet(&chol);
        let g = s.h.transpose() * &r;
        let lam_g = chol.solve(&g);
        // HᵀΨ⁻¹r = Hᵀr/σ² − HᵀHΛHᵀr/σ⁴
        let ht_psi_inv_r = &g / s2 - &s.hth * &lam_g / (s2 * s2);
        let maha = r.norm_squared() / s2 - g.dot(&lam_g) / (s2 * s2);
        let ln_det = n as f64 * s2.ln() + dv.ln_det_d - ln_det_lam;
        let lam_zeta = chol.solve(&dv.zeta);
        let zlz = dv.zeta.dot(&lam_zeta);
        let d_ht_psi_inv_r = &dv.d * ht_psi_inv_r;
        let skew = dv.zeta.dot(&d_ht_psi_inv_r) / (1.0 + zlz).sqrt();
        if !(maha.is_finite() && ln_det.is_finite() && skew.is_finite()) {
            return Err(Error::numerical("marginal dispersion is degenerate"));
        }
        Ok(Marginal { st: Standardized { dim: n, ln_det, maha: maha.max(0.0), skew }, zlz, lam_zeta, d_ht_psi_inv_r })
    }

    /// Approximate log-likelihood with the expansion frozen at `β̃`.
    pub fn loglik(&self, theta: &Theta) -> Result<f64> {
        Ok(self.subject_logliks(theta)?.iter().sum())
    }

    pub fn subject_logliks(&self, theta: &Theta) -> Result<Vec<f64>> {
        let dv = Derived::new(theta)?;
        let beta = DVector::from_column_slice(&theta.beta);
        par_map(self.parallelism, &self.subjects, |i, s| {
            let m = Self::marginal(s, &beta, &dv).map_err(|e| subject_err(i, e))?;
            crate::smsn::ln_density_standardized(&m.st, &dv.mixing).map_err(|e| subject_err(i, e))
        })
        .into_iter()
        .collect()
    }

    /// Conditional weights `E{U|y}`, `τ₋₁`, `τ₁` of every subject.
    pub fn weights(&self, theta: &Theta) -> Result<Vec<ConditionalWeights>> {
        let dv = Derived::new(theta)?;
        let beta = DVector::from_column_slice(&theta.beta);
        par_map(self.parallelism, &self.subjects, |i, s| {
            let m = Self::marginal(s, &beta, &dv).map_err(|e| subject_err(i, e))?;
            weights_standardized(&m.st, m.st.skew, &dv.mixing).map_err(|e| subject_err(i, e))
        })
        .into_iter()
        .collect()
    }

    /// Empirical-Bayes predictor
    /// `b̂ = cΔ + DHᵀΨ⁻¹r + τ₋₁ Λζ / sqrt(1 + ζᵀΛζ)`.
    pub fn eb_random_effects(&self, theta: &Theta) -> Result<Vec<DVector<f64>>> {
        let dv = Derived::new(theta)?;
        let beta = DVector::from_column_slice(&theta.beta);
        par_map(self.parallelism, &self.subjects, |i, s| {
            let m = Self::marginal(s, &beta, &dv).map_err(|e| subject_err(i, e))?;
            let w = weights_standardized(&m.st, m.st.skew, &dv.mixing).map_err(|e| subject_err(i, e))?;
            let skew_part = &m.lam_zeta * (w.tau_m1 / (1.0 + m.zlz).sqrt());
            Ok(&dv.big_delta * dv.c + &m.d_ht_psi_inv_r + skew_part)
        })
        .into_iter()
        .collect()
    }

    fn e_step_subject(s: &LinearizedSubject, beta: &DVector<f64>, dv: &Derived) -> Result<EMoments> {
        let s2 = dv.sigma2;
        let delta = &dv.big_delta;
        let r = Self::resid(s, beta, dv);
        // B = (Γ⁻¹ + HᵀH/σ²)⁻¹ and HᵀΩ⁻¹ = Γ⁻¹ B Hᵀ / σ²
        let b_inv = &dv.gamma_inv + &s.hth / s2;
        let chol_b = linalg::cholesky(&b_inv, "Γ⁻¹ + HᵀH/σ²")?;
        let b_mat = chol_b.inverse();
        let ht_omega_inv_r = &dv.gamma_inv * chol_b.solve(&(s.h.transpose() * &r)) / s2;
        let ht_omega_inv_h_delta = &dv.gamma_inv * chol_b.solve(&(&s.hth * delta)) / s2;
        let m2 = 1.0 / (1.0 + delta.dot(&ht_omega_inv_h_delta));
        let mt = m2.sqrt();
        let mu_t = m2 * delta.dot(&ht_omega_inv_r);
        let a = mu_t / mt;

        let marg = Self::marginal(s, beta, dv)?;
        let w = weights_standardized(&marg.st, a, &dv.mixing)?;
        let kappa = w.kappa;
        let e_ut = kappa * mu_t + mt * w.tau_1;
        let e_ut2 = kappa * mu_t * mu_t + m2 + mu_t * mt * w.tau_1;

        let resid0 = &s.y_tilde - &s.w * beta;
        let sb = &b_mat * (&dv.gamma_inv * delta * dv.c + s.h.transpose() * resid0 / s2);
        let rb = &b_mat * (&dv.gamma_inv * delta);
        let e_ub = &sb * kappa + &rb * e_ut;
        let cross = &sb * rb.transpose();
        let e_ubb = &b_mat + &sb * sb.transpose() * kappa + (&cross + cross.transpose()) * e_ut + &rb * rb.transpose() * e_ut2;
        let e_utb = &sb * e_ut + &rb * e_ut2;
        Ok(EMoments { kappa, e_ub, e_ubb, e_ut, e_ut2, e_utb, ln_density: w.ln_density })
    }

    /// One ECM sweep. Returns the updated parameters and the frozen-expansion
    /// loglik at the input `θ` (a by-product of the E-step).
    pub fn em_step(&self, theta: &Theta, estimate_skew: bool) -> Result<(Theta, f64)> {
        let dv = Derived::new(theta)?;
        let beta = DVector::from_column_slice(&theta.beta);
        let moments: Vec<EMoments> = par_map(self.parallelism, &self.subjects, |i, s| {
            Self::e_step_subject(s, &beta, &dv).map_err(|e| subject_err(i, e))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let ll_before: f64 = moments.iter().map(|m| m.ln_density).sum();
        let r = theta.beta.len();
        let q = dv.q;
        let n_subj = self.subjects.len() as f64;

        // β: weighted least squares on stacked rows, column-equilibrated and
        // solved by SVD since W is close to rank deficient early on.
        let n_rows = self.n_obs();
        let mut x = DMatrix::zeros(n_rows, r);
        let mut z = DVector::zeros(n_rows);
        let mut row = 0;
        for (s, m) in self.subjects.iter().zip(&moments) {
            let sk = m.kappa.sqrt();
            let target = (&s.y_tilde * m.kappa - &s.h * &m.e_ub) / sk;
            x.rows_mut(row, s.w.nrows()).copy_from(&(&s.w * sk));
            z.rows_mut(row, s.w.nrows()).copy_from(&target);
            row += s.w.nrows();
        }
        let scale: Vec<f64> = (0..r).map(|k| x.column(k).norm().max(1e-300)).collect();
        for (k, sc) in scale.iter().enumerate() {
            x.column_mut(k).scale_mut(1.0 / sc);
        }
        let sol = x
            .svd(true, true)
            .solve(&z, 1e-12)
            .map_err(|e| Error::numerical(format!("fixed-effects least squares failed: {e}")))?;
        let beta_new = DVector::from_iterator(r, sol.iter().zip(&scale).map(|(v, sc)| v / sc));
        if beta_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("fixed-effects update is not finite"));
        }

        // σ²
        let mut ss = 0.0;
        for (s, m) in self.subjects.iter().zip(&moments) {
            let r0 = &s.y_tilde - &s.w * &beta_new;
            let hr = s.h.transpose() * &r0;
            ss += m.kappa * r0.norm_squared() - 2.0 * hr.dot(&m.e_ub) + (&s.hth * &m.e_ubb).trace();
        }
        let sigma2 = ss / self.n_obs() as f64;
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::numerical(format!("sigma2 update gave {sigma2}")));
        }

        // Δ and Γ
        let c = dv.c;
        let mut sum_ubb = DMatrix::zeros(q, q);
        let mut s_tb = DVector::zeros(q);
        let mut s_tt = 0.0;
        for m in &moments {
            sum_ubb += &m.e_ubb;
            s_tb += &m.e_utb + &m.e_ub * c;
            s_tt += m.e_ut2 + 2.0 * c * m.e_ut + c * c * m.kappa;
        }
        let (big_delta, gamma) = if estimate_skew && s_tt > 0.0 {
            let d = &s_tb / s_tt;
            let g = (&sum_ubb - &d * s_tb.transpose() - &s_tb * d.transpose() + &d * d.transpose() * s_tt) / n_subj;
            (d, g)
        } else {
            (DVector::zeros(q), sum_ubb / n_subj)
        };
        let gamma = regularize(0.5 * (&gamma + gamma.transpose()))?;
        let d_new = &gamma + &big_delta * big_delta.transpose();
        let lambda = lambda_from(&d_new, &big_delta)?;
        let chol = linalg::cholesky(&d_new, "D")?;
        let theta_new = Theta {
            beta: beta_new.iter().copied().collect(),
            sigma2,
            alpha: linalg::pack_lower(&chol.l()),
            lambda: lambda.iter().copied().collect(),
            mixing: theta.mixing,
        };
        Ok((theta_new, ll_before))
    }
}

/// Ridge-regularized retry when a covariance update loses definiteness.
fn regularize(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if linalg::cholesky(&m, "Γ").is_ok() {
        return Ok(m);
    }
    let q = m.nrows();
    let scale = (m.trace() / q as f64).abs().max(1e-8);
    for k in [1e-8, 1e-6, 1e-4] {
        let cand = &m + DMatrix::identity(q, q) * (k * scale);
        if linalg::cholesky(&cand, "Γ").is_ok() {
            return Ok(cand);
        }
    }
    Err(Error::numerical("random-effects covariance update is singular even after ridge regularization"))
}

/// `λ = δ / sqrt(1 − δᵀδ)` with `δ = D^{-1/2} Δ`.
fn lambda_from(d: &DMatrix<f64>, big_delta: &DVector<f64>) -> Result<DVector<f64>> {
    let delta = linalg::sym_inv_sqrt(d)? * big_delta;
    let rest = 1.0 - delta.norm_squared();
    if rest <= 0.0 {
        return Err(Error::numerical("skewness update left the admissible region"));
    }
    Ok(delta / rest.sqrt())
}

/// Approximate log-likelihood of `θ` at random-effect expansion points `b̃`.
pub fn approx_loglik(
    model: &dyn CurveModel,
    theta: &Theta,
    panel: &PreparedPanel,
    b_tilde: &[DVector<f64>],
    parallelism: Parallelism,
) -> Result<f64> {
    Linearization::new(model, panel, &theta.beta, b_tilde, parallelism)?.loglik(theta)
}

/// Either location form; `Pseudo` needs the frozen `β̃`.
pub fn approx_loglik_with(
    form: LocationForm,
    model: &dyn CurveModel,
    theta: &Theta,
    panel: &PreparedPanel,
    beta_tilde: &[f64],
    b_tilde: &[DVector<f64>],
    parallelism: Parallelism,
) -> Result<f64> {
    match form {
        LocationForm::Printed => approx_loglik(model, theta, panel, b_tilde, parallelism),
        LocationForm::Pseudo => Linearization::new(model, panel, beta_tilde, b_tilde, parallelism)?.loglik(theta),
    }
}

/// Empirical-Bayes random effects with the expansion at `(θ.β, b_prev)`.
pub fn eb_random_effects(
    model: &dyn CurveModel,
    theta: &Theta,
    panel: &PreparedPanel,
    b_prev: &[DVector<f64>],
    parallelism: Parallelism,
) -> Result<Vec<DVector<f64>>> {
    Linearization::new(model, panel, &theta.beta, b_prev, parallelism)?.eb_random_effects(theta)
}

fn golden_max(f: &mut dyn FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (b - a).abs() > tol {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Bounds on the scalar mixing parameter.
fn nu_bounds(mixing: &MixingLaw, config: &FitConfig) -> (f64, f64) {
    if let Some(b) = config.nu_bounds {
        return b;
    }
    match mixing {
        MixingLaw::Slash { .. } => (0.55, 50.0),
        _ => (1.01, 200.0),
    }
}

/// Profile-likelihood update of the mixing parameters with everything else
/// held fixed. The first call scans a grid; later calls search locally.
fn profile_mixing(lin: &Linearization, theta: &Theta, current_ll: f64, first: bool, config: &FitConfig) -> Result<(MixingLaw, f64)> {
    let eval = |m: MixingLaw| -> f64 {
        let cand = Theta { mixing: m, ..theta.clone() };
        lin.loglik(&cand).unwrap_or(f64::NEG_INFINITY)
    };
    let mut best = (theta.mixing, current_ll);
    match theta.mixing {
        MixingLaw::Normal => return Ok(best),
        MixingLaw::StudentT { nu } | MixingLaw::Slash { nu } => {
            let (lo, hi) = nu_bounds(&theta.mixing, config);
            let (llo, lhi) = (lo.ln(), hi.ln());
            let (a, b) = if first {
                let k = config.nu_grid_points.max(3);
                let grid: Vec<f64> = (0..k).map(|j| llo + (lhi - llo) * j as f64 / (k - 1) as f64).collect();
                let vals: Vec<f64> = grid.iter().map(|&s| eval(theta.mixing.with_params(&[s.exp()]))).collect();
                let j = (0..k).fold(0, |bj, j| if vals[j] > vals[bj] { j } else { bj });
                if vals[j] > best.1 {
                    best = (theta.mixing.with_params(&[grid[j].exp()]), vals[j]);
                }
                (grid[j.saturating_sub(1)], grid[(j + 1).min(k - 1)])
            } else {
                let s = nu.clamp(lo, hi).ln();
                ((s - 0.7).max(llo), (s + 0.7).min(lhi))
            };
            let mut f = |s: f64| eval(theta.mixing.with_params(&[s.exp()]));
            let (s, v) = golden_max(&mut f, a, b, 1e-4);
            if v > best.1 {
                best = (theta.mixing.with_params(&[s.exp()]), v);
            }
        }
        MixingLaw::ContaminatedNormal { .. } => {
            let lo = 1e-3;
            let hi = 1.0 - 1e-3;
            if first {
                for &nu in &[0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.7] {
                    for &gamma in &[0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.75] {
                        let m = MixingLaw::ContaminatedNormal { nu, gamma };
                        let v = eval(m);
                        if v > best.1 {
                            best = (m, v);
                        }
                    }
                }
            }
            for _ in 0..2 {
                let MixingLaw::ContaminatedNormal { gamma, .. } = best.0 else { unreachable!() };
                let mut f = |x: f64| eval(MixingLaw::ContaminatedNormal { nu: x, gamma });
                let (x, v) = golden_max(&mut f, lo, hi, 1e-4);
                if v > best.1 {
                    best = (MixingLaw::ContaminatedNormal { nu: x, gamma }, v);
                }
                let MixingLaw::ContaminatedNormal { nu, .. } = best.0 else { unreachable!() };
                let mut f = |x: f64| eval(MixingLaw::ContaminatedNormal { nu, gamma: x });
                let (x, v) = golden_max(&mut f, lo, hi, 1e-4);
                if v > best.1 {
                    best = (MixingLaw::ContaminatedNormal { nu, gamma: x }, v);
                }
            }
        }
    }
    Ok(best)
}

fn validate_panel(panel: &PreparedPanel, q: usize) -> Result<()> {
    if panel.subjects.is_empty() {
        return Err(Error::Input("panel has no subjects".into()));
    }
    for (i, s) in panel.subjects.iter().enumerate() {
        if s.t.len() != s.y.len() {
            return Err(Error::Subject { subject: i, reason: "t and y lengths differ".into() });
        }
        if s.len() <= q {
            return Err(Error::Subject {
                subject: i,
                reason: format!("{} has {} observations; more than {q} are needed", s.name, s.len()),
            });
        }
        if s.t.iter().chain(&s.y).any(|v| !v.is_finite()) {
            return Err(Error::Subject { subject: i, reason: format!("{} has non-finite values", s.name) });
        }
    }
    Ok(())
}

/// Starting `θ` and `b̃` from the configuration, falling back to a pooled
/// least-squares fit of the population curve.
fn initial_values(model: &ModelSpec, panel: &PreparedPanel, family: Family, config: &FitConfig) -> Result<(Theta, Vec<DVector<f64>>)> {
    let q = model.n_random();
    let r = model.n_fixed();
    let init = &config.init;
    let t: Vec<f64> = panel.subjects.iter().flat_map(|s| s.t.iter().copied()).collect();
    let y: Vec<f64> = panel.subjects.iter().flat_map(|s| s.y.iter().copied()).collect();
    let mut beta = match &init.beta {
        Some(b) if b.len() == r => b.clone(),
        Some(b) => return Err(Error::invalid(format!("initial beta has length {}, expected {r}", b.len()))),
        None => fit_population(model, &t, &y)?,
    };
    // Unless effects are supplied, start from a free per-subject fit: it
    // gives β, the effects, their spread and the noise level together.
    let mut joint = None;
    if init.b.is_none() && config.start == StartStrategy::PerSubject {
        let series: Vec<(&[f64], &[f64])> = panel.subjects.iter().map(|s| (s.t.as_slice(), s.y.as_slice())).collect();
        let heuristic = model.initial_fixed(&t, &y);
        let from_pooled = fit_subjects(model, &series, &beta);
        let from_heuristic = if init.beta.is_none() { fit_subjects(model, &series, &heuristic) } else { Err(Error::invalid("unused")) };
        let best = match (from_pooled, from_heuristic) {
            (Ok(a), Ok(b)) => Ok(if b.2 < a.2 { b } else { a }),
            (Ok(a), Err(_)) | (Err(_), Ok(a)) => Ok(a),
            (Err(e), Err(_)) => Err(e),
        };
        if let Ok((jb, bs, sse)) = best {
            if init.beta.is_none() {
                beta = jb;
            }
            joint = Some((bs, sse));
        }
    }
    let sigma2 = match (init.sigma2, &joint) {
        (Some(s), _) => s,
        (None, Some((_, sse))) => (sse / y.len() as f64).max(1e-8),
        (None, None) => {
            let zeros = vec![0.0; q];
            let sse: f64 = t.iter().zip(&y).map(|(&tt, &v)| (v - model.eta(tt, &beta, &zeros)).powi(2)).sum();
            (sse / y.len() as f64).max(1e-8)
        }
    };
    let d = match (&init.d, &joint) {
        (Some(d), _) if d.len() == q * q => DMatrix::from_row_slice(q, q, d),
        (Some(d), _) => return Err(Error::invalid(format!("initial D has {} entries, expected {}", d.len(), q * q))),
        (None, Some((bs, _))) if bs.len() > 1 => {
            let m = bs.len() as f64;
            let mean = bs.iter().fold(DVector::zeros(q), |acc, b| acc + DVector::from_column_slice(b)) / m;
            let mut cov = bs.iter().fold(DMatrix::zeros(q, q), |acc, b| {
                let c = DVector::from_column_slice(b) - &mean;
                acc + &c * c.transpose()
            }) / (m - 1.0);
            let ridge = (cov.trace() / q as f64).max(1e-4) * 0.05;
            for k in 0..q {
                cov[(k, k)] += ridge;
            }
            cov
        }
        (None, _) => DMatrix::identity(q, q) * 0.1,
    };
    let lambda = match &init.lambda {
        Some(l) if l.len() == q => l.clone(),
        Some(l) => return Err(Error::invalid(format!("initial lambda has length {}, expected {q}", l.len()))),
        // λ = 0 is a fixed point of the skewness update, so start away from
        // it, on the side of the starting effects' sample skewness.
        None => match &joint {
            Some((bs, _)) if bs.len() > 2 => (0..q)
                .map(|k| {
                    let g = sample_skewness(bs.iter().map(|b| b[k]));
                    let l = (2.0 * g).clamp(-3.0, 3.0);
                    if l.abs() < 0.5 { 0.5f64.copysign(l) } else { l }
                })
                .collect(),
            Some(_) => vec![0.5; q],
            None => vec![0.0; q],
        },
    };
    let lambda = if family.is_skew() && !config.constrain_lambda_zero { lambda } else { vec![0.0; q] };
    let mut mixing = family.initial_mixing();
    if let Some(nu) = &init.nu {
        if nu.len() != mixing.n_params() {
            return Err(Error::invalid(format!("family {family} takes {} mixing parameters, got {}", mixing.n_params(), nu.len())));
        }
        mixing = mixing.with_params(nu);
    }
    let b = match &init.b {
        Some(b) if b.len() == panel.subjects.len() && b.iter().all(|v| v.len() == q) => {
            b.iter().map(|v| DVector::from_column_slice(v)).collect()
        }
        Some(_) => return Err(Error::invalid("initial b must have one length-q vector per subject")),
        None => match joint {
            Some((bs, _)) => bs.iter().map(|v| DVector::from_column_slice(v)).collect(),
            None => vec![DVector::zeros(q); panel.subjects.len()],
        },
    };
    Ok((Theta::new(beta, sigma2, &d, lambda, mixing)?, b))
}

fn sample_skewness(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let m2 = xs.clone().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    if m2 > 0.0 {
        m3 / m2.powf(1.5)
    } else {
        0.0
    }
}

const MAX_HALVINGS: usize = 10;
const MAX_SETTLE: usize = 100;

/// Iterates `b ← EB(θ; expansion at (β, b))` to its fixed point, so the
/// approximate loglik becomes a function of `θ` alone. Returns the settled
/// effects, the expansion there and its loglik.
pub fn settle_random_effects(
    model: &dyn CurveModel,
    theta: &Theta,
    panel: &PreparedPanel,
    b_start: &[DVector<f64>],
    parallelism: Parallelism,
) -> Result<(Vec<DVector<f64>>, Linearization, f64)> {
    let mut b = b_start.to_vec();
    let mut lin = Linearization::new(model, panel, &theta.beta, &b, parallelism)?;
    for _ in 0..MAX_SETTLE {
        let next = lin.eb_random_effects(theta)?;
        let moved = next.iter().zip(&b).map(|(x, y)| (x - y).amax() / (1.0 + y.amax())).fold(0.0, f64::max);
        b = next;
        lin = Linearization::new(model, panel, &theta.beta, &b, parallelism)?;
        if moved < 1e-10 {
            break;
        }
    }
    let ll = lin.loglik(theta)?;
    Ok((b, lin, ll))
}
const MAX_OMEGA: f64 = 64.0;

/// `a + w (b − a)` on every parameter; the packed Cholesky factor stays
/// valid because its diagonal remains positive.
fn interpolate_theta(a: &Theta, b: &Theta, w: f64) -> Theta {
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p + w * (q - p)).collect() };
    Theta {
        beta: mix(&a.beta, &b.beta),
        sigma2: a.sigma2 + w * (b.sigma2 - a.sigma2),
        alpha: mix(&a.alpha, &b.alpha),
        lambda: mix(&a.lambda, &b.lambda),
        mixing: b.mixing.with_params(&mix(&a.mixing.params(), &b.mixing.params())),
    }
}

/// Unconstrained coordinates for direct ascent: `β`, `ln σ²`, the packed
/// Cholesky factor, `λ` when free, and logit-scaled mixing parameters when
/// estimated.
struct Packing {
    template: Theta,
    skew: bool,
    mixing_box: Vec<(f64, f64)>,
}

impl Packing {
    fn new(theta: &Theta, skew: bool, config: &FitConfig) -> Self {
        let mixing_box = if !config.estimate_nu {
            Vec::new()
        } else {
            match theta.mixing {
                MixingLaw::Normal => Vec::new(),
                MixingLaw::StudentT { .. } | MixingLaw::Slash { .. } => vec![nu_bounds(&theta.mixing, config)],
                MixingLaw::ContaminatedNormal { .. } => vec![(0.0, 1.0), (0.0, 1.0)],
            }
        };
        Self { template: theta.clone(), skew, mixing_box }
    }

    fn pack(&self, theta: &Theta) -> Vec<f64> {
        let mut v = theta.beta.clone();
        v.push(theta.sigma2.ln());
        v.extend(&theta.alpha);
        if self.skew {
            v.extend(&theta.lambda);
        }
        for (p, (lo, hi)) in theta.mixing.params().iter().zip(&self.mixing_box) {
            let w = (hi - lo) * 1e-9;
            let x = p.clamp(lo + w, hi - w);
            v.push(((x - lo) / (hi - x)).ln());
        }
        v
    }

    fn unpack(&self, v: &[f64]) -> Theta {
        let t = &self.template;
        let r = t.beta.len();
        let na = t.alpha.len();
        let mut k = 0;
        let mut take = |n: usize| {
            let out = v[k..k + n].to_vec();
            k += n;
            out
        };
        let beta = take(r);
        let sigma2 = take(1)[0].exp();
        let alpha = take(na);
        let lambda = if self.skew { take(t.lambda.len()) } else { t.lambda.clone() };
        let mixing = if self.mixing_box.is_empty() {
            t.mixing
        } else {
            let raw = take(self.mixing_box.len());
            let p: Vec<f64> = raw.iter().zip(&self.mixing_box).map(|(x, (lo, hi))| lo + (hi - lo) / (1.0 + (-x).exp())).collect();
            t.mixing.with_params(&p)
        };
        Theta { beta, sigma2, alpha, lambda, mixing }
    }
}

struct NegLoglik<'a> {
    model: &'a dyn CurveModel,
    panel: &'a PreparedPanel,
    b_start: &'a [DVector<f64>],
    packing: &'a Packing,
    par: Parallelism,
}

impl NegLoglik<'_> {
    fn value(&self, v: &[f64]) -> f64 {
        let theta = self.packing.unpack(v);
        if theta.validate().is_err() {
            return f64::INFINITY;
        }
        match settle_random_effects(self.model, &theta, self.panel, self.b_start, self.par) {
            Ok((_, _, ll)) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    }
}

impl argmin::core::CostFunction for NegLoglik<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, v: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.value(v))
    }
}

impl argmin::core::Gradient for NegLoglik<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, v: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let mut g = vec![0.0; v.len()];
        let mut x = v.clone();
        for k in 0..v.len() {
            let h = 1e-6 * v[k].abs().max(1.0);
            x[k] = v[k] + h;
            let up = self.value(&x);
            x[k] = v[k] - h;
            let dn = self.value(&x);
            x[k] = v[k];
            g[k] = if up.is_finite() && dn.is_finite() { (up - dn) / (2.0 * h) } else { 0.0 };
        }
        Ok(g)
    }
}

const DIRECT_ASCENT_MAX_ITERS: u64 = 60;

/// Quasi-Newton ascent on the settled approximate loglik, used when the
/// ECM direction no longer improves it. Returns the improved parameters,
/// effects, expansion and loglik, or `None` when no improvement was found.
fn direct_ascent(
    model: &dyn CurveModel,
    panel: &PreparedPanel,
    theta: &Theta,
    b: &[DVector<f64>],
    ll: f64,
    skew: bool,
    config: &FitConfig,
) -> Option<(Theta, Vec<DVector<f64>>, Linearization, f64)> {
    use argmin::core::{Executor, Gradient, State};
    use argmin::solver::linesearch::{condition::ArmijoCondition, BacktrackingLineSearch};
    use argmin::solver::quasinewton::BFGS;

    let packing = Packing::new(theta, skew, config);
    let problem = NegLoglik { model, panel, b_start: b, packing: &packing, par: config.parallelism };
    let x0 = packing.pack(theta);
    let g0 = problem.gradient(&x0).ok()?;
    let gnorm = g0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(gnorm.is_finite() && gnorm > 0.0) {
        return None;
    }
    let n = x0.len();
    let scale = 0.1 / gnorm;
    let h0: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { scale } else { 0.0 }).collect()).collect();
    let search = BacktrackingLineSearch::new(ArmijoCondition::new(1e-4).ok()?);
    let solver = BFGS::new(search).with_tolerance_cost(1e-12).ok()?;
    let res = Executor::new(problem, solver)
        .configure(|st| st.param(x0).inv_hessian(h0).max_iters(DIRECT_ASCENT_MAX_ITERS))
        .run()
        .ok()?;
    let best = res.state().get_best_param()?.clone();
    let cand = packing.unpack(&best);
    let (nb, nl, v) = settle_random_effects(model, &cand, panel, b, config.parallelism).ok()?;
    (v.is_finite() && v > ll).then_some((cand, nb, nl, v))
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = old.iter().map(|a| a * a).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

/// Fits `family` to `panel` by alternating linearization, ECM, mixing
/// profile and empirical-Bayes steps.
pub fn fit(model: &ModelSpec, panel: &PreparedPanel, family: Family, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let q = model.n_random();
    validate_panel(panel, q)?;
    let (mut theta, mut b) = initial_values(model, panel, family, config)?;
    if !family.accepts(&theta.mixing) {
        return Err(Error::invalid(format!("mixing law {:?} does not belong to family {family}", theta.mixing)));
    }
    if let (MixingLaw::StudentT { nu } | MixingLaw::Slash { nu }, true) = (theta.mixing, config.estimate_nu) {
        let (lo, hi) = nu_bounds(&theta.mixing, config);
        theta.mixing = theta.mixing.with_params(&[nu.clamp(lo, hi)]);
    }
    let skew = family.is_skew() && !config.constrain_lambda_zero;
    let par = config.parallelism;
    let n_obs = panel.n_obs();

    let (b0, mut lin, mut ll) = settle_random_effects(model, &theta, panel, &b, par)?;
    b = b0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut omega = 2.0;
    for it in 1..=config.max_outer {
        iterations = it;
        let old_flat = theta.flat();
        let theta_prev = theta.clone();
        let mut em_decrease = false;
        let mut frozen_ll = f64::NEG_INFINITY;
        for _ in 0..config.em_sweeps {
            let (next, before) = lin.em_step(&theta, skew)?;
            if before < frozen_ll - 1e-8 * frozen_ll.abs().max(1.0) {
                em_decrease = true;
            }
            theta = next;
            frozen_ll = before;
        }
        let after = lin.loglik(&theta)?;
        if after < frozen_ll - 1e-8 * frozen_ll.abs().max(1.0) {
            em_decrease = true;
        }
        if config.estimate_nu && theta.mixing.n_params() > 0 {
            let (m, _) = profile_mixing(&lin, &theta, after, it == 1, config)?;
            theta.mixing = m;
        }
        // Relinearize at the new point; if the loglik falls, halve the step
        // back toward the previous parameters.
        let old_theta = theta_prev.clone();
        let mut polished = false;
        let mut stalled = false;
        let mut step_halvings = 0;
        let mut accepted = None;
        let mut first_after_relin = None;
        let mut cand = theta.clone();
        loop {
            let attempt = settle_random_effects(model, &cand, panel, &b, par);
            if let Ok((nb, nl, v)) = attempt {
                first_after_relin.get_or_insert(v);
                if v.is_finite() && v >= ll - 1e-10 * ll.abs().max(1.0) {
                    accepted = Some((cand.clone(), nb, nl, v));
                    break;
                }
            }
            if step_halvings == MAX_HALVINGS {
                break;
            }
            step_halvings += 1;
            cand = interpolate_theta(&old_theta, &cand, 0.5);
        }
        // Adaptive overrelaxation: stretch an unhalved step while it keeps
        // improving on the plain one. The ridge between the curve
        // coefficients makes plain steps very short.
        if let Some((t_plain, _, _, v_plain)) = &accepted {
            if step_halvings == 0 {
                let mut stretched = interpolate_theta(&old_theta, t_plain, omega);
                if let (MixingLaw::StudentT { .. } | MixingLaw::Slash { .. }, true) = (stretched.mixing, config.estimate_nu) {
                    let (lo, hi) = nu_bounds(&stretched.mixing, config);
                    let p = stretched.mixing.params();
                    stretched.mixing = stretched.mixing.with_params(&[p[0].clamp(lo, hi)]);
                }
                let attempt = stretched.validate().and_then(|_| settle_random_effects(model, &stretched, panel, &b, par));
                match attempt {
                    Ok((nb, nl, v)) if v.is_finite() && v > *v_plain => {
                        accepted = Some((stretched, nb, nl, v));
                        omega = (omega * 2.0).min(MAX_OMEGA);
                    }
                    _ => omega = 2.0,
                }
            } else {
                omega = 2.0;
            }
        }
        let new_ll = match accepted {
            Some((t_new, b_new, lin_new, v)) => {
                theta = t_new;
                b = b_new;
                lin = lin_new;
                v
            }
            None => {
                // The ECM direction no longer helps; try a direct ascent
                // before declaring a stationary point.
                match direct_ascent(model, panel, &old_theta, &b, ll, skew, config) {
                    Some((t_new, b_new, lin_new, v)) if (v - ll) > config.tol_loglik * ll.abs().max(1.0) => {
                        polished = true;
                        theta = t_new;
                        b = b_new;
                        lin = lin_new;
                        v
                    }
                    _ => {
                        stalled = true;
                        theta = old_theta;
                        ll
                    }
                }
            }
        };
        let change = relative_change(&theta.flat(), &old_flat);
        let ll_change = (new_ll - ll).abs() / ll.abs().max(1e-8);
        trace.push(TraceEntry {
            iteration: it,
            loglik: new_ll,
            param_change: change,
            relinearization_drop: first_after_relin.is_some_and(|v| v < after - 1e-8 * after.abs().max(1.0)),
            em_decrease,
            step_halvings,
            direct_ascent: polished,
        });
        ll = new_ll;
        // A stall means neither the ECM direction nor a direct ascent
        // improves the loglik: a stationary point of the approximation.
        if stalled || (!polished && ll_change < config.tol_loglik && change < config.tol_param) {
            converged = true;
            break;
        }
    }
    let u_hat = lin.weights(&theta)?.iter().map(|w| w.kappa).collect();
    let loglik = match config.location_form {
        LocationForm::Printed => approx_loglik(model, &theta, panel, &b, par)?,
        LocationForm::Pseudo => ll,
    };
    let n_params = family.n_params(model.n_fixed(), q);
    let ic = info_criteria(loglik, n_params, n_obs);
    Ok(FitResult {
        family,
        model: model.clone(),
        theta,
        b_hat: b.iter().map(|v| v.iter().copied().collect()).collect(),
        u_hat,
        loglik,
        n_params,
        n_obs,
        aic: ic.aic,
        bic: ic.bic,
        converged,
        iterations,
        trace,
        config: config.clone(),
        panel: panel.clone(),
    })
}

/// One row of a model-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub family: Family,
    pub loglik: Option<f64>,
    pub n_params: usize,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

/// Fits every family and ranks them by AIC, then BIC, then fewer
/// parameters. Failed fits are kept as rows with the error and sort last.
/// Families run under `config.parallelism`, like the subjects inside a fit.
pub fn model_selection(
    model: &ModelSpec,
    panel: &PreparedPanel,
    families: &[Family],
    config: &FitConfig,
) -> (Vec<SelectionRow>, Vec<Option<FitResult>>) {
    let fits: Vec<Result<FitResult>> = par_map(config.parallelism, families, |_, &f| fit(model, panel, f, config));
    let mut rows: Vec<(SelectionRow, Option<FitResult>)> = families
        .iter()
        .zip(fits)
        .map(|(&family, res)| {
            let n_params = family.n_params(model.n_fixed(), model.n_random());
            match res {
                Ok(fr) => (
                    SelectionRow {
                        family,
                        loglik: Some(fr.loglik),
                        n_params,
                        aic: Some(fr.aic),
                        bic: Some(fr.bic),
                        converged: fr.converged,
                        error: None,
                    },
                    Some(fr),
                ),
                Err(e) => (
                    SelectionRow { family, loglik: None, n_params, aic: None, bic: None, converged: false, error: Some(e.to_string()) },
                    None,
                ),
            }
        })
        .collect();
    rows.sort_by(|(a, _), (b, _)| {
        let key = |r: &SelectionRow| (r.aic.unwrap_or(f64::INFINITY), r.bic.unwrap_or(f64::INFINITY), r.n_params);
        let (ka, kb) = (key(a), key(b));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(&kb.2))
    });
    rows.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::PolynomialCurve;
    use crate::data_io::Subject;
    use chrono::NaiveDate;

    fn toy_panel(ys: Vec<Vec<f64>>) -> PreparedPanel {
        let d = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        PreparedPanel {
            subjects: ys
                .into_iter()
                .enumerate()
                .map(|(i, y)| Subject { name: format!("s{i}"), first_death_date: d, t: (0..y.len()).map(|k| k as f64).collect(), y })
                .collect(),
            k_z: 1.0,
            snapshot_date: d,
        }
    }

    fn lin_model() -> ModelSpec {
        ModelSpec::Polynomial(PolynomialCurve { fixed_terms: 2, random_terms: 1 })
    }

    #[test]
    fn family_parsing_and_counts() {
        assert_eq!("st".parse::<Family>().unwrap(), Family::ST);
        assert_eq!("T".parse::<Family>().unwrap(), Family::T);
        assert!("xx".parse::<Family>().is_err());
        let (r, q) = (4, 2);
        assert_eq!(Family::N.n_params(r, q), 8);
        assert_eq!(Family::SN.n_params(r, q), 10);
        assert_eq!(Family::T.n_params(r, q), 9);
        assert_eq!(Family::ST.n_params(r, q), 11);
    }

    #[test]
    fn info_criteria_examples() {
        let ic = info_criteria(-2824.9, 8, 1000);
        assert!((ic.aic - 5665.8).abs() < 1e-9);
        assert!((info_criteria(-2343.3, 11, 1000).aic - 4708.6).abs() < 1e-9);
        assert_eq!(info_criteria(0.0, 0, 1), InfoCriteria { aic: 0.0, bic: 0.0 });
    }

    #[test]
    fn gaussian_linear_loglik_is_classic_lme() {
        let panel = toy_panel(vec![vec![1.0, 2.5, 2.0, 4.0], vec![0.0, 0.4, 1.5, 1.0, 2.2]]);
        let d = DMatrix::from_element(1, 1, 0.7);
        let theta = Theta::new(vec![0.5, 0.6], 0.3, &d, vec![0.0], MixingLaw::Normal).unwrap();
        let b = vec![DVector::from_element(1, 0.3), DVector::from_element(1, -0.2)];
        let ll = approx_loglik(&lin_model(), &theta, &panel, &b, Parallelism::Sequential).unwrap();
        let mut want = 0.0;
        for s in &panel.subjects {
            let n = s.len();
            let h = DMatrix::from_element(n, 1, 1.0);
            let psi = &h * &d * h.transpose() + DMatrix::identity(n, n) * 0.3;
            let mu = DVector::from_iterator(n, s.t.iter().map(|t| 0.5 + 0.6 * t));
            let r = DVector::from_column_slice(&s.y) - mu;
            let chol = psi.clone().cholesky().unwrap();
            let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            want += -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&chol.solve(&r)));
        }
        assert!((ll - want).abs() < 1e-10, "{ll} vs {want}");
    }

    #[test]
    fn eb_matches_latent_representation() {
        let panel = toy_panel(vec![vec![1.0, 2.5, 2.0, 4.0, 3.0], vec![0.0, 0.4, 1.5, 1.0, 2.2]]);
        let d = DMatrix::from_element(1, 1, 0.7);
        let theta = Theta::new(vec![0.5, 0.6], 0.3, &d, vec![1.5], MixingLaw::StudentT { nu: 4.0 }).unwrap();
        let b0 = vec![DVector::zeros(1); 2];
        let lin = Linearization::new(&lin_model(), &panel, &theta.beta, &b0, Parallelism::Sequential).unwrap();
        let eb = lin.eb_random_effects(&theta).unwrap();
        // E{b|y} = s_b + r_b (μ_T + M_T τ₋₁)
        let dv = Derived::new(&theta).unwrap();
        let beta = DVector::from_column_slice(&theta.beta);
        for (i, s) in lin.subjects.iter().enumerate() {
            let gamma = &dv.d - &dv.big_delta * dv.big_delta.transpose();
            let n = s.y_tilde.len();
            let omega = &s.h * &gamma * s.h.transpose() + DMatrix::identity(n, n) * theta.sigma2;
            let oinv = omega.try_inverse().unwrap();
            let rc = &s.y_tilde - &s.w * &beta - &s.h * (&dv.big_delta * dv.c);
            let hd = &s.h * &dv.big_delta;
            let m2 = 1.0 / (1.0 + hd.dot(&(&oinv * &hd)));
            let mu_t = m2 * hd.dot(&(&oinv * &rc));
            let marg = Linearization::marginal(s, &beta, &dv).unwrap();
            assert!((marg.st.skew - mu_t / m2.sqrt()).abs() < 1e-10);
            let w = weights_standardized(&marg.st, marg.st.skew, &dv.mixing).unwrap();
            let bmat = (&dv.gamma_inv + &s.hth / theta.sigma2).try_inverse().unwrap();
            let sb = &bmat * (&dv.gamma_inv * &dv.big_delta * dv.c + s.h.transpose() * (&s.y_tilde - &s.w * &beta) / theta.sigma2);
            let rb = &bmat * (&dv.gamma_inv * &dv.big_delta);
            let want = sb + rb * (mu_t + m2.sqrt() * w.tau_m1);
            assert!((&eb[i] - want).amax() < 1e-10);
        }
    }

    #[test]
    fn eb_reduces_to_blup() {
        let panel = toy_panel(vec![vec![1.0, 2.5, 2.0, 4.0]]);
        let d = DMatrix::from_element(1, 1, 0.7);
        let theta = Theta::new(vec![0.5, 0.6], 0.3, &d, vec![0.0], MixingLaw::Normal).unwrap();
        let eb = eb_random_effects(&lin_model(), &theta, &panel, &[DVector::zeros(1)], Parallelism::Sequential).unwrap();
        let n = 4;
        let h = DMatrix::from_element(n, 1, 1.0);
        let psi = &h * &d * h.transpose() + DMatrix::identity(n, n) * 0.3;
        let r = DVector::from_column_slice(&panel.subjects[0].y) - DVector::from_fn(n, |j, _| 0.5 + 0.6 * j as f64);
        let blup = &d * h.transpose() * psi.try_inverse().unwrap() * r;
        assert!((&eb[0] - blup).amax() < 1e-12);
    }

    #[test]
    fn on_curve_subject_has_zero_effect() {
        let panel = toy_panel(vec![vec![0.5, 1.1, 1.7, 2.3]]);
        let theta = Theta::new(vec![0.5, 0.6], 0.3, &DMatrix::from_element(1, 1, 0.7), vec![0.0], MixingLaw::Normal).unwrap();
        let eb = eb_random_effects(&lin_model(), &theta, &panel, &[DVector::zeros(1)], Parallelism::Sequential).unwrap();
        assert!(eb[0][0].abs() < 1e-12);
    }

    #[test]
    fn too_short_subject_is_rejected() {
        let panel = toy_panel(vec![vec![1.0, 2.0, 3.0], vec![4.0]]);
        let err = fit(&lin_model(), &panel, Family::N, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Subject { subject: 1, .. }), "{err}");
    }

    #[test]
    fn config_roundtrips_through_json() {
        let c = FitConfig { nu_bounds: Some((1.5, 30.0)), ..Default::default() };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<FitConfig>(&s).unwrap(), c);
    }
}
