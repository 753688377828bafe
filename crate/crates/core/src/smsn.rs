//! Multivariate scale mixtures of skew-normal (SMSN) distributions.
//!
//! A vector `Y = μ + U^{-1/2} Z` with `Z ~ SN_p(0, Σ, λ)` and a positive
//! mixing variable `U ~ H(·; ν)` independent of `Z`. The supported mixing laws
//! are
//!
//! | law                 | `U`                          |
//! |---------------------|------------------------------|
//! | normal              | `U ≡ 1`                      |
//! | Student-t           | `Gamma(ν/2, rate ν/2)`       |
//! | slash               | `Beta(ν, 1)`                 |
//! | contaminated normal | `γ` w.p. `ν`, else `1`       |
//!
//! `Σ^{-1/2}` is always the inverse of the symmetric (spectral) square root.
//! Densities are returned in log domain. Everything that depends on `y` goes
//! through a [`Standardized`] summary (dimension, log-determinant,
//! Mahalanobis distance, skew projection), which lets the estimation code
//! feed in quantities it computed through structured (Woodbury) algebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::log_integral;
use crate::special::{ln_gamma, ln_norm_cdf, ln_norm_pdf, ln_t_cdf, log_add_exp, LN_2, LN_SQRT_2PI};

fn ln_mills(x: f64) -> f64 {
    ln_norm_pdf(x) - ln_norm_cdf(x)
}

/// Law of the mixing scale factor `U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum MixingLaw {
    Normal,
    StudentT { nu: f64 },
    Slash { nu: f64 },
    ContaminatedNormal { nu: f64, gamma: f64 },
}

impl MixingLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MixingLaw::Normal => Ok(()),
            MixingLaw::StudentT { nu } | MixingLaw::Slash { nu } => {
                if nu.is_finite() && nu > 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("mixing parameter nu must be positive, got {nu}")))
                }
            }
            MixingLaw::ContaminatedNormal { nu, gamma } => {
                if nu > 0.0 && nu < 1.0 && gamma > 0.0 && gamma < 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "contaminated normal needs 0 < nu < 1 and 0 < gamma < 1, got nu={nu}, gamma={gamma}"
                    )))
                }
            }
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, MixingLaw::Normal)
    }

    /// Free parameters carried by the law (0, 1 or 2).
    pub fn n_params(&self) -> usize {
        match self {
            MixingLaw::Normal => 0,
            MixingLaw::StudentT { .. } | MixingLaw::Slash { .. } => 1,
            MixingLaw::ContaminatedNormal { .. } => 2,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            MixingLaw::Normal => vec![],
            MixingLaw::StudentT { nu } | MixingLaw::Slash { nu } => vec![nu],
            MixingLaw::ContaminatedNormal { nu, gamma } => vec![nu, gamma],
        }
    }

    /// Same law, new parameter values.
    pub fn with_params(&self, p: &[f64]) -> MixingLaw {
        match self {
            MixingLaw::Normal => MixingLaw::Normal,
            MixingLaw::StudentT { .. } => MixingLaw::StudentT { nu: p[0] },
            MixingLaw::Slash { .. } => MixingLaw::Slash { nu: p[0] },
            MixingLaw::ContaminatedNormal { .. } => MixingLaw::ContaminatedNormal { nu: p[0], gamma: p[1] },
        }
    }

    /// `k1 = E{U^{-1/2}}`.
    pub fn k1(&self) -> Result<f64> {
        self.validate()?;
        match *self {
            MixingLaw::Normal => Ok(1.0),
            MixingLaw::StudentT { nu } => {
                if nu <= 1.0 {
                    return Err(Error::MomentUndefined(format!(
                        "E[U^-1/2] requires nu > 1 for the Student-t law, got {nu}"
                    )));
                }
                Ok((0.5 * nu).sqrt() * (ln_gamma(0.5 * (nu - 1.0)) - ln_gamma(0.5 * nu)).exp())
            }
            MixingLaw::Slash { nu } => {
                if nu <= 0.5 {
                    return Err(Error::MomentUndefined(format!(
                        "E[U^-1/2] requires nu > 1/2 for the slash law, got {nu}"
                    )));
                }
                Ok(nu / (nu - 0.5))
            }
            MixingLaw::ContaminatedNormal { nu, gamma } => Ok(nu / gamma.sqrt() + 1.0 - nu),
        }
    }

    /// Centering constant `c = -sqrt(2/π) k1` that makes the random effects mean-zero.
    pub fn centering(&self) -> Result<f64> {
        Ok(-(2.0 / std::f64::consts::PI).sqrt() * self.k1()?)
    }

    /// Draw one mixing scale `U`.
    pub fn sample_u<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MixingLaw::Normal => 1.0,
            MixingLaw::StudentT { nu } => Gamma::new(0.5 * nu, 2.0 / nu).expect("validated nu").sample(rng),
            MixingLaw::Slash { nu } => {
                let v: f64 = rng.gen();
                v.powf(1.0 / nu)
            }
            MixingLaw::ContaminatedNormal { nu, gamma } => {
                if rng.gen::<f64>() < nu {
                    gamma
                } else {
                    1.0
                }
            }
        }
    }

    /// `ln h(e^s) + s`: log density of `ln U` at `s`, for continuous laws.
    fn ln_density_log_scale(&self, s: f64) -> f64 {
        match *self {
            MixingLaw::StudentT { nu } => {
                let x = 0.5 * nu;
                x * (s - s.exp_m1()) + gamma_center(x)
            }
            MixingLaw::Slash { nu } => {
                if s > 0.0 {
                    f64::NEG_INFINITY
                } else {
                    nu.ln() + nu * s
                }
            }
            _ => unreachable!("discrete mixing laws are summed, not integrated"),
        }
    }

    /// Upper bound of `ln U`'s support.
    fn log_support_max(&self) -> f64 {
        match self {
            MixingLaw::Slash { .. } => 0.0,
            _ => f64::INFINITY,
        }
    }
}

/// `x ln x - x - ln Γ(x)`, evaluated without cancellation for large `x`.
fn gamma_center(x: f64) -> f64 {
    if x > 15.0 {
        let inv = 1.0 / x;
        let inv2 = inv * inv;
        0.5 * x.ln() - LN_SQRT_2PI - inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
    } else {
        x * x.ln() - x - ln_gamma(x)
    }
}

/// Everything the mixing integrals need to know about one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardized {
    /// Dimension `p`.
    pub dim: usize,
    /// `ln |Σ|`.
    pub ln_det: f64,
    /// `(y-μ)ᵀ Σ^{-1} (y-μ)`.
    pub maha: f64,
    /// `λᵀ Σ^{-1/2} (y-μ)`.
    pub skew: f64,
}

/// Posterior moments of the mixing variable given one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalWeights {
    /// `E{U | y}`.
    pub kappa: f64,
    /// `E{U^{-1/2} W_Φ(U^{1/2} a) | y}`.
    pub tau_m1: f64,
    /// `E{U^{1/2} W_Φ(U^{1/2} a) | y}`.
    pub tau_1: f64,
    /// `ln f(y)`.
    pub ln_density: f64,
}

/// Which functional of `u` multiplies the common kernel.
#[derive(Clone, Copy)]
enum Moment {
    Density,
    Kappa,
    TauMinusOne(f64),
    TauOne(f64),
}

/// `ln` of `u^{p/2} e^{-u d/2} Φ(√u A) × moment(u)`.
fn kernel(st: &Standardized, moment: Moment, ln_u: f64, u: f64) -> f64 {
    let sqrt_u = (0.5 * ln_u).exp();
    let base = 0.5 * st.dim as f64 * ln_u - 0.5 * u * st.maha + ln_norm_cdf(sqrt_u * st.skew);
    match moment {
        Moment::Density => base,
        Moment::Kappa => base + ln_u,
        Moment::TauMinusOne(a) => base - 0.5 * ln_u + ln_mills(sqrt_u * a),
        Moment::TauOne(a) => base + 0.5 * ln_u + ln_mills(sqrt_u * a),
    }
}

/// `ln ∫ u^{m-1} e^{-b u} dH(u)` for `U ~ Gamma(x, rate x)`, with the extra
/// factor `T_{2α}(s √(α/β))` when `s` is given (`α = x + m`, `β = x + b`),
/// which is the integral against `Φ(√u s)`.
fn ln_gamma_moment(x: f64, m: f64, b: f64, s: Option<f64>) -> Option<f64> {
    let alpha = x + m;
    let beta = x + b;
    let core = gamma_center(x) - gamma_center(alpha) + alpha * ((m - b) / beta).ln_1p() - m;
    match s {
        None => Some(core),
        Some(s) => Some(core + ln_t_cdf(s * (alpha / beta).sqrt(), 2.0 * alpha)?),
    }
}

/// Closed forms of the Student-t mixing integrals. The `τ` moments reduce
/// to a plain gamma integral only when their argument is the skew
/// projection itself; other cases return `None`.
fn student_t_closed_form(st: &Standardized, nu: f64, moment: Moment) -> Option<f64> {
    let x = 0.5 * nu;
    let p2 = 0.5 * st.dim as f64;
    let d2 = 0.5 * st.maha;
    match moment {
        Moment::Density => ln_gamma_moment(x, p2, d2, Some(st.skew)),
        Moment::Kappa => ln_gamma_moment(x, p2 + 1.0, d2, Some(st.skew)),
        Moment::TauMinusOne(a) | Moment::TauOne(a) if a == st.skew => {
            let m = if matches!(moment, Moment::TauOne(_)) { p2 + 0.5 } else { p2 - 0.5 };
            Some(ln_gamma_moment(x, m, d2 + 0.5 * a * a, None)? - LN_SQRT_2PI)
        }
        _ => None,
    }
}

/// `ln ∫ kernel(u) dH(u)`.
fn ln_mixing_integral(st: &Standardized, mixing: &MixingLaw, moment: Moment) -> Result<f64> {
    if let MixingLaw::StudentT { nu } = *mixing {
        if let Some(v) = student_t_closed_form(st, nu, moment) {
            return Ok(v);
        }
    }
    match *mixing {
        MixingLaw::Normal => Ok(kernel(st, moment, 0.0, 1.0)),
        MixingLaw::ContaminatedNormal { nu, gamma } => Ok(log_add_exp(
            nu.ln() + kernel(st, moment, gamma.ln(), gamma),
            (1.0 - nu).ln() + kernel(st, moment, 0.0, 1.0),
        )),
        MixingLaw::StudentT { .. } | MixingLaw::Slash { .. } => quadrature_integral(st, mixing, moment),
    }
}

/// Continuous mixing laws by log-domain quadrature over `ln u`.
fn quadrature_integral(st: &Standardized, mixing: &MixingLaw, moment: Moment) -> Result<f64> {
    let p2 = 0.5 * st.dim as f64;
    let hint = match *mixing {
        MixingLaw::StudentT { nu } => ((0.5 * nu + p2) / (0.5 * nu + 0.5 * st.maha)).ln(),
        MixingLaw::Slash { nu } => ((nu + p2).max(1e-3) / (0.5 * st.maha).max(1e-300)).ln().min(0.0),
        _ => unreachable!("discrete mixing laws are summed, not integrated"),
    };
    let g = |s: f64| mixing.ln_density_log_scale(s) + kernel(st, moment, s, s.exp());
    log_integral(g, hint, f64::NEG_INFINITY, mixing.log_support_max())
}

/// `ln f(y)` of `SMSN_p(μ, Σ, λ; H)` from its standardized summary.
pub fn ln_density_standardized(st: &Standardized, mixing: &MixingLaw) -> Result<f64> {
    let norm = LN_2 - st.dim as f64 * LN_SQRT_2PI - 0.5 * st.ln_det;
    Ok(norm + ln_mixing_integral(st, mixing, Moment::Density)?)
}

/// Posterior weights from a standardized summary; `a` is the skew projection
/// fed to `W_Φ`.
pub fn weights_standardized(st: &Standardized, a: f64, mixing: &MixingLaw) -> Result<ConditionalWeights> {
    let ln_i0 = ln_mixing_integral(st, mixing, Moment::Density)?;
    if mixing.is_degenerate() {
        let w = ln_mills(a).exp();
        let norm = LN_2 - st.dim as f64 * LN_SQRT_2PI - 0.5 * st.ln_det;
        return Ok(ConditionalWeights { kappa: 1.0, tau_m1: w, tau_1: w, ln_density: norm + ln_i0 });
    }
    let kappa = (ln_mixing_integral(st, mixing, Moment::Kappa)? - ln_i0).exp();
    let tau_m1 = (ln_mixing_integral(st, mixing, Moment::TauMinusOne(a))? - ln_i0).exp();
    let tau_1 = (ln_mixing_integral(st, mixing, Moment::TauOne(a))? - ln_i0).exp();
    for (name, v) in [("kappa", kappa), ("tau_-1", tau_m1), ("tau_1", tau_1)] {
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "conditional weight {name} is not finite (p={}, maha={}, skew={}, a={a})",
                st.dim, st.maha, st.skew
            )));
        }
    }
    let norm = LN_2 - st.dim as f64 * LN_SQRT_2PI - 0.5 * st.ln_det;
    Ok(ConditionalWeights { kappa, tau_m1, tau_1, ln_density: norm + ln_i0 })
}

/// One multivariate SMSN law with its factorizations precomputed.
#[derive(Debug, Clone)]
pub struct SmsnParams {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    lambda: DVector<f64>,
    mixing: MixingLaw,
    sigma_sqrt: DMatrix<f64>,
    sigma_inv_sqrt: DMatrix<f64>,
    ln_det: f64,
}

impl SmsnParams {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, lambda: DVector<f64>, mixing: MixingLaw) -> Result<Self> {
        let p = mu.len();
        if sigma.nrows() != p || sigma.ncols() != p || lambda.len() != p {
            return Err(Error::shape(format!(
                "mu has length {p}, Sigma is {}x{}, lambda has length {}",
                sigma.nrows(),
                sigma.ncols(),
                lambda.len()
            )));
        }
        mixing.validate()?;
        let chol = linalg::cholesky(&sigma, "Sigma")?;
        let ln_det = linalg::chol_logdet(&chol);
        let sigma_sqrt = linalg::sym_sqrt(&sigma)?;
        let sigma_inv_sqrt = linalg::sym_inv_sqrt(&sigma)?;
        Ok(Self { mu, sigma, lambda, mixing, sigma_sqrt, sigma_inv_sqrt, ln_det })
    }

    /// Skew-normal (`U ≡ 1`) law.
    pub fn skew_normal(mu: DVector<f64>, sigma: DMatrix<f64>, lambda: DVector<f64>) -> Result<Self> {
        Self::new(mu, sigma, lambda, MixingLaw::Normal)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }
    pub fn mixing(&self) -> &MixingLaw {
        &self.mixing
    }

    /// `δ = λ / sqrt(1 + λᵀλ)`.
    pub fn delta(&self) -> DVector<f64> {
        &self.lambda / (1.0 + self.lambda.norm_squared()).sqrt()
    }

    /// `Δ = Σ^{1/2} δ`.
    pub fn big_delta(&self) -> DVector<f64> {
        &self.sigma_sqrt * self.delta()
    }

    pub fn standardize(&self, y: &DVector<f64>) -> Result<Standardized> {
        if y.len() != self.dim() {
            return Err(Error::shape(format!("y has length {}, expected {}", y.len(), self.dim())));
        }
        let z = &self.sigma_inv_sqrt * (y - &self.mu);
        Ok(Standardized { dim: self.dim(), ln_det: self.ln_det, maha: z.norm_squared(), skew: self.lambda.dot(&z) })
    }

    /// Mean of `Y`: `μ + sqrt(2/π) k1 Δ`.
    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(&self.mu + self.big_delta() * ((2.0 / std::f64::consts::PI).sqrt() * self.mixing.k1()?))
    }
}

/// Skew-normal log density `ln{2 φ_p(y; μ, Σ) Φ(λᵀ Σ^{-1/2} (y-μ))}`.
pub fn sn_logpdf(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>, lambda: &DVector<f64>) -> Result<f64> {
    let params = SmsnParams::skew_normal(mu.clone(), sigma.clone(), lambda.clone())?;
    smsn_logpdf(y, &params)
}

/// Log density of `SMSN_p(μ, Σ, λ; H)` at `y`.
pub fn smsn_logpdf(y: &DVector<f64>, params: &SmsnParams) -> Result<f64> {
    ln_density_standardized(&params.standardize(y)?, &params.mixing)
}

/// `E{U | y}` and the `τ` weights at `y`, with `a` the skew projection fed
/// to `W_Φ`.
pub fn conditional_weights(y: &DVector<f64>, params: &SmsnParams, a: f64) -> Result<ConditionalWeights> {
    weights_standardized(&params.standardize(y)?, a, &params.mixing)
}

/// Draw from `SN_p(0, Σ, λ)` (no mixing).
pub fn sample_sn_centered<R: Rng + ?Sized>(sigma_sqrt: &DMatrix<f64>, delta: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let p = delta.len();
    let t0: f64 = rng.sample::<f64, _>(StandardNormal).abs();
    let w = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    // X = δ|T0| + (I - δδᵀ)^{1/2} W has density 2 φ_p(x) Φ(λᵀx).
    let x = delta * t0 + orthogonal_part(delta, &w);
    sigma_sqrt * x
}

/// `(I - δδᵀ)^{1/2} w` using the closed form of the symmetric root:
/// eigenvalue `1 - |δ|²` along `δ`, 1 elsewhere.
fn orthogonal_part(delta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let d2 = delta.norm_squared();
    if d2 == 0.0 {
        return w.clone();
    }
    let coef = ((1.0 - d2).sqrt() - 1.0) / d2;
    w + delta * (coef * delta.dot(w))
}

/// `n` draws (rows) from the SMSN law via `Y = μ + U^{-1/2} Z`.
pub fn sample_smsn<R: Rng + ?Sized>(params: &SmsnParams, n: usize, rng: &mut R) -> DMatrix<f64> {
    let delta = params.delta();
    let mut out = DMatrix::zeros(n, params.dim());
    for i in 0..n {
        let u = params.mixing.sample_u(rng);
        let z = sample_sn_centered(&params.sigma_sqrt, &delta, rng);
        let y = &params.mu + z / u.sqrt();
        out.set_row(i, &y.transpose());
    }
    out
}

/// One draw with the mixing scale fixed at `u`.
pub fn sample_smsn_given_u<R: Rng + ?Sized>(params: &SmsnParams, u: f64, rng: &mut R) -> DVector<f64> {
    let z = sample_sn_centered(&params.sigma_sqrt, &params.delta(), rng);
    &params.mu + z / u.sqrt()
}
