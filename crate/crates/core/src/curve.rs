//! Mean functions `η(t; β, b)` and closed-form curve functionals.
//!
//! The shipped curve is the derivative of the generalized logistic model
//!
//! ```text
//! η(t) = α1 α3 α4 e^{-α3 t} / (α2 + e^{-α3 t})^{α4 + 1}
//! ```
//!
//! with `α_k = exp(β_k + b_k)` (random effects only on the coordinates listed
//! in `random_on`, by default the offset `α2` and the rate `α3`). Time is in
//! days since the subject's first reported death.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::log_add_exp;

/// Partial derivatives of `η` at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaGrad {
    pub d_beta: Vec<f64>,
    pub d_b: Vec<f64>,
}

/// A nonlinear mean function with `r` fixed and `q` random effects.
pub trait CurveModel: Send + Sync {
    fn n_fixed(&self) -> usize;
    fn n_random(&self) -> usize;
    fn eta(&self, t: f64, beta: &[f64], b: &[f64]) -> f64;

    /// Analytic gradient when available; central differences otherwise.
    fn grad(&self, t: f64, beta: &[f64], b: &[f64]) -> EtaGrad {
        let fd = |v: &mut Vec<f64>, k: usize, eval: &dyn Fn(&[f64]) -> f64| {
            let h = 1e-6 * v[k].abs().max(1.0);
            let orig = v[k];
            v[k] = orig + h;
            let up = eval(v);
            v[k] = orig - h;
            let dn = eval(v);
            v[k] = orig;
            (up - dn) / (2.0 * h)
        };
        let mut bv = beta.to_vec();
        let d_beta = (0..beta.len()).map(|k| fd(&mut bv, k, &|x| self.eta(t, x, b))).collect();
        let mut rv = b.to_vec();
        let d_b = (0..b.len()).map(|k| fd(&mut rv, k, &|x| self.eta(t, beta, x))).collect();
        EtaGrad { d_beta, d_b }
    }

    /// Starting fixed effects for the pooled population fit.
    fn initial_fixed(&self, t: &[f64], y: &[f64]) -> Vec<f64>;

    /// Coordinates in which the pooled least-squares problem is well
    /// conditioned. Identity unless overridden.
    fn to_search(&self, beta: &[f64]) -> Vec<f64> {
        beta.to_vec()
    }

    fn from_search(&self, phi: &[f64]) -> Vec<f64> {
        phi.to_vec()
    }

    /// Box on the search coordinates kept by the population fit.
    fn search_box(&self) -> Option<Vec<(f64, f64)>> {
        None
    }
}

/// Evaluates `η`, `W = ∂η/∂βᵀ` and `H = ∂η/∂bᵀ` at every time in `times`.
pub fn design(
    model: &dyn CurveModel,
    times: &[f64],
    beta: &[f64],
    b: &[f64],
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = times.len();
    let mut eta = DVector::zeros(n);
    let mut w = DMatrix::zeros(n, model.n_fixed());
    let mut h = DMatrix::zeros(n, model.n_random());
    for (j, &t) in times.iter().enumerate() {
        eta[j] = model.eta(t, beta, b);
        let g = model.grad(t, beta, b);
        for (k, v) in g.d_beta.iter().enumerate() {
            w[(j, k)] = *v;
        }
        for (k, v) in g.d_b.iter().enumerate() {
            h[(j, k)] = *v;
        }
    }
    (eta, w, h)
}

/// The generalized-logistic-derivative curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLogisticCurve {
    /// Zero-based indices of the `β` coordinates that carry a random effect.
    pub random_on: Vec<usize>,
}

impl Default for GenLogisticCurve {
    fn default() -> Self {
        Self { random_on: vec![1, 2] }
    }
}

impl GenLogisticCurve {
    pub fn new(random_on: Vec<usize>) -> Result<Self> {
        if random_on.iter().any(|&k| k > 3) {
            return Err(Error::invalid("random effects can only attach to beta_1..beta_4"));
        }
        let mut sorted = random_on.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != random_on.len() {
            return Err(Error::invalid("duplicate random-effect index"));
        }
        Ok(Self { random_on })
    }

    /// Log-scale coefficients `β + b` for one subject.
    fn subject_log_alpha(&self, beta: &[f64], b: &[f64]) -> [f64; 4] {
        let mut la = [beta[0], beta[1], beta[2], beta[3]];
        for (k, &idx) in self.random_on.iter().enumerate() {
            la[idx] += b[k];
        }
        la
    }

    pub fn subject_params(&self, beta: &[f64], b: &[f64]) -> CurveParams {
        let la = self.subject_log_alpha(beta, b);
        CurveParams { alpha1: la[0].exp(), alpha2: la[1].exp(), alpha3: la[2].exp(), alpha4: la[3].exp() }
    }

    /// Derivatives of `ln η` with respect to the four log-scale coefficients.
    fn dlog_eta(la: &[f64; 4], t: f64) -> (f64, [f64; 4]) {
        let a3 = la[2].exp();
        let a4 = la[3].exp();
        let big_l = log_add_exp(la[1], -a3 * t);
        let ln_eta = la[0] + la[2] + la[3] - a3 * t - (a4 + 1.0) * big_l;
        // w = α2 / (α2 + e^{-α3 t})
        let w = (la[1] - big_l).exp();
        let d = [
            1.0,
            -(a4 + 1.0) * w,
            1.0 - a3 * t + (a4 + 1.0) * a3 * t * (1.0 - w),
            1.0 - a4 * big_l,
        ];
        (ln_eta, d)
    }
}

impl CurveModel for GenLogisticCurve {
    fn n_fixed(&self) -> usize {
        4
    }

    fn n_random(&self) -> usize {
        self.random_on.len()
    }

    fn eta(&self, t: f64, beta: &[f64], b: &[f64]) -> f64 {
        let la = self.subject_log_alpha(beta, b);
        let a3 = la[2].exp();
        let big_l = log_add_exp(la[1], -a3 * t);
        (la[0] + la[2] + la[3] - a3 * t - (la[3].exp() + 1.0) * big_l).exp()
    }

    fn grad(&self, t: f64, beta: &[f64], b: &[f64]) -> EtaGrad {
        let la = self.subject_log_alpha(beta, b);
        let (ln_eta, d) = Self::dlog_eta(&la, t);
        let eta = ln_eta.exp();
        let d_beta: Vec<f64> = d.iter().map(|x| x * eta).collect();
        let d_b = self.random_on.iter().map(|&k| d_beta[k]).collect();
        EtaGrad { d_beta, d_b }
    }

    /// `(ln asymptote, peak day, ln α3, ln α4)`; the raw log coefficients are
    /// nearly collinear when `α4` is large.
    fn to_search(&self, beta: &[f64]) -> Vec<f64> {
        let a3 = beta[2].exp();
        let a4 = beta[3].exp();
        vec![beta[0] - a4 * beta[1], (beta[3] - beta[1]) / a3, beta[2], beta[3]]
    }

    fn from_search(&self, phi: &[f64]) -> Vec<f64> {
        let a3 = phi[2].exp();
        let a4 = phi[3].exp();
        let ln_a2 = phi[3] - a3 * phi[1];
        vec![phi[0] + a4 * ln_a2, ln_a2, phi[2], phi[3]]
    }

    /// Keeps the pooled fit away from the Gompertz limit `α4 → ∞`.
    fn search_box(&self) -> Option<Vec<(f64, f64)>> {
        let inf = f64::INFINITY;
        Some(vec![(-inf, inf), (-inf, inf), (1e-4f64.ln(), 5f64.ln()), (0.05f64.ln(), 200f64.ln())])
    }

    /// Grid over rate and asymmetry with the offset pinned by the observed
    /// peak and the mass solved by least squares, best cell wins.
    fn initial_fixed(&self, t: &[f64], y: &[f64]) -> Vec<f64> {
        let (t_peak, _) = smoothed_peak(t, y);
        let mut best = (f64::INFINITY, vec![0.0, 0.0, (0.05f64).ln(), 0.0]);
        for &a3 in &[0.01, 0.02, 0.03, 0.05, 0.08, 0.12, 0.2] {
            for &a4 in &[0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
                let a2: f64 = a4 * (-a3 * t_peak).exp();
                let mut beta = vec![0.0, a2.ln(), f64::ln(a3), f64::ln(a4)];
                let shape: Vec<f64> = t.iter().map(|&tt| self.eta(tt, &beta, &vec![0.0; self.n_random()])).collect();
                let num: f64 = shape.iter().zip(y).map(|(s, v)| s * v).sum();
                let den: f64 = shape.iter().map(|s| s * s).sum();
                if !(num > 0.0 && den > 0.0) {
                    continue;
                }
                let scale = num / den;
                beta[0] = scale.ln();
                let sse: f64 = shape.iter().zip(y).map(|(s, v)| (v - scale * s).powi(2)).sum();
                if sse < best.0 {
                    best = (sse, beta);
                }
            }
        }
        best.1
    }
}

/// Peak of a 7-day centered moving average of the pooled mean by time.
fn smoothed_peak(t: &[f64], y: &[f64]) -> (f64, f64) {
    let mut by_day: std::collections::BTreeMap<i64, (f64, usize)> = Default::default();
    for (&tt, &v) in t.iter().zip(y) {
        let e = by_day.entry(tt.round() as i64).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let days: Vec<(i64, f64)> = by_day.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..days.len() {
        let lo = i.saturating_sub(3);
        let hi = (i + 4).min(days.len());
        let avg = days[lo..hi].iter().map(|d| d.1).sum::<f64>() / (hi - lo) as f64;
        if avg > best.1 {
            best = (days[i].0 as f64, avg);
        }
    }
    best
}

/// Polynomial mean `Σ_k (β_k + b_k) t^k`, random effects on the first `q`
/// coefficients. Linear in both β and b, so linearization is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialCurve {
    pub fixed_terms: usize,
    pub random_terms: usize,
}

impl CurveModel for PolynomialCurve {
    fn n_fixed(&self) -> usize {
        self.fixed_terms
    }

    fn n_random(&self) -> usize {
        self.random_terms
    }

    fn eta(&self, t: f64, beta: &[f64], b: &[f64]) -> f64 {
        let mut tk = 1.0;
        let mut s = 0.0;
        for k in 0..self.fixed_terms {
            s += beta[k] * tk;
            if k < self.random_terms {
                s += b[k] * tk;
            }
            tk *= t;
        }
        s
    }

    fn grad(&self, t: f64, _beta: &[f64], _b: &[f64]) -> EtaGrad {
        let powers: Vec<f64> = (0..self.fixed_terms).map(|k| t.powi(k as i32)).collect();
        EtaGrad { d_b: powers[..self.random_terms].to_vec(), d_beta: powers }
    }

    fn initial_fixed(&self, t: &[f64], y: &[f64]) -> Vec<f64> {
        let x = DMatrix::from_fn(t.len(), self.fixed_terms, |i, k| t[i].powi(k as i32));
        let yv = DVector::from_column_slice(y);
        let xtx = x.transpose() * &x;
        match xtx.cholesky() {
            Some(c) => c.solve(&(x.transpose() * yv)).iter().copied().collect(),
            None => vec![0.0; self.fixed_terms],
        }
    }
}

/// Serializable choice of mean function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "curve", rename_all = "snake_case")]
pub enum ModelSpec {
    GenLogistic(GenLogisticCurve),
    Polynomial(PolynomialCurve),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::GenLogistic(GenLogisticCurve::default())
    }
}

impl ModelSpec {
    fn inner(&self) -> &dyn CurveModel {
        match self {
            ModelSpec::GenLogistic(c) => c,
            ModelSpec::Polynomial(c) => c,
        }
    }

    /// Natural-scale coefficients when the curve is the generalized logistic.
    pub fn curve_params(&self, beta: &[f64], b: &[f64]) -> Option<CurveParams> {
        match self {
            ModelSpec::GenLogistic(c) => Some(c.subject_params(beta, b)),
            ModelSpec::Polynomial(_) => None,
        }
    }
}

impl CurveModel for ModelSpec {
    fn n_fixed(&self) -> usize {
        self.inner().n_fixed()
    }
    fn n_random(&self) -> usize {
        self.inner().n_random()
    }
    fn eta(&self, t: f64, beta: &[f64], b: &[f64]) -> f64 {
        self.inner().eta(t, beta, b)
    }
    fn grad(&self, t: f64, beta: &[f64], b: &[f64]) -> EtaGrad {
        self.inner().grad(t, beta, b)
    }
    fn initial_fixed(&self, t: &[f64], y: &[f64]) -> Vec<f64> {
        self.inner().initial_fixed(t, y)
    }
    fn to_search(&self, beta: &[f64]) -> Vec<f64> {
        self.inner().to_search(beta)
    }
    fn from_search(&self, phi: &[f64]) -> Vec<f64> {
        self.inner().from_search(phi)
    }
    fn search_box(&self) -> Option<Vec<(f64, f64)>> {
        self.inner().search_box()
    }
}

/// Box-projected Levenberg–Marquardt on `x ↦ (residuals, Jacobian)`.
/// Returns the final point and its residual sum of squares.
fn levenberg_marquardt(
    mut x: Vec<f64>,
    bounds: Option<&[(f64, f64)]>,
    eval: &dyn Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let p = x.len();
    let (mut resid, mut jac) = eval(&x);
    let mut cur = resid.norm_squared();
    let mut damping = 1e-3;
    for _ in 0..max_iter {
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &resid;
        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..p {
                a[(k, k)] += damping * jtj[(k, k)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&jtr);
            let mut cand: Vec<f64> = x.iter().zip(step.iter()).map(|(v, s)| v + s).collect();
            if let Some(bounds) = bounds {
                for (c, (lo, hi)) in cand.iter_mut().zip(bounds) {
                    *c = c.clamp(*lo, *hi);
                }
            }
            let (r_new, j_new) = eval(&cand);
            let new = r_new.norm_squared();
            if new.is_finite() && new < cur && j_new.iter().all(|v| v.is_finite()) {
                let rel = (cur - new) / cur.max(1e-300);
                x = cand;
                cur = new;
                resid = r_new;
                jac = j_new;
                damping = (damping * 0.3).max(1e-15);
                improved = rel > 1e-14;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (x, cur)
}

/// `∂β/∂φᵀ` of the search-coordinate map, by central differences.
fn search_jacobian(model: &dyn CurveModel, phi: &[f64]) -> DMatrix<f64> {
    let r = phi.len();
    let mut out = DMatrix::zeros(r, r);
    for k in 0..r {
        let h = 1e-6 * phi[k].abs().max(1.0);
        let mut up = phi.to_vec();
        let mut dn = phi.to_vec();
        up[k] += h;
        dn[k] -= h;
        let (bu, bd) = (model.from_search(&up), model.from_search(&dn));
        for j in 0..r {
            out[(j, k)] = (bu[j] - bd[j]) / (2.0 * h);
        }
    }
    out
}

/// Least-squares fit of the population curve (`b = 0`) by Levenberg–Marquardt
/// in the model's search coordinates, started from the model's heuristic.
pub fn fit_population(model: &dyn CurveModel, t: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if t.len() != y.len() || t.is_empty() {
        return Err(Error::shape("population fit needs matching, nonempty t and y"));
    }
    let zeros = vec![0.0; model.n_random()];
    let yv = DVector::from_column_slice(y);
    let eval = |phi: &[f64]| {
        let beta = model.from_search(phi);
        let (eta, w, _) = design(model, t, &beta, &zeros);
        (&yv - eta, w * search_jacobian(model, phi))
    };
    let bounds = model.search_box();
    let phi0 = model.to_search(&model.initial_fixed(t, y));
    let (phi, _) = levenberg_marquardt(phi0, bounds.as_deref(), &eval, 2000);
    let beta = model.from_search(&phi);
    if beta.iter().all(|b| b.is_finite()) {
        Ok(beta)
    } else {
        Err(Error::numerical("population curve fit produced non-finite coefficients"))
    }
}

/// Joint least-squares fit with a free effect vector per subject (no
/// distributional assumption), started from `beta0`. The effects are
/// softly centered so that `β` stays identified.
/// Returns `(β, effects, residual sum of squares)`.
pub fn fit_subjects(
    model: &dyn CurveModel,
    subjects: &[(&[f64], &[f64])],
    beta0: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64)> {
    let r = model.n_fixed();
    let q = model.n_random();
    let m = subjects.len();
    let n: usize = subjects.iter().map(|(t, _)| t.len()).sum();
    let split = |x: &[f64]| -> (Vec<f64>, Vec<Vec<f64>>) {
        let beta = model.from_search(&x[..r]);
        let bs = (0..m).map(|i| x[r + i * q..r + (i + 1) * q].to_vec()).collect();
        (beta, bs)
    };
    // centering rows carry roughly one observation's worth of weight
    let center_w = 1.0;
    let eval = |x: &[f64]| {
        let (beta, bs) = split(x);
        let dphi = search_jacobian(model, &x[..r]);
        let mut resid = DVector::zeros(n + q);
        let mut jac = DMatrix::zeros(n + q, r + m * q);
        let mut row = 0;
        for (i, (t, y)) in subjects.iter().enumerate() {
            let (eta, w, h) = design(model, t, &beta, &bs[i]);
            let ni = t.len();
            resid.rows_mut(row, ni).copy_from(&(DVector::from_column_slice(y) - eta));
            jac.view_mut((row, 0), (ni, r)).copy_from(&(w * &dphi));
            jac.view_mut((row, r + i * q), (ni, q)).copy_from(&h);
            row += ni;
        }
        for k in 0..q {
            resid[n + k] = -center_w * bs.iter().map(|b| b[k]).sum::<f64>();
            for i in 0..m {
                jac[(n + k, r + i * q + k)] = center_w;
            }
        }
        (resid, jac)
    };
    let mut x0 = model.to_search(beta0);
    x0.extend(std::iter::repeat_n(0.0, m * q));
    let bounds = model.search_box().map(|mut b| {
        b.extend(std::iter::repeat_n((f64::NEG_INFINITY, f64::INFINITY), m * q));
        b
    });
    let (x, _) = levenberg_marquardt(x0, bounds.as_deref(), &eval, 2000);
    let (beta, bs) = split(&x);
    if beta.iter().chain(bs.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::numerical("per-subject curve fit produced non-finite coefficients"));
    }
    let sse = subjects
        .iter()
        .zip(&bs)
        .map(|((t, y), b)| t.iter().zip(*y).map(|(&tt, &v)| (v - model.eta(tt, &beta, b)).powi(2)).sum::<f64>())
        .sum();
    Ok((beta, bs, sse))
}

/// Natural-scale coefficients of one subject's curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
}

impl CurveParams {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64, alpha4: f64) -> Result<Self> {
        let p = Self { alpha1, alpha2, alpha3, alpha4 };
        if [alpha1, alpha2, alpha3, alpha4].iter().all(|a| a.is_finite() && *a > 0.0) {
            Ok(p)
        } else {
            Err(Error::invalid(format!("curve coefficients must be positive: {p:?}")))
        }
    }

    /// Daily curve value at day `t`.
    pub fn eta(&self, t: f64) -> f64 {
        let big_l = log_add_exp(self.alpha2.ln(), -self.alpha3 * t);
        (self.alpha1.ln() + self.alpha3.ln() + self.alpha4.ln() - self.alpha3 * t - (self.alpha4 + 1.0) * big_l).exp()
    }

    /// Day of the maximum: `ln(α4/α2)/α3`.
    pub fn peak_time(&self) -> f64 {
        (self.alpha4 / self.alpha2).ln() / self.alpha3
    }

    /// `α1 / α2^{α4}`, the limit of the cumulative curve.
    pub fn total_asymptote(&self) -> f64 {
        (self.alpha1.ln() - self.alpha4 * self.alpha2.ln()).exp()
    }

    /// `α1 / (α2 + e^{-α3 t})^{α4}`, the integral of `eta` from `-∞` to `t`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let big_l = log_add_exp(self.alpha2.ln(), -self.alpha3 * t);
        (self.alpha1.ln() - self.alpha4 * big_l).exp()
    }

    /// Multiplies the mass `α1` by `k` (e.g. to undo response scaling).
    pub fn rescaled(&self, k: f64) -> Self {
        Self { alpha1: self.alpha1 * k, ..*self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_at_origin_with_unit_coefficients() {
        let c = GenLogisticCurve::default();
        assert!((c.eta(0.0, &[0.0; 4], &[0.0, 0.0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradient_wrt_beta1_is_eta() {
        let c = GenLogisticCurve::default();
        let beta = [1.3, -0.4, -2.0, 1.1];
        let b = [0.2, -0.1];
        for t in [0.0, 10.0, 55.5] {
            let g = c.grad(t, &beta, &b);
            assert!((g.d_beta[0] - c.eta(t, &beta, &b)).abs() < 1e-12);
            assert_eq!(g.d_b[0], g.d_beta[1]);
            assert_eq!(g.d_b[1], g.d_beta[2]);
        }
    }

    #[test]
    fn eta_is_finite_for_extreme_times() {
        let c = GenLogisticCurve::default();
        for t in [-1e6, -1e3, 1e3, 1e6] {
            let v = c.eta(t, &[2.0, 0.5, -1.0, 1.0], &[0.0, 0.0]);
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn peak_time_examples() {
        assert_eq!(CurveParams::new(1.0, 2.0, 0.3, 2.0).unwrap().peak_time(), 0.0);
        let p = CurveParams::new(1.0, 1.0, 1.0, std::f64::consts::E).unwrap();
        assert!((p.peak_time() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cumulative_examples() {
        let p = CurveParams::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((p.cumulative(0.0) - 0.5).abs() < 1e-15);
        assert!((p.cumulative(1e4) - p.total_asymptote()).abs() < 1e-15);
        assert_eq!(CurveParams::new(1.0, 1.0, 0.2, 3.0).unwrap().total_asymptote(), 1.0);
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(CurveParams::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(GenLogisticCurve::new(vec![4]).is_err());
        assert!(GenLogisticCurve::new(vec![1, 1]).is_err());
    }

    #[test]
    fn population_fit_recovers_noiseless_curve() {
        let c = GenLogisticCurve::default();
        let truth = [8.0_f64, 0.3, (0.06_f64).ln(), (3.0_f64).ln()];
        let t: Vec<f64> = (0..120).map(f64::from).collect();
        let y: Vec<f64> = t.iter().map(|&tt| c.eta(tt, &truth, &[0.0, 0.0])).collect();
        let fit = fit_population(&c, &t, &y).unwrap();
        for (a, b) in fit.iter().zip(truth.iter()) {
            assert!((a - b).abs() < 1e-5, "{fit:?}");
        }
    }

    #[test]
    fn polynomial_design_is_exact() {
        let c = PolynomialCurve { fixed_terms: 2, random_terms: 1 };
        let (eta, w, h) = design(&c, &[0.0, 2.0], &[1.0, 0.5], &[0.25]);
        assert_eq!(eta.as_slice(), &[1.25, 2.25]);
        assert_eq!(w.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0]);
        assert_eq!(h.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
    }
}
