//! Parametric bootstrap: simulate from the fitted model, refit, and turn the
//! replicate curves into percentile bands, peak-date intervals and
//! forecast-total intervals.

use chrono::{Days, NaiveDate};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::curve::CurveModel;
use crate::data_io::PreparedPanel;
use crate::error::{Error, Result};
use crate::estimation::{fit, FitConfig, FitResult, InitialValues, Theta};
use crate::linalg;
use crate::parallel::{par_map, Parallelism};
use crate::prediction::predict_future;
use crate::smsn::sample_sn_centered;

/// Source of each subject's random effects in simulated datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffectsDraw {
    /// Hold `b_i` at the fitted `b̂_i`, so every replicate is a noisy copy of
    /// that subject's fitted curve.
    #[default]
    Fitted,
    /// Draw fresh `b_i ~ SMSN_q(cΔ, D, λ)`.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    /// Number of replicates `M`.
    pub replicates: usize,
    pub trim_frac: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Draw errors (and fresh random effects) with `U_i` fixed at `û_i`.
    pub condition_on_u: bool,
    pub random_effects: RandomEffectsDraw,
    /// Forecast horizons in days after the snapshot.
    pub horizons: Vec<u32>,
    /// Worker threads for replicates; 0 uses the ambient pool. Results do
    /// not depend on it, so it is read from config but never written out.
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 600,
            trim_frac: 0.15,
            alpha: 0.05,
            seed: 20200624,
            condition_on_u: true,
            random_effects: RandomEffectsDraw::Fitted,
            horizons: vec![30, 60, 90, 150],
            workers: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 10 {
            return Err(Error::invalid(format!("need at least 10 replicates, got {}", self.replicates)));
        }
        if !(0.0..0.5).contains(&self.trim_frac) {
            return Err(Error::invalid(format!("trim_frac must be in [0, 0.5), got {}", self.trim_frac)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }

    fn max_horizon(&self) -> u32 {
        self.horizons.iter().copied().max().unwrap_or(0)
    }
}

/// Independent stream for replicate `index`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulates responses on the time grid of `design`.
///
/// `u_override` fixes each subject's mixing scale; `b_fixed` fixes its
/// random effects. Errors are `N(0, σ²/u_i I)` given `u_i`.
pub fn simulate_dataset<R: Rng + ?Sized>(
    model: &dyn CurveModel,
    theta: &Theta,
    design: &PreparedPanel,
    u_override: Option<&[f64]>,
    b_fixed: Option<&[Vec<f64>]>,
    rng: &mut R,
) -> Result<PreparedPanel> {
    theta.validate()?;
    let n_subj = design.subjects.len();
    if u_override.is_some_and(|u| u.len() != n_subj || u.iter().any(|&v| !(v > 0.0 && v.is_finite()))) {
        return Err(Error::invalid("u_override needs one positive value per subject"));
    }
    if b_fixed.is_some_and(|b| b.len() != n_subj || b.iter().any(|v| v.len() != theta.q())) {
        return Err(Error::invalid("b_fixed needs one length-q vector per subject"));
    }
    let d_sqrt = linalg::sym_sqrt(&theta.d())?;
    let lam = DVector::from_column_slice(&theta.lambda);
    let delta = &lam / (1.0 + lam.norm_squared()).sqrt();
    let c_delta = theta.big_delta()? * theta.mixing.centering()?;
    let sigma = theta.sigma2.sqrt();
    let mut ys = Vec::with_capacity(n_subj);
    for (i, s) in design.subjects.iter().enumerate() {
        let u = match u_override {
            Some(u) => u[i],
            None => theta.mixing.sample_u(rng),
        };
        let b: Vec<f64> = match b_fixed {
            Some(b) => b[i].clone(),
            None => {
                let z = sample_sn_centered(&d_sqrt, &delta, rng);
                (&c_delta + z / u.sqrt()).iter().copied().collect()
            }
        };
        let scale = sigma / u.sqrt();
        let y: Vec<f64> = s
            .t
            .iter()
            .map(|&t| model.eta(t, &theta.beta, &b) + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ys.push(y);
    }
    Ok(design.with_responses(ys))
}

/// What one replicate produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReplicateOutcome {
    Ok(ReplicateCurves),
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateCurves {
    /// Mean squared in-sample residual of the refit (scaled response).
    pub mse: f64,
    /// Per subject, fitted then predicted values on the band grid (original scale).
    pub curves: Vec<Vec<f64>>,
    /// Per subject, cumulative totals at each horizon (original scale).
    pub totals: Vec<Vec<f64>>,
}

/// Band grid of one subject: every day from first death through the last horizon.
fn grid_times(fit: &FitResult, subject: usize, max_horizon: u32) -> Vec<f64> {
    let s = &fit.panel.subjects[subject];
    let last = s.last_t().max(0.0) as usize;
    (0..=last + max_horizon as usize).map(|k| k as f64).collect()
}

/// Fitted values in sample, predictions after, on the original scale; and the
/// cumulative totals at each horizon built on the observed totals of `base`.
fn curves_of(fit: &FitResult, base: &PreparedPanel, horizons: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    let k = fit.panel.k_z;
    let mut curves = Vec::new();
    let mut totals = Vec::new();
    for i in 0..fit.panel.subjects.len() {
        let s = &fit.panel.subjects[i];
        let grid = grid_times(fit, i, max_h);
        let n = s.len();
        let fitted = fit.fitted(i);
        let future = predict_future(fit, i, &grid[n..])?;
        let curve: Vec<f64> = fitted.iter().chain(&future).map(|v| v * k).collect();
        let observed = (base.subjects[i].y.iter().sum::<f64>() * base.k_z).round();
        let tot = horizons
            .iter()
            .map(|&h| observed + future.iter().take(h as usize).map(|v| (v * k).max(0.0)).sum::<f64>())
            .collect();
        curves.push(curve);
        totals.push(tot);
    }
    Ok((curves, totals))
}

fn warm_start(fit: &FitResult) -> FitConfig {
    let q = fit.theta.q();
    let d = fit.theta.d();
    FitConfig {
        init: InitialValues {
            beta: Some(fit.theta.beta.clone()),
            sigma2: Some(fit.theta.sigma2),
            d: Some((0..q * q).map(|k| d[(k / q, k % q)]).collect()),
            lambda: Some(fit.theta.lambda.clone()),
            nu: Some(fit.theta.mixing.params()),
            b: Some(fit.b_hat.clone()),
        },
        parallelism: Parallelism::Sequential,
        ..fit.config.clone()
    }
}

/// Simulates and refits replicate `index`.
pub fn run_replicate(fit_res: &FitResult, config: &BootstrapConfig, index: usize) -> ReplicateOutcome {
    let mut rng = replicate_rng(config.seed, index as u64);
    let u = config.condition_on_u.then_some(fit_res.u_hat.as_slice());
    let b = (config.random_effects == RandomEffectsDraw::Fitted).then_some(fit_res.b_hat.as_slice());
    let mut attempt = || -> Result<ReplicateCurves> {
        let sim = simulate_dataset(&fit_res.model, &fit_res.theta, &fit_res.panel, u, b, &mut rng)?;
        let refit = fit(&fit_res.model, &sim, fit_res.family, &warm_start(fit_res))?;
        if !refit.converged {
            return Err(Error::numerical(format!("refit did not converge in {} iterations", refit.iterations)));
        }
        let mut sse = 0.0;
        for i in 0..sim.subjects.len() {
            sse += refit.fitted(i).iter().zip(&sim.subjects[i].y).map(|(f, y)| (f - y).powi(2)).sum::<f64>();
        }
        let (curves, totals) = curves_of(&refit, &fit_res.panel, &config.horizons)?;
        if curves.iter().flatten().chain(totals.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::numerical("replicate curve is not finite"));
        }
        Ok(ReplicateCurves { mse: sse / sim.n_obs() as f64, curves, totals })
    };
    match attempt() {
        Ok(c) => ReplicateOutcome::Ok(c),
        Err(e) => ReplicateOutcome::Failed { reason: e.to_string() },
    }
}

/// Linear-interpolation percentile (type 7) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, p)
}

fn percentile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// First and last grid dates where `band_hi` reaches the maximum of `band_lo`.
pub fn peak_interval(band_lo: &[f64], band_hi: &[f64], dates: &[NaiveDate]) -> Result<(NaiveDate, NaiveDate)> {
    if band_lo.len() != band_hi.len() || band_lo.len() != dates.len() || dates.is_empty() {
        return Err(Error::shape("bands and dates must share one nonempty grid"));
    }
    let m = band_lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::invalid("lower band has no finite maximum"));
    }
    let first = band_hi.iter().position(|&v| v >= m);
    let last = band_hi.iter().rposition(|&v| v >= m);
    match (first, last) {
        (Some(a), Some(b)) => Ok((dates[a], dates[b])),
        _ => Err(Error::Bootstrap("upper band lies below the maximum of the lower band".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonInterval {
    pub horizon: u32,
    pub date: NaiveDate,
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectBands {
    pub name: String,
    pub dates: Vec<NaiveDate>,
    /// Original-fit curve (fitted, then predicted) on the original scale.
    pub center: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    pub peak_interval: (NaiveDate, NaiveDate),
    pub totals: Vec<HorizonInterval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub config: BootstrapConfig,
    pub replicates: usize,
    pub failures: Vec<ReplicateFailure>,
    pub trimmed: usize,
    pub kept: usize,
    /// Replicate indices that entered the percentiles, in index order.
    pub kept_indices: Vec<usize>,
    pub subjects: Vec<SubjectBands>,
}

/// Surviving replicate count after `failures` and trimming.
pub fn kept_count(replicates: usize, failures: usize, trim_frac: f64) -> usize {
    let ok = replicates.saturating_sub(failures);
    ((ok as f64) * (1.0 - trim_frac)).round() as usize
}

/// Trims, then reduces replicate outcomes (in index order) to bands and
/// intervals.
pub fn aggregate(fit_res: &FitResult, config: &BootstrapConfig, outcomes: &[ReplicateOutcome]) -> Result<BootstrapResult> {
    config.validate()?;
    let mut failures = Vec::new();
    let mut ok: Vec<(usize, &ReplicateCurves)> = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        match o {
            ReplicateOutcome::Ok(c) => ok.push((k, c)),
            ReplicateOutcome::Failed { reason } => failures.push(ReplicateFailure { replicate: k, reason: reason.clone() }),
        }
    }
    let kept = kept_count(outcomes.len(), failures.len(), config.trim_frac);
    if kept < 10 {
        let mut reasons: Vec<&str> = failures.iter().map(|f| f.reason.as_str()).collect();
        reasons.sort_unstable();
        reasons.dedup();
        return Err(Error::Bootstrap(format!(
            "only {kept} of {} replicates survive ({} failed); failure reasons: {}",
            outcomes.len(),
            failures.len(),
            reasons.join("; ")
        )));
    }
    ok.sort_by(|a, b| a.1.mse.total_cmp(&b.1.mse).then(a.0.cmp(&b.0)));
    ok.truncate(kept);
    ok.sort_by_key(|x| x.0);

    let (center, center_totals) = curves_of(fit_res, &fit_res.panel, &config.horizons)?;
    let lo_p = config.alpha / 2.0;
    let hi_p = 1.0 - config.alpha / 2.0;
    let max_h = config.max_horizon();
    let mut subjects = Vec::new();
    for (i, s) in fit_res.panel.subjects.iter().enumerate() {
        let grid = grid_times(fit_res, i, max_h);
        let dates: Vec<NaiveDate> = grid.iter().map(|&t| s.date_of(t)).collect();
        let mut band_lo = Vec::with_capacity(grid.len());
        let mut band_hi = Vec::with_capacity(grid.len());
        let mut column = vec![0.0; ok.len()];
        for j in 0..grid.len() {
            for (slot, (_, c)) in column.iter_mut().zip(&ok) {
                *slot = c.curves[i][j];
            }
            column.sort_by(f64::total_cmp);
            band_lo.push(percentile_sorted(&column, lo_p));
            band_hi.push(percentile_sorted(&column, hi_p));
        }
        let peak = peak_interval(&band_lo, &band_hi, &dates)?;
        let totals = config
            .horizons
            .iter()
            .enumerate()
            .map(|(h_idx, &h)| {
                let vals: Vec<f64> = ok.iter().map(|(_, c)| c.totals[i][h_idx]).collect();
                HorizonInterval {
                    horizon: h,
                    date: fit_res.panel.snapshot_date + Days::new(h as u64),
                    point: center_totals[i][h_idx],
                    lo: percentile(&vals, lo_p),
                    hi: percentile(&vals, hi_p),
                }
            })
            .collect();
        subjects.push(SubjectBands {
            name: s.name.clone(),
            dates,
            center: center[i].clone(),
            band_lo,
            band_hi,
            peak_interval: peak,
            totals,
        });
    }
    let n_ok = outcomes.len() - failures.len();
    Ok(BootstrapResult {
        config: config.clone(),
        replicates: outcomes.len(),
        trimmed: n_ok - kept,
        kept,
        kept_indices: ok.iter().map(|x| x.0).collect(),
        failures,
        subjects,
    })
}

/// Runs all replicates (in parallel where enabled) and aggregates them.
pub fn run_bootstrap(fit_res: &FitResult, config: &BootstrapConfig) -> Result<BootstrapResult> {
    config.validate()?;
    if !fit_res.converged {
        return Err(Error::Bootstrap("the original fit did not converge".into()));
    }
    let outcomes = replicate_outcomes(fit_res, config, Parallelism::from_workers(config.workers));
    aggregate(fit_res, config, &outcomes)
}

/// All replicate outcomes in index order.
pub fn replicate_outcomes(fit_res: &FitResult, config: &BootstrapConfig, par: Parallelism) -> Vec<ReplicateOutcome> {
    let idx: Vec<usize> = (0..config.replicates).collect();
    par_map(par, &idx, |_, &k| run_replicate(fit_res, config, k))
}
