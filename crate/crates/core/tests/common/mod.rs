//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};

use smsn_nlme::curve::{CurveModel, GenLogisticCurve, ModelSpec, PolynomialCurve};
use smsn_nlme::data_io::{PreparedPanel, Subject};
use smsn_nlme::bootstrap::{run_bootstrap, BootstrapConfig, RandomEffectsDraw};
use smsn_nlme::estimation::{approx_loglik, fit, Family, FitConfig, FitResult, Linearization, Theta};
use smsn_nlme::parallel::Parallelism;
use smsn_nlme::smsn::{sample_sn_centered, MixingLaw};
use smsn_nlme::synthetic::{surrogate_b, surrogate_beta};

pub fn day0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 1).unwrap()
}

/// Random intercept plus fixed slope: `η = β0 + b + β1 t`.
pub fn line_model() -> ModelSpec {
    ModelSpec::Polynomial(PolynomialCurve { fixed_terms: 2, random_terms: 1 })
}

pub fn panel_of(series: Vec<(Vec<f64>, Vec<f64>)>) -> PreparedPanel {
    let subjects = series
        .into_iter()
        .enumerate()
        .map(|(i, (t, y))| Subject { name: format!("s{i}"), first_death_date: day0(), t, y })
        .collect();
    PreparedPanel { subjects, k_z: 1.0, snapshot_date: day0() + chrono::Duration::days(4) }
}

/// Fit-shaped wrapper around a fixed `θ` for the oracle comparisons.
pub fn fixed_fit(model: ModelSpec, panel: PreparedPanel, family: Family, theta: Theta) -> FitResult {
    let q = model.n_random();
    let m = panel.subjects.len();
    let n_obs = panel.n_obs();
    FitResult {
        family,
        model,
        theta,
        b_hat: vec![vec![0.0; q]; m],
        u_hat: vec![1.0; m],
        loglik: 0.0,
        n_params: 1,
        n_obs,
        aic: 0.0,
        bic: 0.0,
        converged: true,
        iterations: 0,
        trace: Vec::new(),
        config: FitConfig::default(),
        panel,
    }
}

/// The q=1, n_i=5 toy: ST ν=5 random intercept.
pub fn toy_theta() -> Theta {
    Theta::new(vec![1.0, 0.5], 0.5, &DMatrix::from_element(1, 1, 1.0), vec![3.0], MixingLaw::StudentT { nu: 5.0 }).unwrap()
}

pub fn toy_series() -> (Vec<f64>, Vec<f64>) {
    let t = vec![0.0, 1.0, 2.0, 3.0, 4.0];
    let y = vec![3.3, 3.4, 4.6, 4.7, 5.6];
    (t, y)
}

/// Self-normalized importance sampling of `E{b | y}` for a linear model
/// with random intercept under the prior `(U, b)` as proposal. Errors share
/// the subject's `U`.
pub fn is_posterior_mean_b(theta: &Theta, t: &[f64], y: &[f64], draws: usize, seed: u64) -> f64 {
    let nu = match theta.mixing {
        MixingLaw::StudentT { nu } => nu,
        _ => panic!("oracle is written for the t mixing law"),
    };
    let d = theta.d();
    let sd = d[(0, 0)].sqrt();
    let lam = theta.lambda[0];
    let delta = DVector::from_element(1, lam / (1.0 + lam * lam).sqrt());
    let c = theta.mixing.centering().unwrap();
    let big_delta = sd * delta[0];
    let gamma = Gamma::new(nu / 2.0, 2.0 / nu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t.len() as f64;
    let sqrt_d = DMatrix::from_element(1, 1, sd);
    let mut logs = Vec::with_capacity(draws);
    let mut bs = Vec::with_capacity(draws);
    for _ in 0..draws {
        let u: f64 = rng.sample(gamma);
        let z = sample_sn_centered(&sqrt_d, &delta, &mut rng)[0];
        let b = c * big_delta + z / u.sqrt();
        let ss: f64 = t.iter().zip(y).map(|(&tt, &v)| (v - theta.beta[0] - b - theta.beta[1] * tt).powi(2)).sum();
        logs.push(0.5 * n * u.ln() - u * ss / (2.0 * theta.sigma2));
        bs.push(b);
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (l, b) in logs.iter().zip(&bs) {
        let w = (l - top).exp();
        num += w * b;
        den += w;
    }
    num / den
}

/// Nine subjects on the shipped curve with `b ~ N(0, D)` and Gaussian
/// noise, 120 days each.
pub fn normal_curve_panel(sigma2: f64, d: &DMatrix<f64>, seed: u64) -> PreparedPanel {
    let curve = GenLogisticCurve::default();
    let beta = surrogate_beta();
    let chol = d.clone().cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = (0..9)
        .map(|_| {
            let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let b = &chol * z;
            let t: Vec<f64> = (0..120).map(|k| k as f64).collect();
            let y = t.iter().map(|&tt| curve.eta(tt, &beta, b.as_slice()) + sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
            (t, y)
        })
        .collect();
    panel_of(series)
}

/// Spread of the surrogate's effects, used as the simulation `D`.
pub fn surrogate_d() -> DMatrix<f64> {
    let bs = surrogate_b();
    let mut d = DMatrix::zeros(2, 2);
    for b in &bs {
        let v = DVector::from_column_slice(b);
        d += &v * v.transpose();
    }
    d / bs.len() as f64
}

pub fn random_line_panel(seed: u64, m: usize, n: usize) -> PreparedPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = (0..m)
        .map(|_| {
            let b: f64 = 1.5 * rng.sample::<f64, _>(StandardNormal);
            let scale = if rng.gen_bool(0.2) { 3.0 } else { 1.0 };
            let t: Vec<f64> = (0..n).map(|k| k as f64 / 2.0).collect();
            let y = t.iter().map(|&tt| 2.0 + b + 0.7 * tt + scale * rng.sample::<f64, _>(StandardNormal)).collect();
            (t, y)
        })
        .collect();
    panel_of(series)
}

/// Packs every free parameter onto an unconstrained scale.
pub fn pack(theta: &Theta) -> Vec<f64> {
    let mut v = theta.beta.clone();
    v.push(theta.sigma2.ln());
    v.push(theta.alpha[0].abs().ln());
    if let MixingLaw::StudentT { nu } = theta.mixing {
        v.push((nu - 1.0).ln());
    }
    v
}

pub fn unpack(v: &[f64], like: &Theta) -> Theta {
    let mixing = match like.mixing {
        MixingLaw::StudentT { .. } => MixingLaw::StudentT { nu: 1.0 + v[4].exp() },
        m => m,
    };
    Theta { beta: v[..2].to_vec(), sigma2: v[2].exp(), alpha: vec![v[3].exp()], lambda: like.lambda.clone(), mixing }
}

/// Minimal derivative-free check: compass search on the packed vector.
/// The toy has five parameters, so a pattern search is plenty.
pub fn direct_max(f: &dyn Fn(&[f64]) -> f64, x0: Vec<f64>) -> (Vec<f64>, f64) {
    let mut x = x0;
    let mut best = f(&x);
    let mut step = 0.25;
    while step > 1e-7 {
        let mut moved = false;
        for k in 0..x.len() {
            for sgn in [1.0, -1.0] {
                let mut c = x.clone();
                c[k] += sgn * step;
                let v = f(&c);
                if v > best {
                    best = v;
                    x = c;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (x, best)
}

/// Thirty ECM sweeps at a frozen expansion on a random six-subject panel;
/// the first sweep that lowers the loglik is reported.
pub fn ecm_monotone_on_random_lines(seed: u64, family: Family) -> Result<(), String> {
    let panel = random_line_panel(seed, 6, 10);
    let model = line_model();
    let lambda = if family.is_skew() { vec![1.0] } else { vec![0.0] };
    let mut theta =
        Theta::new(vec![1.0, 0.3], 2.0, &DMatrix::from_element(1, 1, 0.5), lambda, family.initial_mixing()).unwrap();
    let b = vec![DVector::zeros(1); panel.subjects.len()];
    let lin = Linearization::new(&model, &panel, &theta.beta, &b, Parallelism::Sequential).unwrap();
    let mut prev = lin.loglik(&theta).unwrap();
    for sweep in 0..30 {
        let (next, before) = lin.em_step(&theta, family.is_skew()).unwrap();
        if (before - prev).abs() >= 1e-9 * prev.abs().max(1.0) {
            return Err(format!("sweep {sweep}: reported loglik {before} differs from {prev}"));
        }
        let after = lin.loglik(&next).unwrap();
        if after < prev - 1e-8 * prev.abs().max(1.0) {
            return Err(format!("sweep {sweep}: {prev} -> {after}"));
        }
        prev = after;
        theta = next;
    }
    Ok(())
}

/// Fits the t family to the three-line toy and returns how much a compass
/// search can still raise the approximate loglik from the fit. Three
/// subjects cannot pin a skewness (λ runs off to the boundary), so the check
/// uses the symmetric t family, where ν is profiled too.
pub fn stationarity_gap() -> f64 {
    let panel = three_line_panel();
    let model = line_model();
    let res = fit(&model, &panel, Family::T, &FitConfig::default()).unwrap();
    assert!(res.converged);
    let b = res.b_hat_vectors();
    let objective = |v: &[f64]| {
        let th = unpack(v, &res.theta);
        approx_loglik(&model, &th, &panel, &b, Parallelism::Sequential).unwrap_or(f64::NEG_INFINITY)
    };
    let at_fit = objective(&pack(&res.theta));
    assert!((at_fit - res.loglik).abs() < 1e-9);
    let (_, best) = direct_max(&objective, pack(&res.theta));
    best - at_fit
}

/// Three short random-intercept lines for the stationarity check.
pub fn three_line_panel() -> PreparedPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let offsets = [-1.2, 0.3, 2.4];
    panel_of(
        offsets
            .iter()
            .map(|&b| {
                let t: Vec<f64> = (0..12).map(|k| k as f64).collect();
                let y = t.iter().map(|&tt| 1.0 + b + 0.4 * tt + 0.8 * rng.sample::<f64, _>(StandardNormal)).collect();
                (t, y)
            })
            .collect(),
    )
}

pub const TRUE_BETA: [f64; 2] = [2.0, 0.6];

/// Gaussian random-intercept lines with known effects.
pub fn line_panel(seed: u64) -> (PreparedPanel, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut effects = Vec::new();
    let series = (0..9)
        .map(|_| {
            let b: f64 = rng.sample(StandardNormal);
            effects.push(b);
            let t: Vec<f64> = (0..25).map(|k| k as f64).collect();
            let y = t.iter().map(|&tt| TRUE_BETA[0] + b + TRUE_BETA[1] * tt + rng.sample::<f64, _>(StandardNormal)).collect();
            (t, y)
        })
        .collect();
    (panel_of(series), effects)
}

pub fn line_fit(seed: u64) -> (FitResult, Vec<f64>) {
    let (panel, effects) = line_panel(seed);
    (fit(&line_model(), &panel, Family::N, &FitConfig::default()).unwrap(), effects)
}

/// Share of grid points (in sample and ahead) where the band holds the true
/// subject mean, averaged over trials.
pub fn coverage(draw: RandomEffectsDraw, trials: u64) -> f64 {
    let mut total = 0.0;
    for trial in 0..trials {
        let (res, effects) = line_fit(1000 + trial);
        let cfg = BootstrapConfig {
            replicates: 100,
            random_effects: draw,
            seed: trial,
            horizons: vec![5, 10],
            workers: 1,
            ..BootstrapConfig::default()
        };
        let out = run_bootstrap(&res, &cfg).unwrap();
        let mut hit = 0usize;
        let mut count = 0usize;
        for (s, b) in out.subjects.iter().zip(&effects) {
            for (j, (lo, hi)) in s.band_lo.iter().zip(&s.band_hi).enumerate() {
                let truth = TRUE_BETA[0] + b + TRUE_BETA[1] * j as f64;
                hit += usize::from(*lo <= truth && truth <= *hi);
                count += 1;
            }
        }
        total += hit as f64 / count as f64;
    }
    total / trials as f64
}

/// Eight random-intercept-and-slope lines, ten days each.
pub const LME_REFERENCE_Y: [[f64; 10]; 8] = [
    [1.183, 1.355, 1.9, 1.483, 3.102, 3.467, 2.988, 4.514, 3.264, 4.251],
    [4.27, 4.886, 5.969, 6.581, 6.752, 8.91, 9.022, 10.781, 9.797, 11.591],
    [-0.227, 0.025, 2.23, 1.196, 2.315, 3.432, 3.884, 5.463, 5.286, 6.076],
    [3.524, 2.367, 3.802, 3.035, 3.849, 4.595, 4.916, 4.381, 7.046, 7.456],
    [4.205, 4.121, 3.314, 5.644, 6.919, 8.286, 8.366, 8.284, 10.739, 10.884],
    [1.273, 3.404, 3.474, 2.894, 2.931, 4.864, 5.401, 5.091, 6.519, 6.428],
    [0.51, 1.967, 1.195, 2.349, 3.329, 3.691, 2.991, 4.817, 4.449, 4.371],
    [3.228, 2.288, 3.555, 4.511, 6.357, 7.383, 6.79, 8.802, 8.481, 10.404],
];

/// Maximized Gaussian LME loglik (ML, not REML) of the reference lines with
/// random intercept and slope, from an established mixed-model solver
/// (two optimizers agree to 2e-8).
pub const LME_REFERENCE_LOGLIK: f64 = -103.961816455;

pub fn lme_reference_panel() -> PreparedPanel {
    let t: Vec<f64> = (0..10).map(|k| k as f64).collect();
    panel_of(LME_REFERENCE_Y.iter().map(|y| (t.clone(), y.to_vec())).collect())
}

/// Gaussian fit of the reference lines with both coefficients random.
pub fn lme_reference_fit() -> FitResult {
    let model = ModelSpec::Polynomial(PolynomialCurve { fixed_terms: 2, random_terms: 2 });
    let cfg = FitConfig { tol_loglik: 1e-12, tol_param: 1e-9, max_outer: 2000, ..FitConfig::default() };
    fit(&model, &lme_reference_panel(), Family::N, &cfg).unwrap()
}
