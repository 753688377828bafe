//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria that need the dated death-count snapshot report FAIL with
//! "fixture missing" when it is absent. They are listed separately in the
//! summary, and the exit status reflects only the criteria that could be
//! evaluated; set `SMSN_NLME_STRICT_ACCEPTANCE=1` to count them as well.

mod common;

use std::time::Instant;

use chrono::{Days, NaiveDate};
use common::*;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

use smsn_nlme::bootstrap::{aggregate, kept_count, replicate_outcomes, run_bootstrap, BootstrapConfig, ReplicateOutcome};
use smsn_nlme::curve::{CurveParams, ModelSpec};
use smsn_nlme::data_io::{
    build_panel, fixture_path, parse_jhu_wide, scale_panel, PreparedPanel, REFERENCE_COUNTRIES, REFERENCE_SNAPSHOT,
};
use smsn_nlme::estimation::{eb_random_effects, fit, model_selection, Family, FitConfig, FitResult};
use smsn_nlme::parallel::Parallelism;
use smsn_nlme::prediction::{cumulative_forecast, predict_future, subject_by_name};
use smsn_nlme::smsn::{sample_smsn, smsn_logpdf, MixingLaw, SmsnParams};
use smsn_nlme::synthetic::surrogate_panel;

struct Outcome {
    pass: bool,
    evaluated: bool,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Self { pass, evaluated: true, detail }
    }

    fn missing(what: &str) -> Self {
        Self { pass: false, evaluated: false, detail: format!("fixture missing: {what}") }
    }
}

fn reference_panel() -> Option<Result<PreparedPanel, String>> {
    let path = fixture_path();
    let bytes = std::fs::read(&path).ok()?;
    let through: NaiveDate = REFERENCE_SNAPSHOT.parse().unwrap();
    let names: Vec<String> = REFERENCE_COUNTRIES.iter().map(|s| s.to_string()).collect();
    Some(
        parse_jhu_wide(&bytes)
            .and_then(|raw| build_panel(&raw, &names, through))
            .and_then(|p| scale_panel(&p, None))
            .map_err(|e| e.to_string()),
    )
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn model_selection_reproduction(panel: &PreparedPanel) -> (Outcome, Option<FitResult>) {
    let reference = [(Family::N, -2824.9), (Family::SN, -2824.4), (Family::T, -2360.0), (Family::ST, -2343.3)];
    let families: Vec<Family> = reference.iter().map(|p| p.0).collect();
    let start = Instant::now();
    let (rows, fits) = model_selection(&ModelSpec::default(), panel, &families, &FitConfig::default());
    let secs = start.elapsed().as_secs_f64();
    let rank = |key: fn(&smsn_nlme::estimation::SelectionRow) -> Option<f64>| -> Vec<Family> {
        let mut r: Vec<_> = rows.iter().filter_map(|row| key(row).map(|v| (v, row.family))).collect();
        r.sort_by(|a, b| a.0.total_cmp(&b.0));
        r.into_iter().map(|x| x.1).collect()
    };
    let order_ok = |o: &[Family]| o.len() == 4 && o[0] == Family::ST && o[1] == Family::T;
    let by_aic = rank(|r| r.aic);
    let by_bic = rank(|r| r.bic);
    let mut worst = 0.0f64;
    for (family, ll) in reference {
        match rows.iter().find(|r| r.family == family).and_then(|r| r.loglik) {
            Some(v) => worst = worst.max(rel(v, ll)),
            None => worst = f64::INFINITY,
        }
    }
    let pass = order_ok(&by_aic) && order_ok(&by_bic) && worst < 0.05 && secs < 300.0;
    let lls: Vec<String> =
        rows.iter().map(|r| format!("{}={:.1}", r.family.label(), r.loglik.unwrap_or(f64::NAN))).collect();
    let st = families.iter().position(|f| *f == Family::ST).and_then(|k| fits[k].clone());
    let detail = format!(
        "AIC order {:?}, BIC order {:?}, loglik {}, worst rel. diff {:.3} (< 0.05), {:.0} s (< 300)",
        by_aic.iter().map(|f| f.label()).collect::<Vec<_>>(),
        by_bic.iter().map(|f| f.label()).collect::<Vec<_>>(),
        lls.join(" "),
        worst,
        secs
    );
    (Outcome::check(pass, detail), st)
}

fn closed_form_checks() -> Outcome {
    let brazil = CurveParams::new(78_771_346.0, 1.436, 0.031, 18.55).unwrap();
    let belgium = CurveParams::new(78_771_346.0, 1.619, 0.073, 18.55).unwrap();
    let peak = brazil.peak_time();
    let first_death = NaiveDate::from_ymd_opt(2020, 3, 17).unwrap();
    let peak_date = first_death + Days::new(peak.round() as u64);
    let date_off = (peak_date - NaiveDate::from_ymd_opt(2020, 6, 8).unwrap()).num_days().abs();
    let br = rel(brazil.total_asymptote(), 95_476.0);
    let be = rel(belgium.total_asymptote(), 10_304.0);
    let pass = (peak - 82.5).abs() <= 0.5 && date_off <= 2 && br <= 0.01 && be <= 0.01;
    Outcome::check(
        pass,
        format!(
            "peak {peak:.2} d -> {peak_date}, Brazil asymptote {:.0} ({:.4}), Belgium {:.0} ({:.4})",
            brazil.total_asymptote(),
            br,
            belgium.total_asymptote(),
            be
        ),
    )
}

fn forecast_sanity(st: &FitResult) -> Outcome {
    let totals = |name: &str| -> Result<(f64, f64), String> {
        let i = subject_by_name(st, name).map_err(|e| e.to_string())?;
        let s = &st.panel.subjects[i];
        let last = s.date_of(s.last_t());
        let v = cumulative_forecast(st, i, &[last + Days::new(30), last + Days::new(150)]).map_err(|e| e.to_string())?;
        Ok((v[0], v[1]))
    };
    let (be, ch) = match (totals("Belgium"), totals("Chile")) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => return Outcome::check(false, format!("forecast failed: {:?} {:?}", a.err(), b.err())),
    };
    let be_growth = be.1 / be.0 - 1.0;
    let ch_growth = ch.1 / ch.0 - 1.0;
    let points = [(be.0, 10_296.0), (be.1, 10_302.0), (ch.0, 12_386.0), (ch.1, 42_754.0)];
    let worst = points.iter().map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    let pass = be_growth < 0.005 && ch_growth > 1.0 && worst < 0.15;
    Outcome::check(
        pass,
        format!(
            "Belgium {:.0} -> {:.0} (+{:.2}%), Chile {:.0} -> {:.0} (+{:.0}%), worst point rel. diff {:.3}",
            be.0,
            be.1,
            100.0 * be_growth,
            ch.0,
            ch.1,
            100.0 * ch_growth,
            worst
        ),
    )
}

/// Trapezoid rule on a uniform grid over `[-r, r]^p`, `p` in {1, 2}.
fn grid_integral(params: &SmsnParams, r: f64, h: f64) -> f64 {
    let n = (2.0 * r / h).round() as usize;
    let w = |k: usize| if k == 0 || k == n { 0.5 } else { 1.0 };
    let x = |k: usize| -r + k as f64 * h;
    let dens = |y: DVector<f64>| smsn_logpdf(&y, params).unwrap().exp();
    let mut total = 0.0;
    if params.dim() == 1 {
        for i in 0..=n {
            total += w(i) * dens(DVector::from_element(1, x(i)));
        }
        total * h
    } else {
        for i in 0..=n {
            for j in 0..=n {
                total += w(i) * w(j) * dens(DVector::from_vec(vec![x(i), x(j)]));
            }
        }
        total * h * h
    }
}

fn ln_mvn(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let p = y.len() as f64;
    let c = sigma.clone().cholesky().unwrap();
    let d = y - mu;
    let maha = d.dot(&c.solve(&d));
    let ln_det = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + ln_det + maha)
}

fn ln_mvt(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>, nu: f64) -> f64 {
    let p = y.len() as f64;
    let c = sigma.clone().cholesky().unwrap();
    let d = y - mu;
    let maha = d.dot(&c.solve(&d));
    let ln_det = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    ln_gamma(0.5 * (nu + p)) - ln_gamma(0.5 * nu) - 0.5 * p * (nu * std::f64::consts::PI).ln() - 0.5 * ln_det
        - 0.5 * (nu + p) * (1.0 + maha / nu).ln()
}

/// Closed-form skew-t: `2 t_p(y) T(A sqrt((nu + p) / (nu + d)); nu + p)`.
fn ln_skew_t(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>, lambda: &DVector<f64>, nu: f64) -> f64 {
    let p = y.len() as f64;
    let eig = sigma.clone().symmetric_eigen();
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * eig.eigenvectors.transpose();
    let z = inv_sqrt * (y - mu);
    let a = lambda.dot(&z);
    let d = z.dot(&z);
    let t = StudentsT::new(0.0, 1.0, nu + p).unwrap();
    std::f64::consts::LN_2 + ln_mvt(y, mu, sigma, nu) + t.cdf(a * ((nu + p) / (nu + d)).sqrt()).ln()
}

fn distribution_suite() -> Outcome {
    let start = Instant::now();
    let mu1 = DVector::from_element(1, 0.5);
    let s1 = DMatrix::from_element(1, 1, 1.7);
    let l1 = DVector::from_element(1, 2.5);
    let laws = [
        MixingLaw::Normal,
        MixingLaw::StudentT { nu: 4.0 },
        MixingLaw::Slash { nu: 2.0 },
        MixingLaw::ContaminatedNormal { nu: 0.3, gamma: 0.2 },
    ];
    let mut norm_err = 0.0f64;
    for law in laws {
        let p = SmsnParams::new(mu1.clone(), s1.clone(), l1.clone(), law).unwrap();
        norm_err = norm_err.max((grid_integral(&p, 400.0, 0.01) - 1.0).abs());
    }
    let mu2 = DVector::from_vec(vec![0.3, -0.2]);
    let s2 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let l2 = DVector::from_vec(vec![2.0, -1.0]);
    let st2 = SmsnParams::new(mu2.clone(), s2.clone(), l2.clone(), MixingLaw::StudentT { nu: 4.0 }).unwrap();
    norm_err = norm_err.max((grid_integral(&st2, 60.0, 0.1) - 1.0).abs());

    let zero = DVector::zeros(2);
    let points: Vec<DVector<f64>> = [[0.0, 0.0], [1.3, -0.4], [-2.5, 3.0], [6.0, 5.0]]
        .iter()
        .map(|p| DVector::from_vec(p.to_vec()))
        .collect();
    let mut reduction = 0.0f64;
    for y in &points {
        let n = SmsnParams::new(mu2.clone(), s2.clone(), zero.clone(), MixingLaw::Normal).unwrap();
        reduction = reduction.max((smsn_logpdf(y, &n).unwrap() - ln_mvn(y, &mu2, &s2)).abs());
        let t = SmsnParams::new(mu2.clone(), s2.clone(), zero.clone(), MixingLaw::StudentT { nu: 3.5 }).unwrap();
        reduction = reduction.max((smsn_logpdf(y, &t).unwrap() - ln_mvt(y, &mu2, &s2, 3.5)).abs());
        let cn = SmsnParams::new(mu2.clone(), s2.clone(), zero.clone(), MixingLaw::ContaminatedNormal { nu: 0.3, gamma: 0.2 })
            .unwrap();
        let mix = 0.3 * ln_mvn(y, &mu2, &(&s2 / 0.2)).exp() + 0.7 * ln_mvn(y, &mu2, &s2).exp();
        reduction = reduction.max((smsn_logpdf(y, &cn).unwrap() - mix.ln()).abs());
    }

    // The gap to the SN limit shrinks like 1/nu but grows with the skew-tail
    // depth, so the limit is checked in the bulk and the deep-tail point is
    // checked against the exact skew-t density instead.
    let sn = SmsnParams::skew_normal(mu2.clone(), s2.clone(), l2.clone()).unwrap();
    let st_big = SmsnParams::new(mu2.clone(), s2.clone(), l2.clone(), MixingLaw::StudentT { nu: 1e6 }).unwrap();
    let rel_gap = |y: &DVector<f64>| {
        let a = smsn_logpdf(y, &st_big).unwrap().exp();
        let b = smsn_logpdf(y, &sn).unwrap().exp();
        (a - b).abs() / b
    };
    let limit = points.iter().take(2).map(rel_gap).fold(0.0, f64::max);
    let tail_gap = rel_gap(&points[2]);
    let exact = points
        .iter()
        .take(3)
        .map(|y| (smsn_logpdf(y, &st_big).unwrap() - ln_skew_t(y, &mu2, &s2, &l2, 1e6)).abs())
        .fold(0.0, f64::max);

    let st5 = SmsnParams::new(mu2.clone(), s2.clone(), l2.clone(), MixingLaw::StudentT { nu: 5.0 }).unwrap();
    let n = 100_000;
    let draws = sample_smsn(&st5, n, &mut ChaCha8Rng::seed_from_u64(2020));
    let expected = st5.big_delta() * ((2.0 / std::f64::consts::PI).sqrt() * st5.mixing().k1().unwrap());
    let mut worst_z = 0.0f64;
    for k in 0..2 {
        let col: Vec<f64> = draws.column(k).iter().map(|v| v - mu2[k]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst_z = worst_z.max((mean - expected[k]).abs() / (var / n as f64).sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = norm_err <= 1e-2 && reduction <= 1e-10 && limit <= 1e-4 && exact <= 1e-6 && worst_z <= 4.0 && secs < 60.0;
    Outcome::check(
        pass,
        format!(
            "normalization {norm_err:.1e} (<= 1e-2), symmetric reduction {reduction:.1e} (<= 1e-10), \
             nu=1e6 vs SN {limit:.1e} (<= 1e-4; deep tail {tail_gap:.1e}, exact skew-t {exact:.1e}), sampler mean |z| {worst_z:.2} (<= 4), {secs:.1} s (< 60)"
        ),
    )
}

fn em_correctness() -> Outcome {
    let families = [Family::N, Family::SN, Family::T, Family::ST];
    let violations: Vec<String> = (0..20u64)
        .filter_map(|k| ecm_monotone_on_random_lines(1000 + k, families[k as usize % 4]).err())
        .collect();
    let gap = stationarity_gap();
    let lme = lme_reference_fit();
    let lme_diff = (lme.loglik - LME_REFERENCE_LOGLIK).abs();
    let pass = violations.is_empty() && gap < 1e-3 && lme_diff < 1e-4 && lme.converged;
    Outcome::check(
        pass,
        format!(
            "(a) {} violations in 20 instances{}, (b) direct search gains {gap:.1e} (< 1e-3), \
             (c) |loglik - LME solver| {lme_diff:.1e} (< 1e-4)",
            violations.len(),
            violations.first().map(|v| format!(" [{v}]")).unwrap_or_default()
        ),
    )
}

fn conditional_oracles() -> Outcome {
    let start = Instant::now();
    let theta = toy_theta();
    let (t, y) = toy_series();
    let panel = panel_of(vec![(t.clone(), y.clone())]);
    let b = eb_random_effects(&line_model(), &theta, &panel, &[DVector::zeros(1)], Parallelism::Sequential).unwrap()[0][0];
    let oracle_b = is_posterior_mean_b(&theta, &t, &y, 1_000_000, 42);
    let res = fixed_fit(line_model(), panel, Family::ST, theta.clone());
    let pred = predict_future(&res, 0, &[5.0]).unwrap()[0];
    let oracle_b2 = is_posterior_mean_b(&theta, &t, &y, 1_000_000, 43);
    let oracle_pred = theta.beta[0] + oracle_b2 + theta.beta[1] * 5.0;
    let (eb_err, pred_err) = (rel(b, oracle_b), rel(pred, oracle_pred));
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        eb_err < 0.02 && pred_err < 0.02 && secs < 120.0,
        format!(
            "EB {b:.4} vs MC {oracle_b:.4} ({eb_err:.4}), prediction {pred:.4} vs MC {oracle_pred:.4} ({pred_err:.4}), \
             {secs:.1} s (< 120)"
        ),
    )
}

fn bootstrap_mechanics() -> Outcome {
    let (res, _) = line_fit(7);
    let cfg = BootstrapConfig { replicates: 600, horizons: vec![5, 10], workers: 1, ..BootstrapConfig::default() };
    let mut outcomes = replicate_outcomes(&res, &cfg, Parallelism::Sequential);
    let natural = outcomes.iter().filter(|o| matches!(o, ReplicateOutcome::Failed { .. })).count();
    let mut injected = 0;
    for o in outcomes.iter_mut().step_by(37) {
        if injected == 13 {
            break;
        }
        if matches!(o, ReplicateOutcome::Ok(_)) {
            *o = ReplicateOutcome::Failed { reason: "injected".into() };
            injected += 1;
        }
    }
    let agg = aggregate(&res, &cfg, &outcomes);
    let (failures, kept) = agg.as_ref().map(|a| (a.failures.len(), a.kept)).unwrap_or((0, 0));
    let arithmetic = natural == 0 && failures == 13 && 600 - failures == 587 && kept == 499 && kept_count(600, 13, 0.15) == 499;

    let small = BootstrapConfig { replicates: 40, ..cfg.clone() };
    let one = run_bootstrap(&res, &small).map(|r| serde_json::to_string(&r).unwrap());
    let eight = run_bootstrap(&res, &BootstrapConfig { workers: 8, ..small }).map(|r| serde_json::to_string(&r).unwrap());
    let identical = matches!((&one, &eight), (Ok(a), Ok(b)) if a == b);

    let cov = coverage(BootstrapConfig::default().random_effects, 20);
    Outcome::check(
        arithmetic && identical && cov >= 0.85,
        format!(
            "600 -> {} -> {kept} (expect 587 -> 499), 1 vs 8 workers byte-identical: {identical}, \
             coverage {cov:.3} (>= 0.85)",
            600 - failures
        ),
    )
}

fn smoke_run() -> Outcome {
    let start = Instant::now();
    let panel = surrogate_panel(3.8, MixingLaw::StudentT { nu: 3.0 }, 2);
    let st = match fit(&ModelSpec::default(), &panel, Family::ST, &FitConfig::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::check(false, format!("ST fit failed: {e}")),
    };
    let cfg = BootstrapConfig { replicates: 50, ..BootstrapConfig::default() };
    let out = match run_bootstrap(&st, &cfg) {
        Ok(o) => o,
        Err(e) => return Outcome::check(false, format!("bootstrap failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let mut outside = 0usize;
    let mut points = 0usize;
    for s in &out.subjects {
        for ((lo, hi), c) in s.band_lo.iter().zip(&s.band_hi).zip(&s.center) {
            points += 1;
            outside += usize::from(!(lo <= c && c <= hi));
        }
    }
    Outcome::check(
        outside == 0 && secs < 900.0,
        format!(
            "M=50 on the nine-subject surrogate: {} failed, {} kept, {outside}/{points} fitted points outside the band, \
             {secs:.0} s (< 900)",
            out.failures.len(),
            out.kept
        ),
    )
}

fn main() {
    let reference = reference_panel();
    let (c1, st_fit) = match &reference {
        None => (Outcome::missing(&fixture_path().display().to_string()), None),
        Some(Err(e)) => (Outcome::check(false, format!("fixture unreadable: {e}")), None),
        Some(Ok(panel)) => model_selection_reproduction(panel),
    };
    let c3 = match (&reference, &st_fit) {
        (None, _) => Outcome::missing(&fixture_path().display().to_string()),
        (_, Some(st)) => forecast_sanity(st),
        (_, None) => Outcome::check(false, "no ST fit from the selection run".into()),
    };
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("model-selection reproduction", Box::new(move || c1)),
        ("closed-form curve checks", Box::new(closed_form_checks)),
        ("forecast-table sanity", Box::new(move || c3)),
        ("distribution-layer properties", Box::new(distribution_suite)),
        ("EM correctness", Box::new(em_correctness)),
        ("conditional-expectation oracles", Box::new(conditional_oracles)),
        ("bootstrap mechanics", Box::new(bootstrap_mechanics)),
        ("M=50 bootstrap smoke run", Box::new(smoke_run)),
    ];
    let strict = std::env::var("SMSN_NLME_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut unevaluated = 0;
    for (k, (name, run)) in criteria.into_iter().enumerate() {
        let o = run();
        println!("{} {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, k + 1, o.detail);
        if !o.pass {
            if o.evaluated {
                failed += 1;
            } else {
                unevaluated += 1;
            }
        }
    }
    println!("acceptance: {failed} failed, {unevaluated} not evaluable without the fixture");
    if failed > 0 || (strict && unevaluated > 0) {
        std::process::exit(1);
    }
}
