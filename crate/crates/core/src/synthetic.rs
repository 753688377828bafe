//! Surrogate nine-country panel for exercising the full pipeline offline.
//!
//! Subject curves use published fitted coefficients (shared `α1`, `α4`,
//! per-country `α2`, `α3`) on the scaled response; first-death dates are
//! approximate, so series lengths are realistic through the snapshot.
//! Noise is `N(0, σ²/u_i)` with `u_i` drawn from the mixing law.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::curve::{CurveModel, GenLogisticCurve};
use crate::data_io::{PreparedPanel, Subject, REFERENCE_COUNTRIES};
use crate::smsn::MixingLaw;

/// Scaling constant of the reference analysis.
pub const REFERENCE_K_Z: f64 = 33.944;

const ALPHA1: f64 = 78_771_346.0;
const ALPHA4: f64 = 18.55;
const ALPHA2: [f64; 9] = [1.619, 1.518, 1.501, 1.414, 1.436, 1.429, 1.572, 1.484, 1.561];
const ALPHA3: [f64; 9] = [0.073, 0.061, 0.059, 0.047, 0.031, 0.022, 0.028, 0.017, 0.017];
const FIRST_DEATH: [(i32, u32, u32); 9] = [
    (2020, 3, 11),
    (2020, 2, 21),
    (2020, 3, 6),
    (2020, 2, 29),
    (2020, 3, 17),
    (2020, 3, 19),
    (2020, 3, 20),
    (2020, 3, 22),
    (2020, 3, 16),
];

/// Fixed effects `β` of the surrogate (log scale, scaled response).
pub fn surrogate_beta() -> Vec<f64> {
    let m2 = ALPHA2.iter().map(|a| a.ln()).sum::<f64>() / 9.0;
    let m3 = ALPHA3.iter().map(|a| a.ln()).sum::<f64>() / 9.0;
    vec![(ALPHA1 / REFERENCE_K_Z).ln(), m2, m3, ALPHA4.ln()]
}

/// Per-subject random effects `(b2, b3)` of the surrogate.
pub fn surrogate_b() -> Vec<Vec<f64>> {
    let beta = surrogate_beta();
    (0..9).map(|i| vec![ALPHA2[i].ln() - beta[1], ALPHA3[i].ln() - beta[2]]).collect()
}

/// Nine subjects observed from first death through the snapshot.
pub fn surrogate_panel(sigma2: f64, mixing: MixingLaw, seed: u64) -> PreparedPanel {
    let snapshot = NaiveDate::from_ymd_opt(2020, 6, 24).expect("valid date");
    let curve = GenLogisticCurve::default();
    let beta = surrogate_beta();
    let bs = surrogate_b();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..9)
        .map(|i| {
            let (y, m, d) = FIRST_DEATH[i];
            let first = NaiveDate::from_ymd_opt(y, m, d).expect("valid date");
            let n = (snapshot - first).num_days() as usize + 1;
            let u = mixing.sample_u(&mut rng);
            let sd = (sigma2 / u).sqrt();
            let t: Vec<f64> = (0..n).map(|k| k as f64).collect();
            let y = t.iter().map(|&tt| curve.eta(tt, &beta, &bs[i]) + sd * rng.sample::<f64, _>(StandardNormal)).collect();
            Subject { name: REFERENCE_COUNTRIES[i].to_string(), first_death_date: first, t, y }
        })
        .collect();
    PreparedPanel { subjects, k_z: REFERENCE_K_Z, snapshot_date: snapshot }
}
