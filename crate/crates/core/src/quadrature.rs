//! Adaptive Gauss–Kronrod quadrature and log-domain integrals over the
//! mixing scale `u ∈ (0, ∞)`.
//!
//! Mixing integrals are computed on `s = ln u`. The integrand is located by a
//! coarse scan plus golden-section refinement of its log, then integrated as
//! `exp(g(s) - g*)` over the region where it exceeds `e^-60` of its peak. The
//! scaled maximum is added back at the end, so nothing underflows even when
//! the density itself would.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 15-point Kronrod panel with its embedded 7-point Gauss estimate.
/// Returns `(kronrod, |kronrod - gauss|)`.
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

/// Globally adaptive Gauss–Kronrod (G7K15) integration of `f` on `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_panels: usize,
) -> Result<(f64, f64)> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::numerical(format!("non-finite integration bounds [{a}, {b}]")));
    }
    if a == b {
        return Ok((0.0, 0.0));
    }
    let mut panels = Vec::with_capacity(32);
    let (v, e) = gk15(&f, a, b);
    panels.push(Panel { a, b, value: v, err: e });
    loop {
        let total: f64 = panels.iter().map(|p| p.value).sum();
        let err: f64 = panels.iter().map(|p| p.err).sum();
        if !total.is_finite() {
            return Err(Error::numerical("non-finite integrand value in quadrature"));
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok((total, err));
        }
        if panels.len() >= max_panels {
            return Err(Error::numerical(format!(
                "quadrature did not converge on [{a}, {b}]: value {total}, error estimate {err} after {} panels",
                panels.len()
            )));
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.err.total_cmp(&y.1.err))
            .expect("nonempty");
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        let (v1, e1) = gk15(&f, p.a, mid);
        let (v2, e2) = gk15(&f, mid, p.b);
        panels.push(Panel { a: p.a, b: mid, value: v1, err: e1 });
        panels.push(Panel { a: mid, b: p.b, value: v2, err: e2 });
    }
}

/// Relative accuracy targeted by every mixing integral.
pub const MIXING_REL_TOL: f64 = 1e-10;

/// Drop (in log units) below the peak at which the integrand is truncated.
const LOG_DROP: f64 = 60.0;

/// `ln ∫ exp(g(s)) ds` for a unimodal log-integrand `g` on `(lo, hi)`.
///
/// `hint` is a guess of the mode; `lo`/`hi` may be infinite.
pub fn log_integral(g: impl Fn(f64) -> f64, hint: f64, lo: f64, hi: f64) -> Result<f64> {
    let clamp = |s: f64| s.clamp(lo.max(-700.0), hi.min(700.0));
    let lo_f = lo.max(-700.0);
    let hi_f = hi.min(700.0);

    // Coarse scan around the hint, unit steps, to bracket the mode.
    let mut best_s = clamp(hint);
    let mut best_g = g(best_s);
    for k in 1..=40 {
        let step = k as f64 * 0.75;
        for s in [clamp(hint - step), clamp(hint + step)] {
            let v = g(s);
            if v > best_g {
                best_g = v;
                best_s = s;
            }
        }
    }
    if !best_g.is_finite() {
        if best_g == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        return Err(Error::numerical("log-integrand is not finite at its mode"));
    }

    // Golden-section refinement inside the bracketing cell.
    let (mut a, mut b) = (clamp(best_s - 0.75), clamp(best_s + 0.75));
    let inv_phi = 0.618_033_988_749_894_9;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (g(x1), g(x2));
    while b - a > 1e-7 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = g(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = g(x1);
        }
    }
    let (mode, gmax) = [(x1, f1), (x2, f2), (best_s, best_g)]
        .into_iter()
        .max_by(|p, q| p.1.total_cmp(&q.1))
        .expect("three candidates");

    // Width from curvature, then expand until the integrand has died off.
    let h = 1e-3;
    let curv = (g(clamp(mode + h)) - 2.0 * gmax + g(clamp(mode - h))) / (h * h);
    let width = if curv.is_finite() && curv < -1e-12 {
        (1.0 / (-curv).sqrt()).clamp(1e-6, 50.0)
    } else {
        1.0
    };
    let mut left = mode;
    let mut step = width;
    while left > lo_f {
        left = (left - step).max(lo_f);
        if g(left) < gmax - LOG_DROP {
            break;
        }
        step *= 2.0;
    }
    let mut right = mode;
    step = width;
    while right < hi_f {
        right = (right + step).min(hi_f);
        if g(right) < gmax - LOG_DROP {
            break;
        }
        step *= 2.0;
    }

    let f = |s: f64| {
        let v = g(s) - gmax;
        if v < -745.0 {
            0.0
        } else {
            v.exp()
        }
    };
    // Split at the mode so the peak sits on a panel boundary.
    let mut total = 0.0;
    for (a, b) in [(left, mode), (mode, right)] {
        if b > a {
            let (v, _) = integrate(f, a, b, MIXING_REL_TOL, 0.0, 400)?;
            total += v;
        }
    }
    if total <= 0.0 {
        return Err(Error::numerical("mixing integral collapsed to zero"));
    }
    Ok(gmax + total.ln())
}
