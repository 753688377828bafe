//! Scalar special functions used throughout the density and weight code.

use libm::erfc;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
pub const LN_2: f64 = std::f64::consts::LN_2;

/// `ln φ(x)` for the standard normal density.
#[inline]
pub fn ln_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    ln_norm_pdf(x).exp()
}

/// `Φ(x)`.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `ln Φ(x)`, accurate in both tails.
pub fn ln_norm_cdf(x: f64) -> f64 {
    if x > 5.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else if x > -37.0 {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        // Mills-ratio asymptotic expansion; relative error below 1e-12 here.
        let z2 = 1.0 / (x * x);
        let series = 1.0 - z2 * (1.0 - 3.0 * z2 * (1.0 - 5.0 * z2 * (1.0 - 7.0 * z2)));
        ln_norm_pdf(x) - (-x).ln() + series.ln()
    }
}

/// Inverse Mills ratio `W_Φ(x) = φ(x) / Φ(x)`.
pub fn mills(x: f64) -> f64 {
    (ln_norm_pdf(x) - ln_norm_cdf(x)).exp()
}

/// `ln Γ(x)`.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// `ln T_df(x)`, the Student-t distribution function. `None` when the
/// lower tail underflows.
pub fn ln_t_cdf(x: f64, df: f64) -> Option<f64> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let t = StudentsT::new(0.0, 1.0, df).ok()?;
    let v = if x < 0.0 { t.cdf(x).ln() } else { (-t.cdf(-x)).ln_1p() };
    v.is_finite().then_some(v)
}

/// Numerically stable `ln(e^a + e^b)`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_tails_are_continuous_across_branches() {
        for &x in &[-37.0, 5.0] {
            let lo = ln_norm_cdf(x - 1e-9);
            let hi = ln_norm_cdf(x + 1e-9);
            assert!((lo - hi).abs() < 1e-7 * lo.abs().max(1e-12), "{x}: {lo} vs {hi}");
        }
    }

    #[test]
    fn known_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((ln_norm_cdf(1.0) - 0.841_344_746_068_542_9_f64.ln()).abs() < 1e-14);
        // Φ(-40) from mpmath: 3.655893540915e-350 underflows, compare in log space.
        assert!((ln_norm_cdf(-40.0) - (-804.608_442_013_754_6)).abs() < 1e-9);
        assert!((mills(0.0) - 0.797_884_560_802_865_4).abs() < 1e-14);
        // W_Φ(x) ~ -x for large negative x
        assert!((mills(-60.0) / 60.0 - 1.0).abs() < 1e-3);
    }
}
