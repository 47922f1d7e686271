//! Normal CDF/quantile and binomial confidence lower bounds.
//!
//! These are the host-precision statistics the certification pipeline runs
//! on: `phi`/`phi_inv` for the normal distribution, and Hoeffding /
//! Clopper-Pearson one-sided lower confidence bounds for binomial success
//! probabilities.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("quantile argument {0} outside (0, 1)")]
    QuantileDomain(f64),
    #[error("confidence level alpha {0} outside (0, 1)")]
    AlphaDomain(f64),
    #[error("successes {successes} exceed trials {trials}")]
    CountMismatch { successes: u64, trials: u64 },
    #[error("zero trials")]
    ZeroTrials,
}

/// erf on [0, 1] by its Maclaurin series; converges fast for small z.
fn erf_series(z: f64) -> f64 {
    let z2 = z * z;
    let mut term = z;
    let mut sum = z;
    let mut n = 0u32;
    loop {
        n += 1;
        term *= -z2 / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() <= 1e-18 * sum.abs() {
            break;
        }
    }
    sum * 2.0 / PI.sqrt()
}

/// erfc for z >= 1 by the Laplace continued fraction, evaluated with the
/// modified Lentz algorithm.
fn erfc_cf(z: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / z;
    let mut h = d;
    for k in 1..200 {
        // a_k = k/2, b_k = z for odd k, recast as an even/odd ladder
        let a = k as f64 / 2.0;
        d = 1.0 / (z + a * d);
        c = z + a / c;
        let delta = c * d;
        h *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-z * z).exp() / PI.sqrt() * h
}

fn erfc(z: f64) -> f64 {
    if z < 0.0 {
        2.0 - erfc(-z)
    } else if z <= 1.0 {
        1.0 - erf_series(z)
    } else {
        erfc_cf(z)
    }
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal quantile: Acklam's rational approximation followed by two
/// Newton corrections against `phi`, giving near machine precision.
pub fn phi_inv(p: f64) -> Result<f64, StatsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::QuantileDomain(p));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let e = phi(x) - p;
        let u = e / normal_pdf(x);
        x -= u / (1.0 + x * u / 2.0); // Halley step
    }
    Ok(x)
}

/// Hoeffding one-sided lower bound: s/n - sqrt(ln(1/alpha) / (2n)).
pub fn hoeffding_lower(successes: u64, trials: u64, alpha: f64) -> Result<f64, StatsError> {
    check_counts(successes, trials, alpha)?;
    let p_hat = successes as f64 / trials as f64;
    Ok(p_hat - ((1.0 / alpha).ln() / (2.0 * trials as f64)).sqrt())
}

/// ln Gamma by the Lanczos approximation (g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the regularized incomplete beta (Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Clopper-Pearson one-sided lower bound at confidence `1 - alpha`: the `p`
/// with `P(Bin(n, p) >= s) = alpha`, i.e. `I_p(s, n - s + 1) = alpha`.
pub fn clopper_pearson_lower(successes: u64, trials: u64, alpha: f64) -> Result<f64, StatsError> {
    check_counts(successes, trials, alpha)?;
    if successes == 0 {
        return Ok(0.0);
    }
    if successes == trials {
        // I_p(n, 1) = p^n
        return Ok((alpha.ln() / trials as f64).exp());
    }
    let a = successes as f64;
    let b = (trials - successes) as f64 + 1.0;
    // I_p(a, b) is increasing in p; bisect.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if inc_beta(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_counts(successes: u64, trials: u64, alpha: f64) -> Result<(), StatsError> {
    if trials == 0 {
        return Err(StatsError::ZeroTrials);
    }
    if successes > trials {
        return Err(StatsError::CountMismatch { successes, trials });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::AlphaDomain(alpha));
    }
    Ok(())
}

/// Outcome of turning a lower confidence bound into a certificate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Radius {
    /// Lower bound did not clear 1/2; no certificate.
    Abstain,
    /// Certified l2 radius `sigma * phi_inv(p_lower)`.
    Certified(f64),
}

/// Certified radius from a lower bound on the top-class probability.
pub fn certified_radius(sigma: f64, p_lower: f64) -> Radius {
    if p_lower <= 0.5 {
        Radius::Abstain
    } else {
        Radius::Certified(sigma * phi_inv(p_lower).expect("p in (0.5, 1)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_known_values() {
        assert!((phi(0.0) - 0.5).abs() < 1e-16);
        assert!((phi(1.0) - 0.8413447460685429).abs() < 1e-14);
        assert!((phi(-1.96) - 0.024997895148220435).abs() < 1e-14);
        assert!((phi(3.0) - 0.9986501019683699).abs() < 1e-14);
        assert!(phi(-8.0) > 0.0 && phi(-8.0) < 1e-14);
    }

    #[test]
    fn phi_inv_round_trips() {
        for i in 1..999 {
            let p = i as f64 / 1000.0;
            let x = phi_inv(p).unwrap();
            assert!((phi(x) - p).abs() < 1e-13, "p={p}");
        }
        // deep tails
        for &p in &[1e-10, 1e-6, 1.0 - 1e-10] {
            let x = phi_inv(p).unwrap();
            assert!((phi(x) - p).abs() / p.min(1.0 - p) < 1e-8, "p={p}");
        }
    }

    #[test]
    fn phi_inv_rejects_out_of_domain() {
        assert!(phi_inv(0.0).is_err());
        assert!(phi_inv(1.0).is_err());
        assert!(phi_inv(-0.3).is_err());
        assert!(phi_inv(f64::NAN).is_err());
    }

    #[test]
    fn inc_beta_against_closed_forms() {
        // I_x(1, b) = 1 - (1-x)^b
        for &x in &[0.1, 0.4, 0.9] {
            for &b in &[2.0, 5.0, 11.0] {
                let expect = 1.0 - (1.0 - x as f64).powf(b);
                assert!((inc_beta(1.0, b, x) - expect).abs() < 1e-13);
            }
        }
        // I_x(a, 1) = x^a
        assert!((inc_beta(3.0, 1.0, 0.7) - 0.7f64.powi(3)).abs() < 1e-13);
        // symmetry I_x(a,b) = 1 - I_{1-x}(b,a)
        let v = inc_beta(4.5, 2.5, 0.3);
        assert!((v - (1.0 - inc_beta(2.5, 4.5, 0.7))).abs() < 1e-13);
    }

    #[test]
    fn clopper_pearson_golden_values() {
        // all successes: alpha^(1/n)
        let p = clopper_pearson_lower(100_000, 100_000, 0.001).unwrap();
        assert!((p - 0.001f64.powf(1e-5)).abs() < 1e-12);
        assert!((p - 0.9999309248330094).abs() < 1e-10);
        // classic: 9/10 at alpha = 0.05 -> 0.6058
        let p = clopper_pearson_lower(9, 10, 0.05).unwrap();
        assert!((p - 0.6058).abs() < 5e-4, "got {p}");
        // zero successes
        assert_eq!(clopper_pearson_lower(0, 50, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn clopper_pearson_defining_equation() {
        // At the returned p, the binomial upper tail P(X >= s) equals alpha.
        for &(s, n, alpha) in &[(37u64, 50u64, 0.01), (460, 1000, 0.001), (3, 8, 0.05)] {
            let p = clopper_pearson_lower(s, n, alpha).unwrap();
            // exact tail sum
            let mut tail = 0.0;
            for k in s..=n {
                let ln_c = ln_gamma(n as f64 + 1.0)
                    - ln_gamma(k as f64 + 1.0)
                    - ln_gamma((n - k) as f64 + 1.0);
                tail += (ln_c + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp();
            }
            assert!((tail - alpha).abs() < 1e-9, "s={s} n={n}: tail={tail}");
        }
    }

    #[test]
    fn hoeffding_golden_value() {
        let p = hoeffding_lower(99_954, 100_000, 0.001).unwrap();
        let expect = 0.99954 - (1000f64.ln() / 200_000.0).sqrt();
        assert!((p - expect).abs() < 1e-15);
    }

    #[test]
    fn hoeffding_is_looser_than_clopper_pearson_here() {
        let h = hoeffding_lower(99_000, 100_000, 0.001).unwrap();
        let cp = clopper_pearson_lower(99_000, 100_000, 0.001).unwrap();
        assert!(h < cp);
    }

    #[test]
    fn radius_abstains_at_half() {
        assert_eq!(certified_radius(0.5, 0.5), Radius::Abstain);
        assert_eq!(certified_radius(0.5, 0.2), Radius::Abstain);
        match certified_radius(0.5, 0.99) {
            Radius::Certified(r) => assert!((r - 0.5 * 2.3263478740408408).abs() < 1e-10),
            Radius::Abstain => panic!("should certify"),
        }
    }

    #[test]
    fn bound_input_validation() {
        assert!(clopper_pearson_lower(5, 0, 0.05).is_err());
        assert!(clopper_pearson_lower(11, 10, 0.05).is_err());
        assert!(hoeffding_lower(5, 10, 0.0).is_err());
        assert!(hoeffding_lower(5, 10, 1.5).is_err());
    }
}
