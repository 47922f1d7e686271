//! Dyadic fixed-point interval arithmetic on big integers.
//!
//! An [`Ival`] represents a closed interval `[lo, hi] * 2^-prec` with
//! outward-rounded endpoints. All operations keep the true value inside the
//! interval, which is what lets `tables` certify breaking-point ceilings.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

fn div_floor(num: &BigInt, den: &BigInt) -> BigInt {
    num.div_floor(den)
}

fn div_ceil(num: &BigInt, den: &BigInt) -> BigInt {
    let (q, r) = num.div_mod_floor(den);
    if r.is_zero() {
        q
    } else {
        q + 1
    }
}

/// `floor(q * 2^prec)` for a rational `q`.
pub fn scale_floor(q: &BigRational, prec: u32) -> BigInt {
    div_floor(&(q.numer() << prec), q.denom())
}

/// `ceil(q * 2^prec)` for a rational `q`.
pub fn scale_ceil(q: &BigRational, prec: u32) -> BigInt {
    div_ceil(&(q.numer() << prec), q.denom())
}

/// Closed interval `[lo * 2^-prec, hi * 2^-prec]`.
#[derive(Debug, Clone)]
pub struct Ival {
    pub lo: BigInt,
    pub hi: BigInt,
    pub prec: u32,
}

impl Ival {
    pub fn from_rational(q: &BigRational, prec: u32) -> Self {
        Ival {
            lo: scale_floor(q, prec),
            hi: scale_ceil(q, prec),
            prec,
        }
    }

    pub fn from_rational_pair(lo: &BigRational, hi: &BigRational, prec: u32) -> Self {
        debug_assert!(lo <= hi);
        Ival {
            lo: scale_floor(lo, prec),
            hi: scale_ceil(hi, prec),
            prec,
        }
    }

    pub fn exact(mant: BigInt, prec: u32) -> Self {
        Ival {
            lo: mant.clone(),
            hi: mant,
            prec,
        }
    }

    pub fn zero(prec: u32) -> Self {
        Ival::exact(BigInt::zero(), prec)
    }

    pub fn one_half(prec: u32) -> Self {
        Ival::exact(BigInt::one() << (prec - 1), prec)
    }

    pub fn width(&self) -> BigInt {
        &self.hi - &self.lo
    }

    pub fn lo_rational(&self) -> BigRational {
        BigRational::new(self.lo.clone(), BigInt::one() << self.prec)
    }

    pub fn hi_rational(&self) -> BigRational {
        BigRational::new(self.hi.clone(), BigInt::one() << self.prec)
    }

    pub fn add(&self, other: &Ival) -> Ival {
        debug_assert_eq!(self.prec, other.prec);
        Ival {
            lo: &self.lo + &other.lo,
            hi: &self.hi + &other.hi,
            prec: self.prec,
        }
    }

    pub fn sub(&self, other: &Ival) -> Ival {
        debug_assert_eq!(self.prec, other.prec);
        Ival {
            lo: &self.lo - &other.hi,
            hi: &self.hi - &other.lo,
            prec: self.prec,
        }
    }

    /// Multiply by a nonnegative rational `num/den`, `den > 0`.
    /// Requires a nonnegative interval.
    pub fn mul_ratio(&self, num: &BigInt, den: &BigInt) -> Ival {
        debug_assert!(!self.lo.is_negative());
        debug_assert!(!num.is_negative() && den.is_positive());
        Ival {
            lo: div_floor(&(&self.lo * num), den),
            hi: div_ceil(&(&self.hi * num), den),
            prec: self.prec,
        }
    }

    /// Divide by a positive integer with outward rounding (nonnegative interval).
    pub fn div_uint(&self, d: u64) -> Ival {
        debug_assert!(!self.lo.is_negative());
        let d = BigInt::from(d);
        Ival {
            lo: div_floor(&self.lo, &d),
            hi: div_ceil(&self.hi, &d),
            prec: self.prec,
        }
    }

    /// Product with `other` where `self` is strictly positive; `other` may
    /// have either sign.
    pub fn mul_posleft(&self, other: &Ival) -> Ival {
        debug_assert_eq!(self.prec, other.prec);
        debug_assert!(self.lo.is_positive());
        let scale = BigInt::one() << self.prec;
        let lo_factor = if other.lo.is_negative() {
            &self.hi
        } else {
            &self.lo
        };
        let hi_factor = if other.hi.is_negative() {
            &self.lo
        } else {
            &self.hi
        };
        Ival {
            lo: div_floor(&(lo_factor * &other.lo), &scale),
            hi: div_ceil(&(hi_factor * &other.hi), &scale),
            prec: self.prec,
        }
    }

    /// Square root of a nonnegative interval.
    pub fn sqrt(&self) -> Ival {
        debug_assert!(!self.lo.is_negative());
        let lo = (&self.lo << self.prec).sqrt();
        let hi_base = (&self.hi << self.prec).sqrt();
        let hi = if &hi_base * &hi_base == (&self.hi << self.prec) {
            hi_base
        } else {
            hi_base + 1
        };
        Ival {
            lo,
            hi,
            prec: self.prec,
        }
    }

    /// Reciprocal of a strictly positive interval.
    pub fn recip(&self) -> Ival {
        debug_assert!(self.lo.is_positive());
        let scale2 = BigInt::one() << (2 * self.prec);
        Ival {
            lo: div_floor(&scale2, &self.hi),
            hi: div_ceil(&scale2, &self.lo),
            prec: self.prec,
        }
    }

    /// Widen both endpoints outward by `pad * 2^-prec`.
    pub fn widen(&self, pad: &BigInt) -> Ival {
        debug_assert!(!pad.is_negative());
        Ival {
            lo: &self.lo - pad,
            hi: &self.hi + pad,
            prec: self.prec,
        }
    }
}

/// Rational enclosure of `atan(1/m)` via the alternating Gregory series.
fn atan_inv(m: u64, prec: u32) -> (BigRational, BigRational) {
    let m = BigInt::from(m);
    let m2 = &m * &m;
    let mut power = m.clone(); // m^(2n+1)
    let mut sum = BigRational::zero();
    let eps = BigRational::new(BigInt::one(), BigInt::one() << (prec + 8));
    let mut n: u64 = 0;
    loop {
        let term = BigRational::new(BigInt::one(), &power * BigInt::from(2 * n + 1));
        if n % 2 == 0 {
            sum += &term;
            if term < eps {
                // last added term was positive: sum overestimates
                return (sum.clone() - term, sum);
            }
        } else {
            sum -= &term;
            if term < eps {
                return (sum.clone(), sum + term);
            }
        }
        power *= &m2;
        n += 1;
    }
}

/// Enclosure of pi via Machin's formula.
pub fn pi(prec: u32) -> Ival {
    let (a_lo, a_hi) = atan_inv(5, prec);
    let (b_lo, b_hi) = atan_inv(239, prec);
    let sixteen = BigRational::from(BigInt::from(16));
    let four = BigRational::from(BigInt::from(4));
    let lo = &sixteen * &a_lo - &four * &b_hi;
    let hi = &sixteen * &a_hi - &four * &b_lo;
    Ival::from_rational_pair(&lo, &hi, prec)
}

/// Enclosure of `1/sqrt(2*pi)`.
///
/// Computed once at a generous precision and rounded outward to the
/// requested one; recomputing the Machin series per call dominates table
/// construction otherwise.
pub fn inv_sqrt_2pi(prec: u32) -> Ival {
    const CACHE_PREC: u32 = 768;
    if prec > CACHE_PREC {
        return inv_sqrt_2pi_fresh(prec);
    }
    static CACHE: std::sync::OnceLock<Ival> = std::sync::OnceLock::new();
    let c = CACHE.get_or_init(|| inv_sqrt_2pi_fresh(CACHE_PREC));
    let shift = CACHE_PREC - prec;
    Ival {
        lo: &c.lo >> shift,
        hi: div_ceil(&c.hi, &(BigInt::one() << shift)),
        prec,
    }
}

fn inv_sqrt_2pi_fresh(prec: u32) -> Ival {
    let two_pi = pi(prec).mul_ratio(&BigInt::from(2), &BigInt::one());
    two_pi.sqrt().recip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::ToPrimitive;

    fn approx(iv: &Ival) -> f64 {
        let scale = 2f64.powi(iv.prec as i32);
        iv.lo.to_f64().unwrap() / scale
    }

    #[test]
    fn pi_enclosure_is_tight_and_correct() {
        let p = pi(128);
        assert!(p.width() <= BigInt::from(16));
        let v = approx(&p);
        assert!((v - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn inv_sqrt_2pi_matches_f64() {
        let c = inv_sqrt_2pi(128);
        assert!(c.width() <= BigInt::from(16));
        let v = approx(&c);
        assert!((v - 0.3989422804014327).abs() < 1e-15);
    }

    #[test]
    fn interval_ops_preserve_containment() {
        let a = Ival::from_rational(&BigRational::new(BigInt::from(1), BigInt::from(3)), 64);
        let b = Ival::from_rational(&BigRational::new(BigInt::from(2), BigInt::from(7)), 64);
        let s = a.add(&b);
        let exact = 1.0 / 3.0 + 2.0 / 7.0;
        assert!(approx(&s) <= exact && exact <= approx(&s) + 1e-15);
        let r = a.recip();
        assert!(approx(&r) <= 3.0);
    }

    #[test]
    fn sqrt_brackets_the_root() {
        let two = Ival::exact(BigInt::from(2) << 96, 96);
        let s = two.sqrt();
        let v = approx(&s);
        assert!((v - std::f64::consts::SQRT_2).abs() < 1e-14);
        assert!(s.lo <= s.hi);
    }
}
