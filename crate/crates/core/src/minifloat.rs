//! Bit-exact emulator of an 8-bit floating-point format with a 1/3/4
//! sign/exponent/mantissa split, exponent bias 3, subnormals, and
//! round-to-nearest with ties to even mantissa.
//!
//! All arithmetic is performed on exact rationals and rounded once at the
//! end, so the emulator never depends on the host FPU.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use std::fmt;

const EXP_BIAS: i32 = 3;
const MANT_BITS: u32 = 4;
/// Smallest positive value is 2^-6 (subnormal step).
const MIN_EXP: i32 = -2;
const MAX_EXP: i32 = 3;

/// Canonical quiet NaN produced by arithmetic.
const CANONICAL_NAN: u8 = 0b0111_1000;

/// An 8-bit float, stored as its raw bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MiniFloat8 {
    bits: u8,
}

/// Decoded value of a bit pattern.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// Exact rational value; both zeros decode to rational 0.
    Finite(BigRational),
    PosInf,
    NegInf,
    Nan,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("expected format \"s eee mmmm\", got {0:?}")]
    BadFormat(String),
}

impl MiniFloat8 {
    pub fn from_bits(bits: u8) -> Self {
        MiniFloat8 { bits }
    }

    pub fn to_bits(self) -> u8 {
        self.bits
    }

    pub fn sign_bit(self) -> bool {
        self.bits & 0x80 != 0
    }

    fn exp_bits(self) -> u8 {
        (self.bits >> MANT_BITS) & 0b111
    }

    fn mant_bits(self) -> u8 {
        self.bits & 0b1111
    }

    pub fn is_nan(self) -> bool {
        self.exp_bits() == 0b111 && self.mant_bits() != 0
    }

    pub fn is_inf(self) -> bool {
        self.exp_bits() == 0b111 && self.mant_bits() == 0
    }

    pub fn is_finite(self) -> bool {
        self.exp_bits() != 0b111
    }

    pub fn is_zero(self) -> bool {
        self.bits & 0x7f == 0
    }

    pub fn negate(self) -> Self {
        MiniFloat8 {
            bits: self.bits ^ 0x80,
        }
    }

    /// Decode to the exact represented value.
    pub fn decode(self) -> Decoded {
        if self.is_nan() {
            return Decoded::Nan;
        }
        if self.is_inf() {
            return if self.sign_bit() {
                Decoded::NegInf
            } else {
                Decoded::PosInf
            };
        }
        let mant = BigInt::from(self.mant_bits());
        // Value in units of 2^-6: subnormal mantissa counts directly,
        // normal adds the implicit leading 1 and shifts by the exponent.
        let units: BigInt = if self.exp_bits() == 0 {
            mant
        } else {
            let e = self.exp_bits() as i32 - EXP_BIAS;
            (mant + BigInt::from(16)) << (e - MIN_EXP) as u32
        };
        let signed = if self.sign_bit() { -units } else { units };
        Decoded::Finite(BigRational::new(signed, BigInt::from(64)))
    }

    /// Round an exact rational to the nearest representable value,
    /// ties to even mantissa, overflow to infinity.
    pub fn encode(q: &BigRational) -> Self {
        if q.is_zero() {
            return MiniFloat8::from_bits(0);
        }
        let negative = q.is_negative();
        let mag = q.abs();
        // Anything at or above the midpoint between the largest finite value
        // (15.5) and the next grid step rounds to infinity.
        if mag >= rational(63, 4) {
            let bits = 0b0111_0000 | if negative { 0x80 } else { 0 };
            return MiniFloat8::from_bits(bits);
        }
        // Subnormal / smallest-normal region: grid step 2^-6 up to 2^-2.
        let quarter = BigRational::new(BigInt::one(), BigInt::from(4));
        let bits = if mag < quarter {
            let units = round_half_even(&(&mag * BigRational::from(BigInt::from(64))));
            // units in 0..=16; 16 promotes to the smallest normal.
            let u: u8 = units.try_into().expect("subnormal units fit in u8");
            if u == 16 {
                0b001_0000
            } else {
                u
            }
        } else {
            let mut e = MIN_EXP;
            let two = BigRational::from(BigInt::from(2));
            let mut bound = quarter * &two; // 2^(e+1)
            while mag >= bound && e < MAX_EXP {
                e += 1;
                bound *= &two;
            }
            // scaled mantissa in [16, 32]: mag / 2^(e-4)
            let scale = pow2_rational(4 - e);
            let m = round_half_even(&(&mag * scale));
            let (e, m) = if m == 32 { (e + 1, 16i64) } else { (e, m) };
            if e > MAX_EXP {
                0b111_0000 // infinity
            } else {
                (((e + EXP_BIAS) as u8) << MANT_BITS) | ((m - 16) as u8)
            }
        };
        MiniFloat8::from_bits(if negative { bits | 0x80 } else { bits })
    }

    /// Floating-point addition: exact rational sum, then one rounding.
    pub fn add(self, other: MiniFloat8) -> MiniFloat8 {
        use Decoded::*;
        match (self.decode(), other.decode()) {
            (Nan, _) | (_, Nan) => MiniFloat8::from_bits(CANONICAL_NAN),
            (PosInf, NegInf) | (NegInf, PosInf) => MiniFloat8::from_bits(CANONICAL_NAN),
            (PosInf, _) | (_, PosInf) => MiniFloat8::from_bits(0b0111_0000),
            (NegInf, _) | (_, NegInf) => MiniFloat8::from_bits(0b1111_0000),
            (Finite(a), Finite(b)) => {
                let sum = a + b;
                // Exact zero sums produce +0.
                MiniFloat8::encode(&sum)
            }
        }
    }

    pub fn sub(self, other: MiniFloat8) -> MiniFloat8 {
        self.add(other.negate())
    }

    /// All 256 bit patterns, each exactly once.
    pub fn enumerate_all() -> impl Iterator<Item = MiniFloat8> {
        (0u16..256).map(|b| MiniFloat8::from_bits(b as u8))
    }

    /// Parse the textual form "s eee mmmm".
    pub fn parse(s: &str) -> Result<Self, ParseError> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.len() != 8 || !compact.chars().all(|c| c == '0' || c == '1') {
            return Err(ParseError::BadFormat(s.to_string()));
        }
        Ok(MiniFloat8::from_bits(
            u8::from_str_radix(&compact, 2).unwrap(),
        ))
    }
}

impl fmt::Display for MiniFloat8 {
    /// Emit the textual form "s eee mmmm".
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:03b} {:04b}",
            (self.bits >> 7) & 1,
            self.exp_bits(),
            self.mant_bits()
        )
    }
}

impl fmt::Display for Decoded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decoded::Finite(q) => write!(f, "{}", q),
            Decoded::PosInf => write!(f, "+inf"),
            Decoded::NegInf => write!(f, "-inf"),
            Decoded::Nan => write!(f, "nan"),
        }
    }
}

fn pow2_rational(e: i32) -> BigRational {
    if e >= 0 {
        BigRational::from(BigInt::one() << e as u32)
    } else {
        BigRational::new(BigInt::one(), BigInt::one() << (-e) as u32)
    }
}

/// Round a nonnegative rational to the nearest integer, ties to even.
fn round_half_even(q: &BigRational) -> i64 {
    let floor = q.floor().to_integer();
    let frac = q - BigRational::from(floor.clone());
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let f: i64 = (&floor).try_into().expect("rounded value fits in i64");
    match frac.cmp(&half) {
        std::cmp::Ordering::Less => f,
        std::cmp::Ordering::Greater => f + 1,
        std::cmp::Ordering::Equal => {
            if f % 2 == 0 {
                f
            } else {
                f + 1
            }
        }
    }
}

/// Convenience: encode an integer-valued quantity `num/den`.
pub fn rational(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}
