//! Breaking-point tables for the discretized normal distribution.
//!
//! A table stores, for every grid offset `i` in `[-K, K-1]` with
//! `K = margin + levels`, the value `ceil(2^n_bits * Phi((i+0.5)/levels; sigma))`.
//! A uniform `n_bits`-wide integer thresholded against the table yields an
//! exact sample of the zero-centered discretized normal; landing exactly on a
//! threshold is a Failure event. Every ceiling is certified by an interval
//! enclosure of the CDF computed in integer arithmetic (see [`crate::bigfx`]),
//! so no host floating point enters the construction.

use crate::bigfx::{inv_sqrt_2pi, scale_ceil, Ival};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const MAGIC: &[u8; 8] = b"SNDSMOTH";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("invalid grid spec: {0}")]
    BadSpec(String),
    #[error("bad magic (not a table file)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("thresholds not monotone at entry {0}")]
    NonMonotone(usize),
    #[error("final entry is not 2^n_bits")]
    BadFinalEntry,
    #[error("entry count {0} does not match spec")]
    BadEntryCount(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of a discretized-normal grid.
///
/// `sigma_num / sigma_den` is the noise scale in normalized units (intensity
/// range scaled to `[0, 1]`); internally everything runs in integer grid
/// steps, where the scale is `levels * sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    /// Number of intensity steps `L`; pixel values live on `0..=L`.
    pub levels: u32,
    /// Clamp margin in grid steps: outputs live in `[-margin, margin+L]`.
    pub margin: u32,
    pub sigma_num: u64,
    pub sigma_den: u64,
    /// Width of the uniform samples; one of 8, 16, 32, 64.
    pub n_bits: u8,
}

impl GridSpec {
    pub fn new(
        levels: u32,
        margin: u32,
        sigma_num: u64,
        sigma_den: u64,
        n_bits: u8,
    ) -> Result<Self, TableError> {
        if levels < 1 {
            return Err(TableError::BadSpec("levels must be >= 1".into()));
        }
        if margin < 1 {
            return Err(TableError::BadSpec("margin must be >= 1".into()));
        }
        if sigma_num == 0 || sigma_den == 0 {
            return Err(TableError::BadSpec("sigma must be positive".into()));
        }
        if ![8, 16, 32, 64].contains(&n_bits) {
            return Err(TableError::BadSpec(format!(
                "n_bits must be 8, 16, 32 or 64, got {n_bits}"
            )));
        }
        Ok(GridSpec {
            levels,
            margin,
            sigma_num,
            sigma_den,
            n_bits,
        })
    }

    /// Half-width `K = margin + levels` of the offset support `[-K, K]`.
    pub fn support_radius(&self) -> u32 {
        self.margin + self.levels
    }

    /// Number of table entries: `2K` thresholds plus the final `2^n_bits`.
    pub fn table_len(&self) -> usize {
        2 * self.support_radius() as usize + 1
    }

    /// The standardized integral limit for entry `j`: `(i + 0.5) / (L*sigma)`
    /// with `i = j - K`, as an exact rational `num/den` (`den > 0`).
    fn r_at(&self, j: usize) -> (BigInt, BigInt) {
        let i = j as i64 - self.support_radius() as i64;
        let num = BigInt::from(2 * i + 1) * BigInt::from(self.sigma_den);
        let den = BigInt::from(2u64) * BigInt::from(self.levels) * BigInt::from(self.sigma_num);
        (num, den)
    }
}

/// Immutable, shareable breaking-point table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BreakingPointTable {
    pub spec: GridSpec,
    /// Nondecreasing; `thresholds[j] = ceil(2^n * Phi((j - K + 0.5)/L; sigma))`
    /// for `j < 2K`, and the final entry is exactly `2^n_bits`.
    pub thresholds: Vec<u128>,
    /// Bitset over entries whose enclosure straddled an integer; for those,
    /// both `thresholds[j] - 1` and `thresholds[j]` count as Failures.
    ambiguous: Vec<u64>,
}

impl BreakingPointTable {
    pub fn is_ambiguous(&self, j: usize) -> bool {
        self.ambiguous[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn ambiguous_count(&self) -> usize {
        self.ambiguous.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// All uniform-sample values that trigger a Failure.
    pub fn failure_values(&self) -> BTreeSet<u128> {
        let cap = 1u128 << self.spec.n_bits;
        let mut set = BTreeSet::new();
        for (j, &t) in self.thresholds.iter().enumerate().take(self.thresholds.len() - 1) {
            if t < cap {
                set.insert(t);
            }
            if self.is_ambiguous(j) && t >= 1 {
                set.insert(t - 1);
            }
        }
        set
    }

    /// Exact per-sample failure probability: |failure set| / 2^n_bits.
    pub fn failure_probability(&self) -> BigRational {
        BigRational::new(
            BigInt::from(self.failure_values().len()),
            BigInt::one() << self.spec.n_bits as u32,
        )
    }
}

/// Enclosure of the CDF at a standardized point, specialized so the far tails
/// never force a long series evaluation.
enum CdfEnclosure {
    /// `Phi` lies in `(0, 2^-(w+1)]` for the requested width `2^-w`.
    LowTail,
    /// `Phi` lies in `[1 - 2^-(w+1), 1)`.
    HighTail,
    /// Two-sided dyadic interval.
    Interval(Ival),
}

/// True when `r^2 >= 1.3863 * m`, which certifies the Chernoff bound
/// `Phi(-|r|) <= exp(-r^2/2)/2 <= 2^-(m+1)` (using `ln 2 < 0.693150`).
fn tail_dominates(r_num: &BigInt, r_den: &BigInt, m: u32) -> bool {
    let r2n = r_num * r_num * BigInt::from(100_000u32);
    let r2d = r_den * r_den * BigInt::from(138_630u32) * BigInt::from(m);
    r2n >= r2d
}

/// `S(r) = integral_0^r exp(-t^2/2) dt` for `r >= 0`, as a dyadic interval
/// with absolute width below `2^-(w+8)` (before the constant factor).
///
/// Alternating series `sum (-1)^n r^(2n+1) / (2^n n! (2n+1))`, evaluated with
/// outward-rounded interval terms. The working precision budgets extra bits
/// for the intermediate term growth (terms peak near `exp(r^2/2)`).
fn gauss_integral_series(r_num: &BigInt, r_den: &BigInt, w: u32) -> Ival {
    debug_assert!(!r_num.is_negative());
    let r2_num = r_num * r_num;
    let r2_den = r_den * r_den;
    let r2_ceil: u32 = {
        let q = crate::bigfx::scale_ceil(&BigRational::new(r2_num.clone(), r2_den.clone()), 0);
        q.to_u32().expect("r^2 within u32 after tail cutoff")
    };
    let prec = w + 64 + r2_ceil;
    let eps = BigInt::one() << (prec - (w + 8));

    // term_0 = r
    let mut term = Ival::from_rational(&BigRational::new(r_num.clone(), r_den.clone()), prec);
    let mut sum = term.clone();
    let mut n: u64 = 1;
    loop {
        // term_n = term_{n-1} * r^2 (2n-1) / (2n (2n+1))
        let num = &r2_num * BigInt::from(2 * n - 1);
        let den = &r2_den * BigInt::from(2 * n) * BigInt::from(2 * n + 1);
        term = term.mul_ratio(&num, &den);
        if n % 2 == 1 {
            sum = sum.sub(&term);
        } else {
            sum = sum.add(&term);
        }
        // Alternating remainder bound needs the terms to be decreasing from
        // here on, which holds once r^2 < 2(n+1).
        if term.hi <= eps && &r2_num < &(&r2_den * BigInt::from(2 * (n + 1))) {
            break;
        }
        n += 1;
    }
    sum.widen(&eps)
}

/// CDF enclosure at the standardized point `r = r_num/r_den`, target width
/// `2^-w` (guaranteed by construction; asserted in debug builds).
fn cdf_enclosure_core(r_num: &BigInt, r_den: &BigInt, w: u32) -> CdfEnclosure {
    if r_num.is_zero() {
        return CdfEnclosure::Interval(Ival::one_half(w + 16));
    }
    let negative = r_num.is_negative();
    let abs_num = r_num.abs();
    if tail_dominates(&abs_num, r_den, w + 1) {
        return if negative {
            CdfEnclosure::LowTail
        } else {
            CdfEnclosure::HighTail
        };
    }
    let s = gauss_integral_series(&abs_num, r_den, w + 8);
    let c = inv_sqrt_2pi(s.prec);
    let scaled = c.mul_posleft(&s);
    let half = Ival::one_half(s.prec);
    let iv = if negative {
        half.sub(&scaled)
    } else {
        half.add(&scaled)
    };
    debug_assert!(iv.width() <= BigInt::one() << (iv.prec - w));
    CdfEnclosure::Interval(iv)
}

/// Rational enclosure `[lo, hi]` of `Phi(x; 0, sigma)` with `hi - lo <= 2^-w`.
pub fn gaussian_cdf_enclosure(
    x: &BigRational,
    sigma: &BigRational,
    w: u32,
) -> (BigRational, BigRational) {
    assert!(sigma.is_positive(), "sigma must be positive");
    assert!(w >= 1);
    let r = x / sigma;
    let tiny = BigRational::new(BigInt::one(), BigInt::one() << (w + 1));
    match cdf_enclosure_core(r.numer(), r.denom(), w) {
        CdfEnclosure::LowTail => (BigRational::zero(), tiny),
        CdfEnclosure::HighTail => (BigRational::one() - tiny, BigRational::one()),
        CdfEnclosure::Interval(iv) => (iv.lo_rational(), iv.hi_rational()),
    }
}

/// `ceil(v * 2^n)` for a dyadic endpoint `mant * 2^-prec`.
fn ceil_scaled(mant: &BigInt, prec: u32, n_bits: u8) -> BigInt {
    let q = BigRational::new(mant.clone(), BigInt::one() << prec);
    scale_ceil(&q, n_bits as u32)
}

/// Threshold for one entry: the certified ceiling, or the upper candidate
/// with the ambiguity flag set when the enclosure straddles an integer even
/// after tightening.
fn entry_threshold(spec: &GridSpec, j: usize) -> (u128, bool) {
    let (r_num, r_den) = spec.r_at(j);
    let n = spec.n_bits;
    // Width 2^-(n+16) makes straddling a ~2^-16 accident; tighten twice more
    // before giving up and flagging the entry.
    let mut w = n as u32 + 16;
    for round in 0..3 {
        match cdf_enclosure_core(&r_num, &r_den, w) {
            // Positive and below 2^-(w+1) < 2^-n: the ceiling is exactly 1.
            CdfEnclosure::LowTail => return (1, false),
            // Strictly below 1 and above 1 - 2^-n: the ceiling is 2^n.
            CdfEnclosure::HighTail => return (1u128 << n, false),
            CdfEnclosure::Interval(iv) => {
                let lo = ceil_scaled(&iv.lo, iv.prec, n);
                let hi = ceil_scaled(&iv.hi, iv.prec, n);
                if lo == hi {
                    return (lo.to_u128().expect("threshold fits in u128"), false);
                }
                if round == 2 {
                    return (hi.to_u128().expect("threshold fits in u128"), true);
                }
                w += 32;
            }
        }
    }
    unreachable!()
}

fn assemble(spec: GridSpec, mut thresholds: Vec<u128>, flags: Vec<bool>) -> BreakingPointTable {
    thresholds.push(1u128 << spec.n_bits);
    let mut ambiguous = vec![0u64; thresholds.len().div_ceil(64)];
    for (j, &f) in flags.iter().enumerate() {
        if f {
            ambiguous[j / 64] |= 1 << (j % 64);
        }
    }
    let table = BreakingPointTable {
        spec,
        thresholds,
        ambiguous,
    };
    debug_assert!(table.thresholds.windows(2).all(|p| p[0] <= p[1]));
    table
}

/// Build the table, computing entries in parallel.
#[cfg(feature = "parallel")]
pub fn build_table(spec: GridSpec) -> BreakingPointTable {
    let entries: Vec<(u128, bool)> = (0..spec.table_len() - 1)
        .into_par_iter()
        .map(|j| entry_threshold(&spec, j))
        .collect();
    let (thresholds, flags) = entries.into_iter().unzip();
    assemble(spec, thresholds, flags)
}

#[cfg(not(feature = "parallel"))]
pub fn build_table(spec: GridSpec) -> BreakingPointTable {
    build_table_seq(spec)
}

/// Sequential fallback; same output, used by the benchmarks as a baseline.
#[doc(hidden)]
pub fn build_table_seq(spec: GridSpec) -> BreakingPointTable {
    let entries: Vec<(u128, bool)> = (0..spec.table_len() - 1)
        .map(|j| entry_threshold(&spec, j))
        .collect();
    let (thresholds, flags) = entries.into_iter().unzip();
    assemble(spec, thresholds, flags)
}

/// A-priori failure bound without building a table: at most `L + 2*margin`
/// breaking points out of `2^n_bits` values, with `margin = L * k` for a
/// possibly fractional clamp factor `k = k_num/k_den`.
pub fn a_priori_failure_bound(levels: u32, k_num: u64, k_den: u64, n_bits: u8) -> BigRational {
    let margin2 = BigInt::from(2u64) * BigInt::from(levels) * BigInt::from(k_num);
    let points = BigInt::from(levels) * BigInt::from(k_den) + margin2;
    BigRational::new(points, BigInt::from(k_den) << n_bits as u32)
}

/// Union bound over `dims * samples` independent draws: total failure
/// probability is at most `dims * samples * per_sample` (which dominates
/// `1 - (1 - b)^N` exactly).
pub fn aggregate_failure_bound(per_sample: &BigRational, dims: u64, samples: u64) -> BigRational {
    let n = BigRational::from(BigInt::from(dims) * BigInt::from(samples));
    let bound = per_sample * n;
    bound.min(BigRational::one())
}

// --- persistence -----------------------------------------------------------

/// CRC-64/XZ (reflected, polynomial 0x42F0E1EBA9EA3693).
pub fn crc64(data: &[u8]) -> u64 {
    let mut crc = !0u64;
    for &b in data {
        crc ^= b as u64;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xC96C_5795_D787_0F42
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

fn encode_table(t: &BreakingPointTable) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(t.spec.n_bits);
    buf.extend_from_slice(&t.spec.levels.to_le_bytes());
    buf.extend_from_slice(&t.spec.margin.to_le_bytes());
    buf.extend_from_slice(&t.spec.sigma_num.to_le_bytes());
    buf.extend_from_slice(&t.spec.sigma_den.to_le_bytes());
    buf.extend_from_slice(&(t.thresholds.len() as u64).to_le_bytes());
    let width = t.spec.n_bits as usize / 8;
    for &v in &t.thresholds {
        // the final 2^n_bits entry wraps to 0 in n_bits-wide storage
        buf.extend_from_slice(&v.to_le_bytes()[..width]);
    }
    let flag_bytes = t.thresholds.len().div_ceil(8);
    for byte in 0..flag_bytes {
        let mut b = 0u8;
        for bit in 0..8 {
            let j = byte * 8 + bit;
            if j < t.thresholds.len() && t.is_ambiguous(j) {
                b |= 1 << bit;
            }
        }
        buf.push(b);
    }
    let crc = crc64(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn write_table(t: &BreakingPointTable, path: &Path) -> Result<(), TableError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_table(t))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TableError> {
        if self.pos + n > self.buf.len() {
            return Err(TableError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, TableError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, TableError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TableError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_table(path: &Path) -> Result<BreakingPointTable, TableError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 8 {
        return Err(TableError::Truncated);
    }
    let (body, crc_bytes) = data.split_at(data.len() - 8);
    let stored = u64::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc64(body);
    if stored != computed {
        return Err(TableError::Checksum { stored, computed });
    }

    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(TableError::BadMagic);
    }
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(TableError::BadVersion(version));
    }
    let n_bits = c.take(1)?[0];
    let levels = c.u32()?;
    let margin = c.u32()?;
    let sigma_num = c.u64()?;
    let sigma_den = c.u64()?;
    let spec =
        GridSpec::new(levels, margin, sigma_num, sigma_den, n_bits).map_err(|e| match e {
            TableError::BadSpec(s) => TableError::BadSpec(s),
            other => other,
        })?;
    let count = c.u64()?;
    if count as usize != spec.table_len() {
        return Err(TableError::BadEntryCount(count));
    }
    let width = n_bits as usize / 8;
    let mut thresholds = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let raw = c.take(width)?;
        let mut bytes = [0u8; 16];
        bytes[..width].copy_from_slice(raw);
        thresholds.push(u128::from_le_bytes(bytes));
    }
    // Saturated entries (2^n_bits) wrap to 0 in n_bits-wide storage; a real
    // threshold is a ceiling of a positive probability so 0 never occurs
    // otherwise, making the unwrap unambiguous.
    for v in &mut thresholds {
        if *v == 0 {
            *v = 1u128 << n_bits;
        }
    }
    let last = thresholds.len() - 1;
    if thresholds[last] != 1u128 << n_bits {
        return Err(TableError::BadFinalEntry);
    }
    let flag_bytes = (count as usize).div_ceil(8);
    let flags_raw = c.take(flag_bytes)?.to_vec();
    let mut ambiguous = vec![0u64; (count as usize).div_ceil(64)];
    for j in 0..count as usize {
        if flags_raw[j / 8] >> (j % 8) & 1 == 1 {
            ambiguous[j / 64] |= 1 << (j % 64);
        }
    }
    for (j, pair) in thresholds.windows(2).enumerate() {
        if pair[0] > pair[1] {
            return Err(TableError::NonMonotone(j + 1));
        }
    }
    Ok(BreakingPointTable {
        spec,
        thresholds,
        ambiguous,
    })
}
