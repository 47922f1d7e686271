//! Exact sampling from the discretized normal by thresholding uniform
//! integers against a breaking-point table.
//!
//! A draw maps an `n_bits`-wide uniform integer to a grid offset via binary
//! search; landing exactly on a threshold (or next to an ambiguous one) is a
//! Failure. Offsets are zero-centered, so one table plus shift-and-clamp
//! serves every input intensity — the noise buffer is drawn once and reused
//! across all certified images.

use crate::tables::{BreakingPointTable, GridSpec, TableError};
use std::io::{Read, Write};
use std::path::Path;

const NOISE_MAGIC: &[u8; 8] = b"SNDNOISE";
const NOISE_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("pixel {value} at index {index} exceeds {levels} levels")]
    PixelRange {
        index: usize,
        value: u8,
        levels: u32,
    },
    #[error("NaN at coordinate {0}")]
    NanInput(usize),
    #[error("bad magic (not a noise file)")]
    BadMagic,
    #[error("unsupported noise format version {0}")]
    BadVersion(u16),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("offset {0} outside the grid support")]
    OffsetRange(i64),
    #[error("invalid sample tag {0}")]
    BadTag(u8),
    #[error(transparent)]
    Spec(#[from] TableError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An image on the integer intensity grid `{0, ..., L}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedImage {
    pub pixels: Vec<u8>,
    pub levels: u32,
}

impl QuantizedImage {
    pub fn new(pixels: Vec<u8>, levels: u32) -> Result<Self, SamplerError> {
        for (index, &value) in pixels.iter().enumerate() {
            if value as u32 > levels {
                return Err(SamplerError::PixelRange {
                    index,
                    value,
                    levels,
                });
            }
        }
        Ok(QuantizedImage { pixels, levels })
    }

    pub fn dims(&self) -> usize {
        self.pixels.len()
    }
}

/// One multivariate noise draw: a full offset vector, or Failure if any
/// coordinate landed on a breaking point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiscreteSample {
    Offsets(Vec<i32>),
    Failure,
}

/// A deterministic bank of noise samples, reusable across images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseBuffer {
    pub spec: GridSpec,
    pub seed: u64,
    pub dims: u32,
    pub samples: Vec<DiscreteSample>,
}

/// Counter-based generator: the splitmix64 output function applied to a
/// seed-offset counter. Stateless, so any sample/coordinate pair can be
/// regenerated independently. PRNG quality is a trust assumption documented
/// at the crate level; it is outside the exactness argument.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    pub fn at(&self, counter: u64) -> u64 {
        let mut z = self
            .seed
            .wrapping_add(counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Map one uniform value to a grid offset, or `None` on a Failure event.
///
/// `u` must already be reduced to `n_bits` width. The offset is the index of
/// the threshold interval strictly containing `u`; equality with any stored
/// threshold — or with either neighbor of an ambiguous one — is a Failure.
pub fn draw_offset(u: u128, table: &BreakingPointTable) -> Option<i32> {
    let spec = &table.spec;
    debug_assert!(u < 1u128 << spec.n_bits);
    let body = &table.thresholds[..table.thresholds.len() - 1];
    let idx = body.partition_point(|&t| t <= u);
    if idx > 0 && body[idx - 1] == u {
        return None;
    }
    // ambiguous entries also fail on the value just below the stored one
    let mut j = body.partition_point(|&t| t <= u + 1);
    while j > 0 && body[j - 1] == u + 1 {
        if table.is_ambiguous(j - 1) {
            return None;
        }
        j -= 1;
    }
    Some(idx as i32 - spec.support_radius() as i32)
}

/// Proposition-5 composition: the noisy quantized pixel is
/// `clamp(x + offset, -margin, margin + L)` in grid units.
pub fn shift_clamp(x: u32, offset: i32, spec: &GridSpec) -> i32 {
    let margin = spec.margin as i32;
    (x as i32 + offset).clamp(-margin, margin + spec.levels as i32)
}

/// The quantizer `g_k`: round host floats (normalized units) to the nearest
/// grid step, ties to the even index, then clamp to the extended grid.
pub fn quantize_gk(x: &[f64], spec: &GridSpec) -> Result<Vec<i32>, SamplerError> {
    let margin = spec.margin as i32;
    let hi = margin + spec.levels as i32;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_nan() {
                return Err(SamplerError::NanInput(i));
            }
            let scaled = v * spec.levels as f64;
            let rounded = round_ties_even(scaled);
            let g = if rounded <= -(margin as f64) {
                -margin
            } else if rounded >= hi as f64 {
                hi
            } else {
                rounded as i32
            };
            Ok(g)
        })
        .collect()
}

fn round_ties_even(v: f64) -> f64 {
    let r = v.round(); // half away from zero
    if (v - v.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - v.signum()
    } else {
        r
    }
}

/// Draw `n` samples of `dims` offsets each from one deterministic counter
/// stream. Any coordinate Failure voids the whole sample.
pub fn build_noise_buffer(
    table: &BreakingPointTable,
    dims: u32,
    n: u64,
    seed: u64,
) -> NoiseBuffer {
    let rng = CounterRng::new(seed);
    let shift = 64 - table.spec.n_bits as u32;
    let mut samples = Vec::with_capacity(n as usize);
    for s in 0..n {
        let mut offsets = Vec::with_capacity(dims as usize);
        let mut failed = false;
        for c in 0..dims as u64 {
            let u = (rng.at(s * dims as u64 + c) >> shift) as u128;
            match draw_offset(u, table) {
                Some(o) => offsets.push(o),
                None => {
                    failed = true;
                    break;
                }
            }
        }
        samples.push(if failed {
            DiscreteSample::Failure
        } else {
            DiscreteSample::Offsets(offsets)
        });
    }
    NoiseBuffer {
        spec: table.spec,
        seed,
        dims,
        samples,
    }
}

// --- persistence -----------------------------------------------------------

fn encode_noise(b: &NoiseBuffer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(NOISE_MAGIC);
    buf.extend_from_slice(&NOISE_VERSION.to_le_bytes());
    buf.push(b.spec.n_bits);
    buf.extend_from_slice(&b.spec.levels.to_le_bytes());
    buf.extend_from_slice(&b.spec.margin.to_le_bytes());
    buf.extend_from_slice(&b.spec.sigma_num.to_le_bytes());
    buf.extend_from_slice(&b.spec.sigma_den.to_le_bytes());
    buf.extend_from_slice(&b.seed.to_le_bytes());
    buf.extend_from_slice(&b.dims.to_le_bytes());
    buf.extend_from_slice(&(b.samples.len() as u64).to_le_bytes());
    for s in &b.samples {
        match s {
            DiscreteSample::Failure => buf.push(1),
            DiscreteSample::Offsets(offs) => {
                buf.push(0);
                for &o in offs {
                    buf.extend_from_slice(&o.to_le_bytes());
                }
            }
        }
    }
    let crc = crate::tables::crc64(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn write_noise(b: &NoiseBuffer, path: &Path) -> Result<(), SamplerError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_noise(b))?;
    Ok(())
}

pub fn read_noise(path: &Path) -> Result<NoiseBuffer, SamplerError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 8 {
        return Err(SamplerError::Truncated);
    }
    let (body, crc_bytes) = data.split_at(data.len() - 8);
    let stored = u64::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crate::tables::crc64(body);
    if stored != computed {
        return Err(SamplerError::Checksum { stored, computed });
    }

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], SamplerError> {
        if *pos + n > body.len() {
            return Err(SamplerError::Truncated);
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != NOISE_MAGIC {
        return Err(SamplerError::BadMagic);
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != NOISE_VERSION {
        return Err(SamplerError::BadVersion(version));
    }
    let n_bits = take(&mut pos, 1)?[0];
    let levels = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let margin = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let sigma_num = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let sigma_den = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let spec = GridSpec::new(levels, margin, sigma_num, sigma_den, n_bits)?;
    let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let dims = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());

    let k = spec.support_radius() as i64;
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag = take(&mut pos, 1)?[0];
        match tag {
            1 => samples.push(DiscreteSample::Failure),
            0 => {
                let mut offs = Vec::with_capacity(dims as usize);
                for _ in 0..dims {
                    let o = i32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
                    if (o as i64) < -k || (o as i64) > k {
                        return Err(SamplerError::OffsetRange(o as i64));
                    }
                    offs.push(o);
                }
                samples.push(DiscreteSample::Offsets(offs));
            }
            t => return Err(SamplerError::BadTag(t)),
        }
    }
    Ok(NoiseBuffer {
        spec,
        seed,
        dims,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tables::{build_table_seq, gaussian_cdf_enclosure};
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, Signed, ToPrimitive};
    use proptest::prelude::*;

    fn example5_table() -> BreakingPointTable {
        build_table_seq(GridSpec::new(4, 2, 1, 1, 8).unwrap())
    }

    #[test]
    fn example5_draws() {
        let t = example5_table();
        assert_eq!(draw_offset(10, &t), Some(-6));
        assert_eq!(draw_offset(22, &t), None);
        assert_eq!(draw_offset(255, &t), Some(6));
        assert_eq!(draw_offset(0, &t), Some(-6));
        assert_eq!(draw_offset(23, &t), Some(-5));
        for u in [34u128, 49, 69, 91, 116, 141, 166, 188, 208, 223, 235] {
            assert_eq!(draw_offset(u, &t), None, "u={u}");
        }
    }

    #[test]
    fn draw_is_monotone_in_u() {
        let t = example5_table();
        let mut last = i32::MIN;
        for u in 0u128..256 {
            if let Some(o) = draw_offset(u, &t) {
                assert!(o >= last, "u={u}");
                last = o;
            }
        }
    }

    #[test]
    fn shift_clamp_examples() {
        let spec = GridSpec::new(4, 2, 1, 1, 8).unwrap();
        assert_eq!(shift_clamp(0, 0, &spec), 0);
        assert_eq!(shift_clamp(4, 9, &spec), 6);
        assert_eq!(shift_clamp(0, -9, &spec), -2);
        assert_eq!(shift_clamp(2, 3, &spec), 5);
    }

    #[test]
    fn quantize_gk_behaviour() {
        let spec = GridSpec::new(4, 2, 1, 1, 8).unwrap();
        // exact grid points map to themselves
        assert_eq!(quantize_gk(&[0.25, 1.0, -0.25], &spec).unwrap(), vec![1, 4, -1]);
        // clamping both ways
        assert_eq!(quantize_gk(&[-5.0, 5.0], &spec).unwrap(), vec![-2, 6]);
        // ties to even grid index: 0.375*4 = 1.5 -> 2, 0.625*4 = 2.5 -> 2
        assert_eq!(quantize_gk(&[0.375, 0.625], &spec).unwrap(), vec![2, 2]);
        assert!(matches!(
            quantize_gk(&[f64::NAN], &spec),
            Err(SamplerError::NanInput(0))
        ));
    }

    /// Exact probability interval of the zero-centered offset `i` from the
    /// CDF enclosure (used as the distribution oracle).
    fn offset_mass(spec: &GridSpec, i: i64, w: u32) -> (BigRational, BigRational) {
        let sigma = BigRational::new(
            BigInt::from(spec.sigma_num) * BigInt::from(spec.levels),
            BigInt::from(spec.sigma_den),
        );
        let k = spec.support_radius() as i64;
        let cdf = |num: i64| {
            gaussian_cdf_enclosure(
                &BigRational::new(BigInt::from(num), BigInt::from(2)),
                &sigma,
                w,
            )
        };
        if i == -k {
            let (lo, hi) = cdf(2 * i + 1);
            (lo, hi)
        } else if i == k {
            let (lo, hi) = cdf(2 * i - 1);
            (BigRational::one() - hi, BigRational::one() - lo)
        } else {
            let (lo_hi, hi_hi) = cdf(2 * i + 1);
            let (lo_lo, hi_lo) = cdf(2 * i - 1);
            (lo_hi - hi_lo, hi_hi - lo_lo)
        }
    }

    #[test]
    fn exhaustive_masses_within_two_ulp_of_exact() {
        // |count(u -> i)/2^n - P[t = i]| <= 2/2^n for 8- and 16-bit specs.
        for spec in [
            GridSpec::new(4, 2, 1, 1, 8).unwrap(),
            GridSpec::new(4, 2, 1, 1, 16).unwrap(),
        ] {
            let t = build_table_seq(spec);
            let k = spec.support_radius() as i64;
            let n = 1u128 << spec.n_bits;
            let mut counts = vec![0u64; (2 * k + 1) as usize];
            for u in 0..n {
                if let Some(o) = draw_offset(u, &t) {
                    counts[(o as i64 + k) as usize] += 1;
                }
            }
            let two_ulp = BigRational::new(BigInt::from(2), BigInt::from(n));
            for i in -k..=k {
                let emp = BigRational::new(
                    BigInt::from(counts[(i + k) as usize]),
                    BigInt::from(n),
                );
                let (lo, hi) = offset_mass(&spec, i, spec.n_bits as u32 + 16);
                let dev_hi = (&hi - &emp).abs();
                let dev_lo = (&emp - &lo).abs();
                assert!(
                    dev_hi.max(dev_lo) <= two_ulp,
                    "spec n_bits={} offset {i}",
                    spec.n_bits
                );
            }
        }
    }

    #[test]
    fn shift_clamp_distribution_matches_discretized_normal() {
        // For every intensity x, the exhaustive distribution of
        // shift_clamp(x, draw_offset(u)) conditional on non-Failure stays
        // within TV 13/256 of the exact clamped discretized normal.
        let spec = GridSpec::new(4, 2, 1, 1, 8).unwrap();
        let t = build_table_seq(spec);
        let sigma = BigRational::from(BigInt::from(4));
        let margin = spec.margin as i64;
        let hi_end = margin + spec.levels as i64;
        for x in 0..=spec.levels {
            let mut counts = std::collections::HashMap::new();
            let mut ok = 0u64;
            for u in 0..256u128 {
                if let Some(o) = draw_offset(u, &t) {
                    *counts.entry(shift_clamp(x, o, &spec) as i64).or_insert(0u64) += 1;
                    ok += 1;
                }
            }
            // exact clamped distribution of g_k(x + eps)
            let cdf_mid = |v: i64| {
                let arg = BigRational::new(BigInt::from(2 * (v - x as i64) + 1), BigInt::from(2));
                gaussian_cdf_enclosure(&arg, &sigma, 40)
            };
            let mut tv = 0.0f64;
            for v in -margin..=hi_end {
                let exact = if v == -margin {
                    cdf_mid(v).1
                } else if v == hi_end {
                    BigRational::one() - cdf_mid(v - 1).0
                } else {
                    let (_, hi) = cdf_mid(v);
                    let (lo, _) = cdf_mid(v - 1);
                    hi - lo
                };
                let emp = *counts.get(&v).unwrap_or(&0) as f64 / ok as f64;
                tv += (emp - exact.to_f64().unwrap()).abs();
            }
            tv /= 2.0;
            assert!(tv <= 13.0 / 256.0, "x={x}: tv={tv}");
        }
    }

    #[test]
    fn buffer_is_deterministic_and_respects_failure_rate() {
        let t = example5_table();
        let a = build_noise_buffer(&t, 3, 500, 42);
        let b = build_noise_buffer(&t, 3, 500, 42);
        assert_eq!(a, b);
        let c = build_noise_buffer(&t, 3, 500, 43);
        assert_ne!(a, c);

        // Failure fraction stays near d * per-sample bound (12/256 each).
        let fails = a
            .samples
            .iter()
            .filter(|s| matches!(s, DiscreteSample::Failure))
            .count();
        let bound = 3.0 * 12.0 / 256.0;
        let rate = fails as f64 / 500.0;
        assert!(rate < bound + 0.08, "rate={rate} bound={bound}");
    }

    #[test]
    fn wide_tables_make_failures_vanishing() {
        let t = build_table_seq(GridSpec::new(4, 2, 1, 1, 64).unwrap());
        let b = build_noise_buffer(&t, 8, 2000, 7);
        assert!(b
            .samples
            .iter()
            .all(|s| matches!(s, DiscreteSample::Offsets(_))));
    }

    #[test]
    fn noise_file_round_trip() {
        let t = example5_table();
        let b = build_noise_buffer(&t, 3, 200, 42);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.bin");
        write_noise(&b, &p).unwrap();
        assert_eq!(read_noise(&p).unwrap(), b);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[20] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_noise(&p),
            Err(SamplerError::Checksum { .. })
        ));
    }

    #[test]
    fn image_validation() {
        assert!(QuantizedImage::new(vec![0, 4, 2], 4).is_ok());
        assert!(matches!(
            QuantizedImage::new(vec![0, 5], 4),
            Err(SamplerError::PixelRange { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn draw_offset_monotone_prop(a in 0u128..256, b in 0u128..256) {
            let t = example5_table();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if let (Some(x), Some(y)) = (draw_offset(lo, &t), draw_offset(hi, &t)) {
                prop_assert!(x <= y);
            }
        }

        #[test]
        fn shift_clamp_stays_in_range(x in 0u32..=4, o in -100i32..100) {
            let spec = GridSpec::new(4, 2, 1, 1, 8).unwrap();
            let v = shift_clamp(x, o, &spec);
            prop_assert!((-2..=6).contains(&v));
        }
    }
}
