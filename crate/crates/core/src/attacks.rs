//! Base classifiers built on the floating-point reachability predicate
//! `(x - a) + a == x`, the anchor-set classifiers derived from it, and the
//! universal perturbation that defeats their certificates.
//!
//! Everything here deliberately runs in host floating point — this module
//! reproduces the *unsound* side of the story. Every arithmetic step executes
//! in one declared [`HostPrecision`] end-to-end; mixing precisions silently
//! changes which inputs are reachable.

use crate::sampler::QuantizedImage;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AttackError {
    #[error("dimension mismatch: anchor has {anchor}, input has {input}")]
    DimensionMismatch { anchor: usize, input: usize },
    #[error("anchor set images disagree on dimension")]
    RaggedAnchors,
    #[error("empty input vector")]
    EmptyInput,
}

/// The single precision every attack computation runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostPrecision {
    Binary32,
    Binary64,
}

/// Reachability predicate `F_a(x) = [(x - a) + a == x]`: does `x` look like
/// something that could have arisen as `a + eps`?
pub fn predicate_fa(x: f64, a: f64, prec: HostPrecision) -> bool {
    match prec {
        HostPrecision::Binary64 => (x - a) + a == x,
        HostPrecision::Binary32 => {
            let (x, a) = (x as f32, a as f32);
            (x - a) + a == x
        }
    }
}

/// A memorized set of quantized images with cached host-float pixel values.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    images: Vec<QuantizedImage>,
    floats: Vec<Vec<f64>>,
}

impl AnchorSet {
    pub fn new(images: Vec<QuantizedImage>) -> Result<Self, AttackError> {
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.dims() != first.dims()) {
                return Err(AttackError::RaggedAnchors);
            }
        }
        // Each pixel value is the host-precision quotient of the exact
        // integers, computed once; re-deriving it through another route can
        // produce a different float and break the construction.
        let floats = images
            .iter()
            .map(|im| {
                let l = im.levels as f64;
                im.pixels.iter().map(|&p| p as f64 / l).collect()
            })
            .collect();
        Ok(AnchorSet { images, floats })
    }

    pub fn empty() -> Self {
        AnchorSet {
            images: Vec::new(),
            floats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.images.first().map_or(0, |im| im.dims())
    }

    pub fn image(&self, i: usize) -> &QuantizedImage {
        &self.images[i]
    }

    /// Host-float pixel vector of anchor `i`.
    pub fn anchor_float(&self, i: usize) -> &[f64] {
        &self.floats[i]
    }
}

/// `G_a(x) = min_i F_{a_i}(x_i)`: every coordinate must be reachable.
pub fn predicate_ga(x: &[f64], anchor: &[f64], prec: HostPrecision) -> Result<bool, AttackError> {
    if x.len() != anchor.len() {
        return Err(AttackError::DimensionMismatch {
            anchor: anchor.len(),
            input: x.len(),
        });
    }
    Ok(x.iter()
        .zip(anchor)
        .all(|(&xi, &ai)| predicate_fa(xi, ai, prec)))
}

/// `H_A(x) = max_a G_a(x)`: reachable from any memorized anchor. Empty sets
/// return 0; evaluation exits on the first match (max over indicators is
/// order-independent).
pub fn classifier_ha(x: &[f64], set: &AnchorSet, prec: HostPrecision) -> Result<bool, AttackError> {
    for i in 0..set.len() {
        if predicate_ga(x, set.anchor_float(i), prec)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// The composite classifier: 1 if `x` reaches a label-1 anchor, or if it
/// reaches no label-0 anchor and its first coordinate clears 127/L.
pub fn classifier_m(
    x: &[f64],
    label0: &AnchorSet,
    label1: &AnchorSet,
    levels: u32,
    prec: HostPrecision,
) -> Result<bool, AttackError> {
    if x.is_empty() {
        return Err(AttackError::EmptyInput);
    }
    if classifier_ha(x, label1, prec)? {
        return Ok(true);
    }
    if classifier_ha(x, label0, prec)? {
        return Ok(false);
    }
    let threshold = match prec {
        HostPrecision::Binary64 => x[0] > 127.0 / levels as f64,
        HostPrecision::Binary32 => (x[0] as f32) > 127.0f32 / levels as f32,
    };
    Ok(threshold)
}

/// Perturbation direction for [`universal_perturbation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaSign {
    Positive,
    Negative,
}

/// The universal perturbation `p = (alpha, 1/L, 1/L, ...)` with
/// `alpha = sign * (240/L)/L`. For d = 3072, L = 255 its l2 norm is about
/// 0.217, well under 1.
pub fn universal_perturbation(d: usize, sign: AlphaSign, levels: u32) -> Vec<f64> {
    let l = levels as f64;
    let alpha = match sign {
        AlphaSign::Positive => (240.0 / l) / l,
        AlphaSign::Negative => -(240.0 / l) / l,
    };
    let mut p = vec![1.0 / l; d];
    p[0] = alpha;
    p
}

/// Monte-Carlo estimate of `P[exists eps2 : a + eps1 == b + eps2]`, where
/// existence is decided by the round-trip predicate on `t = a + eps1`.
/// Continuous Gaussian noise from the host generator — unsound by design.
pub fn overlap_probability(
    a: u8,
    b: u8,
    levels: u32,
    sigma: f64,
    trials: u64,
    seed: u64,
    prec: HostPrecision,
) -> f64 {
    let l = levels as f64;
    let (af, bf) = (a as f64 / l, b as f64 / l);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..trials {
        let eps: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            * sigma;
        let t = match prec {
            HostPrecision::Binary64 => af + eps,
            HostPrecision::Binary32 => (af as f32 + eps as f32) as f64,
        };
        if predicate_fa(t, bf, prec) {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

/// Seeded standard-normal vector, scaled by sigma (the unsound pipeline's
/// noise source).
pub fn gaussian_noise(dims: usize, sigma: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    (0..dims)
        .map(|_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * sigma
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use HostPrecision::{Binary32, Binary64};

    const P64: HostPrecision = Binary64;

    fn anchor_const(value: u8, d: usize) -> QuantizedImage {
        QuantizedImage::new(vec![value; d], 255).unwrap()
    }

    #[test]
    fn self_reachability() {
        for prec in [Binary64, Binary32] {
            for q in [0u8, 1, 127, 210, 255] {
                let a = q as f64 / 255.0;
                assert!(predicate_fa(a, a, prec));
            }
        }
    }

    #[test]
    fn listing_scenario_rates() {
        let a = 210.0 / 255.0;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 100_000;
        let mut at_zero = 0u64;
        let mut at_anchor = 0u64;
        for _ in 0..n {
            let eps =
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * 0.5;
            if predicate_fa(0.0 + eps, a, P64) {
                at_zero += 1;
            }
            let eps =
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * 0.5;
            if predicate_fa(a + eps, a, P64) {
                at_anchor += 1;
            }
        }
        let p_zero = at_zero as f64 / n as f64;
        assert!((p_zero - 0.46).abs() < 0.02, "p_zero={p_zero}");
        assert_eq!(at_anchor, n, "reachability from the anchor itself");
    }

    #[test]
    fn near_identity_failures_below_1e6() {
        // predicate_fa(a + e, a) can fail only via the rare rounding case of
        // the host near-identity; measure across random anchors and noise.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let trials = 10_000_000u64;
        let mut failures = 0u64;
        for i in 0..trials {
            let a = (i % 256) as f64 / 255.0;
            let eps =
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * 1.0;
            let x = a + eps;
            if !predicate_fa(x, a, P64) {
                failures += 1;
            }
        }
        let rate = failures as f64 / trials as f64;
        assert!(rate < 1e-6, "failure rate {rate}");
    }

    #[test]
    fn ga_at_anchor_and_perturbed() {
        let d = 3072;
        let mut pixels = vec![0u8; d];
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for p in pixels.iter_mut() {
            *p = 32 + (<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                .abs()
                * 40.0) as u8;
        }
        let a = QuantizedImage::new(pixels.clone(), 255).unwrap();
        let af: Vec<f64> = a.pixels.iter().map(|&p| p as f64 / 255.0).collect();

        // a' = a with +1 level at 512 positions, re-quantized
        let mut pert = pixels.clone();
        for i in (0..d).step_by(6).take(512) {
            pert[i] = pert[i].saturating_add(1);
        }
        let apf: Vec<f64> = pert.iter().map(|&p| p as f64 / 255.0).collect();

        let trials = 100;
        let mut hit_anchor = 0;
        let mut hit_pert = 0;
        for _ in 0..trials {
            let noise = gaussian_noise(d, 1.0, &mut rng);
            let x: Vec<f64> = af.iter().zip(&noise).map(|(v, e)| v + e).collect();
            if predicate_ga(&x, &af, P64).unwrap() {
                hit_anchor += 1;
            }
            let xp: Vec<f64> = apf.iter().zip(&noise).map(|(v, e)| v + e).collect();
            if predicate_ga(&xp, &af, P64).unwrap() {
                hit_pert += 1;
            }
        }
        // E G_a(a + eps) ~ 1; E G_a(a' + eps) <= 0.2
        assert!(hit_anchor as f64 / trials as f64 > 0.95);
        assert!(hit_pert as f64 / trials as f64 <= 0.2);
    }

    #[test]
    fn ga_dimension_mismatch() {
        let a = [0.5, 0.5];
        assert_eq!(
            predicate_ga(&[0.5], &a, P64),
            Err(AttackError::DimensionMismatch {
                anchor: 2,
                input: 1
            })
        );
    }

    #[test]
    fn ha_empty_and_membership() {
        let set = AnchorSet::new(vec![anchor_const(10, 4), anchor_const(200, 4)]).unwrap();
        let x: Vec<f64> = set.anchor_float(1).to_vec();
        assert!(classifier_ha(&x, &set, P64).unwrap());
        assert!(!classifier_ha(&x, &AnchorSet::empty(), P64).unwrap());
    }

    #[test]
    fn ha_monotone_and_order_invariant() {
        let a = anchor_const(10, 4);
        let b = anchor_const(200, 4);
        let small = AnchorSet::new(vec![a.clone()]).unwrap();
        let big_fwd = AnchorSet::new(vec![a.clone(), b.clone()]).unwrap();
        let big_rev = AnchorSet::new(vec![b, a]).unwrap();
        let x = vec![10.0 / 255.0; 4];
        assert!(classifier_ha(&x, &small, P64).unwrap());
        assert!(classifier_ha(&x, &big_fwd, P64).unwrap());
        assert_eq!(
            classifier_ha(&x, &big_fwd, P64).unwrap(),
            classifier_ha(&x, &big_rev, P64).unwrap()
        );
    }

    #[test]
    fn m_branch_logic() {
        // Intensity 33 fails the round trip against anchor value 1, and 98
        // fails against 33, so the vectors below provably reach neither set.
        let a0 = AnchorSet::new(vec![anchor_const(33, 4)]).unwrap();
        let a1 = AnchorSet::new(vec![anchor_const(1, 4)]).unwrap();
        assert!(!predicate_fa(33.0 / 255.0, 1.0 / 255.0, P64));
        assert!(!predicate_fa(98.0 / 255.0, 33.0 / 255.0, P64));
        // member of A1 -> 1
        let x1: Vec<f64> = a1.anchor_float(0).to_vec();
        assert!(classifier_m(&x1, &a0, &a1, 255, P64).unwrap());
        // member of A0 -> 0 (the A0 hit blocks the threshold branch)
        let x0: Vec<f64> = a0.anchor_float(0).to_vec();
        assert!(!classifier_m(&x0, &a0, &a1, 255, P64).unwrap());
        // reaches neither -> threshold on the first coordinate
        let q = |v: u32| v as f64 / 255.0;
        let lo = vec![q(100), q(33), q(98), q(1)];
        let hi = vec![q(200), q(33), q(98), q(1)];
        assert!(!classifier_m(&lo, &a0, &a1, 255, P64).unwrap());
        assert!(classifier_m(&hi, &a0, &a1, 255, P64).unwrap());
        assert_eq!(
            classifier_m(&[], &a0, &a1, 255, P64),
            Err(AttackError::EmptyInput)
        );
    }

    #[test]
    fn perturbation_norm() {
        let p = universal_perturbation(3072, AlphaSign::Positive, 255);
        assert_eq!(p.len(), 3072);
        assert_eq!(p[0], (240.0 / 255.0) / 255.0);
        assert_eq!(p[1], 1.0 / 255.0);
        let norm: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.21735).abs() < 1e-4);
        assert!(norm <= 1.0);

        let m = universal_perturbation(1, AlphaSign::Negative, 255);
        assert_eq!(m, vec![-(240.0 / 255.0) / 255.0]);
    }

    #[test]
    fn point_perturbation_leaves_reachability_intact() {
        // At the perturbed point itself, the per-coordinate round trip still
        // holds for every intensity (the subtraction is exact by Sterbenz's
        // lemma for nearby values); the perturbation only bites through the
        // noisy samples, which the next test demonstrates.
        for prec in [Binary64, Binary32] {
            for q in 0..=255u32 {
                let a = q as f64 / 255.0;
                let x = a + 1.0 / 255.0;
                assert!(predicate_fa(x, a, prec), "q={q} {prec:?}");
                let alpha = (240.0 / 255.0) / 255.0;
                assert!(predicate_fa(a + alpha, a, prec), "alpha q={q} {prec:?}");
            }
        }
    }

    #[test]
    fn noisy_perturbed_samples_break_reachability() {
        // Per-coordinate: noise added on top of the perturbed pixel fails
        // the round trip a few percent of the time, so over thousands of
        // coordinates the anchor classifier loses the perturbed point.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let trials = 20_000;
        let mut total_fail = 0u64;
        let qs = [17u32, 34, 85, 187];
        for &q in &qs {
            let a = q as f64 / 255.0;
            let ap = a + 1.0 / 255.0;
            for _ in 0..trials {
                let eps =
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                if !predicate_fa(ap + eps, a, P64) {
                    total_fail += 1;
                }
            }
        }
        let fail_rate = total_fail as f64 / (trials * qs.len() as u64) as f64;
        assert!(fail_rate > 0.01, "fail rate {fail_rate}");
        // over 3072 coordinates the survival probability is negligible
        let survive = (1.0 - fail_rate).powi(3072);
        assert!(survive < 1e-9);
    }

    #[test]
    fn overlap_probability_behaviour() {
        // a == b: eps2 = eps1 always exists
        assert_eq!(overlap_probability(42, 42, 255, 1.0, 20_000, 1, P64), 1.0);
        // minimizing over nearby b drops the overlap below 0.99
        let a = 5u8;
        let mut best = 1.0f64;
        for b in [3u8, 4, 5, 6, 7] {
            let p = overlap_probability(a, b, 255, 1.0, 100_000, 7, P64);
            assert!((0.0..=1.0).contains(&p));
            best = best.min(p);
        }
        assert!(best < 0.99, "minimized overlap {best}");
    }

    #[test]
    fn results_are_reproducible() {
        let x = overlap_probability(9, 11, 255, 0.5, 50_000, 123, P64);
        let y = overlap_probability(9, 11, 255, 0.5, 50_000, 123, P64);
        assert_eq!(x, y);
    }
}
