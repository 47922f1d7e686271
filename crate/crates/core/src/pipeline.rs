//! End-to-end certification runners: the standard Monte-Carlo procedure with
//! continuous host-float noise (unsound under floating point), and the sound
//! variant driven by exact discrete noise from a breaking-point table.
//!
//! Both share the same two-phase shape: a selection pass picks the candidate
//! class, an independent bounding pass lower-bounds its success probability,
//! and the certified radius is `sigma * phi_inv(p_lower)`.

use crate::attacks::{
    classifier_ha, classifier_m, gaussian_noise, predicate_fa, predicate_ga, AnchorSet,
    AttackError, HostPrecision,
};
use crate::sampler::{
    build_noise_buffer, shift_clamp, DiscreteSample, NoiseBuffer, QuantizedImage, SamplerError,
};
use crate::stats::{
    certified_radius, clopper_pearson_lower, hoeffding_lower, Radius, StatsError,
};
use crate::tables::BreakingPointTable;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::io::{Read, Write};
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const IMAGES_MAGIC: &[u8; 7] = b"QIMGSET";

/// Table-1-style radius grid for certified-accuracy summaries.
pub const RADIUS_GRID: [f64; 9] = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("noise buffer spec does not match table spec")]
    SpecMismatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("images disagree on dimension or levels")]
    RaggedImages,
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("bad magic (not an image-set file)")]
    BadMagic,
    #[error("file truncated")]
    Truncated,
    #[error("CSV parse error at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The deterministic base classifiers the pipelines can smooth.
#[derive(Debug, Clone)]
pub enum ClassifierRef {
    /// Scalar reachability predicate `F_a` (d = 1).
    FaScalar { a: f64 },
    /// `F_{a,i}`: the scalar predicate applied to one coordinate.
    FaCoord { a: f64, coord: usize },
    /// All-coordinate reachability against one anchor.
    Ga { anchor: Vec<f64> },
    /// Reachability against any anchor in a set.
    Ha { set: AnchorSet },
    /// The composite classifier from the certificate-breaking construction.
    M {
        label0: AnchorSet,
        label1: AnchorSet,
        levels: u32,
    },
    /// Mean intensity above a threshold — a benign classifier with no
    /// floating-point pathology, for sound/unsound comparisons.
    ToyThreshold { theta: f64 },
    Constant { value: bool },
}

impl ClassifierRef {
    pub fn eval(&self, x: &[f64], prec: HostPrecision) -> Result<bool, PipelineError> {
        Ok(match self {
            ClassifierRef::FaScalar { a } => {
                if x.len() != 1 {
                    return Err(PipelineError::DimMismatch {
                        expected: 1,
                        got: x.len(),
                    });
                }
                predicate_fa(x[0], *a, prec)
            }
            ClassifierRef::FaCoord { a, coord } => {
                if *coord >= x.len() {
                    return Err(PipelineError::DimMismatch {
                        expected: *coord + 1,
                        got: x.len(),
                    });
                }
                predicate_fa(x[*coord], *a, prec)
            }
            ClassifierRef::Ga { anchor } => predicate_ga(x, anchor, prec)?,
            ClassifierRef::Ha { set } => classifier_ha(x, set, prec)?,
            ClassifierRef::M {
                label0,
                label1,
                levels,
            } => classifier_m(x, label0, label1, *levels, prec)?,
            ClassifierRef::ToyThreshold { theta } => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                mean > *theta
            }
            ClassifierRef::Constant { value } => *value,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Class0,
    Class1,
    Abstain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Unsound,
    Sound,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Unsound => "unsound",
            Method::Sound => "sound",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Hoeffding,
    ClopperPearson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificationOutcome {
    pub prediction: Prediction,
    /// Lower confidence bound on the candidate class probability.
    pub p_lower: f64,
    /// Present exactly when the prediction is not Abstain.
    pub radius: Option<f64>,
    /// Bounding-phase votes `[class 0, class 1]` (failed samples excluded).
    pub counts: [u64; 2],
    pub failures: u64,
    pub method: Method,
    pub sigma: f64,
    pub alpha: f64,
    pub n0: u64,
    pub n: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub bound: BoundKind,
    pub seed: u64,
    pub prec: HostPrecision,
}

fn lower_bound(bound: BoundKind, s: u64, n: u64, alpha: f64) -> Result<f64, StatsError> {
    match bound {
        BoundKind::Hoeffding => hoeffding_lower(s, n, alpha),
        BoundKind::ClopperPearson => clopper_pearson_lower(s, n, alpha),
    }
}

fn finish(
    candidate: bool,
    s: u64,
    counts: [u64; 2],
    failures: u64,
    sigma: f64,
    method: Method,
    opts: &CertifyOptions,
) -> Result<CertificationOutcome, PipelineError> {
    let p_lower = lower_bound(opts.bound, s, opts.n, opts.alpha)?;
    let (prediction, radius) = match certified_radius(sigma, p_lower) {
        Radius::Abstain => (Prediction::Abstain, None),
        Radius::Certified(r) => (
            if candidate {
                Prediction::Class1
            } else {
                Prediction::Class0
            },
            Some(r),
        ),
    };
    Ok(CertificationOutcome {
        prediction,
        p_lower,
        radius,
        counts,
        failures,
        method,
        sigma,
        alpha: opts.alpha,
        n0: opts.n0,
        n: opts.n,
    })
}

/// The standard certification procedure: continuous Gaussian noise in host
/// floats. This is the *unsound* baseline whose certificates the reachability
/// classifiers defeat.
pub fn certify_unsound(
    f: &ClassifierRef,
    x: &[f64],
    sigma: f64,
    opts: &CertifyOptions,
) -> Result<CertificationOutcome, PipelineError> {
    validate_opts(opts)?;
    if sigma <= 0.0 {
        return Err(PipelineError::BadParam("sigma must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let sample = |rng: &mut ChaCha12Rng| -> Result<bool, PipelineError> {
        let noise = gaussian_noise(x.len(), sigma, rng);
        let noisy: Vec<f64> = x.iter().zip(&noise).map(|(v, e)| v + e).collect();
        f.eval(&noisy, opts.prec)
    };

    // selection phase
    let mut ones = 0u64;
    for _ in 0..opts.n0 {
        if sample(&mut rng)? {
            ones += 1;
        }
    }
    let candidate = ones * 2 > opts.n0;

    // bounding phase on fresh draws from the same stream
    let mut counts = [0u64; 2];
    for _ in 0..opts.n {
        let hit = sample(&mut rng)?;
        counts[hit as usize] += 1;
    }
    let s = counts[candidate as usize];
    finish(candidate, s, counts, 0, sigma, Method::Unsound, opts)
}

/// The sound certification procedure: every sample is the classifier applied
/// to `shift_clamp(x, offsets)/L`, with exact discrete noise from the table.
/// Failed samples count against the candidate class — a Failure can never
/// increase `p_lower`.
pub fn certify_sound(
    f: &ClassifierRef,
    x: &QuantizedImage,
    table: &BreakingPointTable,
    buffer0: &NoiseBuffer,
    buffer: &NoiseBuffer,
    opts: &CertifyOptions,
) -> Result<CertificationOutcome, PipelineError> {
    validate_opts(opts)?;
    let spec = &table.spec;
    if buffer0.spec != *spec || buffer.spec != *spec {
        return Err(PipelineError::SpecMismatch);
    }
    if buffer0.dims as usize != x.dims() || buffer.dims as usize != x.dims() {
        return Err(PipelineError::DimMismatch {
            expected: x.dims(),
            got: buffer.dims as usize,
        });
    }
    if x.levels != spec.levels {
        return Err(PipelineError::SpecMismatch);
    }
    if (buffer0.samples.len() as u64) < opts.n0 || (buffer.samples.len() as u64) < opts.n {
        return Err(PipelineError::BadParam(
            "noise buffer shorter than sample count".into(),
        ));
    }
    let l = spec.levels as f64;
    let eval_sample = |s: &DiscreteSample| -> Result<Option<bool>, PipelineError> {
        match s {
            DiscreteSample::Failure => Ok(None),
            DiscreteSample::Offsets(offs) => {
                let noisy: Vec<f64> = x
                    .pixels
                    .iter()
                    .zip(offs)
                    .map(|(&p, &o)| shift_clamp(p as u32, o, spec) as f64 / l)
                    .collect();
                f.eval(&noisy, opts.prec).map(Some)
            }
        }
    };

    // selection phase: failures vote for neither class
    let mut ones = 0u64;
    let mut sel_ok = 0u64;
    for s in &buffer0.samples[..opts.n0 as usize] {
        if let Some(hit) = eval_sample(s)? {
            sel_ok += 1;
            if hit {
                ones += 1;
            }
        }
    }
    let candidate = ones * 2 > sel_ok;

    // bounding phase
    let mut counts = [0u64; 2];
    let mut failures = 0u64;
    for s in &buffer.samples[..opts.n as usize] {
        match eval_sample(s)? {
            None => failures += 1,
            Some(hit) => counts[hit as usize] += 1,
        }
    }
    let s = counts[candidate as usize];
    let sigma = spec.sigma_num as f64 / spec.sigma_den as f64;
    finish(candidate, s, counts, failures, sigma, Method::Sound, opts)
}

fn validate_opts(opts: &CertifyOptions) -> Result<(), PipelineError> {
    if opts.n0 == 0 || opts.n == 0 {
        return Err(PipelineError::BadParam(
            "sample counts must be positive".into(),
        ));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(PipelineError::BadParam("alpha must be in (0,1)".into()));
    }
    Ok(())
}

/// How [`run_dataset`] drives the certification.
pub enum MethodConfig<'a> {
    Unsound { sigma: f64 },
    Sound { table: &'a BreakingPointTable },
}

#[derive(Debug, Clone)]
pub struct DatasetRun {
    pub outcomes: Vec<CertificationOutcome>,
    /// `(radius, fraction of images certified at radius or beyond)` over
    /// [`RADIUS_GRID`].
    pub summary: Vec<(f64, f64)>,
}

/// Certify every image. For the sound method the noise buffers are drawn
/// once and shared across all images; per-image work runs in parallel.
pub fn run_dataset(
    images: &[QuantizedImage],
    f: &ClassifierRef,
    method: &MethodConfig<'_>,
    opts: &CertifyOptions,
) -> Result<DatasetRun, PipelineError> {
    if let Some(first) = images.first() {
        if images
            .iter()
            .any(|im| im.dims() != first.dims() || im.levels != first.levels)
        {
            return Err(PipelineError::RaggedImages);
        }
    }
    let outcomes = match method {
        MethodConfig::Unsound { sigma } => {
            let jobs: Vec<(usize, &QuantizedImage)> = images.iter().enumerate().collect();
            map_jobs(&jobs, |(i, im)| {
                let x: Vec<f64> = im
                    .pixels
                    .iter()
                    .map(|&p| p as f64 / im.levels as f64)
                    .collect();
                // derive a per-image seed so images are independent
                let per = CertifyOptions {
                    seed: opts.seed.wrapping_add(*i as u64),
                    ..*opts
                };
                certify_unsound(f, &x, *sigma, &per)
            })?
        }
        MethodConfig::Sound { table } => {
            let dims = images.first().map_or(0, |im| im.dims()) as u32;
            let buffer0 = build_noise_buffer(table, dims, opts.n0, opts.seed);
            let buffer = build_noise_buffer(
                table,
                dims,
                opts.n,
                opts.seed.wrapping_add(0xD1B5_4A32_D192_ED03),
            );
            let jobs: Vec<(usize, &QuantizedImage)> = images.iter().enumerate().collect();
            map_jobs(&jobs, |(_, im)| {
                certify_sound(f, im, table, &buffer0, &buffer, opts)
            })?
        }
    };
    let summary = summarize(&outcomes);
    Ok(DatasetRun { outcomes, summary })
}

#[cfg(feature = "parallel")]
fn map_jobs<T: Sync, F>(jobs: &[T], f: F) -> Result<Vec<CertificationOutcome>, PipelineError>
where
    F: Fn(&T) -> Result<CertificationOutcome, PipelineError> + Sync + Send,
{
    jobs.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_jobs<T: Sync, F>(jobs: &[T], f: F) -> Result<Vec<CertificationOutcome>, PipelineError>
where
    F: Fn(&T) -> Result<CertificationOutcome, PipelineError> + Sync + Send,
{
    jobs.iter().map(f).collect()
}

/// Fraction of outcomes certified at each grid radius.
pub fn summarize(outcomes: &[CertificationOutcome]) -> Vec<(f64, f64)> {
    RADIUS_GRID
        .iter()
        .map(|&r| {
            let hits = outcomes
                .iter()
                .filter(|o| o.radius.is_some_and(|rad| rad >= r))
                .count();
            let frac = if outcomes.is_empty() {
                0.0
            } else {
                hits as f64 / outcomes.len() as f64
            };
            (r, frac)
        })
        .collect()
}

// --- CSV -------------------------------------------------------------------

pub const CSV_HEADER: &str = "index,prediction,p_lower,radius,count0,count1,failures,method,sigma,alpha";

pub fn emit_csv(outcomes: &[CertificationOutcome]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, o) in outcomes.iter().enumerate() {
        let pred = match o.prediction {
            Prediction::Class0 => "0",
            Prediction::Class1 => "1",
            Prediction::Abstain => "abstain",
        };
        let radius = o.radius.map_or(String::new(), |r| format!("{r}"));
        out.push_str(&format!(
            "{i},{pred},{},{radius},{},{},{},{},{},{}\n",
            o.p_lower,
            o.counts[0],
            o.counts[1],
            o.failures,
            o.method.as_str(),
            o.sigma,
            o.alpha
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<CertificationOutcome>, PipelineError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(PipelineError::Csv {
                line: 1,
                reason: "missing or wrong header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(PipelineError::Csv {
                line: idx + 1,
                reason: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        let err = |reason: &str| PipelineError::Csv {
            line: idx + 1,
            reason: reason.into(),
        };
        let prediction = match fields[1] {
            "0" => Prediction::Class0,
            "1" => Prediction::Class1,
            "abstain" => Prediction::Abstain,
            _ => return Err(err("bad prediction")),
        };
        let radius = if fields[3].is_empty() {
            None
        } else {
            Some(fields[3].parse().map_err(|_| err("bad radius"))?)
        };
        if radius.is_some() == (prediction == Prediction::Abstain) {
            return Err(err("radius must be present exactly for non-abstain rows"));
        }
        let method = match fields[7] {
            "unsound" => Method::Unsound,
            "sound" => Method::Sound,
            _ => return Err(err("bad method")),
        };
        out.push(CertificationOutcome {
            prediction,
            p_lower: fields[2].parse().map_err(|_| err("bad p_lower"))?,
            radius,
            counts: [
                fields[4].parse().map_err(|_| err("bad count0"))?,
                fields[5].parse().map_err(|_| err("bad count1"))?,
            ],
            failures: fields[6].parse().map_err(|_| err("bad failures"))?,
            method,
            sigma: fields[8].parse().map_err(|_| err("bad sigma"))?,
            alpha: fields[9].parse().map_err(|_| err("bad alpha"))?,
            n0: 0,
            n: 0,
        });
    }
    Ok(out)
}

// --- image sets ------------------------------------------------------------

pub fn write_images(images: &[QuantizedImage], path: &Path) -> Result<(), PipelineError> {
    let (dims, levels) = match images.first() {
        Some(im) => (im.dims(), im.levels),
        None => (0, 255),
    };
    if images
        .iter()
        .any(|im| im.dims() != dims || im.levels != levels)
    {
        return Err(PipelineError::RaggedImages);
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(IMAGES_MAGIC);
    buf.extend_from_slice(&(dims as u32).to_le_bytes());
    buf.extend_from_slice(&levels.to_le_bytes());
    buf.extend_from_slice(&(images.len() as u64).to_le_bytes());
    for im in images {
        buf.extend_from_slice(&im.pixels);
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_images(path: &Path) -> Result<Vec<QuantizedImage>, PipelineError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 7 + 4 + 4 + 8 {
        return Err(PipelineError::Truncated);
    }
    if &data[..7] != IMAGES_MAGIC {
        return Err(PipelineError::BadMagic);
    }
    let dims = u32::from_le_bytes(data[7..11].try_into().unwrap()) as usize;
    let levels = u32::from_le_bytes(data[11..15].try_into().unwrap());
    let count = u64::from_le_bytes(data[15..23].try_into().unwrap()) as usize;
    let body = &data[23..];
    if body.len() != dims * count {
        return Err(PipelineError::Truncated);
    }
    let mut images = Vec::with_capacity(count);
    for c in 0..count {
        let pixels = body[c * dims..(c + 1) * dims].to_vec();
        images.push(QuantizedImage::new(pixels, levels)?);
    }
    Ok(images)
}

/// Deterministic synthetic image set: uniform pixels from a counter stream.
pub fn gen_images(count: usize, dims: usize, levels: u32, seed: u64) -> Vec<QuantizedImage> {
    let rng = crate::sampler::CounterRng::new(seed);
    (0..count)
        .map(|i| {
            let pixels = (0..dims)
                .map(|j| (rng.at((i * dims + j) as u64) % (levels as u64 + 1)) as u8)
                .collect();
            QuantizedImage::new(pixels, levels).expect("generated pixels in range")
        })
        .collect()
}

/// Synthetic anchors for the desk-scale certificate-breaking demo: the first
/// pixel encodes the label (255 for class 0, 0 for class 1), the rest are
/// mid-range so noisy perturbed samples reliably fail the round trip.
pub fn gen_anchors(
    count_per_class: usize,
    dims: usize,
    seed: u64,
) -> (AnchorSet, AnchorSet) {
    let rng = crate::sampler::CounterRng::new(seed);
    let make = |first: u8, salt: u64| {
        let images: Vec<QuantizedImage> = (0..count_per_class)
            .map(|i| {
                let mut pixels: Vec<u8> = (0..dims)
                    .map(|j| 32 + (rng.at(salt + (i * dims + j) as u64) % 192) as u8)
                    .collect();
                pixels[0] = first;
                QuantizedImage::new(pixels, 255).expect("pixels in range")
            })
            .collect();
        AnchorSet::new(images).expect("uniform dimensions")
    };
    let a0 = make(255, 0);
    let a1 = make(0, 1 << 40);
    (a0, a1)
}
