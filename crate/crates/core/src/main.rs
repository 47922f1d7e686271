//! Batch CLI: worked minifloat examples, the certificate-breaking demos, and
//! the table/noise/certify/compare pipeline.

use clap::{Parser, Subcommand, ValueEnum};
use soundsmooth::attacks::{self, AlphaSign, HostPrecision};
use soundsmooth::minifloat::MiniFloat8;
use soundsmooth::pipeline::{
    self, BoundKind, CertifyOptions, ClassifierRef, MethodConfig, Prediction,
};
use soundsmooth::sampler;
use soundsmooth::tables::{self, GridSpec};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "soundsmooth",
    about = "Floating-point attacks on smoothing certificates, and the sound fix"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Unsound,
    Sound,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundArg {
    Hoeffding,
    ClopperPearson,
}

impl From<BoundArg> for BoundKind {
    fn from(b: BoundArg) -> Self {
        match b {
            BoundArg::Hoeffding => BoundKind::Hoeffding,
            BoundArg::ClopperPearson => BoundKind::ClopperPearson,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Decode, encode and add 8-bit minifloat values ("s eee mmmm" patterns).
    Minifloat {
        #[command(subcommand)]
        op: MinifloatOp,
    },
    /// Reproduce the scalar certificate-breaking run end to end.
    AttackDemo {
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 100_000)]
        n: u64,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Desk-scale anchor-set demo: certify anchors, then flip them inside
    /// the certified radius with the universal perturbation.
    TheoremDemo {
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = 50)]
        samples: u64,
        #[arg(long, default_value_t = 3072)]
        dims: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Build a breaking-point table and write it to disk.
    TableGen {
        #[arg(long = "L", default_value_t = 255)]
        levels: u32,
        /// Clamp factor in normalized units; NUM or NUM/DEN (margin = L*k).
        #[arg(long, default_value = "6")]
        k: String,
        /// Noise scale sigma as NUM/DEN in normalized units.
        #[arg(long)]
        sigma: String,
        #[arg(long, default_value_t = 64)]
        bits: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a reusable noise buffer from a table.
    NoiseGen {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        dims: u32,
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic quantized image set.
    GenImages {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        dims: usize,
        #[arg(long, default_value_t = 255)]
        levels: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify an image set with one method and emit per-image CSV.
    Certify {
        #[arg(long, value_enum)]
        method: MethodArg,
        /// fa:NUM/DEN | facoord:NUM/DEN:IDX | toy:THETA | const:0|1
        #[arg(long)]
        classifier: String,
        /// Unsound noise scale (ignored for sound runs; the table carries it).
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Optional precomputed bounding-phase noise buffer.
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n0: u64,
        #[arg(long, default_value_t = 10_000)]
        n: u64,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = BoundArg::ClopperPearson)]
        bound: BoundArg,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run both methods on one image set and print the per-radius table
    /// side by side; optionally write the combined CSV.
    Compare {
        /// fa:NUM/DEN | facoord:NUM/DEN:IDX | toy:THETA | const:0|1
        #[arg(long)]
        classifier: String,
        /// Sigma as NUM/DEN (shared by both methods).
        #[arg(long)]
        sigma: String,
        #[arg(long, default_value = "6")]
        k: String,
        #[arg(long, default_value_t = 64)]
        bits: u8,
        #[arg(long, default_value_t = 1000)]
        n0: u64,
        #[arg(long, default_value_t = 10_000)]
        n: u64,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MinifloatOp {
    /// Decode a bit pattern to its exact value.
    Decode { pattern: String },
    /// Encode an exact rational NUM/DEN (or integer) to the nearest value.
    Encode { value: String },
    /// Add two bit patterns.
    Add { a: String, b: String },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

fn validation(msg: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_VALIDATION,
        message: msg.to_string(),
    }
}

fn io_err(msg: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_IO,
        message: msg.to_string(),
    }
}

/// I/O-flavored errors exit 3, everything else (validation) exits 2.
fn classify_table_err(e: tables::TableError) -> CliError {
    match e {
        tables::TableError::Io(_) => io_err(e),
        _ => validation(e),
    }
}

fn classify_sampler_err(e: sampler::SamplerError) -> CliError {
    match e {
        sampler::SamplerError::Io(_) => io_err(e),
        _ => validation(e),
    }
}

fn classify_pipeline_err(e: pipeline::PipelineError) -> CliError {
    match e {
        pipeline::PipelineError::Io(_) => io_err(e),
        pipeline::PipelineError::Sampler(sampler::SamplerError::Io(_)) => io_err(e),
        _ => validation(e),
    }
}

fn parse_ratio(s: &str) -> Result<(u64, u64), CliError> {
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n, d),
        None => (s, "1"),
    };
    let num: u64 = n
        .trim()
        .parse()
        .map_err(|_| validation(format!("bad rational {s:?}")))?;
    let den: u64 = d
        .trim()
        .parse()
        .map_err(|_| validation(format!("bad rational {s:?}")))?;
    if den == 0 {
        return Err(validation(format!("zero denominator in {s:?}")));
    }
    Ok((num, den))
}

fn margin_from_k(levels: u32, k: &str) -> Result<u32, CliError> {
    let (kn, kd) = parse_ratio(k)?;
    let num = levels as u64 * kn;
    if num % kd != 0 {
        return Err(validation(format!(
            "k = {k} does not give an integer margin for L = {levels}"
        )));
    }
    u32::try_from(num / kd).map_err(|_| validation("margin overflows u32"))
}

fn parse_classifier(s: &str) -> Result<ClassifierRef, CliError> {
    let mut parts = s.split(':');
    let kind = parts.next().unwrap_or("");
    let rest: Vec<&str> = parts.collect();
    match kind {
        "fa" => {
            let spec = rest
                .first()
                .ok_or_else(|| validation("fa needs a value, e.g. fa:210/255"))?;
            let (n, d) = parse_ratio(spec)?;
            Ok(ClassifierRef::FaScalar {
                a: n as f64 / d as f64,
            })
        }
        "facoord" => {
            if rest.len() != 2 {
                return Err(validation("facoord:NUM/DEN:IDX"));
            }
            let (n, d) = parse_ratio(rest[0])?;
            let coord: usize = rest[1]
                .parse()
                .map_err(|_| validation("bad coordinate index"))?;
            Ok(ClassifierRef::FaCoord {
                a: n as f64 / d as f64,
                coord,
            })
        }
        "toy" => {
            let theta: f64 = rest
                .first()
                .ok_or_else(|| validation("toy needs a threshold, e.g. toy:0.5"))?
                .parse()
                .map_err(|_| validation("bad toy threshold"))?;
            Ok(ClassifierRef::ToyThreshold { theta })
        }
        "const" => {
            let v = match rest.first() {
                Some(&"0") => false,
                Some(&"1") => true,
                _ => return Err(validation("const:0 or const:1")),
            };
            Ok(ClassifierRef::Constant { value: v })
        }
        _ => Err(validation(format!("unknown classifier {s:?}"))),
    }
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Minifloat { op } => run_minifloat(op),
        Command::AttackDemo {
            sigma,
            n,
            alpha,
            seed,
        } => run_attack_demo(sigma, n, alpha, seed),
        Command::TheoremDemo {
            images,
            samples,
            dims,
            sigma,
            alpha,
            seed,
        } => run_theorem_demo(images, samples, dims, sigma, alpha, seed),
        Command::TableGen {
            levels,
            k,
            sigma,
            bits,
            out,
        } => {
            let (sn, sd) = parse_ratio(&sigma)?;
            let margin = margin_from_k(levels, &k)?;
            let spec =
                GridSpec::new(levels, margin, sn, sd, bits).map_err(classify_table_err)?;
            let table = tables::build_table(spec);
            tables::write_table(&table, &out).map_err(classify_table_err)?;
            let fail = table.failure_probability();
            println!(
                "wrote {} entries ({} ambiguous), per-sample failure probability {}",
                table.thresholds.len(),
                table.ambiguous_count(),
                fail
            );
            Ok(())
        }
        Command::NoiseGen {
            table,
            dims,
            n,
            seed,
            out,
        } => {
            let table = tables::read_table(&table).map_err(classify_table_err)?;
            let buffer = sampler::build_noise_buffer(&table, dims, n, seed);
            sampler::write_noise(&buffer, &out).map_err(classify_sampler_err)?;
            let failures = buffer
                .samples
                .iter()
                .filter(|s| matches!(s, sampler::DiscreteSample::Failure))
                .count();
            println!("wrote {n} samples x {dims} dims, {failures} failures");
            Ok(())
        }
        Command::GenImages {
            count,
            dims,
            levels,
            seed,
            out,
        } => {
            let images = pipeline::gen_images(count, dims, levels, seed);
            pipeline::write_images(&images, &out).map_err(classify_pipeline_err)?;
            println!("wrote {count} images of dimension {dims}");
            Ok(())
        }
        Command::Certify {
            method,
            classifier,
            sigma,
            table,
            noise,
            n0,
            n,
            alpha,
            seed,
            bound,
            images,
            out,
        } => run_certify(
            method, &classifier, sigma, table, noise, n0, n, alpha, seed, bound, &images, out,
        ),
        Command::Compare {
            classifier,
            sigma,
            k,
            bits,
            n0,
            n,
            alpha,
            seed,
            images,
            out,
        } => run_compare(&classifier, &sigma, &k, bits, n0, n, alpha, seed, &images, out),
    }
}

fn run_minifloat(op: MinifloatOp) -> Result<(), CliError> {
    match op {
        MinifloatOp::Decode { pattern } => {
            let m = MiniFloat8::parse(&pattern).map_err(validation)?;
            println!("{} = {}", m, m.decode());
        }
        MinifloatOp::Encode { value } => {
            let (num, den) = match value.split_once('/') {
                Some((n, d)) => (
                    n.parse::<i64>().map_err(validation)?,
                    d.parse::<i64>().map_err(validation)?,
                ),
                None => (value.parse::<i64>().map_err(validation)?, 1),
            };
            if den == 0 {
                return Err(validation("zero denominator"));
            }
            let m = MiniFloat8::encode(&soundsmooth::minifloat::rational(num, den));
            println!("{num}/{den} -> {} = {}", m, m.decode());
        }
        MinifloatOp::Add { a, b } => {
            let x = MiniFloat8::parse(&a).map_err(validation)?;
            let y = MiniFloat8::parse(&b).map_err(validation)?;
            let s = x.add(y);
            println!("{} + {} = {} ({} + {} = {})", x, y, s, x.decode(), y.decode(), s.decode());
        }
    }
    Ok(())
}

fn run_attack_demo(sigma: f64, n: u64, alpha: f64, seed: u64) -> Result<(), CliError> {
    let a = 210.0 / 255.0;
    let f = ClassifierRef::FaScalar { a };
    let opts = CertifyOptions {
        n0: 1000,
        n,
        alpha,
        bound: BoundKind::Hoeffding,
        seed,
        prec: HostPrecision::Binary64,
    };

    // success rates of the smoothed predicate at 0 and at the anchor
    let at_zero = pipeline::certify_unsound(&f, &[0.0], sigma, &opts)
        .map_err(classify_pipeline_err)?;
    let p1 = at_zero.counts[1] as f64 / n as f64;
    let at_anchor =
        pipeline::certify_unsound(&f, &[a], sigma, &opts).map_err(classify_pipeline_err)?;
    let p2 = at_anchor.counts[1] as f64 / n as f64;
    println!("P[F(0 + eps) = 1]        ~ {p1:.5}");
    println!("P[F({a:.6} + eps) = 1] ~ {p2:.5}");
    println!(
        "Hoeffding p_lower = {:.6}, radius = {:.4}",
        at_anchor.p_lower,
        at_anchor.radius.unwrap_or(f64::NAN)
    );

    let cp = pipeline::certify_unsound(
        &f,
        &[a],
        sigma,
        &CertifyOptions {
            bound: BoundKind::ClopperPearson,
            ..opts
        },
    )
    .map_err(classify_pipeline_err)?;
    println!(
        "Clopper-Pearson p_lower = {:.6}, radius = {:.4}",
        cp.p_lower,
        cp.radius.unwrap_or(f64::NAN)
    );
    println!(
        "distance between the certified points: |{a:.6} - 0| = {:.4}",
        a
    );
    println!(
        "prediction at 0: {:?} -- inside the certified radius of the opposite class",
        at_zero.prediction
    );
    Ok(())
}

fn run_theorem_demo(
    images: usize,
    samples: u64,
    dims: usize,
    sigma: f64,
    alpha: f64,
    seed: u64,
) -> Result<(), CliError> {
    let per_class = images.div_ceil(2);
    let (a0, a1) = pipeline::gen_anchors(per_class, dims, seed);
    let f = ClassifierRef::M {
        label0: a0.clone(),
        label1: a1.clone(),
        levels: 255,
    };
    let opts = CertifyOptions {
        n0: samples.max(10),
        n: samples,
        alpha,
        bound: BoundKind::ClopperPearson,
        seed,
        prec: HostPrecision::Binary64,
    };

    let mut min_radius = f64::INFINITY;
    let mut certified = 0usize;
    let mut flips = 0usize;
    let norm = {
        let p = attacks::universal_perturbation(dims, AlphaSign::Positive, 255);
        p.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    for idx in 0..images {
        let (set, sign, want) = if idx % 2 == 0 {
            (&a0, AlphaSign::Negative, Prediction::Class0)
        } else {
            (&a1, AlphaSign::Positive, Prediction::Class1)
        };
        let anchor = set.anchor_float((idx / 2) % set.len());
        let per = CertifyOptions {
            seed: seed.wrapping_add(idx as u64),
            ..opts
        };
        let o = pipeline::certify_unsound(&f, anchor, sigma, &per)
            .map_err(classify_pipeline_err)?;
        if o.prediction == want {
            certified += 1;
            min_radius = min_radius.min(o.radius.unwrap_or(0.0));
        }
        // smoothed prediction at the perturbed point
        let p = attacks::universal_perturbation(dims, sign, 255);
        let moved: Vec<f64> = anchor.iter().zip(&p).map(|(a, q)| a + q).collect();
        let op = pipeline::certify_unsound(&f, &moved, sigma, &per)
            .map_err(classify_pipeline_err)?;
        if op.prediction != o.prediction {
            flips += 1;
        }
    }
    println!("anchors: {images}, dims {dims}, {samples} samples each");
    println!("certified with the expected class: {certified}/{images}");
    println!("minimum certified radius: {min_radius:.3}");
    println!("perturbation norm: {norm:.4}");
    println!("smoothed prediction flips inside the certified ball: {flips}/{images}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_certify(
    method: MethodArg,
    classifier: &str,
    sigma: Option<f64>,
    table: Option<PathBuf>,
    noise: Option<PathBuf>,
    n0: u64,
    n: u64,
    alpha: f64,
    seed: u64,
    bound: BoundArg,
    images_path: &std::path::Path,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let f = parse_classifier(classifier)?;
    let images = pipeline::read_images(images_path).map_err(classify_pipeline_err)?;
    let opts = CertifyOptions {
        n0,
        n,
        alpha,
        bound: bound.into(),
        seed,
        prec: HostPrecision::Binary64,
    };
    let run = match method {
        MethodArg::Unsound => {
            let sigma =
                sigma.ok_or_else(|| validation("--sigma is required for unsound runs"))?;
            pipeline::run_dataset(&images, &f, &MethodConfig::Unsound { sigma }, &opts)
                .map_err(classify_pipeline_err)?
        }
        MethodArg::Sound => {
            let path = table.ok_or_else(|| validation("--table is required for sound runs"))?;
            let table = tables::read_table(&path).map_err(classify_table_err)?;
            match noise {
                None => pipeline::run_dataset(
                    &images,
                    &f,
                    &MethodConfig::Sound { table: &table },
                    &opts,
                )
                .map_err(classify_pipeline_err)?,
                Some(noise_path) => {
                    let buffer =
                        sampler::read_noise(&noise_path).map_err(classify_sampler_err)?;
                    let dims = images.first().map_or(0, |im| im.dims()) as u32;
                    let buffer0 = sampler::build_noise_buffer(&table, dims, n0, seed);
                    let outcomes: Result<Vec<_>, _> = images
                        .iter()
                        .map(|im| {
                            pipeline::certify_sound(&f, im, &table, &buffer0, &buffer, &opts)
                        })
                        .collect();
                    let outcomes = outcomes.map_err(classify_pipeline_err)?;
                    let summary = pipeline::summarize(&outcomes);
                    pipeline::DatasetRun { outcomes, summary }
                }
            }
        }
    };
    let csv = pipeline::emit_csv(&run.outcomes);
    match out {
        Some(p) => std::fs::write(&p, &csv).map_err(io_err)?,
        None => print!("{csv}"),
    }
    println!("radius  certified");
    for (r, frac) in &run.summary {
        println!("{r:<7} {frac:.3}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_compare(
    classifier: &str,
    sigma: &str,
    k: &str,
    bits: u8,
    n0: u64,
    n: u64,
    alpha: f64,
    seed: u64,
    images_path: &std::path::Path,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let f = parse_classifier(classifier)?;
    let images = pipeline::read_images(images_path).map_err(classify_pipeline_err)?;
    let levels = images.first().map_or(255, |im| im.levels);
    let (sn, sd) = parse_ratio(sigma)?;
    let margin = margin_from_k(levels, k)?;
    let spec = GridSpec::new(levels, margin, sn, sd, bits).map_err(classify_table_err)?;
    let table = tables::build_table(spec);
    let opts = CertifyOptions {
        n0,
        n,
        alpha,
        bound: BoundKind::ClopperPearson,
        seed,
        prec: HostPrecision::Binary64,
    };
    let sigma_f = sn as f64 / sd as f64;
    let unsound = pipeline::run_dataset(
        &images,
        &f,
        &MethodConfig::Unsound { sigma: sigma_f },
        &opts,
    )
    .map_err(classify_pipeline_err)?;
    let sound = pipeline::run_dataset(&images, &f, &MethodConfig::Sound { table: &table }, &opts)
        .map_err(classify_pipeline_err)?;

    println!("radius  unsound  sound");
    for ((r, u), (_, s)) in unsound.summary.iter().zip(&sound.summary) {
        println!("{r:<7} {u:<8.3} {s:.3}");
    }
    if let Some(p) = out {
        let mut all = unsound.outcomes;
        all.extend(sound.outcomes);
        std::fs::write(&p, pipeline::emit_csv(&all)).map_err(io_err)?;
    }
    Ok(())
}

impl From<soundsmooth::minifloat::ParseError> for CliError {
    fn from(e: soundsmooth::minifloat::ParseError) -> Self {
        validation(e)
    }
}
