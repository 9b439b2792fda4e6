use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use blurfield::deconv::{deblur_with_report, fit_gmm_with, sample_patches, GmmFitOptions, GmmPrior, HqsSchedule};
use blurfield::fuse::MrfParams;
use blurfield::metrics::{format_value, mse_ker, mse_motion, psnr_from_mse_motion, psnr_image};
use blurfield::pipeline::{estimate_field, EstimateParams};
use blurfield::predict::{load_parity_sidecar, parity_max_abs_diff, CnnModel, CnnPredictor, OraclePredictor, PatchPredictor};
use blurfield::synth::{blur_with_field, export_training_patches, field_rotation, field_translation, PatchDataset};
use blurfield::{Error, ImageBuffer, MotionField};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

#[derive(Parser)]
#[command(name = "blurfield", version, about = "Estimate per-pixel motion blur and deblur images")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a motion field from a blurry image.
    Estimate(EstimateArgs),
    /// Deconvolve an image with a known motion field.
    Deblur(DeblurArgs),
    /// Blur a sharp image with a synthetic camera-motion field.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Score an estimated field (and optionally a restored image).
    Eval(EvalArgs),
    /// Write a labelled training set of blurred patches.
    ExportPatches(ExportArgs),
    /// Fit a Gaussian-mixture patch prior.
    FitGmm(FitGmmArgs),
    /// Compare the forward pass against reference probabilities.
    Parity(ParityArgs),
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    image: PathBuf,
    /// Trained classifier weights.
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    weights: Option<PathBuf>,
    /// Ground-truth field to read predictions from instead of a classifier.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Probability mass the oracle spreads over wrong candidates.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Oracle confidence falloff with distance to the nearest candidate.
    #[arg(long)]
    falloff: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also dump the confidence volume.
    #[arg(long)]
    confidence: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    stride: usize,
    /// Use only the 73 base candidates.
    #[arg(long)]
    no_extend: bool,
    #[arg(long, default_value_t = 10.0)]
    sigma: f64,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    #[arg(long, default_value_t = 30)]
    sampled: usize,
    /// Smoothness weight of the field labelling.
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 30)]
    bp_iters: usize,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    #[arg(long, default_value_t = 1)]
    grid_stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DeblurArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    field: PathBuf,
    /// Patch prior; the bundled one is used if omitted.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Data-term weight.
    #[arg(long, default_value_t = 2e5)]
    lambda: f64,
    /// Number of penalty stages; the penalty doubles at each.
    #[arg(long, default_value_t = 7)]
    beta_iters: usize,
    #[arg(long, default_value_t = 50.0)]
    beta_start: f64,
    #[arg(long, default_value_t = 1e-5)]
    cg_tol: f64,
    #[arg(long, default_value_t = 200)]
    cg_max_iter: usize,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Same motion everywhere.
    Translation {
        #[command(flatten)]
        io: SynthIo,
        #[arg(long, allow_hyphen_values = true)]
        u: f64,
        #[arg(long, allow_hyphen_values = true)]
        v: f64,
    },
    /// In-plane rotation about a centre (default: the image centre).
    Rotation {
        #[command(flatten)]
        io: SynthIo,
        /// Angular extent in radians.
        #[arg(long, allow_hyphen_values = true)]
        omega: f64,
        #[arg(long, allow_hyphen_values = true)]
        center_x: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        center_y: Option<f64>,
    },
}

#[derive(Args)]
struct SynthIo {
    /// Sharp source image.
    #[arg(long)]
    image: PathBuf,
    /// Blurred output (default: `<image>_blurred.png`).
    #[arg(long)]
    out_image: Option<PathBuf>,
    /// Ground-truth field output (default: `<image>_field.mfld`).
    #[arg(long)]
    out_field: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Restored image, scored against --reference.
    #[arg(long, requires = "reference")]
    image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    reference: Option<PathBuf>,
    /// Kernel support used for the kernel error.
    #[arg(long, default_value_t = 25)]
    support: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitGmmArgs {
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long, default_value_t = 200_000)]
    patches: usize,
    #[arg(long, default_value_t = 20)]
    components: usize,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParityArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    sidecar: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Image { .. } => 3,
        Error::Format { .. } | Error::ModelFormat { .. } => 4,
        _ => 2,
    }
}

fn load_images(paths: &[PathBuf]) -> blurfield::Result<Vec<ImageBuffer>> {
    paths.iter().map(|p| ImageBuffer::load_png(p)).collect()
}

fn sibling(image: &Path, suffix: &str) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    image.with_file_name(format!("{stem}{suffix}"))
}

fn run_estimate(a: EstimateArgs) -> blurfield::Result<()> {
    let start = Instant::now();
    let image = ImageBuffer::load_png(&a.image)?;
    let predictor: Box<dyn PatchPredictor> = match (&a.weights, &a.oracle) {
        (Some(w), _) => {
            let model = CnnModel::load(w)?;
            if !model.is_reference_architecture() {
                warn!("{} does not have the reference layer sizes", w.display());
            }
            Box::new(CnnPredictor::new(model))
        }
        (None, Some(gt)) => {
            let field = MotionField::load(gt)?;
            if field.dims() != image.dims() {
                return Err(Error::DimensionMismatch {
                    expected: format!("{}x{}", image.width(), image.height()),
                    actual: format!("{}x{}", field.width(), field.height()),
                });
            }
            let mut oracle = OraclePredictor::new(field, a.epsilon)?;
            if let Some(s) = a.falloff {
                oracle = oracle.with_falloff(s)?;
            }
            Box::new(oracle)
        }
        (None, None) => return Err(Error::InvalidParameter("either --weights or --oracle is required".into())),
    };
    let params = EstimateParams {
        stride: a.stride,
        extend: !a.no_extend,
        sigma: a.sigma,
        top_k: a.top_k,
        sampled: a.sampled,
        mrf: MrfParams {
            lambda_smooth: a.lambda,
            bp_iterations: a.bp_iters,
            damping: a.damping,
            seed: a.seed,
            grid_stride: a.grid_stride,
        },
    };
    let est = estimate_field(&image, predictor.as_ref(), &params)?;
    est.field.save(&a.out)?;
    if let Some(path) = &a.confidence {
        est.volume.save(path)?;
    }
    println!("elapsed_s={:.3}", start.elapsed().as_secs_f64());
    Ok(())
}

fn run_deblur(a: DeblurArgs) -> blurfield::Result<()> {
    let start = Instant::now();
    let image = ImageBuffer::load_png(&a.image)?;
    let field = MotionField::load(&a.field)?;
    let prior = match &a.prior {
        Some(p) => GmmPrior::load(p)?,
        None => GmmPrior::bundled(),
    };
    let schedule = HqsSchedule {
        lambda: a.lambda,
        betas: (0..a.beta_iters).map(|i| a.beta_start * f64::powi(2.0, i as i32)).collect(),
        cg_tol: a.cg_tol,
        cg_max_iter: a.cg_max_iter,
        ..HqsSchedule::default()
    };
    let out = deblur_with_report(&image, &field, &prior, &schedule)?;
    for s in &out.stages {
        info!("channel {} beta {}: {} CG iterations", s.channel, s.beta, s.cg.iterations);
    }
    out.image.save_png(&a.out)?;
    println!("elapsed_s={:.3}", start.elapsed().as_secs_f64());
    Ok(())
}

fn run_synth(c: SynthCommand) -> blurfield::Result<()> {
    let (io, make): (SynthIo, Box<dyn Fn(usize, usize) -> blurfield::Result<MotionField>>) = match c {
        SynthCommand::Translation { io, u, v } => (io, Box::new(move |w, h| field_translation(w, h, u, v))),
        SynthCommand::Rotation { io, omega, center_x, center_y } => (
            io,
            Box::new(move |w, h| {
                let center = (
                    center_x.unwrap_or((w as f64 - 1.0) / 2.0),
                    center_y.unwrap_or((h as f64 - 1.0) / 2.0),
                );
                field_rotation(w, h, center, omega)
            }),
        ),
    };
    let sharp = ImageBuffer::load_png(&io.image)?;
    let field = make(sharp.width(), sharp.height())?;
    let blurred = blur_with_field(&sharp, &field)?;
    let out_image = io.out_image.unwrap_or_else(|| sibling(&io.image, "_blurred.png"));
    let out_field = io.out_field.unwrap_or_else(|| sibling(&io.image, "_field.mfld"));
    blurred.save_png(&out_image)?;
    field.save(&out_field)?;
    println!("image={}", out_image.display());
    println!("field={}", out_field.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> blurfield::Result<()> {
    let est = MotionField::load(&a.est)?;
    let gt = MotionField::load(&a.gt)?;
    let mse = mse_motion(&est, &gt)?;
    let ker = mse_ker(&est, &gt, a.support)?;
    let psnr_deblur = match (&a.image, &a.reference) {
        (Some(i), Some(r)) => Some(psnr_image(&ImageBuffer::load_png(i)?, &ImageBuffer::load_png(r)?)?),
        _ => None,
    };
    println!("mse_motion={}", format_value(mse));
    println!("psnr_motion={}", format_value(psnr_from_mse_motion(mse)));
    println!("mse_ker={}", format_value(ker));
    if let Some(p) = psnr_deblur {
        println!("psnr_deblur={}", format_value(p));
    }
    Ok(())
}

fn run_export(a: ExportArgs) -> blurfield::Result<()> {
    let images = load_images(&a.images)?;
    let ds = export_training_patches(&images, a.count, a.seed)?;
    ds.save(&a.out)?;
    println!("records={}", ds.len());
    Ok(())
}

fn run_fit_gmm(a: FitGmmArgs) -> blurfield::Result<()> {
    let images = load_images(&a.images)?;
    let patches = sample_patches(&images, a.patches, a.seed)?;
    let opts = GmmFitOptions {
        n_components: a.components,
        max_iter: a.max_iter,
        seed: a.seed,
        ..GmmFitOptions::default()
    };
    let (prior, report) = fit_gmm_with(&patches, &opts)?;
    prior.save(&a.out)?;
    println!("components={}", prior.n_components());
    println!("iterations={}", report.log_likelihood.len());
    println!("converged={}", report.converged);
    if let Some(ll) = report.log_likelihood.last() {
        println!("log_likelihood={ll}");
    }
    Ok(())
}

fn run_parity(a: ParityArgs) -> blurfield::Result<bool> {
    let model = CnnModel::load(&a.weights)?;
    let dataset = PatchDataset::load(&a.dataset)?;
    let sidecar = load_parity_sidecar(&a.sidecar)?;
    let diff = parity_max_abs_diff(&model, &dataset, &sidecar)?;
    println!("records={}", sidecar.len());
    println!("max_abs_diff={diff:e}");
    Ok(diff <= a.tolerance)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Estimate(a) => run_estimate(a),
        Command::Deblur(a) => run_deblur(a),
        Command::Synth(c) => run_synth(c),
        Command::Eval(a) => run_eval(a),
        Command::ExportPatches(a) => run_export(a),
        Command::FitGmm(a) => run_fit_gmm(a),
        Command::Parity(a) => match run_parity(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: parity tolerance exceeded");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
