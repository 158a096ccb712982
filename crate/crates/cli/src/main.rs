//! `sae`: train, code and evaluate layered learned image codecs.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 model error. Every
//! failure prints one diagnostic line on standard error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sae_core::image_io::{load_image, save_image};
use sae_core::metrics::{ms_ssim_images, psnr_images, rd_curve, write_curve_csv, MS_SSIM_MIN_SIDE};
use sae_core::model_file::{load_model, model_hash, save_model};
use sae_core::network::ScalableModel;
use sae_core::pipeline::{sae_decode, sae_encode, truncate, LayeredBitstream};
use sae_core::training::{build_model, expand_paths, load_checkpoint, Dataset, Trainer, TrainingConfig};
use sae_core::Error;

#[derive(Parser)]
#[command(name = "sae", version, about = "Layered learned image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one layer of a model
    Train(TrainArgs),
    /// Encode an image into a layered bitstream
    Encode {
        image: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Number of layers to code (default: all)
        #[arg(long)]
        layers: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Decode a bitstream, optionally only its first layers
    Decode {
        stream: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Keep the first K layers of a bitstream
    Truncate {
        stream: PathBuf,
        k: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compare a reconstruction with its reference
    Eval {
        reference: PathBuf,
        reconstruction: PathBuf,
        /// Stream the reconstruction was decoded from; adds its bpp
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Rate-distortion curve of a model over a directory of images
    Curve {
        #[arg(long)]
        model: PathBuf,
        images: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Describe a model or bitstream file
    Info { file: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    /// Training config file
    #[arg(long)]
    config: PathBuf,
    /// Layer to train
    #[arg(long)]
    layer: usize,
    /// Model file; read if it exists, always written on success
    #[arg(long)]
    model: PathBuf,
    /// Continue from this checkpoint instead of starting the layer afresh
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Per-iteration report CSV (default: model path with `.layer{i}.csv`)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Checkpoint file written every `--checkpoint-every` iterations
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: u64,
    /// Stop after this many iterations in this invocation (checkpoint kept)
    #[arg(long)]
    budget: Option<u64>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const MODEL: u8 = 3;

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) => USAGE,
            Error::Model(_) | Error::WrongModel { .. } | Error::Unsupported(_) => MODEL,
            _ => DATA,
        };
        Failure::new(code, e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Attaches a path to an error and forces its exit code.
fn at<T>(code: u8, path: &Path, r: sae_core::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| {
        let code = match e {
            Error::WrongModel { .. } | Error::Model(_) => MODEL,
            _ => code,
        };
        Failure::new(code, format!("{}: {e}", path.display()))
    })
}

fn open_model(path: &Path) -> std::result::Result<ScalableModel, Failure> {
    at(MODEL, path, load_model(path))
}

fn open_stream(path: &Path) -> std::result::Result<LayeredBitstream, Failure> {
    at(DATA, path, LayeredBitstream::load(path))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Encode { image, model, layers, out } => cmd_encode(&image, &model, layers, &out),
        Command::Decode { stream, model, layers, out } => cmd_decode(&stream, &model, layers, &out),
        Command::Truncate { stream, k, out } => cmd_truncate(&stream, k, &out),
        Command::Eval { reference, reconstruction, stream } => cmd_eval(&reference, &reconstruction, stream.as_deref()),
        Command::Curve { model, images, out } => cmd_curve(&model, &images, &out),
        Command::Info { file } => cmd_info(&file),
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = at(USAGE, &a.config, TrainingConfig::load(&a.config))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let data = at(DATA, &a.config, Dataset::from_paths(&cfg.dataset, cfg.crop, cfg.seed))?;
    let validation = if cfg.validation.is_empty() {
        None
    } else {
        Some(at(DATA, &a.config, Dataset::from_paths(&cfg.validation, cfg.crop, cfg.seed))?)
    };

    let (mut model, state) = match &a.resume {
        Some(ckpt) => {
            let (m, s) = at(MODEL, ckpt, load_checkpoint(ckpt))?;
            if s.layer_index != a.layer {
                return Err(Failure::new(
                    USAGE,
                    format!("checkpoint trains layer {}, not {}", s.layer_index, a.layer),
                ));
            }
            (m, Some(s))
        }
        None if a.model.exists() => (open_model(&a.model)?, None),
        None => (build_model(&cfg)?, None),
    };

    let mut trainer = match state {
        Some(s) => Trainer::resume(&mut model, s, &data, validation.as_ref(), &cfg)?,
        None => Trainer::new(&mut model, a.layer, &data, validation.as_ref(), &cfg)?,
    };
    let start = trainer.state().iteration;
    let every = a.checkpoint_every.max(1);
    let mut remaining = a.budget;
    let stop = loop {
        let chunk = match (&a.checkpoint, remaining) {
            (Some(_), Some(r)) => r.min(every),
            (Some(_), None) => every,
            (None, r) => r.unwrap_or(u64::MAX),
        };
        let stop = trainer.run(Some(chunk))?;
        if let Some(ckpt) = &a.checkpoint {
            at(DATA, ckpt, trainer.save_checkpoint(ckpt))?;
        }
        if let Some(r) = remaining.as_mut() {
            *r -= chunk.min(*r);
        }
        if stop.is_some() || remaining == Some(0) {
            break stop;
        }
    };
    let iteration = trainer.state().iteration;

    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.model.with_extension(format!("layer{}.csv", a.layer)));
    let Some(reason) = stop else {
        let report = &trainer.state().report;
        at(DATA, &report_path, report.write_csv(&report_path))?;
        println!(
            "layer {}: paused at iteration {iteration} ({} this run); resume from the checkpoint",
            a.layer,
            iteration - start
        );
        return Ok(());
    };
    let report = trainer.finish()?;
    at(DATA, &report_path, report.write_csv(&report_path))?;
    if !report.validation.is_empty() {
        let v = report_path.with_extension("validation.csv");
        at(DATA, &v, report.write_validation_csv(&v))?;
    }
    at(DATA, &a.model, save_model(&model, &a.model))?;
    let n = report.iterations.len();
    println!(
        "layer {}: {iteration} iterations, stopped by {reason}; final loss {:.4}",
        a.layer,
        report.mean_loss(n.saturating_sub(100)..n)
    );
    println!("model written to {}", a.model.display());
    println!("report written to {}", report_path.display());
    Ok(())
}

fn cmd_encode(image: &Path, model: &Path, layers: Option<usize>, out: &Path) -> CmdResult {
    let img = at(DATA, image, load_image(image))?;
    let model = open_model(model)?;
    let k = layers.unwrap_or(model.num_layers());
    let stream = sae_encode(&img, &model, k)?;
    at(DATA, out, stream.save(out))?;
    for (i, (bpp, cum)) in stream.layer_bpp().iter().zip(stream.cumulative_bpp()).enumerate() {
        println!("layer {i}: {bpp:.5} bpp (cumulative {cum:.5})");
    }
    println!("wrote {} bytes to {}", stream.byte_len(), out.display());
    Ok(())
}

fn cmd_decode(stream: &Path, model: &Path, layers: Option<usize>, out: &Path) -> CmdResult {
    let s = open_stream(stream)?;
    let model = open_model(model)?;
    let img = sae_decode(&s, &model, layers)?;
    at(DATA, out, save_image(&img, out))?;
    let k = layers.unwrap_or(s.num_layers());
    println!("decoded {k} of {} layers, {}x{}, to {}", s.num_layers(), img.width, img.height, out.display());
    Ok(())
}

fn cmd_truncate(stream: &Path, k: usize, out: &Path) -> CmdResult {
    let s = open_stream(stream)?;
    let t = truncate(&s, k)?;
    at(DATA, out, t.save(out))?;
    println!("kept {k} of {} layers; {} bytes", s.num_layers(), t.byte_len());
    Ok(())
}

fn cmd_eval(reference: &Path, reconstruction: &Path, stream: Option<&Path>) -> CmdResult {
    let x = at(DATA, reference, load_image(reference))?;
    let y = at(DATA, reconstruction, load_image(reconstruction))?;
    if let Some(p) = stream {
        let s = open_stream(p)?;
        let bpp = s.cumulative_bpp().last().copied().unwrap_or(0.0);
        println!("bpp {bpp:.5}");
    }
    println!("psnr {:.4} dB", psnr_images(&x, &y)?);
    if x.width.min(x.height) >= MS_SSIM_MIN_SIDE {
        println!("ms-ssim {:.6}", ms_ssim_images(&x, &y)?);
    } else {
        println!("ms-ssim n/a (needs at least {MS_SSIM_MIN_SIDE} pixels per side)");
    }
    Ok(())
}

fn cmd_curve(model: &Path, images: &Path, out: &Path) -> CmdResult {
    let model = open_model(model)?;
    let paths = at(DATA, images, expand_paths(&[images.to_path_buf()]))?;
    if paths.is_empty() {
        return Err(Failure::new(DATA, format!("{}: no images found", images.display())));
    }
    let imgs = paths
        .iter()
        .map(|p| at(DATA, p, load_image(p)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let points = rd_curve(&model, &imgs, model.num_layers())?;
    at(DATA, out, write_curve_csv(out, &points))?;
    for (k, p) in points.iter().enumerate() {
        println!("{} layer(s): {:.5} bpp, {:.3} dB, MS-SSIM {:.5}", k + 1, p.bpp, p.psnr_db, p.ms_ssim);
    }
    println!("{} images; curve written to {}", imgs.len(), out.display());
    Ok(())
}

fn cmd_info(file: &Path) -> CmdResult {
    let bytes = at(DATA, file, std::fs::read(file).map_err(Error::from))?;
    match bytes.get(..4) {
        Some(b"SAEM") => {
            let model = open_model(file)?;
            println!("model v{}, {} layer(s), id {:016x}", model.version, model.num_layers(), model_hash(&model)?);
            for l in &model.layers {
                let state = if l.is_trained() { "trained" } else { "untrained" };
                println!("layer {}: {} feature maps, lambda {}, {state}", l.layer_index, l.feature_maps, l.lambda_rate);
            }
        }
        Some(b"SAEB") => {
            let s = open_stream(file)?;
            println!(
                "stream: {}x{} image ({}x{} coded), {} layer(s), model {:016x}, {} bytes",
                s.orig_width,
                s.orig_height,
                s.padded_width,
                s.padded_height,
                s.num_layers(),
                s.model_hash,
                s.byte_len()
            );
            for (i, (bpp, cum)) in s.layer_bpp().iter().zip(s.cumulative_bpp()).enumerate() {
                println!("layer {i}: {} bytes, {bpp:.5} bpp (cumulative {cum:.5})", s.payloads[i].len());
            }
        }
        _ => return Err(Failure::new(DATA, format!("{}: not a model or stream file", file.display()))),
    }
    Ok(())
}
