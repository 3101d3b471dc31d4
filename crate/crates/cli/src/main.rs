//! `rddm` — simulate paired low/normal-dose images, train the one-step
//! residual denoiser, run it, and score the results.
//!
//! Every command prints a `config:` line with its fully resolved settings;
//! feeding that line back as `--config` reproduces the run bit-exactly.
//! Exit codes: 0 success, 2 usage/config error, 3 data/format error,
//! 4 numeric failure.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use rddm_core::archive::{read_tensor_table, save_dataset, write_tensor_table, IMAGE_MAGIC};
use rddm_core::metrics::{nps, report, rps, Roi};
use rddm_core::rng::{NoiseSource, Stream};
use rddm_core::sim::{generate_dataset, generate_flat_dataset, Dataset};
use rddm_core::tensor::Tensor;
use rddm_core::trainer::{
    format_report, init_state, load_engine, save_checkpoint, train_until, VariantPreset,
};
use rddm_core::Error;

use config::{DenoiseConfig, EvalConfig, SimulateConfig, TrainCliConfig};

/// Failures split by exit code: usage/config (2) versus everything the core
/// reports (3 for data/format, 4 for numeric).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Numeric(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "rddm", version, about = "One-step residual denoising for low-dose images")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render random phantoms, corrupt them, and write train/test/flat archives.
    Simulate {
        /// JSON settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory receiving train.rddi / test.rddi / flat.rddi.
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the denoiser on a simulated archive and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training archive from `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Named preset (fine | balanced | smooth) overriding temperatures/lambda.
        #[arg(long)]
        variant: Option<String>,
        /// Overrides the config iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Denoise an archive with one generator pass per image.
    Denoise {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Archive whose "y" tensor is denoised.
        #[arg(long)]
        input: PathBuf,
        /// Output archive: "x" = denoised, "y" = input passthrough.
        #[arg(long)]
        output: PathBuf,
        /// Overrides the config base-noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate raw parameters instead of the EMA shadow.
        #[arg(long)]
        raw_weights: bool,
        /// Also write one 8-bit grayscale PNG per image (display only).
        #[arg(long)]
        png_dir: Option<PathBuf>,
    },
    /// Score predictions: PSNR/SSIM table plus residual and noise spectra.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Archive holding the images under test.
        #[arg(long)]
        pred: PathBuf,
        /// Archive holding the reference images.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Directory receiving metrics.csv / rps.csv / nps.csv.
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config tensor name for the prediction archive.
        #[arg(long)]
        pred_tensor: Option<String>,
        /// Overrides the config tensor name for the reference archive.
        #[arg(long)]
        ref_tensor: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Ok(v) = std::env::var("RDDM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("RDDM_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::Usage("RDDM_THREADS must be positive".into()));
        }
        // Ignore the error if a pool already exists (tests share a process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Cmd::Simulate { config, out_dir, seed } => cmd_simulate(config.as_deref(), &out_dir, seed),
        Cmd::Train { config, data, out, variant, iterations, seed } => {
            cmd_train(config.as_deref(), &data, &out, variant.as_deref(), iterations, seed)
        }
        Cmd::Denoise { config, checkpoint, input, output, seed, raw_weights, png_dir } => {
            cmd_denoise(
                config.as_deref(),
                &checkpoint,
                &input,
                &output,
                seed,
                raw_weights,
                png_dir.as_deref(),
            )
        }
        Cmd::Eval { config, pred, reference, out_dir, pred_tensor, ref_tensor } => cmd_eval(
            config.as_deref(),
            &pred,
            &reference,
            &out_dir,
            pred_tensor.as_deref(),
            ref_tensor.as_deref(),
        ),
    }
}

/// Population mean/std of a tensor's entries.
fn stats(t: &Tensor) -> (f64, f64) {
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Distinct deterministic seeds per split so train/test phantoms never repeat.
const TEST_SEED_STRIDE: u64 = 1 << 32;
const FLAT_SEED_STRIDE: u64 = 2 << 32;

fn cmd_simulate(config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg: SimulateConfig = config::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let model = cfg.noise_model();
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.size == 0 || cfg.train_count == 0 || cfg.test_count == 0 {
        return Err(CliError::Usage("size, train_count, and test_count must be positive".into()));
    }
    config::echo(&cfg);

    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let splits: Vec<(&str, Dataset)> = {
        let mut v = vec![
            ("train", generate_dataset(cfg.train_count, cfg.size, &model, cfg.seed)?),
            (
                "test",
                generate_dataset(
                    cfg.test_count,
                    cfg.size,
                    &model,
                    cfg.seed.wrapping_add(TEST_SEED_STRIDE),
                )?,
            ),
        ];
        if cfg.flat_count > 0 {
            v.push((
                "flat",
                generate_flat_dataset(
                    cfg.flat_count,
                    cfg.size,
                    cfg.flat_value,
                    &model,
                    cfg.seed.wrapping_add(FLAT_SEED_STRIDE),
                )?,
            ));
        }
        v
    };
    for (name, ds) in &splits {
        let path = out_dir.join(format!("{name}.rddi"));
        save_dataset(&path, ds)?;
        let (_, _, r) = ds.stack()?;
        let (mean, std) = stats(&r);
        println!("split={name} count={} residual_mean={mean} residual_std={std}", ds.samples.len());
        println!("wrote: {}", path.display());
    }
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    variant: Option<&str>,
    iterations: Option<u64>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg: TrainCliConfig = config::load(config)?;
    if let Some(name) = variant {
        let preset = VariantPreset::from_name(name).map_err(|e| CliError::Usage(e.to_string()))?;
        let drift = preset.drift_config();
        cfg.temperatures = drift.temperatures;
        cfg.lambda = drift.lambda;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let train_cfg = cfg.to_train_config();
    train_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    config::echo(&cfg);

    let dataset = rddm_core::archive::load_dataset(data)?;
    let mut state = init_state(&train_cfg)?;
    let log_every = cfg.log_every.max(1);
    train_until(&mut state, &train_cfg, &dataset, train_cfg.iterations, &mut |r| {
        if r.iteration % log_every == 0 || r.iteration == train_cfg.iterations {
            println!("{}", format_report(r));
        }
    })?;
    save_checkpoint(&state, &train_cfg, out)?;
    println!("checkpoint: {}", out.display());
    Ok(())
}

/// Maps [0,1] (the fixed display window) to 8-bit gray.
fn to_png_bytes(img: &[f64]) -> Vec<u8> {
    img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn cmd_denoise(
    config: Option<&Path>,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    seed: Option<u64>,
    raw_weights: bool,
    png_dir: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg: DenoiseConfig = config::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if raw_weights {
        cfg.raw_weights = true;
    }
    config::echo(&cfg);

    let engine = load_engine(checkpoint, !cfg.raw_weights)?;
    let table = read_tensor_table(input, IMAGE_MAGIC)?;
    let y = table
        .iter()
        .find(|(n, _)| n == "y")
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::format(0, "input archive has no tensor \"y\""))?;
    let shape = y.shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::dimension(format!("input tensor \"y\" must be [N,1,H,W], got {shape:?}")).into());
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let stride = h * w;

    // One generator evaluation per image, each on its own noise stream so
    // results do not depend on worker scheduling.
    let outputs: Result<Vec<(Tensor, f64)>, Error> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = Tensor::new(y.data()[i * stride..(i + 1) * stride].to_vec(), &[1, 1, h, w])?;
            let mut noise = NoiseSource::for_stream(cfg.seed, Stream::Inference, i as u64);
            let t0 = Instant::now();
            let xi = engine.denoise(&yi, &mut noise)?;
            Ok((xi, t0.elapsed().as_secs_f64() * 1e3))
        })
        .collect();
    let outputs = outputs?;
    let mut denoised = Vec::with_capacity(n * stride);
    for (i, (xi, ms)) in outputs.iter().enumerate() {
        println!("image={i} time_ms={ms:.3}");
        denoised.extend_from_slice(xi.data());
    }
    println!("nfe={} images={n}", engine.evaluations());

    let x = Tensor::new(denoised, &shape)?;
    write_tensor_table(output, IMAGE_MAGIC, &[("x", &x), ("y", &y)])?;
    println!("wrote: {}", output.display());

    if let Some(dir) = png_dir {
        fs::create_dir_all(dir).map_err(Error::from)?;
        for i in 0..n {
            let bytes = to_png_bytes(&x.data()[i * stride..(i + 1) * stride]);
            let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
                .expect("buffer length matches dimensions");
            let path = dir.join(format!("img_{i:04}.png"));
            img.save(&path)
                .map_err(|e| Error::format(0, format!("cannot write {}: {e}", path.display())))?;
        }
        println!("wrote: {} PNG files in {}", n, dir.display());
    }
    Ok(())
}

fn find_tensor(path: &Path, name: &str) -> Result<Tensor, CliError> {
    let table = read_tensor_table(path, IMAGE_MAGIC)?;
    table
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::format(0, format!("{} has no tensor {name:?}", path.display())).into())
}

fn cmd_eval(
    config: Option<&Path>,
    pred: &Path,
    reference: &Path,
    out_dir: &Path,
    pred_tensor: Option<&str>,
    ref_tensor: Option<&str>,
) -> Result<(), CliError> {
    let mut cfg: EvalConfig = config::load(config)?;
    if let Some(t) = pred_tensor {
        cfg.pred_tensor = t.to_string();
    }
    if let Some(t) = ref_tensor {
        cfg.ref_tensor = t.to_string();
    }
    if cfg.roi_size == 0 || !(cfg.data_range > 0.0) {
        return Err(CliError::Usage("roi_size and data_range must be positive".into()));
    }
    config::echo(&cfg);

    let p = find_tensor(pred, &cfg.pred_tensor)?;
    let r = find_tensor(reference, &cfg.ref_tensor)?;
    if p.shape() != r.shape() {
        return Err(Error::contract(format!(
            "prediction shape {:?} does not match reference shape {:?}",
            p.shape(),
            r.shape()
        ))
        .into());
    }
    fs::create_dir_all(out_dir).map_err(Error::from)?;

    let rep = report(&p, &r, cfg.data_range)?;
    fs::write(out_dir.join("metrics.csv"), rep.to_csv()).map_err(Error::from)?;
    println!(
        "metrics: psnr_mean={} psnr_std={} ssim_mean={} ssim_std={}",
        rep.psnr_mean, rep.psnr_std, rep.ssim_mean, rep.ssim_std
    );

    let spectrum = rps(&p, &r)?;
    fs::write(out_dir.join("rps.csv"), spectrum.profile.to_csv()).map_err(Error::from)?;
    println!("rps: dc_power={}", spectrum.dc_power);

    // Tile every image with non-overlapping ROIs; the flatness guard inside
    // the spectrum estimator drops any that contain structure.
    let (h, w) = (p.shape()[2], p.shape()[3]);
    if cfg.roi_size > h || cfg.roi_size > w {
        return Err(CliError::Usage(format!(
            "roi_size {} exceeds the {h}x{w} image extent",
            cfg.roi_size
        )));
    }
    let mut rois = Vec::new();
    let mut top = 0;
    while top + cfg.roi_size <= h {
        let mut left = 0;
        while left + cfg.roi_size <= w {
            rois.push(Roi { top, left });
            left += cfg.roi_size;
        }
        top += cfg.roi_size;
    }
    let noise = nps(&p, &rois, cfg.roi_size)?;
    fs::write(out_dir.join("nps.csv"), noise.profile.to_csv()).map_err(Error::from)?;
    println!(
        "nps: total_power={} rois={} rejected={}",
        noise.total_power, noise.roi_count, noise.rejected_count
    );
    for name in ["metrics.csv", "rps.csv", "nps.csv"] {
        println!("wrote: {}", out_dir.join(name).display());
    }
    Ok(())
}
