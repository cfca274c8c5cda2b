//! `nlden`: command-line front end for the denoiser library.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or malformed input), 3 numerical failure. Reports are printed
//! as JSON on stdout; diagnostics go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use nlden::gradcheck::{self, GradCheckOptions};
use nlden::network::{self, Denoiser, NetworkConfig};
use nlden::noise::{self, NoisePoint, NoiseProfile};
use nlden::raw;
use nlden::tape::Fault;
use nlden::train::{self, TrainConfig, Trainer};
use nlden::{Error, Tensor};

#[derive(Parser)]
#[command(
    name = "nlden",
    version,
    about = "Nonlocal feature matching and filtering denoiser for packed RAW images",
    after_help = "Tensors are NTF files: magic \"NTENSOR1\", little-endian u32 rank, u32 extents, \
                  then little-endian f32 values in row-major order. A mosaic NTF with a JSON sidecar \
                  of the same stem ({cfa, black_level, saturation, iso, sensor_id}) is packed to \
                  R,Gr,B,Gb and normalised on load; a bare NTF is taken as normalised packed data \
                  (CxHxW or BxCxHxW). Noise profiles are JSON {sensor_id, points: [{iso, a, b}]}.\n\n\
                  Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        /// Network configuration JSON; defaults to the micro configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Spatial size of the network test input.
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// Check the individual layers only.
        #[arg(long)]
        skip_network: bool,
        /// Scale every convolution weight gradient by this factor.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Fit the noise level function sigma^2(x) = a*x + b.
    EstimateNoise {
        #[arg(long)]
        noisy: PathBuf,
        /// Clean reference; without it the single-image estimator is used.
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        bins: usize,
        /// Write the fit as a one-point noise profile.
        #[arg(long)]
        out: Option<PathBuf>,
        /// ISO recorded in the written profile (default: sidecar ISO, else 100).
        #[arg(long)]
        iso: Option<f64>,
        #[arg(long, default_value = "estimated")]
        sensor_id: String,
    },
    /// Add Poisson-Gaussian noise interpolated from a profile.
    Synth {
        #[arg(long)]
        clean: PathBuf,
        /// Profile JSON file.
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        iso: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output NTF (normalised packed, unclipped).
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise with a trained checkpoint; the noise map is built from the input.
    Denoise {
        #[arg(long)]
        noisy: PathBuf,
        /// A `step_<N>` checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "b", conflicts_with_all = ["profile", "iso"])]
        a: Option<f64>,
        #[arg(long, requires = "a")]
        b: Option<f64>,
        #[arg(long, requires = "iso")]
        profile: Option<PathBuf>,
        #[arg(long, requires = "profile")]
        iso: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch or resume from a checkpoint.
    Train {
        /// Training configuration JSON (crop_size, batch_size, total_steps,
        /// lr_start, lr_end, adam, seed, checkpoint_interval, network).
        #[arg(long)]
        config: PathBuf,
        /// Directory of training images.
        #[arg(long)]
        data: PathBuf,
        /// Profile JSON file or directory of them.
        #[arg(long)]
        profiles: PathBuf,
        /// Output directory for checkpoints and train.log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// PSNR between two tensors (peak 1).
    Psnr {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Exact learnable parameter count of a network configuration.
    Params {
        /// Network configuration JSON; defaults to the 15/9/7 three-scale network.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numerical(_) | Error::Estimation(_) => 3,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = Result<Value, Failure>;

fn config_file<T>(path: &Path, load: impl FnOnce(&Path) -> nlden::Result<T>) -> Result<T, Failure> {
    load(path).map_err(|e| Failure::usage(format!("invalid configuration: {e}")))
}

fn network_config(path: Option<&Path>, default: NetworkConfig) -> Result<NetworkConfig, Failure> {
    match path {
        Some(p) => config_file(p, NetworkConfig::load),
        None => Ok(default),
    }
}

fn grad_check(
    config: Option<&Path>,
    seed: u64,
    tolerance: f64,
    size: usize,
    skip_network: bool,
    fault: Option<f64>,
) -> CmdResult {
    let cfg = network_config(config, NetworkConfig::micro())?;
    if size == 0 || size % cfg.size_multiple() != 0 {
        return Err(Failure::usage(format!(
            "--size {size} must be a positive multiple of {}",
            cfg.size_multiple()
        )));
    }
    let opts = GradCheckOptions {
        tolerance,
        seed,
        fault: fault.map(Fault::ScaleConvWeightGrad),
        ..Default::default()
    };
    let mut cases = gradcheck::layer_cases(seed)?;
    if !skip_network {
        cases.push(gradcheck::network_case(&cfg, size, seed)?);
    }
    let report = gradcheck::run_suite(&cases, &opts)?;
    let value = serde_json::to_value(&report).expect("serialisable report");
    if !report.passed {
        println!("{value}");
        return Err(Failure {
            code: 3,
            msg: format!(
                "max relative error {:.3e} exceeds tolerance {tolerance:e}",
                report.max_rel_err
            ),
        });
    }
    Ok(value)
}

fn sidecar_iso(path: &Path) -> Option<f64> {
    raw::RawImage::load(path).ok().map(|r| r.meta.iso)
}

fn estimate_noise(
    noisy: &Path,
    clean: Option<&Path>,
    bins: usize,
    out: Option<&Path>,
    iso: Option<f64>,
    sensor_id: &str,
) -> CmdResult {
    if bins < 2 {
        return Err(Failure::usage("--bins must be at least 2"));
    }
    let y = raw::load_normalized(noisy)?;
    let (fit, method) = match clean {
        Some(c) => (noise::estimate_nlf_paired(&raw::load_normalized(c)?, &y, bins)?, "paired"),
        None => (noise::estimate_nlf_single(&y, bins)?, "single_image"),
    };
    let mut report = json!({ "method": method, "fit": fit });
    if let Some(path) = out {
        let iso = iso.or_else(|| sidecar_iso(noisy)).unwrap_or(100.0);
        let profile = NoiseProfile::new(sensor_id, vec![NoisePoint { iso, a: fit.a, b: fit.b }])
            .map_err(|e| Failure {
                code: 3,
                msg: format!("fitted coefficients do not form a valid profile: {e}"),
            })?;
        profile.save(path)?;
        report["profile"] = json!(path);
    }
    Ok(report)
}

fn load_profile(path: &Path) -> Result<NoiseProfile, Failure> {
    let mut all = NoiseProfile::load_all(path)?;
    if all.len() != 1 {
        return Err(Failure::usage(format!(
            "{} holds {} profiles, expected one",
            path.display(),
            all.len()
        )));
    }
    Ok(all.remove(0))
}

fn synth(clean: &Path, profile: &Path, iso: f64, seed: u64, out: &Path) -> CmdResult {
    let x = raw::load_normalized(clean)?;
    let profile = load_profile(profile)?;
    let (a, b) = profile.interpolate_iso(iso).map_err(|e| Failure::usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = noise::sample_poisson_gaussian(&x, a, b, &mut rng)?;
    y.save(out)?;
    Ok(json!({
        "out": out,
        "sensor_id": profile.sensor_id,
        "iso": iso,
        "a": a,
        "b": b,
        "shape": y.shape(),
        "seed": seed,
    }))
}

fn denoise(
    noisy: &Path,
    checkpoint: &Path,
    coeffs: (Option<f64>, Option<f64>),
    profile: Option<(&Path, f64)>,
    out: &Path,
) -> CmdResult {
    let (a, b) = match (coeffs, profile) {
        ((Some(a), Some(b)), None) => (a, b),
        ((None, None), Some((p, iso))) => load_profile(p)?
            .interpolate_iso(iso)
            .map_err(|e| Failure::usage(e.to_string()))?,
        _ => return Err(Failure::usage("give either --a and --b or --profile and --iso")),
    };
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Failure::usage("noise coefficients must be non-negative"));
    }
    let (manifest, state) = train::load_checkpoint(checkpoint)?;
    let net = Denoiser::new(&manifest.config.network)?;
    let y = raw::load_normalized(noisy)?;
    let map = noise::build_noise_map(&y, a, b)?;
    let (_, _, h, w) = y.dims4()?;
    let m = net.cfg.size_multiple();
    let den = net.denoise(&state.store, &y, &map)?;
    if !den.all_finite() {
        return Err(Failure {
            code: 3,
            msg: "network produced non-finite output".into(),
        });
    }
    den.save(out)?;
    Ok(json!({
        "out": out,
        "a": a,
        "b": b,
        "shape": den.shape(),
        "padded_to": [h.div_ceil(m) * m, w.div_ceil(m) * m],
        "cropped_to": [h, w],
        "checkpoint_step": manifest.step,
    }))
}

fn run_train(config: &Path, data: &Path, profiles: &Path, out: &Path, resume: Option<&Path>) -> CmdResult {
    let (cfg, state) = match resume {
        Some(dir) => {
            let (manifest, state) = train::load_checkpoint(dir)?;
            (manifest.config, Some(state))
        }
        None => (config_file(config, TrainConfig::load)?, None),
    };
    let images = train::load_image_dir(data)?;
    let profiles = NoiseProfile::load_all(profiles)?;
    let trainer = Trainer::new(cfg, images, profiles)?;
    let mut state = match state {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    let first = state.step;
    let records = trainer.run(&mut state, Some(out), |r| {
        if r.step % 50 == 0 || r.step == 1 {
            eprintln!("step {} lr {:.3e} loss {:.5}", r.step, r.lr, r.loss);
        }
    })?;
    Ok(json!({
        "out": out,
        "images": trainer.num_images(),
        "start_step": first,
        "final_step": state.step,
        "final_loss": records.last().map(|r| r.loss),
        "checkpoint": train::checkpoint_dir(out, state.step),
        "last_val": state.last_val,
        "best_val": state.best_val,
    }))
}

fn psnr(a: &Path, b: &Path) -> CmdResult {
    let x = Tensor::load(a)?;
    let y = Tensor::load(b)?;
    Ok(json!({ "psnr_db": train::psnr(&x, &y)? }))
}

fn params(config: Option<&Path>) -> CmdResult {
    let cfg = network_config(config, NetworkConfig::default())?;
    Ok(json!({ "params": network::count_params(&cfg)?, "config": cfg }))
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::GradCheck {
            config,
            seed,
            tolerance,
            size,
            skip_network,
            inject_fault,
        } => grad_check(config.as_deref(), seed, tolerance, size, skip_network, inject_fault),
        Command::EstimateNoise {
            noisy,
            clean,
            bins,
            out,
            iso,
            sensor_id,
        } => estimate_noise(&noisy, clean.as_deref(), bins, out.as_deref(), iso, &sensor_id),
        Command::Synth {
            clean,
            profile,
            iso,
            seed,
            out,
        } => synth(&clean, &profile, iso, seed, &out),
        Command::Denoise {
            noisy,
            checkpoint,
            a,
            b,
            profile,
            iso,
            out,
        } => denoise(
            &noisy,
            &checkpoint,
            (a, b),
            profile.as_deref().zip(iso),
            &out,
        ),
        Command::Train {
            config,
            data,
            profiles,
            out,
            resume,
        } => run_train(&config, &data, &profiles, &out, resume.as_deref()),
        Command::Psnr { a, b } => psnr(&a, &b),
        Command::Params { config } => params(config.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
