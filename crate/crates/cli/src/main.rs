//! `pvc`: command-line front end for the pvc-core library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pvc_core::budget::{
    compare_strategies, estimate_flops, read_budget_config, ArchSpec, BudgetReport,
};
use pvc_core::compression::compress;
use pvc_core::input::{prepare_image, prepare_video, read_ppm, video_from_tensor};
use pvc_core::manifest::{
    load_model, read_video_batch, save_model, write_tokens, write_video_batch,
};
use pvc_core::model::PvcModel;
use pvc_core::tensor::{read_pvct, write_pvct};
use pvc_core::verification::{
    check_causality, check_init_identity, check_static_distinct, run_grad_check, GradModule,
};
use pvc_core::vit::{patchify, vit_forward, PvcConfig};
use pvc_core::PvcError;

#[derive(Parser)]
#[command(
    name = "pvc",
    version,
    about = "Progressive visual token compression toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a model and save its weights and manifest.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Standardize an image or video into encoder input features.
    Pipeline(PipelineArgs),
    /// Run the encoder over a feature batch.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        /// Feature manifest written by `pipeline`.
        #[arg(long)]
        input: PathBuf,
        /// Output stem; writes `<out>.pvct` and `<out>.toml`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress encoded features to per-frame tokens.
    Compress {
        #[command(flatten)]
        model: ModelArgs,
        /// Feature manifest written by `forward`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify that no frame's output depends on later frames.
    CheckCausality {
        #[command(flatten)]
        check: CheckArgs,
        #[arg(long, default_value_t = 6)]
        frames: usize,
    },
    /// Verify that zero gates reproduce the plain per-frame encoder.
    CheckInitIdentity {
        #[command(flatten)]
        check: CheckArgs,
        #[arg(long, default_value_t = 3)]
        frames: usize,
    },
    /// Verify that repeated static frames are encoded distinctly.
    CheckStatic {
        #[command(flatten)]
        check: CheckArgs,
        #[arg(long, default_value_t = 4)]
        frames: usize,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        /// adaln, temporal_embedding, tmha_causal, progressive_layer, compression or all.
        #[arg(long)]
        module: String,
        #[arg(long, env = "PVC_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Token and FLOPs budget for a preset or config file.
    Budget {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Flat `key = value` file; `preset` inside picks the starting point.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also report deltas against this preset.
        #[arg(long)]
        baseline: Option<String>,
        /// Recompute plain layers for every image repeat.
        #[arg(long)]
        no_reuse: bool,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Model manifest; without it a fresh model is initialized.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Config preset used for fresh models: full or toy.
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long, env = "PVC_SEED", default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn load(&self) -> Result<PvcModel, Failure> {
        match &self.model {
            Some(path) => Ok(load_model(path)?),
            None => Ok(PvcModel::init(
                &PvcConfig::preset(&self.config)?,
                self.seed,
            )?),
        }
    }
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long, env = "PVC_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Binary PPM image.
    #[arg(long, conflicts_with = "video", required_unless_present = "video")]
    image: Option<PathBuf>,
    /// PVCT frame stack `[T, H, W, 3]` of byte values.
    #[arg(long)]
    video: Option<PathBuf>,
    /// Image repeats (defaults to the config value).
    #[arg(long)]
    t_img: Option<usize>,
    /// Frames to sample from a video.
    #[arg(long)]
    frames: Option<usize>,
    /// Tile images (and videos) on a grid of at most this many tiles.
    #[arg(long)]
    max_tiles: Option<usize>,
    /// Tile side in pixels (must match the model input size).
    #[arg(long)]
    tile_px: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// An error with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<PvcError> for Failure {
    fn from(e: PvcError) -> Self {
        Failure {
            code: if e.is_io() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("pvc: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Returns whether the command's checks passed.
fn run(command: Command) -> Result<bool, Failure> {
    match command {
        Command::Init { model, out } => {
            let m = model.load()?;
            let path = save_model(&m, &out, model.model.is_none().then_some(model.seed))?;
            println!("manifest={}", path.display());
            println!("params={}", m.param_count());
            Ok(true)
        }
        Command::Pipeline(args) => pipeline(args),
        Command::Forward { model, input, out } => {
            let m = model.load()?;
            let v = read_video_batch(&input)?;
            let encoded = vit_forward(&v, &m.cfg, &m.layers)?;
            let path = write_video_batch(&encoded, &out)?;
            print_shape("encoded", &path, encoded.features.shape());
            Ok(true)
        }
        Command::Compress { model, input, out } => {
            let m = model.load()?;
            let v = read_video_batch(&input)?;
            let tokens = compress(&v, &m.compression, &m.cfg)?;
            let path = write_tokens("compressed", &tokens, &v.timestamps, v.is_static, &out)?;
            print_shape("compressed", &path, tokens.shape());
            Ok(true)
        }
        Command::CheckCausality { check, frames } => report(check_causality(
            &PvcConfig::preset(&check.config)?,
            check.seed,
            frames,
        )?),
        Command::CheckInitIdentity { check, frames } => report(check_init_identity(
            &PvcConfig::preset(&check.config)?,
            check.seed,
            frames,
        )?),
        Command::CheckStatic { check, frames } => report(check_static_distinct(
            &PvcConfig::preset(&check.config)?,
            check.seed,
            frames,
        )?),
        Command::GradCheck {
            module,
            seed,
            tol,
            report,
        } => {
            let modules = if module == "all" {
                GradModule::ALL.to_vec()
            } else {
                vec![module.parse()?]
            };
            let mut text = String::new();
            let mut passed = true;
            for m in modules {
                let r = run_grad_check(m, seed, tol)?;
                passed &= r.passed;
                text.push_str(&r.to_text());
            }
            print!("{text}");
            if let Some(path) = report {
                std::fs::write(&path, &text).map_err(|e| Failure {
                    code: 3,
                    message: format!("{}: {e}", path.display()),
                })?;
            }
            Ok(passed)
        }
        Command::Budget {
            preset,
            config,
            baseline,
            no_reuse,
        } => budget(preset, config, baseline, !no_reuse),
    }
}

fn report(outcome: pvc_core::verification::CheckOutcome) -> Result<bool, Failure> {
    print!("{}", outcome.to_text());
    Ok(outcome.passed)
}

fn print_shape(kind: &str, manifest: &Path, shape: &[usize]) {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    println!("manifest={}", manifest.display());
    println!("{kind}.shape={}", dims.join("x"));
}

fn pipeline(args: PipelineArgs) -> Result<bool, Failure> {
    let mut model = args.model.load()?;
    if let Some(px) = args.tile_px {
        if args.model.model.is_some() && px != model.cfg.image_size {
            return Err(usage(format!(
                "--tile-px {px} differs from the model input size {}",
                model.cfg.image_size
            )));
        }
        if px != model.cfg.image_size {
            let cfg = PvcConfig {
                image_size: px,
                ..model.cfg.clone()
            };
            model = PvcModel::init(&cfg, args.model.seed)?;
        }
    }
    if let Some(t) = args.t_img {
        model.cfg.t_img = t;
    }
    let prepared = match (&args.image, &args.video) {
        (Some(path), _) => {
            if args.frames.is_some() {
                return Err(usage("--frames applies to videos only"));
            }
            prepare_image(&read_ppm(path)?, &model.cfg, args.max_tiles.unwrap_or(1))?
        }
        (None, Some(path)) => {
            if args.t_img.is_some() {
                return Err(usage("--t-img applies to images only"));
            }
            let video = video_from_tensor(&read_pvct(path)?)?;
            let count = args.frames.unwrap_or(model.cfg.frame_min);
            prepare_video(&video, &model.cfg, count, args.max_tiles)?
        }
        (None, None) => return Err(usage("one of --image or --video is required")),
    };
    let batch = patchify(
        &prepared.pixels,
        &model.cfg,
        &model.stem,
        prepared.is_static,
    )?;
    write_pvct(&prepared.pixels, args.out.with_extension("pixels.pvct"))?;
    let path = write_video_batch(&batch, &args.out)?;
    print_shape("features", &path, batch.features.shape());
    println!("grid={}x{}", prepared.grid.rows, prepared.grid.cols);
    println!("is_static={}", prepared.is_static);
    Ok(true)
}

fn budget(
    preset: Option<String>,
    config: Option<PathBuf>,
    baseline: Option<String>,
    reuse: bool,
) -> Result<bool, Failure> {
    let (arch, workload) = match (preset, config) {
        (_, Some(path)) => read_budget_config(path)?,
        (Some(name), None) => ArchSpec::preset(&name)?,
        (None, None) => return Err(usage("one of --preset or --config is required")),
    };
    let r = estimate_flops(&workload, &arch, reuse)?;
    print!("{}", r.to_text());
    if let Some(name) = baseline {
        let (a, w) = ArchSpec::preset(&name)?;
        let base: BudgetReport = estimate_flops(&w, &a, reuse)?;
        let cmp = compare_strategies(&[base, r])?;
        print!("{}", cmp.to_text());
        eprint!("{}", cmp.to_table());
    }
    Ok(true)
}
