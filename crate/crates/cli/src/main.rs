//! `posr`: degrade, train, infer, eval, params and selfcheck.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posr_core::blocks::{count_parameters, RcabSpec};
use posr_core::data::{degrade, list_pngs, load_image, read_manifest, save_image, write_manifest};
use posr_core::generator::{self, Generator, GeneratorSpec};
use posr_core::metrics::{write_metrics_csv, MetricOptions};
use posr_core::trainer::{
    evaluate, evaluate_pairs, infer_image, load_training_set, train, Checkpoint, EvalOptions, TileOptions,
    TrainConfig, Trainer, TrainingData,
};
use posr_core::{selfcheck, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "posr", version, about = "Perception-oriented super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bicubic-downscale every PNG in a directory and write a manifest.
    Degrade(DegradeArgs),
    /// Run stage 1 (reconstruction) or stage 2 (adversarial) training.
    Train(TrainArgs),
    /// Upscale one PNG or every PNG in a directory.
    Infer(InferArgs),
    /// Degrade, upscale and measure every image of a manifest.
    Eval(EvalArgs),
    /// Print the generator parameter count.
    Params(ParamsArgs),
    /// Run the gradient suite, metric oracles and kernel checks.
    Selfcheck,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Widen the kernel when shrinking.
    #[arg(long)]
    antialias: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML config. Omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage: Option<u8>,
    /// Loss-weight preset for stage 2.
    #[arg(long)]
    region: Option<u8>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stage-1 checkpoint a stage-2 run starts from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Any config field as `dotted.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Validate and print the resolved config without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file, or output directory when `--in` is a directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    tile: usize,
    #[arg(long, default_value_t = 8)]
    overlap: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Generator checkpoint; the images are degraded and upscaled.
    #[arg(long, conflicts_with = "sr_dir", required_unless_present = "sr_dir")]
    ckpt: Option<PathBuf>,
    /// Directory of already upscaled images matched by file name.
    #[arg(long)]
    sr_dir: Option<PathBuf>,
    /// HR image list.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    border: usize,
    /// Measure PSNR/SSIM on luma only (the default).
    #[arg(long, conflicts_with = "all_channels")]
    y_only: bool,
    /// Measure PSNR/SSIM over all RGB channels.
    #[arg(long)]
    all_channels: bool,
    /// Degrade without widening the kernel.
    #[arg(long)]
    no_antialias: bool,
    /// Also save the upscaled images here.
    #[arg(long)]
    save_sr: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    tile: usize,
    #[arg(long, default_value_t = 8)]
    overlap: usize,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long, default_value_t = 128)]
    blocks: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long)]
    no_share: bool,
    #[arg(long)]
    no_attention: bool,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = 16)]
    reduction: usize,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else if e.is_io() || matches!(e, Error::Checkpoint(_)) {
            EXIT_IO
        } else {
            EXIT_USAGE
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Degrade(a) => cmd_degrade(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Params(a) => cmd_params(a),
        Command::Selfcheck => cmd_selfcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn file_name(p: &Path) -> PathBuf {
    p.file_name().map(PathBuf::from).unwrap_or_else(|| p.to_owned())
}

fn cmd_degrade(a: DegradeArgs) -> Outcome {
    if a.scale == 0 {
        return Err(Failure::usage("--scale must be positive"));
    }
    if !a.input.is_dir() {
        return Err(Failure::usage(format!("{} is not a directory", a.input.display())));
    }
    let files = list_pngs(&a.input)?;
    let mut images = Vec::with_capacity(files.len());
    let mut failures = Vec::new();
    for path in &files {
        match load_image(path) {
            Ok(img) => images.push(img),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("unreadable: {f}");
        }
        return Err(Failure {
            code: EXIT_IO,
            message: format!("{} of {} inputs could not be read; nothing written", failures.len(), files.len()),
        });
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    if files.is_empty() {
        log::warn!("{} contains no PNG files", a.input.display());
    }
    let mut names = Vec::with_capacity(files.len());
    for (path, img) in files.iter().zip(&images) {
        let lr = degrade(img, a.scale, a.antialias)?;
        let name = file_name(path);
        save_image(&lr, &a.out.join(&name))?;
        println!("{} {}x{} -> {}x{}", name.display(), img.width(), img.height(), lr.width(), lr.height());
        names.push(name);
    }
    write_manifest(&a.out.join("manifest.txt"), &names)?;
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.stage {
        c.stage = s;
    }
    if a.region.is_some() {
        c.region = a.region;
    }
    if let Some(p) = &a.init {
        c.init_checkpoint = Some(p.clone());
    }
    if let Some(n) = a.iterations {
        c.iterations = n;
    }
    if let Some(p) = &a.output {
        c.output_dir = p.clone();
    }
    if let Some(p) = &a.manifest {
        c.data.manifest = Some(p.clone());
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
    if let Some(lr) = a.lr {
        c.lr_initial = lr;
    }
    if c.stage == 1 && c.region.is_some() {
        return Err(Failure::usage("--region selects stage-2 loss weights and cannot be used with stage 1"));
    }
    if c.stage == 2 && c.init_checkpoint.is_none() && a.resume.is_none() {
        return Err(Failure::usage(
            "stage 2 requires a stage-1 checkpoint: pass --init <ckpt> or set init_checkpoint",
        ));
    }
    if c.stage == 2 && c.init_checkpoint.is_none() {
        // a resumed stage-2 run carries its generator in the checkpoint
        c.init_checkpoint = a.resume.clone();
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let config = resolve_train_config(&a)?;
    let w = config.effective_weights()?;
    println!(
        "stage {} weights lambda={} eta_pixel={} eta_feature={}",
        config.stage, w.lambda, w.eta_pixel, w.eta_feature
    );
    if a.dry_run {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let set = load_training_set(&config)?;
    let data = TrainingData::new(&set, config.data.quantize_lr, config.data.augment)?;
    log::info!("{} training patches", data.len());
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(config.clone(), data, &Checkpoint::read(p)?)?,
        None => Trainer::new(config.clone(), data)?,
    };
    let ckpt = train(trainer)?;
    println!(
        "finished iteration {} -> {}",
        ckpt.iteration,
        config.output_dir.join(posr_core::trainer::FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn load_generator(path: &Path) -> Result<Generator, Failure> {
    let ckpt = Checkpoint::read(path)?;
    let config = TrainConfig::from_toml(&ckpt.config_toml)?;
    Ok(Generator::from_params(config.generator_spec(), &ckpt.params_with_prefix(generator::PREFIX))?)
}

fn tiles(tile: usize, overlap: usize) -> Result<TileOptions, Failure> {
    if tile == 0 || overlap >= tile {
        return Err(Failure::usage("--tile must be positive and larger than --overlap"));
    }
    Ok(TileOptions { tile, overlap })
}

fn cmd_infer(a: InferArgs) -> Outcome {
    let tiles = tiles(a.tile, a.overlap)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        list_pngs(&a.input)?
            .into_iter()
            .map(|p| {
                let out = a.out.join(file_name(&p));
                (p, out)
            })
            .collect()
    } else if a.input.is_file() {
        vec![(a.input.clone(), a.out.clone())]
    } else {
        return Err(Failure::usage(format!("{} does not exist", a.input.display())));
    };
    let g = load_generator(&a.ckpt)?;
    for (src, dst) in jobs {
        let lr = load_image(&src)?;
        let sr = infer_image(&g, &lr, tiles)?;
        save_image(&sr, &dst)?;
        println!("{} -> {} ({}x{})", src.display(), dst.display(), sr.width(), sr.height());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let metrics = MetricOptions {
        border: a.border,
        y_only: !a.all_channels,
    };
    let images = read_manifest(&a.manifest)?;
    let rows = match (&a.ckpt, &a.sr_dir) {
        (Some(ckpt), None) => {
            let g = load_generator(ckpt)?;
            let opts = EvalOptions {
                metrics,
                antialias: !a.no_antialias,
                tiles: tiles(a.tile, a.overlap)?,
                save_dir: a.save_sr.clone(),
            };
            evaluate(&g, &images, &opts)?
        }
        (None, Some(dir)) => evaluate_pairs(dir, &images, metrics)?,
        _ => return Err(Failure::usage("pass exactly one of --ckpt and --sr-dir")),
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_metrics_csv(&a.out, &rows)?;
    for r in &rows {
        println!(
            "{} psnr={:.4} ssim={:.4} rmse={:.4} region={}",
            r.image, r.psnr, r.ssim, r.rmse, r.region
        );
    }
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> Outcome {
    let spec = GeneratorSpec {
        block: RcabSpec {
            share_parameters: !a.no_share,
            use_attention: !a.no_attention,
            reduction: a.reduction,
            ..RcabSpec::new(a.channels)
        },
        ..GeneratorSpec::new(a.blocks, a.channels, a.scale)
    };
    spec.validate()?;
    let n = count_parameters(&spec);
    println!("{n} ({:.2}M)", n as f64 / 1e6);
    Ok(())
}

fn cmd_selfcheck() -> Outcome {
    let outcomes = selfcheck::run_all();
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("{failed} of {} checks failed", outcomes.len()),
        });
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}
