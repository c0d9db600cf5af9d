use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mapgan::data::{denormalize, list_images, load_satellite_image, Dataset, Split};
use mapgan::gan::{DiscriminatorConfig, GanLoss, GeneratorConfig};
use mapgan::train::{defaults, load_checkpoint, read_manifest, RunOutputs, StepMetrics, TrainConfig, Trainer};
use mapgan::verify::{self, GradOp};
use mapgan::{Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "mapgan", version, about = "Satellite-to-map translation with a conditional GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on `<data-dir>/train/*.{png,jpg}` concatenated pairs.
    Train(TrainArgs),
    /// Translate bare satellite images with a trained generator.
    Infer(InferArgs),
    /// Compare autodiff gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Saturating,
    NonSaturating,
}

impl From<LossArg> for GanLoss {
    fn from(v: LossArg) -> Self {
        match v {
            LossArg::Saturating => GanLoss::Saturating,
            LossArg::NonSaturating => GanLoss::NonSaturating,
        }
    }
}

fn default_loss() -> LossArg {
    match GanLoss::default() {
        GanLoss::Saturating => LossArg::Saturating,
        GanLoss::NonSaturating => LossArg::NonSaturating,
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus root containing a `train` directory.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = defaults::EPOCHS)]
    epochs: u64,
    #[arg(long, default_value_t = defaults::BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = defaults::LR)]
    lr: f32,
    #[arg(long, default_value_t = defaults::BETA1)]
    beta1: f32,
    #[arg(long, env = "MAPGAN_SEED", default_value_t = defaults::SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = default_loss())]
    gan_loss: LossArg,
    /// Weight of the L1 reconstruction term; 0 disables it.
    #[arg(long, default_value_t = defaults::L1_WEIGHT)]
    l1_weight: f32,
    /// Write a checkpoint every this many epochs (and after the last one).
    #[arg(long, default_value_t = defaults::CHECKPOINT_EVERY)]
    checkpoint_every: u64,
    /// Write a sample grid every this many steps.
    #[arg(long, default_value_t = defaults::SAMPLE_EVERY)]
    sample_every: u64,
    /// Output directory for checkpoints, samples and the metrics log.
    #[arg(long, default_value = defaults::OUTPUT_DIR)]
    out: PathBuf,
    /// Treat the left half of each pair as the map instead of the satellite image.
    #[arg(long)]
    swap_halves: bool,
    /// Side length both halves are resized to.
    #[arg(long, default_value_t = defaults::RESIZE_TO)]
    resize_to: usize,
    /// Encoder blocks in the generator.
    #[arg(long, default_value_t = GeneratorConfig::default().depth)]
    generator_depth: usize,
    /// Filters in the first generator block.
    #[arg(long, default_value_t = GeneratorConfig::default().base_channels)]
    generator_channels: usize,
    /// Filters in the first discriminator stage.
    #[arg(long, default_value_t = DiscriminatorConfig::default().base_channels)]
    discriminator_channels: usize,
    /// Resume from this checkpoint; the run continues with its stored configuration.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            data_root: self.data_dir.clone(),
            output_dir: self.out.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            gan_loss: self.gan_loss.into(),
            l1_weight: self.l1_weight,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            sample_every: self.sample_every,
            resize_to: self.resize_to,
            swap_halves: self.swap_halves,
            generator: GeneratorConfig {
                depth: self.generator_depth,
                base_channels: self.generator_channels,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig {
                base_channels: self.discriminator_channels,
                ..DiscriminatorConfig::default()
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A satellite image, or a directory of them.
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving one PNG per input, named after it.
    #[arg(long)]
    out: PathBuf,
    /// Keep decoder dropout active, so repeated runs differ unless seeded alike.
    #[arg(long)]
    stochastic_infer: bool,
    /// Seeds the dropout draws of `--stochastic-infer`.
    #[arg(long, env = "MAPGAN_SEED", default_value_t = defaults::SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Only check these operations; `unet` selects the end-to-end generator check.
    #[arg(long = "op")]
    ops: Vec<String>,
    /// Central-difference step for the per-operation checks.
    #[arg(long, default_value_t = verify::DEFAULT_EPSILON)]
    epsilon: f32,
    /// Random points per operation.
    #[arg(long, default_value_t = verify::DEFAULT_SEEDS)]
    seeds: u64,
    /// Outer step of the end-to-end generator check.
    #[arg(long, default_value_t = verify::UNET_STEP)]
    unet_step: f32,
    /// Seed of the end-to-end generator check.
    #[arg(long, env = "MAPGAN_SEED", default_value_t = defaults::SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Print the full manifest as JSON.
    #[arg(long)]
    json: bool,
}

/// Failure classes mapped onto the process exit status.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<mapgan::Error> for Failure {
    fn from(e: mapgan::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn progress(m: &StepMetrics) {
    eprintln!(
        "epoch {:>4} step {:>7}  d_loss {:.4}  g_adv {:.4}  g_l1 {:.4}  D(real) {:.3}  D(fake) {:.3}",
        m.epoch, m.step, m.d_loss, m.g_loss_adv, m.g_loss_l1, m.d_real, m.d_fake
    );
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut trainer = match &args.checkpoint {
        Some(path) => {
            let mut t = Trainer::resume(path).with_context(|| format!("resuming from {}", path.display()))?;
            t.config.data_root = args.data_dir.clone();
            t.config.output_dir = args.out.clone();
            t
        }
        None => {
            let cfg = args.config();
            cfg.validate().map_err(usage)?;
            if args.dump_config {
                println!("{}", serde_json::to_string_pretty(&cfg).context("serializing config")?);
                return Ok(());
            }
            Trainer::new(cfg).map_err(usage)?
        }
    };
    let cfg = trainer.config.clone();
    let train_dir = cfg.data_root.join(Split::Train.dir_name());
    if !train_dir.is_dir() {
        return Err(usage(anyhow::anyhow!("{} is not a directory", train_dir.display())));
    }
    let ds = Dataset::open(&cfg.data_root, Split::Train, cfg.resize_to, cfg.swap_halves)?;
    if ds.is_empty() {
        return Err(usage(anyhow::anyhow!("no training images in {}", train_dir.display())));
    }
    let mut out = RunOutputs::create(&cfg.output_dir)?;
    let every = cfg.sample_every.max(1);
    let history = trainer.run(&ds, &mut out, |m| {
        if m.step % every == 0 || m.step == 1 {
            progress(m);
        }
    })?;
    if let Some(last) = history.last() {
        progress(last);
    }
    println!(
        "trained {} steps over {} epochs on {} pairs; outputs in {}",
        trainer.step(),
        trainer.epoch(),
        ds.len(),
        out.dir().display()
    );
    Ok(())
}

fn infer(args: InferArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let size = ckpt.manifest.config.resize_to;
    let mut generator = ckpt.generator()?;

    let inputs = if args.input.is_dir() {
        list_images(&args.input)?
    } else if args.input.is_file() {
        vec![args.input.clone()]
    } else {
        return Err(usage(anyhow::anyhow!("{} does not exist", args.input.display())));
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mode = if args.stochastic_infer { Mode::StochasticEval } else { Mode::Eval };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for path in &inputs {
        let sat = load_satellite_image(path)?;
        let [_, h, w] = <[usize; 3]>::try_from(sat.shape()).expect("normalize yields [3, H, W]");
        if (h, w) != (size, size) {
            return Err(Failure::Run(anyhow::anyhow!(
                "{} is {w}x{h}, the model expects {size}x{size}",
                path.display()
            )));
        }
        let batch = Tensor::stack(&[sat])?;
        let map = generator.translate(&batch, mode, &mut rng)?;
        let target = output_path(&args.out, path)?;
        denormalize(&map)?
            .save_with_format(&target, image::ImageFormat::Png)
            .with_context(|| format!("writing {}", target.display()))?;
        println!("{} -> {}", path.display(), target.display());
    }
    Ok(())
}

fn output_path(dir: &Path, input: &Path) -> anyhow::Result<PathBuf> {
    let stem = input.file_stem().context("input has no file name")?;
    Ok(dir.join(stem).with_extension("png"))
}

fn gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let mut ops = Vec::new();
    let mut unet = args.ops.is_empty();
    for name in &args.ops {
        match (name.as_str(), GradOp::from_name(name)) {
            ("unet", _) => unet = true,
            (_, Some(op)) => ops.push(op),
            (_, None) => {
                let known: Vec<&str> = GradOp::ALL.iter().map(|o| o.name()).collect();
                return Err(usage(anyhow::anyhow!("unknown op `{name}`; expected one of unet, {}", known.join(", "))));
            }
        }
    }
    if args.epsilon <= 0.0 || args.unet_step <= 0.0 {
        return Err(usage(anyhow::anyhow!("steps must be positive")));
    }

    let mut failed = Vec::new();
    println!("{:<32} {:>12} {:>10}  result", "op", "max rel err", "tolerance");
    if !ops.is_empty() || args.ops.is_empty() {
        for s in verify::run_suite(&ops, args.seeds, args.epsilon)? {
            let verdict = if s.passed() { "PASS" } else { "FAIL" };
            println!("{:<32} {:>12.3e} {:>10.0e}  {verdict}", s.op.name(), s.max_relative_error, s.tolerance);
            if !s.passed() {
                failed.push(s.op.name().to_string());
            }
        }
    }
    if unet {
        let r = verify::unet_gradcheck(args.seed, verify::UNET_SAMPLES, args.unet_step)?;
        let passed = r.max_relative_error < verify::TOLERANCE;
        println!(
            "{:<32} {:>12.3e} {:>10.0e}  {}",
            format!("unet ({} params)", r.checked),
            r.max_relative_error,
            verify::TOLERANCE,
            if passed { "PASS" } else { "FAIL" }
        );
        if !passed {
            failed.push("unet".to_string());
        }
    }
    if !failed.is_empty() {
        return Err(Failure::Run(anyhow::anyhow!("over tolerance: {}", failed.join(", "))));
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<(), Failure> {
    let m = read_manifest(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&m).context("serializing manifest")?);
        return Ok(());
    }
    println!("format version {}", m.format_version);
    println!("step {}  epoch {}  cursor {}", m.step, m.epoch, m.cursor);
    println!("gan loss {:?}  l1 weight {}  seed {}", m.config.gan_loss, m.config.l1_weight, m.config.seed);
    println!("{} tensors, {} payload bytes", m.tensors.len(), m.payload_bytes);
    for t in &m.tensors {
        println!("  {:<40} {:?}", t.name, t.shape);
    }
    Ok(())
}
