//! Command implementations behind the `snapspec` binary.
//!
//! Exit codes: 0 success, 1 I/O failure or failed check, 2 malformed
//! input (file format, config, usage), 3 geometry mismatch.

use clap::{Args, Parser, Subcommand};
use snapspec::gradcheck::{self, NetCheckOptions};
use snapspec::io;
use snapspec::metrics;
use snapspec::net::checkpoint::Checkpoint;
use snapspec::optics::{self, DispersionRule, Mask};
use snapspec::train::{self, ExperimentConfig, TrainOptions};
use snapspec::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "snapspec", version, about = "Snapshot spectral imaging: simulate, train, reconstruct, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a snapshot measurement of a cube.
    Simulate(SimulateArgs),
    /// Train the recovery network (resumes from an existing checkpoint in --out).
    Train(TrainArgs),
    /// Reconstruct a cube from a measurement with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Print PSNR and SSIM of a prediction against a reference cube.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every op and every parameter group.
    Gradcheck(GradcheckArgs),
    /// Write a seeded synthetic dataset.
    MakeDataset(MakeDatasetArgs),
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("mask_source").required(true).args(["mask", "mask_random"])))]
pub struct SimulateArgs {
    #[arg(long)]
    pub cube: PathBuf,
    /// Mask file in the MASK1 text format.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Draw a Bernoulli(0.5) mask from this seed instead.
    #[arg(long)]
    pub mask_random: Option<u64>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Seed of the measurement noise.
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the mask used (useful with --mask-random).
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ignore any checkpoint already in --out.
    #[arg(long)]
    pub fresh: bool,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub meas: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-band 8-bit grayscale PNGs.
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Architecture and seed; the micro configuration when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Spatial size of the check instance.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 20)]
    pub op_trials: usize,
    #[arg(long, default_value_t = 24)]
    pub coords: usize,
    /// Negative control: deliberately corrupt this group's gradient.
    #[arg(long)]
    pub corrupt_group: Option<String>,
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Cube geometry as HxWxC.
    #[arg(long)]
    pub geometry: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encoder depth the data is meant for; extents not divisible by
    /// 2^levels produce a warning.
    #[arg(long, default_value_t = 2)]
    pub enc_levels: usize,
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// A gradient check failed; carries the failing group names.
    ChecksFailed(Vec<String>),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::ChecksFailed(groups) => write!(f, "gradient check failed for: {}", groups.join(", ")),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Format { .. } | Error::Config(_) | Error::Usage(_)) => 2,
            CliError::Core(Error::Geometry(_) | Error::Shape { .. }) => 3,
            CliError::Core(Error::Io(_)) | CliError::ChecksFailed(_) => 1,
        }
    }
}

pub type CliResult = std::result::Result<(), CliError>;

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Simulate(a) => simulate(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Reconstruct(a) => reconstruct(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::MakeDataset(a) => make_dataset(a, out),
    }
}

fn geometry_error(msg: String) -> CliError {
    CliError::Core(Error::Geometry(msg))
}

pub fn simulate(a: SimulateArgs, out: &mut dyn Write) -> CliResult {
    let cube = io::read_cube(&a.cube)?;
    let mask = match (&a.mask, a.mask_random) {
        (Some(p), _) => io::read_mask(p)?,
        (None, Some(seed)) => Mask::bernoulli(cube.h, cube.w, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)),
        (None, None) => return Err(Error::Usage("one of --mask or --mask-random is required".into()).into()),
    };
    if (mask.h, mask.w) != (cube.h, cube.w) {
        return Err(geometry_error(format!(
            "mask is {}x{} but cube is {}x{}x{}",
            mask.h, mask.w, cube.h, cube.w, cube.c
        )));
    }
    let rule = DispersionRule::unit(cube.c);
    let mut rng = ChaCha8Rng::seed_from_u64(a.noise_seed);
    let y = optics::forward(&cube, &mask, &rule, a.noise, &mut rng)?;
    io::write_measurement(&a.out, &y)?;
    if let Some(p) = &a.mask_out {
        io::write_mask(p, &mask)?;
    }
    writeln!(
        out,
        "cube {}x{}x{} mask {}x{} (fill {:.3}) measurement {}x{} noise {}",
        cube.h,
        cube.w,
        cube.c,
        mask.h,
        mask.w,
        mask.fill_fraction(),
        y.h,
        y.width,
        a.noise
    )?;
    Ok(())
}

pub fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = ExperimentConfig::parse(&std::fs::read_to_string(&a.config)?)?;
    let data = io::load_dataset(&a.data)?;
    let opts = TrainOptions { out_dir: Some(&a.out), resume: !a.fresh, verbose: false };
    writeln!(out, "variant={} ({})", train::trainer::variant_name(&cfg.train), match cfg.train.mask_mode {
        train::MaskMode::Learned => "learned mask",
        train::MaskMode::Fixed => "fixed mask",
    })?;
    let outcome = train::train(&data, &cfg, &opts)?;
    for r in &outcome.history {
        writeln!(out, "{}", r.csv_row())?;
    }
    let (p, s) = outcome.final_eval(&data)?;
    writeln!(out, "final val_psnr={p:.4} val_ssim={s:.4} epochs={}", outcome.trainer.next_epoch)?;
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs, out: &mut dyn Write) -> CliResult {
    let y = io::read_measurement(&a.meas)?;
    let mask = io::read_mask(&a.mask)?;
    let (net, _) = Checkpoint::decode(&std::fs::read(&a.checkpoint)?)?.into_net()?;
    let c = net.config.c;
    if y.h != mask.h || y.width != mask.w + c - 1 {
        return Err(geometry_error(format!(
            "measurement {}x{} does not match mask {}x{} with {c} bands (expected width {})",
            y.h,
            y.width,
            mask.h,
            mask.w,
            mask.w + c - 1
        )));
    }
    net.config.check_geometry(mask.h, mask.w)?;
    let x = net.reconstruct(&y, &mask)?;
    io::write_cube(&a.out, &x)?;
    if let Some(dir) = &a.png {
        io::export_bands_png(&x, dir)?;
    }
    writeln!(out, "reconstructed {}x{}x{}", x.h, x.w, x.c)?;
    Ok(())
}

pub fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let pred = io::read_cube(&a.pred)?;
    let reference = io::read_cube(&a.reference)?;
    if (pred.h, pred.w, pred.c) != (reference.h, reference.w, reference.c) {
        return Err(geometry_error(format!(
            "shape mismatch: pred {}x{}x{} vs ref {}x{}x{}",
            pred.h, pred.w, pred.c, reference.h, reference.w, reference.c
        )));
    }
    let p = metrics::psnr(&pred, &reference, 1.0)?;
    let s = metrics::ssim(&pred, &reference)?;
    writeln!(out, "psnr={p:.4} ssim={s:.4}")?;
    Ok(())
}

pub fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let mut opts = NetCheckOptions { h: a.size, w: a.size, coords_per_group: a.coords, ..Default::default() };
    if let Some(p) = &a.config {
        let cfg = ExperimentConfig::parse(&std::fs::read_to_string(p)?)?;
        opts.config = cfg.recovery;
        opts.seed = cfg.train.seed;
    }
    opts.corrupt_group = a.corrupt_group;
    let ops = gradcheck::check_ops(a.op_trials, opts.seed)?;
    let net = gradcheck::check_network(&opts)?;
    writeln!(out, "== per-op checks ==\n{}== network checks ==\n{}", ops.to_text(), net.to_text())?;
    let failed: Vec<String> = ops.failures().into_iter().chain(net.failures()).map(String::from).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed(failed))
    }
}

pub fn make_dataset(a: MakeDatasetArgs, out: &mut dyn Write) -> CliResult {
    let (h, w, c) = io::parse_geometry(&a.geometry)?;
    let f = 1usize << a.enc_levels;
    if h % f != 0 || w % f != 0 {
        eprintln!("warning: {h}x{w} is not divisible by {f}; the network needs extents divisible by 2^enc_levels");
    }
    let paths = io::make_dataset(&a.out, a.count, h, w, c, a.seed)?;
    writeln!(out, "wrote {} cubes of {h}x{w}x{c} to {}", paths.len(), a.out.display())?;
    Ok(())
}
