//! `icfsr`: train, apply and evaluate scale-conditional super-resolution models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
//! 3 data error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icfsr::checkpoint::{checkpoint_dtype, Checkpoint};
use icfsr::metrics::{error_map, mae, psnr, report_tsv, ssim, Mode, ReportRow};
use icfsr::net::{forward, ModelParameters, ScaleCondition};
use icfsr::pairgen::{crop_divisible, export_dataset, generate_llr_lr, DEFAULT_TEMPLATE};
use icfsr::parallel::Execution;
use icfsr::resample::{bicubic_resize, gaussian_blur, nearest_resize, Ratio};
use icfsr::tensor::Scalar;
use icfsr::train::{Precision, StepRecord, TrainConfig, Trainer};
use icfsr::{load_image, save_image, Image};

const CHECKPOINT_FILE: &str = "model.ckpt";
const LOG_FILE: &str = "train_log.tsv";
const CONFIG_FILE: &str = "train_config.txt";

#[derive(Parser, Debug)]
#[command(
    name = "icfsr",
    version,
    about = "Self-supervised single-image super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on low-resolution images only.
    Train(TrainArgs),
    /// Enlarge images with a trained model: f(x | s).
    Sr(ApplyArgs),
    /// Shrink images with a trained model: f(x | 1/s).
    Downsample(ApplyArgs),
    /// Compare predictions with ground truth (PSNR, SSIM, MAE).
    Eval(EvalArgs),
    /// Resample images with a fixed kernel for comparison.
    Baseline(BaselineArgs),
    /// Export (f(x | 1/s), x) pairs as a paired dataset.
    GenPairs(GenPairsArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// LR training image or directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    /// key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (only --epochs may change).
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Single training scale (shorthand for --scales k).
    #[arg(long, conflicts_with = "scales")]
    scale: Option<u32>,
    /// Comma-separated scale set, e.g. 2,4,8.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    scales: Option<Vec<u32>>,
    /// Draw one scale per step instead of training all scales every step.
    #[arg(long)]
    one_scale_per_step: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_color: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    /// Steps per epoch, or "auto" to derive it from the dataset size.
    #[arg(long)]
    steps_per_epoch: Option<String>,
    /// Accumulation precision: 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
    #[arg(long)]
    resblocks: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    residual_scaling: Option<f64>,
    /// Reduce per-sample gradients in arbitrary order (faster, not reproducible).
    #[arg(long)]
    nondeterministic: bool,
    /// Process batch samples on the calling thread only.
    #[arg(long)]
    sequential: bool,
    /// Also keep a numbered checkpoint every N epochs (0: final only).
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
}

#[derive(Args, Debug)]
struct ApplyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image or directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    /// Factor s of the model's scale set; 1/s is accepted as well.
    #[arg(long, value_parser = parse_model_scale)]
    scale: u32,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricMode {
    Y,
    Rgb,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth images with matching file names.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "y")]
    mode: MetricMode,
    /// Border crop in pixels (default: the scale, or 0 without --scale).
    #[arg(long)]
    shave: Option<usize>,
    /// Scale recorded in the report and used as default shave.
    #[arg(long)]
    scale: Option<u32>,
    /// Method name recorded in the report.
    #[arg(long, default_value = "model")]
    method: String,
    /// Report file (TSV).
    #[arg(long, required_unless_present = "stdout")]
    out: Option<PathBuf>,
    /// Print the report to standard output.
    #[arg(long)]
    stdout: bool,
    /// Directory for per-image error maps.
    #[arg(long)]
    error_maps: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    input: PathBuf,
    /// bicubic, nearest, gaussian+bicubic or gaussian+nearest.
    #[arg(long)]
    method: String,
    /// Resize factor: an integer to enlarge, 1/k to shrink.
    #[arg(long)]
    scale: Ratio,
    /// Gaussian blur sigma for the gaussian+ methods.
    #[arg(long, default_value_t = 0.4)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenPairsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory (or single file) of source images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    scale: u32,
    /// Dataset root; receives LR/, HR/ and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    /// File stem template; {n} is the zero-padded pair index.
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    template: String,
}

fn parse_model_scale(s: &str) -> Result<u32, String> {
    let k = s.strip_prefix("1/").unwrap_or(s);
    match k.trim().parse::<u32>() {
        Ok(k) if k >= 2 => Ok(k),
        _ => Err(format!(
            "expected an integer factor >= 2 (or 1/k), got {s:?}"
        )),
    }
}

/// An error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn data(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 3,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

/// Exit code for a library error raised outside input loading.
fn classify(e: icfsr::Error) -> Failure {
    use icfsr::Error as E;
    let code = match e {
        E::Config(_) | E::Scale(_) | E::InvalidArgument(_) => 2,
        E::Decode { .. }
        | E::UnsupportedFormat(_)
        | E::InvalidImage(_)
        | E::Shape(_)
        | E::Dataset(_)
        | E::CorruptCheckpoint(_)
        | E::CheckpointVersion(_) => 3,
        E::Io { .. } | E::Encode { .. } | E::NonFiniteLoss { .. } => 1,
    };
    Failure {
        code,
        error: e.into(),
    }
}

/// PNG files of `path` (itself if a file), sorted by name.
fn list_inputs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(data(anyhow::anyhow!(
            "input {} does not exist",
            path.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| data(anyhow::anyhow!("cannot read {}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data(anyhow::anyhow!("no PNG images in {}", path.display())));
    }
    Ok(files)
}

fn load_inputs(path: &Path) -> CliResult<Vec<(PathBuf, Image)>> {
    list_inputs(path)?
        .into_iter()
        .map(|p| load_image(&p).map(|img| (p, img)).map_err(data))
        .collect()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| runtime(anyhow::anyhow!("cannot create {}: {e}", dir.display())))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// train

fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| {
            usage(anyhow::anyhow!(
                "cannot read config {}: {e}",
                path.display()
            ))
        })?;
        config::apply(&mut cfg, &text).map_err(usage)?;
    }
    if let Some(k) = args.scale {
        cfg.scale_set = vec![k];
    }
    if let Some(s) = &args.scales {
        cfg.scale_set = s.clone();
    }
    if args.one_scale_per_step {
        cfg.multiscale = false;
    }
    macro_rules! override_field {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { cfg.$field = v; })*
        };
    }
    override_field!(
        epochs => epochs,
        seed => seed,
        patch_size => patch_size,
        batch_size => batch_size,
        lambda_color => lambda_color,
        lr => lr_init,
        lr_decay_factor => lr_decay_factor,
        lr_decay_every => lr_decay_every,
        resblocks => n_resblocks,
        channels => n_channels,
        residual_scaling => residual_scaling
    );
    if let Some(s) = &args.steps_per_epoch {
        config::set(&mut cfg, "steps_per_epoch", s).map_err(usage)?;
    }
    if let Some(p) = args.precision {
        config::set(&mut cfg, "precision", &p.to_string()).map_err(usage)?;
    }
    if args.nondeterministic {
        cfg.deterministic = false;
    }
    if args.sequential {
        cfg.execution = Execution::Sequential;
    }
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

struct EpochLog {
    epoch: usize,
    steps: usize,
    sums: [f64; 3],
    last: Option<StepRecord>,
}

impl EpochLog {
    fn new(epoch: usize) -> Self {
        EpochLog {
            epoch,
            steps: 0,
            sums: [0.0; 3],
            last: None,
        }
    }

    fn add(&mut self, r: &StepRecord) {
        self.steps += 1;
        self.sums[0] += r.report.l_cons;
        self.sums[1] += r.report.l_color;
        self.sums[2] += r.report.l_total;
        self.last = Some(r.clone());
    }

    /// Epoch means of the step losses.
    fn row(&self) -> Option<String> {
        let last = self.last.as_ref()?;
        let n = self.steps as f64;
        Some(format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:e}\n",
            self.epoch + 1,
            last.step,
            self.sums[0] / n,
            self.sums[1] / n,
            self.sums[2] / n,
            last.lr
        ))
    }
}

fn run_training<T: Scalar>(
    mut trainer: Trainer<T>,
    data: &[Image],
    out: &Path,
    every: usize,
) -> CliResult<()> {
    use std::io::Write;
    trainer.check_dataset(data).map_err(classify)?;
    let log_path = out.join(LOG_FILE);
    let fresh = trainer.epoch() == 0 || !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| runtime(anyhow::anyhow!("cannot open {}: {e}", log_path.display())))?;
    if fresh {
        writeln!(log, "epoch\tstep\tl_cons\tl_color\tl_total\tlr").map_err(runtime)?;
    }
    let total = trainer.config().epochs;
    while trainer.epoch() < total {
        let mut epoch = EpochLog::new(trainer.epoch());
        trainer
            .run_epoch(data, &mut |r: &StepRecord| epoch.add(r))
            .map_err(classify)?;
        let ckpt = trainer.checkpoint();
        ckpt.save(out.join(CHECKPOINT_FILE)).map_err(classify)?;
        if every > 0 && trainer.epoch().is_multiple_of(every) {
            let numbered = out.join(format!("model_epoch{:04}.ckpt", trainer.epoch()));
            ckpt.save(numbered).map_err(classify)?;
        }
        if let Some(row) = epoch.row() {
            log.write_all(row.as_bytes()).map_err(runtime)?;
            log.flush().map_err(runtime)?;
        }
        log::info!(
            "epoch {}/{} done (step {})",
            trainer.epoch(),
            total,
            trainer.step()
        );
    }
    if !out.join(CHECKPOINT_FILE).exists() {
        trainer
            .checkpoint()
            .save(out.join(CHECKPOINT_FILE))
            .map_err(classify)?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let data: Vec<Image> = load_inputs(&args.input)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    create_dir(&args.out)?;
    if let Some(path) = &args.resume {
        let dtype = checkpoint_dtype(path).map_err(data_or_io)?;
        let epochs = args.epochs;
        return match dtype.as_str() {
            "f64" => resume::<f64>(path, epochs, &data, &args),
            _ => resume::<f32>(path, epochs, &data, &args),
        };
    }
    let cfg = train_config(&args)?;
    fs::write(args.out.join(CONFIG_FILE), config::render(&cfg)).map_err(runtime)?;
    log::info!(
        "training on {} image(s): scales {:?}, {} epochs",
        data.len(),
        cfg.scale_set,
        cfg.epochs
    );
    match cfg.precision {
        Precision::F32 => run_training(
            Trainer::<f32>::new(cfg).map_err(classify)?,
            &data,
            &args.out,
            args.checkpoint_every,
        ),
        Precision::F64 => run_training(
            Trainer::<f64>::new(cfg).map_err(classify)?,
            &data,
            &args.out,
            args.checkpoint_every,
        ),
    }
}

fn data_or_io(e: icfsr::Error) -> Failure {
    match e {
        icfsr::Error::Io { .. } => data(e),
        other => classify(other),
    }
}

fn resume<T: Scalar>(
    path: &Path,
    epochs: Option<usize>,
    data: &[Image],
    args: &TrainArgs,
) -> CliResult<()> {
    let ckpt = Checkpoint::<T>::load(path).map_err(data_or_io)?;
    let mut trainer = Trainer::resume(ckpt, None).map_err(classify)?;
    if let Some(e) = epochs {
        trainer.set_epochs(e);
    }
    log::info!(
        "resuming at epoch {} (step {})",
        trainer.epoch(),
        trainer.step()
    );
    run_training(trainer, data, &args.out, args.checkpoint_every)
}

// ---------------------------------------------------------------------------
// sr / downsample

enum Direction {
    Up,
    Down,
}

fn apply_model<T: Scalar>(args: &ApplyArgs, dir: Direction) -> CliResult<()> {
    let ckpt = Checkpoint::<T>::load(&args.checkpoint).map_err(data_or_io)?;
    let params: ModelParameters<T> = ckpt.params;
    if !params.config.scale_set.contains(&args.scale) {
        return Err(usage(anyhow::anyhow!(
            "scale {} is not in the model's scale set {:?}",
            args.scale,
            params.config.scale_set
        )));
    }
    let inputs = load_inputs(&args.input)?;
    create_dir(&args.out)?;
    for (path, img) in inputs {
        let out = match dir {
            Direction::Up => forward(&params, &img, ScaleCondition::Up(args.scale)),
            Direction::Down => {
                let img = crop_divisible(&img, args.scale).map_err(data)?;
                forward(&params, &img, ScaleCondition::Down(args.scale))
            }
        }
        .map_err(classify)?;
        let dest = args.out.join(file_name(&path));
        save_image(&out, &dest).map_err(classify)?;
        log::info!(
            "{} -> {} ({}x{})",
            path.display(),
            dest.display(),
            out.height(),
            out.width()
        );
    }
    Ok(())
}

fn cmd_apply(args: ApplyArgs, dir: Direction) -> CliResult<()> {
    match checkpoint_dtype(&args.checkpoint)
        .map_err(data_or_io)?
        .as_str()
    {
        "f64" => apply_model::<f64>(&args, dir),
        _ => apply_model::<f32>(&args, dir),
    }
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let preds = list_inputs(&args.pred)?;
    let gts = list_inputs(&args.gt)?;
    let names = |v: &[PathBuf]| v.iter().map(|p| file_name(p)).collect::<Vec<_>>();
    let (pn, gn) = (names(&preds), names(&gts));
    let unpaired: Vec<&String> = pn
        .iter()
        .filter(|n| !gn.contains(n))
        .chain(gn.iter().filter(|n| !pn.contains(n)))
        .collect();
    if !unpaired.is_empty() {
        return Err(data(anyhow::anyhow!("unpaired files: {unpaired:?}")));
    }
    let mode = match args.mode {
        MetricMode::Y => Mode::Y,
        MetricMode::Rgb => Mode::Rgb,
    };
    let shave = args.shave.unwrap_or(args.scale.unwrap_or(0) as usize);
    if let Some(dir) = &args.error_maps {
        create_dir(dir)?;
    }
    let mut rows = Vec::new();
    for (name, pred_path) in pn.iter().zip(&preds) {
        let pred = load_image(pred_path).map_err(data)?;
        let gt = load_image(args.gt.join(name)).map_err(data)?;
        let row = ReportRow {
            image: name.clone(),
            scale: args
                .scale
                .map_or_else(|| "-".to_string(), |s| s.to_string()),
            method: args.method.clone(),
            psnr: psnr(&pred, &gt, mode, shave).map_err(data)?,
            ssim: ssim(&pred, &gt, mode, shave).map_err(data)?,
            mae: mae(&pred, &gt).map_err(data)?,
        };
        if let Some(dir) = &args.error_maps {
            let map = error_map(&pred, &gt).map_err(data)?;
            save_image(&map, dir.join(name)).map_err(classify)?;
        }
        rows.push(row);
    }
    let report = report_tsv(&rows);
    if args.stdout {
        print!("{report}");
    }
    if let Some(out) = &args.out {
        fs::write(out, &report)
            .map_err(|e| runtime(anyhow::anyhow!("cannot write {}: {e}", out.display())))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline

fn baseline_one(img: &Image, method: &str, scale: Ratio, sigma: f64) -> icfsr::Result<Image> {
    match method {
        "bicubic" => bicubic_resize(img, scale),
        "nearest" => nearest_resize(img, scale),
        "gaussian+bicubic" => bicubic_resize(&gaussian_blur(img, sigma)?, scale),
        "gaussian+nearest" => nearest_resize(&gaussian_blur(img, sigma)?, scale),
        other => Err(icfsr::Error::InvalidArgument(format!(
            "unknown method {other:?} (bicubic, nearest, gaussian+bicubic, gaussian+nearest)"
        ))),
    }
}

fn cmd_baseline(args: BaselineArgs) -> CliResult<()> {
    // Reject a bad method before touching any file.
    baseline_one(
        &Image::filled(8, 8, 3, 0.0).map_err(runtime)?,
        &args.method,
        Ratio::integer(1),
        args.sigma,
    )
    .map_err(classify)?;
    let inputs = load_inputs(&args.input)?;
    create_dir(&args.out)?;
    for (path, img) in inputs {
        let img = if args.scale.num() == 1 {
            crop_divisible(&img, args.scale.den()).map_err(data)?
        } else {
            img
        };
        let out = baseline_one(&img, &args.method, args.scale, args.sigma).map_err(classify)?;
        save_image(&out, args.out.join(file_name(&path))).map_err(classify)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-pairs

fn gen_pairs<T: Scalar>(args: &GenPairsArgs, images: &[Image]) -> CliResult<PathBuf> {
    let ckpt = Checkpoint::<T>::load(&args.checkpoint).map_err(data_or_io)?;
    if !ckpt.params.config.scale_set.contains(&args.scale) {
        return Err(usage(anyhow::anyhow!(
            "scale {} is not in the model's scale set {:?}",
            args.scale,
            ckpt.params.config.scale_set
        )));
    }
    let pairs = generate_llr_lr(&ckpt.params, images, args.scale, Execution::default())
        .map_err(classify)?;
    export_dataset(&pairs, &args.out, &args.template).map_err(classify)
}

fn cmd_gen_pairs(args: GenPairsArgs) -> CliResult<()> {
    let images: Vec<Image> = load_inputs(&args.input)?
        .into_iter()
        .map(|(_, i)| i)
        .collect();
    let manifest = match checkpoint_dtype(&args.checkpoint)
        .map_err(data_or_io)?
        .as_str()
    {
        "f64" => gen_pairs::<f64>(&args, &images)?,
        _ => gen_pairs::<f32>(&args, &images)?,
    };
    log::info!(
        "wrote {} pairs; manifest {}",
        images.len(),
        manifest.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("ICF_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(anyhow::anyhow!(
            "ICF_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(runtime)?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sr(a) => cmd_apply(a, Direction::Up),
        Command::Downsample(a) => cmd_apply(a, Direction::Down),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::GenPairs(a) => cmd_gen_pairs(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
