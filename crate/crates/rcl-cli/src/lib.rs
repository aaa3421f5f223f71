//! Command-line entry points: dataset synthesis, training, probing, feature
//! export, the RF pipeline, and the ablation suites.

pub mod config;

use clap::{Args, Parser, Subcommand};
use config::{parse_config, RunConfig};
use rcl_core::data::{
    load_mnist_idx, read_dataset, synthesize_dataset, write_dataset, BackgroundProvider,
    Dataset, DigitSource, MnistDigits, ProceduralBackgrounds, ProceduralDigits,
    Stl10Backgrounds,
};
use rcl_core::eval::{
    append_probe_results, evaluate_accuracy, export_features, fit_linear_probe, EvalMode,
    ProbeConfig,
};
use rcl_core::model::{load_checkpoint, ModelState, ProbeTask};
use rcl_core::rf::{
    boxes_from_trajectory, center_probe_rmse, detect_trajectory, generate_rf_sequence,
    median_background_subtract, read_rf_sequence, run_rf_training, write_rf_sequence,
    DetectParams, MotionModel, RfGenParams,
};
use rcl_core::train::{run_training, Mode};
use rcl_core::{RclError, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "rcl", about = "Dual-branch self-supervised learning laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize datasets.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Train a model on a Colorful-MNIST dataset directory.
    Train(TrainArgs),
    /// Fit linear probes on a finished run and report accuracies.
    Probe(ProbeArgs),
    /// Export encoder features with labels.
    ExportFeatures(ExportArgs),
    /// RF heatmap commands.
    #[command(subcommand)]
    Rf(RfCommand),
    /// Run an ablation suite (several trainings plus a comparison CSV).
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Digit-on-background dataset with two independent label sets.
    Cmnist(SynthCmnistArgs),
}

#[derive(Args)]
struct SynthCmnistArgs {
    /// Training split size.
    #[arg(long)]
    train: usize,
    /// Test split size.
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Background source: `procedural` or `stl10`.
    #[arg(long, default_value = "procedural")]
    backgrounds: String,
    /// STL-10 binary image file (with --backgrounds stl10).
    #[arg(long)]
    stl_images: Option<PathBuf>,
    /// STL-10 binary label file (with --backgrounds stl10).
    #[arg(long)]
    stl_labels: Option<PathBuf>,
    /// Digit source: `procedural` or `mnist`.
    #[arg(long, default_value = "procedural")]
    digits: String,
    /// MNIST IDX image file (with --digits mnist).
    #[arg(long)]
    mnist_images: Option<PathBuf>,
    /// MNIST IDX label file (with --digits mnist).
    #[arg(long)]
    mnist_labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `synth cmnist`.
    #[arg(long)]
    data: PathBuf,
    /// Fresh run directory for outputs.
    #[arg(long)]
    out: PathBuf,
    /// Optional config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set loss.lambda1=100`.
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Finished run directory.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// `digit`, `background`, or `both`.
    #[arg(long, default_value = "both")]
    task: String,
    /// `fixed` or `finetune`.
    #[arg(long, default_value = "fixed")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `train` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum RfCommand {
    /// Generate a synthetic RF heatmap sequence file.
    Synth(RfSynthArgs),
    /// Run background subtraction and trajectory detection, writing per-frame
    /// centers and boxes as CSV.
    Roi(RfRoiArgs),
    /// Train the dual-branch RF model on sequence files.
    Train(RfTrainArgs),
}

#[derive(Args)]
struct RfSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f32,
    /// `waypoints` or `static`.
    #[arg(long, default_value = "waypoints")]
    motion: String,
}

#[derive(Args)]
struct RfRoiArgs {
    /// Input RFS1 sequence file.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Median window in frames (whole sequence when omitted).
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args)]
struct RfTrainArgs {
    /// Comma-separated RFS1 sequence files.
    #[arg(long, value_delimiter = ',')]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    /// One of: warmup, masking-aug, concat, recon-task.
    #[arg(long)]
    suite: String,
    #[arg(long)]
    data: PathBuf,
    /// Parent directory receiving one run directory per member.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Exit code for an error category.
fn exit_code(e: &RclError) -> i32 {
    match e.category() {
        "not-found" => 2,
        "format" => 3,
        "config" | "argument" => 4,
        "io" => 5,
        "numeric" => 6,
        "detection" => 7,
        _ => 1,
    }
}

/// Parses and runs a command line; returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version via this path with status 0.
            let _ = e.print();
            return if e.use_stderr() { 64 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(SynthCommand::Cmnist(args)) => synth_cmnist(args),
        Command::Train(args) => train(args),
        Command::Probe(args) => probe(args),
        Command::ExportFeatures(args) => export(args),
        Command::Rf(RfCommand::Synth(args)) => rf_synth(args),
        Command::Rf(RfCommand::Roi(args)) => rf_roi(args),
        Command::Rf(RfCommand::Train(args)) => rf_train(args),
        Command::Ablate(args) => ablate(args),
    }
}

fn synth_cmnist(args: SynthCmnistArgs) -> Result<()> {
    let backgrounds: Box<dyn BackgroundProvider> = match args.backgrounds.as_str() {
        "procedural" => Box::new(ProceduralBackgrounds::new()),
        "stl10" => {
            let (imgs, lbls) = match (&args.stl_images, &args.stl_labels) {
                (Some(i), Some(l)) => (i, l),
                _ => {
                    return Err(RclError::Config(
                        "--backgrounds stl10 needs --stl-images and --stl-labels".to_string(),
                    ))
                }
            };
            Box::new(Stl10Backgrounds::load(imgs, lbls)?)
        }
        other => {
            return Err(RclError::Config(format!(
                "unknown background source `{other}`"
            )))
        }
    };
    let digits: Box<dyn DigitSource> = match args.digits.as_str() {
        "procedural" => Box::new(ProceduralDigits),
        "mnist" => {
            let (imgs, lbls) = match (&args.mnist_images, &args.mnist_labels) {
                (Some(i), Some(l)) => (i, l),
                _ => {
                    return Err(RclError::Config(
                        "--digits mnist needs --mnist-images and --mnist-labels".to_string(),
                    ))
                }
            };
            Box::new(MnistDigits::new(load_mnist_idx(imgs, lbls)?)?)
        }
        other => return Err(RclError::Config(format!("unknown digit source `{other}`"))),
    };
    let (train, test, meta) =
        synthesize_dataset(args.train, args.test, args.seed, backgrounds.as_ref(), digits.as_ref())?;
    write_dataset(&args.out, &train, &test, &meta)?;
    println!(
        "wrote {} train / {} test samples to {} (mean pixel {:.4} {:.4} {:.4})",
        train.len(),
        test.len(),
        args.out.display(),
        meta.mean_pixel[0],
        meta.mean_pixel[1],
        meta.mean_pixel[2]
    );
    Ok(())
}

/// Run directories are immutable: training refuses a nonempty target.
fn ensure_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let nonempty = std::fs::read_dir(dir)
            .map_err(|e| RclError::io(dir, e))?
            .next()
            .is_some();
        if nonempty {
            return Err(RclError::Argument(format!(
                "run directory {} already exists and is not empty; reruns need a new directory",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| RclError::io(dir, e))
}

fn resolve_run_config(
    config: Option<&Path>,
    sets: &[String],
    data: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = parse_config(config, sets)?;
    cfg.set("data", &data.display().to_string())?;
    cfg.set("out", &out.display().to_string())?;
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_run_config(
        args.config.as_deref(),
        &args.sets,
        &args.data,
        &args.out,
        args.seed,
    )?;
    let train_cfg = cfg.train_config()?;
    let (train_split, _, _) = read_dataset(&args.data)?;
    ensure_fresh_dir(&args.out)?;
    std::fs::write(args.out.join("config.resolved"), cfg.resolved())
        .map_err(|e| RclError::io(&args.out, e))?;
    let (state, history) = run_training(&train_cfg, &train_split, &args.out)?;
    let last = history.records.last().expect("at least one epoch");
    println!(
        "run complete: {} epochs, mode {}, final loss {:.6} ({} parameters) -> {}",
        history.records.len(),
        train_cfg.mode.name(),
        last.loss_total,
        state.param_count(),
        args.out.display()
    );
    Ok(())
}

/// Rebuilds the model of a finished run from its resolved config + final
/// checkpoint.
fn load_run(run: &Path) -> Result<(RunConfig, ModelState)> {
    if !run.exists() {
        return Err(RclError::NotFound(format!("run directory {}", run.display())));
    }
    let resolved = run.join("config.resolved");
    if !resolved.exists() {
        return Err(RclError::NotFound(format!(
            "{} (not a run directory?)",
            resolved.display()
        )));
    }
    let cfg = parse_config(Some(&resolved), &[])?;
    let train_cfg = cfg.train_config()?;
    let ckpt = run.join("ckpt_final");
    if !ckpt.exists() {
        return Err(RclError::NotFound(format!("checkpoint {}", ckpt.display())));
    }
    let state = load_checkpoint(&train_cfg.effective_model(), &ckpt)?;
    Ok((cfg, state))
}

fn probe(args: ProbeArgs) -> Result<()> {
    let (cfg, mut state) = load_run(&args.run)?;
    let (train_split, test_split, _) = read_dataset(&args.data)?;
    let mode: EvalMode = args.mode.parse()?;
    let tasks: Vec<ProbeTask> = match args.task.as_str() {
        "both" => vec![ProbeTask::Digit, ProbeTask::Background],
        other => vec![other.parse()?],
    };
    let probe_cfg = ProbeConfig {
        lr: cfg.get_f64("probe.lr"),
        max_iters: cfg.get_usize("probe.max_iters"),
        finetune_epochs: cfg.get_usize("probe.finetune_epochs"),
        finetune_lr: cfg.get_f64("probe.finetune_lr"),
        seed: args.seed,
        ..ProbeConfig::default()
    };
    let mut rows = Vec::new();
    for task in tasks {
        fit_linear_probe(&mut state, &train_split, task, mode, &probe_cfg)?;
        let result = evaluate_accuracy(&state, &test_split, task, mode)?;
        println!(
            "task={} mode={} accuracy={:.4} n={}",
            task.name(),
            mode.name(),
            result.top1_accuracy,
            result.n_eval
        );
        rows.push((result, args.seed));
    }
    append_probe_results(&args.run.join("probe_results.csv"), &rows)?;
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let (_, state) = load_run(&args.run)?;
    let (train_split, test_split, _) = read_dataset(&args.data)?;
    let split = match args.split.as_str() {
        "train" => &train_split,
        "test" => &test_split,
        other => {
            return Err(RclError::Argument(format!(
                "split must be train or test, got `{other}`"
            )))
        }
    };
    export_features(&state, split, &args.out)?;
    println!(
        "exported {} feature rows to {}",
        split.len(),
        args.out.display()
    );
    Ok(())
}

fn rf_synth(args: RfSynthArgs) -> Result<()> {
    let motion = match args.motion.as_str() {
        "waypoints" => MotionModel::Waypoints { speed_mps: 1.0 },
        "static" => MotionModel::Static,
        other => {
            return Err(RclError::Config(format!(
                "motion must be waypoints or static, got `{other}`"
            )))
        }
    };
    let params = RfGenParams {
        frames: args.frames,
        noise_sigma: args.noise_sigma,
        motion,
        ..RfGenParams::default()
    };
    let seq = generate_rf_sequence(&params, args.seed)?;
    write_rf_sequence(&args.out, &seq)?;
    println!(
        "wrote {} frames ({}x{} horizontal, scale {} m/px) to {}",
        seq.len(),
        seq.frames[0].horizontal.dim().0,
        seq.frames[0].horizontal.dim().1,
        seq.scale,
        args.out.display()
    );
    Ok(())
}

fn rf_roi(args: RfRoiArgs) -> Result<()> {
    let seq = read_rf_sequence(&args.input)?;
    let window = args.window.unwrap_or(seq.len());
    let residuals = median_background_subtract(&seq, window)?;
    let traj = detect_trajectory(&residuals, seq.scale, &DetectParams::default())?;
    let boxes = boxes_from_trajectory(&traj)?;
    let mut csv = String::from("frame,valid,x_m,y_m,box_x0,box_y0,box_x1,box_y1\n");
    for (i, b) in boxes.iter().enumerate() {
        let (x0, x1, y0, y1) = b.extent();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            i,
            traj.valid[i] as u8,
            traj.centers[i].0,
            traj.centers[i].1,
            x0,
            y0,
            x1,
            y1
        ));
    }
    std::fs::write(&args.out, csv).map_err(|e| RclError::io(&args.out, e))?;
    let detected = traj.valid.iter().filter(|&&v| v).count();
    println!(
        "detected person in {detected}/{} frames -> {}",
        seq.len(),
        args.out.display()
    );
    Ok(())
}

fn rf_train(args: RfTrainArgs) -> Result<()> {
    if args.data.is_empty() {
        return Err(RclError::Argument("rf train needs at least one --data file".to_string()));
    }
    let mut cfg = parse_config(args.config.as_deref(), &args.sets)?;
    if let Some(s) = args.seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.set("out", &args.out.display().to_string())?;
    let rf_cfg = cfg.rf_train_config()?;
    let sequences = args
        .data
        .iter()
        .map(|p| read_rf_sequence(p))
        .collect::<Result<Vec<_>>>()?;
    ensure_fresh_dir(&args.out)?;
    std::fs::write(args.out.join("config.resolved"), cfg.resolved())
        .map_err(|e| RclError::io(&args.out, e))?;
    let (model, history) = run_rf_training(&rf_cfg, &sequences, &args.out)?;
    let rmse = center_probe_rmse(&model, &rf_cfg, &sequences)?;
    std::fs::write(
        args.out.join("center_probe.txt"),
        format!("rmse_m={rmse}\n"),
    )
    .map_err(|e| RclError::io(&args.out, e))?;
    let last = history.records.last().expect("at least one epoch");
    println!(
        "rf run complete: {} epochs, final loss {:.6}, center-probe rmse {rmse:.4} m -> {}",
        history.records.len(),
        last.loss_total,
        args.out.display()
    );
    Ok(())
}

/// The runs each ablation suite executes.
fn suite_modes(suite: &str) -> Result<Vec<Mode>> {
    Ok(match suite {
        "warmup" => vec![Mode::Rcl, Mode::RclNoWarmup],
        "masking-aug" => vec![Mode::ContrastiveOnly, Mode::ContrastivePlusMasking],
        "concat" => vec![Mode::Rcl, Mode::ConcatFeatures],
        "recon-task" => vec![
            Mode::ContrastiveOnly,
            Mode::Colorization,
            Mode::Autoencoder,
            Mode::InpaintingOnly,
            Mode::Rcl,
        ],
        other => {
            return Err(RclError::Argument(format!(
                "unknown suite `{other}` (expected warmup, masking-aug, concat, or recon-task)"
            )))
        }
    })
}

fn ablate(args: AblateArgs) -> Result<()> {
    let modes = suite_modes(&args.suite)?;
    let (train_split, test_split, _) = read_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| RclError::io(&args.out, e))?;
    let mut comparison = String::from("run,mode,digit_accuracy,background_accuracy,n_eval,seed\n");
    for mode in &modes {
        let run_dir = args.out.join(mode.name());
        let mut cfg = resolve_run_config(
            args.config.as_deref(),
            &args.sets,
            &args.data,
            &run_dir,
            args.seed,
        )?;
        cfg.set("train.mode", mode.name())?;
        let train_cfg = cfg.train_config()?;
        ensure_fresh_dir(&run_dir)?;
        std::fs::write(run_dir.join("config.resolved"), cfg.resolved())
            .map_err(|e| RclError::io(&run_dir, e))?;
        eprintln!("[ablate:{}] training {}", args.suite, mode.name());
        let (mut state, _) = run_training(&train_cfg, &train_split, &run_dir)?;
        let probe_cfg = ProbeConfig {
            seed: train_cfg.seed,
            ..ProbeConfig::default()
        };
        let mut accs = [0.0f64; 2];
        let mut rows = Vec::new();
        for (i, task) in [ProbeTask::Digit, ProbeTask::Background].iter().enumerate() {
            fit_linear_probe(&mut state, &train_split, *task, EvalMode::Fixed, &probe_cfg)?;
            let r = evaluate_accuracy(&state, &test_split, *task, EvalMode::Fixed)?;
            accs[i] = r.top1_accuracy;
            rows.push((r, train_cfg.seed));
        }
        append_probe_results(&run_dir.join("probe_results.csv"), &rows)?;
        comparison.push_str(&format!(
            "{},{},{},{},{},{}\n",
            run_dir.display(),
            mode.name(),
            accs[0],
            accs[1],
            test_split.len(),
            train_cfg.seed
        ));
    }
    let cmp_path = args.out.join("comparison.csv");
    std::fs::write(&cmp_path, comparison).map_err(|e| RclError::io(&cmp_path, e))?;
    println!(
        "{} suite complete: {} runs -> {}",
        args.suite,
        modes.len(),
        cmp_path.display()
    );
    Ok(())
}
