mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;
use sosdet::detect::{detect_image, restrict_levels, DetectError, LevelSet};
use sosdet::eval::{curve, join_by_image, read_detections, write_detections, write_report, DetectionRecord, EvalError};
use sosdet::net::{load_checkpoint, save_checkpoint, NetError};
use sosdet::synth::{load_dataset, load_image, prep_training_patches, read_annotations, write_dataset, write_samples, SynthError};
use sosdet::train::{train_loop_with, write_loss_csv, TrainError};

/// Small-object detection in large images: synthesize data, train, detect, evaluate.
#[derive(Parser)]
#[command(name = "sosdet", version)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scene and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes and their annotations.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Index of the first scene; splits drawn from one seed use disjoint ranges.
        #[arg(long, default_value_t = 0)]
        first: usize,
    },
    /// Cut training patches from a dataset and write them out for inspection.
    Prep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV; defaults to the checkpoint path with a `.loss.csv` suffix.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a checkpoint over images and write detections as JSON lines.
    Detect(DetectArgs),
    /// Score detections against annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image files or directories of `.ppm` files.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Pyramid levels to use, e.g. `0`, `1`, `2..`, `0,2`.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    score_threshold: Option<f64>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(..) => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Io(..) | TrainError::Csv(..) => CliError::Io(e.to_string()),
            TrainError::Net(n) => n.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Net(n) => n.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } | EvalError::Csv(..) => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    base.resolve(seed).map_err(CliError::Config)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Image files named by `inputs`, each with the key it is reported under:
/// the file name relative to its directory, or the path as given.
fn collect_images(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>, CliError> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut names: Vec<String> = fs::read_dir(input)
                .map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?
                .filter_map(|entry| entry.ok())
                .map(|entry| entry.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".ppm"))
                .collect();
            names.sort();
            out.extend(names.into_iter().map(|n| (n.clone(), input.join(n))));
        } else {
            out.push((input.display().to_string(), input.clone()));
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    println!("{}", cfg.to_json());

    match cli.command {
        Command::Synth { out, count, first } => {
            write_dataset(&cfg.scene, first, count, &out)?;
            write_file(&out.join("config.json"), cfg.to_json() + "\n")?;
            eprintln!("wrote {count} scenes to {}", out.display());
        }
        Command::Prep { dataset, out } => {
            let data = load_dataset(&dataset).map_err(dataset_error)?;
            let samples = prep_training_patches(&data, &cfg.pyramid, &cfg.model.anchors, cfg.train.seed)?;
            write_samples(&out, &samples)?;
            let positives = samples.iter().filter(|s| !s.boxes.is_empty()).count();
            eprintln!(
                "wrote {} patches ({positives} positive, {} background) to {}",
                samples.len(),
                samples.len() - positives,
                out.display()
            );
        }
        Command::Train { dataset, out, log } => {
            let data = load_dataset(&dataset).map_err(dataset_error)?;
            let samples = prep_training_patches(&data, &cfg.pyramid, &cfg.model.anchors, cfg.train.seed)?;
            eprintln!("training on {} patches from {} images", samples.len(), data.len());
            let result = train_loop_with(&samples, &cfg.model, &cfg.train, &cfg.loss, |r| {
                eprintln!(
                    "iter {:>6}  lr {:.5}  loss {:.4}  conf {:.4}  loc {:.4}  matched {}  |g| {:.3}",
                    r.iteration, r.lr, r.loss, r.conf_loss, r.loc_loss, r.matched_anchors, r.grad_norm
                );
            })?;
            save_checkpoint(&result.model, &out)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".loss.csv");
                PathBuf::from(p)
            });
            write_loss_csv(&log_path, &result.log)?;
            eprintln!("wrote {} and {}", out.display(), log_path.display());
        }
        Command::Detect(args) => {
            let model = load_checkpoint(&args.checkpoint)?;
            if model.config.anchors != cfg.model.anchors {
                eprintln!("note: using the anchor layout stored in the checkpoint");
            }
            let mut dcfg = cfg.detect_config();
            if let Some(levels) = &args.levels {
                let set: LevelSet = levels.parse()?;
                dcfg = restrict_levels(&dcfg, set)?;
            }
            if let Some(b) = args.batch_size {
                dcfg.batch_size = b;
            }
            if let Some(t) = args.score_threshold {
                dcfg.score_threshold = t;
            }
            dcfg.validate().map_err(CliError::Config)?;
            let mut records = Vec::new();
            for (key, path) in collect_images(&args.input)? {
                let image = load_image(&path).map_err(|e| CliError::Io(e.to_string()))?;
                for d in detect_image(&model, &image, &dcfg)? {
                    records.push(DetectionRecord {
                        image: key.clone(),
                        detection: d,
                    });
                }
            }
            write_detections(&args.out, &records)?;
            eprintln!("wrote {} detections to {}", records.len(), args.out.display());
        }
        Command::Eval {
            detections,
            annotations,
            out,
        } => {
            let anns = read_annotations(&annotations)?;
            let dets = read_detections(&detections)?;
            let images = join_by_image(&anns, &dets)?;
            let report = curve(&images, &cfg.eval);
            write_report(&out, &report)?;
            write_file(&out.join("config.json"), cfg.to_json() + "\n")?;
            let op = report.overall.operating_point;
            eprintln!(
                "score >= {}: precision {:.4}  recall {:.4}  ({} TP, {} FP, {} ground truths)",
                op.threshold, op.precision, op.recall, op.true_positives, op.false_positives, op.ground_truths
            );
            for b in &report.buckets {
                let p = b.operating_point;
                eprintln!("  {:<6} precision {:.4}  recall {:.4}  ({} ground truths)", b.name, p.precision, p.recall, p.ground_truths);
            }
        }
    }
    Ok(())
}

/// A dataset that cannot be read at all is a usage error, not an I/O fault.
fn dataset_error(e: SynthError) -> CliError {
    CliError::Input(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(4);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
