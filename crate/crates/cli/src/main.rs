//! `pecas`: train the classifiers, evaluate them, run the detector, replay
//! the dual-camera alarm pipeline, and check gradients.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pecas_core::data::{list_images, scan_dataset_dir, scan_split_dir, Sample};
use pecas_core::detector::{average_precision, detect, pr_curve_csv, read_jsonl, to_jsonl, BBox, DetectParams, ImageRecord};
use pecas_core::fusion::{run_pipeline_dirs, PipelineConfig, RoiConfig, DEFAULT_DT, DEFAULT_FPS, DEFAULT_THRESHOLD};
use pecas_core::image::decode_image;
use pecas_core::model::{random_network_gradcheck, EYE, PEDESTRIAN};
use pecas_core::trainer::{evaluate, precision_recall, train, ConfusionMatrix, TrainConfig};
use pecas_core::weights_file::{load_model, load_model_expecting, save_model};
use pecas_core::{build_eye_net, build_pedestrian_net, Error, ModelSpec, ModelWeights};

/// Largest relative gradient error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "pecas", version, about = "Pedestrian and driver-drowsiness collision alarm")]
struct Cli {
    /// Seed for every random choice (shuffles, splits, initialisation).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier from a pos/neg image directory.
    Train(TrainArgs),
    /// Accuracy, confusion matrix, precision and recall on a pos/neg directory.
    Eval(EvalArgs),
    /// Sliding-window pedestrian detection over a directory of images.
    Detect(DetectArgs),
    /// Replay outward and driver frame directories through the alarm pipeline.
    Run(RunArgs),
    /// Finite-difference gradient check of both architectures.
    Gradcheck(GradcheckArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModelKind {
    Eye,
    Pedestrian,
}

impl ModelKind {
    fn spec(self) -> ModelSpec {
        match self {
            ModelKind::Eye => build_eye_net(),
            ModelKind::Pedestrian => build_pedestrian_net(),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Architecture to train.
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Either `pos/` + `neg/` (split 0.6/0.2/0.2) or `train/`, `val/`, `test/`
    /// each holding `pos/` + `neg/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Factor applied to the learning rate after a validation dip.
    #[arg(long, default_value_t = 0.1)]
    lr_drop: f64,
    /// Validation-accuracy drop below the best that counts as a dip.
    #[arg(long, default_value_t = 0.15)]
    dip_threshold: f64,
    /// Where to write the trained weights.
    #[arg(long)]
    out: PathBuf,
    /// Tab-separated epoch log: epoch, train loss, train acc, val acc, lr.
    #[arg(long)]
    log: Option<PathBuf>,
    /// JSON summary of the run and the final evaluation.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Weights file of either architecture.
    #[arg(long)]
    model: PathBuf,
    /// Directory with `pos/` and `neg/` images.
    #[arg(long)]
    data: PathBuf,
    /// Also write the metrics as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Pedestrian weights file.
    #[arg(long)]
    model: PathBuf,
    /// Directory of images to scan.
    #[arg(long)]
    images: PathBuf,
    /// JSON-lines detection dump.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines ground truth; enables AP reporting.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Precision-recall curve as CSV (requires --gt).
    #[arg(long, requires = "gt")]
    pr_csv: Option<PathBuf>,
    /// Windows must score strictly above this.
    #[arg(long, default_value_t = 0.5)]
    score_floor: f64,
    /// Overlap above which NMS suppresses the weaker box.
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    /// IoU needed to match a detection to a ground-truth box.
    #[arg(long, default_value_t = 0.5)]
    match_iou: f64,
    #[arg(long, default_value_t = 1.2)]
    scale_factor: f64,
    #[arg(long, default_value_t = 16)]
    stride: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Pedestrian weights file.
    #[arg(long)]
    ped_model: PathBuf,
    /// Eye-state weights file.
    #[arg(long)]
    eye_model: PathBuf,
    /// Outward-camera frame directory.
    #[arg(long)]
    outward: PathBuf,
    /// Driver-camera frame directory.
    #[arg(long)]
    driver: PathBuf,
    /// Fixed eye region `x,y,w,h` in driver-frame pixels.
    #[arg(long, value_parser = parse_rect, conflicts_with = "roi_file", required_unless_present = "roi_file")]
    roi: Option<BBox>,
    /// Per-frame eye regions, lines of `sequence,x,y,w,h`.
    #[arg(long)]
    roi_file: Option<PathBuf>,
    /// Alarm when the score product is strictly above this.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Stagger between the two cameras, seconds.
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    /// Frame rate used to timestamp the replayed directories.
    #[arg(long, default_value_t = DEFAULT_FPS)]
    fps: f64,
    /// JSON-lines event log.
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Number of random networks per architecture, seeded from --seed upward.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Entries sampled per parameter tensor; 0 checks every entry.
    #[arg(long, default_value_t = 8)]
    entries: usize,
}

fn parse_rect(s: &str) -> Result<BBox, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, w, h] if parts.iter().all(|v| v.is_finite()) && w > 0.0 && h > 0.0 => Ok(BBox::new(x, y, w, h)),
        [_, _, _, _] => Err("need finite values with positive width and height".into()),
        _ => Err(format!("expected x,y,w,h, got {} values", parts.len())),
    }
}

/// Command failure split by exit code.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::SpecMismatch { .. } | Error::Argument(_) | Error::Layout(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("metrics serialise");
    text.push('\n');
    write_file(path, text)
}

fn load_kind(path: &Path) -> Result<ModelWeights, Failure> {
    let weights = load_model(path)?;
    if ![EYE, PEDESTRIAN].contains(&weights.spec().name()) {
        return Err(Failure::Usage(format!("{}: unknown model {:?}", path.display(), weights.spec().name())));
    }
    Ok(weights)
}

#[derive(Serialize)]
struct SetMetrics {
    size: usize,
    accuracy: f64,
    confusion: ConfusionMatrix,
    /// `null` when undefined (no positive predictions / no positives).
    precision: Option<f64>,
    recall: Option<f64>,
}

fn set_metrics<S: Sample>(weights: &ModelWeights, samples: &[S]) -> Result<Option<SetMetrics>, Failure> {
    if samples.is_empty() {
        return Ok(None);
    }
    let ev = evaluate(weights, samples)?;
    let (precision, recall) = precision_recall(&ev.confusion);
    Ok(Some(SetMetrics {
        size: samples.len(),
        accuracy: ev.accuracy,
        confusion: ev.confusion,
        precision,
        recall,
    }))
}

fn fmt_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

fn print_metrics(label: &str, m: &SetMetrics) {
    let c = &m.confusion;
    println!(
        "{label}: n={} accuracy={} tp={} fp={} fn={} tn={} precision={} recall={}",
        m.size,
        m.accuracy,
        c.tp,
        c.fp,
        c.fn_,
        c.tn,
        fmt_optional(m.precision),
        fmt_optional(m.recall)
    );
}

#[derive(Serialize)]
struct TrainMetrics {
    model: String,
    seed: u64,
    epochs_run: usize,
    best_epoch: usize,
    best_val_accuracy: Option<f64>,
    rollbacks: Vec<usize>,
    final_lr: f64,
    train: Option<SetMetrics>,
    validation: Option<SetMetrics>,
    test: Option<SetMetrics>,
    skipped_files: Vec<String>,
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<(), Failure> {
    let spec = args.model.spec();
    let [_, h, w] = spec.input_shape();
    let (split, skipped) = scan_split_dir(&args.data, (h, w), seed)?;
    if split.train.is_empty() {
        return Err(Failure::Usage(format!("{}: no training images", args.data.display())));
    }
    println!(
        "{}: train {} / val {} / test {} images",
        spec.name(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        initial_lr: args.lr,
        lr_drop_factor: args.lr_drop,
        dip_threshold: args.dip_threshold,
        seed,
    };
    config.validate()?;
    let outcome = train(&spec, &split, &config)?;
    let mut log = String::new();
    for r in &outcome.records {
        log.push_str(&r.log_line());
        log.push('\n');
    }
    print!("{log}");
    if let Some(path) = &args.log {
        write_file(path, &log)?;
    }
    save_model(&outcome.weights, &args.out)?;
    println!("best epoch {} saved to {}", outcome.best_epoch, args.out.display());

    let test = set_metrics(&outcome.weights, &split.test)?;
    if let Some(m) = &test {
        print_metrics("test", m);
    }
    if let Some(path) = &args.metrics_out {
        let best = outcome.records.iter().find(|r| r.epoch == outcome.best_epoch);
        let metrics = TrainMetrics {
            model: spec.name().to_string(),
            seed,
            epochs_run: outcome.records.len(),
            best_epoch: outcome.best_epoch,
            best_val_accuracy: best.map(|r| r.val_accuracy),
            rollbacks: outcome.rollbacks.clone(),
            final_lr: outcome.records.last().map_or(args.lr, |r| r.lr_in_effect),
            train: set_metrics(&outcome.weights, &split.train)?,
            validation: set_metrics(&outcome.weights, &split.validation)?,
            test,
            skipped_files: skipped.iter().map(|(p, _)| p.display().to_string()).collect(),
        };
        write_json(path, &metrics)?;
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let weights = load_kind(&args.model)?;
    let [_, h, w] = weights.spec().input_shape();
    let entries = scan_dataset_dir(&args.data, (h, w))?;
    let mut samples = Vec::with_capacity(entries.len());
    for entry in entries {
        match entry.load() {
            Ok(s) => samples.push(s),
            Err(e) => eprintln!("warning: skipping {}: {e}", entry.path.display()),
        }
    }
    let Some(metrics) = set_metrics(&weights, &samples)? else {
        return Err(Failure::Usage(format!("{}: no images to evaluate", args.data.display())));
    };
    print_metrics(weights.spec().name(), &metrics);
    if let Some(path) = &args.out {
        write_json(path, &metrics)?;
    }
    Ok(())
}

fn cmd_detect(args: &DetectArgs) -> Result<(), Failure> {
    let weights = load_model_expecting(&args.model, PEDESTRIAN)?;
    let params = DetectParams {
        scale_factor: args.scale_factor,
        stride: args.stride,
        score_floor: args.score_floor,
        nms_iou: args.nms_iou,
    };
    if !(params.scale_factor > 1.0) || params.stride == 0 {
        return Err(Failure::Usage("--scale-factor must exceed 1 and --stride must be positive".into()));
    }
    let ground_truth = args.gt.as_deref().map(read_jsonl).transpose()?;
    let mut records = Vec::new();
    let mut all_dets = Vec::new();
    let mut all_gt = Vec::new();
    for path in list_images(&args.images)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let bytes = fs::read(&path).map_err(|e| io_failure(&path, e))?;
        let image = match decode_image(&bytes) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                continue;
            }
        };
        let dets = detect(&weights, &image, &params)?;
        println!("{name}: {} detection(s)", dets.len());
        records.push(ImageRecord::from_detections(name.clone(), &dets));
        if let Some(gt) = &ground_truth {
            all_gt.push(gt.get(&name).cloned().unwrap_or_default());
        }
        all_dets.push(dets);
    }
    write_file(&args.out, to_jsonl(&records))?;
    if let Some(gt) = &ground_truth {
        for name in gt.keys() {
            if !records.iter().any(|r| &r.image == name) {
                eprintln!("warning: ground truth for {name} has no matching image");
            }
        }
        let ap = average_precision(&all_dets, &all_gt, args.match_iou)?;
        println!(
            "AP {} (tp {}, fp {}, ground truth {})",
            ap.ap, ap.true_positives, ap.false_positives, ap.ground_truths
        );
        if let Some(path) = &args.pr_csv {
            write_file(path, pr_curve_csv(&ap.curve))?;
        }
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let as_config = |e: Error| match e {
        Error::SpecMismatch { .. } | Error::Format { .. } => Failure::Usage(e.to_string()),
        other => Failure::from(other),
    };
    let ped = load_model(&args.ped_model).map_err(as_config)?;
    let eye = load_model(&args.eye_model).map_err(as_config)?;
    let roi = match (&args.roi, &args.roi_file) {
        (Some(rect), _) => RoiConfig::FixedRect(*rect),
        (None, Some(path)) => RoiConfig::from_annotation_file(path).map_err(|e| Failure::Usage(e.to_string()))?,
        (None, None) => unreachable!("clap requires one ROI source"),
    };
    for dir in [&args.outward, &args.driver] {
        if !dir.is_dir() {
            return Err(Failure::Usage(format!("{}: not a directory", dir.display())));
        }
    }
    let config = PipelineConfig {
        threshold: args.threshold,
        dt: args.dt,
        fps: args.fps,
        detect: DetectParams::default(),
    };
    if !(config.fps > 0.0 && config.fps.is_finite()) {
        return Err(Failure::Usage(format!("--fps must be positive, got {}", config.fps)));
    }
    let output = run_pipeline_dirs(&ped, &eye, &args.outward, &args.driver, &roi, &config)?;
    let mut log = String::new();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for event in &output.events {
        log.push_str(&event.to_json_line());
        log.push('\n');
        if event.alarm {
            writeln!(
                out,
                "ALARM t={:.4} ped={:.4} drowsy={:.4} product={:.4}",
                event.timestamp, event.pedestrian_score, event.drowsiness_score, event.product
            )
            .ok();
        }
    }
    write_file(&args.log, log)?;
    let alarms = output.events.iter().filter(|e| e.alarm).count();
    writeln!(out, "{} event(s), {alarms} alarm(s), {} ROI failure(s)", output.events.len(), output.roi_failures.len()).ok();
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, seed: u64) -> Result<(), Failure> {
    let started = Instant::now();
    let entries = (args.entries > 0).then_some(args.entries);
    let mut overall: f64 = 0.0;
    for spec in [build_eye_net(), build_pedestrian_net()] {
        let mut worst: f64 = 0.0;
        let (mut checked, mut kinks) = (0, 0);
        for s in seed..seed.saturating_add(args.seeds) {
            let report = random_network_gradcheck(&spec, s, entries)?;
            worst = worst.max(report.max_rel_error);
            checked += report.checked;
            kinks += report.skipped_kinks;
        }
        println!(
            "{}: max relative error {worst:e} over {checked} entries ({kinks} skipped at kinks)",
            spec.name()
        );
        overall = overall.max(worst);
    }
    println!("max relative error {overall:e} in {:.2}s", started.elapsed().as_secs_f64());
    if overall < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {overall:e} >= {GRADCHECK_TOLERANCE:e}")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args, cli.seed),
        Command::Eval(args) => cmd_eval(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Run(args) => cmd_run(args),
        Command::Gradcheck(args) => cmd_gradcheck(args, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
