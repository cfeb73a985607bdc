//! Subcommands of the `spermdet` binary. Each command returns a [`Report`]
//! that `main` prints as text or JSON, or a [`CliError`] carrying the exit
//! code.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use spermdet_core::augment::{jitter, AugmentConfig};
use spermdet_core::detector::{format_detections, Detector, DEFAULT_CONF_THRESH, DEFAULT_NMS_THRESH};
use spermdet_core::evaldata::{
    average_precision, evaluate_dataset, grayscale_stats, load_labeled_dir, load_raster, write_pnm, EvalError,
    EvalResult, GroundTruthSet, Interpolation,
};
use spermdet_core::model::{ConvPath, Network};
use spermdet_core::netdef::{parse_cfg, LayerSpec, NetworkDef, ParsedCfg};
use spermdet_core::synth::{write_dataset, SynthConfig};
use spermdet_core::trainer::{
    format_anchor_line, init_params, kmeans_anchors, load_dataset_list, train, CheckpointWriter, IterationReport,
    TrainConfig, TrainError, TrainObserver, TrainOptions, TrainState,
};
use spermdet_core::weights::{load_partial, read_weights, WeightsHeader};

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 20_190_101;

#[derive(Debug, Parser)]
#[command(name = "spermdet", version, about = "Single-class small-object detector on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConvKind {
    Reference,
    Optimized,
}

impl From<ConvKind> for ConvPath {
    fn from(k: ConvKind) -> Self {
        match k {
            ConvKind::Reference => ConvPath::Reference,
            ConvKind::Optimized => ConvPath::Optimized,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the layer shape trace, parameter count and weights-file size.
    Info {
        #[arg(long)]
        cfg: PathBuf,
    },
    /// Detect objects in PNM images; writes detections and overlays.
    Detect(DetectArgs),
    /// Score detections against ground truth (mAP@50).
    Eval(EvalArgs),
    /// Gray-level mean, standard deviation and histogram per image.
    Stats { images: Vec<PathBuf> },
    /// Write color-jittered copies of an image.
    Augment(AugmentArgs),
    /// Fit anchor sizes to a directory of annotations with k-means.
    Anchors(AnchorsArgs),
    /// Train from a list of images; writes checkpoints.
    Train(TrainArgs),
    /// Generate a seeded synthetic dataset of dark blobs.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct NetArgs {
    #[arg(long)]
    pub cfg: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, value_enum, default_value_t = ConvKind::Optimized)]
    pub conv: ConvKind,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESH)]
    pub thresh: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESH)]
    pub nms: f64,
    #[arg(long, default_value = "detections")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Directory of `<stem>.txt` detection files.
    #[arg(long, conflicts_with_all = ["cfg", "weights"])]
    pub pred_dir: Option<PathBuf>,
    /// Run the detector on the ground-truth images instead.
    #[arg(long, requires = "weights")]
    pub cfg: Option<PathBuf>,
    #[arg(long, requires = "cfg")]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESH)]
    pub thresh: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_THRESH)]
    pub nms: f64,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// 11-point interpolated AP instead of the all-point envelope.
    #[arg(long)]
    pub eleven_point: bool,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    pub image: PathBuf,
    #[arg(long, default_value = "augmented")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.5)]
    pub saturation: f64,
    #[arg(long, default_value_t = 1.5)]
    pub exposure: f64,
    #[arg(long, default_value_t = 0.1)]
    pub hue: f64,
}

#[derive(Debug, Args)]
pub struct AnchorsArgs {
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Scale boxes into this cfg's network input (default 640x640).
    #[arg(long)]
    pub cfg: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cfg: PathBuf,
    /// One image path per line; annotations next to each image.
    #[arg(long)]
    pub list: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Continue from a checkpoint; the iteration is recovered from its
    /// `seen` counter.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Initialize the first `--init-layers` layers from a donor weights file.
    #[arg(long, requires = "init_layers")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub init_layers: Option<usize>,
    #[arg(long, default_value = "backup")]
    pub out_dir: PathBuf,
    /// Override the cfg's max_batches.
    #[arg(long)]
    pub max_batches: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    #[arg(long, value_enum, default_value_t = ConvKind::Optimized)]
    pub conv: ConvKind,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "synth")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub count: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INPUT: i32 = 2;
    pub const PAIRING: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: exit::INPUT,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn eval_error(e: EvalError) -> CliError {
    let code = match e {
        EvalError::MissingCounterpart(_) | EvalError::UnknownImageId(_) | EvalError::NoGroundTruth(_) => exit::PAIRING,
        _ => exit::INPUT,
    };
    CliError {
        code,
        message: e.to_string(),
    }
}

fn train_error(e: TrainError) -> CliError {
    let code = match e {
        TrainError::NumericFailure { .. } => exit::NUMERIC,
        _ => exit::INPUT,
    };
    CliError {
        code,
        message: e.to_string(),
    }
}

/// Result of a successful command.
#[derive(Debug, Clone)]
pub struct Report {
    pub command: &'static str,
    pub inputs: Value,
    pub metrics: Value,
    pub timing: Value,
    pub text: String,
    /// Non-fatal per-file failures; the exit code is nonzero when present.
    pub failures: Vec<String>,
}

impl Report {
    fn new(command: &'static str, inputs: Value) -> Self {
        Self {
            command,
            inputs,
            metrics: json!({}),
            timing: json!({}),
            text: String::new(),
            failures: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "command": self.command,
            "inputs": self.inputs,
            "metrics": self.metrics,
            "timing": self.timing,
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn check_unit(name: &str, v: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::input(format!("--{name} {v} outside [0, 1]")))
    }
}

/// Parses and validates a cfg file; errors carry the file and line.
pub fn load_cfg(path: &Path) -> Result<ParsedCfg, CliError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::input(format!("{}: not UTF-8", path.display())))?;
    let parsed = parse_cfg(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let violations = parsed.net.validate();
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| format!("{}: {v}", path.display())).collect();
        return Err(CliError::input(lines.join("\n")));
    }
    Ok(parsed)
}

fn load_network(args: &NetArgs) -> Result<Network, CliError> {
    let cfg = load_cfg(&args.cfg)?;
    let bytes = read_file(&args.weights)?;
    let (_, params) =
        read_weights(&bytes, &cfg.net).map_err(|e| CliError::input(format!("{}: {e}", args.weights.display())))?;
    Network::new(cfg.net, params, args.conv.into()).map_err(|e| CliError::input(e.to_string()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::input(e.to_string()))
}

pub fn run(cli: &Cli) -> Result<Report, CliError> {
    match &cli.command {
        Command::Info { cfg } => cmd_info(cfg),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats { images } => cmd_stats(images),
        Command::Augment(a) => cmd_augment(a),
        Command::Anchors(a) => cmd_anchors(a),
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

pub fn cmd_info(path: &Path) -> Result<Report, CliError> {
    let parsed = load_cfg(path)?;
    let def = &parsed.net;
    let trace = def.infer_shapes().map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let count = def.param_count();
    let head = def.head().ok_or_else(|| CliError::input("no yolo layer"))?;
    let head_shape = trace.input_of(head.layer);
    let dropouts: Vec<Value> = def
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            LayerSpec::Dropout { probability } => Some(json!({"layer": i, "probability": probability})),
            _ => None,
        })
        .collect();
    let first_shortcut = def.layers.iter().position(|l| matches!(l, LayerSpec::Shortcut { .. }));
    let max_kernel = def.conv_layers().iter().map(|c| c.spec.size).max().unwrap_or(0);
    let mb = count.serialized_bytes as f64 / 1e6;

    let mut report = Report::new("info", json!({"cfg": path.display().to_string()}));
    let mut text = String::new();
    let _ = writeln!(text, "input {}", def.input_chw());
    for (i, (layer, shape)) in def.layers.iter().zip(&trace.layers).enumerate() {
        let detail = match layer {
            LayerSpec::Convolutional(c) => format!(
                "{}x{}/{} {} filters{} {}",
                c.size,
                c.size,
                c.stride,
                c.filters,
                if c.batch_normalize { " bn" } else { "" },
                c.activation.name()
            ),
            LayerSpec::Shortcut { from, activation } => format!("from {from} {}", activation.name()),
            LayerSpec::Dropout { probability } => format!("p={probability}"),
            LayerSpec::Yolo { anchors, classes } => format!("{} anchors, {classes} class(es)", anchors.len()),
        };
        let _ = writeln!(text, "{i:>3} {:<14} {:<34} -> {shape}", layer.kind(), detail);
    }
    let _ = writeln!(text, "layers: {}", def.layers.len());
    let _ = writeln!(text, "head: {head_shape}");
    let _ = writeln!(text, "parameters: {}", count.total_floats);
    let _ = writeln!(text, "weights file: {} bytes ({mb:.2} MB)", count.serialized_bytes);
    report.text = text;
    report.metrics = json!({
        "layers": def.layers.len(),
        "convolutions": def.conv_layers().len(),
        "yolo_layers": def.layers.iter().filter(|l| matches!(l, LayerSpec::Yolo { .. })).count(),
        "head_shape": [head_shape.c, head_shape.h, head_shape.w],
        "dropout": dropouts,
        "first_shortcut": first_shortcut,
        "max_kernel": max_kernel,
        "parameters": count.total_floats,
        "weights_bytes": count.serialized_bytes,
        "weights_mb": mb,
        "shapes": trace.layers.iter().map(|s| [s.c, s.h, s.w]).collect::<Vec<_>>(),
    });
    Ok(report)
}

struct ImageOutcome {
    path: PathBuf,
    detections: usize,
    preprocess_ms: f64,
    inference_ms: f64,
}

fn detect_one(detector: &Detector, path: &Path, out_dir: &Path) -> Result<ImageOutcome, String> {
    let raster = load_raster(path).map_err(|e| e.to_string())?;
    let out = detector.detect(&raster.to_float()).map_err(|e| format!("{}: {e}", path.display()))?;
    let name = stem(path);
    write_atomic(&out_dir.join(format!("{name}.txt")), format_detections(&out.detections).as_bytes())
        .map_err(|e| e.message)?;
    let mut overlay = raster.to_rgb();
    for d in &out.detections {
        let b = &d.bbox;
        overlay.draw_rect(b.left(), b.top(), b.right(), b.bottom(), [255, 0, 0]);
    }
    write_atomic(&out_dir.join(format!("{name}_overlay.ppm")), &write_pnm(&overlay)).map_err(|e| e.message)?;
    Ok(ImageOutcome {
        path: path.to_path_buf(),
        detections: out.detections.len(),
        preprocess_ms: out.preprocess.as_secs_f64() * 1e3,
        inference_ms: out.inference.as_secs_f64() * 1e3,
    })
}

pub fn cmd_detect(a: &DetectArgs) -> Result<Report, CliError> {
    check_unit("thresh", a.thresh)?;
    check_unit("nms", a.nms)?;
    let detector = Detector {
        network: load_network(&a.net)?,
        conf_thresh: a.thresh,
        nms_thresh: a.nms,
    };
    create_dir(&a.out_dir)?;
    let results: Vec<Result<ImageOutcome, String>> =
        pool(a.jobs)?.install(|| a.images.par_iter().map(|p| detect_one(&detector, p, &a.out_dir)).collect());

    let mut report = Report::new(
        "detect",
        json!({
            "cfg": a.net.cfg.display().to_string(),
            "weights": a.net.weights.display().to_string(),
            "images": a.images.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "thresh": a.thresh,
            "nms": a.nms,
        }),
    );
    let mut per_image = Vec::new();
    let mut total_inference = 0.0;
    let mut total_pre = 0.0;
    for r in results {
        match r {
            Ok(o) => {
                let _ = writeln!(
                    report.text,
                    "{}: {} detections, preprocess {:.1} ms, inference {:.1} ms",
                    o.path.display(),
                    o.detections,
                    o.preprocess_ms,
                    o.inference_ms
                );
                total_inference += o.inference_ms;
                total_pre += o.preprocess_ms;
                per_image.push(json!({
                    "image": o.path.display().to_string(),
                    "detections": o.detections,
                    "preprocess_ms": o.preprocess_ms,
                    "inference_ms": o.inference_ms,
                }));
            }
            Err(e) => report.failures.push(e),
        }
    }
    let done = per_image.len();
    let fps = if total_inference > 0.0 { done as f64 / (total_inference / 1e3) } else { 0.0 };
    let _ = writeln!(report.text, "{done} image(s), {fps:.2} fps (inference only)");
    report.metrics = json!({"images": done, "failed": report.failures.len(), "per_image": per_image});
    report.timing = json!({"preprocess_ms": total_pre, "inference_ms": total_inference, "fps": fps});
    Ok(report)
}

fn eval_text(r: &EvalResult) -> String {
    format!(
        "tp {} fp {} fn {}\nAP {:.6}\nmAP@50 {:.6}\n",
        r.tp, r.fp, r.fn_, r.ap, r.map50
    )
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Report, CliError> {
    check_unit("iou", a.iou)?;
    let interpolation = if a.eleven_point {
        Interpolation::ElevenPoint
    } else {
        Interpolation::AllPoint
    };
    let start = Instant::now();
    let result = match (&a.pred_dir, &a.cfg, &a.weights) {
        (Some(pred), _, _) => evaluate_dataset(pred, &a.gt_dir, a.iou, interpolation).map_err(eval_error)?,
        (None, Some(cfg), Some(weights)) => {
            check_unit("thresh", a.thresh)?;
            check_unit("nms", a.nms)?;
            let detector = Detector {
                network: load_network(&NetArgs {
                    cfg: cfg.clone(),
                    weights: weights.clone(),
                    conv: ConvKind::Optimized,
                })?,
                conf_thresh: a.thresh,
                nms_thresh: a.nms,
            };
            let labeled = load_labeled_dir(&a.gt_dir).map_err(eval_error)?;
            let mut preds = Vec::with_capacity(labeled.len());
            for l in &labeled {
                let raster = load_raster(&l.image_path).map_err(eval_error)?;
                let out = detector.detect(&raster.to_float()).map_err(|e| CliError::input(e.to_string()))?;
                preds.push((l.stem.clone(), out.detections));
            }
            let gts: GroundTruthSet = labeled.iter().map(|l| (l.stem.clone(), l.boxes.clone())).collect();
            average_precision(&preds, &gts, a.iou, interpolation).map_err(eval_error)?
        }
        _ => return Err(CliError::input("eval needs --pred-dir or both --cfg and --weights")),
    };
    let mut report = Report::new(
        "eval",
        json!({
            "gt_dir": a.gt_dir.display().to_string(),
            "pred_dir": a.pred_dir.as_ref().map(|p| p.display().to_string()),
            "iou": a.iou,
            "interpolation": if a.eleven_point { "eleven-point" } else { "all-point" },
        }),
    );
    report.text = eval_text(&result);
    report.metrics = json!({
        "tp": result.tp,
        "fp": result.fp,
        "fn": result.fn_,
        "gt_count": result.gt_count,
        "ap": result.ap,
        "map50": result.map50,
    });
    report.timing = json!({"total_ms": start.elapsed().as_secs_f64() * 1e3});
    Ok(report)
}

pub fn cmd_stats(images: &[PathBuf]) -> Result<Report, CliError> {
    if images.is_empty() {
        return Err(CliError::input("no images given"));
    }
    let mut report = Report::new(
        "stats",
        json!({"images": images.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()}),
    );
    let mut per_image = Vec::new();
    for path in images {
        let raster = load_raster(path).map_err(|e| CliError::input(e.to_string()))?;
        let s = grayscale_stats(&raster);
        let _ = writeln!(report.text, "{}: mean {:.2} std {:.2}", path.display(), s.mean, s.std);
        per_image.push(json!({"image": path.display().to_string(), "mean": s.mean, "std": s.std, "histogram": s.histogram}));
    }
    report.metrics = json!({"per_image": per_image});
    Ok(report)
}

pub fn cmd_augment(a: &AugmentArgs) -> Result<Report, CliError> {
    let cfg = AugmentConfig {
        saturation: a.saturation,
        exposure: a.exposure,
        hue: a.hue,
    };
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(CliError::input(problems.join("; ")));
    }
    let image = load_raster(&a.image).map_err(|e| CliError::input(e.to_string()))?.to_float();
    create_dir(&a.out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let name = stem(&a.image);
    let mut written = Vec::new();
    for i in 0..a.count {
        let out = jitter(&image, &cfg, &mut rng);
        let path = a.out_dir.join(format!("{name}_aug{i}.ppm"));
        write_atomic(&path, &write_pnm(&out.to_raster()))?;
        written.push(path.display().to_string());
    }
    let mut report = Report::new(
        "augment",
        json!({"image": a.image.display().to_string(), "seed": a.seed, "saturation": a.saturation, "exposure": a.exposure, "hue": a.hue}),
    );
    report.text = written.iter().map(|p| format!("{p}\n")).collect();
    report.metrics = json!({"written": written});
    Ok(report)
}

pub fn cmd_anchors(a: &AnchorsArgs) -> Result<Report, CliError> {
    let (net_w, net_h) = match &a.cfg {
        Some(p) => {
            let c = load_cfg(p)?;
            (c.net.input_width, c.net.input_height)
        }
        None => (640, 640),
    };
    let labeled = load_labeled_dir(&a.gt_dir).map_err(eval_error)?;
    let mut sizes = Vec::new();
    for l in &labeled {
        let scale = (net_w as f64 / l.width as f64).min(net_h as f64 / l.height as f64);
        sizes.extend(l.boxes.iter().map(|b| (b.w * scale, b.h * scale)));
    }
    let anchors = kmeans_anchors(&sizes, a.k, a.seed).map_err(train_error)?;
    let mut report = Report::new(
        "anchors",
        json!({"gt_dir": a.gt_dir.display().to_string(), "k": a.k, "seed": a.seed, "net": [net_w, net_h]}),
    );
    report.text = format!("{}\n", format_anchor_line(&anchors));
    report.metrics = json!({
        "boxes": sizes.len(),
        "anchors": anchors.iter().map(|x| [x.w, x.h]).collect::<Vec<_>>(),
    });
    Ok(report)
}

/// Prints progress and writes checkpoints.
struct Progress {
    writer: CheckpointWriter,
    last: Option<IterationReport>,
    losses: Vec<(usize, f64)>,
}

impl TrainObserver for Progress {
    fn on_iteration(&mut self, r: &IterationReport) -> ControlFlow<()> {
        if r.iteration.is_multiple_of(10) {
            eprintln!("iteration {} loss {:.4} lr {:.6}", r.iteration, r.loss, r.learning_rate);
            let _ = std::io::stderr().flush();
        }
        self.losses.push((r.iteration, r.loss));
        self.last = Some(*r);
        ControlFlow::Continue(())
    }

    fn on_checkpoint(
        &mut self,
        def: &NetworkDef,
        state: &TrainState,
        cfg: &TrainConfig,
    ) -> Result<ControlFlow<()>, TrainError> {
        self.writer.on_checkpoint(def, state, cfg)
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<Report, CliError> {
    let parsed = load_cfg(&a.cfg)?;
    let def = parsed.net;
    let mut cfg = parsed.train;
    if let Some(m) = a.max_batches {
        cfg.max_batches = m;
    }
    let dataset = load_dataset_list(&a.list).map_err(train_error)?;
    let state = match (&a.resume, &a.init, a.init_layers) {
        (Some(path), _, _) => {
            let (header, params) =
                read_weights(&read_file(path)?, &def).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            let mut s = TrainState::new(params, a.seed);
            s.iteration = (header.seen / cfg.batch.max(1) as u64) as usize;
            s
        }
        (None, Some(path), Some(n)) => {
            let (_, params) = load_partial(&read_file(path)?, &def, n, a.seed)
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            TrainState::new(params, a.seed)
        }
        _ => TrainState::new(init_params(&def, a.seed), a.seed),
    };
    let start_iteration = state.iteration;
    create_dir(&a.out_dir)?;
    let opts = TrainOptions {
        augment: parsed.augment,
        conv_path: a.conv.into(),
        checkpoint_every: a.checkpoint_every,
    };
    let mut progress = Progress {
        writer: CheckpointWriter::new(&a.out_dir, stem(&a.cfg)),
        last: None,
        losses: Vec::new(),
    };
    let t0 = Instant::now();
    let final_state = pool(a.jobs)?
        .install(|| train(&def, &dataset, &cfg, state, &opts, &mut progress))
        .map_err(train_error)?;
    let elapsed = t0.elapsed().as_secs_f64();
    let checkpoints: Vec<String> = progress.writer.written.iter().map(|p| p.display().to_string()).collect();

    let mut report = Report::new(
        "train",
        json!({
            "cfg": a.cfg.display().to_string(),
            "list": a.list.display().to_string(),
            "seed": a.seed,
            "images": dataset.len(),
            "start_iteration": start_iteration,
            "max_batches": cfg.max_batches,
        }),
    );
    for c in &checkpoints {
        let _ = writeln!(report.text, "wrote {c}");
    }
    let _ = writeln!(report.text, "finished at iteration {}", final_state.iteration);
    report.metrics = json!({
        "iteration": final_state.iteration,
        "final_loss": progress.last.map(|r| r.loss),
        "checkpoints": checkpoints,
        "seen": WeightsHeader::new((final_state.iteration * cfg.batch) as u64).seen,
    });
    report.timing = json!({"total_s": elapsed});
    Ok(report)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Report, CliError> {
    let list = write_dataset(&a.out_dir, &SynthConfig::default(), a.count, a.seed)
        .map_err(|e| CliError::input(format!("{}: {e}", a.out_dir.display())))?;
    let mut report = Report::new("synth", json!({"out_dir": a.out_dir.display().to_string(), "count": a.count, "seed": a.seed}));
    report.text = format!("wrote {} images, list {}\n", a.count, list.display());
    report.metrics = json!({"list": list.display().to_string(), "images": a.count});
    Ok(report)
}
