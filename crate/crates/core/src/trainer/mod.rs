//! Training on small datasets: targets and loss for the detection head,
//! learning-rate schedule, SGD with momentum, anchor fitting and the
//! checkpointing training loop.

mod config;
mod kmeans;
mod loss;
mod optim;

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use config::TrainConfig;
pub use kmeans::{format_anchor_line, kmeans_anchors};
pub use loss::{assign_targets, yolo_loss, BoxTarget, TargetAssignment};
pub use optim::{init_params, lr_at, sgd_step, TrainState};

use crate::augment::{jitter, AugmentConfig};
use crate::detector::{decode_all, letterbox_into, BBox, DecodeError, Detector, LetterboxTransform, LETTERBOX_FILL};
use crate::evaldata::{average_precision, load_labeled, load_raster, EvalError, EvalResult, GroundTruthSet, Interpolation};
use crate::model::{ConvPath, ModelError, Network, ParamGrads};
use crate::netdef::NetworkDef;
use crate::ops::update_rolling;
use crate::raster::RgbImage;
use crate::tensor::{Shape, Tensor, TensorError};
use crate::weights::{write_weights, WeightsError, WeightsHeader};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("ground-truth center ({cx}, {cy}) lies outside the network canvas")]
    GtOutsideCanvas { cx: f64, cy: f64 },
    #[error("need at least {needed} boxes, found {found}")]
    TooFewBoxes { needed: usize, found: usize },
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NumericFailure { iteration: usize, detail: String },
    #[error("network has no yolo layer")]
    NoHead,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Data(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// One training image with its boxes in image pixels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RgbImage,
    pub boxes: Vec<BBox>,
}

/// Reads a list file of image paths (one per line, `#` comments allowed,
/// relative paths resolved against the list's directory) and each image's
/// `.txt` annotations.
pub fn load_dataset_list(list: &Path) -> Result<Vec<Sample>, TrainError> {
    let text = fs::read_to_string(list).map_err(|source| TrainError::Io {
        path: list.to_path_buf(),
        source,
    })?;
    let base = list.parent().unwrap_or(Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let path = base.join(l);
            let labeled = load_labeled(&path)?;
            Ok(Sample {
                image: load_raster(&path)?.to_float(),
                boxes: labeled.boxes,
            })
        })
        .collect()
}

/// Knobs of the training loop that are not network hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub augment: AugmentConfig,
    pub conv_path: ConvPath,
    /// Checkpoint cadence in iterations.
    pub checkpoint_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            augment: AugmentConfig::default(),
            conv_path: ConvPath::Optimized,
            checkpoint_every: 100,
        }
    }
}

/// Summary of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport {
    /// Iteration count after the step.
    pub iteration: usize,
    /// Loss per image, averaged over the batch.
    pub loss: f64,
    pub learning_rate: f64,
}

/// Hooks called by [`train`]. Returning `Break` stops training after the
/// current step.
pub trait TrainObserver {
    fn on_iteration(&mut self, _report: &IterationReport) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_checkpoint(&mut self, _def: &NetworkDef, _state: &TrainState, _cfg: &TrainConfig) -> Result<ControlFlow<()>, TrainError> {
        Ok(ControlFlow::Continue(()))
    }
}

impl TrainObserver for () {}

/// Writes `<stem>_<iteration>.weights` into a directory.
#[derive(Debug, Clone)]
pub struct CheckpointWriter {
    pub dir: PathBuf,
    pub stem: String,
    pub written: Vec<PathBuf>,
}

impl CheckpointWriter {
    pub fn new(dir: impl Into<PathBuf>, stem: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            stem: stem.into(),
            written: Vec::new(),
        }
    }

    pub fn path_for(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("{}_{iteration}.weights", self.stem))
    }
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(&mut self, def: &NetworkDef, state: &TrainState, cfg: &TrainConfig) -> Result<ControlFlow<()>, TrainError> {
        let header = WeightsHeader::new((state.iteration * cfg.batch) as u64);
        let bytes = write_weights(def, &state.params, header)?;
        let path = self.path_for(state.iteration);
        let tmp = path.with_extension("weights.tmp");
        fs::write(&tmp, bytes)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })?;
        self.written.push(path);
        Ok(ControlFlow::Continue(()))
    }
}

/// Random stream for one `(iteration, slot)` of a run, independent of
/// which thread consumes it.
fn stream(seed: u64, iteration: usize, slot: usize, domain: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(iteration as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(slot as u64).to_le_bytes());
    key[24..].copy_from_slice(&domain.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const DOMAIN_SAMPLE: u64 = 1;
const DOMAIN_DROPOUT: u64 = 2;

/// Outcome of one micro-batch.
struct MicroResult {
    loss: f64,
    grads: Vec<ParamGrads>,
    /// Per-convolution batch statistics (normalized convolutions only).
    stats: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

fn run_micro_batch(
    net: &Network,
    images: &[(Vec<f32>, Vec<BBox>)],
    cfg: &TrainConfig,
    mut rng: ChaCha8Rng,
) -> Result<MicroResult, TrainError> {
    let def = net.def();
    let head = def.head().ok_or(TrainError::NoHead)?;
    let (net_w, net_h) = (def.input_width, def.input_height);
    let image_len = 3 * net_w * net_h;
    let mut data = Vec::with_capacity(images.len() * image_len);
    for (chw, _) in images {
        data.extend_from_slice(chw);
    }
    let input = Tensor::from_vec(Shape::new(images.len(), 3, net_h, net_w), data)?;
    let trace = net.forward_train(&input, &mut rng)?;
    let out = trace.head();
    let s = out.shape();
    let assignments = images
        .iter()
        .enumerate()
        .map(|(n, (_, boxes))| {
            let preds = decode_all(out, n, head.anchors, net_w, net_h)?;
            assign_targets(boxes, head.anchors, s.w, s.h, net_w, net_h, &preds, cfg.ignore_thresh)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let (loss, grad) = yolo_loss(out, &assignments)?;
    let grads = net.backward(&trace, &grad)?;
    let stats = trace
        .batch_stats()
        .into_iter()
        .map(|s| s.map(|(m, v)| (m.to_vec(), v.to_vec())))
        .collect();
    Ok(MicroResult { loss, grads, stats })
}

/// Draws, augments and letterboxes the images of batch slot `slot`.
fn prepare_slot(
    dataset: &[Sample],
    def: &NetworkDef,
    augment: &AugmentConfig,
    seed: u64,
    iteration: usize,
    slot: usize,
) -> (Vec<f32>, Vec<BBox>) {
    let mut rng = stream(seed, iteration, slot, DOMAIN_SAMPLE);
    let sample = &dataset[rng.gen_range(0..dataset.len())];
    let image = jitter(&sample.image, augment, &mut rng);
    let (net_w, net_h) = (def.input_width, def.input_height);
    let t = LetterboxTransform::fit(image.width, image.height, net_w, net_h);
    let mut chw = vec![LETTERBOX_FILL; 3 * net_w * net_h];
    letterbox_into(&image, &t, &mut chw, net_w, net_h);
    (chw, sample.boxes.iter().map(|b| t.apply(b)).collect())
}

/// Runs SGD from `state` until `cfg.max_batches` updates have been applied
/// or the observer stops it. A checkpoint is offered to the observer for
/// the starting state, every `checkpoint_every` iterations and at the end.
///
/// Each iteration draws `batch` images with replacement, splits them into
/// `subdivisions` micro-batches that run concurrently, averages gradients
/// over the whole batch and folds the micro-batch statistics into the
/// rolling normalization averages in micro-batch order. Every random draw
/// comes from a stream keyed by `(seed, iteration, slot)`, so results do
/// not depend on thread scheduling.
pub fn train(
    def: &NetworkDef,
    dataset: &[Sample],
    cfg: &TrainConfig,
    mut state: TrainState,
    opts: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut problems = cfg.violations();
    problems.extend(opts.augment.violations());
    problems.extend(def.validate().into_iter().map(|v| v.to_string()));
    if opts.checkpoint_every == 0 {
        problems.push("checkpoint interval must be >= 1".into());
    }
    if !problems.is_empty() {
        return Err(TrainError::InvalidConfig(problems));
    }
    let seed = state.rng_seed;
    let mut net = Network::new(def.clone(), std::mem::take(&mut state.params), opts.conv_path)?;
    let micro = cfg.micro_batch();

    let checkpoint = |net: &Network, state: &mut TrainState, observer: &mut dyn TrainObserver| {
        state.params = net.params().to_vec();
        observer.on_checkpoint(def, state, cfg)
    };
    if checkpoint(&net, &mut state, observer)?.is_break() {
        return Ok(state);
    }

    while state.iteration < cfg.max_batches {
        let it = state.iteration;
        let slots: Vec<(Vec<f32>, Vec<BBox>)> = (0..cfg.batch)
            .into_par_iter()
            .map(|slot| prepare_slot(dataset, def, &opts.augment, seed, it, slot))
            .collect();
        let results = slots
            .par_chunks(micro)
            .enumerate()
            .map(|(m, chunk)| run_micro_batch(&net, chunk, cfg, stream(seed, it, m, DOMAIN_DROPOUT)))
            .collect::<Result<Vec<_>, _>>()?;

        let scale = 1.0 / cfg.batch as f32;
        let mut grads: Vec<ParamGrads> = net.params().iter().map(ParamGrads::zeros_like).collect();
        let mut loss = 0.0;
        for r in &results {
            loss += r.loss;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.add_scaled(g, scale);
            }
        }
        let loss = loss / cfg.batch as f64;
        let norm: f64 = grads.iter().map(ParamGrads::sum_squares).sum();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(TrainError::NumericFailure {
                iteration: it,
                detail: format!("loss {loss}, squared gradient norm {norm}"),
            });
        }
        for r in &results {
            for (p, s) in net.params_mut().iter_mut().zip(&r.stats) {
                if let (Some(bn), Some((mean, var))) = (p.bn.as_mut(), s) {
                    update_rolling(bn, mean, var);
                }
            }
        }

        let lr = lr_at(it, cfg);
        net.swap_params(&mut state.params);
        sgd_step(&mut state, &grads, lr, cfg);
        net.swap_params(&mut state.params);

        let report = IterationReport {
            iteration: state.iteration,
            loss,
            learning_rate: lr,
        };
        let mut stop = observer.on_iteration(&report).is_break();
        if state.iteration % opts.checkpoint_every == 0 || state.iteration == cfg.max_batches || stop {
            stop |= checkpoint(&net, &mut state, observer)?.is_break();
        }
        if stop {
            break;
        }
    }
    state.params = net.into_params();
    Ok(state)
}

/// Scores `network` on labeled samples: detection at `conf_thresh`,
/// suppression at `nms_thresh`, matching at `iou_thresh`.
pub fn evaluate_samples(
    network: &Network,
    samples: &[Sample],
    conf_thresh: f64,
    nms_thresh: f64,
    iou_thresh: f64,
) -> Result<EvalResult, TrainError> {
    let detector = Detector {
        network: network.clone(),
        conf_thresh,
        nms_thresh,
    };
    let preds = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let out = detector.detect(&s.image).map_err(|e| match e {
                crate::detector::DetectError::Model(m) => TrainError::Model(m),
                crate::detector::DetectError::Decode(d) => TrainError::Decode(d),
                crate::detector::DetectError::NoHead => TrainError::NoHead,
            })?;
            Ok((i.to_string(), out.detections))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let gts: GroundTruthSet = samples.iter().enumerate().map(|(i, s)| (i.to_string(), s.boxes.clone())).collect();
    Ok(average_precision(&preds, &gts, iou_thresh, Interpolation::AllPoint)?)
}

/// Highest-scoring `(iteration, score)` pair; ties go to the earlier
/// iteration.
pub fn select_best_checkpoint(scores: &[(usize, f64)]) -> Option<(usize, f64)> {
    scores
        .iter()
        .copied()
        .fold(None, |best: Option<(usize, f64)>, (it, s)| match best {
            Some((bi, bs)) if bs > s || (bs == s && bi <= it) => best,
            _ => Some((it, s)),
        })
}
