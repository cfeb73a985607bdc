//! Ground truth, image I/O, dataset statistics and mAP@50 scoring.

mod ap;
mod pnm;
mod stats;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use ap::{average_precision, EvalResult, GroundTruthSet, Interpolation, PrPoint};
pub use pnm::{read_pnm, read_pnm_header, write_pnm, PnmError};
pub use stats::{grayscale_stats, luma, ImageStats};

use crate::detector::{parse_detections, BBox, DecodeError};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationError {
    #[error("line {0}: expected `class cx cy w h`")]
    MalformedLine(usize),
    #[error("line {0}: class must be 0 and normalized values must lie in [0, 1]")]
    ValueOutOfRange(usize),
}

/// Reads normalized `class cx cy w h` lines and scales them to an
/// `image_w x image_h` image.
pub fn parse_yolo_annotations(text: &str, image_w: usize, image_h: usize) -> Result<Vec<BBox>, AnnotationError> {
    let (fw, fh) = (image_w as f64, image_h as f64);
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let n = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(AnnotationError::MalformedLine(n));
        }
        let class: i64 = fields[0].parse().map_err(|_| AnnotationError::MalformedLine(n))?;
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| AnnotationError::MalformedLine(n))?;
        if class != 0 || v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(AnnotationError::ValueOutOfRange(n));
        }
        out.push(BBox::new(v[0] * fw, v[1] * fh, v[2] * fw, v[3] * fh));
    }
    Ok(out)
}

/// Inverse of [`parse_yolo_annotations`], six decimals.
pub fn format_yolo_annotations(boxes: &[BBox], image_w: usize, image_h: usize) -> String {
    let (fw, fh) = (image_w as f64, image_h as f64);
    boxes
        .iter()
        .map(|b| format!("0 {:.6} {:.6} {:.6} {:.6}\n", b.cx / fw, b.cy / fh, b.w / fw, b.h / fh))
        .collect()
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction for unknown image `{0}`")]
    UnknownImageId(String),
    #[error("no counterpart for `{0}`")]
    MissingCounterpart(String),
    #[error("no ground-truth files in {0}")]
    NoGroundTruth(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Annotation { path: PathBuf, source: AnnotationError },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PnmError },
    #[error("{path}: {source}")]
    Detections { path: PathBuf, source: DecodeError },
}

fn read(path: &Path) -> Result<Vec<u8>, EvalError> {
    fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String, EvalError> {
    fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub const IMAGE_EXTENSIONS: [&str; 3] = ["ppm", "pgm", "pnm"];

pub fn load_raster(path: &Path) -> Result<Raster, EvalError> {
    read_pnm(&read(path)?).map_err(|source| EvalError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Image with its annotation file `<stem>.txt` next to it.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub stem: String,
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    /// Original-image pixels.
    pub boxes: Vec<BBox>,
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn image_dims(path: &Path) -> Result<(usize, usize), EvalError> {
    let bytes = read(path)?;
    let (w, h, _, _) = read_pnm_header(&bytes).map_err(|source| EvalError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((w, h))
}

/// Loads an image path and its sibling annotation file.
pub fn load_labeled(image_path: &Path) -> Result<LabeledImage, EvalError> {
    let (width, height) = image_dims(image_path)?;
    let ann = image_path.with_extension("txt");
    if !ann.exists() {
        return Err(EvalError::MissingCounterpart(ann.display().to_string()));
    }
    let boxes = parse_yolo_annotations(&read_text(&ann)?, width, height)
        .map_err(|source| EvalError::Annotation { path: ann, source })?;
    Ok(LabeledImage {
        stem: stem_of(image_path),
        image_path: image_path.to_path_buf(),
        width,
        height,
        boxes,
    })
}

fn sorted_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>, EvalError> {
    let entries = fs::read_dir(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| extensions.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Every PNM image in `dir` that has an annotation file, sorted by name.
/// Annotation files without an image are reported as missing counterparts.
pub fn load_labeled_dir(dir: &Path) -> Result<Vec<LabeledImage>, EvalError> {
    let images = sorted_files(dir, &IMAGE_EXTENSIONS)?;
    for ann in sorted_files(dir, &["txt"])? {
        let stem = stem_of(&ann);
        if !images.iter().any(|p| stem_of(p) == stem) {
            return Err(EvalError::MissingCounterpart(ann.display().to_string()));
        }
    }
    let out = images
        .iter()
        .map(|p| load_labeled(p))
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err(EvalError::NoGroundTruth(dir.to_path_buf()));
    }
    Ok(out)
}

/// Pairs `<stem>.txt` prediction files in `pred_dir` with labeled images in
/// `gt_dir` and scores them as one pooled set.
pub fn evaluate_dataset(
    pred_dir: &Path,
    gt_dir: &Path,
    iou_thresh: f64,
    interpolation: Interpolation,
) -> Result<EvalResult, EvalError> {
    let labeled = load_labeled_dir(gt_dir)?;
    let gts: GroundTruthSet = labeled.iter().map(|l| (l.stem.clone(), l.boxes.clone())).collect();
    let pred_files = sorted_files(pred_dir, &["txt"])?;
    for p in &pred_files {
        if gts.get(&stem_of(p)).is_none() {
            return Err(EvalError::MissingCounterpart(p.display().to_string()));
        }
    }
    let mut preds = Vec::with_capacity(labeled.len());
    for l in &labeled {
        let path = pred_dir.join(format!("{}.txt", l.stem));
        if !path.exists() {
            return Err(EvalError::MissingCounterpart(path.display().to_string()));
        }
        let dets = parse_detections(&read_text(&path)?).map_err(|source| EvalError::Detections { path, source })?;
        preds.push((l.stem.clone(), dets));
    }
    average_precision(&preds, &gts, iou_thresh, interpolation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_examples() {
        let b = parse_yolo_annotations("0 0.5 0.5 0.1 0.2\n", 640, 480).unwrap();
        assert_eq!(b, vec![BBox::new(320.0, 240.0, 64.0, 96.0)]);
        assert_eq!(parse_yolo_annotations("", 640, 480).unwrap(), vec![]);
        assert_eq!(
            parse_yolo_annotations("0 1.5 0.5 0.1 0.1", 640, 480),
            Err(AnnotationError::ValueOutOfRange(1))
        );
        assert_eq!(
            parse_yolo_annotations("\n1 0.5 0.5 0.1 0.1", 640, 480),
            Err(AnnotationError::ValueOutOfRange(2))
        );
        assert_eq!(parse_yolo_annotations("0 0.5 x 0.1 0.1", 640, 480), Err(AnnotationError::MalformedLine(1)));
        assert_eq!(parse_yolo_annotations("0 0.5 0.1 0.1", 640, 480), Err(AnnotationError::MalformedLine(1)));
    }

    #[test]
    fn annotation_format_round_trip() {
        let boxes = vec![BBox::new(320.0, 240.0, 64.0, 96.0), BBox::new(10.0, 20.0, 8.0, 12.0)];
        let text = format_yolo_annotations(&boxes, 640, 480);
        let back = parse_yolo_annotations(&text, 640, 480).unwrap();
        for (a, b) in boxes.iter().zip(back) {
            assert!((a.cx - b.cx).abs() < 1e-3 && (a.h - b.h).abs() < 1e-3);
        }
    }
}
