//! Inference: letterboxing, forward pass, head decoding, non-maximum
//! suppression and mapping boxes back to image pixels.

mod geometry;

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{iou, letterbox, letterbox_into, size_iou, BBox, LetterboxTransform, LETTERBOX_FILL};

use crate::model::{ModelError, Network};
use crate::netdef::{filters_per_cell, Anchor};
use crate::ops::sigmoid;
use crate::raster::RgbImage;
use crate::tensor::{Element, Tensor};

/// Default minimum confidence kept by [`decode`].
pub const DEFAULT_CONF_THRESH: f64 = 0.25;
/// Default IoU above which [`nms`] suppresses the weaker box.
pub const DEFAULT_NMS_THRESH: f64 = 0.45;

/// A decoded box with its scores; `confidence = objectness * class_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_prob: f64,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, objectness: f64, class_prob: f64) -> Self {
        Self {
            bbox,
            objectness,
            class_prob,
            confidence: objectness * class_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("head has {found} channels, {anchors} anchors with one class need {expected}")]
    ChannelMismatch {
        found: usize,
        expected: usize,
        anchors: usize,
    },
    #[error("line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
}

fn check_channels<T: Element>(head: &Tensor<T>, anchors: &[Anchor]) -> Result<(), DecodeError> {
    let expected = filters_per_cell(anchors.len(), 1);
    if head.shape().c != expected || anchors.is_empty() {
        return Err(DecodeError::ChannelMismatch {
            found: head.shape().c,
            expected,
            anchors: anchors.len(),
        });
    }
    Ok(())
}

/// Index of an anchor slot in `(anchor, row, col)` order.
#[inline]
pub fn slot_index(anchor: usize, row: usize, col: usize, grid_w: usize, grid_h: usize) -> usize {
    (anchor * grid_h + row) * grid_w + col
}

/// Every predicted box of image `n`, unthresholded, indexed by
/// [`slot_index`], with objectness and class probability.
pub fn decode_all<T: Element>(
    head: &Tensor<T>,
    n: usize,
    anchors: &[Anchor],
    net_w: usize,
    net_h: usize,
) -> Result<Vec<Detection>, DecodeError> {
    check_channels(head, anchors)?;
    let s = head.shape();
    let stride_x = net_w as f64 / s.w as f64;
    let stride_y = net_h as f64 / s.h as f64;
    let per_anchor = filters_per_cell(1, 1);
    let mut out = Vec::with_capacity(anchors.len() * s.plane_len());
    for (a, anchor) in anchors.iter().enumerate() {
        let ch = |k: usize, row: usize, col: usize| head.get(n, a * per_anchor + k, row, col).as_f64();
        for row in 0..s.h {
            for col in 0..s.w {
                let bbox = BBox {
                    cx: (sigmoid(ch(0, row, col)) + col as f64) * stride_x,
                    cy: (sigmoid(ch(1, row, col)) + row as f64) * stride_y,
                    w: anchor.w * ch(2, row, col).exp(),
                    h: anchor.h * ch(3, row, col).exp(),
                };
                out.push(Detection::new(bbox, sigmoid(ch(4, row, col)), sigmoid(ch(5, row, col))));
            }
        }
    }
    Ok(out)
}

/// Detections of image `n` with `confidence >= conf_thresh`, in the network
/// input frame, ordered by anchor, row, column.
pub fn decode<T: Element>(
    head: &Tensor<T>,
    n: usize,
    anchors: &[Anchor],
    net_w: usize,
    net_h: usize,
    conf_thresh: f64,
) -> Result<Vec<Detection>, DecodeError> {
    Ok(decode_all(head, n, anchors, net_w, net_h)?
        .into_iter()
        .filter(|d| d.confidence >= conf_thresh)
        .collect())
}

/// Greedy suppression: keep the most confident remaining box, drop every
/// other box overlapping it by more than `iou_thresh`. Output is sorted by
/// confidence, ties kept in input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(order[i]);
        for j in i + 1..order.len() {
            if !suppressed[j] && iou(&order[i].bbox, &order[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Network-frame detections into original-image pixels. No clamping.
pub fn map_back(dets: &[Detection], transform: &LetterboxTransform) -> Vec<Detection> {
    dets.iter()
        .map(|d| Detection {
            bbox: transform.map_back(&d.bbox),
            ..*d
        })
        .collect()
}

/// One line per detection: `class confidence cx cy w h`, six decimals.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(s, "0 {:.6} {:.6} {:.6} {:.6} {:.6}", d.confidence, b.cx, b.cy, b.w, b.h);
    }
    s
}

/// Reads [`format_detections`] output. Objectness is set to the confidence
/// and the class probability to 1.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>, DecodeError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = |detail: &str| DecodeError::MalformedLine {
            line: line_no,
            detail: detail.to_string(),
        };
        if fields.len() != 6 {
            return Err(bad("expected `class confidence cx cy w h`"));
        }
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("non-numeric field"))?;
        if fields[0].parse::<u32>().is_err() {
            return Err(bad("class id must be a non-negative integer"));
        }
        if !(0.0..=1.0).contains(&v[0]) {
            return Err(bad("confidence outside [0, 1]"));
        }
        out.push(Detection::new(BBox::new(v[1], v[2], v[3], v[4]), v[0], 1.0));
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("network has no yolo layer")]
    NoHead,
}

/// Result of running the pipeline on one image.
#[derive(Debug, Clone)]
pub struct DetectOutput {
    /// Original-image pixels, sorted by confidence.
    pub detections: Vec<Detection>,
    /// Letterboxing.
    pub preprocess: Duration,
    /// Forward pass, decoding and suppression.
    pub inference: Duration,
}

/// End-to-end single-image detector.
#[derive(Debug, Clone)]
pub struct Detector {
    pub network: Network<f32>,
    pub conf_thresh: f64,
    pub nms_thresh: f64,
}

impl Detector {
    pub fn new(network: Network<f32>) -> Self {
        Self {
            network,
            conf_thresh: DEFAULT_CONF_THRESH,
            nms_thresh: DEFAULT_NMS_THRESH,
        }
    }

    pub fn detect(&self, image: &RgbImage) -> Result<DetectOutput, DetectError> {
        let def = self.network.def();
        let head = def.head().ok_or(DetectError::NoHead)?;
        let t0 = Instant::now();
        let (input, transform) = letterbox(image, def.input_width, def.input_height);
        let t1 = Instant::now();
        let raw = self.network.forward(&input)?;
        let dets = decode(&raw, 0, head.anchors, def.input_width, def.input_height, self.conf_thresh)?;
        let kept = nms(&dets, self.nms_thresh);
        let t2 = Instant::now();
        Ok(DetectOutput {
            detections: map_back(&kept, &transform),
            preprocess: t1 - t0,
            inference: t2 - t1,
        })
    }
}
