//! Average precision over a pooled, confidence-ranked prediction list.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::detector::{iou, BBox, Detection};

/// Ground-truth boxes per image, in a fixed image order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    images: Vec<(String, Vec<BBox>)>,
    index: HashMap<String, usize>,
}

impl GroundTruthSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or replaces) the boxes of one image.
    pub fn insert(&mut self, id: impl Into<String>, boxes: Vec<BBox>) {
        let id = id.into();
        match self.index.get(&id) {
            Some(&i) => self.images[i].1 = boxes,
            None => {
                self.index.insert(id.clone(), self.images.len());
                self.images.push((id, boxes));
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<&[BBox]> {
        self.index.get(id).map(|&i| self.images[i].1.as_slice())
    }

    pub fn images(&self) -> impl Iterator<Item = (&str, &[BBox])> {
        self.images.iter().map(|(id, b)| (id.as_str(), b.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn box_count(&self) -> usize {
        self.images.iter().map(|(_, b)| b.len()).sum()
    }
}

impl<S: Into<String>> FromIterator<(S, Vec<BBox>)> for GroundTruthSet {
    fn from_iter<I: IntoIterator<Item = (S, Vec<BBox>)>>(iter: I) -> Self {
        let mut set = Self::new();
        for (id, boxes) in iter {
            set.insert(id, boxes);
        }
        set
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt_count: usize,
    /// One point per ranked prediction.
    pub pr_curve: Vec<PrPoint>,
    pub ap: f64,
    /// Single class: equal to `ap`.
    pub map50: f64,
}

/// Scores per-image predictions against `gts`.
///
/// Predictions are pooled and ranked by confidence (ties keep slice order,
/// then list order). Each one claims the unmatched ground truth of its image
/// with the highest IoU if that IoU reaches `iou_thresh`, otherwise it is a
/// false positive. With no ground truth at all, AP is 0.
pub fn average_precision(
    preds: &[(String, Vec<Detection>)],
    gts: &GroundTruthSet,
    iou_thresh: f64,
    interpolation: Interpolation,
) -> Result<EvalResult, EvalError> {
    let mut pooled: Vec<(usize, &Detection)> = Vec::new();
    let mut image_of = Vec::with_capacity(preds.len());
    for (id, dets) in preds {
        let gi = *gts.index.get(id).ok_or_else(|| EvalError::UnknownImageId(id.clone()))?;
        image_of.push(gi);
        pooled.extend(dets.iter().map(|d| (gi, d)));
    }
    pooled.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));

    let gt_count = gts.box_count();
    let mut matched: Vec<Vec<bool>> = gts.images.iter().map(|(_, b)| vec![false; b.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pr_curve = Vec::with_capacity(pooled.len());
    for (gi, det) in pooled {
        let boxes = &gts.images[gi].1;
        let best = boxes
            .iter()
            .enumerate()
            .filter(|(j, _)| !matched[gi][*j])
            .map(|(j, g)| (j, iou(&det.bbox, g)))
            .fold(None::<(usize, f64)>, |acc, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= iou_thresh => {
                matched[gi][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        pr_curve.push(PrPoint {
            recall: if gt_count > 0 { tp as f64 / gt_count as f64 } else { 0.0 },
            precision: tp as f64 / (tp + fp) as f64,
        });
    }

    let ap = if gt_count == 0 {
        0.0
    } else {
        match interpolation {
            Interpolation::AllPoint => all_point(&pr_curve),
            Interpolation::ElevenPoint => eleven_point(&pr_curve),
        }
    };
    Ok(EvalResult {
        tp,
        fp,
        fn_: gt_count - tp,
        gt_count,
        pr_curve,
        ap,
        map50: ap,
    })
}

fn envelope(curve: &[PrPoint]) -> Vec<f64> {
    let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    env
}

fn all_point(curve: &[PrPoint]) -> f64 {
    let env = envelope(curve);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (p, e) in curve.iter().zip(env) {
        area += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    area
}

fn eleven_point(curve: &[PrPoint]) -> f64 {
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            curve
                .iter()
                .filter(|p| p.recall >= r - 1e-12)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}
