use super::TrainError;
use crate::detector::{iou, size_iou, slot_index, BBox, Detection};
use crate::netdef::{filters_per_cell, Anchor};
use crate::tensor::{Element, Tensor, TensorError};

/// Regression targets of a positive slot: the decode equations inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    /// Target for `sigmoid(tx)`, in `[0, 1]`.
    pub x: f64,
    pub y: f64,
    /// Target for the raw `tw`, `ln(w / anchor_w)`.
    pub w: f64,
    pub h: f64,
    /// `2 - w*h / (net_w*net_h)`.
    pub scale: f64,
}

/// Per-slot training targets of one image, indexed by
/// [`slot_index`](crate::detector::slot_index).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub anchors: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// `Some` marks a positive slot.
    pub positive: Vec<Option<BoxTarget>>,
    /// Non-positive slots excluded from the objectness loss.
    pub ignore: Vec<bool>,
}

impl TargetAssignment {
    pub fn empty(anchors: usize, grid_w: usize, grid_h: usize) -> Self {
        let slots = anchors * grid_w * grid_h;
        Self {
            anchors,
            grid_w,
            grid_h,
            positive: vec![None; slots],
            ignore: vec![false; slots],
        }
    }

    pub fn positives(&self) -> usize {
        self.positive.iter().filter(|p| p.is_some()).count()
    }

    pub fn ignored(&self) -> usize {
        self.ignore.iter().filter(|&&i| i).count()
    }
}

/// Builds targets for one image from ground-truth boxes in network pixels.
///
/// The cell containing a box center is responsible for it, through the
/// anchor whose shape overlaps the box best. When two boxes claim the same
/// slot the later one wins. `predictions` are the current decoded boxes in
/// slot order; any non-positive slot whose box overlaps some ground truth by
/// more than `ignore_thresh` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn assign_targets(
    gts: &[BBox],
    anchors: &[Anchor],
    grid_w: usize,
    grid_h: usize,
    net_w: usize,
    net_h: usize,
    predictions: &[Detection],
    ignore_thresh: f64,
) -> Result<TargetAssignment, TrainError> {
    let mut out = TargetAssignment::empty(anchors.len(), grid_w, grid_h);
    let stride_x = net_w as f64 / grid_w as f64;
    let stride_y = net_h as f64 / grid_h as f64;
    let canvas = (net_w * net_h) as f64;
    for g in gts {
        let inside = (0.0..=net_w as f64).contains(&g.cx) && (0.0..=net_h as f64).contains(&g.cy);
        if !inside || !g.is_valid() {
            return Err(TrainError::GtOutsideCanvas { cx: g.cx, cy: g.cy });
        }
        // A center on the far edge belongs to the last cell.
        let col = ((g.cx / stride_x) as usize).min(grid_w - 1);
        let row = ((g.cy / stride_y) as usize).min(grid_h - 1);
        let best = anchors
            .iter()
            .enumerate()
            .map(|(a, an)| (a, size_iou(g.w, g.h, an.w, an.h)))
            .fold((0, f64::NEG_INFINITY), |acc, (a, v)| if v > acc.1 { (a, v) } else { acc })
            .0;
        let slot = slot_index(best, row, col, grid_w, grid_h);
        out.positive[slot] = Some(BoxTarget {
            x: g.cx / stride_x - col as f64,
            y: g.cy / stride_y - row as f64,
            w: (g.w / anchors[best].w).ln(),
            h: (g.h / anchors[best].h).ln(),
            // Boxes larger than the canvas would flip the sign.
            scale: 2.0 - (g.w * g.h / canvas).min(1.0),
        });
    }
    if !gts.is_empty() {
        for (slot, p) in predictions.iter().enumerate().take(out.positive.len()) {
            if out.positive[slot].is_none() {
                out.ignore[slot] = gts.iter().any(|g| iou(&p.bbox, g) > ignore_thresh);
            }
        }
    }
    Ok(out)
}

/// `BCE(sigmoid(z), t)` as `softplus(z) - t*z`.
fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z
}

fn sigmoid(z: f64) -> f64 {
    crate::ops::sigmoid(z)
}

/// Loss summed over the images of `head` (one assignment per image) and
/// its gradient with respect to the raw head.
///
/// Positives contribute `scale * [(s(tx)-x)^2 + (s(ty)-y)^2 + (tw-w)^2 +
/// (th-h)^2]` plus cross-entropy pushing objectness and class to 1; every
/// other non-ignored slot contributes cross-entropy pushing objectness to 0.
pub fn yolo_loss<T: Element>(
    head: &Tensor<T>,
    assignments: &[TargetAssignment],
) -> Result<(f64, Tensor<T>), TensorError> {
    let s = head.shape();
    let Some(first) = assignments.first() else {
        return Err(TensorError::mismatch(format!("{} assignments", s.n), "0"));
    };
    let anchors = first.anchors;
    let per_anchor = filters_per_cell(1, 1);
    if assignments.len() != s.n
        || s.c != anchors * per_anchor
        || assignments.iter().any(|a| (a.anchors, a.grid_w, a.grid_h) != (anchors, s.w, s.h))
    {
        return Err(TensorError::mismatch(
            format!("head of {} images, {} anchors on a {}x{} grid", assignments.len(), anchors, first.grid_w, first.grid_h),
            s.to_string(),
        ));
    }
    let mut grad = Tensor::zeros(s)?;
    let mut loss = 0.0;
    let plane = s.plane_len();
    for (n, asg) in assignments.iter().enumerate() {
        for a in 0..anchors {
            let base = s.index(n, a * per_anchor, 0, 0);
            for cell in 0..plane {
                let slot = a * plane + cell;
                let at = |k: usize| base + k * plane + cell;
                let z = |k: usize| head.data()[at(k)].as_f64();
                let mut put = |k: usize, v: f64| grad.data_mut()[at(k)] = T::from_f64(v);
                match asg.positive[slot] {
                    Some(t) => {
                        let (sx, sy) = (sigmoid(z(0)), sigmoid(z(1)));
                        let (dx, dy, dw, dh) = (sx - t.x, sy - t.y, z(2) - t.w, z(3) - t.h);
                        loss += t.scale * (dx * dx + dy * dy + dw * dw + dh * dh);
                        put(0, 2.0 * t.scale * dx * sx * (1.0 - sx));
                        put(1, 2.0 * t.scale * dy * sy * (1.0 - sy));
                        put(2, 2.0 * t.scale * dw);
                        put(3, 2.0 * t.scale * dh);
                        loss += bce_logit(z(4), 1.0) + bce_logit(z(5), 1.0);
                        put(4, sigmoid(z(4)) - 1.0);
                        put(5, sigmoid(z(5)) - 1.0);
                    }
                    None if !asg.ignore[slot] => {
                        loss += bce_logit(z(4), 0.0);
                        put(4, sigmoid(z(4)));
                    }
                    None => {}
                }
            }
        }
    }
    Ok((loss, grad))
}
