use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::detector::size_iou;
use crate::netdef::Anchor;

const MAX_ROUNDS: usize = 300;

fn distance(b: (f64, f64), c: &Anchor) -> f64 {
    1.0 - size_iou(b.0, b.1, c.w, c.h)
}

fn nearest(b: (f64, f64), centroids: &[Anchor]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = distance(b, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Clusters box sizes `(w, h)` into `k` anchors under the distance
/// `1 - IoU` of origin-centered boxes. Seeding is k-means++ driven by
/// `seed`; centroids are cluster means; an emptied cluster keeps its
/// previous centroid. Output is sorted by area, smallest first.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<Vec<Anchor>, TrainError> {
    if k == 0 || boxes.len() < k {
        return Err(TrainError::TooFewBoxes {
            needed: k.max(1),
            found: boxes.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = |b: (f64, f64)| Anchor { w: b.0, h: b.1 };
    let mut centroids = vec![anchor(boxes[rng.gen_range(0..boxes.len())])];
    while centroids.len() < k {
        let weights: Vec<f64> = boxes
            .iter()
            .map(|&b| centroids.iter().map(|c| distance(b, c)).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let pick = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(&mut rng),
            // Every box already coincides with a centroid.
            Err(_) => rng.gen_range(0..boxes.len()),
        };
        centroids.push(anchor(boxes[pick]));
    }

    let mut labels: Vec<usize> = boxes.iter().map(|&b| nearest(b, &centroids)).collect();
    for _ in 0..MAX_ROUNDS {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&b, &l) in boxes.iter().zip(&labels) {
            sums[l].0 += b.0;
            sums[l].1 += b.1;
            sums[l].2 += 1;
        }
        for (c, &(sw, sh, n)) in centroids.iter_mut().zip(&sums) {
            if n > 0 {
                *c = Anchor {
                    w: sw / n as f64,
                    h: sh / n as f64,
                };
            }
        }
        let next: Vec<usize> = boxes.iter().map(|&b| nearest(b, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    centroids.sort_by(|a, b| (a.w * a.h).total_cmp(&(b.w * b.h)));
    Ok(centroids)
}

/// `anchors = w1,h1, w2,h2, ...` with anchors rounded to whole pixels.
pub fn format_anchor_line(anchors: &[Anchor]) -> String {
    let pairs: Vec<String> = anchors
        .iter()
        .map(|a| format!("{},{}", a.w.round() as i64, a.h.round() as i64))
        .collect();
    format!("anchors = {}", pairs.join(", "))
}
