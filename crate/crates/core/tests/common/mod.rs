//! Independent oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spermdet_core::detector::{decode_all, iou, BBox, Detection};
use spermdet_core::model::{ConvPath, Network};
use spermdet_core::netdef::{parse_cfg, NetworkDef};
use spermdet_core::ops::{self, BatchNormParams, ConvParams, Mode};
use spermdet_core::trainer::{assign_targets, init_params, yolo_loss, TargetAssignment};
use spermdet_core::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub const FD_EPS: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn small_shape<R: Rng>(rng: &mut R) -> Shape {
    Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5))
}

/// Convolution input and weight gradients against finite differences of
/// `sum(r * conv(x))`.
pub fn conv_backward_error<R: Rng>(rng: &mut R) -> f64 {
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let stride = rng.gen_range(1..=2);
    let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
    let in_c = rng.gen_range(1..=3);
    let out_c = rng.gen_range(1..=3);
    let h = rng.gen_range(k..=6);
    let w = rng.gen_range(k..=6);
    let n = rng.gen_range(1..=2);
    let x = random_tensor(rng, Shape::new(n, in_c, h, w));
    let mut p = ConvParams::<f64>::zeros(out_c, in_c, k, false).unwrap();
    p.weights = random_tensor(rng, p.weights.shape());
    p.bias = (0..out_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = ops::conv2d_reference(&x, &p, stride, pad).unwrap();
    let r = random_tensor(rng, y.shape());
    let g = ops::conv2d_backward(&x, &p, stride, pad, &r).unwrap();

    let nx = numeric_grad(
        |v| dot(ops::conv2d_reference(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &p, stride, pad).unwrap().data(), r.data()),
        x.data(),
        FD_EPS,
    );
    let nw = numeric_grad(
        |v| {
            let mut q = p.clone();
            q.weights = Tensor::from_vec(p.weights.shape(), v.to_vec()).unwrap();
            dot(ops::conv2d_reference(&x, &q, stride, pad).unwrap().data(), r.data())
        },
        p.weights.data(),
        FD_EPS,
    );
    let nb = numeric_grad(
        |v| {
            let mut q = p.clone();
            q.bias = v.to_vec();
            dot(ops::conv2d_reference(&x, &q, stride, pad).unwrap().data(), r.data())
        },
        &p.bias,
        FD_EPS,
    );
    rel_err(g.input.data(), &nx).max(rel_err(&g.weights, &nw)).max(rel_err(&g.bias, &nb))
}

pub fn batchnorm_backward_error<R: Rng>(rng: &mut R) -> f64 {
    let mut s = small_shape(rng);
    s.n = 2;
    let x = random_tensor(rng, s);
    let gamma: Vec<f64> = (0..s.c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..s.c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let eps = ops::BN_EPSILON;
    let (y, cache) = ops::batchnorm_training(&x, &gamma, &beta, eps).unwrap();
    let r = random_tensor(rng, y.shape());
    let g = ops::batchnorm_backward(&cache, &gamma, eps, &r).unwrap();
    let f = |x: &Tensor<f64>, gamma: &[f64], beta: &[f64]| {
        dot(ops::batchnorm_training(x, gamma, beta, eps).unwrap().0.data(), r.data())
    };
    let nx = numeric_grad(|v| f(&Tensor::from_vec(s, v.to_vec()).unwrap(), &gamma, &beta), x.data(), FD_EPS);
    let ng = numeric_grad(|v| f(&x, v, &beta), &gamma, FD_EPS);
    let nb = numeric_grad(|v| f(&x, &gamma, v), &beta, FD_EPS);
    rel_err(g.input.data(), &nx).max(rel_err(&g.gamma, &ng)).max(rel_err(&g.beta, &nb))
}

/// Keeps inputs away from the kink of the leaky rectifier.
fn away_from_zero<R: Rng>(rng: &mut R, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.01..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .unwrap()
}

pub fn leaky_backward_error<R: Rng>(rng: &mut R) -> f64 {
    let s = small_shape(rng);
    let x = away_from_zero(rng, s);
    let r = random_tensor(rng, x.shape());
    let g = ops::leaky_relu_backward(&x, &r).unwrap();
    let n = numeric_grad(|v| dot(ops::leaky_relu(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap()).data(), r.data()), x.data(), FD_EPS);
    rel_err(g.data(), &n)
}

pub fn logistic_backward_error<R: Rng>(rng: &mut R) -> f64 {
    let s = small_shape(rng);
    let x = random_tensor(rng, s).map(|v| v * 4.0);
    let r = random_tensor(rng, x.shape());
    let g = ops::logistic_backward(&x, &r).unwrap();
    let n = numeric_grad(|v| dot(ops::logistic(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap()).data(), r.data()), x.data(), FD_EPS);
    rel_err(g.data(), &n)
}

pub fn shortcut_backward_error<R: Rng>(rng: &mut R) -> f64 {
    let s = small_shape(rng);
    let a = random_tensor(rng, s);
    let b = random_tensor(rng, s);
    let r = random_tensor(rng, s);
    let (ga, gb) = ops::shortcut_backward(&r);
    let na = numeric_grad(|v| dot(ops::shortcut_add(&Tensor::from_vec(s, v.to_vec()).unwrap(), &b).unwrap().data(), r.data()), a.data(), FD_EPS);
    let nb = numeric_grad(|v| dot(ops::shortcut_add(&a, &Tensor::from_vec(s, v.to_vec()).unwrap()).unwrap().data(), r.data()), b.data(), FD_EPS);
    rel_err(ga.data(), &na).max(rel_err(gb.data(), &nb))
}

pub fn dropout_backward_error<R: Rng>(rng: &mut R) -> f64 {
    let s = small_shape(rng);
    let x = random_tensor(rng, s);
    let r = random_tensor(rng, x.shape());
    let seed: u64 = rng.gen();
    let (_, mask) = ops::dropout(&x, 0.5, Mode::Training, &mut self::rng(seed)).unwrap();
    let g = ops::dropout_backward(&mask.unwrap(), &r).unwrap();
    let n = numeric_grad(
        |v| {
            let t = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            dot(ops::dropout(&t, 0.5, Mode::Training, &mut self::rng(seed)).unwrap().0.data(), r.data())
        },
        x.data(),
        FD_EPS,
    );
    rel_err(g.data(), &n)
}

/// Random head of `anchors * 6` channels on a 2x2 grid with a random
/// assignment (positives and ignores).
pub fn loss_backward_error<R: Rng>(rng: &mut R) -> f64 {
    let (anchors, gw, gh) = (3, 2, 2);
    let n = rng.gen_range(1..=2);
    let head = random_tensor(rng, Shape::new(n, anchors * 6, gh, gw)).map(|v| v * 2.0);
    let assignments: Vec<TargetAssignment> = (0..n)
        .map(|_| {
            let mut a = TargetAssignment::empty(anchors, gw, gh);
            for slot in 0..anchors * gw * gh {
                match rng.gen_range(0..4) {
                    0 => {
                        a.positive[slot] = Some(spermdet_core::trainer::BoxTarget {
                            x: rng.gen_range(0.0..1.0),
                            y: rng.gen_range(0.0..1.0),
                            w: rng.gen_range(-1.0..1.0),
                            h: rng.gen_range(-1.0..1.0),
                            scale: rng.gen_range(1.0..2.0),
                        })
                    }
                    1 => a.ignore[slot] = true,
                    _ => {}
                }
            }
            a
        })
        .collect();
    let (_, g) = yolo_loss(&head, &assignments).unwrap();
    let num = numeric_grad(|v| yolo_loss(&Tensor::from_vec(head.shape(), v.to_vec()).unwrap(), &assignments).unwrap().0, head.data(), FD_EPS);
    rel_err(g.data(), &num)
}

pub const TINY_CFG: &str = "
[net]
width=16
height=16
channels=3

[convolutional]
batch_normalize=1
filters=4
size=3
stride=1
pad=1
activation=leaky

[convolutional]
batch_normalize=1
filters=6
size=3
stride=2
pad=1
activation=leaky

[convolutional]
batch_normalize=1
filters=3
size=1
activation=leaky

[convolutional]
batch_normalize=1
filters=6
size=3
pad=1
activation=leaky

[shortcut]
from=-3
activation=linear

[dropout]
probability=0.5

[convolutional]
filters=18
size=1
activation=linear

[yolo]
anchors=4,4, 6,8, 10,10
classes=1
";

pub fn tiny_def() -> NetworkDef {
    parse_cfg(TINY_CFG).unwrap().net
}

/// Whole-network parameter gradients (weights, biases, scales of every
/// convolution) through the training-mode forward pass and the detection
/// loss, against finite differences.
pub fn network_backward_error(seed: u64) -> f64 {
    let def = tiny_def();
    let mut r = rng(seed);
    let mut params: Vec<ConvParams<f64>> = init_params(&def, seed).iter().map(|p| p.cast()).collect();
    for p in &mut params {
        p.bias.iter_mut().for_each(|b| *b = r.gen_range(-0.2..0.2));
        if let Some(bn) = p.bn.as_mut() {
            bn.gamma.iter_mut().for_each(|g| *g = r.gen_range(0.5..1.5));
        }
    }
    let x = random_tensor(&mut r, Shape::new(2, 3, 16, 16));
    let gts = [
        vec![BBox::new(5.0, 6.0, 5.0, 7.0), BBox::new(12.0, 11.0, 9.0, 9.0)],
        vec![BBox::new(3.0, 13.0, 4.0, 4.0)],
    ];
    let dropout_seed: u64 = r.gen();
    let head_ref = def.head().unwrap();
    let anchors = head_ref.anchors.to_vec();

    let net = Network::new(def.clone(), params.clone(), ConvPath::Reference).unwrap();
    let trace = net.forward_train(&x, &mut rng(dropout_seed)).unwrap();
    let head = trace.head();
    // Targets are frozen from the unperturbed pass so the loss is smooth in
    // the parameters.
    let assignments: Vec<TargetAssignment> = (0..2)
        .map(|n| {
            let preds = decode_all(head, n, &anchors, 16, 16).unwrap();
            assign_targets(&gts[n], &anchors, head.shape().w, head.shape().h, 16, 16, &preds, 0.3).unwrap()
        })
        .collect();
    let (_, grad_head) = yolo_loss(head, &assignments).unwrap();
    let grads = net.backward(&trace, &grad_head).unwrap();

    let loss_with = |ps: Vec<ConvParams<f64>>| {
        let net = Network::new(def.clone(), ps, ConvPath::Reference).unwrap();
        let trace = net.forward_train(&x, &mut rng(dropout_seed)).unwrap();
        yolo_loss(trace.head(), &assignments).unwrap().0
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (ci, g) in grads.iter().enumerate() {
        analytic.extend_from_slice(&g.weights);
        numeric.extend(numeric_grad(
            |v| {
                let mut ps = params.clone();
                ps[ci].weights = Tensor::from_vec(ps[ci].weights.shape(), v.to_vec()).unwrap();
                loss_with(ps)
            },
            params[ci].weights.data(),
            FD_EPS,
        ));
        analytic.extend_from_slice(&g.bias);
        numeric.extend(numeric_grad(
            |v| {
                let mut ps = params.clone();
                ps[ci].bias = v.to_vec();
                loss_with(ps)
            },
            &params[ci].bias,
            FD_EPS,
        ));
        if let (Some(gg), Some(bn)) = (&g.gamma, &params[ci].bn) {
            analytic.extend_from_slice(gg);
            numeric.extend(numeric_grad(
                |v| {
                    let mut ps = params.clone();
                    ps[ci].bn = Some(BatchNormParams {
                        gamma: v.to_vec(),
                        ..bn.clone()
                    });
                    loss_with(ps)
                },
                &bn.gamma,
                FD_EPS,
            ));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Precision envelope computed from scratch: every prediction is ranked,
/// matched by exhaustive search, and AP integrates the running maximum of
/// precision from the right over recall steps.
pub fn brute_force_ap(preds: &[(usize, Detection)], gts: &[Vec<BBox>], iou_thresh: f64) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.confidence.partial_cmp(&preds[a].1.confidence).unwrap().then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for &i in &order {
        let (img, d) = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[*img].iter().enumerate() {
            if used[*img][j] {
                continue;
            }
            let v = iou(&d.bbox, g);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        let hit = matches!(best, Some((_, v)) if v >= iou_thresh);
        if hit {
            used[*img][best.unwrap().0] = true;
        }
        hits.push(hit);
    }
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let mut tp = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1.0;
        }
        recall.push(tp / total as f64);
        precision.push(tp / (k + 1) as f64);
    }
    // Area under max_{k' >= k} precision, summed over recall increments.
    let mut ap = 0.0;
    for k in 0..hits.len() {
        let prev = if k == 0 { 0.0 } else { recall[k - 1] };
        let env = precision[k..].iter().cloned().fold(0.0, f64::max);
        ap += (recall[k] - prev) * env;
    }
    ap
}
