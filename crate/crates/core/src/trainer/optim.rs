use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::model::ParamGrads;
use crate::netdef::NetworkDef;
use crate::ops::{BatchNormParams, ConvParams};
use crate::tensor::{Element, Shape, Tensor};

/// Learning rate for the update performed at `iteration` (0-based count of
/// updates already applied).
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    if iteration < cfg.burn_in {
        return cfg.learning_rate * (iteration as f64 / cfg.burn_in as f64).powi(4);
    }
    cfg.steps
        .iter()
        .zip(&cfg.scales)
        .filter(|(&step, _)| iteration > step)
        .fold(cfg.learning_rate, |lr, (_, &s)| lr * s)
}

/// Scaled-uniform weights in `±sqrt(2 / (in * k * k))`, zero biases and
/// identity normalization, drawn convolution by convolution from `seed`.
pub fn init_params(def: &NetworkDef, seed: u64) -> Vec<ConvParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    def.conv_layers()
        .iter()
        .map(|c| {
            let k = c.spec.size;
            let limit = (2.0 / (c.in_channels * k * k) as f64).sqrt() as f32;
            let shape = Shape::new(c.spec.filters, c.in_channels, k, k);
            let weights = Tensor::from_fn(shape, |_| rng.gen_range(-limit..=limit)).expect("conv dims are positive");
            ConvParams {
                weights,
                bias: vec![0.0; c.spec.filters],
                bn: c.spec.batch_normalize.then(|| BatchNormParams::identity(c.spec.filters)),
            }
        })
        .collect()
}

/// Parameters plus optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T = f32> {
    /// Updates applied so far.
    pub iteration: usize,
    pub params: Vec<ConvParams<T>>,
    /// Mirrors the trainable parts of `params`.
    pub velocity: Vec<ParamGrads<T>>,
    pub rng_seed: u64,
}

impl<T: Element> TrainState<T> {
    pub fn new(params: Vec<ConvParams<T>>, rng_seed: u64) -> Self {
        let velocity = params.iter().map(ParamGrads::zeros_like).collect();
        Self {
            iteration: 0,
            params,
            velocity,
            rng_seed,
        }
    }
}

/// `v <- momentum*v - lr*(g + decay*w); w <- w + v` for every trainable
/// value. Decay applies to convolution weights only; biases and scales are
/// not decayed and rolling statistics are not touched.
pub fn sgd_step<T: Element>(state: &mut TrainState<T>, grads: &[ParamGrads<T>], lr: f64, cfg: &TrainConfig) {
    assert_eq!(grads.len(), state.params.len(), "one gradient set per convolution");
    let momentum = T::from_f64(cfg.momentum);
    let lr = T::from_f64(lr);
    let update = |w: &mut [T], v: &mut [T], g: &[T], decay: T| {
        assert!(w.len() == v.len() && w.len() == g.len(), "gradient shape differs from parameters");
        for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v - lr * (g + decay * *w);
            *w = *w + *v;
        }
    };
    let decay = T::from_f64(cfg.decay);
    for ((p, v), g) in state.params.iter_mut().zip(&mut state.velocity).zip(grads) {
        update(p.weights.data_mut(), &mut v.weights, &g.weights, decay);
        update(&mut p.bias, &mut v.bias, &g.bias, T::zero());
        if let (Some(bn), Some(vg), Some(gg)) = (p.bn.as_mut(), v.gamma.as_mut(), g.gamma.as_ref()) {
            update(&mut bn.gamma, vg, gg, T::zero());
        }
    }
    state.iteration += 1;
}
