//! Layer-level numeric kernels with forward and backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;

use rand::Rng;

use crate::tensor::{Element, Tensor, TensorError};

pub use activation::{leaky_relu, leaky_relu_backward, logistic, logistic_backward, sigmoid, Activation};
pub use batchnorm::{
    batchnorm_backward, batchnorm_inference, batchnorm_training, update_rolling, BatchNormCache, BatchNormGrads,
    Mode, BN_EPSILON,
};
pub use conv::{
    conv2d_backward, conv2d_optimized, conv2d_reference, conv_out_dim, BatchNormParams, ConvGrads, ConvParams,
};

/// Residual join.
pub fn shortcut_add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    b.ensure_shape(a.shape())?;
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x = *x + y);
    Ok(out)
}

/// Both inputs receive the upstream gradient unchanged.
pub fn shortcut_backward<T: Element>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
///
/// Returns the mask (0 or the survivor scale per element) in training mode.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>), TensorError> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Inference {
        return Ok((x.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Element>(mask: &[T], grad_out: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if mask.len() != grad_out.len() {
        return Err(TensorError::mismatch(format!("{} mask entries", grad_out.len()), mask.len()));
    }
    let mut g = grad_out.clone();
    g.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| *v = *v * m);
    Ok(g)
}
