//! Executable network: a validated [`NetworkDef`] plus convolution
//! parameters, with inference, training-mode forward and backward passes.

use rand::Rng;
use thiserror::Error;

use crate::netdef::{LayerSpec, NetworkDef, ShapeError, ShapeTrace};
use crate::ops::{
    self, batchnorm_backward, batchnorm_inference, batchnorm_training, conv2d_backward, conv2d_optimized,
    conv2d_reference, BatchNormCache, ConvParams, Mode, BN_EPSILON,
};
use crate::tensor::{Element, Shape, Tensor, TensorError};

/// Which convolution kernel the network runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPath {
    /// Direct nested loops.
    Reference,
    /// Patch matrix + GEMM.
    #[default]
    Optimized,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("convolution {conv} (layer {layer}): {detail}")]
    ParamMismatch { conv: usize, layer: usize, detail: String },
    #[error("expected {expected} convolution parameter sets, got {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("network input must be Nx{expected_c}x{expected_h}x{expected_w}, got {found}")]
    InputShape {
        expected_c: usize,
        expected_h: usize,
        expected_w: usize,
        found: Shape,
    },
}

/// Gradients for one convolution's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T = f32> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Option<Vec<T>>,
}

impl<T: Element> ParamGrads<T> {
    pub fn zeros_like(p: &ConvParams<T>) -> Self {
        Self {
            weights: vec![T::zero(); p.weights.len()],
            bias: vec![T::zero(); p.bias.len()],
            gamma: p.bn.as_ref().map(|bn| vec![T::zero(); bn.gamma.len()]),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let axpy = |a: &mut [T], b: &[T]| a.iter_mut().zip(b).for_each(|(x, &y)| *x = *x + scale * y);
        axpy(&mut self.weights, &other.weights);
        axpy(&mut self.bias, &other.bias);
        if let (Some(a), Some(b)) = (self.gamma.as_mut(), other.gamma.as_ref()) {
            axpy(a, b);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        let sq = |v: &[T]| v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        sq(&self.weights) + sq(&self.bias) + self.gamma.as_deref().map_or(0.0, sq)
    }
}

/// Per-layer state saved by [`Network::forward_train`].
#[derive(Debug, Clone)]
enum Saved<T> {
    Conv { bn: Option<BatchNormCache<T>> },
    Dropout { mask: Vec<T> },
    Plain,
}

/// Activations and caches of one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f32> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    saved: Vec<Saved<T>>,
}

impl<T: Element> ForwardTrace<T> {
    /// Batch mean and variance of every batch-normalized convolution, in
    /// convolution order (`None` for convolutions without normalization).
    pub fn batch_stats(&self) -> Vec<Option<(&[T], &[T])>> {
        self.saved
            .iter()
            .filter_map(|s| match s {
                Saved::Conv { bn } => Some(bn.as_ref().map(|c| (c.mean.as_slice(), c.var.as_slice()))),
                _ => None,
            })
            .collect()
    }

    pub fn head(&self) -> &Tensor<T> {
        self.outputs.last().unwrap_or(&self.input)
    }
}

#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    def: NetworkDef,
    trace: ShapeTrace,
    params: Vec<ConvParams<T>>,
    /// Convolution ordinal of each layer.
    conv_index: Vec<Option<usize>>,
    path: ConvPath,
}

impl<T: Element> Network<T> {
    pub fn new(def: NetworkDef, params: Vec<ConvParams<T>>, path: ConvPath) -> Result<Self, ModelError> {
        let trace = def.infer_shapes()?;
        let convs = def.conv_layers();
        if convs.len() != params.len() {
            return Err(ModelError::ParamCount {
                expected: convs.len(),
                found: params.len(),
            });
        }
        for (ordinal, (conv, p)) in convs.iter().zip(&params).enumerate() {
            let expected = Shape::new(conv.spec.filters, conv.in_channels, conv.spec.size, conv.spec.size);
            let mismatch = |detail: String| ModelError::ParamMismatch {
                conv: ordinal,
                layer: conv.layer,
                detail,
            };
            if p.weights.shape() != expected {
                return Err(mismatch(format!("weights {} but layer needs {expected}", p.weights.shape())));
            }
            if p.bn.is_some() != conv.spec.batch_normalize {
                return Err(mismatch("batch normalization presence differs from the definition".into()));
            }
            p.validate().map_err(|e| mismatch(e.to_string()))?;
        }
        let mut conv_index = Vec::with_capacity(def.layers.len());
        let mut next = 0;
        for layer in &def.layers {
            if matches!(layer, LayerSpec::Convolutional(_)) {
                conv_index.push(Some(next));
                next += 1;
            } else {
                conv_index.push(None);
            }
        }
        Ok(Self {
            def,
            trace,
            params,
            conv_index,
            path,
        })
    }

    pub fn def(&self) -> &NetworkDef {
        &self.def
    }

    pub fn shapes(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn params(&self) -> &[ConvParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ConvParams<T>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<ConvParams<T>> {
        self.params
    }

    /// Exchanges the parameter vectors without re-validating; callers keep
    /// shapes intact.
    pub(crate) fn swap_params(&mut self, params: &mut Vec<ConvParams<T>>) {
        std::mem::swap(&mut self.params, params);
    }

    pub fn path(&self) -> ConvPath {
        self.path
    }

    pub fn set_path(&mut self, path: ConvPath) {
        self.path = path;
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), ModelError> {
        let s = input.shape();
        let i = self.trace.input;
        if (s.c, s.h, s.w) != (i.c, i.h, i.w) {
            return Err(ModelError::InputShape {
                expected_c: i.c,
                expected_h: i.h,
                expected_w: i.w,
                found: s,
            });
        }
        Ok(())
    }

    fn conv(&self, input: &Tensor<T>, p: &ConvParams<T>, stride: usize, pad: usize) -> Result<Tensor<T>, TensorError> {
        match self.path {
            ConvPath::Reference => conv2d_reference(input, p, stride, pad),
            ConvPath::Optimized => conv2d_optimized(input, p, stride, pad),
        }
    }

    /// Inference forward pass. Returns the raw (pre-logistic) head tensor.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(input)?;
        let eps = T::from_f64(BN_EPSILON);
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.def.layers.len());
        // Only shortcut sources need to outlive the next layer.
        let mut keep = vec![false; self.def.layers.len()];
        for l in &self.def.layers {
            if let LayerSpec::Shortcut { from, .. } = l {
                keep[*from] = true;
            }
        }
        for (i, layer) in self.def.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let y = match layer {
                LayerSpec::Convolutional(spec) => {
                    let p = &self.params[self.conv_index[i].expect("conv layer has params")];
                    let mut z = self.conv(x, p, spec.stride, spec.pad)?;
                    if let Some(bn) = &p.bn {
                        z = batchnorm_inference(&z, bn, &p.bias, eps)?;
                    }
                    spec.activation.apply_in_place(&mut z);
                    z
                }
                LayerSpec::Shortcut { from, activation } => {
                    let mut z = ops::shortcut_add(x, &outputs[*from])?;
                    activation.apply_in_place(&mut z);
                    z
                }
                LayerSpec::Dropout { .. } | LayerSpec::Yolo { .. } => x.clone(),
            };
            if i > 0 && !keep[i - 1] {
                // Release memory of activations nobody reads again.
                outputs[i - 1] = Tensor::filled(Shape::new(1, 1, 1, 1), T::zero())?;
            }
            outputs.push(y);
        }
        Ok(outputs.pop().unwrap_or_else(|| input.clone()))
    }

    /// Training-mode forward pass: batch statistics for normalization,
    /// active dropout. Rolling statistics are left untouched.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        input: &Tensor<T>,
        rng: &mut R,
    ) -> Result<ForwardTrace<T>, ModelError> {
        self.check_input(input)?;
        let eps = T::from_f64(BN_EPSILON);
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.def.layers.len());
        let mut saved = Vec::with_capacity(self.def.layers.len());
        for (i, layer) in self.def.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let (y, s) = match layer {
                LayerSpec::Convolutional(spec) => {
                    let p = &self.params[self.conv_index[i].expect("conv layer has params")];
                    let z = self.conv(x, p, spec.stride, spec.pad)?;
                    let (mut a, cache) = match &p.bn {
                        Some(bn) => {
                            let (a, cache) = batchnorm_training(&z, &bn.gamma, &p.bias, eps)?;
                            (a, Some(cache))
                        }
                        None => (z, None),
                    };
                    spec.activation.apply_in_place(&mut a);
                    (a, Saved::Conv { bn: cache })
                }
                LayerSpec::Shortcut { from, activation } => {
                    let mut z = ops::shortcut_add(x, &outputs[*from])?;
                    activation.apply_in_place(&mut z);
                    (z, Saved::Plain)
                }
                LayerSpec::Dropout { probability } => {
                    let (y, mask) = ops::dropout(x, *probability, Mode::Training, rng)?;
                    (y, Saved::Dropout { mask: mask.unwrap_or_default() })
                }
                LayerSpec::Yolo { .. } => (x.clone(), Saved::Plain),
            };
            outputs.push(y);
            saved.push(s);
        }
        Ok(ForwardTrace {
            input: input.clone(),
            outputs,
            saved,
        })
    }

    /// Backpropagates `grad_head` (gradient of the loss with respect to the
    /// raw head tensor) and returns parameter gradients in convolution order.
    pub fn backward(&self, trace: &ForwardTrace<T>, grad_head: &Tensor<T>) -> Result<Vec<ParamGrads<T>>, ModelError> {
        let n_layers = self.def.layers.len();
        let eps = T::from_f64(BN_EPSILON);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n_layers];
        grad_head.ensure_shape(trace.head().shape())?;
        grads[n_layers - 1] = Some(grad_head.clone());
        let mut param_grads: Vec<Option<ParamGrads<T>>> = vec![None; self.params.len()];

        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(existing) => {
                existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b);
            }
            None => *slot = Some(g),
        };

        for i in (0..n_layers).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let x = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            let out = &trace.outputs[i];
            let g_in = match (&self.def.layers[i], &trace.saved[i]) {
                (LayerSpec::Convolutional(spec), Saved::Conv { bn }) => {
                    let ci = self.conv_index[i].expect("conv layer has params");
                    let p = &self.params[ci];
                    spec.activation.backward_from_output(out, &mut g)?;
                    let (dz, dgamma, dbias_bn) = match (bn, &p.bn) {
                        (Some(cache), Some(bnp)) => {
                            let b = batchnorm_backward(cache, &bnp.gamma, eps, &g)?;
                            (b.input, Some(b.gamma), Some(b.beta))
                        }
                        _ => (g, None, None),
                    };
                    let cg = conv2d_backward(x, p, spec.stride, spec.pad, &dz)?;
                    param_grads[ci] = Some(ParamGrads {
                        weights: cg.weights,
                        bias: dbias_bn.unwrap_or(cg.bias),
                        gamma: dgamma,
                    });
                    cg.input
                }
                (LayerSpec::Shortcut { from, activation }, _) => {
                    activation.backward_from_output(out, &mut g)?;
                    accumulate(&mut grads[*from], g.clone());
                    g
                }
                (LayerSpec::Dropout { .. }, Saved::Dropout { mask }) => ops::dropout_backward(mask, &g)?,
                _ => g,
            };
            if i > 0 {
                accumulate(&mut grads[i - 1], g_in);
            }
        }
        Ok(param_grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| ParamGrads::zeros_like(p)))
            .collect())
    }
}
