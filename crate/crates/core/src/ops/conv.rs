//! 2-D cross-correlation with zero padding.
//!
//! Two forward paths share one contract: [`conv2d_reference`] is a direct
//! nested loop kept as the oracle, [`conv2d_optimized`] lowers the problem to
//! patch-matrix expansion plus a matrix product.

use rayon::prelude::*;

use crate::tensor::{Element, Shape, Tensor, TensorError};

/// Per-channel batch-normalization parameters of a convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub rolling_mean: Vec<T>,
    pub rolling_var: Vec<T>,
}

impl<T: Element> BatchNormParams<T> {
    /// gamma = 1, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            rolling_mean: vec![T::zero(); channels],
            rolling_var: vec![T::one(); channels],
        }
    }

    pub fn cast<U: Element>(&self) -> BatchNormParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        BatchNormParams {
            gamma: c(&self.gamma),
            rolling_mean: c(&self.rolling_mean),
            rolling_var: c(&self.rolling_var),
        }
    }
}

/// Weights `(out, in, k, k)`, a bias per output channel and optional
/// batch normalization. With batch normalization the bias acts as beta.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub bn: Option<BatchNormParams<T>>,
}

impl<T: Element> ConvParams<T> {
    pub fn zeros(out: usize, inp: usize, k: usize, batch_normalize: bool) -> Result<Self, TensorError> {
        Ok(Self {
            weights: Tensor::zeros(Shape::new(out, inp, k, k))?,
            bias: vec![T::zero(); out],
            bn: batch_normalize.then(|| BatchNormParams::identity(out)),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().h
    }

    pub fn cast<U: Element>(&self) -> ConvParams<U> {
        ConvParams {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|x| U::from_f64(x.as_f64())).collect(),
            bn: self.bn.as_ref().map(BatchNormParams::cast),
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let s = self.weights.shape();
        if s.h != s.w {
            return Err(TensorError::InvalidArgument(format!("non-square kernel {}x{}", s.h, s.w)));
        }
        if self.bias.len() != s.n {
            return Err(TensorError::mismatch(format!("{} biases", s.n), self.bias.len()));
        }
        if let Some(bn) = &self.bn {
            for v in [&bn.gamma, &bn.rolling_mean, &bn.rolling_var] {
                if v.len() != s.n {
                    return Err(TensorError::mismatch(format!("{} bn entries", s.n), v.len()));
                }
            }
        }
        Ok(())
    }

    /// Bias that the convolution itself adds: zero when batch-normalized.
    fn conv_bias(&self, oc: usize) -> T {
        if self.bn.is_some() {
            T::zero()
        } else {
            self.bias[oc]
        }
    }
}

/// Output extent along one axis: `floor((in + 2 pad - k) / stride) + 1`.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

fn output_shape<T: Element>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Shape, TensorError> {
    params.validate()?;
    let s = input.shape();
    if s.c != params.in_channels() {
        return Err(TensorError::mismatch(
            format!("{} input channels", params.in_channels()),
            format!("{} in {}", s.c, s),
        ));
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument("stride must be >= 1".into()));
    }
    let k = params.kernel();
    match (conv_out_dim(s.h, k, stride, pad), conv_out_dim(s.w, k, stride, pad)) {
        (Some(h), Some(w)) => Ok(Shape::new(s.n, params.out_channels(), h, w)),
        _ => Err(TensorError::mismatch(format!("input of at least {k} px with pad {pad}"), s)),
    }
}

/// Direct nested-loop convolution, the oracle for every faster path.
///
/// Parallel over output planes only; each element is computed by the same
/// sequence of operations regardless of thread count.
pub fn conv2d_reference<T: Element>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let out_shape = output_shape(input, params, stride, pad)?;
    let in_shape = input.shape();
    let k = params.kernel();
    let weights = params.weights.data();
    let x = input.data();
    let mut out = Tensor::zeros(out_shape)?;
    let plane = out_shape.plane_len();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, plane_out)| {
            let n = idx / out_shape.c;
            let oc = idx % out_shape.c;
            // Accumulates over (ic, ky, kx) in the same order for every
            // output element; the innermost loop walks one output row.
            for ic in 0..in_shape.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weights[((oc * in_shape.c + ic) * k + ky) * k + kx];
                        // Output columns whose input column lies inside the image.
                        let ox_lo = pad.saturating_sub(kx).div_ceil(stride);
                        let ox_hi = match (in_shape.w + pad).checked_sub(kx + 1) {
                            Some(span) => (span / stride + 1).min(out_shape.w),
                            None => 0,
                        };
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..out_shape.h {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= in_shape.h as isize {
                                continue;
                            }
                            let start = in_shape.index(n, ic, iy as usize, 0) + ox_lo * stride + kx - pad;
                            let out_row = &mut plane_out[oy * out_shape.w + ox_lo..oy * out_shape.w + ox_hi];
                            for (o, &xv) in out_row.iter_mut().zip(x[start..].iter().step_by(stride)) {
                                *o = *o + wv * xv;
                            }
                        }
                    }
                }
            }
            let b = params.conv_bias(oc);
            plane_out.iter_mut().for_each(|v| *v = *v + b);
        });
    Ok(out)
}

/// Geometry of one image's convolution, shared by the lowering helpers.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: Shape, output: Shape, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            out_h: output.h,
            out_w: output.w,
            k,
            stride,
            pad,
        }
    }

    /// Rows of the patch matrix.
    fn patch_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// 1x1, stride 1, no padding: the image itself is the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Expands output rows `[row0, row0 + rows)` of one image into a
/// `(in_c * k * k) x (rows * out_w)` patch matrix.
fn im2col<T: Element>(image: &[T], g: &Geometry, row0: usize, rows: usize, col: &mut [T]) {
    let cols = rows * g.out_w;
    debug_assert_eq!(col.len(), g.patch_rows() * cols);
    for ic in 0..g.in_c {
        let src = &image[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ic * g.k + ky) * g.k + kx;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for (ri, oy) in (row0..row0 + rows).enumerate() {
                    let line = &mut dst[ri * g.out_w..(ri + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a full-image patch matrix back into image gradients.
fn col2im<T: Element>(col: &[T], g: &Geometry, image: &mut [T]) {
    let cols = g.out_h * g.out_w;
    for ic in 0..g.in_c {
        let dst = &mut image[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ic * g.k + ky) * g.k + kx;
                let src = &col[r * cols..(r + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Target size of one patch-matrix tile, in elements.
const TILE_ELEMS: usize = 1 << 18;

/// Patch-matrix + GEMM convolution. Same contract as [`conv2d_reference`].
pub fn conv2d_optimized<T: Element>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let out_shape = output_shape(input, params, stride, pad)?;
    let g = Geometry::new(input.shape(), out_shape, params.kernel(), stride, pad);
    let oc = out_shape.c;
    let kdim = g.patch_rows();
    let weights = params.weights.data();
    let mut out = Tensor::zeros(out_shape)?;
    let out_plane = out_shape.plane_len();

    if g.is_pointwise() {
        // Split each image by output channels: every block is a contiguous
        // run of output planes.
        let block = oc.div_ceil(rayon::current_num_threads().max(1)).max(8);
        let in_len = input.shape().image_len();
        out.data_mut()
            .par_chunks_mut(oc * out_plane)
            .enumerate()
            .for_each(|(n, out_img)| {
                let img = &input.data()[n * in_len..(n + 1) * in_len];
                out_img
                    .par_chunks_mut(block * out_plane)
                    .enumerate()
                    .for_each(|(bi, out_block)| {
                        let o0 = bi * block;
                        let rows = out_block.len() / out_plane;
                        T::gemm(
                            rows,
                            kdim,
                            out_plane,
                            T::one(),
                            &weights[o0 * kdim..],
                            (kdim, 1),
                            img,
                            (out_plane, 1),
                            T::zero(),
                            out_block,
                            (out_plane, 1),
                        );
                    });
            });
    } else {
        let rows_per_tile = (TILE_ELEMS / (kdim * g.out_w).max(1)).clamp(1, g.out_h);
        let tiles_per_image = g.out_h.div_ceil(rows_per_tile);
        let in_len = input.shape().image_len();
        let tiles: Vec<(usize, usize, Vec<T>)> = (0..out_shape.n * tiles_per_image)
            .into_par_iter()
            .map(|t| {
                let n = t / tiles_per_image;
                let row0 = (t % tiles_per_image) * rows_per_tile;
                let rows = rows_per_tile.min(g.out_h - row0);
                let cols = rows * g.out_w;
                let img = &input.data()[n * in_len..(n + 1) * in_len];
                let mut col = vec![T::zero(); kdim * cols];
                im2col(img, &g, row0, rows, &mut col);
                let mut tile = vec![T::zero(); oc * cols];
                T::gemm(oc, kdim, cols, T::one(), weights, (kdim, 1), &col, (cols, 1), T::zero(), &mut tile, (cols, 1));
                (n, row0, tile)
            })
            .collect();
        for (n, row0, tile) in tiles {
            let cols = tile.len() / oc;
            for o in 0..oc {
                let dst = out_shape.index(n, o, row0, 0);
                out.data_mut()[dst..dst + cols].copy_from_slice(&tile[o * cols..(o + 1) * cols]);
            }
        }
    }

    if params.bn.is_none() {
        out.data_mut()
            .par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(i, plane)| {
                let b = params.bias[i % oc];
                plane.iter_mut().for_each(|v| *v = *v + b);
            });
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and weights.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    /// Same layout as the weight tensor, `(out, in, k, k)` flattened.
    pub weights: Vec<T>,
    /// Per-output-channel sum of the upstream gradient (the bias gradient
    /// when the convolution owns its bias).
    pub bias: Vec<T>,
}

/// Backward pass of the convolution (bias included in the sum regardless of
/// batch normalization; callers decide whether it applies).
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, TensorError> {
    let out_shape = output_shape(input, params, stride, pad)?;
    grad_out.ensure_shape(out_shape)?;
    let in_shape = input.shape();
    let g = Geometry::new(in_shape, out_shape, params.kernel(), stride, pad);
    let oc = out_shape.c;
    let kdim = g.patch_rows();
    let cols = out_shape.plane_len();
    let weights = params.weights.data();
    let in_len = in_shape.image_len();
    let out_len = out_shape.image_len();

    let mut grad_input = Tensor::zeros(in_shape)?;
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_input
        .data_mut()
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(n, dx)| {
            let x = &input.data()[n * in_len..(n + 1) * in_len];
            let dy = &grad_out.data()[n * out_len..(n + 1) * out_len];
            let mut dw = vec![T::zero(); oc * kdim];
            let owned_col;
            let col: &[T] = if g.is_pointwise() {
                x
            } else {
                let mut c = vec![T::zero(); kdim * cols];
                im2col(x, &g, 0, g.out_h, &mut c);
                owned_col = c;
                &owned_col
            };
            // dW = dY * col^T
            T::gemm(oc, cols, kdim, T::one(), dy, (cols, 1), col, (1, cols), T::zero(), &mut dw, (kdim, 1));
            // dcol = W^T * dY
            if g.is_pointwise() {
                T::gemm(kdim, oc, cols, T::one(), weights, (1, kdim), dy, (cols, 1), T::zero(), dx, (cols, 1));
            } else {
                let mut dcol = vec![T::zero(); kdim * cols];
                T::gemm(kdim, oc, cols, T::one(), weights, (1, kdim), dy, (cols, 1), T::zero(), &mut dcol, (cols, 1));
                col2im(&dcol, &g, dx);
            }
            let db = (0..oc).map(|o| dy[o * cols..(o + 1) * cols].iter().copied().sum()).collect();
            (dw, db)
        })
        .collect();

    let mut grad_w = vec![T::zero(); oc * kdim];
    let mut grad_b = vec![T::zero(); oc];
    for (dw, db) in partials {
        grad_w.iter_mut().zip(dw).for_each(|(a, b)| *a = *a + b);
        grad_b.iter_mut().zip(db).for_each(|(a, b)| *a = *a + b);
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(weights: Vec<f32>, k: usize) -> ConvParams<f32> {
        ConvParams {
            weights: Tensor::from_vec(Shape::new(1, 1, k, k), weights).unwrap(),
            bias: vec![0.0],
            bn: None,
        }
    }

    #[test]
    fn all_ones_kernel_sums_every_input() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = single(vec![1.0; 9], 3);
        for y in [conv2d_reference(&x, &p, 1, 1).unwrap(), conv2d_optimized(&x, &p, 1, 1).unwrap()] {
            assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
            assert_eq!(y.data(), &[10.0; 4]);
        }
    }

    #[test]
    fn identity_and_zero_filters() {
        let x = Tensor::from_fn(Shape::new(2, 1, 3, 4), |i| i as f32 - 5.0).unwrap();
        let id = single(vec![1.0], 1);
        assert_eq!(conv2d_reference(&x, &id, 1, 0).unwrap(), x);
        assert_eq!(conv2d_optimized(&x, &id, 1, 0).unwrap(), x);
        let zero = single(vec![0.0; 9], 3);
        assert!(conv2d_reference(&x, &zero, 1, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(conv2d_optimized(&x, &zero, 1, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride_two_halves_extent() {
        assert_eq!(conv_out_dim(640, 3, 2, 1), Some(320));
        assert_eq!(conv_out_dim(2, 5, 1, 0), None);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4)).unwrap();
        let p = single(vec![1.0], 1);
        assert!(matches!(conv2d_reference(&x, &p, 1, 0), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(conv2d_optimized(&x, &p, 1, 0), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn bias_skipped_under_batch_norm() {
        let x = Tensor::<f32>::filled(Shape::new(1, 1, 2, 2), 1.0).unwrap();
        let mut p = single(vec![2.0], 1);
        p.bias = vec![5.0];
        assert_eq!(conv2d_reference(&x, &p, 1, 0).unwrap().data(), &[7.0; 4]);
        p.bn = Some(BatchNormParams::identity(1));
        assert_eq!(conv2d_reference(&x, &p, 1, 0).unwrap().data(), &[2.0; 4]);
        assert_eq!(conv2d_optimized(&x, &p, 1, 0).unwrap().data(), &[2.0; 4]);
    }
}
