//! Binary weights format.
//!
//! Layout (all little-endian): `major: i32, minor: i32, revision: i32,
//! seen: u64`, then for every convolution in layer order its biases, and when
//! batch-normalized its gamma, rolling mean and rolling variance, then its
//! weights in `(out, in, k, k)` row-major order, all as `f32`.

use thiserror::Error;

use crate::netdef::{ConvLayer, NetworkDef, WEIGHTS_HEADER_BYTES};
use crate::ops::{BatchNormParams, ConvParams};
use crate::tensor::{Shape, Tensor};
use crate::trainer::init_params;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub major: i32,
    pub minor: i32,
    pub revision: i32,
    /// Images seen during training.
    pub seen: u64,
}

impl WeightsHeader {
    /// The only variant written: 0.2.0.
    pub const fn new(seen: u64) -> Self {
        Self {
            major: 0,
            minor: 2,
            revision: 0,
            seen,
        }
    }

    fn to_bytes(self) -> [u8; WEIGHTS_HEADER_BYTES] {
        let mut b = [0u8; WEIGHTS_HEADER_BYTES];
        b[0..4].copy_from_slice(&self.major.to_le_bytes());
        b[4..8].copy_from_slice(&self.minor.to_le_bytes());
        b[8..12].copy_from_slice(&self.revision.to_le_bytes());
        b[12..20].copy_from_slice(&self.seen.to_le_bytes());
        b
    }
}

impl Default for WeightsHeader {
    fn default() -> Self {
        Self::new(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WeightsError {
    #[error("unsupported weights header version {major}.{minor}.{revision} (minor must be >= 2)")]
    BadHeader { major: i32, minor: i32, revision: i32 },
    #[error("weights stream shorter than the {WEIGHTS_HEADER_BYTES}-byte header")]
    TruncatedHeader,
    #[error("weights stream truncated inside layer {layer}")]
    Truncated { layer: usize },
    #[error("{count} trailing bytes after the last layer")]
    TrailingBytes { count: usize },
    #[error("donor stream does not cover layer {layer} of the requested prefix")]
    PrefixShapeMismatch { layer: usize },
    #[error("layer {layer}: parameters do not match the definition: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
}

fn check_params(convs: &[ConvLayer<'_>], params: &[ConvParams]) -> Result<(), WeightsError> {
    if convs.len() != params.len() {
        return Err(WeightsError::ShapeMismatch {
            layer: convs.get(params.len()).or(convs.last()).map_or(0, |c| c.layer),
            detail: format!("{} parameter sets for {} convolutions", params.len(), convs.len()),
        });
    }
    for (c, p) in convs.iter().zip(params) {
        let expected = Shape::new(c.spec.filters, c.in_channels, c.spec.size, c.spec.size);
        let bn_ok = p.bn.is_some() == c.spec.batch_normalize;
        if p.weights.shape() != expected || !bn_ok || p.validate().is_err() {
            return Err(WeightsError::ShapeMismatch {
                layer: c.layer,
                detail: format!("expected weights {expected} (bn: {})", c.spec.batch_normalize),
            });
        }
    }
    Ok(())
}

fn put(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `params` for the convolutions of `def`.
pub fn write_weights(def: &NetworkDef, params: &[ConvParams], header: WeightsHeader) -> Result<Vec<u8>, WeightsError> {
    let convs = def.conv_layers();
    check_params(&convs, params)?;
    let mut out = Vec::with_capacity(def.param_count().serialized_bytes);
    out.extend_from_slice(&header.to_bytes());
    for p in params {
        put(&mut out, &p.bias);
        if let Some(bn) = &p.bn {
            put(&mut out, &bn.gamma);
            put(&mut out, &bn.rolling_mean);
            put(&mut out, &bn.rolling_var);
        }
        put(&mut out, p.weights.data());
    }
    Ok(out)
}

fn read_header(bytes: &[u8]) -> Result<WeightsHeader, WeightsError> {
    if bytes.len() < WEIGHTS_HEADER_BYTES {
        return Err(WeightsError::TruncatedHeader);
    }
    let i32_at = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let (major, minor, revision) = (i32_at(0), i32_at(4), i32_at(8));
    if minor < 2 {
        return Err(WeightsError::BadHeader { major, minor, revision });
    }
    Ok(WeightsHeader {
        major,
        minor,
        revision,
        seen: u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn floats(&mut self, n: usize) -> Option<Vec<f32>> {
        let end = self.pos.checked_add(n.checked_mul(4)?)?;
        let chunk = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        )
    }

    fn conv(&mut self, c: &ConvLayer<'_>) -> Option<ConvParams> {
        let out = c.spec.filters;
        let bias = self.floats(out)?;
        let bn = if c.spec.batch_normalize {
            Some(BatchNormParams {
                gamma: self.floats(out)?,
                rolling_mean: self.floats(out)?,
                rolling_var: self.floats(out)?,
            })
        } else {
            None
        };
        let shape = Shape::new(out, c.in_channels, c.spec.size, c.spec.size);
        let weights = Tensor::from_vec(shape, self.floats(shape.len())?).ok()?;
        Some(ConvParams { weights, bias, bn })
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Inverse of [`write_weights`]. The stream must end exactly after the last
/// convolution.
pub fn read_weights(bytes: &[u8], def: &NetworkDef) -> Result<(WeightsHeader, Vec<ConvParams>), WeightsError> {
    let header = read_header(bytes)?;
    let mut cur = Cursor {
        bytes,
        pos: WEIGHTS_HEADER_BYTES,
    };
    let params = def
        .conv_layers()
        .iter()
        .map(|c| cur.conv(c).ok_or(WeightsError::Truncated { layer: c.layer }))
        .collect::<Result<Vec<_>, _>>()?;
    match cur.remaining() {
        0 => Ok((header, params)),
        count => Err(WeightsError::TrailingBytes { count }),
    }
}

/// Reads parameters for the convolutions of layers `< first_n_layers` from a
/// donor stream (which may hold further layers) and initializes the rest
/// with the trainer's initializer seeded by `seed`.
pub fn load_partial(
    bytes: &[u8],
    def: &NetworkDef,
    first_n_layers: usize,
    seed: u64,
) -> Result<(WeightsHeader, Vec<ConvParams>), WeightsError> {
    let header = read_header(bytes)?;
    let mut params = init_params(def, seed);
    let mut cur = Cursor {
        bytes,
        pos: WEIGHTS_HEADER_BYTES,
    };
    for (slot, c) in params.iter_mut().zip(def.conv_layers()) {
        if c.layer >= first_n_layers {
            break;
        }
        *slot = cur.conv(&c).ok_or(WeightsError::PrefixShapeMismatch { layer: c.layer })?;
    }
    Ok((header, params))
}
