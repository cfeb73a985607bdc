//! CPU engine for single-class, single-scale small-object detection:
//! network definitions, numeric kernels with gradients, the binary weights
//! format, YOLO-style decoding, mAP@50 scoring, HSV augmentation and an SGD
//! trainer.

pub mod augment;
pub mod detector;
pub mod evaldata;
pub mod model;
pub mod netdef;
pub mod ops;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use netdef::{filters_per_cell, parse_cfg, NetworkDef};
pub use tensor::{Element, Shape, Tensor, TensorError};
