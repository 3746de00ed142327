//! Minimal dense tensor engine with reverse-mode differentiation.
//!
//! Everything is `f64` and NCHW. The operation set is exactly what the
//! encoder-decoder networks in `onh-core` need: strided/dilated convolution,
//! transposed convolution, batch normalization, pointwise activations,
//! channel concatenation, dropout masks and the regression/classification
//! losses.

pub mod check;
pub mod conv;
pub mod graph;
mod tensor;

pub use conv::ConvGeom;
pub use graph::{berhu, softmax_channels, BatchStats, Gradients, Graph, NormMode, ParamId, Var, BN_EPS};
pub use tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("shape {shape} needs {} elements, got {len}", shape.numel())]
    DataLength { shape: Shape, len: usize },
    #[error("kernel geometry {geom:?} does not fit input {shape}")]
    Geometry { shape: Shape, geom: ConvGeom },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
}
