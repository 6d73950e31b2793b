//! Dense tensors with reverse-mode differentiation.
//!
//! Tensors are row-major `f32`. Convolutions use cross-correlation (no kernel
//! flip). Time-stacked activations put the time step on the leading axis:
//! row `t·B + b` holds sample `b` at step `t`.

mod conv;
mod gemm;
mod ops;
mod tape;
mod value;

pub use conv::ConvGeometry;
pub(crate) use tape::{Backward, Grads};
pub use tape::{Tape, Var};
pub use value::Tensor;
