//! Dense tensors, a reverse-mode tape, the primitives graph convolution
//! needs, and the ADAM optimizer.

pub mod adam;
pub mod gradcheck;
pub mod linalg;
pub mod ops;
pub mod real;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use ops::{BatchStats, Mode, Reduce};
pub use real::{DType, Real};
pub use tape::{Op, Tape, Var};
pub use tensor::Tensor;
