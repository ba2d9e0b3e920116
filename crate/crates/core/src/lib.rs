//! Block-based hybrid image codec: wavefront-scheduled block coding with
//! contextual prediction, a hyperprior/autoregressive entropy model coded
//! with a range coder, and boundary-aware postprocessing, plus the
//! evaluation tools that go with it.

// Numeric kernels index several parallel buffers per loop; `!(a > b)` is used
// on purpose so NaN falls into the rejecting branch.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod blocking;
pub mod bpm;
pub mod codec;
pub mod container;
pub mod cpm;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod tensor;
pub mod weights;

pub use error::{ContainerError, EntropyError, Error, Result};
