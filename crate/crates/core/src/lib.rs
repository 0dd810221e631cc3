//! Malleable 2.5D convolution.
//!
//! A 2D convolution with `K` kernels whose receptive fields are arranged
//! along the depth axis. Each neighbor pixel is softly assigned to one of
//! the kernels (or to neither of two "outside" classes) by a softmax over
//! its relative depth difference to the window center; the class centers,
//! the softmax temperature and per-kernel rebalancing weights are all
//! learned by gradient descent.
//!
//! Modules:
//!
//! - [`tensor`]: dense `(n, c, h, w)` tensors and the `.t4` file format
//! - [`geometry`]: camera intrinsics, depth fields, relative depth differences
//! - [`rfield`]: receptive-field functions, soft assignment, rebalancing
//! - [`convops`]: standard, malleable, Depth-aware and hard 2.5D operators
//! - [`oracle`]: brute-force references and finite-difference checks
//! - [`synth`]: synthetic RGB-D segmentation scenes
//! - [`train`]: toy segmentation network and SGD training
//! - [`analysis`]: receptive-field curves, assignment histograms, feature dumps
//! - [`cli`]: the `m25d` command-line driver

pub mod analysis;
pub mod cli;
pub mod convops;
pub mod geometry;
pub mod kvfile;
pub mod oracle;
pub mod rfield;
pub mod synth;
pub mod tensor;
pub mod train;

pub use convops::{DepthAwareParams, Hard25DParams, MalleableParams};
pub use geometry::{CameraIntrinsics, DepthField, RfSpec};
pub use rfield::RFieldParams;
pub use tensor::Tensor4;
