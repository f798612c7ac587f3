//! Edge vein-finder pipeline: NIR-style preprocessing, a multi-task U-Net
//! for forearm vein segmentation and antecubital-fossa localization,
//! Hough-based arm-angle labeling, post-training quantization, and a
//! latency/precision benchmark harness.

pub mod angle;
pub mod bench;
pub mod data;
pub mod format;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod postprocess;
pub mod quant;
pub mod tensor;
pub mod train;

pub use model::{ModelWeights, UNetConfig};
pub use tensor::Tensor;
