//! Superpixel-guided graph detector: patch-graph backbone, superpixel
//! region proposals and the two-stage detection head.

pub mod box_coder;
pub mod detect_head;
pub mod detector;
pub mod error;
pub mod graph_conv;
pub mod image;
pub mod msgcn;
pub mod patch_graph;
pub mod sprpn;
pub mod superpixel;

pub use error::{ModelError, Result};
pub use image::Image;
pub use detector::{Detector, DetectorConfig, LossBreakdown, Targets};
