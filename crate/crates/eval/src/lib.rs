//! Detection geometry and metrics: IoU, greedy NMS, precision/recall
//! curves, 101-point interpolated AP and the dataset report (mAP, AP50,
//! AP75, AP_M, AP_L, mAR@100).

pub mod boxes;
pub mod error;
pub mod format;
pub mod metrics;

pub use boxes::{iou, nms, BBox};
pub use error::EvalError;
pub use format::{Annotation, Category, DetectionRecord, GroundTruth, ImageInfo};
pub use metrics::{average_precision, evaluate, evaluate_with, pr_curve, EvalParams, EvalReport, PrCurve, ScoredBox};
