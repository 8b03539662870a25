//! Inference on single images and whole datasets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spgnn_core::ParamStore;
use spgnn_eval::{evaluate, DetectionRecord, EvalReport};
use spgnn_model::detect_head::Detection;
use spgnn_model::patch_graph::MAX_STRIDE;
use spgnn_model::{Detector, Image};

use crate::data::Dataset;
use crate::error::Result;

/// Reflection padding added to reach a multiple of the coarsest stride.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub bottom: usize,
    pub right: usize,
}

/// Metadata written next to a detection list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectMeta {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub padding: Padding,
    pub detections: usize,
}

fn to_records(dets: Vec<Detection>, image_id: u64, width: usize, height: usize) -> Vec<DetectionRecord> {
    dets.into_iter()
        .filter_map(|d| {
            let b = d.bbox.clip(width as f64, height as f64);
            b.is_valid().then(|| DetectionRecord {
                image_id,
                category_id: d.class as u64,
                bbox: b.to_xywh(),
                score: d.score,
            })
        })
        .collect()
}

/// Detect on an image of any size at least 32 px per side. Sides that are
/// not multiples of 32 are padded by reflection and boxes are clipped back.
pub fn detect_image(det: &Detector, store: &ParamStore, image: &Image, image_id: u64) -> Result<(Vec<DetectionRecord>, Padding)> {
    let (w, h) = (image.width(), image.height());
    let (padded, (bottom, right)) = image.pad_to_multiple(MAX_STRIDE)?;
    let graph = det.prepare(&padded)?;
    let dets = det.detect(store, &padded, graph.as_ref())?;
    Ok((to_records(dets, image_id, w, h), Padding { bottom, right }))
}

/// Detections for every sample, in sample order.
pub fn predict_dataset(det: &Detector, store: &ParamStore, data: &Dataset) -> Result<Vec<DetectionRecord>> {
    let per_image = data
        .samples
        .par_iter()
        .map(|s| -> Result<Vec<DetectionRecord>> {
            let graph = det.prepare(&s.image)?;
            let dets = det.detect(store, &s.image, graph.as_ref())?;
            Ok(to_records(dets, s.image_id, s.width, s.height))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Predict on `data` and score against its ground truth.
pub fn evaluate_dataset(det: &Detector, store: &ParamStore, data: &Dataset) -> Result<(Vec<DetectionRecord>, EvalReport)> {
    let dets = predict_dataset(det, store, data)?;
    let report = evaluate(&dets, &data.ground_truth)?;
    Ok((dets, report))
}
