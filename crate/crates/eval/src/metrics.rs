//! Precision/recall curves, interpolated AP and the dataset-level report.
//!
//! Matching follows the common benchmark convention: detections are visited
//! by descending score, each claims the still-unmatched ground truth of
//! highest IoU at or above the threshold, and ground truth outside the area
//! range under evaluation is "ignored" (neither a miss nor a hit).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::EvalError;
use crate::format::{DetectionRecord, GroundTruth};

/// A scored detection of a single class in image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Tp,
    Fp,
    Ignored,
}

/// Match one image's detections (already in visiting order) to its ground
/// truth. `gt_ignore` must be sorted with non-ignored entries first.
fn match_image(
    dets: &[BBox],
    gts: &[BBox],
    gt_ignore: &[bool],
    iou_thresh: f64,
    area: (f64, f64),
) -> Vec<Status> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<usize> = None;
            let mut t = iou_thresh.min(1.0 - 1e-10);
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                if let Some(b) = best {
                    if !gt_ignore[b] && gt_ignore[g] {
                        break;
                    }
                }
                let o = d.iou(gt);
                if o < t {
                    continue;
                }
                t = o;
                best = Some(g);
            }
            match best {
                Some(b) => {
                    taken[b] = true;
                    if gt_ignore[b] {
                        Status::Ignored
                    } else {
                        Status::Tp
                    }
                }
                None => {
                    let a = d.area();
                    if a < area.0 || a > area.1 {
                        Status::Ignored
                    } else {
                        Status::Fp
                    }
                }
            }
        })
        .collect()
}

fn cumulative_curve(statuses: &[Status], n_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve = PrCurve::default();
    for s in statuses {
        match s {
            Status::Tp => tp += 1,
            Status::Fp => fp += 1,
            Status::Ignored => continue,
        }
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    curve
}

/// Precision/recall after each detection, visiting `detections` in the
/// given order (callers sort by descending score).
pub fn pr_curve(detections: &[ScoredBox], ground_truth: &[(usize, BBox)], iou_thresh: f64) -> PrCurve {
    let mut gts_by_image: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
    for (img, b) in ground_truth {
        gts_by_image.entry(*img).or_default().push(*b);
    }
    let mut taken: HashMap<usize, Vec<bool>> = gts_by_image
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    let statuses: Vec<Status> = detections
        .iter()
        .map(|d| {
            let Some(gts) = gts_by_image.get(&d.image) else {
                return Status::Fp;
            };
            let used = taken.get_mut(&d.image).expect("same keys");
            let mut best = None;
            let mut t = iou_thresh.min(1.0 - 1e-10);
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let o = d.bbox.iou(gt);
                if o >= t {
                    t = o;
                    best = Some(g);
                }
            }
            match best {
                Some(g) => {
                    used[g] = true;
                    Status::Tp
                }
                None => Status::Fp,
            }
        })
        .collect();
    cumulative_curve(&statuses, ground_truth.len())
}

/// Number of recall sample points of the interpolated AP.
pub const RECALL_POINTS: usize = 101;

/// 101-point interpolated AP: the precision envelope (max precision over
/// recall >= r) averaged over r = 0, 0.01, ..., 1.
pub fn average_precision(precision: &[f64], recall: &[f64]) -> f64 {
    assert_eq!(precision.len(), recall.len(), "precision/recall length mismatch");
    if precision.is_empty() {
        return 0.0;
    }
    let mut env = precision.to_vec();
    for i in (0..env.len() - 1).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut total = 0.0;
    let mut i = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / 100.0;
        while i < recall.len() && recall[i] < r {
            i += 1;
        }
        if i == recall.len() {
            break;
        }
        total += env[i];
    }
    total / RECALL_POINTS as f64
}

/// Evaluation settings.
#[derive(Clone, Debug)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    /// Inclusive area ranges in px^2.
    pub medium: (f64, f64),
    pub large: (f64, f64),
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_dets: 100,
            medium: (32.0 * 32.0, 96.0 * 96.0),
            large: (96.0 * 96.0, 1e10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub category_id: u64,
    pub name: String,
    /// AP at each IoU threshold.
    pub ap: Vec<f64>,
    /// Recall at each IoU threshold.
    pub recall: Vec<f64>,
}

/// Dataset-level metrics. Area-restricted APs are `None` when no ground
/// truth falls in their area range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AP_M")]
    pub ap_m: Option<f64>,
    #[serde(rename = "AP_L")]
    pub ap_l: Option<f64>,
    #[serde(rename = "mAR")]
    pub mar: f64,
    pub iou_thresholds: Vec<f64>,
    pub per_class: Vec<ClassReport>,
}

struct Prepared {
    /// Per image, detections sorted by descending score and truncated.
    dets: Vec<Vec<DetectionRecord>>,
    /// Per image, ground truth annotations.
    gts: Vec<Vec<(u64, BBox)>>,
    classes: Vec<u64>,
}

fn prepare(dets: &[DetectionRecord], gt: &GroundTruth, params: &EvalParams) -> Result<Prepared, EvalError> {
    let index: HashMap<u64, usize> = gt.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let mut per_image: Vec<Vec<DetectionRecord>> = vec![Vec::new(); gt.images.len()];
    for d in dets {
        let &i = index.get(&d.image_id).ok_or(EvalError::UnknownImage(d.image_id))?;
        per_image[i].push(d.clone());
    }
    for v in &mut per_image {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v.truncate(params.max_dets);
    }
    let mut gts: Vec<Vec<(u64, BBox)>> = vec![Vec::new(); gt.images.len()];
    let mut classes = BTreeSet::new();
    for a in &gt.annotations {
        let &i = index
            .get(&a.image_id)
            .ok_or(EvalError::UnknownAnnotationImage(a.image_id))?;
        gts[i].push((a.category_id, a.corner_box()));
        classes.insert(a.category_id);
    }
    Ok(Prepared {
        dets: per_image,
        gts,
        classes: classes.into_iter().collect(),
    })
}

/// AP and final recall of one class at one threshold within an area range,
/// or `None` when the class has no non-ignored ground truth there.
fn class_ap(p: &Prepared, class: u64, thr: f64, area: (f64, f64)) -> Option<(f64, f64)> {
    let mut scored: Vec<(f64, Status)> = Vec::new();
    let mut n_gt = 0;
    for (dets, gts) in p.dets.iter().zip(&p.gts) {
        let mut g: Vec<(BBox, bool)> = gts
            .iter()
            .filter(|(c, _)| *c == class)
            .map(|(_, b)| (*b, b.area() < area.0 || b.area() > area.1))
            .collect();
        g.sort_by_key(|(_, ig)| *ig);
        n_gt += g.iter().filter(|(_, ig)| !ig).count();
        let d: Vec<&DetectionRecord> = dets.iter().filter(|d| d.category_id == class).collect();
        let boxes: Vec<BBox> = d.iter().map(|d| d.corner_box()).collect();
        let gboxes: Vec<BBox> = g.iter().map(|(b, _)| *b).collect();
        let ignore: Vec<bool> = g.iter().map(|(_, ig)| *ig).collect();
        let st = match_image(&boxes, &gboxes, &ignore, thr, area);
        scored.extend(d.iter().map(|d| d.score).zip(st));
    }
    if n_gt == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let statuses: Vec<Status> = scored.into_iter().map(|(_, s)| s).collect();
    let curve = cumulative_curve(&statuses, n_gt);
    let recall = curve.recall.last().copied().unwrap_or(0.0);
    Some((average_precision(&curve.precision, &curve.recall), recall))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluate detections against ground truth.
pub fn evaluate(dets: &[DetectionRecord], gt: &GroundTruth) -> Result<EvalReport, EvalError> {
    evaluate_with(dets, gt, &EvalParams::default())
}

pub fn evaluate_with(
    dets: &[DetectionRecord],
    gt: &GroundTruth,
    params: &EvalParams,
) -> Result<EvalReport, EvalError> {
    let p = prepare(dets, gt, params)?;
    let all = (0.0, f64::INFINITY);
    let names: HashMap<u64, &str> = gt.categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let per_class: Vec<ClassReport> = p
        .classes
        .iter()
        .map(|&c| {
            let (ap, recall) = params
                .iou_thresholds
                .iter()
                .map(|&t| class_ap(&p, c, t, all).expect("class present in ground truth"))
                .unzip();
            ClassReport {
                category_id: c,
                name: names.get(&c).unwrap_or(&"").to_string(),
                ap,
                recall,
            }
        })
        .collect();

    let at = |t: f64| -> f64 {
        let idx = params.iou_thresholds.iter().position(|&x| (x - t).abs() < 1e-12);
        idx.and_then(|i| mean(&per_class.iter().map(|c| c.ap[i]).collect::<Vec<_>>()))
            .unwrap_or(0.0)
    };
    let flat = |f: fn(&ClassReport) -> &Vec<f64>| -> f64 {
        mean(&per_class.iter().flat_map(|c| f(c).iter().copied()).collect::<Vec<_>>()).unwrap_or(0.0)
    };
    let area_ap = |range: (f64, f64)| -> Option<f64> {
        let v: Vec<f64> = p
            .classes
            .iter()
            .flat_map(|&c| params.iou_thresholds.iter().map(move |&t| (c, t)))
            .filter_map(|(c, t)| class_ap(&p, c, t, range).map(|(ap, _)| ap))
            .collect();
        mean(&v)
    };

    Ok(EvalReport {
        map: flat(|c| &c.ap),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_m: area_ap(params.medium),
        ap_l: area_ap(params.large),
        mar: flat(|c| &c.recall),
        iou_thresholds: params.iou_thresholds.clone(),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0)
    }

    #[test]
    fn hand_pr_fixture() {
        let gts = [(0, sq(0.0)), (0, sq(100.0))];
        let dets = [
            ScoredBox { image: 0, bbox: sq(0.0), score: 0.9 },
            ScoredBox { image: 0, bbox: sq(50.0), score: 0.8 },
            ScoredBox { image: 0, bbox: sq(100.0), score: 0.7 },
        ];
        let c = pr_curve(&dets, &gts, 0.5);
        assert_eq!(c.precision, vec![1.0, 0.5, 2.0 / 3.0]);
        assert_eq!(c.recall, vec![0.5, 0.5, 1.0]);
        let ap = average_precision(&c.precision, &c.recall);
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
        assert!((ap - 0.83498).abs() < 1e-5);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = [(0, sq(0.0)), (1, sq(0.0))];
        let dets = [
            ScoredBox { image: 0, bbox: sq(0.0), score: 0.9 },
            ScoredBox { image: 1, bbox: sq(0.0), score: 0.8 },
        ];
        let c = pr_curve(&dets, &gts, 0.5);
        assert!(c.precision.iter().all(|&p| p == 1.0));
        assert_eq!(*c.recall.last().unwrap(), 1.0);
        assert_eq!(average_precision(&c.precision, &c.recall), 1.0);
        let empty = pr_curve(&[], &gts, 0.5);
        assert!(empty.precision.is_empty());
        assert_eq!(average_precision(&empty.precision, &empty.recall), 0.0);
    }

    #[test]
    fn no_match_is_zero_ap() {
        let gts = [(0, sq(0.0))];
        let dets = [ScoredBox { image: 0, bbox: sq(500.0), score: 0.9 }];
        let c = pr_curve(&dets, &gts, 0.5);
        assert_eq!(average_precision(&c.precision, &c.recall), 0.0);
    }
}
