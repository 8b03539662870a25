//! Second stage: RoI feature pooling, the classification and box heads,
//! training-target assignment, losses and final detections.

use serde::{Deserialize, Serialize};
use spgnn_core::{Init, ParamBuilder, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use spgnn_eval::{nms, BBox};

use crate::box_coder::BoxCoder;
use crate::error::{precondition, Result};
use crate::sprpn::STRIDES;

/// Box side that maps to the middle pyramid level.
pub const CANONICAL_SIZE: f64 = 224.0;
pub const CANONICAL_LEVEL: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub roi_size: usize,
    pub sampling_ratio: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_classes: 5,
            hidden_dim: 1024,
            roi_size: 7,
            sampling_ratio: 2,
            pos_iou: 0.5,
            neg_iou: 0.5,
            batch_size: 128,
            positive_fraction: 0.5,
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

/// Pyramid level (2 to 5) a box is pooled from.
pub fn roi_level(b: &BBox) -> usize {
    let side = (b.width() * b.height()).sqrt();
    let k = (CANONICAL_LEVEL + (side / CANONICAL_SIZE).log2()).floor();
    if k.is_nan() {
        return 2;
    }
    k.clamp(2.0, 5.0) as usize
}

/// Bilinear taps of the point `(y, x)` on an `h x w` grid; `None` when the
/// point is more than one cell outside the map.
fn bilinear(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let y1 = if y0 >= h - 1 {
        y0 = h - 1;
        y = y0 as f64;
        y0
    } else {
        y0 + 1
    };
    let mut x0 = x.floor() as usize;
    let x1 = if x0 >= w - 1 {
        x0 = w - 1;
        x = x0 as f64;
        x0
    } else {
        x0 + 1
    };
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ])
}

/// RoIAlign of `boxes` (image pixels) on one `C x H x W` map with the given
/// stride: `R x (C * out * out)`, each bin the mean of `sampling^2` bilinear
/// samples, pixel centers at half-integer positions.
pub fn roi_align(map: &Var, boxes: &[BBox], stride: f64, out: usize, sampling: usize) -> Result<Var> {
    let value = map.value();
    let (c, h, w) = value.dims3("roi_align")?;
    if boxes.is_empty() || out == 0 || sampling == 0 {
        return Err(precondition("roi_align needs boxes and positive output size"));
    }
    if let Some(b) = boxes.iter().find(|b| !b.is_valid()) {
        return Err(precondition(format!("degenerate box {b:?}")));
    }
    let bins = out * out;
    let norm = 1.0 / (sampling * sampling) as f64;
    // taps[bin_start[i]..bin_start[i+1]] feed bin i of all channels
    let mut taps: Vec<(usize, f64)> = Vec::new();
    let mut bin_start = Vec::with_capacity(boxes.len() * bins + 1);
    let scale = 1.0 / stride;
    for b in boxes {
        let (x0, y0) = (b.x1 * scale - 0.5, b.y1 * scale - 0.5);
        let bw = b.width() * scale / out as f64;
        let bh = b.height() * scale / out as f64;
        for ph in 0..out {
            for pw in 0..out {
                bin_start.push(taps.len());
                for iy in 0..sampling {
                    let y = y0 + ph as f64 * bh + (iy as f64 + 0.5) * bh / sampling as f64;
                    for ix in 0..sampling {
                        let x = x0 + pw as f64 * bw + (ix as f64 + 0.5) * bw / sampling as f64;
                        if let Some(t) = bilinear(y, x, h, w) {
                            taps.extend(t.iter().filter(|(_, wt)| *wt != 0.0).map(|&(i, wt)| (i, wt * norm)));
                        }
                    }
                }
            }
        }
    }
    bin_start.push(taps.len());
    let r = boxes.len();
    let hw = h * w;
    let src = value.data();
    let mut data = vec![0.0; r * c * bins];
    for ri in 0..r {
        for bin in 0..bins {
            let tb = &taps[bin_start[ri * bins + bin]..bin_start[ri * bins + bin + 1]];
            for ch in 0..c {
                let plane = &src[ch * hw..(ch + 1) * hw];
                data[(ri * c + ch) * bins + bin] = tb.iter().map(|&(i, wt)| wt * plane[i]).sum();
            }
        }
    }
    let result = Tensor::new(&[r, c * bins], data)?;
    let map_shape = [c, h, w];
    Ok(map.tape().push_op("roi_align", &[map], result, move |g, _| {
        let gd = g.data();
        let mut dm = vec![0.0; c * hw];
        for ri in 0..r {
            for bin in 0..bins {
                let tb = &taps[bin_start[ri * bins + bin]..bin_start[ri * bins + bin + 1]];
                for ch in 0..c {
                    let gv = gd[(ri * c + ch) * bins + bin];
                    if gv == 0.0 {
                        continue;
                    }
                    let plane = &mut dm[ch * hw..(ch + 1) * hw];
                    for &(i, wt) in tb {
                        plane[i] += wt * gv;
                    }
                }
            }
        }
        vec![Some(Tensor::new(&map_shape, dm).expect("gradient shape"))]
    })?)
}

/// Pool every box from its assigned level; rows keep the order of `boxes`.
pub fn pool_rois(levels: &[Var], boxes: &[BBox], out: usize, sampling: usize) -> Result<Var> {
    if levels.len() != STRIDES.len() {
        return Err(precondition("pooling needs four pyramid levels"));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); levels.len()];
    for (i, b) in boxes.iter().enumerate() {
        groups[roi_level(b) - 2].push(i);
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(boxes.len());
    for (l, idx) in groups.iter().enumerate().filter(|(_, g)| !g.is_empty()) {
        let bs: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
        parts.push(roi_align(&levels[l], &bs, STRIDES[l] as f64, out, sampling)?);
        order.extend_from_slice(idx);
    }
    let stacked = if parts.len() == 1 { parts.pop().expect("one part") } else { Var::concat0(&parts)? };
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return Ok(stacked);
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &o) in order.iter().enumerate() {
        inverse[o] = pos;
    }
    Ok(stacked.gather_rows(&inverse)?)
}

/// Two GeLU fully connected layers, then parallel class and box outputs.
/// Class 0 is background; box deltas are per foreground class.
#[derive(Clone, Debug)]
pub struct BoxHead {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    cls: (ParamId, ParamId),
    reg: (ParamId, ParamId),
    pub num_classes: usize,
}

impl BoxHead {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, hidden: usize, num_classes: usize) -> Self {
        let fc = |pb: &mut ParamBuilder, name: &str, i: usize, o: usize, init: Init| {
            (
                pb.add(&format!("{name}.weight"), &[i, o], init),
                pb.add(&format!("{name}.bias"), &[o], Init::Zeros),
            )
        };
        BoxHead {
            fc1: fc(pb, "fc1", in_dim, hidden, Init::KaimingUniform { fan_in: in_dim }),
            fc2: fc(pb, "fc2", hidden, hidden, Init::KaimingUniform { fan_in: hidden }),
            cls: fc(pb, "cls", hidden, num_classes + 1, Init::Uniform { bound: 0.01 }),
            reg: fc(pb, "reg", hidden, 4 * num_classes, Init::Uniform { bound: 0.001 }),
            num_classes,
        }
    }

    /// `R x F` pooled features to `R x (M+1)` logits and `R x 4M` deltas.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, rois: &Var) -> Result<(Var, Var)> {
        let p = |(w, b): (ParamId, ParamId)| (tape.param(store, w), tape.param(store, b));
        let (w1, b1) = p(self.fc1);
        let (w2, b2) = p(self.fc2);
        let h = rois.linear(&w1, Some(&b1))?.gelu()?;
        let h = h.linear(&w2, Some(&b2))?.gelu()?;
        let (wc, bc) = p(self.cls);
        let (wr, br) = p(self.reg);
        Ok((h.linear(&wc, Some(&bc))?, h.linear(&wr, Some(&br))?))
    }
}

/// Training label of a box against the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Matched to this ground-truth index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Label each box by its best IoU: positive at `>= pos_iou`, negative below
/// `neg_iou`, ignored between. With `force_best`, each ground truth's
/// highest-IoU box (lowest index on ties, IoU > 0) is made positive.
pub fn assign_targets(
    boxes: &[BBox],
    gts: &[BBox],
    pos_iou: f64,
    neg_iou: f64,
    force_best: bool,
) -> Result<Vec<Assignment>> {
    if !(0.0 < neg_iou && neg_iou <= pos_iou && pos_iou < 1.0) {
        return Err(precondition(format!(
            "IoU thresholds need 0 < neg <= pos < 1, got pos {pos_iou}, neg {neg_iou}"
        )));
    }
    let mut best_box: Vec<Option<(usize, f64)>> = vec![None; gts.len()];
    let mut labels = Vec::with_capacity(boxes.len());
    for (bi, b) in boxes.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let iou = b.iou(gt);
            if best.is_none_or(|(_, v)| iou > v) {
                best = Some((g, iou));
            }
            if iou > 0.0 && best_box[g].is_none_or(|(_, v)| iou > v) {
                best_box[g] = Some((bi, iou));
            }
        }
        labels.push(match best {
            None => Assignment::Negative,
            Some((g, v)) if v >= pos_iou => Assignment::Positive(g),
            Some((_, v)) if v < neg_iou => Assignment::Negative,
            Some(_) => Assignment::Ignore,
        });
    }
    if force_best {
        for (g, bb) in best_box.iter().enumerate() {
            if let Some((b, _)) = bb {
                labels[*b] = Assignment::Positive(g);
            }
        }
    }
    Ok(labels)
}

/// Random subset of at most `batch` labeled boxes with at most
/// `positive_fraction` positives; negatives fill the remainder.
/// Returns sorted positive and negative indices.
pub fn sample_assignments(
    labels: &[Assignment],
    batch: usize,
    positive_fraction: f64,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>) {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], Assignment::Positive(_))).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Assignment::Negative).collect();
    let n_pos = pos.len().min((batch as f64 * positive_fraction) as usize);
    let pos = rng.sample(&pos, n_pos);
    let n_neg = neg.len().min(batch - n_pos);
    let neg = rng.sample(&neg, n_neg);
    (pos, neg)
}

/// Final detection in image pixels; `class` is in `1..=M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Turn head outputs for `proposals` into detections: each proposal takes
/// its most probable foreground class and that class's refined box; low
/// scores are dropped, then class-wise NMS and the per-image cap apply.
pub fn postprocess(
    cls_logits: &Tensor,
    deltas: &Tensor,
    proposals: &[BBox],
    width: f64,
    height: f64,
    cfg: &HeadConfig,
) -> Result<Vec<Detection>> {
    let (r, k) = cls_logits.dims2("postprocess")?;
    let m = k - 1;
    if r != proposals.len() || deltas.shape() != [r, 4 * m] {
        return Err(precondition("head outputs do not match proposals"));
    }
    let mut cands: Vec<Detection> = Vec::new();
    for i in 0..r {
        let row = cls_logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let (c, score) = (1..k)
            .map(|c| (c, (row[c] - mx).exp() / z))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if score < cfg.score_thresh {
            continue;
        }
        let d = &deltas.row(i)[4 * (c - 1)..4 * c];
        let bbox = BoxCoder::HEAD.decode(d, &proposals[i]).clip(width, height);
        if bbox.is_valid() {
            cands.push(Detection { class: c, bbox, score });
        }
    }
    let mut keep: Vec<Detection> = Vec::new();
    for c in 1..=m {
        let of_class: Vec<&Detection> = cands.iter().filter(|d| d.class == c).collect();
        let boxes: Vec<BBox> = of_class.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = of_class.iter().map(|d| d.score).collect();
        keep.extend(nms(&boxes, &scores, cfg.nms_iou).into_iter().map(|i| *of_class[i]));
    }
    keep.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
    keep.truncate(cfg.max_detections);
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_mapping() {
        assert_eq!(roi_level(&BBox::new(0.0, 0.0, 224.0, 224.0)), 4);
        assert_eq!(roi_level(&BBox::new(0.0, 0.0, 32.0, 32.0)), 2);
        assert_eq!(roi_level(&BBox::new(0.0, 0.0, 112.0, 112.0)), 3);
        assert_eq!(roi_level(&BBox::new(0.0, 0.0, 111.0, 112.0)), 2);
        assert_eq!(roi_level(&BBox::new(0.0, 0.0, 896.0, 896.0)), 5);
    }

    #[test]
    fn constant_map_gives_constant_features() {
        let tape = Tape::new();
        let map = tape.constant(Tensor::full(&[2, 16, 16], 3.25));
        let boxes = [BBox::new(5.0, 7.0, 40.0, 30.0), BBox::new(0.0, 0.0, 64.0, 64.0)];
        let out = roi_align(&map, &boxes, 4.0, 7, 2).unwrap();
        assert_eq!(out.shape(), vec![2, 2 * 49]);
        assert!(out.value().data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
        assert!(roi_align(&map, &[BBox::new(3.0, 3.0, 3.0, 9.0)], 4.0, 7, 2).is_err());
    }

    #[test]
    fn assignment_fixtures() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let same = assign_targets(&[gt], &[gt], 0.7, 0.3, false).unwrap();
        assert_eq!(same, vec![Assignment::Positive(0)]);
        assert_eq!(BoxCoder::RPN.encode(&gt, &gt), [0.0; 4]);
        let b = BBox::new(0.0, 0.0, 10.0, 4.0);
        assert!((b.iou(&gt) - 0.4).abs() < 1e-12);
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        let labels = assign_targets(&[b, far], &[gt], 0.7, 0.3, false).unwrap();
        assert_eq!(labels, vec![Assignment::Ignore, Assignment::Negative]);
        let forced = assign_targets(&[b, far], &[gt], 0.7, 0.3, true).unwrap();
        assert_eq!(forced[0], Assignment::Positive(0));
        assert!(assign_targets(&[b], &[gt], 0.3, 0.7, false).is_err());
        assert_eq!(assign_targets(&[b], &[], 0.7, 0.3, true).unwrap(), vec![Assignment::Negative]);
    }

    #[test]
    fn sampling_respects_budget() {
        let mut labels = vec![Assignment::Negative; 300];
        for l in labels.iter_mut().take(200) {
            *l = Assignment::Positive(0);
        }
        let (p, n) = sample_assignments(&labels, 256, 0.5, &mut Rng::seed(0));
        assert_eq!((p.len(), n.len()), (128, 100));
        let (p, n) = sample_assignments(&labels[190..], 256, 0.5, &mut Rng::seed(0));
        assert_eq!((p.len(), n.len()), (10, 100));
    }

    #[test]
    fn zero_head_gives_uniform_posterior() {
        let mut pb = ParamBuilder::new();
        let head = BoxHead::new(&mut pb, 12, 8, 5);
        let mut store = pb.build(&mut Rng::seed(0));
        store.zero_values();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 12], |i| i as f64));
        let (cls, reg) = head.forward(&tape, &store, &x).unwrap();
        assert_eq!(cls.shape(), vec![3, 6]);
        assert_eq!(reg.shape(), vec![3, 20]);
        let c = cls.value();
        let row = c.row(0);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for v in row {
            assert!((v.exp() / z - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn postprocess_picks_best_foreground_and_suppresses() {
        let props = [BBox::new(0.0, 0.0, 20.0, 20.0), BBox::new(1.0, 1.0, 21.0, 21.0), BBox::new(40.0, 40.0, 60.0, 60.0)];
        let logits = Tensor::new(
            &[3, 3],
            vec![0.0, 3.0, 1.0, 0.0, 2.5, 1.0, 5.0, 0.0, 0.0],
        )
        .unwrap();
        let deltas = Tensor::zeros(&[3, 8]);
        let cfg = HeadConfig { num_classes: 2, ..HeadConfig::default() };
        let dets = postprocess(&logits, &deltas, &props, 64.0, 64.0, &cfg).unwrap();
        // the overlapping second proposal is suppressed, the third is background
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class, 1);
        assert_eq!(dets[0].bbox, props[0]);
    }
}
