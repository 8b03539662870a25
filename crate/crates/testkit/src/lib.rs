//! Deliberately naive reference implementations.
//!
//! Every function here is written against plain slices and arrays, without
//! calling into the library crates, so tests can compare the optimized code
//! paths against an independent route. Speed is irrelevant.

/// Corner-form box `[x1, y1, x2, y2]`.
pub type Corner = [f64; 4];

pub fn iou(a: &Corner, b: &Corner) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |c: &Corner| (c[2] - c[0]) * (c[3] - c[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// k-NN lists: self first, then the k-1 nearest others by squared
/// Euclidean distance, ties by ascending index. Full sort per node.
pub fn knn(features: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..features.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..features.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = features[i]
                        .iter()
                        .zip(&features[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, j)
                })
                .collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut row = vec![i];
            row.extend(others.iter().take(k - 1).map(|&(_, j)| j));
            row
        })
        .collect()
}

/// Per node, componentwise max over neighbors of `x_i - x_j`.
pub fn max_relative(x: &[Vec<f64>], neighbors: &[Vec<usize>]) -> Vec<Vec<f64>> {
    x.iter()
        .zip(neighbors)
        .map(|(xi, nb)| {
            (0..xi.len())
                .map(|d| {
                    nb.iter()
                        .map(|&j| xi[d] - x[j][d])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect()
}

/// Greedy NMS by repeated arg-max over the surviving set.
pub fn nms(boxes: &[Corner], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && iou(&boxes[b], &boxes[j]) > thresh {
                alive[j] = false;
            }
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Threshold assignment from the full IoU table, then each ground truth
/// forces its best box (lowest index among equals, IoU > 0) positive.
pub fn assign(boxes: &[Corner], gts: &[Corner], pos: f64, neg: f64, force_best: bool) -> Vec<RefLabel> {
    let table: Vec<Vec<f64>> = boxes
        .iter()
        .map(|b| gts.iter().map(|g| iou(b, g)).collect())
        .collect();
    let mut labels: Vec<RefLabel> = table
        .iter()
        .map(|row| {
            if row.is_empty() {
                return RefLabel::Negative;
            }
            let mut best = 0;
            for g in 1..row.len() {
                if row[g] > row[best] {
                    best = g;
                }
            }
            if row[best] >= pos {
                RefLabel::Positive(best)
            } else if row[best] < neg {
                RefLabel::Negative
            } else {
                RefLabel::Ignore
            }
        })
        .collect();
    if force_best {
        for g in 0..gts.len() {
            let mut best: Option<usize> = None;
            for b in 0..boxes.len() {
                if table[b][g] > 0.0 && best.is_none_or(|x| table[b][g] > table[x][g]) {
                    best = Some(b);
                }
            }
            if let Some(b) = best {
                labels[b] = RefLabel::Positive(g);
            }
        }
    }
    labels
}

#[derive(Clone, Debug)]
pub struct RefDet {
    pub image: usize,
    pub class: u64,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct RefGt {
    pub image: usize,
    pub class: u64,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub mar: f64,
}

fn corner(b: &[f64; 4]) -> Corner {
    [b[0], b[1], b[0] + b[2], b[1] + b[3]]
}

fn interpolated_ap(prec: &[f64], rec: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let mut best = 0.0f64;
        for i in 0..prec.len() {
            if rec[i] >= r {
                best = best.max(prec[i]);
            }
        }
        total += best;
    }
    total / 101.0
}

/// Returns (AP, final recall), or None when no ground truth counts.
fn ref_class(
    dets: &[Vec<RefDet>],
    gts: &[RefGt],
    class: u64,
    thr: f64,
    lo: f64,
    hi: f64,
) -> Option<(f64, f64)> {
    let outside = |a: f64| a < lo || a > hi;
    // (score, tp) in concatenated image order
    let mut entries: Vec<(f64, bool)> = Vec::new();
    let mut counted = 0;
    for (img, img_dets) in dets.iter().enumerate() {
        let g: Vec<&RefGt> = gts.iter().filter(|g| g.image == img && g.class == class).collect();
        let ignored: Vec<bool> = g.iter().map(|g| outside(g.bbox[2] * g.bbox[3])).collect();
        counted += ignored.iter().filter(|&&x| !x).count();
        let mut used = vec![false; g.len()];
        for d in img_dets.iter().filter(|d| d.class == class) {
            let pick = |want_ignored: bool| -> Option<usize> {
                let mut best: Option<(f64, usize)> = None;
                for (j, gt) in g.iter().enumerate() {
                    if used[j] || ignored[j] != want_ignored {
                        continue;
                    }
                    let o = iou(&corner(&d.bbox), &corner(&gt.bbox));
                    if o >= thr.min(1.0 - 1e-10) && best.is_none_or(|(bo, _)| o >= bo) {
                        best = Some((o, j));
                    }
                }
                best.map(|(_, j)| j)
            };
            match pick(false).or_else(|| pick(true)) {
                Some(j) => {
                    used[j] = true;
                    if !ignored[j] {
                        entries.push((d.score, true));
                    }
                }
                None => {
                    if !outside(d.bbox[2] * d.bbox[3]) {
                        entries.push((d.score, false));
                    }
                }
            }
        }
    }
    if counted == 0 {
        return None;
    }
    // insertion sort by descending score keeps ties in concatenation order
    let mut sorted: Vec<(f64, bool)> = Vec::new();
    for e in entries {
        let pos = sorted.iter().position(|s| s.0 < e.0).unwrap_or(sorted.len());
        sorted.insert(pos, e);
    }
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for (_, hit) in &sorted {
        if *hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        prec.push(tp / (tp + fp));
        rec.push(tp / counted as f64);
    }
    Some((interpolated_ap(&prec, &rec), rec.last().copied().unwrap_or(0.0)))
}

/// Independent evaluator. `n_images` images indexed `0..n_images`;
/// at most `max_dets` highest-scoring detections per image are used.
pub fn evaluate(dets: &[RefDet], gts: &[RefGt], n_images: usize, max_dets: usize) -> RefReport {
    let mut per_image: Vec<Vec<RefDet>> = vec![Vec::new(); n_images];
    for d in dets {
        per_image[d.image].push(d.clone());
    }
    for v in &mut per_image {
        let mut sorted: Vec<RefDet> = Vec::new();
        for d in v.drain(..) {
            let pos = sorted.iter().position(|s| s.score < d.score).unwrap_or(sorted.len());
            sorted.insert(pos, d);
        }
        sorted.truncate(max_dets);
        *v = sorted;
    }
    let mut classes: Vec<u64> = gts.iter().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let avg = |v: Vec<f64>| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let grid = |lo: f64, hi: f64, pick: &dyn Fn(usize) -> bool, recall: bool| -> Option<f64> {
        let mut vals = Vec::new();
        for &c in &classes {
            for (ti, &t) in thresholds.iter().enumerate() {
                if !pick(ti) {
                    continue;
                }
                if let Some((ap, r)) = ref_class(&per_image, gts, c, t, lo, hi) {
                    vals.push(if recall { r } else { ap });
                }
            }
        }
        avg(vals)
    };
    let inf = f64::INFINITY;
    RefReport {
        map: grid(0.0, inf, &|_| true, false).unwrap_or(0.0),
        ap50: grid(0.0, inf, &|t| t == 0, false).unwrap_or(0.0),
        ap75: grid(0.0, inf, &|t| t == 5, false).unwrap_or(0.0),
        ap_m: grid(1024.0, 9216.0, &|_| true, false),
        ap_l: grid(9216.0, 1e10, &|_| true, false),
        mar: grid(0.0, inf, &|_| true, true).unwrap_or(0.0),
    }
}

/// Per-label mean color by visiting every pixel once.
pub fn mean_colors(rgb: &[[f64; 3]], labels: &[usize], m: usize) -> Vec<[f64; 3]> {
    let mut sum = vec![[0.0; 3]; m];
    let mut count = vec![0usize; m];
    for (px, &l) in rgb.iter().zip(labels) {
        for c in 0..3 {
            sum[l][c] += px[c];
        }
        count[l] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64])
        .collect()
}

/// Dense Gaussian affinity by a scalar double loop.
pub fn gaussian_affinity(points: &[[f64; 2]], sigma2: f64) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; points.len()]; points.len()];
    for i in 0..points.len() {
        for j in 0..points.len() {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            a[i][j] = (-(dx * dx + dy * dy) / sigma2).exp();
        }
    }
    a
}

/// 4-connected component count of each label via flood fill.
pub fn components_per_label(labels: &[usize], width: usize, height: usize) -> Vec<usize> {
    let m = labels.iter().max().map_or(0, |&x| x + 1);
    let mut seen = vec![false; labels.len()];
    let mut comps = vec![0; m];
    for start in 0..labels.len() {
        if seen[start] {
            continue;
        }
        comps[labels[start]] += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut nbrs = Vec::new();
            if x > 0 {
                nbrs.push(p - 1);
            }
            if x + 1 < width {
                nbrs.push(p + 1);
            }
            if y > 0 {
                nbrs.push(p - width);
            }
            if y + 1 < height {
                nbrs.push(p + width);
            }
            for q in nbrs {
                if !seen[q] && labels[q] == labels[p] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    comps
}
