//! SLIC superpixels and the superpixel graph built from them.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use spgnn_core::Tensor;

use crate::error::{precondition, Result};
use crate::image::Image;

/// Bandwidth of the Gaussian affinity over normalized centroids.
pub const SIGMA2: f64 = 0.1 * PI;
/// Colors are compared on this scale so compactness values follow the
/// conventional SLIC range.
const COLOR_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicParams {
    pub m_target: usize,
    pub compactness: f64,
    pub iters: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            m_target: 196,
            compactness: 10.0,
            iters: 10,
        }
    }
}

/// Partition of an image into `count` connected, non-empty regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    width: usize,
    height: usize,
    labels: Vec<usize>,
    count: usize,
    sizes: Vec<usize>,
}

impl SuperpixelMap {
    /// Validate a row-major label map: labels dense in `[0, M)`, each
    /// non-empty and 4-connected.
    pub fn from_labels(labels: Vec<usize>, width: usize, height: usize) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(precondition(format!(
                "{} labels for a {width}x{height} image",
                labels.len()
            )));
        }
        let count = labels.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; count];
        for &l in &labels {
            sizes[l] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(precondition(format!("label {empty} is empty")));
        }
        let map = SuperpixelMap { width, height, labels, count, sizes };
        let (_, n_components) = components(&map.labels, width, height);
        if n_components != count {
            return Err(precondition("a label is not 4-connected"));
        }
        Ok(map)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

/// 4-connected components of equal labels: per-pixel component id (in order
/// of first pixel) and the number of components.
fn components(labels: &[usize], w: usize, h: usize) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == labels[p] {
                    comp[q] = next;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        next += 1;
    }
    (comp, next)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// SLIC over RGB: grid seeds moved to the lowest-gradient pixel of their 3x3
/// neighborhood, `iters` rounds of windowed assignment, then small
/// disconnected fragments merged into their largest neighbor.
pub fn slic_segment(img: &Image, params: &SlicParams) -> Result<SuperpixelMap> {
    let (h, w) = (img.height(), img.width());
    let m = params.m_target;
    if m < 2 || m > h * w / 16 {
        return Err(precondition(format!(
            "m_target must be in [2, {}] for a {w}x{h} image, got {m}",
            h * w / 16
        )));
    }
    if !(params.compactness.is_finite() && params.compactness > 0.0) {
        return Err(precondition("compactness must be positive"));
    }
    let step = ((h * w) as f64 / m as f64).sqrt();
    let px = img.pixels().data();
    let n = h * w;
    let color = |p: usize| -> [f64; 3] {
        [px[p] * COLOR_SCALE, px[n + p] * COLOR_SCALE, px[2 * n + p] * COLOR_SCALE]
    };
    let dist2 = |a: [f64; 3], b: [f64; 3]| -> f64 { a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum() };

    let gradient = |y: usize, x: usize| -> f64 {
        let l = y * w + x.saturating_sub(1);
        let r = y * w + (x + 1).min(w - 1);
        let u = y.saturating_sub(1) * w + x;
        let d = (y + 1).min(h - 1) * w + x;
        dist2(color(r), color(l)) + dist2(color(d), color(u))
    };

    let nx = ((m as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w);
    let ny = ((m as f64 / nx as f64).round() as usize).clamp(1, h);
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for i in 0..ny {
        for j in 0..nx {
            let sx = (((j as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let sy = (((i as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let (mut by, mut bx, mut best) = (sy, sx, gradient(sy, sx));
            for yy in sy.saturating_sub(1)..=(sy + 1).min(h - 1) {
                for xx in sx.saturating_sub(1)..=(sx + 1).min(w - 1) {
                    let g = gradient(yy, xx);
                    if g < best {
                        (by, bx, best) = (yy, xx, g);
                    }
                }
            }
            let c = color(by * w + bx);
            centers.push([c[0], c[1], c[2], bx as f64, by as f64]);
        }
    }

    let spatial = (params.compactness / step).powi(2);
    let mut labels = vec![usize::MAX; n];
    let mut best = vec![f64::INFINITY; n];
    for _ in 0..params.iters.max(1) {
        labels.fill(usize::MAX);
        best.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x0 = (c[3] - step).round().max(0.0) as usize;
            let x1 = ((c[3] + step).round() as usize).min(w - 1);
            let y0 = (c[4] - step).round().max(0.0) as usize;
            let y1 = ((c[4] + step).round() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let dc = dist2(color(p), [c[0], c[1], c[2]]);
                    let ds = (x as f64 - c[3]).powi(2) + (y as f64 - c[4]).powi(2);
                    let d = dc + spatial * ds;
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = k;
                    }
                }
            }
        }
        // pixels outside every window go to the globally nearest center
        for p in 0..n {
            if labels[p] != usize::MAX {
                continue;
            }
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            let col = color(p);
            let (k, _) = centers
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let d = dist2(col, [c[0], c[1], c[2]])
                        + spatial * ((x - c[3]).powi(2) + (y - c[4]).powi(2));
                    (k, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least one center");
            labels[p] = k;
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for p in 0..n {
            let a = &mut acc[labels[p]];
            let c = color(p);
            a[0] += c[0];
            a[1] += c[1];
            a[2] += c[2];
            a[3] += (p % w) as f64;
            a[4] += (p / w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                for i in 0..5 {
                    c[i] = a[i] / a[5];
                }
            }
        }
    }

    let min_size = ((step * step / 4.0) as usize).max(1);
    Ok(enforce_connectivity(&labels, w, h, min_size))
}

/// Give every 4-connected fragment its own label, merge fragments below
/// `min_size` pixels into their largest adjacent region and relabel densely
/// in scan order.
fn enforce_connectivity(labels: &[usize], w: usize, h: usize, min_size: usize) -> SuperpixelMap {
    let (comp, nc) = components(labels, w, h);
    let mut size = vec![0usize; nc];
    for &c in &comp {
        size[c] += 1;
    }
    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for y in 0..h {
        for x in 0..w {
            let a = comp[y * w + x];
            if x + 1 < w {
                let b = comp[y * w + x + 1];
                if a != b {
                    adjacent[a].push(b);
                    adjacent[b].push(a);
                }
            }
            if y + 1 < h {
                let b = comp[(y + 1) * w + x];
                if a != b {
                    adjacent[a].push(b);
                    adjacent[b].push(a);
                }
            }
        }
    }
    let mut parent: Vec<usize> = (0..nc).collect();
    let mut total = size.clone();
    for c in 0..nc {
        let root = find(&mut parent, c);
        if total[root] >= min_size {
            continue;
        }
        let mut target: Option<usize> = None;
        let neighbors = std::mem::take(&mut adjacent[c]);
        for &b in &neighbors {
            let rb = find(&mut parent, b);
            if rb == root {
                continue;
            }
            let better = match target {
                None => true,
                Some(t) => total[rb] > total[t] || (total[rb] == total[t] && rb < t),
            };
            if better {
                target = Some(rb);
            }
        }
        if let Some(t) = target {
            parent[root] = t;
            total[t] += total[root];
        }
    }
    let mut dense = vec![usize::MAX; nc];
    let mut next = 0;
    let mut out = Vec::with_capacity(labels.len());
    for &c in &comp {
        let r = find(&mut parent, c);
        if dense[r] == usize::MAX {
            dense[r] = next;
            next += 1;
        }
        out.push(dense[r]);
    }
    let mut sizes = vec![0usize; next];
    for &l in &out {
        sizes[l] += 1;
    }
    SuperpixelMap { width: w, height: h, labels: out, count: next, sizes }
}

fn check_size(img: &Image, map: &SuperpixelMap) -> Result<()> {
    if img.width() != map.width || img.height() != map.height {
        return Err(precondition(format!(
            "label map {}x{} does not match image {}x{}",
            map.width,
            map.height,
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Mean RGB of each superpixel, `M x 3`.
pub fn superpixel_features(img: &Image, map: &SuperpixelMap) -> Result<Tensor> {
    check_size(img, map)?;
    let n = map.width * map.height;
    let px = img.pixels().data();
    let mut sums = vec![0.0; map.count * 3];
    for (p, &l) in map.labels.iter().enumerate() {
        for c in 0..3 {
            sums[l * 3 + c] += px[c * n + p];
        }
    }
    for (l, &s) in map.sizes.iter().enumerate() {
        for c in 0..3 {
            sums[l * 3 + c] /= s as f64;
        }
    }
    Ok(Tensor::new(&[map.count, 3], sums)?)
}

/// Mean pixel position `(x, y)` of each superpixel scaled by `(W-1, H-1)`.
pub fn superpixel_centroids(map: &SuperpixelMap) -> Tensor {
    let mut sums = vec![0.0; map.count * 2];
    for (p, &l) in map.labels.iter().enumerate() {
        sums[l * 2] += (p % map.width) as f64;
        sums[l * 2 + 1] += (p / map.width) as f64;
    }
    let sx = (map.width.max(2) - 1) as f64;
    let sy = (map.height.max(2) - 1) as f64;
    for (l, &s) in map.sizes.iter().enumerate() {
        sums[l * 2] /= s as f64 * sx;
        sums[l * 2 + 1] /= s as f64 * sy;
    }
    Tensor::new(&[map.count, 2], sums).expect("non-empty map")
}

/// Dense Gaussian affinity `exp(-|ci - cj|^2 / sigma2)`.
pub fn superpixel_adjacency(centroids: &Tensor) -> Result<Tensor> {
    let (m, d) = centroids.dims2("superpixel_adjacency")?;
    let c = centroids.data();
    Ok(Tensor::from_fn(&[m, m], |e| {
        let (i, j) = (e / m, e % m);
        let d2: f64 = (0..d).map(|k| (c[i * d + k] - c[j * d + k]).powi(2)).sum();
        (-d2 / SIGMA2).exp()
    }))
}

/// Symmetric normalization `D^-1/2 A D^-1/2` with `D` the row sums.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let (m, m2) = a.dims2("normalize_adjacency")?;
    if m != m2 {
        return Err(precondition(format!("adjacency must be square, got {m}x{m2}")));
    }
    let ad = a.data();
    let mut inv_sqrt = Vec::with_capacity(m);
    for i in 0..m {
        let s: f64 = ad[i * m..(i + 1) * m].iter().sum();
        if s <= 0.0 {
            return Err(precondition(format!("adjacency row {i} sums to zero")));
        }
        inv_sqrt.push(1.0 / s.sqrt());
    }
    Ok(Tensor::from_fn(&[m, m], |e| {
        let (i, j) = (e / m, e % m);
        inv_sqrt[i] * inv_sqrt[j] * ad[e]
    }))
}

/// Superpixel graph of one image, ready for the superpixel GCN.
#[derive(Clone, Debug)]
pub struct SuperpixelGraph {
    pub map: SuperpixelMap,
    pub features: Tensor,
    pub centroids: Tensor,
    pub adjacency: Tensor,
    pub normalized: Tensor,
}

impl SuperpixelGraph {
    pub fn build(img: &Image, map: SuperpixelMap) -> Result<Self> {
        let features = superpixel_features(img, &map)?;
        let centroids = superpixel_centroids(&map);
        let adjacency = superpixel_adjacency(&centroids)?;
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(SuperpixelGraph { map, features, centroids, adjacency, normalized })
    }

    pub fn segment(img: &Image, params: &SlicParams) -> Result<Self> {
        Self::build(img, slic_segment(img, params)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tone(h: usize, w: usize, split: usize) -> Image {
        Image::from_fn(h, w, |_, x| if x < split { [0.1, 0.2, 0.1] } else { [0.9, 0.8, 0.7] }).unwrap()
    }

    #[test]
    fn uniform_image_gives_grid() {
        let img = Image::from_fn(64, 64, |_, _| [0.4, 0.4, 0.4]).unwrap();
        let map = slic_segment(&img, &SlicParams { m_target: 16, ..SlicParams::default() }).unwrap();
        assert_eq!(map.count(), 16);
        // every cell is an axis-aligned rectangle of roughly equal area
        let mut bounds = vec![(64, 64, 0, 0); 16];
        for y in 0..64 {
            for x in 0..64 {
                let b = &mut bounds[map.label(y, x)];
                *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
            }
        }
        for (l, b) in bounds.iter().enumerate() {
            assert_eq!((b.2 - b.0 + 1) * (b.3 - b.1 + 1), map.sizes()[l]);
            assert!((192..=320).contains(&map.sizes()[l]), "{:?}", map.sizes());
        }
    }

    #[test]
    fn two_tone_split_follows_boundary() {
        let img = two_tone(64, 64, 32);
        let map = slic_segment(&img, &SlicParams { m_target: 2, ..SlicParams::default() }).unwrap();
        assert_eq!(map.count(), 2);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(map.label(y, x), usize::from(x >= 32));
            }
        }
    }

    #[test]
    fn precondition_on_target_count() {
        let img = two_tone(32, 32, 16);
        assert!(slic_segment(&img, &SlicParams { m_target: 1, ..SlicParams::default() }).is_err());
        assert!(slic_segment(&img, &SlicParams { m_target: 65, ..SlicParams::default() }).is_err());
    }

    #[test]
    fn feature_and_centroid_fixtures() {
        let map = SuperpixelMap::from_labels(vec![0, 0, 1, 1], 2, 2).unwrap();
        let c = superpixel_centroids(&map);
        assert_eq!(c.row(0), &[0.5, 0.0]);
        assert_eq!(c.row(1), &[0.5, 1.0]);
        let whole = SuperpixelMap::from_labels(vec![0; 9], 3, 3).unwrap();
        assert_eq!(superpixel_centroids(&whole).row(0), &[0.5, 0.5]);
        let single = SuperpixelMap::from_labels(vec![0, 1, 1, 1], 2, 2).unwrap();
        assert_eq!(superpixel_centroids(&single).row(0), &[0.0, 0.0]);

        let img = Image::from_fn(32, 32, |y, x| {
            if y == 0 && x == 1 {
                [0.2, 0.4, 0.6]
            } else {
                [0.0, 0.0, 0.0]
            }
        })
        .unwrap();
        let mut labels = vec![1usize; 32 * 32];
        labels[0] = 0;
        labels[1] = 0;
        let map = SuperpixelMap::from_labels(labels, 32, 32).unwrap();
        let f = superpixel_features(&img, &map).unwrap();
        let want = [0.1, 0.2, 0.3];
        for (a, b) in f.row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adjacency_fixtures() {
        let c = Tensor::new(&[3, 2], vec![0.0, 0.0, SIGMA2.sqrt(), 0.0, 0.0, 0.0]).unwrap();
        let a = superpixel_adjacency(&c).unwrap();
        assert!((a.data()[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(a.data()[2], 1.0);
        assert_eq!(a.data()[1], a.data()[3]);
        assert_eq!(normalize_adjacency(&Tensor::eye(4)).unwrap(), Tensor::eye(4));
        assert!(normalize_adjacency(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn from_labels_rejects_disconnected_and_gaps() {
        assert!(SuperpixelMap::from_labels(vec![0, 1, 0], 3, 1).is_err());
        assert!(SuperpixelMap::from_labels(vec![0, 2, 2], 3, 1).is_err());
    }
}
