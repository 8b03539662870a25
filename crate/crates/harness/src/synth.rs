//! Deterministic synthetic defect images.
//!
//! Each image shows a light, slightly skewed blade on a dark textured
//! background with one or two defects drawn inside the blade. Boxes are the
//! tight pixel bounds of each defect's visible mask, and the mask itself is
//! written next to the image so the boxes can be re-derived.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spgnn_core::Rng;
use spgnn_eval::{Annotation, BBox, Category, GroundTruth, ImageInfo};
use spgnn_model::image::encode_pgm16;
use spgnn_model::Image;

use crate::error::{io_err, HarnessError, Result};

/// Defect archetypes; the discriminant is the category id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectClass {
    Crack = 1,
    Nick = 2,
    Broken = 3,
    Burned = 4,
    Overheated = 5,
}

impl DefectClass {
    pub const ALL: [DefectClass; 5] = [
        DefectClass::Crack,
        DefectClass::Nick,
        DefectClass::Broken,
        DefectClass::Burned,
        DefectClass::Overheated,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::Crack => "crack",
            DefectClass::Nick => "nick",
            DefectClass::Broken => "broken",
            DefectClass::Burned => "burned",
            DefectClass::Overheated => "overheated",
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id.checked_sub(1)?).copied()
    }
}

/// Category list shared by every generated dataset.
pub fn categories() -> Vec<Category> {
    DefectClass::ALL
        .iter()
        .map(|c| Category { id: c.id() as u64, name: c.name().to_string() })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Side length of the square images.
    pub size: usize,
    pub images: usize,
    pub min_defects: usize,
    pub max_defects: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { seed: 0, size: 224, images: 8, min_defects: 1, max_defects: 2 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.size < 96 {
            return bad(format!("synthetic image size {} is below 96", self.size));
        }
        if self.images == 0 {
            return bad("synthetic dataset needs at least one image".into());
        }
        if self.min_defects == 0 || self.min_defects > self.max_defects || self.max_defects > 4 {
            return bad("defects per image must satisfy 1 <= min <= max <= 4".into());
        }
        Ok(())
    }
}

/// One generated image with its defect mask (`0` background, `i + 1` for
/// defect `i`) and the defects' classes and boxes.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub file_name: String,
    pub image: Image,
    pub mask: Vec<usize>,
    pub defects: Vec<(DefectClass, BBox)>,
}

type Pt = (f64, f64);

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Inside-or-on test for a convex polygon of either orientation.
fn in_convex(poly: &[Pt], p: Pt) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let c = cross(poly[i], poly[(i + 1) % poly.len()], p);
        if c != 0.0 {
            if sign == 0.0 {
                sign = c.signum();
            } else if c.signum() != sign {
                return false;
            }
        }
    }
    true
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

enum Shape {
    Polyline(Vec<Pt>, f64),
    Polygon(Vec<Pt>),
    Circles(Vec<(Pt, f64)>),
    Ellipse { c: Pt, rx: f64, ry: f64, angle: f64 },
}

impl Shape {
    fn contains(&self, p: Pt) -> bool {
        match self {
            Shape::Polyline(pts, half) => pts.windows(2).any(|s| seg_dist(p, s[0], s[1]) <= *half),
            Shape::Polygon(poly) => in_convex(poly, p),
            Shape::Circles(cs) => cs.iter().any(|&(c, r)| (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r),
            Shape::Ellipse { c, rx, ry, angle } => {
                let (s, co) = angle.sin_cos();
                let (dx, dy) = (p.0 - c.0, p.1 - c.1);
                let u = dx * co + dy * s;
                let v = -dx * s + dy * co;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Canvas {
    size: usize,
    blade: Vec<Pt>,
    background: Vec<[f64; 3]>,
    pixels: Vec<[f64; 3]>,
    inside: Vec<bool>,
}

impl Canvas {
    fn new(size: usize, rng: &mut Rng) -> Self {
        let s = size as f64;
        let j = |rng: &mut Rng| rng.range(-0.05, 0.05) * s;
        let blade = vec![
            (rng.range(0.12, 0.2) * s + j(rng), rng.range(0.06, 0.12) * s),
            (rng.range(0.8, 0.88) * s + j(rng), rng.range(0.06, 0.12) * s),
            (rng.range(0.8, 0.88) * s + j(rng), rng.range(0.88, 0.94) * s),
            (rng.range(0.12, 0.2) * s + j(rng), rng.range(0.88, 0.94) * s),
        ];
        let phase = rng.range(0.0, std::f64::consts::TAU);
        let (fx, fy) = (rng.range(0.1, 0.2), rng.range(0.05, 0.1));
        let shade = rng.range(0.6, 0.7);
        let n = size * size;
        let mut background = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n);
        let mut inside = Vec::with_capacity(n);
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let v = 0.1 + 0.04 * (fx * xf + fy * yf + phase).sin() + 0.03 * rng.uniform();
                let bg = [v, v * 1.05, v * 1.15];
                let p = (xf + 0.5, yf + 0.5);
                let ins = in_convex(&blade, p);
                let px = if ins {
                    let b = shade + 0.12 * xf / s + 0.02 * rng.uniform();
                    [b, b * 0.97, b * 0.92]
                } else {
                    bg
                };
                background.push(bg);
                pixels.push(px);
                inside.push(ins);
            }
        }
        Canvas { size, blade, background, pixels, inside }
    }

    fn centroid(&self) -> Pt {
        let n = self.blade.len() as f64;
        let (sx, sy) = self.blade.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        (sx / n, sy / n)
    }

    fn random_inside(&self, rng: &mut Rng, margin: f64) -> Pt {
        let s = self.size as f64;
        loop {
            let p = (rng.range(margin, s - margin), rng.range(margin, s - margin));
            if in_convex(&self.blade, p) {
                return p;
            }
        }
    }

    fn propose(&self, class: DefectClass, rng: &mut Rng) -> Shape {
        match class {
            DefectClass::Crack => {
                let mut p = self.random_inside(rng, 30.0);
                let mut angle = rng.range(0.0, std::f64::consts::TAU);
                let mut pts = vec![p];
                for _ in 0..rng.index(3, 5) {
                    angle += rng.range(-0.7, 0.7);
                    let len = rng.range(10.0, 18.0);
                    p = (p.0 + len * angle.cos(), p.1 + len * angle.sin());
                    pts.push(p);
                }
                Shape::Polyline(pts, rng.range(1.0, 1.6))
            }
            DefectClass::Nick => {
                let (a, b) = if rng.bernoulli(0.5) {
                    (self.blade[0], self.blade[3])
                } else {
                    (self.blade[1], self.blade[2])
                };
                let t = rng.range(0.2, 0.8);
                let p = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
                let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                let e = ((b.0 - a.0) / len, (b.1 - a.1) / len);
                let c = self.centroid();
                let mut n = (-e.1, e.0);
                if (c.0 - p.0) * n.0 + (c.1 - p.1) * n.1 < 0.0 {
                    n = (-n.0, -n.1);
                }
                let (hw, depth) = (rng.range(9.0, 14.0), rng.range(14.0, 22.0));
                Shape::Polygon(vec![
                    (p.0 + e.0 * hw - n.0 * 4.0, p.1 + e.1 * hw - n.1 * 4.0),
                    (p.0 + n.0 * depth, p.1 + n.1 * depth),
                    (p.0 - e.0 * hw - n.0 * 4.0, p.1 - e.1 * hw - n.1 * 4.0),
                ])
            }
            DefectClass::Broken => {
                let k = rng.index(0, 4);
                let c = self.blade[k];
                let a = self.blade[(k + 1) % 4];
                let b = self.blade[(k + 3) % 4];
                let along = |to: Pt, l: f64| {
                    let len = ((to.0 - c.0).powi(2) + (to.1 - c.1).powi(2)).sqrt();
                    (c.0 + (to.0 - c.0) * l / len, c.1 + (to.1 - c.1) * l / len)
                };
                let m = self.centroid();
                let out = (c.0 + (c.0 - m.0) * 0.1, c.1 + (c.1 - m.1) * 0.1);
                Shape::Polygon(vec![out, along(a, rng.range(30.0, 50.0)), along(b, rng.range(30.0, 50.0))])
            }
            DefectClass::Burned => {
                let c = self.random_inside(rng, 24.0);
                let circles = (0..rng.index(3, 6))
                    .map(|_| ((c.0 + rng.range(-8.0, 8.0), c.1 + rng.range(-8.0, 8.0)), rng.range(6.0, 12.0)))
                    .collect();
                Shape::Circles(circles)
            }
            DefectClass::Overheated => Shape::Ellipse {
                c: self.random_inside(rng, 30.0),
                rx: rng.range(14.0, 26.0),
                ry: rng.range(12.0, 20.0),
                angle: rng.range(0.0, std::f64::consts::PI),
            },
        }
    }

    fn paint(&mut self, class: DefectClass, idx: usize, rng: &mut Rng) {
        let p = self.pixels[idx];
        self.pixels[idx] = match class {
            DefectClass::Crack => {
                let v = 0.05 + 0.03 * rng.uniform();
                [v, v * 0.9, v * 0.85]
            }
            DefectClass::Nick | DefectClass::Broken => self.background[idx],
            DefectClass::Burned => {
                let f = 0.8 + 0.4 * rng.uniform();
                [0.22 * f, 0.12 * f, 0.05 * f]
            }
            DefectClass::Overheated => [p[0] * 0.8, p[1] * 0.55, (p[2] * 1.25).min(1.0)],
        };
    }
}

const MIN_DEFECT_PIXELS: usize = 40;
const MIN_DEFECT_SIDE: f64 = 10.0;
const DEFECT_GAP: f64 = 4.0;

/// Tight box over the pixels where `mask == label`, in pixel-edge units.
pub fn mask_box(mask: &[usize], width: usize, label: usize) -> Option<BBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m == label) {
        let (x, y) = (i % width, i / width);
        b = Some(match b {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    b.map(|(x0, y0, x1, y1)| BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<SyntheticSample> {
    let mut rng = Rng::seed(spec.seed).fork(index as u64);
    let size = spec.size;
    let mut canvas = Canvas::new(size, &mut rng);
    let mut mask = vec![0usize; size * size];
    let mut defects: Vec<(DefectClass, BBox)> = Vec::new();
    let wanted = rng.index(spec.min_defects, spec.max_defects + 1);
    let mut attempts = 0;
    while defects.len() < wanted && attempts < 400 {
        attempts += 1;
        let class = DefectClass::ALL[rng.index(0, 5)];
        let shape = canvas.propose(class, &mut rng);
        let pixels: Vec<usize> = (0..size * size)
            .filter(|&i| {
                canvas.inside[i] && shape.contains(((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
            })
            .collect();
        if pixels.len() < MIN_DEFECT_PIXELS {
            continue;
        }
        let label = defects.len() + 1;
        let mut candidate = vec![0usize; size * size];
        pixels.iter().for_each(|&i| candidate[i] = label);
        let b = mask_box(&candidate, size, label).expect("non-empty defect");
        let grown = BBox::new(b.x1 - DEFECT_GAP, b.y1 - DEFECT_GAP, b.x2 + DEFECT_GAP, b.y2 + DEFECT_GAP);
        if b.width().max(b.height()) < MIN_DEFECT_SIDE || defects.iter().any(|(_, o)| grown.intersection(o) > 0.0) {
            continue;
        }
        for &i in &pixels {
            mask[i] = label;
            canvas.paint(class, i, &mut rng);
        }
        defects.push((class, b));
    }
    if defects.len() < spec.min_defects {
        return Err(HarnessError::Data(format!("could not place defects in image {index}")));
    }
    let defects = defects
        .iter()
        .enumerate()
        .map(|(i, &(c, _))| (c, mask_box(&mask, size, i + 1).expect("placed defect is visible")))
        .collect();
    let px = &canvas.pixels;
    let image = Image::from_fn(size, size, |y, x| px[y * size + x].map(quantize))?;
    Ok(SyntheticSample { file_name: format!("img_{index:04}.ppm"), image, mask, defects })
}

/// Generate every sample of `spec`. Samples are independent of each other,
/// so changing `images` never alters earlier samples.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    (0..spec.images).map(|i| generate_one(spec, i)).collect()
}

/// Ground truth for generated samples, image ids starting at 1.
pub fn ground_truth(samples: &[SyntheticSample]) -> GroundTruth {
    let mut gt = GroundTruth { categories: categories(), ..GroundTruth::default() };
    for (i, s) in samples.iter().enumerate() {
        let id = i as u64 + 1;
        gt.images.push(ImageInfo {
            id,
            width: s.image.width() as u32,
            height: s.image.height() as u32,
            file_name: Some(s.file_name.clone()),
        });
        for (c, b) in &s.defects {
            gt.annotations.push(Annotation {
                id: Some(gt.annotations.len() as u64 + 1),
                image_id: id,
                category_id: c.id() as u64,
                bbox: b.to_xywh(),
            });
        }
    }
    gt
}

/// Write `images/*.ppm`, `masks/*.pgm` and `annotations.json` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    for s in samples {
        let p = dir.join("images").join(&s.file_name);
        fs::write(&p, s.image.to_ppm()).map_err(io_err(&p))?;
        let p = dir.join("masks").join(s.file_name.replace(".ppm", ".pgm"));
        let bytes = encode_pgm16(&s.mask, s.image.width(), s.image.height())?;
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    let p = dir.join("annotations.json");
    let json = serde_json::to_vec_pretty(&ground_truth(samples))?;
    fs::write(&p, json).map_err(io_err(&p))
}

/// Generate and write a dataset in one call.
pub fn synth_generate(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<SyntheticSample>> {
    let samples = generate(spec)?;
    write_dataset(dir, &samples)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convex_containment() {
        let sq = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)];
        assert!(in_convex(&sq, (1.0, 1.0)));
        assert!(in_convex(&sq, (2.0, 1.0)));
        assert!(!in_convex(&sq, (2.5, 1.0)));
        let rev: Vec<Pt> = sq.iter().rev().copied().collect();
        assert!(in_convex(&rev, (0.5, 1.5)));
    }

    #[test]
    fn mask_box_is_pixel_tight() {
        let mut m = vec![0; 20];
        m[6] = 3;
        m[13] = 3;
        assert_eq!(mask_box(&m, 5, 3), Some(BBox::new(1.0, 1.0, 4.0, 3.0)));
        assert_eq!(mask_box(&m, 5, 1), None);
    }

    #[test]
    fn every_image_has_a_defect() {
        let spec = SyntheticSpec { images: 6, seed: 11, ..SyntheticSpec::default() };
        let samples = generate(&spec).unwrap();
        assert_eq!(samples.len(), 6);
        for s in &samples {
            assert!((1..=2).contains(&s.defects.len()));
            assert_eq!(s.image.width(), 224);
        }
    }

    #[test]
    fn class_ids_round_trip() {
        for c in DefectClass::ALL {
            assert_eq!(DefectClass::from_id(c.id()), Some(c));
        }
        assert_eq!(DefectClass::from_id(0), None);
        assert_eq!(DefectClass::from_id(6), None);
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(SyntheticSpec { images: 0, ..SyntheticSpec::default() }.validate().is_err());
        assert!(SyntheticSpec { min_defects: 3, max_defects: 2, ..SyntheticSpec::default() }.validate().is_err());
    }
}
