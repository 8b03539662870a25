//! Synthetic dataset generation: determinism, annotation counts, and boxes
//! re-derived from the written masks.

use std::fs;
use std::path::Path;

use spgnn_eval::GroundTruth;
use spgnn_harness::synth::{synth_generate, DefectClass, SyntheticSpec};

/// Independent binary PGM reader: header tokens, then 1- or 2-byte samples.
fn read_pgm(bytes: &[u8]) -> (Vec<usize>, usize, usize) {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    let (w, h, maxval): (usize, usize, usize) =
        (fields[1].parse().unwrap(), fields[2].parse().unwrap(), fields[3].parse().unwrap());
    let body = &bytes[pos + 1..];
    let labels = if maxval > 255 {
        body.chunks_exact(2).map(|c| (c[0] as usize) << 8 | c[1] as usize).collect()
    } else {
        body.iter().map(|&b| b as usize).collect()
    };
    (labels, w, h)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out.push(("annotations.json".into(), fs::read(dir.join("annotations.json")).unwrap()));
    out
}

#[test]
fn same_seed_writes_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SyntheticSpec { seed: 11, images: 4, ..SyntheticSpec::default() };
    synth_generate(&spec, a.path()).unwrap();
    synth_generate(&spec, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    let c = tempfile::tempdir().unwrap();
    synth_generate(&SyntheticSpec { seed: 12, ..spec }, c.path()).unwrap();
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn default_dataset_has_every_image_annotated() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_generate(&SyntheticSpec::default(), dir.path()).unwrap();
    let gt = GroundTruth::load(dir.path().join("annotations.json")).unwrap();
    assert_eq!(gt.images.len(), 8);
    assert!(gt.annotations.len() >= 8);
    assert_eq!(gt.categories.len(), DefectClass::ALL.len());
    for img in &gt.images {
        assert!(gt.annotations_for(img.id).count() >= 1, "image {}", img.id);
    }
    assert_eq!(samples.len(), 8);
}

#[test]
fn annotations_match_boxes_scanned_from_masks() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { seed: 3, images: 6, max_defects: 3, ..SyntheticSpec::default() };
    synth_generate(&spec, dir.path()).unwrap();
    let gt = GroundTruth::load(dir.path().join("annotations.json")).unwrap();
    for img in &gt.images {
        let name = img.file_name.as_ref().unwrap().replace(".ppm", ".pgm");
        let (mask, w, h) = read_pgm(&fs::read(dir.path().join("masks").join(name)).unwrap());
        assert_eq!((w, h), (img.width as usize, img.height as usize));
        let anns: Vec<_> = gt.annotations_for(img.id).collect();
        let labels = mask.iter().copied().max().unwrap();
        assert_eq!(labels, anns.len());
        for (k, ann) in anns.iter().enumerate() {
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for (p, &l) in mask.iter().enumerate() {
                if l == k + 1 {
                    let (x, y) = (p % w, p / w);
                    (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
                }
            }
            let want = [x0 as f64, y0 as f64, (x1 + 1 - x0) as f64, (y1 + 1 - y0) as f64];
            assert_eq!(ann.bbox, want, "image {} defect {k}", img.id);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for spec in [
        SyntheticSpec { size: 64, ..SyntheticSpec::default() },
        SyntheticSpec { min_defects: 0, ..SyntheticSpec::default() },
        SyntheticSpec { min_defects: 3, max_defects: 2, ..SyntheticSpec::default() },
        SyntheticSpec { images: 0, ..SyntheticSpec::default() },
    ] {
        assert!(synth_generate(&spec, dir.path()).is_err(), "{spec:?}");
    }
}
