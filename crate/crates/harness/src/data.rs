//! Training and evaluation samples loaded from disk or generated in memory.

use std::path::Path;

use spgnn_eval::GroundTruth;
use spgnn_model::patch_graph::MAX_STRIDE;
use spgnn_model::{Image, Targets};

use crate::error::{HarnessError, Result};
use crate::synth::{ground_truth, SyntheticSample};

#[derive(Clone, Debug)]
pub struct Sample {
    pub image_id: u64,
    pub file_name: String,
    /// Image padded on the bottom and right to a multiple of 32.
    pub image: Image,
    /// Size before padding.
    pub width: usize,
    pub height: usize,
    pub targets: Targets,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub ground_truth: GroundTruth,
}

fn sample(image_id: u64, file_name: String, image: &Image, gt: &GroundTruth, num_classes: usize) -> Result<Sample> {
    let (width, height) = (image.width(), image.height());
    let (padded, _) = image.pad_to_multiple(MAX_STRIDE)?;
    let mut targets = Targets::default();
    for a in gt.annotations_for(image_id) {
        let c = a.category_id as usize;
        if c == 0 || c > num_classes {
            return Err(HarnessError::Data(format!(
                "annotation on image {image_id} has category {c} outside 1..={num_classes}"
            )));
        }
        let b = a.corner_box();
        if !b.is_valid() {
            return Err(HarnessError::Data(format!("annotation on image {image_id} has an empty box")));
        }
        targets.boxes.push(b);
        targets.classes.push(c);
    }
    Ok(Sample { image_id, file_name, image: padded, width, height, targets })
}

impl Dataset {
    /// Load `annotations.json` and `images/<file_name>` from `dir`.
    pub fn load(dir: &Path, num_classes: usize) -> Result<Dataset> {
        let gt = GroundTruth::load(dir.join("annotations.json"))?;
        let mut samples = Vec::with_capacity(gt.images.len());
        for info in &gt.images {
            let name = info
                .file_name
                .clone()
                .ok_or_else(|| HarnessError::Data(format!("image {} has no file_name", info.id)))?;
            let image = Image::load_ppm(dir.join("images").join(&name))?;
            if (image.width(), image.height()) != (info.width as usize, info.height as usize) {
                return Err(HarnessError::Data(format!("{name}: size differs from annotations.json")));
            }
            samples.push(sample(info.id, name, &image, &gt, num_classes)?);
        }
        if samples.is_empty() {
            return Err(HarnessError::Data(format!("{} lists no images", dir.display())));
        }
        Ok(Dataset { samples, ground_truth: gt })
    }

    pub fn from_synthetic(samples: &[SyntheticSample], num_classes: usize) -> Result<Dataset> {
        let gt = ground_truth(samples);
        let samples = gt
            .images
            .iter()
            .zip(samples)
            .map(|(info, s)| sample(info.id, s.file_name.clone(), &s.image, &gt, num_classes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples, ground_truth: gt })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
