//! The complete two-stage detector and its per-image loss.

use serde::{Deserialize, Serialize};
use spgnn_core::{ParamBuilder, ParamStore, Rng, Tape, Tensor, Var};
use spgnn_eval::BBox;

use crate::box_coder::BoxCoder;
use crate::detect_head::{
    assign_targets, pool_rois, postprocess, sample_assignments, Assignment, BoxHead, Detection, HeadConfig,
};
use crate::error::{precondition, ModelError, Result};
use crate::image::Image;
use crate::msgcn::{FpnNeck, Msgcn, MsgcnConfig};
use crate::patch_graph::check_divisible;
use crate::sprpn::{
    decode_and_select, generate_anchors, Anchors, FusionMode, Proposal, RpnConfig, RpnHead, SelectParams,
    SuperpixelBranch, ANCHOR_RATIOS, ANCHOR_SIZES, SP_HIDDEN_DIM, STRIDES,
};
use crate::superpixel::{SlicParams, SuperpixelGraph};

/// Smooth-L1 transition point of the proposal regression loss.
pub const RPN_BETA: f64 = 1.0 / 9.0;
/// Smooth-L1 transition point of the head regression loss.
pub const HEAD_BETA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperpixelConfig {
    pub enabled: bool,
    pub m_target: usize,
    pub compactness: f64,
    pub iters: usize,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        let s = SlicParams::default();
        SuperpixelConfig {
            enabled: true,
            m_target: s.m_target,
            compactness: s.compactness,
            iters: s.iters,
        }
    }
}

impl SuperpixelConfig {
    pub fn slic(&self) -> SlicParams {
        SlicParams {
            m_target: self.m_target,
            compactness: self.compactness,
            iters: self.iters,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub model: MsgcnConfig,
    pub superpixel: SuperpixelConfig,
    pub fusion: FusionConfig,
    pub rpn: RpnConfig,
    pub head: HeadConfig,
}

impl DetectorConfig {
    /// Reduced widths and depths for single-core training.
    pub fn desk() -> Self {
        let model = MsgcnConfig::desk();
        let head = HeadConfig {
            hidden_dim: model.scaled(HeadConfig::default().hidden_dim),
            ..HeadConfig::default()
        };
        DetectorConfig { model, head, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.head.num_classes == 0 {
            return bad("head.num_classes must be at least 1");
        }
        if self.head.hidden_dim == 0 || self.head.roi_size == 0 || self.head.sampling_ratio == 0 {
            return bad("head sizes must be positive");
        }
        for (name, pos, neg) in [
            ("rpn", self.rpn.pos_iou, self.rpn.neg_iou),
            ("head", self.head.pos_iou, self.head.neg_iou),
        ] {
            if !(0.0 < neg && neg <= pos && pos < 1.0) {
                return Err(ModelError::Config(format!("{name} IoU thresholds need 0 < neg_iou <= pos_iou < 1")));
            }
        }
        if self.rpn.batch_size == 0 || self.head.batch_size == 0 {
            return bad("sampling batch sizes must be positive");
        }
        for f in [self.rpn.positive_fraction, self.head.positive_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return bad("positive_fraction must be in [0, 1]");
            }
        }
        if self.rpn.pre_nms_top == 0 || self.rpn.post_nms_top == 0 {
            return bad("rpn top-k counts must be positive");
        }
        Ok(())
    }
}

/// Ground truth of one training image. Classes are in `1..=M`.
#[derive(Clone, Debug, Default)]
pub struct Targets {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

/// Scalar values of the four loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.rpn_cls += o.rpn_cls;
        self.rpn_reg += o.rpn_reg;
        self.head_cls += o.head_cls;
        self.head_reg += o.head_reg;
        self.total += o.total;
    }

    pub fn scale(&mut self, s: f64) {
        self.rpn_cls *= s;
        self.rpn_reg *= s;
        self.head_cls *= s;
        self.head_reg *= s;
        self.total *= s;
    }
}

/// Differentiable loss of one image plus its scalar breakdown.
pub struct ImageLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Msgcn,
    pub neck: FpnNeck,
    pub superpixel: Option<SuperpixelBranch>,
    pub rpn: RpnHead,
    pub head: BoxHead,
}

impl Detector {
    /// Register every parameter on `pb`. Top-level scopes are `backbone`,
    /// `neck`, `superpixel`, `rpn` and `head`.
    pub fn new(pb: &mut ParamBuilder, config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.model.pyramid_dim();
        let backbone = pb.scope("backbone", |pb| Msgcn::new(pb, &config.model))?;
        let neck = pb.scope("neck", |pb| FpnNeck::new(pb, &config.model.dims(), dim));
        let superpixel = config.superpixel.enabled.then(|| {
            let hidden = config.model.scaled(SP_HIDDEN_DIM);
            pb.scope("superpixel", |pb| SuperpixelBranch::new(pb, hidden, dim, config.fusion.mode))
        });
        let rpn = pb.scope("rpn", |pb| RpnHead::new(pb, dim));
        let roi = config.head.roi_size;
        let head = pb.scope("head", |pb| {
            BoxHead::new(pb, dim * roi * roi, config.head.hidden_dim, config.head.num_classes)
        });
        Ok(Detector {
            config: config.clone(),
            backbone,
            neck,
            superpixel,
            rpn,
            head,
        })
    }

    /// Detector with freshly initialized parameters.
    pub fn build(config: &DetectorConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut pb = ParamBuilder::new();
        let det = Detector::new(&mut pb, config)?;
        Ok((det, pb.build(&mut Rng::seed(seed))))
    }

    /// Superpixel graph for `img` when the superpixel branch is enabled.
    pub fn prepare(&self, img: &Image) -> Result<Option<SuperpixelGraph>> {
        if self.superpixel.is_none() {
            return Ok(None);
        }
        Ok(Some(SuperpixelGraph::segment(img, &self.config.superpixel.slic())?))
    }

    /// Pyramid `P2..P5` fed to the proposal and box heads.
    pub fn pyramid(&self, tape: &Tape, store: &ParamStore, img: &Image, graph: Option<&SuperpixelGraph>) -> Result<Vec<Var>> {
        check_divisible(img.height(), img.width())?;
        let x = tape.constant(img.pixels().clone());
        let stages = self.backbone.forward(tape, store, &x)?;
        let f = self.neck.forward(tape, store, &stages)?;
        match &self.superpixel {
            None => Ok(f),
            Some(branch) => {
                let owned;
                let g = match graph {
                    Some(g) => g,
                    None => {
                        owned = SuperpixelGraph::segment(img, &self.config.superpixel.slic())?;
                        &owned
                    }
                };
                branch.forward(tape, store, &f, g)
            }
        }
    }

    pub fn anchors(&self, img: &Image) -> Anchors {
        let shapes: Vec<(usize, usize)> =
            STRIDES.iter().map(|s| (img.height() / s, img.width() / s)).collect();
        generate_anchors(&shapes, &ANCHOR_SIZES, &ANCHOR_RATIOS)
    }

    fn proposals(&self, img: &Image, logits: &Var, deltas: &Var, anchors: &Anchors) -> Result<Vec<Proposal>> {
        decode_and_select(
            logits.value().data(),
            deltas.value().data(),
            &anchors.boxes,
            img.width() as f64,
            img.height() as f64,
            &SelectParams::from(&self.config.rpn),
        )
    }

    /// Training loss of one image. `rng` drives anchor and RoI sampling.
    pub fn loss(
        &self,
        tape: &Tape,
        store: &ParamStore,
        img: &Image,
        graph: Option<&SuperpixelGraph>,
        targets: &Targets,
        rng: &mut Rng,
    ) -> Result<ImageLoss> {
        if targets.boxes.len() != targets.classes.len() {
            return Err(precondition("targets need one class per box"));
        }
        let m = self.config.head.num_classes;
        if let Some(&c) = targets.classes.iter().find(|&&c| c == 0 || c > m) {
            return Err(precondition(format!("class {c} outside 1..={m}")));
        }
        let rc = &self.config.rpn;
        let hc = &self.config.head;
        let levels = self.pyramid(tape, store, img, graph)?;
        let (logits, deltas) = self.rpn.forward(tape, store, &levels)?;
        let anchors = self.anchors(img);
        let zero = || tape.constant(Tensor::scalar(0.0));

        let labels = assign_targets(&anchors.boxes, &targets.boxes, rc.pos_iou, rc.neg_iou, true)?;
        let (pos, neg) = sample_assignments(&labels, rc.batch_size, rc.positive_fraction, rng);
        let sampled: Vec<usize> = pos.iter().chain(&neg).copied().collect();
        let bce_targets: Vec<f64> = (0..sampled.len()).map(|i| if i < pos.len() { 1.0 } else { 0.0 }).collect();
        let rpn_cls = logits.gather_rows(&sampled)?.bce_with_logits(&bce_targets)?;
        let rpn_reg = if pos.is_empty() {
            zero()
        } else {
            let t: Vec<f64> = pos
                .iter()
                .flat_map(|&i| match labels[i] {
                    Assignment::Positive(g) => BoxCoder::RPN.encode(&targets.boxes[g], &anchors.boxes[i]),
                    _ => unreachable!("sampled positive"),
                })
                .collect();
            let t = Tensor::new(&[pos.len(), 4], t)?;
            deltas.gather_rows(&pos)?.smooth_l1(&t, RPN_BETA)?
        };

        let mut boxes: Vec<BBox> = self
            .proposals(img, &logits, &deltas, &anchors)?
            .into_iter()
            .map(|p| p.bbox)
            .collect();
        boxes.extend(targets.boxes.iter().copied());
        let labels = assign_targets(&boxes, &targets.boxes, hc.pos_iou, hc.neg_iou, false)?;
        let (pos, neg) = sample_assignments(&labels, hc.batch_size, hc.positive_fraction, rng);
        let rois: Vec<BBox> = pos.iter().chain(&neg).map(|&i| boxes[i]).collect();
        let (head_cls, head_reg) = if rois.is_empty() {
            (zero(), zero())
        } else {
            let feats = pool_rois(&levels, &rois, hc.roi_size, hc.sampling_ratio)?;
            let (cls, reg) = self.head.forward(tape, store, &feats)?;
            let matched: Vec<usize> = pos
                .iter()
                .map(|&i| match labels[i] {
                    Assignment::Positive(g) => g,
                    _ => unreachable!("sampled positive"),
                })
                .collect();
            let cls_targets: Vec<usize> = matched
                .iter()
                .map(|&g| targets.classes[g])
                .chain(std::iter::repeat_n(0, neg.len()))
                .collect();
            let head_cls = cls.softmax_cross_entropy(&cls_targets)?;
            let head_reg = if pos.is_empty() {
                zero()
            } else {
                let width = 4 * m;
                let mut idx = Vec::with_capacity(4 * pos.len());
                let mut t = Vec::with_capacity(4 * pos.len());
                for (row, (&i, &g)) in pos.iter().zip(&matched).enumerate() {
                    let c = targets.classes[g];
                    idx.extend((0..4).map(|j| row * width + 4 * (c - 1) + j));
                    t.extend(BoxCoder::HEAD.encode(&targets.boxes[g], &boxes[i]));
                }
                let t = Tensor::new(&[pos.len(), 4], t)?;
                reg.gather(idx, &[pos.len(), 4])?.smooth_l1(&t, HEAD_BETA)?
            };
            (head_cls, head_reg)
        };

        let total = Var::sum_all(&[rpn_cls.clone(), rpn_reg.clone(), head_cls.clone(), head_reg.clone()])?;
        let breakdown = LossBreakdown {
            rpn_cls: rpn_cls.item(),
            rpn_reg: rpn_reg.item(),
            head_cls: head_cls.item(),
            head_reg: head_reg.item(),
            total: total.item(),
        };
        if !breakdown.total.is_finite() {
            return Err(ModelError::Numeric(spgnn_core::Error::NonFinite { op: "detection_loss" }));
        }
        Ok(ImageLoss { total, breakdown })
    }

    /// Detections for one image whose sides are multiples of 32.
    pub fn detect(&self, store: &ParamStore, img: &Image, graph: Option<&SuperpixelGraph>) -> Result<Vec<Detection>> {
        let tape = Tape::new();
        let levels = self.pyramid(&tape, store, img, graph)?;
        let (logits, deltas) = self.rpn.forward(&tape, store, &levels)?;
        let anchors = self.anchors(img);
        let props: Vec<BBox> = self
            .proposals(img, &logits, &deltas, &anchors)?
            .into_iter()
            .map(|p| p.bbox)
            .collect();
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let hc = &self.config.head;
        let feats = pool_rois(&levels, &props, hc.roi_size, hc.sampling_ratio)?;
        let (cls, reg) = self.head.forward(&tape, store, &feats)?;
        postprocess(&cls.value(), &reg.value(), &props, img.width() as f64, img.height() as f64, hc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DetectorConfig {
        let mut c = DetectorConfig::desk();
        c.superpixel.m_target = 16;
        c.head.hidden_dim = 16;
        c
    }

    fn blob_image() -> (Image, Targets) {
        let img = Image::from_fn(64, 64, |y, x| {
            if (20..44).contains(&y) && (16..48).contains(&x) {
                [0.9, 0.3, 0.2]
            } else {
                [0.1, 0.1, 0.15]
            }
        })
        .unwrap();
        let t = Targets {
            boxes: vec![BBox::new(16.0, 20.0, 48.0, 44.0)],
            classes: vec![2],
        };
        (img, t)
    }

    #[test]
    fn loss_is_finite_and_reaches_every_group() {
        for mode in [FusionMode::Concat, FusionMode::Add] {
            let mut cfg = tiny_config();
            cfg.fusion.mode = mode;
            let (det, store) = Detector::build(&cfg, 0).unwrap();
            let (img, t) = blob_image();
            let tape = Tape::new();
            let l = det.loss(&tape, &store, &img, None, &t, &mut Rng::seed(1)).unwrap();
            assert!(l.breakdown.total.is_finite());
            let grads = tape.gradients(&l.total).unwrap();
            for group in ["backbone.", "neck.", "superpixel.", "rpn.", "head."] {
                let norm: f64 = grads
                    .iter()
                    .filter(|(id, _)| store.get(*id).name.starts_with(group))
                    .map(|(_, g)| g.max_abs())
                    .fold(0.0, f64::max);
                assert!(norm > 0.0, "{mode:?}: no gradient reaches {group}");
            }
            let w1 = det.superpixel.as_ref().unwrap().gcn.w1;
            assert!(grads.get(w1).is_some_and(|g| g.max_abs() > 0.0));
        }
    }

    #[test]
    fn no_ground_truth_means_zero_regression() {
        let (det, store) = Detector::build(&tiny_config(), 3).unwrap();
        let (img, _) = blob_image();
        let tape = Tape::new();
        let l = det.loss(&tape, &store, &img, None, &Targets::default(), &mut Rng::seed(0)).unwrap();
        assert_eq!(l.breakdown.rpn_reg, 0.0);
        assert_eq!(l.breakdown.head_reg, 0.0);
        assert!(l.breakdown.rpn_cls > 0.0 && l.breakdown.head_cls > 0.0);
    }

    #[test]
    fn superpixel_off_has_no_branch() {
        let mut cfg = tiny_config();
        cfg.superpixel.enabled = false;
        let mut pb = ParamBuilder::new();
        let det = Detector::new(&mut pb, &cfg).unwrap();
        assert!(det.superpixel.is_none());
        assert!(pb.specs().iter().all(|s| !s.name.starts_with("superpixel.")));
        let store = pb.build(&mut Rng::seed(0));
        let (img, _) = blob_image();
        let dets = det.detect(&store, &img, None).unwrap();
        assert!(dets.len() <= 100);
        for d in dets {
            assert!(d.bbox.is_valid() && (1..=5).contains(&d.class));
        }
    }

    #[test]
    fn rejects_bad_targets_and_sizes() {
        let (det, store) = Detector::build(&tiny_config(), 0).unwrap();
        let (img, mut t) = blob_image();
        t.classes[0] = 6;
        let tape = Tape::new();
        assert!(det.loss(&tape, &store, &img, None, &t, &mut Rng::seed(0)).is_err());
        let odd = Image::from_fn(48, 64, |_, _| [0.5; 3]).unwrap();
        assert!(det.detect(&store, &odd, None).is_err());
    }
}
