//! Superpixel-perception region proposals: superpixel GCN, mask unpooling,
//! the superpixel pyramid, fusion with the image pyramid, anchors, the RPN
//! head and proposal selection.

use serde::{Deserialize, Serialize};
use spgnn_core::{Init, ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};
use spgnn_eval::{nms, BBox};

use crate::box_coder::BoxCoder;
use crate::error::{precondition, ModelError, Result};
use crate::superpixel::{SuperpixelGraph, SuperpixelMap};

/// Strides of the four pyramid levels.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Anchor side at ratio 1 for each level.
pub const ANCHOR_SIZES: [f64; 4] = [32.0, 64.0, 128.0, 256.0];
/// Anchor height-to-width ratios.
pub const ANCHOR_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
/// Input feature width of the superpixel GCN (mean RGB).
pub const SP_FEATURE_DIM: usize = 3;
/// Hidden width of the superpixel GCN at `width_scale = 1`.
pub const SP_HIDDEN_DIM: usize = 64;

/// How the superpixel pyramid is merged into the image pyramid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Add,
    #[default]
    Concat,
}

impl std::str::FromStr for FusionMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            other => Err(ModelError::Config(format!(
                "unknown fusion mode {other:?} (expected \"add\" or \"concat\")"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpnConfig {
    pub nms_iou: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub min_size: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch_size: usize,
    pub positive_fraction: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            nms_iou: 0.7,
            pre_nms_top: 1000,
            post_nms_top: 300,
            min_size: 2.0,
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch_size: 256,
            positive_fraction: 0.5,
        }
    }
}

/// Two-layer GCN over the superpixel graph:
/// `H1 = gelu(A F W1)`, `H2 = A H1 W2`.
#[derive(Clone, Debug)]
pub struct SpGcn {
    pub w1: ParamId,
    pub w2: ParamId,
    pub hidden: usize,
    pub out: usize,
}

impl SpGcn {
    pub fn new(pb: &mut ParamBuilder, hidden: usize, out: usize) -> Self {
        SpGcn {
            w1: pb.add("w1", &[SP_FEATURE_DIM, hidden], Init::KaimingUniform { fan_in: SP_FEATURE_DIM }),
            w2: pb.add("w2", &[hidden, out], Init::LecunUniform { fan_in: hidden }),
            hidden,
            out,
        }
    }

    /// `normalized` is the `M x M` propagation matrix, `features` is `M x 3`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, normalized: &Tensor, features: &Tensor) -> Result<Var> {
        let (m, m2) = normalized.dims2("sp_gcn")?;
        let (fm, fd) = features.dims2("sp_gcn")?;
        if m != m2 || fm != m || fd != SP_FEATURE_DIM {
            return Err(precondition(format!(
                "superpixel GCN got A {m}x{m2} and features {fm}x{fd}"
            )));
        }
        let a = tape.constant(normalized.clone());
        let af = tape.constant(normalized.matmul(features)?);
        let h1 = af.matmul(&tape.param(store, self.w1))?.gelu()?;
        Ok(a.matmul(&h1)?.matmul(&tape.param(store, self.w2))?)
    }
}

/// Scatter each node's feature row onto its superpixel's pixels:
/// `M x C` to `C x H x W`.
pub fn unpool(features: &Var, map: &SuperpixelMap) -> Result<Var> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != map.count() {
        return Err(precondition(format!(
            "unpool got {shape:?} features for {} superpixels",
            map.count()
        )));
    }
    let c = shape[1];
    let labels = map.labels();
    let n = labels.len();
    let mut idx = Vec::with_capacity(c * n);
    for ch in 0..c {
        idx.extend(labels.iter().map(|&l| l * c + ch));
    }
    Ok(features.gather(idx, &[c, map.height(), map.width()])?)
}

fn conv_params(pb: &mut ParamBuilder, name: &str, c_out: usize, c_in: usize, k: usize) -> (ParamId, ParamId) {
    (
        pb.add(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::LecunUniform { fan_in: c_in * k * k }),
        pb.add(&format!("{name}.bias"), &[c_out], Init::Zeros),
    )
}

fn conv(tape: &Tape, store: &ParamStore, x: &Var, wb: (ParamId, ParamId), stride: usize, pad: usize) -> Result<Var> {
    let (w, b) = (tape.param(store, wb.0), tape.param(store, wb.1));
    Ok(x.conv2d(&w, Some(&b), stride, pad)?)
}

/// Four independent 3x3 convolutions of the recovered superpixel map with
/// strides 4 to 32.
#[derive(Clone, Debug)]
pub struct SuperpixelFpn {
    convs: Vec<(ParamId, ParamId)>,
}

impl SuperpixelFpn {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Self {
        let convs = STRIDES
            .iter()
            .enumerate()
            .map(|(l, _)| conv_params(pb, &format!("s{}", l + 2), dim, dim, 3))
            .collect();
        SuperpixelFpn { convs }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, recovered: &Var) -> Result<Vec<Var>> {
        let s = recovered.shape();
        if s.len() != 3 {
            return Err(precondition(format!("superpixel pyramid expects C x H x W, got {s:?}")));
        }
        crate::patch_graph::check_divisible(s[1], s[2])?;
        self.convs
            .iter()
            .zip(STRIDES)
            .map(|(&wb, stride)| conv(tape, store, recovered, wb, stride, 1))
            .collect()
    }
}

/// Per-level merge of the image and superpixel pyramids followed by a 3x3
/// convolution.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub mode: FusionMode,
    convs: Vec<(ParamId, ParamId)>,
}

impl Fusion {
    pub fn new(pb: &mut ParamBuilder, dim: usize, mode: FusionMode) -> Self {
        let c_in = match mode {
            FusionMode::Add => dim,
            FusionMode::Concat => 2 * dim,
        };
        let convs = (0..STRIDES.len())
            .map(|l| conv_params(pb, &format!("p{}", l + 2), dim, c_in, 3))
            .collect();
        Fusion { mode, convs }
    }

    pub fn conv_weights(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.convs.iter().map(|wb| wb.0)
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, image: &[Var], sp: &[Var]) -> Result<Vec<Var>> {
        if image.len() != self.convs.len() || sp.len() != self.convs.len() {
            return Err(precondition("fusion needs four levels from each pyramid"));
        }
        image
            .iter()
            .zip(sp)
            .zip(&self.convs)
            .map(|((f, s), &wb)| {
                if f.shape() != s.shape() {
                    return Err(precondition(format!(
                        "fusion level shapes differ: {:?} vs {:?}",
                        f.shape(),
                        s.shape()
                    )));
                }
                let merged = match self.mode {
                    FusionMode::Add => f.add(s)?,
                    FusionMode::Concat => Var::concat0(&[f.clone(), s.clone()])?,
                };
                conv(tape, store, &merged, wb, 1, 1)
            })
            .collect()
    }
}

/// Superpixel branch: GCN, unpooling, pyramid and fusion.
#[derive(Clone, Debug)]
pub struct SuperpixelBranch {
    pub gcn: SpGcn,
    pub fpn: SuperpixelFpn,
    pub fusion: Fusion,
}

impl SuperpixelBranch {
    pub fn new(pb: &mut ParamBuilder, hidden: usize, dim: usize, mode: FusionMode) -> Self {
        SuperpixelBranch {
            gcn: pb.scope("gcn", |pb| SpGcn::new(pb, hidden, dim)),
            fpn: pb.scope("pyramid", |pb| SuperpixelFpn::new(pb, dim)),
            fusion: pb.scope("fusion", |pb| Fusion::new(pb, dim, mode)),
        }
    }

    /// Fused pyramid `P2..P5` from the image pyramid and a superpixel graph.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, image: &[Var], graph: &SuperpixelGraph) -> Result<Vec<Var>> {
        let nodes = self.gcn.forward(tape, store, &graph.normalized, &graph.features)?;
        let recovered = unpool(&nodes, &graph.map)?;
        let sp = self.fpn.forward(tape, store, &recovered)?;
        self.fusion.forward(tape, store, image, &sp)
    }
}

/// Shapes of the superpixel branch for an `h x w` input with `dim`
/// channels: the recovered map and the four strided pyramid levels.
pub fn superpixel_shapes(dim: usize, h: usize, w: usize) -> Result<([usize; 3], Vec<[usize; 3]>)> {
    crate::patch_graph::check_divisible(h, w)?;
    let out = |n: usize, s: usize| (n + 2 - 3) / s + 1;
    let levels = STRIDES.iter().map(|&s| [dim, out(h, s), out(w, s)]).collect();
    Ok(([dim, h, w], levels))
}

/// Anchors of all levels in `(level, y, x, ratio)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    pub boxes: Vec<BBox>,
    /// Index range of each level inside `boxes`.
    pub level_offsets: Vec<usize>,
}

impl Anchors {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Pyramid level id (2 to 5) of anchor `i`.
    pub fn level_of(&self, i: usize) -> usize {
        2 + self.level_offsets.iter().skip(1).filter(|&&o| o <= i).count()
    }
}

/// One anchor per cell and ratio with centers at `(i + 0.5) * stride`.
/// A ratio `r` gives height `size * sqrt(r)` and width `size / sqrt(r)`.
pub fn generate_anchors(level_shapes: &[(usize, usize)], sizes: &[f64], ratios: &[f64]) -> Anchors {
    let mut boxes = Vec::new();
    let mut level_offsets = Vec::with_capacity(level_shapes.len());
    for (l, &(h, w)) in level_shapes.iter().enumerate() {
        level_offsets.push(boxes.len());
        let stride = STRIDES[l] as f64;
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
                for &r in ratios {
                    let s = r.sqrt();
                    boxes.push(BBox::from_center(cx, cy, sizes[l] / s, sizes[l] * s));
                }
            }
        }
    }
    Anchors { boxes, level_offsets }
}

/// Shared 3x3 conv with GeLU, then 1x1 objectness and box-delta convs.
#[derive(Clone, Debug)]
pub struct RpnHead {
    shared: (ParamId, ParamId),
    cls: (ParamId, ParamId),
    reg: (ParamId, ParamId),
    pub anchors_per_cell: usize,
}

/// Raw RPN outputs per level: `A x H x W` logits and `4A x H x W` deltas.
pub struct RpnLevelOutput {
    pub logits: Var,
    pub deltas: Var,
}

impl RpnHead {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Self {
        let a = ANCHOR_RATIOS.len();
        RpnHead {
            shared: conv_params(pb, "shared", dim, dim, 3),
            cls: (
                pb.add("cls.weight", &[a, dim, 1, 1], Init::Uniform { bound: 0.01 }),
                pb.add("cls.bias", &[a], Init::Zeros),
            ),
            reg: (
                pb.add("reg.weight", &[4 * a, dim, 1, 1], Init::Uniform { bound: 0.01 }),
                pb.add("reg.bias", &[4 * a], Init::Zeros),
            ),
            anchors_per_cell: a,
        }
    }

    pub fn cls_weight(&self) -> ParamId {
        self.cls.0
    }

    pub fn forward_levels(&self, tape: &Tape, store: &ParamStore, levels: &[Var]) -> Result<Vec<RpnLevelOutput>> {
        levels
            .iter()
            .map(|p| {
                let h = conv(tape, store, p, self.shared, 1, 1)?.gelu()?;
                Ok(RpnLevelOutput {
                    logits: conv(tape, store, &h, self.cls, 1, 0)?,
                    deltas: conv(tape, store, &h, self.reg, 1, 0)?,
                })
            })
            .collect()
    }

    /// Objectness logits `N x 1` and deltas `N x 4` in anchor order.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, levels: &[Var]) -> Result<(Var, Var)> {
        let a = self.anchors_per_cell;
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        for out in self.forward_levels(tape, store, levels)? {
            let s = out.logits.shape();
            let cells = s[1] * s[2];
            logits.push(out.logits.reshape(&[a, cells])?.transpose()?.reshape(&[cells * a, 1])?);
            deltas.push(out.deltas.reshape(&[4 * a, cells])?.transpose()?.reshape(&[cells * a, 4])?);
        }
        Ok((Var::concat0(&logits)?, Var::concat0(&deltas)?))
    }
}

/// Region proposal with its objectness probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

/// Settings for [`decode_and_select`].
#[derive(Clone, Copy, Debug)]
pub struct SelectParams {
    pub pre_nms_top: usize,
    pub nms_iou: f64,
    pub post_nms_top: usize,
    pub min_size: f64,
}

impl From<&RpnConfig> for SelectParams {
    fn from(c: &RpnConfig) -> Self {
        SelectParams {
            pre_nms_top: c.pre_nms_top,
            nms_iou: c.nms_iou,
            post_nms_top: c.post_nms_top,
            min_size: c.min_size,
        }
    }
}

/// Top-scoring anchors, decoded, clipped to the `width x height` image,
/// filtered by size and suppressed; at most `post_nms_top` survive.
pub fn decode_and_select(
    logits: &[f64],
    deltas: &[f64],
    anchors: &[BBox],
    width: f64,
    height: f64,
    p: &SelectParams,
) -> Result<Vec<Proposal>> {
    let n = anchors.len();
    if logits.len() != n || deltas.len() != 4 * n {
        return Err(precondition(format!(
            "{n} anchors with {} logits and {} deltas",
            logits.len(),
            deltas.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b));
    if p.pre_nms_top < n {
        order.select_nth_unstable_by(p.pre_nms_top, cmp);
        order.truncate(p.pre_nms_top);
    }
    order.sort_by(cmp);
    let mut boxes = Vec::with_capacity(order.len());
    let mut scores = Vec::with_capacity(order.len());
    for &i in &order {
        let b = BoxCoder::RPN.decode(&deltas[4 * i..4 * i + 4], &anchors[i]).clip(width, height);
        if b.width() >= p.min_size && b.height() >= p.min_size {
            boxes.push(b);
            scores.push(spgnn_core::kernels::sigmoid(logits[i]));
        }
    }
    Ok(nms(&boxes, &scores, p.nms_iou)
        .into_iter()
        .take(p.post_nms_top)
        .map(|i| Proposal { bbox: boxes[i], score: scores[i] })
        .collect())
}
