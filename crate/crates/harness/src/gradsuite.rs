//! Central-difference gradient checks of every differentiable operation.

use spgnn_core::{GradCheck, Init, ParamBuilder, ParamStore, Rng, Tape, Tensor, Var};
use spgnn_eval::BBox;
use spgnn_model::detect_head::{roi_align, BoxHead};
use spgnn_model::graph_conv::{GcnBlock, GraphConvLayer};
use spgnn_model::patch_graph::knn_graph;
use spgnn_model::sprpn::{unpool, Fusion, FusionMode, RpnHead, SpGcn};
use spgnn_model::superpixel::{SlicParams, SuperpixelGraph};
use spgnn_model::Image;
use serde::Serialize;

use crate::error::Result;

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Finite-difference step.
pub const GRAD_EPS: f64 = 1e-3;

pub const OPERATIONS: [&str; 13] = [
    "matmul",
    "conv2d",
    "gelu",
    "graph_conv",
    "gcn_block",
    "spgcn",
    "unpool",
    "roi_align",
    "rpn_head",
    "box_head",
    "fusion",
    "bce_loss",
    "smooth_l1_loss",
];

/// Result of one operation at one seed.
#[derive(Clone, Debug, Serialize)]
pub struct GradResult {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

fn random(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.range(-bound, bound))
}

/// `N x D` nodes whose values in each column are a shuffled ladder with
/// spacing 0.25, so no two neighbors are within a finite-difference step.
fn ladder_nodes(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for c in 0..d {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for (i, &r) in order.iter().enumerate() {
            t.data_mut()[i * d + c] = 0.25 * (r as f64 - n as f64 / 2.0) + rng.range(0.0, 0.02);
        }
    }
    t
}

/// Contract an output with fixed random weights so every element matters.
fn project(tape: &Tape, out: &Var, rng: &mut Rng) -> spgnn_core::Result<Var> {
    let w = random(rng, &out.shape(), 1.0);
    out.mul(&tape.constant(w))?.sum()
}

fn check(
    op: &'static str,
    seed: u64,
    store: &mut ParamStore,
    f: impl Fn(&Tape, &ParamStore) -> spgnn_core::Result<Var>,
) -> Result<GradResult> {
    let gc = GradCheck { eps: GRAD_EPS, max_coords_per_param: None, seed };
    let r = gc.run(store, f)?;
    Ok(GradResult { op, seed, max_rel_error: r.max_rel_error, coords: r.coords_checked })
}

fn model_err(e: spgnn_model::ModelError) -> spgnn_core::Error {
    match e {
        spgnn_model::ModelError::Numeric(e) => e,
        other => spgnn_core::Error::invalid("grad_suite", other.to_string()),
    }
}

fn small_graph(seed: u64) -> Result<SuperpixelGraph> {
    let mut rng = Rng::seed(seed);
    let tint: Vec<[f64; 3]> = (0..16).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect();
    let img = Image::from_fn(32, 32, |y, x| tint[(y / 8) * 4 + x / 8])?;
    Ok(SuperpixelGraph::segment(&img, &SlicParams { m_target: 8, ..SlicParams::default() })?)
}

/// Run the check for `op` at `seed`.
pub fn check_operation(op: &str, seed: u64) -> Result<GradResult> {
    let mut rng = Rng::seed(1000 + seed);
    let mut pb = ParamBuilder::new();
    let u = Init::Uniform { bound: 1.0 };
    match op {
        "matmul" => {
            let a = pb.add("a", &[4, 5], u);
            let b = pb.add("b", &[5, 3], u);
            let mut store = pb.build(&mut rng);
            let r = rng.clone();
            check("matmul", seed, &mut store, |t, s| {
                project(t, &t.param(s, a).matmul(&t.param(s, b))?, &mut r.clone())
            })
        }
        "conv2d" => {
            let x = pb.add("x", &[2, 7, 6], u);
            let w = pb.add("w", &[3, 2, 3, 3], u);
            let b = pb.add("b", &[3], u);
            let mut store = pb.build(&mut rng);
            let r = rng.clone();
            check("conv2d", seed, &mut store, |t, s| {
                let y = t.param(s, x).conv2d(&t.param(s, w), Some(&t.param(s, b)), 2, 1)?;
                project(t, &y, &mut r.clone())
            })
        }
        "gelu" => {
            let x = pb.add("x", &[6, 5], Init::Uniform { bound: 3.0 });
            let mut store = pb.build(&mut rng);
            let r = rng.clone();
            check("gelu", seed, &mut store, |t, s| project(t, &t.param(s, x).gelu()?, &mut r.clone()))
        }
        "graph_conv" => {
            let layer = GraphConvLayer::new(&mut pb, 4, 6, 2)?;
            let x = pb.add("x", &[10, 4], Init::Zeros);
            let mut store = pb.build(&mut rng);
            let nodes = ladder_nodes(&mut rng, 10, 4);
            store.get_mut(x).value = nodes.clone();
            let nb = knn_graph(&nodes, 4)?;
            let r = rng.clone();
            check("graph_conv", seed, &mut store, |t, s| {
                let y = layer.forward(t, s, &t.param(s, x), &nb).map_err(model_err)?;
                project(t, &y, &mut r.clone())
            })
        }
        "gcn_block" => {
            let block = GcnBlock::new(&mut pb, 4, 2, 3)?;
            let mut store = pb.build(&mut rng);
            let x = ladder_nodes(&mut rng, 6, 4);
            let r = rng.clone();
            check("gcn_block", seed, &mut store, |t, s| {
                let y = block.forward(t, s, &t.constant(x.clone())).map_err(model_err)?;
                project(t, &y, &mut r.clone())
            })
        }
        "spgcn" => {
            let gcn = SpGcn::new(&mut pb, 6, 4);
            let mut store = pb.build(&mut rng);
            let g = small_graph(seed)?;
            let r = rng.clone();
            check("spgcn", seed, &mut store, |t, s| {
                let y = gcn.forward(t, s, &g.normalized, &g.features).map_err(model_err)?;
                project(t, &y, &mut r.clone())
            })
        }
        "unpool" => {
            let g = small_graph(seed)?;
            let f = pb.add("f", &[g.map.count(), 3], u);
            let mut store = pb.build(&mut rng);
            let r = rng.clone();
            check("unpool", seed, &mut store, |t, s| {
                let y = unpool(&t.param(s, f), &g.map).map_err(model_err)?;
                project(t, &y, &mut r.clone())
            })
        }
        "roi_align" => {
            let m = pb.add("map", &[2, 12, 12], u);
            let mut store = pb.build(&mut rng);
            let boxes: Vec<BBox> = (0..3)
                .map(|_| {
                    let (x, y) = (rng.range(0.0, 30.0), rng.range(0.0, 30.0));
                    BBox::new(x, y, x + rng.range(6.0, 18.0), y + rng.range(6.0, 18.0))
                })
                .collect();
            let r = rng.clone();
            check("roi_align", seed, &mut store, |t, s| {
                let y = roi_align(&t.param(s, m), &boxes, 4.0, 3, 2).map_err(model_err)?;
                project(t, &y, &mut r.clone())
            })
        }
        "rpn_head" => {
            let head = RpnHead::new(&mut pb, 3);
            let mut store = pb.build(&mut rng);
            let levels: Vec<Tensor> = [8, 4, 2, 1].iter().map(|&n| random(&mut rng, &[3, n, n], 1.0)).collect();
            let r = rng.clone();
            check("rpn_head", seed, &mut store, |t, s| {
                let lv: Vec<Var> = levels.iter().map(|l| t.constant(l.clone())).collect();
                let (cls, reg) = head.forward(t, s, &lv).map_err(model_err)?;
                let mut r = r.clone();
                project(t, &cls, &mut r)?.add(&project(t, &reg, &mut r)?)
            })
        }
        "box_head" => {
            let head = BoxHead::new(&mut pb, 12, 8, 3);
            let mut store = pb.build(&mut rng);
            let x = random(&mut rng, &[4, 12], 1.0);
            let r = rng.clone();
            check("box_head", seed, &mut store, |t, s| {
                let (cls, reg) = head.forward(t, s, &t.constant(x.clone())).map_err(model_err)?;
                let mut r = r.clone();
                project(t, &cls, &mut r)?.add(&project(t, &reg, &mut r)?)
            })
        }
        "fusion" => {
            let mode = if seed.is_multiple_of(2) { FusionMode::Concat } else { FusionMode::Add };
            let fusion = Fusion::new(&mut pb, 2, mode);
            let mut store = pb.build(&mut rng);
            let img: Vec<Tensor> = [8, 4, 2, 1].iter().map(|&n| random(&mut rng, &[2, n, n], 1.0)).collect();
            let sp: Vec<Tensor> = [8, 4, 2, 1].iter().map(|&n| random(&mut rng, &[2, n, n], 1.0)).collect();
            let r = rng.clone();
            check("fusion", seed, &mut store, |t, s| {
                let a: Vec<Var> = img.iter().map(|l| t.constant(l.clone())).collect();
                let b: Vec<Var> = sp.iter().map(|l| t.constant(l.clone())).collect();
                let out = fusion.forward(t, s, &a, &b).map_err(model_err)?;
                let mut r = r.clone();
                let parts = out.iter().map(|o| project(t, o, &mut r)).collect::<spgnn_core::Result<Vec<_>>>()?;
                Var::sum_all(&parts)
            })
        }
        "bce_loss" => {
            let x = pb.add("logits", &[12], Init::Uniform { bound: 4.0 });
            let y = pb.add("scores", &[5, 4], u);
            let mut store = pb.build(&mut rng);
            let targets: Vec<f64> = (0..12).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            let classes: Vec<usize> = (0..5).map(|_| rng.index(0, 4)).collect();
            check("bce_loss", seed, &mut store, |t, s| {
                let bce = t.param(s, x).bce_with_logits(&targets)?;
                bce.add(&t.param(s, y).softmax_cross_entropy(&classes)?)
            })
        }
        "smooth_l1_loss" => {
            let x = pb.add("pred", &[6, 4], Init::Zeros);
            let mut store = pb.build(&mut rng);
            let beta = 1.0 / 9.0;
            let target = random(&mut rng, &[6, 4], 1.0);
            // Offsets stay well away from the quadratic/linear seam.
            let pred = Tensor::from_fn(&[6, 4], |i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let mag = if i % 3 == 0 { 0.5 * beta } else { 2.0 * beta + 0.1 * (i as f64) };
                target.data()[i] + sign * mag
            });
            store.get_mut(x).value = pred;
            check("smooth_l1_loss", seed, &mut store, |t, s| t.param(s, x).smooth_l1(&target, beta))
        }
        other => Err(crate::error::HarnessError::Config(format!(
            "unknown operation {other:?}; expected one of {}",
            OPERATIONS.join(", ")
        ))),
    }
}

/// Every operation at seeds `0..seeds`.
pub fn run_grad_suite(seeds: u64) -> Result<Vec<GradResult>> {
    let mut out = Vec::new();
    for op in OPERATIONS {
        for seed in 0..seeds {
            out.push(check_operation(op, seed)?);
        }
    }
    Ok(out)
}
