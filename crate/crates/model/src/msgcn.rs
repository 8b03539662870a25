//! Four-stage graph backbone and the feature pyramid neck.

use serde::{Deserialize, Serialize};
use spgnn_core::{Init, ParamBuilder, ParamId, ParamStore, Tape, Var};

use crate::error::{precondition, ModelError, Result};
use crate::graph_conv::GcnBlock;
use crate::patch_graph::{check_divisible, grid_to_nodes_var, nodes_to_grid_var, Stem};

/// Channel width of every pyramid level at `width_scale = 1`.
pub const PYRAMID_DIM: usize = 256;
/// Pyramid level ids, finest first.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

/// Backbone shape. Widths are multiplied by `width_scale` and rounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsgcnConfig {
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub k: usize,
    pub heads: usize,
    pub width_scale: f64,
}

impl Default for MsgcnConfig {
    fn default() -> Self {
        MsgcnConfig {
            stage_depths: vec![2, 2, 6, 2],
            stage_dims: vec![80, 160, 400, 640],
            k: 9,
            heads: 4,
            width_scale: 1.0,
        }
    }
}

impl MsgcnConfig {
    /// Small profile used for training on a single CPU core.
    pub fn desk() -> Self {
        MsgcnConfig {
            stage_depths: vec![1, 1, 2, 1],
            heads: 2,
            width_scale: 0.125,
            ..Self::default()
        }
    }

    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Stage widths after scaling.
    pub fn dims(&self) -> Vec<usize> {
        self.stage_dims.iter().map(|&d| self.scaled(d)).collect()
    }

    /// Channel width of the pyramid levels after scaling.
    pub fn pyramid_dim(&self) -> usize {
        self.scaled(PYRAMID_DIM)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.stage_depths.len() != 4 || self.stage_dims.len() != 4 {
            return bad("stage_depths and stage_dims must have 4 entries".into());
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return bad(format!("width_scale must be positive, got {}", self.width_scale));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.stage_depths.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.heads == 0 {
            return bad("heads must be at least 1".into());
        }
        for d in self.dims() {
            if d % self.heads != 0 {
                return bad(format!("scaled stage width {d} is not divisible by {} heads", self.heads));
            }
        }
        Ok(())
    }
}

/// Single 3x3 stride-2 convolution between stages.
#[derive(Clone, Debug)]
pub struct Downsample {
    weight: ParamId,
    bias: ParamId,
}

impl Downsample {
    pub fn new(pb: &mut ParamBuilder, c_in: usize, c_out: usize) -> Self {
        Downsample {
            weight: pb.add("weight", &[c_out, c_in, 3, 3], Init::LecunUniform { fan_in: c_in * 9 }),
            bias: pb.add("bias", &[c_out], Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, map: &Var) -> Result<Var> {
        let s = map.shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(precondition(format!("downsample needs even extents, got {s:?}")));
        }
        let (w, b) = (tape.param(store, self.weight), tape.param(store, self.bias));
        Ok(map.conv2d(&w, Some(&b), 2, 1)?)
    }
}

/// Stem, four stages of GCN blocks and the downsamples between them.
#[derive(Clone, Debug)]
pub struct Msgcn {
    pub config: MsgcnConfig,
    stem: Stem,
    stages: Vec<Vec<GcnBlock>>,
    downs: Vec<Downsample>,
}

impl Msgcn {
    pub fn new(pb: &mut ParamBuilder, config: &MsgcnConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let stem = pb.scope("stem", |pb| Stem::new(pb, dims[0]));
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for (s, (&depth, &dim)) in config.stage_depths.iter().zip(&dims).enumerate() {
            let blocks = pb.scope(format!("stage{}", s + 1), |pb| {
                (0..depth)
                    .map(|b| pb.scope(format!("block{b}"), |pb| GcnBlock::new(pb, dim, config.heads, config.k)))
                    .collect::<Result<Vec<_>>>()
            })?;
            stages.push(blocks);
            if s + 1 < dims.len() {
                downs.push(pb.scope(format!("down{}", s + 1), |pb| Downsample::new(pb, dim, dims[s + 1])));
            }
        }
        Ok(Msgcn { config: config.clone(), stem, stages, downs })
    }

    /// Output of each stage as a `C x H x W` map, strides 4 to 32.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, img: &Var) -> Result<Vec<Var>> {
        let mut map = self.stem.forward(tape, store, img)?;
        let mut outs = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            let shape = map.shape();
            let (h, w) = (shape[1], shape[2]);
            let mut nodes = grid_to_nodes_var(&map)?;
            for block in blocks {
                nodes = block.forward(tape, store, &nodes)?;
            }
            let out = nodes_to_grid_var(&nodes, h, w)?;
            if let Some(down) = self.downs.get(s) {
                map = down.forward(tape, store, &out)?;
            }
            outs.push(out);
        }
        Ok(outs)
    }
}

/// Lateral 1x1 convolutions, nearest top-down upsampling and 3x3 smoothing.
#[derive(Clone, Debug)]
pub struct FpnNeck {
    lateral: Vec<(ParamId, ParamId)>,
    smooth: Vec<(ParamId, ParamId)>,
    pub dim: usize,
}

impl FpnNeck {
    pub fn new(pb: &mut ParamBuilder, in_dims: &[usize], dim: usize) -> Self {
        let mut lateral = Vec::new();
        let mut smooth = Vec::new();
        for (l, &c) in in_dims.iter().enumerate() {
            pb.scope(format!("p{}", LEVELS[l]), |pb| {
                lateral.push((
                    pb.add("lateral.weight", &[dim, c, 1, 1], Init::LecunUniform { fan_in: c }),
                    pb.add("lateral.bias", &[dim], Init::Zeros),
                ));
                smooth.push((
                    pb.add("smooth.weight", &[dim, dim, 3, 3], Init::LecunUniform { fan_in: dim * 9 }),
                    pb.add("smooth.bias", &[dim], Init::Zeros),
                ));
            });
        }
        FpnNeck { lateral, smooth, dim }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, levels: &[Var]) -> Result<Vec<Var>> {
        if levels.len() != self.lateral.len() {
            return Err(precondition(format!("neck expects {} levels", self.lateral.len())));
        }
        let p = |id| tape.param(store, id);
        let mut merged: Vec<Option<Var>> = vec![None; levels.len()];
        let mut above: Option<Var> = None;
        for l in (0..levels.len()).rev() {
            let (w, b) = self.lateral[l];
            let mut m = levels[l].conv2d(&p(w), Some(&p(b)), 1, 0)?;
            if let Some(a) = above {
                m = m.add(&a.upsample_nearest2()?)?;
            }
            above = Some(m.clone());
            merged[l] = Some(m);
        }
        merged
            .into_iter()
            .zip(&self.smooth)
            .map(|(m, &(w, b))| Ok(m.expect("every level merged").conv2d(&p(w), Some(&p(b)), 1, 1)?))
            .collect()
    }
}

/// Shapes of the backbone stage outputs for an `h x w` input.
pub fn backbone_shapes(config: &MsgcnConfig, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
    config.validate()?;
    check_divisible(h, w)?;
    Ok(config
        .dims()
        .iter()
        .enumerate()
        .map(|(s, &c)| [c, h >> (s + 2), w >> (s + 2)])
        .collect())
}

/// Shapes of the pyramid levels for an `h x w` input.
pub fn pyramid_shapes(config: &MsgcnConfig, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
    Ok(backbone_shapes(config, h, w)?
        .into_iter()
        .map(|[_, lh, lw]| [config.pyramid_dim(), lh, lw])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use spgnn_core::{Rng, Tensor};

    #[test]
    fn default_shapes_at_896() {
        let s = backbone_shapes(&MsgcnConfig::default(), 896, 896).unwrap();
        assert_eq!(s, vec![[80, 224, 224], [160, 112, 112], [400, 56, 56], [640, 28, 28]]);
        let f = pyramid_shapes(&MsgcnConfig::default(), 896, 896).unwrap();
        assert!(f.iter().all(|l| l[0] == 256));
        assert_eq!(f[3], [256, 28, 28]);
    }

    #[test]
    fn desk_dims() {
        let c = MsgcnConfig::desk();
        assert_eq!(c.dims(), vec![10, 20, 50, 80]);
        c.validate().unwrap();
        let paper_heads = MsgcnConfig { heads: 4, ..c };
        assert!(paper_heads.validate().is_err());
    }

    #[test]
    fn downsample_shapes_and_odd_extent() {
        let mut pb = ParamBuilder::new();
        let d = Downsample::new(&mut pb, 4, 8);
        let store = pb.build(&mut Rng::seed(0));
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 14, 10], 1.0));
        assert_eq!(d.forward(&tape, &store, &x).unwrap().shape(), vec![8, 7, 5]);
        let odd = tape.constant(Tensor::full(&[4, 15, 15], 1.0));
        assert!(d.forward(&tape, &store, &odd).is_err());
    }

    #[test]
    fn forward_matches_shape_inference() {
        let cfg = MsgcnConfig {
            stage_depths: vec![1, 1, 1, 1],
            stage_dims: vec![8, 16, 16, 32],
            ..MsgcnConfig::default()
        };
        let mut pb = ParamBuilder::new();
        let net = Msgcn::new(&mut pb, &cfg).unwrap();
        let neck = pb.scope("neck", |pb| FpnNeck::new(pb, &cfg.dims(), 12));
        let store = pb.build(&mut Rng::seed(2));
        let tape = Tape::new();
        let img = tape.constant(Tensor::from_fn(&[3, 64, 64], |i| (i % 17) as f64 / 17.0));
        let outs = net.forward(&tape, &store, &img).unwrap();
        let got: Vec<Vec<usize>> = outs.iter().map(Var::shape).collect();
        let want: Vec<Vec<usize>> = backbone_shapes(&cfg, 64, 64).unwrap().iter().map(|s| s.to_vec()).collect();
        assert_eq!(got, want);
        let pyr = neck.forward(&tape, &store, &outs).unwrap();
        assert_eq!(pyr[0].shape(), vec![12, 16, 16]);
        assert_eq!(pyr[3].shape(), vec![12, 2, 2]);
    }

    #[test]
    fn zero_neck_gives_zero_pyramid() {
        let mut pb = ParamBuilder::new();
        let neck = FpnNeck::new(&mut pb, &[2, 3, 4, 5], 6);
        let store = pb.build(&mut Rng::seed(0));
        let tape = Tape::new();
        let levels: Vec<Var> = [2usize, 3, 4, 5]
            .iter()
            .enumerate()
            .map(|(l, &c)| tape.constant(Tensor::zeros(&[c, 16 >> l, 16 >> l])))
            .collect();
        for f in neck.forward(&tape, &store, &levels).unwrap() {
            assert!(f.value().data().iter().all(|&v| v == 0.0));
        }
    }
}
