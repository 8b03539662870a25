//! Image stem, node layout and k-nearest-neighbor edges.

use spgnn_core::{Init, ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{precondition, Result};

/// Total downsampling of the deepest pyramid level.
pub const MAX_STRIDE: usize = 32;

/// Neighbor lists: row `i` holds `k` distinct node indices, `i` first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    k: usize,
    table: Vec<usize>,
}

impl Neighbors {
    pub fn from_table(table: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 || !table.len().is_multiple_of(k) {
            return Err(precondition(format!("neighbor table of {} entries with k={k}", table.len())));
        }
        let n = table.len() / k;
        if let Some(&bad) = table.iter().find(|&&j| j >= n) {
            return Err(precondition(format!("neighbor index {bad} out of range {n}")));
        }
        Ok(Neighbors { k, table })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.table.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.table[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.table.chunks_exact(self.k)
    }
}

/// Node features on a grid together with their neighbor lists.
#[derive(Clone, Debug)]
pub struct PatchGraph {
    pub nodes: Tensor,
    pub grid: (usize, usize),
    pub neighbors: Neighbors,
}

impl PatchGraph {
    /// Lay out a `C x H x W` map as nodes and connect each to its `k` nearest.
    pub fn from_map(map: &Tensor, k: usize) -> Result<Self> {
        let (_, h, w) = map.dims3("patch_graph")?;
        let nodes = grid_to_nodes(map)?;
        let neighbors = knn_graph(&nodes, k)?;
        Ok(PatchGraph { nodes, grid: (h, w), neighbors })
    }
}

/// For each row of an `N x D` matrix: itself, then the `k - 1` nearest other
/// rows by Euclidean distance. Ties go to the lower index.
pub fn knn_graph(features: &Tensor, k: usize) -> Result<Neighbors> {
    let (n, d) = features.dims2("knn_graph")?;
    if k == 0 || k > n {
        return Err(precondition(format!("knn_graph needs 1 <= k <= N, got k={k}, N={n}")));
    }
    let x = features.data();
    let mut table = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        cand.clear();
        for j in (0..n).filter(|&j| j != i) {
            let xj = &x[j * d..(j + 1) * d];
            let dist: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((dist, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let m = k - 1;
        if m > 0 && m < cand.len() {
            cand.select_nth_unstable_by(m - 1, cmp);
            cand.truncate(m);
        }
        cand.sort_by(cmp);
        table.push(i);
        table.extend(cand.iter().take(m).map(|&(_, j)| j));
    }
    Ok(Neighbors { k, table })
}

/// `C x H x W` to `(H*W) x C`, row-major over the grid.
pub fn grid_to_nodes(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map.dims3("grid_to_nodes")?;
    let n = h * w;
    let src = map.data();
    let mut out = vec![0.0; n * c];
    for ch in 0..c {
        for p in 0..n {
            out[p * c + ch] = src[ch * n + p];
        }
    }
    Ok(Tensor::new(&[n, c], out)?)
}

/// Inverse of [`grid_to_nodes`].
pub fn nodes_to_grid(nodes: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = nodes.dims2("nodes_to_grid")?;
    if n != h * w {
        return Err(precondition(format!("{n} nodes do not fill a {h}x{w} grid")));
    }
    Ok(nodes.transpose2()?.reshape(&[c, h, w])?)
}

/// Differentiable [`grid_to_nodes`].
pub fn grid_to_nodes_var(map: &Var) -> Result<Var> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(precondition(format!("expected C x H x W, got {shape:?}")));
    }
    Ok(map.reshape(&[shape[0], shape[1] * shape[2]])?.transpose()?)
}

/// Differentiable [`nodes_to_grid`].
pub fn nodes_to_grid_var(nodes: &Var, h: usize, w: usize) -> Result<Var> {
    let shape = nodes.shape();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(precondition(format!("{shape:?} nodes do not fill a {h}x{w} grid")));
    }
    Ok(nodes.transpose()?.reshape(&[shape[1], h, w])?)
}

/// Two 3x3 stride-2 convolutions with GeLU between: `3 x H x W` to
/// `out_dim x H/4 x W/4`.
#[derive(Clone, Debug)]
pub struct Stem {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub out_dim: usize,
}

impl Stem {
    pub fn new(pb: &mut ParamBuilder, out_dim: usize) -> Self {
        let mid = out_dim.div_ceil(2).max(1);
        Stem {
            w1: pb.add("conv1.weight", &[mid, 3, 3, 3], Init::KaimingUniform { fan_in: 27 }),
            b1: pb.add("conv1.bias", &[mid], Init::Zeros),
            w2: pb.add("conv2.weight", &[out_dim, mid, 3, 3], Init::LecunUniform { fan_in: mid * 9 }),
            b2: pb.add("conv2.bias", &[out_dim], Init::Zeros),
            out_dim,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, img: &Var) -> Result<Var> {
        let shape = img.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(precondition(format!("stem expects 3 x H x W, got {shape:?}")));
        }
        check_divisible(shape[1], shape[2])?;
        let p = |id| tape.param(store, id);
        let h = img.conv2d(&p(self.w1), Some(&p(self.b1)), 2, 1)?.gelu()?;
        Ok(h.conv2d(&p(self.w2), Some(&p(self.b2)), 2, 1)?)
    }
}

pub fn check_divisible(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(MAX_STRIDE) || !w.is_multiple_of(MAX_STRIDE) || h == 0 || w == 0 {
        return Err(precondition(format!(
            "input {w}x{h} must have sides divisible by {MAX_STRIDE}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use spgnn_core::Rng;

    #[test]
    fn knn_collinear_fixture() {
        let f = Tensor::new(&[3, 1], vec![0.0, 1.0, 10.0]).unwrap();
        let nb = knn_graph(&f, 2).unwrap();
        assert_eq!(nb.row(0), &[0, 1]);
        assert_eq!(nb.row(1), &[1, 0]);
        assert_eq!(nb.row(2), &[2, 1]);
    }

    #[test]
    fn knn_k1_is_self_only() {
        let f = Tensor::from_fn(&[5, 2], |i| i as f64);
        let nb = knn_graph(&f, 1).unwrap();
        for i in 0..5 {
            assert_eq!(nb.row(i), &[i]);
        }
    }

    #[test]
    fn knn_ties_go_to_lower_index() {
        let f = Tensor::zeros(&[4, 3]);
        let nb = knn_graph(&f, 3).unwrap();
        assert_eq!(nb.row(0), &[0, 1, 2]);
        assert_eq!(nb.row(3), &[3, 0, 1]);
    }

    #[test]
    fn knn_rejects_k_above_n() {
        assert!(knn_graph(&Tensor::zeros(&[3, 2]), 4).is_err());
        assert!(knn_graph(&Tensor::zeros(&[3, 2]), 0).is_err());
    }

    #[test]
    fn layout_fixture_and_round_trip() {
        let map = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let nodes = grid_to_nodes(&map).unwrap();
        assert_eq!(nodes.shape(), &[4, 1]);
        assert_eq!(nodes.data(), &[1.0, 2.0, 3.0, 4.0]);
        let m = Tensor::from_fn(&[3, 4, 5], |i| (i as f64).sin());
        assert_eq!(nodes_to_grid(&grid_to_nodes(&m).unwrap(), 4, 5).unwrap(), m);
    }

    #[test]
    fn stem_shapes() {
        let mut pb = ParamBuilder::new();
        let stem = Stem::new(&mut pb, 80);
        let store = pb.build(&mut Rng::seed(0));
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 64, 64], 0.5));
        assert_eq!(stem.forward(&tape, &store, &x).unwrap().shape(), vec![80, 16, 16]);
        let bad = tape.constant(Tensor::full(&[3, 33, 33], 0.5));
        assert!(stem.forward(&tape, &store, &bad).is_err());
    }
}
