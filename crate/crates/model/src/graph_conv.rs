//! Max-relative multi-head graph convolution and the residual GCN block.

use spgnn_core::{Init, ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{precondition, Result};
use crate::patch_graph::{knn_graph, Neighbors};

/// Hidden width of the feed-forward sub-block relative to the block width.
pub const FFN_EXPANSION: usize = 4;

fn check_table(n: usize, nb: &Neighbors) -> Result<()> {
    if nb.len() != n {
        return Err(precondition(format!("neighbor table has {} rows for {n} nodes", nb.len())));
    }
    Ok(())
}

/// `out[i] = max_j (x[i] - x[j])` elementwise over the neighbors `j` of `i`.
pub fn max_relative_aggregate(nodes: &Tensor, nb: &Neighbors) -> Result<Tensor> {
    let (n, d) = nodes.dims2("max_relative")?;
    check_table(n, nb)?;
    let (out, _) = aggregate_with_argmin(nodes.data(), n, d, nb);
    Ok(Tensor::new(&[n, d], out)?)
}

/// Forward values plus, per output element, the neighbor that attained the
/// minimum (first in list order on ties).
fn aggregate_with_argmin(x: &[f64], n: usize, d: usize, nb: &Neighbors) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; n * d];
    let mut arg = vec![0usize; n * d];
    for (i, row) in nb.rows().enumerate() {
        let o = &mut out[i * d..(i + 1) * d];
        let a = &mut arg[i * d..(i + 1) * d];
        let first = row[0];
        o.copy_from_slice(&x[first * d..(first + 1) * d]);
        a.fill(first);
        for &j in &row[1..] {
            let xj = &x[j * d..(j + 1) * d];
            for c in 0..d {
                if xj[c] < o[c] {
                    o[c] = xj[c];
                    a[c] = j;
                }
            }
        }
        let xi = &x[i * d..(i + 1) * d];
        for c in 0..d {
            o[c] = xi[c] - o[c];
        }
    }
    (out, arg)
}

/// Differentiable [`max_relative_aggregate`]. The gradient of each output
/// element goes `+1` to the node and `-1` to the minimizing neighbor.
pub fn max_relative(x: &Var, nb: &Neighbors) -> Result<Var> {
    let value = x.value();
    let (n, d) = value.dims2("max_relative")?;
    check_table(n, nb)?;
    let (out, arg) = aggregate_with_argmin(value.data(), n, d, nb);
    let out = Tensor::new(&[n, d], out)?;
    Ok(x.tape().push_op("max_relative", &[x], out, move |g, _| {
        let gd = g.data();
        let mut dx = vec![0.0; n * d];
        for (e, (&gv, &j)) in gd.iter().zip(&arg).enumerate() {
            dx[e] += gv;
            dx[j * d + e % d] -= gv;
        }
        vec![Some(Tensor::new(&[n, d], dx).expect("gradient shape"))]
    })?)
}

/// Multi-head max-relative graph convolution.
///
/// The aggregate is split into `heads` contiguous column chunks; chunk `k`
/// is multiplied by rows `k` of the stacked head projections, which are
/// stored as a `D_in x D_out/heads` matrix, and the results are concatenated.
#[derive(Clone, Debug)]
pub struct GraphConvLayer {
    pub weight: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
}

impl GraphConvLayer {
    pub fn new(pb: &mut ParamBuilder, d_in: usize, d_out: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_in.is_multiple_of(heads) || !d_out.is_multiple_of(heads) {
            return Err(precondition(format!(
                "graph conv dims {d_in}->{d_out} not divisible by {heads} heads"
            )));
        }
        let weight = pb.add(
            "psi",
            &[d_in, d_out / heads],
            Init::LecunUniform { fan_in: d_in / heads },
        );
        Ok(GraphConvLayer { weight, d_in, d_out, heads })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var, nb: &Neighbors) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(precondition(format!(
                "graph conv expects N x {}, got {shape:?}",
                self.d_in
            )));
        }
        let phi = max_relative(x, nb)?;
        let w = tape.param(store, self.weight);
        if self.heads == 1 {
            return Ok(phi.matmul(&w)?);
        }
        let chunk = self.d_in / self.heads;
        let outs = (0..self.heads)
            .map(|k| {
                let part = phi.slice_cols(k * chunk, chunk)?;
                part.matmul(&w.slice_rows(k * chunk, chunk)?)
            })
            .collect::<spgnn_core::Result<Vec<_>>>()?;
        Ok(Var::concat_cols(&outs)?)
    }
}

/// Residual branches start small so stacked blocks begin near the identity.
pub const RESIDUAL_GAIN: f64 = 0.1;

fn residual_init(fan_in: usize) -> Init {
    Init::Uniform { bound: RESIDUAL_GAIN * (3.0 / fan_in as f64).sqrt() }
}

/// Graph-conv sub-block and feed-forward sub-block, each with a residual:
///
/// ```text
/// Y = gelu(conv(X Wi)) Wo + X
/// Z = gelu(Y Fi) Fo + Y
/// ```
///
/// Neighbors are rebuilt from `X` on every call.
#[derive(Clone, Debug)]
pub struct GcnBlock {
    pub conv_in: ParamId,
    pub conv_out: ParamId,
    pub conv: GraphConvLayer,
    pub ffn_in: ParamId,
    pub ffn_out: ParamId,
    pub dim: usize,
    pub k: usize,
}

impl GcnBlock {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, k: usize) -> Result<Self> {
        let hidden = FFN_EXPANSION * dim;
        let conv_in = pb.add("conv_in", &[dim, dim], Init::KaimingUniform { fan_in: dim });
        let conv = pb.scope("graph_conv", |pb| GraphConvLayer::new(pb, dim, dim, heads))?;
        let conv_out = pb.add("conv_out", &[dim, dim], residual_init(dim));
        let ffn_in = pb.add("ffn_in", &[dim, hidden], Init::KaimingUniform { fan_in: dim });
        let ffn_out = pb.add("ffn_out", &[hidden, dim], residual_init(hidden));
        Ok(GcnBlock { conv_in, conv_out, conv, ffn_in, ffn_out, dim, k })
    }

    pub fn params(&self) -> [ParamId; 5] {
        [self.conv_in, self.conv.weight, self.conv_out, self.ffn_in, self.ffn_out]
    }

    /// `N x D` nodes to `N x D` nodes.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(precondition(format!("GCN block expects N x {}, got {shape:?}", self.dim)));
        }
        let nb = knn_graph(&x.value(), self.k.min(shape[0]))?;
        self.forward_with(tape, store, x, &nb)
    }

    /// Forward with a caller-supplied neighbor table.
    pub fn forward_with(&self, tape: &Tape, store: &ParamStore, x: &Var, nb: &Neighbors) -> Result<Var> {
        let p = |id| tape.param(store, id);
        let h = x.matmul(&p(self.conv_in))?;
        let h = self.conv.forward(tape, store, &h, nb)?.gelu()?;
        let y = h.matmul(&p(self.conv_out))?.add(x)?;
        let f = y.matmul(&p(self.ffn_in))?.gelu()?;
        Ok(f.matmul(&p(self.ffn_out))?.add(&y)?)
    }
}
