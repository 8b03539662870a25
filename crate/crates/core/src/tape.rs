//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and a closure mapping the output gradient to input gradients.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid (and deterministic) reverse topological order.
//!
//! Tapes are single-threaded; run independent forward passes on separate
//! tapes and merge their [`ParamGrads`] in a fixed order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, MatRef};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Maps the gradient of a node's output to gradients of its parents.
/// The mask tells which parents actually need a gradient.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    needs_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Gradients of a scalar with respect to every parameter it reached,
/// ordered by parameter id.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<(ParamId, Tensor)>,
}

impl ParamGrads {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(id, g)| (*id, g))
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|i| &self.grads[i].1)
    }

    /// Sum another gradient set into this one.
    pub fn merge(&mut self, other: ParamGrads) {
        for (id, g) in other.grads {
            match self.grads.binary_search_by_key(&id, |(i, _)| *i) {
                Ok(i) => self.grads[i].1.add_assign(&g),
                Err(i) => self.grads.insert(i, (id, g)),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, g) in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        param: Option<ParamId>,
        needs_grad: bool,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            param,
            needs_grad,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Record a value that takes no gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, None, false)
    }

    /// Record a parameter leaf. Repeated calls for the same id share a node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&node) = self.inner.borrow().params.get(&id) {
            return Var {
                tape: self.clone(),
                id: node,
            };
        }
        let v = self.push_node(store.get(id).value.clone(), Vec::new(), None, Some(id), true);
        self.inner.borrow_mut().params.insert(id, v.id);
        v
    }

    /// Record an operation defined outside this module.
    ///
    /// `backward` receives the output gradient and a mask of which inputs
    /// need gradients, and returns one optional gradient per input.
    pub fn push_op(
        &self,
        op: &'static str,
        inputs: &[&Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        let needs_grad = inputs.iter().any(|v| v.needs_grad());
        let parents = inputs.iter().map(|v| v.id).collect();
        let backward: Option<BackwardFn> = if needs_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push_node(value, parents, backward, None, needs_grad))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn gradients(&self, loss: &Var) -> Result<ParamGrads> {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = ParamGrads::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                out.grads.push((pid, g));
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let parent_grads = backward(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        out.grads.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    /// Accumulate `d loss / d value` into every reachable `Parameter::grad`.
    pub fn backward(&self, loss: &Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads);
        Ok(())
    }
}

fn shape_mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_shape(&self, other: &Var, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(shape_mismatch(op, &a, &b));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "add")?;
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape.push_op("add", &[self, other], value, |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "sub")?;
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.push_op("sub", &[self, other], value, |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let value = a.zip_map(&b, |x, y| x * y);
        self.tape.push_op("mul", &[self, other], value, move |g, m| {
            vec![
                m[0].then(|| g.zip_map(&b, |g, y| g * y)),
                m[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&self, s: f64) -> Result<Var> {
        let value = self.value().scale(s);
        self.tape
            .push_op("scale", &[self], value, move |g, _| vec![Some(g.scale(s))])
    }

    /// Sum of a list of equally shaped nodes.
    pub fn sum_all(vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("sum_all", "empty input"))?;
        let mut value = (*first.value()).clone();
        for v in &vars[1..] {
            first.same_shape(v, "sum_all")?;
            value.add_assign(&v.value());
        }
        let refs: Vec<&Var> = vars.iter().collect();
        let n = vars.len();
        first
            .tape
            .push_op("sum_all", &refs, value, move |g, _| vec![Some(g.clone()); n])
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (a, b) = (self.value(), other.value());
        let value = a.matmul(&b)?;
        let (m, k) = a.dims2("matmul")?;
        let (_, n) = b.dims2("matmul")?;
        self.tape.push_op("matmul", &[self, other], value, move |g, mask| {
            let ga = mask[0].then(|| {
                let mut out = Tensor::zeros(&[m, k]);
                kernels::gemm(
                    m,
                    n,
                    k,
                    MatRef::row_major(g.data(), n),
                    MatRef::transposed(b.data(), n),
                    out.data_mut(),
                    false,
                );
                out
            });
            let gb = mask[1].then(|| {
                let mut out = Tensor::zeros(&[k, n]);
                kernels::gemm(
                    k,
                    m,
                    n,
                    MatRef::transposed(a.data(), k),
                    MatRef::row_major(g.data(), n),
                    out.data_mut(),
                    false,
                );
                out
            });
            vec![ga, gb]
        })
    }

    /// Add a length-`D` bias to every row of an `N x D` matrix.
    pub fn add_row_bias(&self, bias: &Var) -> Result<Var> {
        let x = self.value();
        let (n, d) = x.dims2("add_row_bias")?;
        let b = bias.value();
        if b.len() != d {
            return Err(shape_mismatch("add_row_bias", &[d], b.shape()));
        }
        let mut value = (*x).clone();
        for r in 0..n {
            for (v, bb) in value.data_mut()[r * d..(r + 1) * d].iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let bshape = b.shape().to_vec();
        self.tape.push_op("add_row_bias", &[self, bias], value, move |g, mask| {
            let gb = mask[1].then(|| {
                let mut acc = vec![0.0; d];
                for r in 0..n {
                    for (a, v) in acc.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += v;
                    }
                }
                Tensor::new(&bshape, acc).expect("bias shape")
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// `x W + b` for `x: N x D_in`, `W: D_in x D_out`, `b: D_out`.
    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row_bias(b),
            None => Ok(y),
        }
    }

    pub fn transpose(&self) -> Result<Var> {
        let value = self.value().transpose2()?;
        self.tape.push_op("transpose", &[self], value, |g, _| {
            vec![Some(g.transpose2().expect("2-D gradient"))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = (*x).clone().reshape(shape)?;
        self.tape.push_op("reshape", &[self], value, move |g, _| {
            vec![Some(g.clone().reshape(&old).expect("reshape back"))]
        })
    }

    pub fn gelu(&self) -> Result<Var> {
        let x = self.value();
        let value = x.map(kernels::gelu);
        self.tape.push_op("gelu", &[self], value, move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| g * kernels::gelu_grad(x)))]
        })
    }

    pub fn sigmoid(&self) -> Result<Var> {
        let value = self.value().map(kernels::sigmoid);
        let y = value.clone();
        self.tape.push_op("sigmoid", &[self], value, move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| g * y * (1.0 - y)))]
        })
    }

    pub fn sum(&self) -> Result<Var> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum());
        self.tape.push_op("sum", &[self], value, move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// 2-D cross-correlation of a `C x H x W` map with `C' x C x kh x kw`
    /// weights and an optional length-`C'` bias.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value();
        let w = weight.value();
        let (c, h, wd) = x.dims3("conv2d")?;
        let (c_out, c_in, kh, kw) = match w.shape() {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(shape_mismatch("conv2d", &[0, c, 0, 0], s)),
        };
        if c_in != c {
            return Err(shape_mismatch("conv2d", &[c_out, c, kh, kw], w.shape()));
        }
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::invalid("conv2d", "kernel and stride must be positive"));
        }
        let (oh, ow) = match (
            kernels::conv_out_extent(h, kh, stride, pad),
            kernels::conv_out_extent(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("non-positive output extent for {h}x{wd} input, {kh}x{kw} kernel, stride {stride}, pad {pad}"),
                ))
            }
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let (mut out, cols) = kernels::conv2d_forward(x.data(), w.data(), c_out, &geom);
        let n = oh * ow;
        if let Some(b) = bias {
            let bv = b.value();
            if bv.len() != c_out {
                return Err(shape_mismatch("conv2d bias", &[c_out], bv.shape()));
            }
            for (co, bb) in bv.data().iter().enumerate() {
                out[co * n..(co + 1) * n].iter_mut().for_each(|v| *v += bb);
            }
        }
        let value = Tensor::new(&[c_out, oh, ow], out)?;
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let wshape = w.shape().to_vec();
        let has_bias = bias.is_some();
        self.tape.push_op("conv2d", &inputs, value, move |g, mask| {
            let gx = mask[0].then(|| {
                let d = kernels::conv2d_grad_input(g.data(), w.data(), c_out, &geom);
                Tensor::new(&[c, h, wd], d).expect("conv input grad")
            });
            let gw = mask[1].then(|| {
                let d = kernels::conv2d_grad_weight(g.data(), &cols, c_out, &geom);
                Tensor::new(&wshape, d).expect("conv weight grad")
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(mask[2].then(|| {
                    let gd = g.data();
                    Tensor::from_fn(&[c_out], |co| gd[co * n..(co + 1) * n].iter().sum())
                }));
            }
            res
        })
    }

    /// Nearest-neighbor 2x upsampling of a `C x H x W` map.
    pub fn upsample_nearest2(&self) -> Result<Var> {
        let x = self.value();
        let (c, h, w) = x.dims3("upsample_nearest2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = x.data();
        let value = Tensor::from_fn(&[c, oh, ow], |i| {
            let ch = i / (oh * ow);
            let y = (i / ow) % oh;
            let xx = i % ow;
            xd[(ch * h + y / 2) * w + xx / 2]
        });
        self.tape.push_op("upsample_nearest2", &[self], value, move |g, _| {
            let gd = g.data();
            let mut out = Tensor::zeros(&[c, h, w]);
            let od = out.data_mut();
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        od[(ch * h + y / 2) * w + xx / 2] += gd[(ch * oh + y) * ow + xx];
                    }
                }
            }
            vec![Some(out)]
        })
    }

    /// Concatenate along the leading axis (rows of a matrix, channels of a map).
    pub fn concat0(vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("concat0", "empty input"))?;
        let values: Vec<Rc<Tensor>> = vars.iter().map(Var::value).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(values.len());
        for v in &values {
            if v.shape()[1..] != tail[..] {
                return Err(shape_mismatch("concat0", &tail, &v.shape()[1..]));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
            sizes.push(v.shape().to_vec());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        let refs: Vec<&Var> = vars.iter().collect();
        first.tape.push_op("concat0", &refs, value, move |g, mask| {
            let mut off = 0;
            sizes
                .iter()
                .zip(mask)
                .map(|(s, &m)| {
                    let n: usize = s.iter().product();
                    let part = m.then(|| Tensor::new(s, g.data()[off..off + n].to_vec()).expect("slice"));
                    off += n;
                    part
                })
                .collect()
        })
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "empty input"))?;
        let values: Vec<Rc<Tensor>> = vars.iter().map(Var::value).collect();
        let (rows, _) = values[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (r, c) = v.dims2("concat_cols")?;
            if r != rows {
                return Err(shape_mismatch("concat_cols", &[rows, c], v.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (v, &c) in values.iter().zip(&widths) {
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(v.row(r));
            }
            off += c;
        }
        let value = Tensor::new(&[rows, total], data)?;
        let refs: Vec<&Var> = vars.iter().collect();
        first.tape.push_op("concat_cols", &refs, value, move |g, mask| {
            let mut off = 0;
            widths
                .iter()
                .zip(mask)
                .map(|(&c, &m)| {
                    let part = m.then(|| {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        Tensor::new(&[rows, c], d).expect("slice")
                    });
                    off += c;
                    part
                })
                .collect()
        })
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let x = self.value();
        let (r, c) = x.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::invalid("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let value = Tensor::new(&[len, c], x.data()[start * c..(start + len) * c].to_vec())?;
        self.tape.push_op("slice_rows", &[self], value, move |g, _| {
            let mut out = Tensor::zeros(&[r, c]);
            out.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
            vec![Some(out)]
        })
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let x = self.value();
        let (r, c) = x.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::invalid("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let mut d = Vec::with_capacity(r * len);
        for row in 0..r {
            d.extend_from_slice(&x.row(row)[start..start + len]);
        }
        let value = Tensor::new(&[r, len], d)?;
        self.tape.push_op("slice_cols", &[self], value, move |g, _| {
            let mut out = Tensor::zeros(&[r, c]);
            let od = out.data_mut();
            for row in 0..r {
                od[row * c + start..row * c + start + len].copy_from_slice(&g.data()[row * len..(row + 1) * len]);
            }
            vec![Some(out)]
        })
    }

    /// Gather flat elements: `out.flat[i] = self.flat[indices[i]]`, reshaped
    /// to `shape`. The backward pass scatter-adds.
    pub fn gather(&self, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value();
        let n = x.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather", format!("index {bad} out of range {n}")));
        }
        let xd = x.data();
        let value = Tensor::new(shape, indices.iter().map(|&i| xd[i]).collect())?;
        let xshape = x.shape().to_vec();
        self.tape.push_op("gather", &[self], value, move |g, _| {
            let mut out = Tensor::zeros(&xshape);
            let od = out.data_mut();
            for (&i, v) in indices.iter().zip(g.data()) {
                od[i] += v;
            }
            vec![Some(out)]
        })
    }

    /// Rows `rows` of a matrix, in the given order (repeats allowed).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value().dims2("gather_rows")?;
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range {r}")));
        }
        let idx = rows.iter().flat_map(|&i| (i * c)..(i + 1) * c).collect();
        self.gather(idx, &[rows.len(), c])
    }

    /// Mean softmax cross-entropy of `N x C` logits against class indices.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Var> {
        let x = self.value();
        let (n, c) = x.dims2("softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(shape_mismatch("softmax_cross_entropy", &[n], &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("target {t} out of range for {c} classes"),
            ));
        }
        let mut probs = Tensor::zeros(&[n, c]);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[t];
            for (p, v) in probs.data_mut()[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let targets = targets.to_vec();
        self.tape.push_op("softmax_cross_entropy", &[self], value, move |g, _| {
            let s = g.item() / n as f64;
            let mut out = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                out.data_mut()[r * c + t] -= 1.0;
            }
            out.data_mut().iter_mut().for_each(|v| *v *= s);
            vec![Some(out)]
        })
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Var> {
        let x = self.value();
        if targets.len() != x.len() {
            return Err(shape_mismatch("bce_with_logits", x.shape(), &[targets.len()]));
        }
        let n = x.len() as f64;
        let loss: f64 = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(loss / n);
        let targets = targets.to_vec();
        self.tape.push_op("bce_with_logits", &[self], value, move |g, _| {
            let s = g.item() / n;
            let mut out = x.map(kernels::sigmoid);
            for (o, t) in out.data_mut().iter_mut().zip(&targets) {
                *o = (*o - t) * s;
            }
            vec![Some(out)]
        })
    }

    /// Mean smooth-L1 distance to `target`:
    /// `0.5 d^2 / beta` when `|d| < beta`, else `|d| - 0.5 beta`.
    pub fn smooth_l1(&self, target: &Tensor, beta: f64) -> Result<Var> {
        let x = self.value();
        if x.shape() != target.shape() {
            return Err(shape_mismatch("smooth_l1", x.shape(), target.shape()));
        }
        if beta <= 0.0 {
            return Err(Error::invalid("smooth_l1", "beta must be positive"));
        }
        let diff = x.zip_map(target, |a, b| a - b);
        let n = diff.len() as f64;
        let loss: f64 = diff
            .data()
            .iter()
            .map(|&d| {
                if d.abs() < beta {
                    0.5 * d * d / beta
                } else {
                    d.abs() - 0.5 * beta
                }
            })
            .sum();
        let value = Tensor::scalar(loss / n);
        self.tape.push_op("smooth_l1", &[self], value, move |g, _| {
            let s = g.item() / n;
            vec![Some(diff.map(|d| {
                s * if d.abs() < beta { d / beta } else { d.signum() }
            }))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Init, ParamBuilder};
    use crate::rng::Rng;

    fn store_with(shape: &[usize], values: &[f64]) -> (ParamStore, ParamId) {
        let mut b = ParamBuilder::new();
        let id = b.add("w", shape, Init::Zeros);
        let mut s = b.build(&mut Rng::seed(0));
        s.get_mut(id).value.data_mut().copy_from_slice(values);
        (s, id)
    }

    #[test]
    fn sum_gives_ones() {
        let (mut s, id) = store_with(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let t = Tape::new();
        let loss = t.param(&s, id).sum().unwrap();
        t.backward(&loss, &mut s).unwrap();
        assert!(s.get(id).grad.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_gives_two_w_and_accumulates() {
        let (mut s, id) = store_with(&[1], &[3.0]);
        for expected in [6.0, 12.0] {
            let t = Tape::new();
            let w = t.param(&s, id);
            let loss = w.mul(&w).unwrap().sum().unwrap();
            t.backward(&loss, &mut s).unwrap();
            assert_eq!(s.get(id).grad.item(), expected);
        }
        s.zero_grads();
        assert_eq!(s.get(id).grad.item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut s, id) = store_with(&[2], &[1.0, 2.0]);
        let t = Tape::new();
        let w = t.param(&s, id);
        assert!(t.backward(&w, &mut s).is_err());
    }

    #[test]
    fn loss_fixtures() {
        let t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[3, 4]));
        let ce = logits.softmax_cross_entropy(&[0, 1, 3]).unwrap();
        assert!((ce.item() - 4f64.ln()).abs() < 1e-12);
        let two = t.constant(Tensor::zeros(&[1, 2]));
        assert!((two.softmax_cross_entropy(&[0]).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        let confident = t.constant(Tensor::new(&[1, 3], vec![100.0, 0.0, 0.0]).unwrap());
        assert!(confident.softmax_cross_entropy(&[0]).unwrap().item() < 1e-40);
        assert!(logits.softmax_cross_entropy(&[4, 0, 0]).is_err());

        let p = t.constant(Tensor::new(&[3], vec![0.0, 1.0, 3.0]).unwrap());
        let zero = Tensor::zeros(&[3]);
        let same = p.smooth_l1(&p.value(), 1.0).unwrap();
        assert_eq!(same.item(), 0.0);
        let one = t.constant(Tensor::scalar(1.0)).smooth_l1(&Tensor::scalar(0.0), 1.0).unwrap();
        assert_eq!(one.item(), 0.5);
        let three = t.constant(Tensor::scalar(3.0)).smooth_l1(&Tensor::scalar(0.0), 1.0).unwrap();
        assert_eq!(three.item(), 2.5);
        assert!(p.smooth_l1(&Tensor::zeros(&[2]), 1.0).is_err());
        assert!((p.smooth_l1(&zero, 1.0).unwrap().item() - (0.5 + 2.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn conv_fixtures() {
        let t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 4, 4], 5.0));
        let k = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = x.conv2d(&k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2]);
        assert!(y.value().data().iter().all(|&v| v == 45.0));

        let img = t.constant(Tensor::from_fn(&[2, 3, 5], |i| i as f64 * 0.25 - 1.0));
        let mut ident = Tensor::zeros(&[2, 2, 1, 1]);
        ident.data_mut()[0] = 1.0;
        ident.data_mut()[3] = 1.0;
        let same = img.conv2d(&t.constant(ident), None, 1, 0).unwrap();
        assert_eq!(*same.value(), *img.value());

        let big = t.constant(Tensor::zeros(&[1, 2, 2]));
        let k5 = t.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(big.conv2d(&k5, None, 1, 0).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let t = Tape::new();
        let x = t.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite { .. })));
    }
}
