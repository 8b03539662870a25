//! Finite-difference checks for every differentiable tape operation.

use proptest::prelude::*;
use spgnn_core::{GradCheck, Init, ParamBuilder, ParamId, ParamStore, Rng, Tape, Tensor};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TOL: f64 = 1e-4;

fn store(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut b = ParamBuilder::new();
    let ids = shapes
        .iter()
        .map(|(n, s)| b.add(n, s, Init::Uniform { bound: 1.0 }))
        .collect();
    (b.build(&mut Rng::seed(seed)), ids)
}

fn check(
    shapes: &[(&str, &[usize])],
    f: impl Fn(&Tape, &ParamStore, &[ParamId]) -> spgnn_core::Result<spgnn_core::Var>,
) {
    for seed in SEEDS {
        let (mut s, ids) = store(shapes, seed);
        let report = GradCheck::default().run(&mut s, |t, s| f(t, s, &ids)).unwrap();
        assert!(
            report.max_rel_error <= TOL,
            "seed {seed}: {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

/// Fixed random weights used to turn any tensor into a scalar.
fn probe(t: &Tape, shape: &[usize], seed: u64) -> spgnn_core::Var {
    let mut r = Rng::seed(1000 + seed);
    t.constant(Tensor::from_fn(shape, |_| r.range(-1.0, 1.0)))
}

fn contract(x: &spgnn_core::Var) -> spgnn_core::Result<spgnn_core::Var> {
    let p = probe(x.tape(), &x.shape(), 0);
    x.mul(&p)?.sum()
}

#[test]
fn matmul_gelu_chain() {
    check(&[("a", &[3, 4]), ("b", &[4, 5])], |t, s, ids| {
        let y = t.param(s, ids[0]).matmul(&t.param(s, ids[1]))?.gelu()?;
        contract(&y)
    });
}

#[test]
fn conv2d_with_bias_stride_and_pad() {
    for (stride, pad) in [(1, 1), (2, 1), (4, 1), (1, 0)] {
        check(&[("x", &[2, 7, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])], |t, s, ids| {
            let y = t
                .param(s, ids[0])
                .conv2d(&t.param(s, ids[1]), Some(&t.param(s, ids[2])), stride, pad)?;
            contract(&y)
        });
    }
}

#[test]
fn elementwise_and_layout_ops() {
    check(&[("a", &[4, 6]), ("b", &[4, 6]), ("bias", &[6])], |t, s, ids| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let x = a.mul(&b)?.add(&a)?.sub(&b.scale(0.5)?)?;
        let x = x.add_row_bias(&t.param(s, ids[2]))?.sigmoid()?;
        let left = x.slice_cols(0, 2)?;
        let right = x.slice_cols(2, 4)?;
        let y = spgnn_core::Var::concat_cols(&[right, left])?;
        let y = spgnn_core::Var::concat0(&[y.slice_rows(1, 2)?, y.transpose()?.reshape(&[4, 6])?])?;
        let g = y.gather_rows(&[0, 3, 3, 5])?;
        contract(&g)
    });
}

#[test]
fn upsample_and_channel_concat() {
    check(&[("x", &[2, 3, 2]), ("y", &[1, 6, 4])], |t, s, ids| {
        let up = t.param(s, ids[0]).upsample_nearest2()?;
        let cat = spgnn_core::Var::concat0(&[up, t.param(s, ids[1])])?;
        contract(&cat.gelu()?)
    });
}

#[test]
fn losses() {
    check(&[("logits", &[5, 4])], |t, s, ids| {
        t.param(s, ids[0]).softmax_cross_entropy(&[0, 3, 1, 1, 2])
    });
    check(&[("logits", &[7])], |t, s, ids| {
        t.param(s, ids[0]).bce_with_logits(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
    });
    // Targets offset by 0.5 keep |d| away from the kink at beta.
    check(&[("pred", &[6])], |t, s, ids| {
        let target = Tensor::new(&[6], vec![0.5, -1.7, 2.5, 0.0, 1.9, -0.6]).unwrap();
        t.param(s, ids[0]).smooth_l1(&target, 1.0 / 9.0)
    });
}

fn random_matrix(n: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(&[n, n], |_| rng.range(-1.0, 1.0))
}

proptest! {
    #[test]
    fn matmul_is_associative(seed in 0u64..1000) {
        let mut rng = Rng::seed(seed);
        let (a, b, c) = (random_matrix(8, &mut rng), random_matrix(8, &mut rng), random_matrix(8, &mut rng));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.max_abs().max(1.0);
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn identity_1x1_conv_is_exact(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in 0u64..100) {
        let mut rng = Rng::seed(seed);
        let t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[c, h, w], |_| rng.normal()));
        let mut k = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            k.data_mut()[i * c + i] = 1.0;
        }
        let y = x.conv2d(&t.constant(k), None, 1, 0).unwrap();
        prop_assert_eq!(&*y.value(), &*x.value());
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent(w in -10.0f64..10.0, g in -10.0f64..10.0, lr in 0.0f64..1.0) {
        let mut b = ParamBuilder::new();
        let id = b.add("w", &[1], Init::Zeros);
        let mut s = b.build(&mut Rng::seed(0));
        s.get_mut(id).value.data_mut()[0] = w;
        s.get_mut(id).grad.data_mut()[0] = g;
        spgnn_core::Sgd::new(lr, 0.0, 0.0).step(&mut s);
        prop_assert_eq!(s.get(id).value.item(), w - lr * g);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let (s, ids) = store(&[("x", &[3, 9, 9]), ("w", &[4, 3, 3, 3])], 11);
        let t = Tape::new();
        let y = t.param(&s, ids[0]).conv2d(&t.param(&s, ids[1]), None, 2, 1).unwrap().gelu().unwrap();
        let g = t.gradients(&y.sum().unwrap()).unwrap();
        let mut bits: Vec<u64> = y.value().data().iter().map(|v| v.to_bits()).collect();
        for (_, t) in g.iter() {
            bits.extend(t.data().iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}
