//! Superpixel partition and graph properties on random images.

use proptest::prelude::*;
use spgnn_core::{Rng, Tensor};
use spgnn_model::superpixel::{
    normalize_adjacency, slic_segment, superpixel_adjacency, superpixel_centroids, superpixel_features, SlicParams,
    SuperpixelGraph, SuperpixelMap, SIGMA2,
};
use spgnn_model::Image;
use spgnn_testkit as tk;

/// Smooth color gradients with a few sharp-edged rectangles and pixel noise.
fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = Rng::seed(seed);
    let base = [rng.uniform(), rng.uniform(), rng.uniform()];
    let rects: Vec<([usize; 4], [f64; 3])> = (0..rng.index(1, 5))
        .map(|_| {
            let (x, y) = (rng.index(0, w - 4), rng.index(0, h - 4));
            let r = [x, y, rng.index(x + 2, w + 1), rng.index(y + 2, h + 1)];
            (r, [rng.uniform(), rng.uniform(), rng.uniform()])
        })
        .collect();
    let noise: Vec<f64> = (0..h * w).map(|_| rng.range(-0.03, 0.03)).collect();
    Image::from_fn(h, w, |y, x| {
        let mut c = [base[0] * x as f64 / w as f64, base[1] * y as f64 / h as f64, base[2]];
        for (r, col) in &rects {
            if x >= r[0] && x < r[2] && y >= r[1] && y < r[3] {
                c = *col;
            }
        }
        let n = noise[y * w + x];
        [c[0] + n, c[1] + n, c[2] - n]
    })
    .unwrap()
}

fn rgb_pixels(img: &Image) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.push(img.get(y, x));
        }
    }
    out
}

fn centroid_points(map: &SuperpixelMap) -> Vec<[f64; 2]> {
    let (w, h) = (map.width(), map.height());
    let mut sum = vec![[0.0; 2]; map.count()];
    for (p, &l) in map.labels().iter().enumerate() {
        sum[l][0] += (p % w) as f64;
        sum[l][1] += (p / w) as f64;
    }
    sum.iter()
        .zip(map.sizes())
        .map(|(s, &n)| [s[0] / n as f64 / (w - 1) as f64, s[1] / n as f64 / (h - 1) as f64])
        .collect()
}

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration.
fn spectral_radius(a: &Tensor) -> f64 {
    let m = a.shape()[0];
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let next: Vec<f64> = (0..m).map(|i| (0..m).map(|j| a.data()[i * m + j] * v[j]).sum()).collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = next.iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Sum over segments of squared color deviation from the segment mean.
fn color_spread(img: &Image, labels: &[usize], m: usize) -> f64 {
    let px = rgb_pixels(img);
    let means = tk::mean_colors(&px, labels, m);
    px.iter()
        .zip(labels)
        .map(|(p, &l)| (0..3).map(|c| (p[c] - means[l][c]).powi(2)).sum::<f64>())
        .sum()
}

fn grid_labels(h: usize, w: usize, rows: usize, cols: usize) -> Vec<usize> {
    (0..h * w).map(|p| ((p / w) * rows / h) * cols + (p % w) * cols / w).collect()
}

fn check_graph(img: &Image, params: &SlicParams) -> Result<(), TestCaseError> {
    let g = SuperpixelGraph::segment(img, params).unwrap();
    let (w, h, m) = (img.width(), img.height(), g.map.count());
    let labels = g.map.labels();

    prop_assert_eq!(labels.len(), w * h);
    prop_assert!(labels.iter().all(|&l| l < m));
    let mut sizes = vec![0usize; m];
    labels.iter().for_each(|&l| sizes[l] += 1);
    prop_assert!(sizes.iter().all(|&s| s > 0));
    prop_assert_eq!(sizes.as_slice(), g.map.sizes());
    prop_assert!(tk::components_per_label(labels, w, h).iter().all(|&c| c == 1));

    let px = rgb_pixels(img);
    let means = tk::mean_colors(&px, labels, m);
    let flat: Vec<f64> = means.iter().flatten().copied().collect();
    prop_assert_eq!(g.features.data(), flat.as_slice());
    for c in 0..3 {
        let lo = px.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
        let hi = px.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(means.iter().all(|f| f[c] >= lo - 1e-12 && f[c] <= hi + 1e-12));
    }

    let aff = tk::gaussian_affinity(&centroid_points(&g.map), SIGMA2);
    let a = g.adjacency.data();
    for i in 0..m {
        prop_assert_eq!(a[i * m + i], 1.0);
        for j in 0..m {
            prop_assert!((a[i * m + j] - aff[i][j]).abs() <= 1e-12);
            prop_assert_eq!(a[i * m + j], a[j * m + i]);
        }
    }

    let row: Vec<f64> = (0..m).map(|i| aff[i].iter().sum()).collect();
    let n = g.normalized.data();
    for i in 0..m {
        for j in 0..m {
            let want = aff[i][j] / (row[i] * row[j]).sqrt();
            prop_assert!((n[i * m + j] - want).abs() <= 1e-12);
            prop_assert_eq!(n[i * m + j], n[j * m + i]);
        }
    }
    prop_assert!(spectral_radius(&g.normalized) <= 1.0 + 1e-9);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn superpixel_graph_properties(seed in 0u64..100_000, h in 32usize..64, w in 32usize..64, m in 4usize..40) {
        let img = random_image(seed, h, w);
        check_graph(&img, &SlicParams { m_target: m, ..SlicParams::default() })?;
    }
}

#[test]
fn slic_follows_color_better_than_a_grid() {
    for seed in 0..10 {
        let img = random_image(seed, 48, 48);
        let map = slic_segment(&img, &SlicParams { m_target: 36, ..SlicParams::default() }).unwrap();
        let slic = color_spread(&img, map.labels(), map.count());
        let grid = color_spread(&img, &grid_labels(48, 48, 6, 6), 36);
        assert!(slic <= grid, "seed {seed}: slic {slic} grid {grid}");
    }
}

#[test]
fn normalized_row_sums_can_exceed_one() {
    // Two far nodes each close to a hub: the hub row of the normalized
    // matrix sums above one, while the spectral radius stays at one.
    let c = Tensor::new(&[3, 2], vec![0.5, 0.5, 0.0, 0.0, 1.0, 1.0]).unwrap();
    let n = normalize_adjacency(&superpixel_adjacency(&c).unwrap()).unwrap();
    let hub: f64 = n.data()[..3].iter().sum();
    assert!(hub > 1.0, "{hub}");
    assert!((spectral_radius(&n) - 1.0).abs() < 1e-9);
}

#[test]
fn centroids_and_features_are_consistent_with_the_map() {
    let img = random_image(1, 32, 40);
    let map = slic_segment(&img, &SlicParams { m_target: 12, ..SlicParams::default() }).unwrap();
    let c = superpixel_centroids(&map);
    let want: Vec<f64> = centroid_points(&map).into_iter().flatten().collect();
    for (a, b) in c.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(superpixel_features(&img, &map).unwrap().shape(), vec![map.count(), 3]);
}
