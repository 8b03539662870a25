//! Raw numeric kernels: strided GEMM, im2col convolution, GeLU.

/// Borrowed strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `out (m x n) = a (m x k) * b (k x n)`, or `+=` when `accumulate` is set.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    out: &mut [f64],
    accumulate: bool,
) {
    assert!(out.len() >= m * n);
    let span = |r: &MatRef<'_>, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * r.row_stride + (cols as isize - 1) * r.col_stride + 1
        }
    };
    assert!(span(&a, m, k) as usize <= a.data.len());
    assert!(span(&b, k, n) as usize <= b.data.len());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis, `None` when it would be < 1.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold `x` (C x H x W) into columns of shape (C*kh*kw) x (oh*ow).
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.out_len();
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: fold columns back, summing overlaps.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_len();
    let mut out = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of `x` with `w` (C' x C x kh x kw). Returns the output
/// and the unfolded input, which the backward pass reuses.
pub fn conv2d_forward(x: &[f64], w: &[f64], c_out: usize, g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let cols = if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        x.to_vec()
    } else {
        im2col(x, g)
    };
    let k = g.patch_len();
    let n = g.out_len();
    let mut out = vec![0.0; c_out * n];
    gemm(
        c_out,
        k,
        n,
        MatRef::row_major(w, k),
        MatRef::row_major(&cols, n),
        &mut out,
        false,
    );
    (out, cols)
}

/// Weight gradient: `dW = dY * cols^T`.
pub fn conv2d_grad_weight(grad_out: &[f64], cols: &[f64], c_out: usize, g: &ConvGeom) -> Vec<f64> {
    let k = g.patch_len();
    let n = g.out_len();
    let mut dw = vec![0.0; c_out * k];
    gemm(
        c_out,
        n,
        k,
        MatRef::row_major(grad_out, n),
        MatRef::transposed(cols, n),
        &mut dw,
        false,
    );
    dw
}

/// Input gradient: `dX = col2im(W^T * dY)`.
pub fn conv2d_grad_input(grad_out: &[f64], w: &[f64], c_out: usize, g: &ConvGeom) -> Vec<f64> {
    let k = g.patch_len();
    let n = g.out_len();
    let mut dcols = vec![0.0; k * n];
    gemm(
        k,
        c_out,
        n,
        MatRef::transposed(w, k),
        MatRef::row_major(grad_out, n),
        &mut dcols,
        false,
    );
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        dcols
    } else {
        col2im(&dcols, g)
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of exact GeLU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            oh: conv_out_extent(5, 3, 2, 1).unwrap(),
            ow: conv_out_extent(4, 2, 2, 1).unwrap(),
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841345).abs() < 1e-5);
        assert!((gelu(100.0) - 100.0).abs() < 1e-6);
    }

    #[test]
    fn conv_extent() {
        assert_eq!(conv_out_extent(896, 3, 4, 1), Some(224));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
    }
}
